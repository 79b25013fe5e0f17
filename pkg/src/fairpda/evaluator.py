"""Patient-level pooling, performance metrics, gender fairness gaps and paired tests."""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .cohort import CLASSES
from .errors import ValidationError

K = len(CLASSES)
REPORT_SCHEMA_VERSION = 1
METRIC_KEYS = (
    "int_balacc",
    "int_mcc",
    "int_macro_f1",
    "ext_balacc",
    "ext_mcc",
    "ext_macro_f1",
    "eod",
    "eog",
)
FAIRNESS_REDUCTIONS = ("macro", "max_class", "disease_binary")


@dataclass
class PatientPrediction:
    patient_id: str
    pooled_probs: list
    predicted_class: int
    true_class: int
    gender: str
    cohort: str  # "internal" | "external"
    dataset_id: str = ""
    fold: int = 0

    @property
    def correct(self) -> bool:
        return self.predicted_class == self.true_class


def pool_patient(segment_probs):
    """Soft vote: arithmetic mean of segment probabilities, lowest-index argmax.

    Returns ``(pooled, predicted_class)``.
    """
    probs = np.asarray(segment_probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise ValidationError("pool_patient needs at least one segment probability vector")
    pooled = probs.mean(axis=0)
    return pooled, int(np.argmax(pooled))  # np.argmax returns the first maximum


def confusion_matrix(y_true, y_pred, k: int = K) -> np.ndarray:
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=int), np.asarray(y_pred, dtype=int)), 1)
    return cm


def metrics_from_confusion(cm: np.ndarray):
    """``(balacc, mcc, macro_f1)`` from a K x K confusion matrix (rows = truth).

    BalAcc and macro-F1 average over classes present in the truth and are
    scaled to [0, 100]; MCC is the multiclass (Gorodkin) form, 0 when undefined.
    """
    cm = np.asarray(cm, dtype=np.float64)
    total = cm.sum()
    if total == 0:
        raise ValidationError("empty confusion matrix")
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    tp = np.diag(cm)
    present = support > 0
    recall = tp[present] / support[present]
    f1 = 2 * tp[present] / (support[present] + predicted[present])
    correct = tp.sum()
    cov_tp = correct * total - predicted @ support
    denom = math.sqrt((total**2 - predicted @ predicted) * (total**2 - support @ support))
    mcc = cov_tp / denom if denom > 0 else 0.0
    return 100.0 * float(recall.mean()), float(mcc), 100.0 * float(f1.mean())


def confusion_metrics(y_pred, y_true, k: int = K):
    if len(y_true) == 0:
        raise ValidationError("no patients to score")
    return metrics_from_confusion(confusion_matrix(y_true, y_pred, k))


def _rates(y_true, y_pred, classes):
    """Per-class one-vs-rest (TPR, FPR) dicts; a rate is omitted when undefined."""
    tpr, fpr = {}, {}
    for c in classes:
        pos = y_true == c
        neg = ~pos
        if pos.any():
            tpr[c] = float(np.mean(y_pred[pos] == c))
        if neg.any():
            fpr[c] = float(np.mean(y_pred[neg] == c))
    return tpr, fpr


def fairness_gaps(y_pred, y_true, genders, reduction: str = "macro", k: int = K):
    """Equal-opportunity difference and equalized-odds gap between M and F.

    ``macro``: rates macro-averaged one-vs-rest over classes defined in both
    groups. ``max_class``: largest per-class gap. ``disease_binary``: any
    disease vs healthy (class 0). Returns ``(eod, eog)``; ``(None, None)``
    with a warning when a gender group is absent.
    """
    if reduction not in FAIRNESS_REDUCTIONS:
        raise ValidationError(f"unknown fairness reduction {reduction!r}")
    y_pred, y_true, genders = (np.asarray(a) for a in (y_pred, y_true, genders))
    groups = [genders == "M", genders == "F"]
    if not all(g.any() for g in groups):
        warnings.warn("fairness gaps undefined: a gender group is absent from the evaluation set")
        return None, None
    if reduction == "disease_binary":
        y_true, y_pred = (y_true != 0).astype(int), (y_pred != 0).astype(int)
        classes = [1]
    else:
        classes = list(range(k))
    (tpr_m, fpr_m), (tpr_f, fpr_f) = (_rates(y_true[g], y_pred[g], classes) for g in groups)
    tpr_classes = sorted(set(tpr_m) & set(tpr_f))
    fpr_classes = sorted(set(fpr_m) & set(fpr_f))
    if not tpr_classes:
        warnings.warn("fairness gaps undefined: no class has positives in both gender groups")
        return None, None
    if reduction == "max_class":
        eod = max(abs(tpr_m[c] - tpr_f[c]) for c in tpr_classes)
        fgap = max((abs(fpr_m[c] - fpr_f[c]) for c in fpr_classes), default=0.0)
    else:
        eod = abs(np.mean([tpr_m[c] for c in tpr_classes]) - np.mean([tpr_f[c] for c in tpr_classes]))
        fgap = (
            abs(np.mean([fpr_m[c] for c in fpr_classes]) - np.mean([fpr_f[c] for c in fpr_classes]))
            if fpr_classes
            else 0.0
        )
    return float(eod), float(max(eod, fgap))


def paired_test(correct_a, correct_b, n_resamples: int = 10000, seed: int = 0) -> float:
    """Two-sided sign-flip permutation test on paired per-patient correctness.

    Inputs are 0/1 vectors aligned by patient. The p-value counts the observed
    statistic itself, so it is never below ``1 / (n_resamples + 1)``.
    """
    a = np.asarray(correct_a, dtype=np.float64)
    b = np.asarray(correct_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValidationError("paired_test needs two aligned 1-D correctness vectors")
    d = a - b
    observed = abs(d.sum())
    rng = np.random.default_rng(seed)
    hits = 0
    chunk = 2000
    for start in range(0, n_resamples, chunk):
        m = min(chunk, n_resamples - start)
        signs = rng.integers(0, 2, size=(m, d.size)) * 2 - 1
        hits += int(np.count_nonzero(np.abs(signs @ d) >= observed - 1e-9))
    return (hits + 1) / (n_resamples + 1)


def align_correctness(preds_a, preds_b, cohort: str = "external"):
    """Correctness vectors for two runs keyed by (fold, patient). Raises on mismatch."""

    def keyed(preds):
        return {(p.fold, p.patient_id): int(p.correct) for p in preds if p.cohort == cohort}

    ka, kb = keyed(preds_a), keyed(preds_b)
    if set(ka) != set(kb):
        raise ValidationError("runs were evaluated on different patient sets")
    keys = sorted(ka)
    return np.array([ka[k] for k in keys]), np.array([kb[k] for k in keys])


def significance_label(p: Optional[float]) -> str:
    if p is None:
        return ""
    if p < 0.05:
        return "p<0.05"
    if p < 0.1:
        return "p<0.1"
    return ""


# ------------------------------------------------------------------ report


def score_predictions(preds, fold: int, reduction: str = "macro") -> dict:
    row = {"fold": fold}
    for cohort, prefix in (("internal", "int"), ("external", "ext")):
        chosen = [p for p in preds if p.cohort == cohort]
        if chosen:
            balacc, mcc, f1 = confusion_metrics([p.predicted_class for p in chosen], [p.true_class for p in chosen])
        else:
            balacc = mcc = f1 = None
        row.update({f"{prefix}_balacc": balacc, f"{prefix}_mcc": mcc, f"{prefix}_macro_f1": f1})
    ext = [p for p in preds if p.cohort == "external"]
    if ext:
        eod, eog = fairness_gaps(
            [p.predicted_class for p in ext], [p.true_class for p in ext], [p.gender for p in ext], reduction
        )
    else:
        eod = eog = None
    row.update({"eod": eod, "eog": eog})
    return row


def aggregate(rows) -> dict:
    out = {}
    for key in METRIC_KEYS:
        vals = [r[key] for r in rows if r.get(key) is not None]
        if vals:
            out[key] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)), "n": len(vals)}
        else:
            out[key] = {"mean": None, "std": None, "n": 0}
    return out


@dataclass
class MetricsReport:
    run_name: str
    protocol: dict
    folds: list
    aggregate: dict
    predictions: list = field(default_factory=list)
    pvalues: dict = field(default_factory=dict)
    schema_version: int = REPORT_SCHEMA_VERSION

    @classmethod
    def build(cls, run_name, protocol, predictions, reduction="macro") -> "MetricsReport":
        fold_ids = sorted({p.fold for p in predictions})
        rows = [score_predictions([p for p in predictions if p.fold == f], f, reduction) for f in fold_ids]
        return cls(run_name, protocol, rows, aggregate(rows), list(predictions))

    def patient_predictions(self) -> list:
        return [p if isinstance(p, PatientPrediction) else PatientPrediction(**p) for p in self.predictions]

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["predictions"] = [asdict(p) if isinstance(p, PatientPrediction) else p for p in self.predictions]
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        doc = json.loads(text)
        doc["predictions"] = [PatientPrediction(**p) for p in doc.get("predictions", [])]
        return cls(**doc)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "MetricsReport":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def compare(self, baseline: "MetricsReport", n_resamples: int = 10000, seed: int = 0) -> dict:
        """Paired tests against ``baseline`` on internal and external correctness."""
        result = {}
        mine, theirs = self.patient_predictions(), baseline.patient_predictions()
        for cohort in ("internal", "external"):
            a, b = align_correctness(mine, theirs, cohort)
            p = paired_test(a, b, n_resamples, seed) if a.size else None
            result[cohort] = {"p": p, "label": significance_label(p)}
        self.pvalues[baseline.run_name] = result
        return result


TABLE_COLUMNS = ("Int BalAcc", "Ext BalAcc", "Int MCC", "Ext MCC", "EOD", "EOG")
_TABLE_KEYS = ("int_balacc", "ext_balacc", "int_mcc", "ext_mcc", "eod", "eog")


def _fmt(stat: dict, digits: int) -> str:
    if stat["mean"] is None:
        return "n/a"
    return f"{stat['mean']:.{digits}f} ± {stat['std']:.{digits}f}"


def write_table_csv(reports, path, reference: Optional[str] = None) -> None:
    """Mean ± std per method with a paired-test p-value column against ``reference``."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["Method", *TABLE_COLUMNS, "Ext p-value", "Significance"])
        for rep in reports:
            cells = [_fmt(rep.aggregate[k], 2 if "balacc" in k else 3) for k in _TABLE_KEYS]
            p = rep.pvalues.get(reference, {}).get("external", {}).get("p") if reference else None
            writer.writerow([rep.run_name, *cells, "" if p is None else f"{p:.4g}", significance_label(p)])
