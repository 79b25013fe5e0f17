"""Cohort data model, inclusion filters and patient-level split generation.

Patients are identified across datasets by ``uid`` = ``"<dataset_id>:<patient_id>"``
because patient ids are only unique within a dataset.
"""
from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .errors import EmptyCohortError, IntegrityError, ManifestParseError, ValidationError

CLASSES = ("HC", "PD", "ALS")
GENDERS = ("M", "F")
MEDICATION_FLAGS = ("standard", "non_standard", "missing")
ROLES = ("source", "target")

MANIFEST_COLUMNS = (
    "patient_id",
    "dataset_id",
    "class_label",
    "gender",
    "age",
    "exclusion_codes",
    "medication_flag",
    "recording_id",
    "audio_path",
)

# Non-authoritative default: common conditions that alter phonation. Replace
# with the study's own exclusion list when one is available.
DEFAULT_EXCLUDED_CODES = frozenset(
    {
        "stroke",
        "laryngeal_cancer",
        "vocal_fold_paralysis",
        "vocal_fold_nodules",
        "head_neck_surgery",
        "hearing_loss_severe",
        "multiple_sclerosis",
        "dementia",
        "asthma_severe",
        "copd",
    }
)


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    dataset_id: str
    class_label: Optional[str]
    gender: Optional[str]
    age: Optional[int]
    exclusion_codes: frozenset = frozenset()
    medication_flag: Optional[str] = None

    @property
    def uid(self) -> str:
        return f"{self.dataset_id}:{self.patient_id}"

    @property
    def complete(self) -> bool:
        return self.class_label is not None and self.gender is not None and self.age is not None


@dataclass(frozen=True)
class RecordingRecord:
    recording_id: str
    patient_id: str
    dataset_id: str
    audio_path: str
    sample_rate_hz: Optional[int] = None
    duration_s: Optional[float] = None

    @property
    def patient_uid(self) -> str:
        return f"{self.dataset_id}:{self.patient_id}"


@dataclass(frozen=True)
class CohortManifest:
    patients: tuple
    recordings: tuple
    role: str = "source"

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValidationError(f"role must be one of {ROLES}, got {self.role!r}")
        _check_integrity(self.patients, self.recordings)

    @property
    def label_space(self) -> frozenset:
        return frozenset(p.class_label for p in self.patients if p.class_label is not None)

    @property
    def dataset_ids(self) -> list:
        return sorted({p.dataset_id for p in self.patients})

    def patient_uids(self) -> list:
        return sorted(p.uid for p in self.patients)

    def by_uid(self) -> dict:
        return {p.uid: p for p in self.patients}


@dataclass(frozen=True)
class FilterConfig:
    min_age: int = 34
    max_age: int = 80
    excluded_codes: frozenset = DEFAULT_EXCLUDED_CODES
    require_medication_standard: bool = False


@dataclass
class SplitPlan:
    seed: int
    folds: list = field(default_factory=list)  # list of (train_uids, test_uids)
    uda_adaptation: set = field(default_factory=set)
    uda_external_eval: set = field(default_factory=set)

    def to_json(self) -> str:
        doc = {
            "seed": int(self.seed),
            "folds": [{"train": sorted(tr), "test": sorted(te)} for tr, te in self.folds],
            "uda_adaptation": sorted(self.uda_adaptation),
            "uda_external_eval": sorted(self.uda_external_eval),
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SplitPlan":
        doc = json.loads(text)
        return cls(
            seed=doc["seed"],
            folds=[(list(f["train"]), list(f["test"])) for f in doc["folds"]],
            uda_adaptation=set(doc["uda_adaptation"]),
            uda_external_eval=set(doc["uda_external_eval"]),
        )

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SplitPlan":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def _check_integrity(patients, recordings) -> None:
    seen = set()
    for p in patients:
        if p.uid in seen:
            raise IntegrityError(f"duplicate patient {p.uid}")
        seen.add(p.uid)
    rec_seen = set()
    for r in recordings:
        key = (r.dataset_id, r.recording_id)
        if key in rec_seen:
            raise IntegrityError(f"duplicate recording {r.dataset_id}:{r.recording_id}")
        rec_seen.add(key)
        if r.patient_uid not in seen:
            raise IntegrityError(f"recording {r.recording_id} references unknown patient {r.patient_uid}")


def _optional(value: str) -> Optional[str]:
    value = value.strip()
    return value or None


def _parse_row(row: dict, path, line: int):
    try:
        label = _optional(row["class_label"])
        if label is not None and label not in CLASSES:
            raise ValueError(f"class_label {label!r} not in {CLASSES}")
        gender = _optional(row["gender"])
        if gender is not None and gender not in GENDERS:
            raise ValueError(f"gender {gender!r} not in {GENDERS}")
        age_text = _optional(row["age"])
        age = None
        if age_text is not None:
            age = int(age_text)
            if age < 0:
                raise ValueError(f"negative age {age}")
        med = _optional(row["medication_flag"])
        if med is not None and med not in MEDICATION_FLAGS:
            raise ValueError(f"medication_flag {med!r} not in {MEDICATION_FLAGS}")
        codes = frozenset(c.strip() for c in row["exclusion_codes"].split(";") if c.strip())
        pid = row["patient_id"].strip()
        did = row["dataset_id"].strip()
        rid = row["recording_id"].strip()
        if not pid or not did or not rid:
            raise ValueError("patient_id, dataset_id and recording_id are mandatory")
    except (KeyError, ValueError, AttributeError) as exc:
        raise ManifestParseError(path, line, str(exc)) from None
    patient = PatientRecord(pid, did, label, gender, age, codes, med)
    audio = Path(row["audio_path"].strip())
    if not audio.is_absolute():
        audio = Path(path).parent / audio
    recording = RecordingRecord(rid, pid, did, str(audio))
    return patient, recording


def load_manifest(path, role: str = "source") -> CohortManifest:
    """Read a manifest CSV (one row per recording, patient fields repeated)."""
    path = Path(path)
    patients: dict = {}
    recordings = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in MANIFEST_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ManifestParseError(path, 1, f"missing columns {missing}")
        for line, row in enumerate(reader, start=2):
            if None in row or any(v is None for v in row.values()):
                raise ManifestParseError(path, line, "wrong number of fields")
            patient, recording = _parse_row(row, path, line)
            prev = patients.get(patient.uid)
            if prev is None:
                patients[patient.uid] = patient
            elif prev != patient:
                raise IntegrityError(f"{path}:{line}: conflicting fields for patient {patient.uid}")
            recordings.append(recording)
    return CohortManifest(tuple(patients.values()), tuple(recordings), role)


def save_manifest(manifest: CohortManifest, path) -> None:
    by_uid = manifest.by_uid()
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for r in manifest.recordings:
            p = by_uid[r.patient_uid]
            writer.writerow(
                [
                    p.patient_id,
                    p.dataset_id,
                    p.class_label or "",
                    p.gender or "",
                    "" if p.age is None else p.age,
                    ";".join(sorted(p.exclusion_codes)),
                    p.medication_flag or "",
                    r.recording_id,
                    r.audio_path,
                ]
            )


def merge_manifests(manifests: Iterable[CohortManifest], role: Optional[str] = None) -> CohortManifest:
    manifests = list(manifests)
    if not manifests:
        raise ValidationError("nothing to merge")
    role = role or manifests[0].role
    patients = tuple(p for m in manifests for p in m.patients)
    recordings = tuple(r for m in manifests for r in m.recordings)
    return CohortManifest(patients, recordings, role)


def apply_filters(m: CohortManifest, f: FilterConfig) -> CohortManifest:
    if f.min_age > f.max_age:
        raise ValidationError(f"min_age {f.min_age} > max_age {f.max_age}")
    excluded = frozenset(f.excluded_codes)

    def keep(p: PatientRecord) -> bool:
        if not p.complete:
            return False
        if not f.min_age <= p.age <= f.max_age:
            return False
        if p.exclusion_codes & excluded:
            return False
        if f.require_medication_standard and p.medication_flag != "standard":
            return False
        return True

    patients = tuple(p for p in m.patients if keep(p))
    if not patients:
        raise EmptyCohortError("empty cohort after filtering")
    kept = {p.uid for p in patients}
    recordings = tuple(r for r in m.recordings if r.patient_uid in kept)
    return replace(m, patients=patients, recordings=recordings)


def _strata(patients, key) -> dict:
    groups = defaultdict(list)
    for p in patients:
        groups[key(p)].append(p.uid)
    return {k: sorted(v) for k, v in sorted(groups.items())}


def make_cv_splits(m: CohortManifest, k: int, seed: int) -> SplitPlan:
    """Patient-level k-fold CV stratified by (dataset_id, class_label).

    Each stratum is shuffled and dealt round-robin; the dealing position carries
    over between strata so small strata do not all pile into fold 0.
    """
    if k < 2:
        raise ValidationError("k must be >= 2")
    if k > len(m.patients):
        raise ValidationError(f"k={k} exceeds number of patients ({len(m.patients)})")
    rng = np.random.default_rng(seed)
    tests = [[] for _ in range(k)]
    cursor = 0
    for _, uids in _strata(m.patients, lambda p: (p.dataset_id, p.class_label or "")).items():
        order = rng.permutation(len(uids))
        for idx in order:
            tests[cursor % k].append(uids[idx])
            cursor += 1
    everyone = set(m.patient_uids())
    folds = [(sorted(everyone - set(t)), sorted(t)) for t in tests]
    return SplitPlan(seed=seed, folds=folds)


def _allocate(counts: list, total: int) -> list:
    """Largest-remainder apportionment of ``total`` over ``counts``."""
    n = sum(counts)
    quotas = [total * c / n for c in counts]
    alloc = [math.floor(q) for q in quotas]
    rest = total - sum(alloc)
    order = sorted(range(len(counts)), key=lambda i: (-(quotas[i] - alloc[i]), i))
    for i in order[:rest]:
        alloc[i] += 1
    return alloc


def make_uda_split(m: CohortManifest, fraction: float, seed: int, plan: Optional[SplitPlan] = None) -> SplitPlan:
    """Per target dataset: floor(fraction*n) patients (at least 1) go to adaptation."""
    if m.role != "target":
        raise ValidationError("make_uda_split requires a target manifest")
    if not 0 < fraction < 1:
        raise ValidationError("fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    adapt, evaluate = set(), set()
    for dataset_id in m.dataset_ids:
        members = [p for p in m.patients if p.dataset_id == dataset_id]
        n = len(members)
        n_adapt = max(1, math.floor(fraction * n + 1e-9))
        if n - n_adapt < 1:
            raise ValidationError(f"target dataset {dataset_id!r} has {n} patient(s); external eval set would be empty")
        strata = _strata(members, lambda p: p.class_label or "")
        alloc = _allocate([len(v) for v in strata.values()], n_adapt)
        for (_, uids), take in zip(strata.items(), alloc):
            chosen = set(uids[i] for i in rng.permutation(len(uids))[:take])
            adapt |= chosen
            evaluate |= set(uids) - chosen
    plan = plan if plan is not None else SplitPlan(seed=seed)
    plan.uda_adaptation = adapt
    plan.uda_external_eval = evaluate
    return plan
