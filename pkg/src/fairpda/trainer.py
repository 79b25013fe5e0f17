"""Training loop, checkpointing and the cross-validated experiment protocol."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import tensorio
from .cohort import SplitPlan
from .data import SegmentStore, batches_per_epoch, build_batches
from .errors import ConfigError, NumericalAbort, ValidationError
from .evaluator import MetricsReport, PatientPrediction, pool_patient
from .model import FairPDAModel, ModelConfig
from .objectives import (
    ALIGN_MODES,
    LOSS_MODES,
    GammaEMA,
    ScheduleConfig,
    class_importance_weights,
    coral_loss,
    domain_adversarial_loss,
    fairness_loss,
    lambda_schedule,
    segment_counts,
    task_loss,
    total_objective,
    training_loss,
)

log = logging.getLogger(__name__)


@dataclass
class TrainProtocol:
    mode: str = "UDA"
    loss_mode: str = "ce_pn"
    align_mode: str = "partial_cdan"
    no_warmup: bool = False
    no_mixstyle: bool = False
    no_fairness: bool = False
    window_s: float = 2.0
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 1e-3
    adam_beta1: float = 0.0
    weight_decay: float = 0.0
    seed: int = 0
    lambda_d_max: float = 1.0
    lambda_fair_max: float = 0.5
    warmup_fraction: float = 0.2
    gamma_ema: float = 0.0  # 0 disables smoothing of the class weights
    divergence_limit: float = 1e4

    def __post_init__(self):
        if self.mode not in ("DG", "UDA"):
            raise ConfigError(f"mode must be DG or UDA, got {self.mode!r}")
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(f"loss_mode must be one of {LOSS_MODES}")
        if self.align_mode not in ALIGN_MODES:
            raise ConfigError(f"align_mode must be one of {ALIGN_MODES}")
        if self.epochs < 1 or self.batch_size < 2:
            raise ConfigError("need epochs >= 1 and batch_size >= 2")

    def model_config(self, base: ModelConfig) -> ModelConfig:
        mix = replace(base.mixstyle, active=base.mixstyle.active and not self.no_mixstyle)
        domain_input = "f" if self.align_mode == "dann" else "h"
        return replace(base, mixstyle=mix, domain_input=domain_input)

    def to_dict(self) -> dict:
        return asdict(self)


class Trainer:
    """One training run on one fold.

    ``step`` counts optimiser updates; batches are regenerated from
    ``(seed, epoch)`` so a restored trainer continues with exactly the data it
    would have seen.
    """

    def __init__(
        self,
        protocol: TrainProtocol,
        model_cfg: ModelConfig,
        store: SegmentStore,
        train_uids,
        adapt_uids=(),
    ):
        self.protocol = protocol
        self.store = store
        self.source_idx = store.indices_for(train_uids)
        self.source_idx = self.source_idx[store.role[self.source_idx] == "source"]
        if len(self.source_idx) == 0:
            raise ValidationError("no training segments for this fold")
        self.target_idx = store.indices_for(adapt_uids) if protocol.mode == "UDA" else None
        if protocol.mode == "UDA" and len(self.target_idx) == 0:
            raise ValidationError("UDA mode needs a non-empty adaptation set")
        self.counts = segment_counts(store.patient_of(self.source_idx))
        self.source_datasets = sorted(set(store.dataset_code[self.source_idx].tolist()))

        cfg = protocol.model_config(replace(model_cfg, input_shape=store.input_shape))
        torch.manual_seed(protocol.seed)
        self.model = FairPDAModel(cfg)
        x_train = store.x[self.source_idx]
        self.model.set_input_stats(float(x_train.mean()), float(x_train.std()))
        self.optimizer = torch.optim.Adam(
            self.model.parameters(),
            lr=protocol.learning_rate,
            betas=(protocol.adam_beta1, 0.999),
            weight_decay=protocol.weight_decay,
        )
        self.steps_per_epoch = batches_per_epoch(len(self.source_idx), protocol.batch_size)
        self.total_steps = protocol.epochs * self.steps_per_epoch
        self.schedule = ScheduleConfig(
            lambda_d_max=protocol.lambda_d_max if protocol.align_mode != "none" else 0.0,
            lambda_fair_max=0.0 if protocol.no_fairness else protocol.lambda_fair_max,
            warmup_fraction=protocol.warmup_fraction,
            total_steps=self.total_steps,
            warmup=not protocol.no_warmup and protocol.warmup_fraction * self.total_steps >= 1,
        )
        self.mix_rng = np.random.default_rng([protocol.seed, 7])
        self.gamma_ema = GammaEMA(protocol.gamma_ema) if protocol.gamma_ema > 0 else None
        self.step = 0
        self.history: list = []

    # ---------------------------------------------------------------- steps

    @property
    def uses_target(self) -> bool:
        return self.protocol.mode == "UDA" and self.protocol.align_mode != "none"

    def _gamma(self, probs: torch.Tensor) -> torch.Tensor:
        gamma = class_importance_weights(probs.detach())
        return self.gamma_ema.update(gamma) if self.gamma_ema is not None else gamma

    def _alignment_loss(self, out, src, n_src: int, lambda_d: float) -> tuple:
        mode = self.protocol.align_mode
        zero = out.logits.new_zeros(())
        if mode == "none":
            return zero, None
        if self.protocol.mode == "UDA":
            pos = torch.arange(n_src)
            neg = torch.arange(n_src, out.f.shape[0])
            pos_labels = src.y
            neg_labels = None
        else:
            # DG: first source dataset plays "source", the others play "target"
            first = torch.from_numpy(src.dataset_code == self.source_datasets[0])
            pos, neg = torch.nonzero(first).flatten(), torch.nonzero(~first).flatten()
            if len(pos) < 2 or len(neg) < 2:
                return zero, None
            pos_labels, neg_labels = src.y[pos], src.y[neg]
        if mode == "coral":
            return lambda_d * coral_loss(out.f[pos], out.f[neg]), None
        disc = torch.sigmoid(out.domain_logit)
        gamma_pos = gamma_neg = None
        if mode == "partial_cdan":
            gamma_pos = self._gamma(out.p[neg])
            if neg_labels is not None:
                gamma_neg = class_importance_weights(out.p[pos].detach())
        loss = domain_adversarial_loss(disc[pos], pos_labels, disc[neg], gamma_pos, neg_labels, gamma_neg)
        return loss, gamma_pos

    def train_step(self, src, tgt) -> dict:
        p = self.protocol
        lambda_d, lambda_fair = lambda_schedule(self.step, self.schedule)
        x, domains = src.x, src.dataset_code
        if self.uses_target:
            x = torch.cat([src.x, tgt.x])
            domains = np.concatenate([src.dataset_code, tgt.dataset_code])
        n_src = src.x.shape[0]
        out = self.model(
            x,
            lambda_d=lambda_d if p.align_mode != "coral" else 0.0,
            lambda_fair=lambda_fair,
            training=True,
            rng=self.mix_rng,
            domains=domains,
        )
        loss_y = task_loss(out.logits[:n_src], src.y, p.loss_mode, src.patient_ids, self.counts)
        loss_d, gamma = self._alignment_loss(out, src, n_src, lambda_d)
        loss_fair = out.logits.new_zeros(()) if p.no_fairness else fairness_loss(out.gender_logits[:n_src], src.gender)
        objective = total_objective(loss_y, loss_d, loss_fair, lambda_d, lambda_fair)
        loss = training_loss(loss_y, loss_d, loss_fair)
        if float(loss.detach()) > p.divergence_limit:
            raise NumericalAbort(f"loss {float(loss.detach()):.4g} exceeds divergence limit at step {self.step}")
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()
        record = {
            "step": self.step,
            "loss_y": float(loss_y.detach()),
            "loss_d": float(loss_d.detach()),
            "loss_fair": float(loss_fair.detach()),
            "objective": objective,
            "lambda_d": lambda_d,
            "lambda_fair": lambda_fair,
            "gamma": None if gamma is None else [float(g) for g in gamma],
        }
        self.step += 1
        self.history.append(record)
        return record

    def run(self, until_step: Optional[int] = None, abort_checkpoint=None) -> list:
        """Train until ``until_step`` (default: the full budget)."""
        until = self.total_steps if until_step is None else min(until_step, self.total_steps)
        p = self.protocol
        while self.step < until:
            epoch, offset = divmod(self.step, self.steps_per_epoch)
            stream = build_batches(self.store, self.source_idx, self.target_idx, p.mode, p.batch_size, p.seed, epoch)
            for b, (src, tgt) in enumerate(stream):
                if b < offset:
                    continue
                if self.step >= until:
                    break
                try:
                    self.train_step(src, tgt)
                except NumericalAbort:
                    if abort_checkpoint is not None:
                        self.save(abort_checkpoint)  # parameters are still those of the last good step
                    raise
        return self.history

    # ------------------------------------------------------------ inference

    @torch.no_grad()
    def predict(self, idx: np.ndarray, batch_size: int = 256) -> np.ndarray:
        return predict_probs(self.model, self.store, idx, batch_size)

    # ---------------------------------------------------------- checkpoints

    def state_tensors(self) -> dict:
        tensors = {f"model.{k}": v.detach().cpu().numpy() for k, v in self.model.state_dict().items()}
        for i, state in self.optimizer.state_dict()["state"].items():
            for key, value in state.items():
                tensors[f"optim.{i}.{key}"] = torch.as_tensor(value).cpu().numpy()
        tensors["rng.torch"] = torch.get_rng_state().numpy()
        return tensors

    def meta(self) -> dict:
        groups = self.optimizer.state_dict()["param_groups"]
        return {
            "protocol": self.protocol.to_dict(),
            "model": self.model.cfg.to_dict(),
            "step": self.step,
            "param_groups": groups,
            "mix_rng": self.mix_rng.bit_generator.state,
            "gamma_ema": None if self.gamma_ema is None or self.gamma_ema.value is None else self.gamma_ema.value.tolist(),
            "history": self.history,
        }

    def save(self, path) -> None:
        tensorio.save_bundle(path, self.state_tensors(), self.meta())

    def restore(self, path) -> None:
        tensors, meta = tensorio.load_bundle(path)
        model_state = {k[len("model.") :]: torch.from_numpy(v) for k, v in tensors.items() if k.startswith("model.")}
        self.model.load_state_dict(model_state)
        opt_state: dict = {}
        for name, value in tensors.items():
            if name.startswith("optim."):
                _, idx, key = name.split(".", 2)
                opt_state.setdefault(int(idx), {})[key] = torch.from_numpy(value)
        self.optimizer.load_state_dict({"state": opt_state, "param_groups": meta["param_groups"]})
        torch.set_rng_state(torch.from_numpy(tensors["rng.torch"]))
        self.mix_rng.bit_generator.state = meta["mix_rng"]
        if self.gamma_ema is not None and meta["gamma_ema"] is not None:
            self.gamma_ema.value = torch.tensor(meta["gamma_ema"])
        self.step = meta["step"]
        self.history = list(meta["history"])


def load_model(path) -> FairPDAModel:
    """Model (eval-ready) from a checkpoint bundle."""
    tensors, meta = tensorio.load_bundle(path)
    model = FairPDAModel(ModelConfig(**meta["model"]))
    model.load_state_dict({k[len("model.") :]: torch.from_numpy(v) for k, v in tensors.items() if k.startswith("model.")})
    model.eval()
    return model


@torch.no_grad()
def predict_probs(model: FairPDAModel, store: SegmentStore, idx: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    for start in range(0, len(idx), batch_size):
        x = torch.from_numpy(store.x[idx[start : start + batch_size]]).unsqueeze(1)
        out.append(model(x, training=False).p.double().numpy())
    return np.concatenate(out) if out else np.zeros((0, 3))


def patient_predictions(model, store: SegmentStore, uids, cohort: str, fold: int) -> list:
    idx = store.indices_for(uids)
    if len(idx) == 0:
        return []
    probs = predict_probs(model, store, idx)
    preds = []
    for uid in sorted(set(store.uid[idx])):
        rows = store.uid[idx] == uid
        pooled, cls = pool_patient(probs[rows])
        first = idx[np.flatnonzero(rows)[0]]
        preds.append(
            PatientPrediction(
                patient_id=str(uid),
                pooled_probs=[float(v) for v in pooled],
                predicted_class=cls,
                true_class=int(store.label[first]),
                gender=["M", "F"][store.gender[first]],
                cohort=cohort,
                dataset_id=str(store.dataset[first]),
                fold=fold,
            )
        )
    return preds


def fold_predictions(model, store, plan: SplitPlan, fold: int) -> list:
    _, test = plan.folds[fold]
    return patient_predictions(model, store, test, "internal", fold) + patient_predictions(
        model, store, sorted(plan.uda_external_eval), "external", fold
    )


def run_experiment(
    protocol: TrainProtocol,
    model_cfg: ModelConfig,
    store: SegmentStore,
    plan: SplitPlan,
    run_dir=None,
    run_name: str = "run",
    fairness_reduction: str = "macro",
    folds=None,
) -> MetricsReport:
    """Train and evaluate every fold of ``plan``; aggregate into a report.

    With ``run_dir`` set, each fold leaves ``fold<i>.ckpt`` and
    ``fold<i>_losses.json`` behind and the report is written to ``report.json``.
    """
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
    if protocol.mode == "UDA" and not plan.uda_adaptation:
        raise ValidationError("UDA protocol needs a split plan with adaptation patients")
    predictions = []
    for fold in folds if folds is not None else range(len(plan.folds)):
        train, test = plan.folds[fold]
        leaked = (set(train) & set(test)) | (set(train) & (plan.uda_adaptation | plan.uda_external_eval))
        if leaked:
            raise ValidationError(f"fold {fold}: patients in both train and evaluation sets: {sorted(leaked)[:5]}")
        trainer = Trainer(protocol, model_cfg, store, train, sorted(plan.uda_adaptation))
        abort_path = run_dir / f"fold{fold}_last_good.ckpt" if run_dir is not None else None
        trainer.run(abort_checkpoint=abort_path)
        log.info("fold %d: %d steps, final task loss %.4f", fold, trainer.step, trainer.history[-1]["loss_y"])
        if run_dir is not None:
            trainer.save(run_dir / f"fold{fold}.ckpt")
            (run_dir / f"fold{fold}_losses.json").write_text(json.dumps(trainer.history, indent=1), encoding="utf-8")
        predictions += fold_predictions(trainer.model, store, plan, fold)
    report = MetricsReport.build(run_name, protocol.to_dict(), predictions, fairness_reduction)
    if run_dir is not None:
        report.save(run_dir / "report.json")
    return report
