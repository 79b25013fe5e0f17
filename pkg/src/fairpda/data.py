"""In-memory view of a feature cache plus deterministic batch construction."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
import torch

from . import tensorio
from .audio import load_index
from .cohort import CLASSES, GENDERS
from .errors import CacheError, ValidationError


class SegmentStore:
    """All segments of one cache, stacked as ``x[n, n_bands, n_frames]``."""

    def __init__(self, cache_dir):
        self.cache_dir = Path(cache_dir)
        self.index = load_index(self.cache_dir)
        entries = self.index["segments"]
        if not entries:
            raise CacheError(f"{self.cache_dir}: feature index lists no segments")
        mats = []
        for e in entries:
            path = self.cache_dir / e["file"]
            if not path.exists():
                raise CacheError(f"missing cache file for segment {e['dataset_id']}:{e['recording_id']}[{e['segment_index']}]: {path}")
            mats.append(tensorio.load_tensor(path))
        shapes = {m.shape for m in mats}
        if len(shapes) != 1:
            raise CacheError(f"inconsistent segment shapes in cache: {sorted(shapes)}")
        self.x = np.stack(mats).astype(np.float32)
        self.uid = np.array([f"{e['dataset_id']}:{e['patient_id']}" for e in entries])
        self.dataset = np.array([e["dataset_id"] for e in entries])
        self.role = np.array([e.get("role", "source") for e in entries])
        self.label = np.array([CLASSES.index(e["label"]) if e["label"] else -1 for e in entries])
        self.gender = np.array([GENDERS.index(e["gender"]) if e["gender"] else -1 for e in entries])
        datasets = sorted(set(self.dataset))
        self.dataset_code = np.array([datasets.index(d) for d in self.dataset])

    @property
    def input_shape(self) -> tuple:
        return tuple(self.x.shape[1:])

    def __len__(self) -> int:
        return len(self.uid)

    def indices_for(self, uids) -> np.ndarray:
        wanted = set(uids)
        return np.flatnonzero(np.fromiter((u in wanted for u in self.uid), dtype=bool, count=len(self.uid)))

    def patient_of(self, idx) -> list:
        return [str(u) for u in self.uid[idx]]


@dataclass
class SourceBatch:
    x: torch.Tensor
    y: torch.Tensor
    gender: torch.Tensor
    patient_ids: list
    dataset_code: np.ndarray


@dataclass
class TargetBatch:
    """Unlabelled adaptation batch: features and domain only, no class or gender field."""

    x: torch.Tensor
    dataset_code: np.ndarray


def _source_batch(store: SegmentStore, idx: np.ndarray) -> SourceBatch:
    if (store.label[idx] < 0).any() or (store.gender[idx] < 0).any():
        raise ValidationError("source segments need class and gender labels")
    return SourceBatch(
        torch.from_numpy(store.x[idx]).unsqueeze(1),
        torch.from_numpy(store.label[idx]).long(),
        torch.from_numpy(store.gender[idx]).long(),
        store.patient_of(idx),
        store.dataset_code[idx],
    )


def _target_batch(store: SegmentStore, idx: np.ndarray) -> TargetBatch:
    return TargetBatch(torch.from_numpy(store.x[idx]).unsqueeze(1), store.dataset_code[idx])


def batches_per_epoch(n_source: int, batch_size: int) -> int:
    return max(1, n_source // batch_size)


def build_batches(
    store: SegmentStore,
    source_idx: np.ndarray,
    target_idx: Optional[np.ndarray],
    mode: str,
    batch_size: int,
    seed: int,
    epoch: int,
) -> Iterator:
    """Yield ``(SourceBatch, TargetBatch | None)`` for one epoch.

    Source segments are reshuffled each epoch and the incomplete tail batch is
    dropped. In UDA mode the target pool is cycled, reshuffling on every pass,
    so each source batch gets a same-sized target batch. The order is a pure
    function of ``(seed, epoch)``.
    """
    source_idx = np.sort(np.asarray(source_idx))
    if len(source_idx) == 0:
        raise ValidationError("no source segments to train on")
    if mode == "UDA":
        if target_idx is None or len(target_idx) == 0:
            raise ValidationError("UDA mode needs a non-empty target adaptation set")
        target_idx = np.sort(np.asarray(target_idx))
    n_batches = batches_per_epoch(len(source_idx), batch_size)
    size = min(batch_size, len(source_idx))
    order = source_idx[np.random.default_rng([seed, epoch, 0]).permutation(len(source_idx))]
    target_stream = None
    if mode == "UDA":
        trng = np.random.default_rng([seed, epoch, 1])
        needed = n_batches * size
        chunks = []
        while sum(len(c) for c in chunks) < needed:
            chunks.append(target_idx[trng.permutation(len(target_idx))])
        target_stream = np.concatenate(chunks)
    for b in range(n_batches):
        src = _source_batch(store, order[b * size : (b + 1) * size])
        tgt = _target_batch(store, target_stream[b * size : (b + 1) * size]) if target_stream is not None else None
        yield src, tgt
