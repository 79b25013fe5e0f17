"""Sustained-vowel preprocessing and segment-level feature extraction.

Chain: peak-normalise -> resample -> energy VAD trim -> RMS equalise ->
fixed-length windows -> log-Mel / MFCC matrices, written to a per-segment
feature cache with a JSON index.
"""
from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import fft as sp_fft
from scipy import signal
from scipy.io import wavfile

from . import tensorio
from .errors import CacheError, ConfigError, SilentRecordingError, ValidationError

log = logging.getLogger(__name__)

RESAMPLER = "scipy.signal.resample_poly/kaiser(5.0)"


@dataclass(frozen=True)
class PrepConfig:
    target_sr_hz: int = 8000
    window_s: float = 2.0
    overlap: float = 0.5
    pad_mode: str = "auto"  # auto -> none for windows <= 2 s, zero above
    vad_frame_ms: float = 30.0
    vad_threshold_db: float = -40.0

    def __post_init__(self):
        if not 0 <= self.overlap < 1:
            raise ConfigError("overlap must be in [0, 1)")
        if self.target_sr_hz <= 0:
            raise ConfigError("target_sr_hz must be positive")
        if self.window_s <= 0:
            raise ConfigError("window_s must be positive")
        if self.pad_mode not in ("auto", "none", "zero"):
            raise ConfigError(f"unknown pad_mode {self.pad_mode!r}")

    @property
    def effective_pad_mode(self) -> str:
        if self.pad_mode != "auto":
            return self.pad_mode
        return "zero" if self.window_s > 2.0 else "none"


@dataclass(frozen=True)
class FeatureConfig:
    kind: str = "logmel"
    frame_ms: float = 25.0
    hop_ms: float = 10.0
    n_mels: int = 64
    n_mfcc: int = 13
    n_fft: int = 512
    log_floor: float = 1e-10

    def __post_init__(self):
        if self.kind not in ("logmel", "mfcc"):
            raise ConfigError(f"unknown feature kind {self.kind!r}")
        if self.hop_ms > self.frame_ms:
            raise ConfigError("hop_ms must not exceed frame_ms")
        if self.n_mfcc > self.n_mels:
            raise ConfigError("n_mfcc must not exceed n_mels")
        if self.log_floor <= 0:
            raise ConfigError("log_floor must be positive")


# --------------------------------------------------------------------- I/O


def read_wav(path):
    """Read a mono PCM/float WAV as float64 in [-1, 1]. Returns ``(wave, sr)``."""
    sr, data = wavfile.read(path)
    if data.ndim != 1:
        raise ValidationError(f"{path}: expected mono audio, got shape {data.shape}")
    if data.dtype == np.int16:
        wave = data / 32768.0
    elif data.dtype == np.int32:  # 24-bit PCM arrives left-justified in int32
        wave = data / 2147483648.0
    elif data.dtype == np.uint8:
        wave = (data.astype(np.float64) - 128.0) / 128.0
    elif data.dtype in (np.float32, np.float64):
        wave = data.astype(np.float64)
    else:
        raise ValidationError(f"{path}: unsupported sample format {data.dtype}")
    return wave.astype(np.float64), int(sr)


def write_wav(path, wave: np.ndarray, sr: int) -> None:
    pcm = np.clip(np.round(np.asarray(wave) * 32767.0), -32768, 32767).astype(np.int16)
    wavfile.write(path, sr, pcm)


# ---------------------------------------------------------- recording-level


def peak_normalize(wave: np.ndarray) -> np.ndarray:
    wave = np.asarray(wave, dtype=np.float64)
    if wave.size == 0:
        raise ValidationError("zero-length recording")
    peak = np.max(np.abs(wave))
    if peak == 0:
        raise SilentRecordingError("silent recording")
    return wave / peak


def resample(wave: np.ndarray, sr: int, target_sr: int) -> np.ndarray:
    if sr == target_sr:
        return np.asarray(wave, dtype=np.float64)
    g = math.gcd(int(sr), int(target_sr))
    return signal.resample_poly(wave, target_sr // g, sr // g, window=("kaiser", 5.0))


def frame_energies_db(wave: np.ndarray, frame_len: int) -> np.ndarray:
    n = math.ceil(len(wave) / frame_len)
    padded = np.zeros(n * frame_len)
    padded[: len(wave)] = wave
    sq = padded.reshape(n, frame_len) ** 2
    counts = np.full(n, frame_len, dtype=np.float64)
    counts[-1] = len(wave) - (n - 1) * frame_len
    energy = sq.sum(axis=1) / counts
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(energy)


def vad_trim(wave: np.ndarray, sr: int, frame_ms: float = 30.0, threshold_db: float = -40.0) -> np.ndarray:
    """Trim leading/trailing frames quieter than ``threshold_db`` relative to the loudest frame."""
    frame_len = max(1, int(round(frame_ms * sr / 1000.0)))
    db = frame_energies_db(wave, frame_len)
    peak = np.max(db)
    if not np.isfinite(peak):
        raise SilentRecordingError("silent recording")
    voiced = np.flatnonzero(db >= peak + threshold_db)
    start = voiced[0] * frame_len
    stop = min(len(wave), (voiced[-1] + 1) * frame_len)
    return wave[start:stop]


def preprocess_recording(wave: np.ndarray, sr: int, cfg: PrepConfig) -> np.ndarray:
    wave = np.asarray(wave, dtype=np.float64)
    if wave.ndim != 1:
        raise ValidationError("expected a mono 1-D waveform")
    normed = peak_normalize(wave)
    resampled = resample(normed, sr, cfg.target_sr_hz)
    return vad_trim(resampled, cfg.target_sr_hz, cfg.vad_frame_ms, cfg.vad_threshold_db)


# ---------------------------------------------------------------- windowing


def window_geometry(cfg: PrepConfig) -> tuple:
    width = int(round(cfg.window_s * cfg.target_sr_hz))
    hop = max(1, int(round((1.0 - cfg.overlap) * width)))
    return width, hop


def window_count(length: int, width: int, hop: int) -> int:
    if length < width:
        return 0
    return (length - width) // hop + 1


def segment(wave: np.ndarray, cfg: PrepConfig) -> list:
    width, hop = window_geometry(cfg)
    n = window_count(len(wave), width, hop)
    if n == 0:
        if cfg.effective_pad_mode == "zero" and len(wave) > 0:
            padded = np.zeros(width)
            padded[: len(wave)] = wave
            return [padded]
        return []
    return [np.array(wave[i * hop : i * hop + width]) for i in range(n)]


# ------------------------------------------------------------- RMS levels


def rms_dbfs(wave: np.ndarray) -> float:
    rms = float(np.sqrt(np.mean(np.square(wave))))
    return 20.0 * math.log10(rms) if rms > 0 else float("-inf")


@dataclass
class LevelStats:
    per_dataset_rms_dbfs: dict
    global_target_dbfs: float


def compute_level_stats(recordings) -> LevelStats:
    """``recordings``: iterable of ``(dataset_id, wave)`` from the training split."""
    levels: dict = {}
    seen = 0
    for dataset_id, wave in recordings:
        seen += 1
        level = rms_dbfs(wave)
        if not np.isfinite(level):
            warnings.warn(f"zero-RMS recording in dataset {dataset_id!r} excluded from level statistics")
            continue
        levels.setdefault(dataset_id, []).append(level)
    if not levels:
        raise ValidationError("no usable training recordings for level statistics" if seen else "empty training set")
    per_dataset = {d: float(np.median(v)) for d, v in sorted(levels.items())}
    return LevelStats(per_dataset, float(np.median(list(per_dataset.values()))))


def rms_equalize(wave: np.ndarray, stats: LevelStats):
    """Scale to the global target level. Returns ``(wave, clipped)``.

    If the required gain would push the peak above full scale the gain is
    limited so the peak lands on 1.0 and ``clipped`` is True.
    """
    level = rms_dbfs(wave)
    if not np.isfinite(level):
        raise ValidationError("cannot equalise a zero-RMS signal")
    gain = 10.0 ** ((stats.global_target_dbfs - level) / 20.0)
    peak = float(np.max(np.abs(wave)))
    clipped = peak * gain > 1.0
    if clipped:
        gain = 1.0 / peak
    return wave * gain, bool(clipped)


# ----------------------------------------------------------------- features


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sr: int, fmin: float = 0.0, fmax: Optional[float] = None) -> np.ndarray:
    """Triangular HTK-mel filters with unit peak, shape ``(n_mels, n_fft//2 + 1)``."""
    fmax = sr / 2.0 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sr / n_fft
    lower = (freqs[None, :] - edges[:-2, None]) / (edges[1:-1] - edges[:-2])[:, None]
    upper = (edges[2:, None] - freqs[None, :]) / (edges[2:] - edges[1:-1])[:, None]
    return np.maximum(0.0, np.minimum(lower, upper))


def n_feature_frames(n_samples: int, fc: FeatureConfig, sr: int) -> int:
    frame = int(round(fc.frame_ms * sr / 1000.0))
    hop = int(round(fc.hop_ms * sr / 1000.0))
    return window_count(n_samples, frame, hop)


def power_frames(window: np.ndarray, fc: FeatureConfig, sr: int) -> np.ndarray:
    frame = int(round(fc.frame_ms * sr / 1000.0))
    hop = int(round(fc.hop_ms * sr / 1000.0))
    if fc.n_fft < frame:
        raise ConfigError(f"n_fft {fc.n_fft} shorter than frame length {frame}")
    window = np.asarray(window, dtype=np.float64)
    if len(window) < frame:
        raise ValidationError(f"window of {len(window)} samples shorter than one frame ({frame})")
    frames = np.lib.stride_tricks.sliding_window_view(window, frame)[::hop]
    tapered = frames * signal.get_window("hann", frame)
    return np.abs(np.fft.rfft(tapered, n=fc.n_fft, axis=1)) ** 2  # (n_frames, bins)


def logmel(window: np.ndarray, fc: FeatureConfig, sr: int = 8000) -> np.ndarray:
    """Log-Mel matrix of shape ``(n_mels, n_frames)``."""
    power = power_frames(window, fc, sr)
    mel = mel_filterbank(fc.n_mels, fc.n_fft, sr) @ power.T
    return np.log(np.maximum(mel, fc.log_floor))


def mfcc(window: np.ndarray, fc: FeatureConfig, sr: int = 8000) -> np.ndarray:
    """Orthonormal DCT-II of the log-Mel bands, first ``n_mfcc`` rows."""
    if fc.n_mfcc > fc.n_mels:
        raise ConfigError("n_mfcc must not exceed n_mels")
    return sp_fft.dct(logmel(window, fc, sr), type=2, norm="ortho", axis=0)[: fc.n_mfcc]


def extract_features(window: np.ndarray, fc: FeatureConfig, sr: int) -> np.ndarray:
    out = logmel(window, fc, sr) if fc.kind == "logmel" else mfcc(window, fc, sr)
    return out.astype(np.float32)


# ------------------------------------------------------------ feature cache


@dataclass
class SegmentFeature:
    matrix: np.ndarray
    patient_id: str
    recording_id: str
    segment_index: int
    class_label: Optional[str]
    gender: Optional[str]
    dataset_id: str
    clipped_gain: bool = False


@dataclass
class PrepResult:
    index_path: Path
    written: int = 0
    skipped: int = 0
    segments: int = 0
    failures: list = field(default_factory=list)  # (recording key, message)


def cache_subdir(prep: PrepConfig, feat: FeatureConfig) -> str:
    return f"{feat.kind}_{prep.window_s:g}s"


def _segment_file(dataset_id: str, recording_id: str, idx: int) -> str:
    return f"{dataset_id}/{recording_id}__{idx:04d}.fpda"


def _valid_cache_file(path: Path, expected: np.ndarray) -> bool:
    if not path.exists():
        return False
    try:
        existing = tensorio.load_tensor(path)
    except CacheError:
        return False
    return existing.shape == expected.shape and existing.tobytes() == expected.tobytes()


def build_feature_cache(manifests, prep: PrepConfig, feat: FeatureConfig, cache_dir) -> PrepResult:
    """Run the full chain over every recording and write one tensor file per segment.

    Level statistics come from the ``source``-role manifests only. Existing
    cache files with identical content are left untouched, so reruns write
    nothing. Per-recording failures are collected rather than raised.
    """
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    result = PrepResult(index_path=cache_dir / "index.json")

    trimmed = []
    for manifest in manifests:
        by_uid = manifest.by_uid()
        for rec in manifest.recordings:
            key = f"{rec.dataset_id}:{rec.recording_id}"
            try:
                wave, sr = read_wav(rec.audio_path)
                trimmed.append((manifest.role, by_uid[rec.patient_uid], rec, preprocess_recording(wave, sr, prep)))
            except (OSError, ValueError) as exc:
                log.warning("skipping %s: %s", key, exc)
                result.failures.append((key, str(exc)))

    stats = compute_level_stats((p.dataset_id, w) for role, p, _, w in trimmed if role == "source")
    width, _ = window_geometry(prep)
    entries = []
    for role, patient, rec, wave in trimmed:
        eq, clipped = rms_equalize(wave, stats)
        windows = segment(eq, prep)
        for idx, win in enumerate(windows):
            matrix = extract_features(win, feat, prep.target_sr_hz)
            if not np.all(np.isfinite(matrix)):
                raise ValidationError(f"non-finite features for {rec.recording_id}[{idx}]")
            rel = _segment_file(rec.dataset_id, rec.recording_id, idx)
            path = cache_dir / rel
            if _valid_cache_file(path, matrix):
                result.skipped += 1
            else:
                path.parent.mkdir(parents=True, exist_ok=True)
                tensorio.save_tensor(path, matrix)
                result.written += 1
            entries.append(
                {
                    "file": rel,
                    "patient_id": patient.patient_id,
                    "recording_id": rec.recording_id,
                    "segment_index": idx,
                    "label": patient.class_label,
                    "gender": patient.gender,
                    "dataset_id": rec.dataset_id,
                    "role": role,
                    "clipped_gain_flag": clipped,
                }
            )
    entries.sort(key=lambda e: (e["dataset_id"], e["patient_id"], e["recording_id"], e["segment_index"]))
    result.segments = len(entries)
    index = {
        "format_version": tensorio.FORMAT_VERSION,
        "resampler": RESAMPLER,
        "prep": asdict(prep),
        "features": asdict(feat),
        "window_samples": width,
        "level_stats": asdict(stats),
        "segments": entries,
    }
    text = json.dumps(index, indent=1, sort_keys=True)
    if not result.index_path.exists() or result.index_path.read_text(encoding="utf-8") != text:
        result.index_path.write_text(text, encoding="utf-8")
    return result


def load_index(cache_dir) -> dict:
    path = Path(cache_dir) / "index.json"
    if not path.exists():
        raise CacheError(f"feature index not found: {path}")
    return json.loads(path.read_text(encoding="utf-8"))
