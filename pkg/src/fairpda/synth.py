"""Source-filter synthesis of sustained /a/ phonations for desk-scale benchmarks.

Glottal source: Rosenberg flow pulses with cycle-level period (jitter) and
amplitude (shimmer) perturbation plus slow tremor modulation, aspiration
noise at a target HNR, three formant resonators, then per-dataset channel
effects (noise floor, band limitation, gain).

Every waveform is a pure function of ``(spec, ids, seed)``; per-patient seeds
are derived with CRC32 of the identifiers so generation order is irrelevant.
"""
from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import signal

from .audio import write_wav
from .cohort import CLASSES, MANIFEST_COLUMNS
from .errors import ConfigError


@dataclass(frozen=True)
class ClassEffect:
    jitter_pct: float
    shimmer_pct: float
    hnr_db: float
    tremor_hz: float = 0.0
    tremor_depth: float = 0.0


@dataclass(frozen=True)
class DomainEffect:
    bandpass_hz: tuple = (80.0, 7000.0)
    gain_db: float = 0.0
    noise_floor_db: float = -60.0
    sim_sr_hz: int = 16000


@dataclass(frozen=True)
class DatasetSpec:
    dataset_id: str
    role: str
    counts: dict  # class_label -> (n_male, n_female)
    domain: DomainEffect = DomainEffect()
    recordings_per_patient: int = 1
    age_range: tuple = (40, 78)


DEFAULT_CLASS_EFFECTS = {
    "HC": ClassEffect(jitter_pct=0.4, shimmer_pct=2.5, hnr_db=24.0),
    "PD": ClassEffect(jitter_pct=1.6, shimmer_pct=5.0, hnr_db=16.0, tremor_hz=5.0, tremor_depth=0.04),
    "ALS": ClassEffect(jitter_pct=1.0, shimmer_pct=9.0, hnr_db=11.0, tremor_hz=9.0, tremor_depth=0.05),
}

# Source cells confound gender with class (PD and ALS skew male) so that the
# f0 cue is a tempting shortcut; targets are gender-balanced. Both sources are
# wideband phone-like channels so the shift sits between sources and targets
# rather than between the two source label spaces.
DEFAULT_DATASETS = (
    DatasetSpec(
        "src_a",
        "source",
        {"HC": (6, 12), "PD": (14, 4)},
        DomainEffect((80.0, 8000.0), 0.0, -55.0, 22050),
        recordings_per_patient=2,
    ),
    DatasetSpec(
        "src_b",
        "source",
        {"HC": (5, 9), "ALS": (13, 5)},
        DomainEffect((90.0, 7000.0), -4.0, -50.0, 16000),
    ),
    DatasetSpec(
        "tgt_tel",
        "target",
        {"HC": (8, 8), "PD": (8, 8)},
        DomainEffect((300.0, 3400.0), 2.0, -45.0, 16000),
    ),
    DatasetSpec(
        "tgt_head",
        "target",
        {"HC": (8, 8), "ALS": (8, 8)},
        DomainEffect((150.0, 6000.0), -2.0, -60.0, 22050),
    ),
)

DEFAULT_ORDERINGS = (
    ("jitter_pct", "HC", "PD"),
    ("jitter_pct", "HC", "ALS"),
    ("shimmer_pct", "HC", "PD"),
    ("shimmer_pct", "HC", "ALS"),
)

# /a/ formants for an adult male voice; female voices scale by 1.17.
BASE_FORMANTS_HZ = (730.0, 1090.0, 2440.0)
FORMANT_BANDWIDTHS_HZ = (90.0, 110.0, 160.0)


@dataclass(frozen=True)
class SynthSpec:
    datasets: tuple = DEFAULT_DATASETS
    class_effects: dict = field(default_factory=lambda: dict(DEFAULT_CLASS_EFFECTS))
    f0_mean_hz: dict = field(default_factory=lambda: {"M": 120.0, "F": 210.0})
    f0_sd_hz: float = 12.0
    duration_s: tuple = (3.0, 6.0)
    patient_spread: float = 0.3
    orderings: tuple = DEFAULT_ORDERINGS
    seed: int = 0

    def dataset(self, dataset_id: str) -> DatasetSpec:
        for d in self.datasets:
            if d.dataset_id == dataset_id:
                return d
        raise ConfigError(f"unknown dataset {dataset_id!r}")

    def validate(self) -> None:
        for name, eff in self.class_effects.items():
            if name not in CLASSES:
                raise ConfigError(f"unknown class {name!r}")
            if eff.jitter_pct < 0 or eff.shimmer_pct < 0 or eff.tremor_depth < 0:
                raise ConfigError(f"negative perturbation for class {name}")
        for attr, low, high in self.orderings:
            if not getattr(self.class_effects[low], attr) < getattr(self.class_effects[high], attr):
                raise ConfigError(f"ordering violated: {attr} {low} < {high}")
        for d in self.datasets:
            lo, hi = d.domain.bandpass_hz
            if not 0 < lo < hi < d.domain.sim_sr_hz / 2:
                raise ConfigError(f"{d.dataset_id}: bandpass must satisfy 0 < low < high < sim_sr/2")
            if d.role not in ("source", "target"):
                raise ConfigError(f"{d.dataset_id}: bad role {d.role!r}")
            if d.recordings_per_patient < 1:
                raise ConfigError(f"{d.dataset_id}: recordings_per_patient must be >= 1")
            for label, (n_m, n_f) in d.counts.items():
                if label not in self.class_effects:
                    raise ConfigError(f"{d.dataset_id}: no class effect for {label}")
                if n_m + n_f <= 0:
                    raise ConfigError(f"{d.dataset_id}: n_patients = 0 for class {label}")
        if self.duration_s[0] <= 0 or self.duration_s[0] > self.duration_s[1]:
            raise ConfigError("bad duration range")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "SynthSpec":
        doc = dict(doc)
        if "datasets" in doc:
            doc["datasets"] = tuple(
                DatasetSpec(
                    d["dataset_id"],
                    d["role"],
                    {k: tuple(v) for k, v in d["counts"].items()},
                    DomainEffect(**{**d.get("domain", {}), "bandpass_hz": tuple(d.get("domain", {}).get("bandpass_hz", (80.0, 7000.0)))}),
                    d.get("recordings_per_patient", 1),
                    tuple(d.get("age_range", (40, 78))),
                )
                for d in doc["datasets"]
            )
        if "class_effects" in doc:
            doc["class_effects"] = {k: ClassEffect(**v) for k, v in doc["class_effects"].items()}
        for key in ("duration_s",):
            if key in doc:
                doc[key] = tuple(doc[key])
        if "orderings" in doc:
            doc["orderings"] = tuple(tuple(o) for o in doc["orderings"])
        return cls(**doc)


def derive_seed(*parts) -> int:
    return zlib.crc32("|".join(str(p) for p in parts).encode("utf-8"))


@dataclass(frozen=True)
class VoiceParams:
    f0_hz: float
    jitter: float
    shimmer: float
    hnr_db: float
    tremor_hz: float
    tremor_depth: float
    formants_hz: tuple


def patient_voice(class_label: str, gender: str, spec: SynthSpec, rng: np.random.Generator) -> VoiceParams:
    eff = spec.class_effects[class_label]
    spread = spec.patient_spread

    def vary(x):
        return x * float(np.exp(spread * rng.standard_normal()))

    f0 = float(np.clip(rng.normal(spec.f0_mean_hz[gender], spec.f0_sd_hz), 60.0, 400.0))
    scale = (1.17 if gender == "F" else 1.0) * float(rng.normal(1.0, 0.04))
    return VoiceParams(
        f0_hz=f0,
        jitter=vary(eff.jitter_pct) / 100.0,
        shimmer=vary(eff.shimmer_pct) / 100.0,
        hnr_db=eff.hnr_db + 2.0 * float(rng.standard_normal()),
        tremor_hz=eff.tremor_hz * float(rng.normal(1.0, 0.1)),
        tremor_depth=vary(eff.tremor_depth),
        formants_hz=tuple(f * scale for f in BASE_FORMANTS_HZ),
    )


def _rosenberg(tau: np.ndarray) -> np.ndarray:
    """Glottal flow over one normalised cycle (opening 40 %, closing 16 %)."""
    out = np.zeros_like(tau)
    opening = tau < 0.4
    closing = (tau >= 0.4) & (tau < 0.56)
    out[opening] = 0.5 * (1.0 - np.cos(np.pi * tau[opening] / 0.4))
    out[closing] = np.cos(np.pi * (tau[closing] - 0.4) / 0.32)
    return out


def glottal_source(voice: VoiceParams, n: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    flow = np.zeros(n + 1)
    phase_f, phase_a = rng.uniform(0, 2 * np.pi, size=2)
    t = 0.0
    duration = n / sr
    while t < duration:
        mod = np.sin(2 * np.pi * voice.tremor_hz * t + phase_f)
        period = (1.0 + voice.jitter * rng.standard_normal()) / (voice.f0_hz * (1.0 + voice.tremor_depth * mod))
        period = max(period, 2.0 / sr)
        amp = (1.0 + voice.shimmer * rng.standard_normal()) * (
            1.0 + voice.tremor_depth * np.sin(2 * np.pi * voice.tremor_hz * t + phase_a)
        )
        start = int(np.ceil(t * sr))
        stop = min(int(np.ceil((t + period) * sr)), n + 1)
        if stop > start:
            idx = np.arange(start, stop)
            flow[idx] += max(amp, 0.0) * _rosenberg((idx / sr - t) / period)
        t += period
    return np.diff(flow)  # flow derivative, lip radiation folded in


def formant_filter(x: np.ndarray, formants, bandwidths, sr: int) -> np.ndarray:
    y = x
    for f, bw in zip(formants, bandwidths):
        if f >= sr / 2:
            continue
        r = np.exp(-np.pi * bw / sr)
        theta = 2 * np.pi * f / sr
        a = [1.0, -2.0 * r * np.cos(theta), r * r]
        y = signal.lfilter([sum(a)], a, y)
    return y


def apply_domain(x: np.ndarray, domain: DomainEffect, rng: np.random.Generator) -> np.ndarray:
    sr = domain.sim_sr_hz
    floor = 10.0 ** (domain.noise_floor_db / 20.0)
    y = x + floor * rng.standard_normal(len(x))
    sos = signal.butter(6, domain.bandpass_hz, btype="bandpass", fs=sr, output="sos")
    y = signal.sosfiltfilt(sos, y)
    y = y * 10.0 ** (domain.gain_db / 20.0)
    return np.clip(y, -1.0, 1.0)


def render(voice: VoiceParams, sr: int, duration: float, rng: np.random.Generator) -> np.ndarray:
    n = int(round(duration * sr))
    src = glottal_source(voice, n, sr, rng)
    src /= np.sqrt(np.mean(src**2)) + 1e-12
    noise = rng.standard_normal(n) * 10.0 ** (-voice.hnr_db / 20.0)
    voiced = formant_filter(src + noise, voice.formants_hz, FORMANT_BANDWIDTHS_HZ, sr)
    ramp = min(int(0.05 * sr), n // 4)
    if ramp > 0:
        env = np.ones(n)
        fade = 0.5 * (1 - np.cos(np.linspace(0, np.pi, ramp)))
        env[:ramp] = fade
        env[-ramp:] = fade[::-1]
        voiced = voiced * env
    lead, tail = (int(rng.uniform(0.2, 0.6) * sr) for _ in range(2))
    wave = np.concatenate([np.zeros(lead), voiced, np.zeros(tail)])
    return 0.5 * wave / np.max(np.abs(wave))


def synth_phonation(
    class_label: str,
    gender: str,
    dataset,
    spec: SynthSpec,
    seed: int,
    recording: int = 0,
    apply_channel: bool = True,
):
    """One phonation. ``seed`` fixes the speaker; ``recording`` picks the take.

    Returns ``(wave, sample_rate)`` at the dataset's simulation rate.
    """
    spec.validate()
    ds = spec.dataset(dataset) if isinstance(dataset, str) else dataset
    if class_label not in spec.class_effects:
        raise ConfigError(f"unknown class {class_label!r}")
    if gender not in spec.f0_mean_hz:
        raise ConfigError(f"unknown gender {gender!r}")
    voice = patient_voice(class_label, gender, spec, np.random.default_rng([seed, 0]))
    rng = np.random.default_rng([seed, 1, recording])
    duration = float(rng.uniform(*spec.duration_s))
    sr = ds.domain.sim_sr_hz
    wave = render(voice, sr, duration, rng)
    if apply_channel:
        wave = apply_domain(wave, ds.domain, rng)
    return wave, sr


@dataclass
class Benchmark:
    root: Path
    manifests: dict  # dataset_id -> manifest path
    roles: dict  # dataset_id -> role

    def by_role(self, role: str) -> list:
        return [self.manifests[d] for d in sorted(self.manifests) if self.roles[d] == role]


def build_synth_benchmark(spec: SynthSpec, out_dir) -> Benchmark:
    """Write WAVs, one manifest CSV per dataset and a ``benchmark.json`` spec echo."""
    spec.validate()
    sources = [d for d in spec.datasets if d.role == "source"]
    if len(sources) < 2:
        raise ConfigError("benchmark needs at least two source datasets")
    root = Path(out_dir)
    (root / "manifests").mkdir(parents=True, exist_ok=True)
    manifests, roles = {}, {}
    for ds in spec.datasets:
        audio_dir = root / "audio" / ds.dataset_id
        audio_dir.mkdir(parents=True, exist_ok=True)
        rows = []
        n = 0
        for label in sorted(ds.counts, key=CLASSES.index):
            for gender, count in zip(("M", "F"), ds.counts[label]):
                for _ in range(count):
                    pid = f"{ds.dataset_id}-{n:03d}"
                    n += 1
                    pseed = derive_seed(spec.seed, ds.dataset_id, pid)
                    age = int(np.random.default_rng([pseed, 2]).integers(ds.age_range[0], ds.age_range[1] + 1))
                    for k in range(ds.recordings_per_patient):
                        wave, sr = synth_phonation(label, gender, ds, spec, pseed, recording=k)
                        rid = f"{pid}-r{k}"
                        write_wav(audio_dir / f"{rid}.wav", wave, sr)
                        rows.append([pid, ds.dataset_id, label, gender, age, "", "standard", rid, f"../audio/{ds.dataset_id}/{rid}.wav"])
        path = root / "manifests" / f"{ds.dataset_id}.csv"
        lines = [",".join(MANIFEST_COLUMNS)] + [",".join(str(v) for v in row) for row in rows]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        manifests[ds.dataset_id] = path
        roles[ds.dataset_id] = ds.role
    (root / "benchmark.json").write_text(
        json.dumps({"spec": spec.to_dict(), "roles": roles}, indent=2, sort_keys=True), encoding="utf-8"
    )
    return Benchmark(root, manifests, roles)


def load_benchmark(root) -> Benchmark:
    root = Path(root)
    doc = json.loads((root / "benchmark.json").read_text(encoding="utf-8"))
    manifests = {d: root / "manifests" / f"{d}.csv" for d in doc["roles"]}
    return Benchmark(root, manifests, doc["roles"])


def scaled_spec(spec: SynthSpec, factor: float, seed: Optional[int] = None) -> SynthSpec:
    """Same spec with every patient count scaled by ``factor`` (min 1 per cell)."""
    datasets = tuple(
        replace(d, counts={k: tuple(max(1, int(round(c * factor))) for c in v) for k, v in d.counts.items()})
        for d in spec.datasets
    )
    return replace(spec, datasets=datasets, seed=spec.seed if seed is None else seed)
