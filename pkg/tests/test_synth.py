import hashlib
from dataclasses import replace

import numpy as np
import pytest
from scipy import signal

from fairpda.audio import FeatureConfig, PrepConfig, logmel, preprocess_recording
from fairpda.cohort import load_manifest
from fairpda.errors import ConfigError
from fairpda.synth import (
    DatasetSpec,
    DomainEffect,
    SynthSpec,
    build_synth_benchmark,
    derive_seed,
    load_benchmark,
    scaled_spec,
    synth_phonation,
)

SPEC = SynthSpec()


def estimate_f0(wave, sr, lo=60.0, hi=400.0):
    """Autocorrelation pitch: shortest lag within 90 % of the best peak."""
    nz = np.flatnonzero(np.abs(wave) > 0.05 * np.abs(wave).max())
    x = wave[nz[0] : nz[-1]]
    x = x - x.mean()
    ac = np.fft.irfft(np.abs(np.fft.rfft(x, 2 * len(x))) ** 2)[: len(x)]
    lags = np.arange(int(sr / hi), int(sr / lo) + 1)
    vals = ac[lags]
    best = lags[np.flatnonzero(vals >= 0.9 * vals.max())[0]]
    return sr / best


def relative_jitter(wave, sr, f0):
    """Mean absolute cycle-to-cycle period difference over mean period.

    Cycles are delimited by upward zero crossings of the band-limited
    fundamental, interpolated to sub-sample precision.
    """
    sos = signal.butter(4, [0.5 * f0, 1.5 * f0], btype="bandpass", fs=sr, output="sos")
    y = signal.sosfiltfilt(sos, wave)
    core = y[int(0.8 * sr) : -int(0.8 * sr)]
    i = np.flatnonzero((core[:-1] < 0) & (core[1:] >= 0))
    t = i + (-core[i]) / (core[i + 1] - core[i])
    periods = np.diff(t)
    return np.mean(np.abs(np.diff(periods))) / np.mean(periods)


def test_deterministic():
    a, sr_a = synth_phonation("PD", "F", "src_a", SPEC, 11)
    b, sr_b = synth_phonation("PD", "F", "src_a", SPEC, 11)
    assert sr_a == sr_b and np.array_equal(a, b)
    c, _ = synth_phonation("PD", "F", "src_a", SPEC, 12)
    assert not np.array_equal(a[: len(c)], c[: len(a)])


def test_gender_pitch_ranges():
    est = {g: [estimate_f0(*synth_phonation("HC", g, "src_a", SPEC, derive_seed("pitch", g, i))) for i in range(20)] for g in "MF"}
    sd = SPEC.f0_sd_hz
    for g in "MF":
        mean = SPEC.f0_mean_hz[g]
        assert all(mean - 4 * sd <= e <= mean + 4 * sd for e in est[g]), (g, est[g])
    assert max(est["M"]) < min(est["F"])


def test_jitter_ordering():
    effects = dict(SPEC.class_effects)
    effects["HC"] = replace(effects["HC"], jitter_pct=0.3)
    effects["PD"] = replace(effects["PD"], jitter_pct=2.0)
    spec = replace(SPEC, class_effects=effects)
    mean = {}
    for label in ("HC", "PD"):
        vals = []
        for i in range(50):
            wave, sr = synth_phonation(label, "M", "src_a", spec, derive_seed("jit", label, i), apply_channel=False)
            vals.append(relative_jitter(wave, sr, estimate_f0(wave, sr)))
        mean[label] = float(np.median(vals))
    assert mean["PD"] > mean["HC"]


def test_telephone_band_attenuation():
    wave, sr = synth_phonation("HC", "F", "tgt_tel", SPEC, 3)
    f, psd = signal.welch(wave, sr, nperseg=2048)
    in_band = 10 * np.log10(psd[(f >= 300) & (f <= 3400)].mean())
    assert in_band - 10 * np.log10(psd[f < 200].mean()) >= 30
    assert in_band - 10 * np.log10(psd[f > 5000].mean()) >= 30


def _mean_logmel(label, gender, dataset, seed):
    wave, sr = synth_phonation(label, gender, dataset, SPEC, seed)
    x = preprocess_recording(wave, sr, PrepConfig())
    return logmel(x[:16000], FeatureConfig()).mean(axis=1)


def test_within_domain_separability():
    # leave-one-out nearest centroid on standardised mean log-Mel, source A HC vs PD
    feats, labels = [], []
    for i in range(20):
        for label in ("HC", "PD"):
            feats.append(_mean_logmel(label, "MF"[i % 2], "src_a", derive_seed("sep", label, i)))
            labels.append(label)
    X, y = np.array(feats), np.array(labels)
    hits = 0
    for i in range(len(y)):
        keep = np.arange(len(y)) != i
        mu, sd = X[keep].mean(0), X[keep].std(0) + 1e-9
        Z = (X - mu) / sd
        centroids = {c: Z[keep & (y == c)].mean(0) for c in ("HC", "PD")}
        hits += min(centroids, key=lambda c: np.linalg.norm(Z[i] - centroids[c])) == y[i]
    assert hits / len(y) > 0.6


def test_domain_shift():
    src = np.array([_mean_logmel("HC", "M", "src_a", derive_seed("dom", "a", i)) for i in range(8)])
    tgt = np.array([_mean_logmel("HC", "M", "tgt_tel", derive_seed("dom", "t", i)) for i in range(8)])

    def mean_dist(a, b):
        return np.mean([np.linalg.norm(u - v) for u in a for v in b])

    within = (mean_dist(src, src) + mean_dist(tgt, tgt)) / 2
    assert mean_dist(src, tgt) > within


class TestSpecValidation:
    def test_negative_jitter(self):
        effects = dict(SPEC.class_effects)
        effects["HC"] = replace(effects["HC"], jitter_pct=-1)
        with pytest.raises(ConfigError):
            replace(SPEC, class_effects=effects).validate()

    def test_band_above_nyquist(self):
        bad = replace(SPEC.datasets[0], domain=DomainEffect((100.0, 9000.0), 0.0, -50.0, 16000))
        with pytest.raises(ConfigError):
            replace(SPEC, datasets=(bad,) + SPEC.datasets[1:]).validate()

    def test_ordering_violation(self):
        effects = dict(SPEC.class_effects)
        effects["PD"] = replace(effects["PD"], jitter_pct=0.1)
        with pytest.raises(ConfigError, match="ordering"):
            replace(SPEC, class_effects=effects).validate()

    def test_empty_cell(self):
        bad = replace(SPEC.datasets[0], counts={"HC": (0, 0), "PD": (3, 3)})
        with pytest.raises(ConfigError, match="n_patients = 0"):
            replace(SPEC, datasets=(bad,) + SPEC.datasets[1:]).validate()

    def test_dict_round_trip(self):
        assert SynthSpec.from_dict(SPEC.to_dict()) == SPEC


def _hashes(root):
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def bench(tmp_path_factory):
    return build_synth_benchmark(scaled_spec(SPEC, 0.2), tmp_path_factory.mktemp("bench"))


class TestBenchmark:
    def test_label_spaces(self, bench):
        spaces = {d: load_manifest(p, bench.roles[d]).label_space for d, p in bench.manifests.items()}
        assert spaces["src_a"] == {"HC", "PD"}
        assert spaces["src_b"] == {"HC", "ALS"}
        assert spaces["src_a"] | spaces["src_b"] == {"HC", "PD", "ALS"}
        assert spaces["tgt_head"] == {"HC", "ALS"}
        assert len(bench.by_role("source")) == 2 and len(bench.by_role("target")) == 2

    def test_reload(self, bench):
        again = load_benchmark(bench.root)
        assert again.manifests == bench.manifests and again.roles == bench.roles

    def test_reproducible(self, bench, tmp_path):
        other = build_synth_benchmark(scaled_spec(SPEC, 0.2), tmp_path / "b2")
        assert _hashes(bench.root) == _hashes(other.root)

    def test_custom_partial_target(self, tmp_path):
        ds = DatasetSpec("tgt_x", "target", {"HC": (1, 1), "ALS": (1, 1)}, DomainEffect((200.0, 3000.0), 0.0, -50.0, 8000))
        spec = replace(scaled_spec(SPEC, 0.1), datasets=scaled_spec(SPEC, 0.1).datasets[:2] + (ds,))
        bench = build_synth_benchmark(spec, tmp_path)
        assert load_manifest(bench.manifests["tgt_x"], "target").label_space == {"HC", "ALS"}
