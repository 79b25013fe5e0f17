"""Run configuration: TOML file + ``--set section.key=value`` overrides.

Precedence is flags > environment > file > built-in defaults. The only
environment variable is ``FAIRPDA_CACHE_ROOT``, which relocates the feature
cache. Every knob that changes results has an explicit default below, so the
echoed config of a run is self-contained.
"""
from __future__ import annotations

import copy
import os
import sys
from dataclasses import replace
from pathlib import Path

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .audio import FeatureConfig, PrepConfig, cache_subdir
from .cohort import DEFAULT_EXCLUDED_CODES, FilterConfig
from .errors import ConfigError
from .model import MixStyleConfig, ModelConfig
from .synth import SynthSpec, scaled_spec
from .trainer import TrainProtocol

CACHE_ENV = "FAIRPDA_CACHE_ROOT"

DEFAULTS: dict = {
    "run": {
        "workdir": "fairpda_work",
        "benchmark_dir": "benchmark",
        "cache_root": "cache",
        "split_file": "split.json",
        "runs_dir": "runs",
        "reports_dir": "reports",
    },
    "synth": {
        "seed": 0,
        "scale": 1.0,
        "duration_s": [3.0, 6.0],
        "f0_male_hz": 120.0,
        "f0_female_hz": 210.0,
        "f0_sd_hz": 12.0,
        "patient_spread": 0.3,
        # optional TOML file with a full generator description (datasets,
        # class effects); the keys above still override it
        "spec_file": "",
    },
    "data": {
        # empty lists mean "use the benchmark's manifests"
        "source_manifests": [],
        "target_manifests": [],
        "min_age": 34,
        "max_age": 80,
        "excluded_codes": sorted(DEFAULT_EXCLUDED_CODES),
        "require_medication_standard": False,
        "split_seed": 0,
        "folds": 5,
        "adaptation_fraction": 0.3,
    },
    "prep": {
        "target_sr_hz": 8000,
        "window_s": 2.0,
        "overlap": 0.5,
        "pad_mode": "auto",
        "vad_frame_ms": 30.0,
        "vad_threshold_db": -40.0,
        "feature_kind": "logmel",
        "frame_ms": 25.0,
        "hop_ms": 10.0,
        "n_fft": 512,
        "n_mels": 64,
        "n_mfcc": 13,
    },
    "model": {
        "variant": "tiny",
        "feature_dim": 64,
        "mixstyle": True,
        "mixstyle_alpha": 0.1,
        "mixstyle_p": 0.5,
        "mixstyle_cross_domain": False,
        "domain_hidden": [256, 256],
        "gender_hidden": [256, 64],
    },
    "train": {
        "run_name": "fairpda",
        "mode": "UDA",
        "loss_mode": "ce_pn",
        "align_mode": "partial_cdan",
        "no_warmup": False,
        "no_mixstyle": False,
        "no_fairness": False,
        "epochs": 15,
        "batch_size": 32,
        "learning_rate": 1e-3,
        "adam_beta1": 0.0,
        "weight_decay": 0.0,
        "seed": 0,
        "lambda_d_max": 1.0,
        "lambda_fair_max": 0.5,
        "warmup_fraction": 0.2,
        "gamma_ema": 0.0,
        "divergence_limit": 1e4,
        "folds": [],  # empty = all folds of the split
    },
    "eval": {
        "fairness_reduction": "macro",
        "n_resamples": 10000,
        "test_seed": 0,
        "reference_run": "",
    },
}


def _merge(base: dict, update: dict, origin: str) -> dict:
    out = copy.deepcopy(base)
    for section, values in update.items():
        if section not in out:
            raise ConfigError(f"{origin}: unknown config section [{section}]")
        if not isinstance(values, dict):
            raise ConfigError(f"{origin}: [{section}] must be a table")
        for key, value in values.items():
            if key not in out[section]:
                raise ConfigError(f"{origin}: unknown key {section}.{key}")
            out[section][key] = _coerce(out[section][key], value, f"{section}.{key}")
    return out


def _coerce(default, value, name: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name} must be true/false, got {value!r}")
        return value
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if isinstance(default, list) and not isinstance(value, list):
        raise ConfigError(f"{name} must be a list, got {value!r}")
    if not isinstance(default, list) and type(value) is not type(default):
        raise ConfigError(f"{name} must be {type(default).__name__}, got {value!r}")
    return value


def parse_override(text: str) -> tuple:
    """``section.key=value`` with a TOML literal value (bare words are strings)."""
    if "=" not in text or "." not in text.split("=", 1)[0]:
        raise ConfigError(f"override must look like section.key=value, got {text!r}")
    dotted, raw = text.split("=", 1)
    section, key = dotted.strip().split(".", 1)
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return section, key, value


def load_config(path=None, overrides=()) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        path = Path(path)
        try:
            doc = tomllib.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        cfg = _merge(cfg, doc, str(path))
    env_cache = os.environ.get(CACHE_ENV)
    if env_cache:
        cfg["run"]["cache_root"] = env_cache
    update: dict = {}
    for text in overrides:
        section, key, value = parse_override(text)
        update.setdefault(section, {})[key] = value
    return _merge(cfg, update, "--set")


def dump_config(cfg: dict) -> str:
    return tomli_w.dumps(cfg)


def write_echo(cfg: dict, directory, name: str = "config.toml") -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / name
    path.write_text(dump_config(cfg), encoding="utf-8")
    return path


# ------------------------------------------------------------------ paths


def workdir(cfg: dict) -> Path:
    return Path(cfg["run"]["workdir"])


def _under_workdir(cfg: dict, key: str) -> Path:
    p = Path(cfg["run"][key])
    return p if p.is_absolute() else workdir(cfg) / p


def benchmark_dir(cfg: dict) -> Path:
    return _under_workdir(cfg, "benchmark_dir")


def cache_dir(cfg: dict) -> Path:
    return _under_workdir(cfg, "cache_root") / cache_subdir(prep_config(cfg), feature_config(cfg))


def split_path(cfg: dict) -> Path:
    return _under_workdir(cfg, "split_file")


def run_dir(cfg: dict, name=None) -> Path:
    return _under_workdir(cfg, "runs_dir") / (name or cfg["train"]["run_name"])


def reports_dir(cfg: dict) -> Path:
    return _under_workdir(cfg, "reports_dir")


# ------------------------------------------------------ typed sub-configs


def synth_spec(cfg: dict) -> SynthSpec:
    s = cfg["synth"]
    base = SynthSpec()
    if s["spec_file"]:
        try:
            doc = tomllib.loads(Path(s["spec_file"]).read_text(encoding="utf-8"))
            base = SynthSpec.from_dict(doc)
        except FileNotFoundError:
            raise ConfigError(f"synth spec file not found: {s['spec_file']}") from None
        except (tomllib.TOMLDecodeError, TypeError, KeyError) as exc:
            raise ConfigError(f"{s['spec_file']}: bad synth spec ({exc})") from None
    base = replace(
        base,
        f0_mean_hz={"M": s["f0_male_hz"], "F": s["f0_female_hz"]},
        f0_sd_hz=s["f0_sd_hz"],
        duration_s=tuple(s["duration_s"]),
        patient_spread=s["patient_spread"],
        seed=s["seed"],
    )
    spec = base if s["scale"] == 1.0 else scaled_spec(base, s["scale"])
    spec.validate()
    return spec


def filter_config(cfg: dict) -> FilterConfig:
    d = cfg["data"]
    return FilterConfig(d["min_age"], d["max_age"], frozenset(d["excluded_codes"]), d["require_medication_standard"])


def prep_config(cfg: dict) -> PrepConfig:
    p = cfg["prep"]
    return PrepConfig(
        target_sr_hz=p["target_sr_hz"],
        window_s=p["window_s"],
        overlap=p["overlap"],
        pad_mode=p["pad_mode"],
        vad_frame_ms=p["vad_frame_ms"],
        vad_threshold_db=p["vad_threshold_db"],
    )


def feature_config(cfg: dict) -> FeatureConfig:
    p = cfg["prep"]
    return FeatureConfig(
        kind=p["feature_kind"],
        frame_ms=p["frame_ms"],
        hop_ms=p["hop_ms"],
        n_fft=p["n_fft"],
        n_mels=p["n_mels"],
        n_mfcc=p["n_mfcc"],
    )


def model_config(cfg: dict) -> ModelConfig:
    m = cfg["model"]
    return ModelConfig(
        variant=m["variant"],
        feature_dim=m["feature_dim"],
        mixstyle=MixStyleConfig(m["mixstyle"], m["mixstyle_alpha"], m["mixstyle_p"], m["mixstyle_cross_domain"]),
        domain_hidden=tuple(m["domain_hidden"]),
        gender_hidden=tuple(m["gender_hidden"]),
    )


def train_protocol(cfg: dict) -> TrainProtocol:
    t = {k: v for k, v in cfg["train"].items() if k not in ("run_name", "folds")}
    return TrainProtocol(window_s=cfg["prep"]["window_s"], **t)
