import csv
from pathlib import Path

import pytest

from fairpda.cohort import MANIFEST_COLUMNS

# Patient counts after filtering for the mobile-app PD cohort: class -> (male, female)
MPOWER_COUNTS = {"HC": (751, 118), "PD": (311, 124)}


def write_manifest(path: Path, rows) -> Path:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for row in rows:
            writer.writerow([row.get(c, "") for c in MANIFEST_COLUMNS])
    return path


def patient_rows(n, dataset="ds", label="HC", gender="M", age=50, start=0, recordings=1, **extra):
    rows = []
    for i in range(start, start + n):
        for r in range(recordings):
            rows.append(
                {
                    "patient_id": f"p{i:05d}",
                    "dataset_id": dataset,
                    "class_label": label,
                    "gender": gender,
                    "age": age,
                    "exclusion_codes": "",
                    "medication_flag": "standard",
                    "recording_id": f"p{i:05d}-r{r}",
                    "audio_path": f"audio/p{i:05d}-r{r}.wav",
                    **extra,
                }
            )
    return rows


@pytest.fixture
def mpower_manifest(tmp_path):
    rows, start = [], 0
    for label, (n_m, n_f) in MPOWER_COUNTS.items():
        for gender, n in (("M", n_m), ("F", n_f)):
            rows += patient_rows(n, dataset="mpower", label=label, gender=gender, start=start)
            start += n
    return write_manifest(tmp_path / "mpower.csv", rows)


@pytest.fixture(scope="session")
def tiny_bench(tmp_path_factory):
    """A quarter-size synthetic benchmark with its feature cache and a 2-fold split plan."""
    from types import SimpleNamespace

    from fairpda.audio import FeatureConfig, PrepConfig, build_feature_cache, cache_subdir
    from fairpda.cohort import load_manifest, make_cv_splits, make_uda_split, merge_manifests
    from fairpda.data import SegmentStore
    from fairpda.synth import SynthSpec, build_synth_benchmark, scaled_spec

    root = tmp_path_factory.mktemp("tiny_bench")
    bench = build_synth_benchmark(scaled_spec(SynthSpec(), 0.25), root / "bench")
    manifests = {d: load_manifest(p, bench.roles[d]) for d, p in sorted(bench.manifests.items())}
    prep, feat = PrepConfig(), FeatureConfig()
    cache = root / "cache" / cache_subdir(prep, feat)
    build_feature_cache(list(manifests.values()), prep, feat, cache)
    source = merge_manifests([m for d, m in manifests.items() if bench.roles[d] == "source"])
    target = merge_manifests([m for d, m in manifests.items() if bench.roles[d] == "target"], "target")
    plan = make_cv_splits(source, 2, 0)
    make_uda_split(target, 0.3, 0, plan)
    return SimpleNamespace(bench=bench, manifests=manifests, source=source, target=target, store=SegmentStore(cache), plan=plan, cache=cache)
