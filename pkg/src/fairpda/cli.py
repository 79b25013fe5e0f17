"""Command-line entry point: ``fairpda synth | prep | split | train | eval | report``.

Every subcommand takes ``--config FILE`` and repeatable ``--set section.key=value``;
dedicated flags such as ``--seed`` are applied last. The resolved configuration
is written next to the command's outputs before any work starts.

Exit codes: 0 success, 1 validation/config error, 2 I/O error, 3 numerical abort.
"""
from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from pathlib import Path

from . import config as C
from .cohort import SplitPlan, apply_filters, load_manifest, make_cv_splits, make_uda_split, merge_manifests
from .errors import CacheError, FairPDAError, ValidationError

log = logging.getLogger("fairpda")


# ------------------------------------------------------------------ helpers


def _manifests(cfg: dict) -> tuple:
    """(source manifests, target manifests), filtered."""
    d = cfg["data"]
    if d["source_manifests"] or d["target_manifests"]:
        sources = [load_manifest(p, "source") for p in d["source_manifests"]]
        targets = [load_manifest(p, "target") for p in d["target_manifests"]]
    else:
        from .synth import load_benchmark

        root = C.benchmark_dir(cfg)
        if not (root / "benchmark.json").exists():
            raise FileNotFoundError(2, "no benchmark found (run `fairpda synth` first)", str(root / "benchmark.json"))
        bench = load_benchmark(root)
        sources = [load_manifest(p, "source") for p in bench.by_role("source")]
        targets = [load_manifest(p, "target") for p in bench.by_role("target")]
    if not sources:
        raise ValidationError("no source manifests configured")
    filt = C.filter_config(cfg)
    return [apply_filters(m, filt) for m in sources], [apply_filters(m, filt) for m in targets]


def _load_plan(cfg: dict) -> SplitPlan:
    path = C.split_path(cfg)
    if not path.exists():
        raise FileNotFoundError(2, "split plan not found (run `fairpda split` first)", str(path))
    return SplitPlan.load(path)


def _load_store(cfg: dict):
    from .data import SegmentStore

    path = C.cache_dir(cfg)
    if not (path / "index.json").exists():
        raise CacheError(f"feature cache not found: {path} (run `fairpda prep` first)")
    return SegmentStore(path)


def _print_aggregate(report) -> None:
    for key, stat in report.aggregate.items():
        if stat["mean"] is not None:
            print(f"  {key:<16} {stat['mean']:9.4f} ± {stat['std']:.4f}  (n={stat['n']})")


# ----------------------------------------------------------------- commands


def cmd_synth(args, cfg) -> int:
    from .synth import build_synth_benchmark

    spec = C.synth_spec(cfg)
    out = C.benchmark_dir(cfg)
    C.write_echo(cfg, out)
    bench = build_synth_benchmark(spec, out)
    print(f"benchmark written to {bench.root} ({len(bench.manifests)} datasets)")
    return 0


def cmd_prep(args, cfg) -> int:
    from .audio import build_feature_cache

    sources, targets = _manifests(cfg)
    out = C.cache_dir(cfg)
    C.write_echo(cfg, out)
    result = build_feature_cache(sources + targets, C.prep_config(cfg), C.feature_config(cfg), out)
    print(f"cache {out}: {result.written} written, {result.skipped} unchanged, {result.segments} segments")
    for key, msg in result.failures:
        print(f"fairpda prep: failed {key}: {msg}", file=sys.stderr)
    return 2 if result.failures else 0


def cmd_split(args, cfg) -> int:
    sources, targets = _manifests(cfg)
    d = cfg["data"]
    C.write_echo(cfg, C.split_path(cfg).parent, "split_config.toml")
    plan = make_cv_splits(merge_manifests(sources), d["folds"], d["split_seed"])
    if targets:
        make_uda_split(merge_manifests(targets, "target"), d["adaptation_fraction"], d["split_seed"], plan)
    plan.save(C.split_path(cfg))
    print(
        f"split plan {C.split_path(cfg)}: {len(plan.folds)} folds, "
        f"{len(plan.uda_adaptation)} adaptation / {len(plan.uda_external_eval)} external patients"
    )
    return 0


def cmd_train(args, cfg) -> int:
    from .trainer import run_experiment

    protocol = C.train_protocol(cfg)
    model_cfg = C.model_config(cfg)
    out = C.run_dir(cfg)
    C.write_echo(cfg, out)
    store = _load_store(cfg)
    plan = _load_plan(cfg)
    folds = cfg["train"]["folds"] or None
    report = run_experiment(
        protocol,
        model_cfg,
        store,
        plan,
        run_dir=out,
        run_name=cfg["train"]["run_name"],
        fairness_reduction=cfg["eval"]["fairness_reduction"],
        folds=folds,
    )
    print(f"run {out}: report.json written")
    _print_aggregate(report)
    return 0


_FOLD_RE = re.compile(r"^fold(\d+)\.ckpt$")


def _checkpoints(path: Path) -> list:
    if not path.exists():
        raise FileNotFoundError(2, "checkpoint not found", str(path))
    if path.is_file():
        m = _FOLD_RE.match(path.name)
        if not m:
            raise ValidationError(f"cannot tell the fold of checkpoint {path} (expected fold<i>.ckpt)")
        return [(int(m.group(1)), path)]
    found = sorted((int(m.group(1)), p) for p in path.iterdir() if (m := _FOLD_RE.match(p.name)))
    if not found:
        raise FileNotFoundError(2, "no fold<i>.ckpt checkpoints in directory", str(path))
    return found


def cmd_eval(args, cfg) -> int:
    from . import tensorio
    from .evaluator import MetricsReport
    from .trainer import fold_predictions, load_model

    target = Path(args.checkpoint) if args.checkpoint else C.run_dir(cfg)
    ckpts = _checkpoints(target)
    out_dir = target if target.is_dir() else target.parent
    C.write_echo(cfg, out_dir, "eval_config.toml")
    store = _load_store(cfg)
    plan = _load_plan(cfg)
    preds, protocol = [], {}
    for fold, path in ckpts:
        _, meta = tensorio.load_bundle(path)
        protocol = meta["protocol"]
        preds += fold_predictions(load_model(path), store, plan, fold)
    run_name = out_dir.name
    report = MetricsReport.build(run_name, protocol, preds, cfg["eval"]["fairness_reduction"])
    out = Path(args.output) if args.output else out_dir / "eval_report.json"
    report.save(out)
    print(f"evaluated {len(ckpts)} checkpoint(s) -> {out}")
    _print_aggregate(report)
    in_run = out_dir / "report.json"
    if in_run.exists() and target.is_dir():
        same = MetricsReport.load(in_run).aggregate == report.aggregate
        print(f"matches in-run report: {'yes' if same else 'NO'}")
    return 0


def _plot_losses(run: Path, out_dir: Path) -> list:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    for loss_file in sorted(run.glob("fold*_losses.json")):
        history = json.loads(loss_file.read_text(encoding="utf-8"))
        if not history:
            continue
        steps = [h["step"] for h in history]
        fig, ax = plt.subplots(figsize=(6, 3.5))
        for key, label in (("loss_y", "task"), ("loss_d", "domain"), ("loss_fair", "gender")):
            ax.plot(steps, [h[key] for h in history], label=label, linewidth=1)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_title(f"{run.name} {loss_file.stem.replace('_losses', '')}")
        ax.legend()
        fig.tight_layout()
        path = out_dir / f"{run.name}_{loss_file.stem}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        written.append(path)
    return written


def cmd_report(args, cfg) -> int:
    from .evaluator import MetricsReport, write_table_csv

    runs = [Path(r) for r in args.runs] if args.runs else sorted(p for p in (C.workdir(cfg) / cfg["run"]["runs_dir"]).glob("*") if p.is_dir())
    if not runs:
        raise ValidationError("no runs to report on")
    reports = []
    for run in runs:
        path = run / "report.json"
        if not path.exists():
            raise FileNotFoundError(2, "run report not found", str(path))
        reports.append(MetricsReport.load(path))
    out_dir = Path(args.output) if args.output else C.reports_dir(cfg)
    C.write_echo(cfg, out_dir, "report_config.toml")
    reference = args.reference or cfg["eval"]["reference_run"] or reports[0].run_name
    names = [r.run_name for r in reports]
    if reference not in names:
        raise ValidationError(f"reference run {reference!r} not among {names}")
    ref = reports[names.index(reference)]
    for rep in reports:
        if rep is not ref:
            rep.compare(ref, cfg["eval"]["n_resamples"], cfg["eval"]["test_seed"])
    table = out_dir / "table.csv"
    write_table_csv(reports, table, reference)
    plots = [p for run in runs for p in _plot_losses(run, out_dir)]
    print(f"table {table} ({len(reports)} runs, reference {reference}); {len(plots)} loss plots")
    return 0


# ------------------------------------------------------------------ parser


def _flag_overrides(args) -> list:
    out = []
    for attr, key in (
        ("seed", "train.seed"),
        ("epochs", "train.epochs"),
        ("run_name", "train.run_name"),
        ("align", "train.align_mode"),
        ("mode", "train.mode"),
    ):
        value = getattr(args, attr, None)
        if value is not None:
            out.append(f"{key}={json.dumps(value)}")
    for attr in ("no_fairness", "no_mixstyle", "no_warmup"):
        if getattr(args, attr, False):
            out.append(f"train.{attr}=true")
    if getattr(args, "workdir", None):
        out.append(f"run.workdir={json.dumps(args.workdir)}")
    return out


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", help="TOML config file")
    common.add_argument("--set", "-s", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override a config key")
    common.add_argument("--workdir", "-w", help="shortcut for --set run.workdir=...")
    common.add_argument("--verbose", "-v", action="store_true")

    parser = argparse.ArgumentParser(prog="fairpda", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate the synthetic benchmark").set_defaults(func=cmd_synth)
    sub.add_parser("prep", parents=[common], help="build the feature cache").set_defaults(func=cmd_prep)
    sub.add_parser("split", parents=[common], help="write the CV / adaptation split plan").set_defaults(func=cmd_split)

    train = sub.add_parser("train", parents=[common], help="train and evaluate all folds")
    train.add_argument("--run-name")
    train.add_argument("--seed", type=int)
    train.add_argument("--epochs", type=int)
    train.add_argument("--mode", choices=("DG", "UDA"))
    train.add_argument("--align", choices=("none", "dann", "cdan", "partial_cdan", "coral"))
    train.add_argument("--no-fairness", action="store_true")
    train.add_argument("--no-mixstyle", action="store_true")
    train.add_argument("--no-warmup", action="store_true")
    train.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", parents=[common], help="re-evaluate saved checkpoints")
    ev.add_argument("checkpoint", nargs="?", help="run directory or fold<i>.ckpt (default: configured run)")
    ev.add_argument("--output", "-o")
    ev.set_defaults(func=cmd_eval)

    rep = sub.add_parser("report", parents=[common], help="comparison table and loss plots")
    rep.add_argument("runs", nargs="*", help="run directories (default: every run under the work dir)")
    rep.add_argument("--reference", help="run name the paired tests compare against")
    rep.add_argument("--output", "-o")
    rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    stage = args.command
    try:
        cfg = C.load_config(args.config, list(args.set) + _flag_overrides(args))
        return args.func(args, cfg)
    except FairPDAError as exc:
        print(f"fairpda {stage}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        where = f" ({exc.filename})" if exc.filename and str(exc.filename) not in str(exc) else ""
        print(f"fairpda {stage}: I/O error: {exc}{where}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
