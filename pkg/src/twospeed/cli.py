"""Command-line entry point.

Exit codes: 0 success, 1 runtime or compute failure, 2 usage or validation error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from twospeed.config import ConfigError, default_synthetic_config, load_run_config
from twospeed.data import (
    DatasetError,
    holdout_view,
    import_ppm_dir,
    load_dataset,
    make_split_plan,
    to_batch,
    write_dataset,
)
from twospeed.ensemble import SWEEP_GRID, EnsembleSpec, sweep_csv, weight_sweep
from twospeed.fileio import atomic_write_text
from twospeed.metrics import MetricsReport, emit_report
from twospeed.models import ModelFormatError, load_model
from twospeed.pipeline import evaluate_spec, run_schedule
from twospeed.saliency import SaliencyError, attention_rollout, occlusion_map, write_map_image, write_montage
from twospeed.scheduler import TrainingFailed
from twospeed.synthetic import generate_synthetic, parse_class_specs

log = logging.getLogger("twospeed")


class UsageError(Exception):
    """Bad flags or inputs; maps to exit code 2."""


class ComputeError(Exception):
    """Runtime failure; maps to exit code 1."""


def _load_data(path):
    try:
        return load_dataset(path)
    except DatasetError as exc:
        raise UsageError(str(exc)) from exc


def _load_model(path):
    try:
        return load_model(Path(path).read_bytes())
    except (OSError, ModelFormatError) as exc:
        raise ComputeError(f"cannot load model {path}: {exc}") from exc


def _eval_view(ds, args):
    if args.split == "all":
        return ds.subset(np.arange(ds.n))
    plan = make_split_plan(ds, args.split_seed, args.holdout_fraction, args.val_fraction)
    return holdout_view(ds, plan)


def _train_mean_colour(ds, args) -> np.ndarray:
    plan = make_split_plan(ds, args.split_seed, args.holdout_fraction, args.val_fraction)
    imgs = ds.images[plan.trainval_order]
    return imgs.reshape(-1, 3).mean(axis=0) / 255.0


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    if args.per_class < 1:
        raise UsageError("--per-class must be >= 1")
    try:
        classes = parse_class_specs(args.classes)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    ds = generate_synthetic(classes, args.per_class, args.seed)
    write_dataset(ds, args.out)
    print(f"wrote {ds.n} chips ({len(classes)} classes x {args.per_class}) to {args.out}")
    if args.write_config:
        cfg_path = Path(args.write_config)
        cfg = default_synthetic_config(dataset=Path(args.out).resolve(), out_dir=Path("run").resolve())
        for side in ("fast", "slow"):
            cfg[side]["model"]["num_classes"] = len(classes)
        atomic_write_text(cfg_path, json.dumps(cfg, indent=2) + "\n")
        print(f"wrote run config to {cfg_path}")
    return 0


def cmd_import(args) -> int:
    try:
        ds = import_ppm_dir(args.src)
    except (DatasetError, OSError) as exc:
        raise UsageError(str(exc)) from exc
    write_dataset(ds, args.out)
    counts = np.bincount(ds.labels, minlength=len(ds.class_names))
    print(f"imported {ds.n} chips: " + ", ".join(f"{n}={c}" for n, c in zip(ds.class_names, counts)))
    return 0


def cmd_schedule(args) -> int:
    try:
        cfg = load_run_config(args.config)
        cfg.validate()
        if args.out_dir:
            from dataclasses import replace

            cfg = replace(cfg, out_dir=Path(args.out_dir))
    except (ConfigError, DatasetError) as exc:
        raise UsageError(str(exc)) from exc
    try:
        result = run_schedule(cfg)
    except TrainingFailed as exc:
        raise ComputeError(str(exc)) from exc
    except (ConfigError, DatasetError) as exc:
        raise UsageError(str(exc)) from exc
    for r in result.reports:
        print(f"{r.model:8s} {r.increment:3s} OA={r.oa:.4f} F1={r.macro_f1:.4f} train_s={r.training_total_seconds:.1f}")
    print(f"reports written to {result.out_dir}")
    return 0


def cmd_eval(args) -> int:
    ds = _load_data(args.data)
    view = _eval_view(ds, args)
    if args.model:
        spec = EnsembleSpec.of((_load_model(args.model), 1.0), names=[Path(args.model).stem])
        ident = Path(args.model).stem
    else:
        fast, slow = args.ensemble
        w = args.weights
        spec = EnsembleSpec.of((_load_model(fast), w[0]), (_load_model(slow), w[1]), names=["fast", "slow"])
        ident = "ensemble"
    for c in spec.components:
        if c.model.num_classes != len(ds.class_names):
            raise UsageError(f"model {c.name} has {c.model.num_classes} classes, dataset has {len(ds.class_names)}")
    _, cm = evaluate_spec(spec, ds, view)
    report = MetricsReport.from_confusion(cm, ident, args.split)
    emit_report([report], {ident: cm}, args.out)
    print(f"{ident}: n={report.n_eval} OA={report.oa:.4f} macro_F1={report.macro_f1:.4f}")
    return 0


def cmd_sweep(args) -> int:
    fast, slow = _load_model(args.fast), _load_model(args.slow)
    ds = _load_data(args.data)
    view = _eval_view(ds, args)
    x = to_batch(view.images(), np.float32)
    try:
        pa, pb = fast.predict_proba(x), slow.predict_proba(x)
        rows, best = weight_sweep(pa, pb, view.labels, SWEEP_GRID)
    except ValueError as exc:
        raise ComputeError(str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "sweep.csv", sweep_csv(rows))
    if not args.no_plot:
        from twospeed.plotting import plot_sweep

        plot_sweep(rows, best, out / "sweep.png")
    print(f"best w_cnn={best[0]:.1f} w_vit={best[1]:.1f} OA={best[2]:.6f}")
    return 0


def cmd_saliency(args) -> int:
    ds = _load_data(args.data)
    if not 0 <= args.index < ds.n:
        raise UsageError(f"--index {args.index} out of range [0, {ds.n})")
    model = _load_model(args.model)
    chip = ds.images[args.index]
    probs = model.predict_proba(to_batch(chip[None], model._dtype()))[0]
    target = int(np.argmax(probs)) if args.target_class is None else args.target_class
    if not 0 <= target < model.num_classes:
        raise UsageError(f"--class {target} out of range [0, {model.num_classes})")
    try:
        if args.method == "occlusion":
            smap = occlusion_map(model, chip, target, _train_mean_colour(ds, args), args.patch, args.stride)
        else:
            smap = attention_rollout(model, chip)
    except SaliencyError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"saliency_{args.index}_{args.method}"
    write_map_image(smap, out / f"{stem}.pgm")
    write_montage(chip, smap, out / f"{stem}_montage.ppm")
    name = ds.class_names[target] if target < len(ds.class_names) else str(target)
    print(f"class {target} ({name}) p={probs[target]:.6f}; true {ds.class_names[ds.labels[args.index]]}")
    return 0


# ---------------------------------------------------------------- parser


def _add_split(p):
    p.add_argument("--split", choices=("holdout", "all"), default="holdout")
    p.add_argument("--split-seed", type=int, default=7)
    p.add_argument("--holdout-fraction", type=float, default=0.2)
    p.add_argument("--val-fraction", type=float, default=0.1)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="twospeed", description="Two-speed CNN + ViT ensemble toolkit")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic chip dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--per-class", type=int, required=True)
    p.add_argument("--classes", default="default6")
    p.add_argument("--write-config", metavar="PATH", help="also write a default run config for this dataset")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("import", help="pack per-class directories of 32x32 PPM chips")
    p.add_argument("--src", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_import)

    p = sub.add_parser("schedule", help="run the staggered two-speed schedule")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", help="override the config's out_dir")
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("eval", help="evaluate a model or a two-model ensemble")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--model")
    g.add_argument("--ensemble", nargs=2, metavar=("FAST", "SLOW"))
    p.add_argument("--weights", nargs=2, type=float, default=(0.5, 0.5))
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_split(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="grid over fast:slow fusion weights 10:90 .. 90:10")
    p.add_argument("--fast", required=True)
    p.add_argument("--slow", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-plot", action="store_true")
    _add_split(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("saliency", help="attribution map for one chip")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--class", dest="target_class", type=int)
    p.add_argument("--method", choices=("occlusion", "attention_rollout"), default="occlusion")
    p.add_argument("--patch", type=int, default=4)
    p.add_argument("--stride", type=int, default=2)
    p.add_argument("--out", required=True)
    _add_split(p)
    p.set_defaults(func=cmd_saliency)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ComputeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, DatasetError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # anything else is a compute failure
        log.debug("unhandled", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
