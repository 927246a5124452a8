"""End-to-end staggered run: train per schedule, evaluate on the holdout, write reports."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from twospeed.config import RunConfig, run_config_to_dict
from twospeed.data import ChipDataset, holdout_view, increment_view, load_dataset, make_split_plan, to_batch
from twospeed.ensemble import ensemble_predict
from twospeed.fileio import atomic_write_text
from twospeed.metrics import ConfusionMatrix, MetricsReport, confusion_csv, confusion_matrix, metrics_csv
from twospeed.models import ConfigError, build_model
from twospeed.scheduler import (
    FAST,
    SLOW,
    ModelRegistry,
    StaggeredRun,
    TrainingSchedule,
    ensemble_of,
    increment_name,
)
from twospeed.training import TrainHistory, nominal_seconds, train_model

log = logging.getLogger(__name__)


@dataclass
class RunResult:
    reports: list[MetricsReport] = field(default_factory=list)
    component_reports: list[MetricsReport] = field(default_factory=list)
    confusions: dict[str, ConfusionMatrix] = field(default_factory=dict)
    histories: dict[str, TrainHistory] = field(default_factory=dict)
    out_dir: Path | None = None


def make_trainer(cfg: RunConfig, ds: ChipDataset, plan, histories: dict | None = None):
    """Trainer callback for :class:`StaggeredRun`; each action gets its own seeded generator."""

    def trainer(kind: str, k: int, fraction: float):
        settings = cfg.fast if kind == FAST else cfg.slow
        rng = np.random.default_rng([cfg.seed, k, 0 if kind == FAST else 1])
        model = build_model(settings.kind, settings.model, rng)
        train, val = increment_view(ds, plan, k)
        clock = None
        if cfg.clock == "nominal":
            clock = lambda net, n, wall: nominal_seconds(net, n, cfg.macs_per_second)  # noqa: E731
        log.info("training %s on increment %d (%d samples)", kind, k + 1, len(train))
        net, hist = train_model(
            model, train, val, settings.epochs, settings.lr, settings.batch_size, cfg.augment, rng, clock,
            lr_schedule=settings.lr_schedule,
        )
        if histories is not None:
            histories[f"{kind}@{k}"] = hist
        return net, hist

    return trainer


def evaluate_spec(spec, ds: ChipDataset, view) -> tuple[np.ndarray, ConfusionMatrix]:
    x = to_batch(view.images(), np.float32)
    pred, _ = ensemble_predict(spec, x)
    return pred, confusion_matrix(view.labels, pred, len(ds.class_names), ds.class_names)


def run_schedule(cfg: RunConfig, trainer=None) -> RunResult:
    """Execute every increment of ``cfg`` and write all reports under ``cfg.out_dir``.

    Increments already present in ``out_dir/registry`` are not retrained,
    so an interrupted run resumes where it stopped.
    """
    cfg.validate()
    ds = load_dataset(cfg.dataset)
    if cfg.fast.model.num_classes != len(ds.class_names):
        raise ConfigError(
            f"models have {cfg.fast.model.num_classes} classes but the dataset has {len(ds.class_names)}"
        )
    plan = make_split_plan(ds, cfg.split_seed, cfg.holdout_fraction, cfg.val_fraction, cfg.increments)
    schedule = TrainingSchedule(cfg.increments, cfg.slow_every)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "config.json", json.dumps(run_config_to_dict(cfg), indent=2, sort_keys=True) + "\n")
    registry = ModelRegistry.open(out / "registry")
    result = RunResult(out_dir=out)
    run = StaggeredRun(schedule, registry, trainer or make_trainer(cfg, ds, plan, result.histories), cfg.parallel)
    hold = holdout_view(ds, plan)
    done = len(run.completed)
    seen: set[str] = set()
    for k, (label, _) in enumerate(run.plan):
        if k >= done:
            run.run_increment(k)
        active = run.active_at(k)
        frac = schedule.fractions[k]
        name = increment_name(active, frac)
        spec = ensemble_of(registry, active, cfg.weights)
        _, cm = evaluate_spec(spec, ds, hold)
        kinds = {s.kind: s.data_fraction for s in active}
        result.reports.append(
            MetricsReport.from_confusion(
                cm,
                name,
                label,
                train_fraction_fast=kinds.get(FAST),
                train_fraction_slow=kinds.get(SLOW),
                training_total_seconds=run.ledger.total(label),
            )
        )
        result.confusions[name] = cm
        for snap in active:
            if snap.id in seen:
                continue
            seen.add(snap.id)
            _, ccm = evaluate_spec(ensemble_of(registry, [snap], (1.0, 1.0)), ds, hold)
            result.component_reports.append(
                MetricsReport.from_confusion(
                    ccm,
                    snap.id,
                    snap.increment,
                    train_fraction_fast=snap.data_fraction if snap.kind == FAST else None,
                    train_fraction_slow=snap.data_fraction if snap.kind == SLOW else None,
                    training_total_seconds=snap.duration_seconds,
                )
            )
            result.confusions[snap.id] = ccm
        log.info("%s (%s): holdout OA %.4f", name, label, result.reports[-1].oa)
        _write_reports(out, result, run)
    if cfg.plots:
        from twospeed import plotting

        plotting.render_run(result, out)
    return result


def _write_reports(out: Path, result: RunResult, run: StaggeredRun) -> None:
    atomic_write_text(out / "metrics.csv", metrics_csv(result.reports))
    atomic_write_text(out / "components.csv", metrics_csv(result.component_reports))
    atomic_write_text(out / "ledger.csv", run.ledger.to_csv())
    for ident, cm in result.confusions.items():
        atomic_write_text(out / f"confusion_{ident}.csv", confusion_csv(cm))
