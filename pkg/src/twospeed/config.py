"""Run configuration: one JSON document with explicit seeds and every hyperparameter."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from twospeed.data import AugmentPolicy
from twospeed.models import MINI_HS_CNN, TINY_VIT, ConfigError, HsCnnConfig, VitConfig, config_from_dict
from twospeed.training import LR_SCHEDULES


@dataclass(frozen=True)
class TrainSettings:
    kind: str
    model: HsCnnConfig | VitConfig
    epochs: int
    lr: float
    batch_size: int = 64
    lr_schedule: str = "constant"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or not self.lr > 0:
            raise ConfigError(f"{self.kind}: epochs, batch_size and lr must be positive")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigError(f"{self.kind}: lr_schedule must be one of {LR_SCHEDULES}")


@dataclass(frozen=True)
class RunConfig:
    dataset: Path
    out_dir: Path
    seed: int
    split_seed: int
    fast: TrainSettings
    slow: TrainSettings
    holdout_fraction: float = 0.2
    val_fraction: float = 0.1
    increments: tuple[float, ...] = (0.25, 0.5, 0.75, 1.0)
    slow_every: int = 2
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    weights: tuple[float, float] = (0.5, 0.5)
    clock: str = "nominal"  # nominal | wall
    macs_per_second: float = 1e9
    parallel: bool = False
    plots: bool = True

    def validate(self) -> "RunConfig":
        if not (self.dataset / "manifest.json").is_file():
            raise ConfigError(f"dataset not found: {self.dataset} has no manifest.json")
        if self.clock not in ("nominal", "wall"):
            raise ConfigError(f"clock must be 'nominal' or 'wall', got {self.clock!r}")
        if self.macs_per_second <= 0:
            raise ConfigError("macs_per_second must be positive")
        if len(self.weights) != 2 or min(self.weights) <= 0:
            raise ConfigError("weights must be two positive numbers")
        if self.fast.model.num_classes != self.slow.model.num_classes:
            raise ConfigError("fast and slow models disagree on num_classes")
        return self


def _settings(d: dict, kind: str, default_model) -> TrainSettings:
    d = dict(d)
    model = d.pop("model", None)
    cfg = config_from_dict(kind, model) if model is not None else default_model
    return TrainSettings(kind=kind, model=cfg, **d)


def run_config_from_dict(d: dict, base: Path | None = None) -> RunConfig:
    """Build a :class:`RunConfig`; relative paths resolve against ``base``."""
    d = dict(d)
    base = Path(base) if base is not None else Path.cwd()
    try:
        for key in ("dataset", "out_dir", "seed", "split_seed", "fast", "slow"):
            if key not in d:
                raise ConfigError(f"missing required key {key!r}")
        unknown = set(d) - {f.name for f in dataclasses.fields(RunConfig)}
        if unknown:
            raise ConfigError(f"unknown keys: {sorted(unknown)}")
        d["dataset"] = base / d["dataset"]
        d["out_dir"] = base / d["out_dir"]
        d["fast"] = _settings(d["fast"], "hs_cnn", MINI_HS_CNN)
        d["slow"] = _settings(d["slow"], "vit", dataclasses.replace(TINY_VIT, num_classes=MINI_HS_CNN.num_classes))
        if "augment" in d:
            a = dict(d["augment"])
            for k in ("contrast_range", "saturation_range"):
                if k in a:
                    a[k] = tuple(a[k])
            d["augment"] = AugmentPolicy(**a)
        for k in ("increments", "weights"):
            if k in d:
                d[k] = tuple(float(v) for v in d[k])
        for k in ("seed", "split_seed"):
            if not isinstance(d[k], int) or isinstance(d[k], bool):
                raise ConfigError(f"{k} must be an explicit integer")
        return RunConfig(**d)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid run config: {exc}") from exc


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    return run_config_from_dict(d, path.parent)


def _jsonable(x):
    if dataclasses.is_dataclass(x):
        return {f.name: _jsonable(getattr(x, f.name)) for f in dataclasses.fields(x)}
    if isinstance(x, (tuple, list)):
        return [_jsonable(v) for v in x]
    if isinstance(x, Path):
        return str(x)
    return x


def default_synthetic_config(dataset="data", out_dir="run") -> dict:
    """The desk-scale experiment on the six-class synthetic set.

    Flips are off because they change stripe orientation, i.e. the label.
    """
    slow = dataclasses.replace(TINY_VIT, num_classes=6, dropout_rate=0.3)
    return {
        "dataset": str(dataset),
        "out_dir": str(out_dir),
        "seed": 1,
        "split_seed": 7,
        "holdout_fraction": 0.2,
        "val_fraction": 0.1,
        "increments": [0.25, 0.5, 0.75, 1.0],
        "slow_every": 2,
        "fast": {"model": _jsonable(MINI_HS_CNN), "epochs": 6, "lr": 1e-3, "batch_size": 64},
        "slow": {"model": _jsonable(slow), "epochs": 300, "lr": 3e-4, "batch_size": 32},
        "augment": _jsonable(AugmentPolicy(0.0, 0.0, 25.0, (0.8, 1.2), (0.7, 1.3))),
        "weights": [0.5, 0.5],
        "clock": "nominal",
        "macs_per_second": 1e9,
        "parallel": False,
        "plots": True,
    }


def run_config_to_dict(cfg: RunConfig) -> dict:
    d = _jsonable(cfg)
    for side in ("fast", "slow"):
        d[side].pop("kind")
    return d
