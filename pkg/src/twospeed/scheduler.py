"""Staggered two-speed training: schedule, snapshot registry and training-time ledger.

The fast model retrains on every cumulative data increment; the slow model
retrains on every ``slow_every``-th one. At each increment the active
ensemble pairs the latest snapshot of each kind.
"""

from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from twospeed.ensemble import Component, EnsembleSpec
from twospeed.fileio import atomic_write_bytes, atomic_write_text
from twospeed.models import Model, load_model, save_model
from twospeed.training import TrainHistory

FAST, SLOW = "fast", "slow"


class ScheduleError(ValueError):
    pass


class StateError(RuntimeError):
    pass


class TrainingFailed(RuntimeError):
    def __init__(self, increment: str, kind: str, cause: BaseException):
        super().__init__(f"training the {kind} model at increment {increment} failed: {cause}")
        self.increment = increment
        self.kind = kind


@dataclass(frozen=True)
class TrainingSchedule:
    fractions: tuple[float, ...] = (0.25, 0.5, 0.75, 1.0)
    slow_every: int = 2
    labels: tuple[str, ...] | None = None

    def __post_init__(self):
        fr = tuple(float(f) for f in self.fractions)
        object.__setattr__(self, "fractions", fr)
        if not fr or any(b <= a for a, b in zip(fr, fr[1:])) or fr[0] <= 0 or fr[-1] != 1.0:
            raise ScheduleError("fractions must be strictly increasing in (0, 1] and end at 1.0")
        if self.slow_every < 1:
            raise ScheduleError("slow_every must be >= 1")
        if self.labels is None:
            object.__setattr__(self, "labels", tuple(f"T{i}" for i in range(1, len(fr) + 1)))
        elif len(self.labels) != len(fr):
            raise ScheduleError("one label per increment required")


@dataclass(frozen=True)
class Action:
    kind: str
    fraction: float


def plan_schedule(schedule: TrainingSchedule) -> list[tuple[str, list[Action]]]:
    """Actions per increment: fast always, slow on increments s, 2s, ... (1-based)."""
    plan = []
    for k, (label, frac) in enumerate(zip(schedule.labels, schedule.fractions), start=1):
        acts = [Action(FAST, frac)]
        if k % schedule.slow_every == 0:
            acts.append(Action(SLOW, frac))
        plan.append((label, acts))
    return plan


@dataclass(frozen=True)
class ModelSnapshot:
    id: str
    kind: str
    data_fraction: float
    duration_seconds: float
    increment: str
    model_file: str
    val_oa: float

    def to_line(self) -> str:
        return "\t".join(
            [
                self.id,
                self.kind,
                f"{self.data_fraction:.6f}",
                f"{self.duration_seconds:.6f}",
                self.increment,
                self.model_file,
                f"{self.val_oa:.6f}",
            ]
        )

    @classmethod
    def from_line(cls, line: str) -> "ModelSnapshot":
        f = line.rstrip("\n").split("\t")
        if len(f) != 7:
            raise StateError(f"malformed registry line: {line!r}")
        return cls(f[0], f[1], float(f[2]), float(f[3]), f[4], f[5], float(f[6]))


class ModelRegistry:
    """Append-only snapshot log with a latest pointer per kind.

    With a ``root`` directory, snapshots persist as ``root/log.tsv`` plus
    ``root/models/<id>.tspd``, and :meth:`open` replays an existing log.
    """

    def __init__(self, root=None):
        self.root = Path(root) if root is not None else None
        self._log: list[ModelSnapshot] = []
        self._latest: dict[str, str] = {}
        self._models: dict[str, Model] = {}
        self._lock = threading.Lock()
        if self.root is not None:
            (self.root / "models").mkdir(parents=True, exist_ok=True)

    @classmethod
    def open(cls, root) -> "ModelRegistry":
        reg = cls(root)
        log = reg.root / "log.tsv"
        if log.exists():
            for line in log.read_text().splitlines():
                if line.strip():
                    snap = ModelSnapshot.from_line(line)
                    reg._log.append(snap)
                    reg._latest[snap.kind] = snap.id
        return reg

    def __len__(self) -> int:
        return len(self._log)

    @property
    def log(self) -> tuple[ModelSnapshot, ...]:
        return tuple(self._log)

    def get(self, snapshot_id: str) -> ModelSnapshot:
        for s in self._log:
            if s.id == snapshot_id:
                return s
        raise KeyError(snapshot_id)

    def latest(self, kind: str) -> ModelSnapshot | None:
        with self._lock:
            sid = self._latest.get(kind)
        return self.get(sid) if sid else None

    def latest_pair(self) -> tuple[ModelSnapshot | None, ModelSnapshot | None]:
        """Consistent (fast, slow) latest snapshots, read under the registration lock."""
        with self._lock:
            ids = self._latest.get(FAST), self._latest.get(SLOW)
            return tuple(next(s for s in self._log if s.id == i) if i else None for i in ids)

    def register(self, snap: ModelSnapshot, model: Model) -> ModelSnapshot:
        """Persist the model file, then append the log line; either both happen or neither is visible."""
        with self._lock:
            if any(s.id == snap.id for s in self._log):
                raise StateError(f"snapshot id {snap.id!r} already registered")
            if self.root is not None:
                atomic_write_bytes(self.root / snap.model_file, save_model(model))
                lines = [s.to_line() for s in self._log] + [snap.to_line()]
                atomic_write_text(self.root / "log.tsv", "\n".join(lines) + "\n")
            self._log.append(snap)
            self._latest[snap.kind] = snap.id
            self._models[snap.id] = model
        return snap

    def model(self, snapshot_id: str) -> Model:
        if snapshot_id not in self._models:
            if self.root is None:
                raise KeyError(snapshot_id)
            snap = self.get(snapshot_id)
            self._models[snapshot_id] = load_model((self.root / snap.model_file).read_bytes())
        return self._models[snapshot_id]


@dataclass(frozen=True)
class LedgerRow:
    increment: str
    model_kind: str
    data_fraction: float
    duration_seconds: float
    ensemble_total_seconds: float


@dataclass
class TimeLedger:
    """Training time of the exact snapshots active at each completed increment."""

    rows: list[LedgerRow] = field(default_factory=list)
    active: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def total(self, increment: str) -> float:
        if increment not in self.active:
            raise StateError(f"increment {increment} has not completed")
        return next(r.ensemble_total_seconds for r in self.rows if r.increment == increment)

    def to_csv(self) -> str:
        out = ["increment,model_kind,data_fraction,duration_seconds,ensemble_total_seconds"]
        for r in self.rows:
            out.append(
                f"{r.increment},{r.model_kind},{r.data_fraction:.6f},{r.duration_seconds:.6f},{r.ensemble_total_seconds:.6f}"
            )
        return "\n".join(out) + "\n"


def ledger_total(ledger: TimeLedger, increment: str) -> float:
    return ledger.total(increment)


Trainer = Callable[[str, int, float], "tuple[Model, TrainHistory]"]


def ensemble_of(registry: ModelRegistry, snapshots: Sequence[ModelSnapshot], weights=(0.5, 0.5)) -> EnsembleSpec:
    """Spec over the given fast/slow snapshots, weighting each by its kind."""
    by_kind = {FAST: weights[0], SLOW: weights[1]}
    return EnsembleSpec(tuple(Component(registry.model(s.id), float(by_kind[s.kind]), s.id) for s in snapshots))


def active_ensemble(registry: ModelRegistry, weights: tuple[float, float] = (0.5, 0.5)) -> EnsembleSpec:
    """Latest fast snapshot, plus the latest slow one when it exists."""
    fast, slow = registry.latest_pair()
    if fast is None and slow is None:
        raise StateError("registry is empty")
    return ensemble_of(registry, [s for s in (fast, slow) if s is not None], weights)


def increment_name(snapshots: Sequence[ModelSnapshot], fraction: float) -> str:
    """``ENS-<pct>`` when both kinds are active, otherwise ``CNN-<pct>``."""
    pct = f"{fraction * 100:g}"
    return f"ENS-{pct}" if len({s.kind for s in snapshots}) == 2 else f"CNN-{pct}"


class StaggeredRun:
    """Executes a :class:`TrainingSchedule` increment by increment."""

    def __init__(
        self,
        schedule: TrainingSchedule,
        registry: ModelRegistry,
        trainer: Trainer,
        parallel: bool = False,
    ):
        self.schedule = schedule
        self.registry = registry
        self.trainer = trainer
        self.parallel = parallel
        self.plan = plan_schedule(schedule)
        self.ledger = TimeLedger()
        self.completed: list[str] = []
        self._replay()

    def _replay(self) -> None:
        """Mark increments whose planned snapshots are all registered as complete (crash recovery)."""
        for label, actions in self.plan:
            if not all(self._has(f"{label}-{a.kind}") for a in actions):
                break
            self._record(label)

    def active_at(self, k: int) -> tuple[ModelSnapshot, ...]:
        """Snapshots of the active ensemble once increment ``k`` has completed: latest fast, then latest slow."""
        upto = {label for label, _ in self.plan[: k + 1]}
        latest: dict[str, ModelSnapshot] = {}
        for s in self.registry.log:
            if s.increment in upto:
                latest[s.kind] = s
        return tuple(latest[kd] for kd in (FAST, SLOW) if kd in latest)

    def _record(self, label: str) -> list[LedgerRow]:
        k = [lb for lb, _ in self.plan].index(label)
        active = self.active_at(k)
        total = sum(s.duration_seconds for s in active)
        rows = [LedgerRow(label, s.kind, s.data_fraction, s.duration_seconds, total) for s in active]
        self.ledger.rows.extend(rows)
        self.ledger.active[label] = tuple(s.id for s in active)
        self.completed.append(label)
        return rows

    @property
    def next_increment(self) -> int:
        return len(self.completed)

    def run_increment(self, k: int) -> list[LedgerRow]:
        """Train and register the planned snapshots of increment ``k`` (0-based)."""
        if k < self.next_increment:
            raise StateError(f"increment {self.plan[k][0]} already completed")
        if k != self.next_increment:
            raise StateError(f"increment {k} requested but {self.next_increment} is next")
        label, actions = self.plan[k]
        todo = [a for a in actions if not self._has(f"{label}-{a.kind}")]

        def work(action: Action):
            return self.trainer(action.kind, k, action.fraction)

        if self.parallel and len(todo) > 1:
            with ThreadPoolExecutor(max_workers=len(todo)) as pool:
                futures = [pool.submit(work, a) for a in todo]
                results = [self._collect(f.result, a, label) for f, a in zip(futures, todo)]
        else:
            results = [self._collect(lambda a=a: work(a), a, label) for a in todo]
        failure = None
        for action, res in zip(todo, results):
            if isinstance(res, TrainingFailed):
                failure = failure or res
                continue
            model, hist = res
            sid = f"{label}-{action.kind}"
            self.registry.register(
                ModelSnapshot(
                    id=sid,
                    kind=action.kind,
                    data_fraction=action.fraction,
                    duration_seconds=float(hist.duration_seconds),
                    increment=label,
                    model_file=f"models/{sid}.tspd",
                    val_oa=float(hist.final_val_accuracy) if hist.epochs else float("nan"),
                ),
                model,
            )
        if failure is not None:
            raise failure
        return self._record(label)

    def _has(self, sid: str) -> bool:
        return any(s.id == sid for s in self.registry.log)

    @staticmethod
    def _collect(call, action: Action, label: str):
        try:
            return call()
        except Exception as exc:  # recorded, re-raised after successful siblings register
            return TrainingFailed(label, action.kind, exc)

    def run_all(self, on_increment: Callable[[int, list[LedgerRow]], None] | None = None) -> TimeLedger:
        for k in range(self.next_increment, len(self.plan)):
            rows = self.run_increment(k)
            if on_increment is not None:
                on_increment(k, rows)
        return self.ledger


def format_hms(seconds: float) -> str:
    s = int(round(seconds))
    return f"{s // 3600}:{s % 3600 // 60:02d}:{s % 60:02d}"


def parse_hms(text: str) -> int:
    h, m, s = (int(p) for p in text.split(":"))
    return h * 3600 + m * 60 + s
