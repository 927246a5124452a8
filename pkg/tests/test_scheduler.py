import threading
import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from twospeed.models import MINI_HS_CNN, build_hs_cnn
from twospeed.scheduler import (
    FAST,
    SLOW,
    Action,
    ModelRegistry,
    ModelSnapshot,
    ScheduleError,
    StaggeredRun,
    StateError,
    TrainingFailed,
    TrainingSchedule,
    active_ensemble,
    format_hms,
    increment_name,
    ledger_total,
    parse_hms,
    plan_schedule,
)
from twospeed.training import TrainHistory

REFERENCE_TIMES = {
    (FAST, 0.25): "0:07:23", (FAST, 0.5): "0:14:36", (FAST, 0.75): "0:21:35", (FAST, 1.0): "0:28:34",
    (SLOW, 0.5): "2:04:30", (SLOW, 1.0): "4:09:39",
}


class Stub:
    """Stand-in model for in-memory registries."""

    def __init__(self, kind, k):
        self.kind, self.k = kind, k


def mock_trainer(durations=None, calls=None, fail=None):
    def trainer(kind, k, fraction):
        if calls is not None:
            calls.append((kind, k, fraction))
        if fail is not None and (kind, k) in fail:
            raise RuntimeError(f"{kind} diverged")
        d = durations[(kind, fraction)] if durations else 1.0
        return Stub(kind, k), TrainHistory(duration_seconds=d)

    return trainer


def reference_durations():
    return {key: parse_hms(v) for key, v in REFERENCE_TIMES.items()}


# ---------------------------------------------------------------- plan


def test_default_plan():
    plan = plan_schedule(TrainingSchedule())
    assert [label for label, _ in plan] == ["T1", "T2", "T3", "T4"]
    assert [[(a.kind, a.fraction) for a in acts] for _, acts in plan] == [
        [(FAST, 0.25)],
        [(FAST, 0.5), (SLOW, 0.5)],
        [(FAST, 0.75)],
        [(FAST, 1.0), (SLOW, 1.0)],
    ]


def test_slow_every_three():
    plan = plan_schedule(TrainingSchedule((0.2, 0.4, 0.6, 0.8, 1.0), slow_every=3))
    assert [len(acts) for _, acts in plan] == [1, 1, 2, 1, 1]


def test_slow_every_one_trains_both_everywhere():
    plan = plan_schedule(TrainingSchedule((0.5, 1.0), slow_every=1))
    assert all(acts == [Action(FAST, f), Action(SLOW, f)] for (_, acts), f in zip(plan, (0.5, 1.0)))


@pytest.mark.parametrize(
    "kw",
    [
        {"fractions": ()},
        {"fractions": (0.5, 0.25, 1.0)},
        {"fractions": (0.5, 0.5, 1.0)},
        {"fractions": (0.25, 0.5)},
        {"fractions": (0.0, 1.0)},
        {"slow_every": 0},
        {"labels": ("a", "b")},
    ],
)
def test_bad_schedules_rejected(kw):
    with pytest.raises(ScheduleError):
        TrainingSchedule(**kw)


# ---------------------------------------------------------------- staggered trace


def test_trace_and_active_pairs():
    calls = []
    reg = ModelRegistry()
    run = StaggeredRun(TrainingSchedule(), reg, mock_trainer(calls=calls))
    pairs = []
    for k in range(4):
        run.run_increment(k)
        pairs.append(tuple(s.id for s in run.active_at(k)))
    assert calls == [(FAST, 0, 0.25), (FAST, 1, 0.5), (SLOW, 1, 0.5), (FAST, 2, 0.75), (FAST, 3, 1.0), (SLOW, 3, 1.0)]
    assert pairs == [("T1-fast",), ("T2-fast", "T2-slow"), ("T3-fast", "T2-slow"), ("T4-fast", "T4-slow")]


def test_state_after_t1_and_t3():
    reg = ModelRegistry()
    run = StaggeredRun(TrainingSchedule(), reg, mock_trainer())
    run.run_increment(0)
    fast, slow = reg.latest_pair()
    assert fast.id == "T1-fast" and slow is None
    assert len(active_ensemble(reg).components) == 1
    run.run_increment(1)
    run.run_increment(2)
    fast, slow = reg.latest_pair()
    assert (fast.id, fast.data_fraction) == ("T3-fast", 0.75)
    assert (slow.id, slow.data_fraction) == ("T2-slow", 0.5)
    assert [c.name for c in active_ensemble(reg).components] == ["T3-fast", "T2-slow"]


def test_increment_names():
    reg = ModelRegistry()
    run = StaggeredRun(TrainingSchedule(), reg, mock_trainer())
    names = []
    for k, frac in enumerate((0.25, 0.5, 0.75, 1.0)):
        run.run_increment(k)
        names.append(increment_name(run.active_at(k), frac))
    assert names == ["CNN-25", "ENS-50", "ENS-75", "ENS-100"]


def test_rerun_and_skip_rejected():
    run = StaggeredRun(TrainingSchedule(), ModelRegistry(), mock_trainer())
    with pytest.raises(StateError):
        run.run_increment(1)
    run.run_increment(0)
    with pytest.raises(StateError):
        run.run_increment(0)


def test_empty_registry_has_no_active_ensemble():
    with pytest.raises(StateError):
        active_ensemble(ModelRegistry())


def test_duplicate_snapshot_rejected():
    reg = ModelRegistry()
    snap = ModelSnapshot("T1-fast", FAST, 0.25, 1.0, "T1", "models/T1-fast.tspd", 0.5)
    reg.register(snap, Stub(FAST, 0))
    with pytest.raises(StateError):
        reg.register(snap, Stub(FAST, 0))


# ---------------------------------------------------------------- failures


def test_slow_failure_keeps_previous_pair_and_resumes():
    reg = ModelRegistry()
    calls = []
    run = StaggeredRun(TrainingSchedule(), reg, mock_trainer(calls=calls, fail={(SLOW, 3)}))
    for k in range(3):
        run.run_increment(k)
    with pytest.raises(TrainingFailed) as info:
        run.run_increment(3)
    assert (info.value.increment, info.value.kind) == ("T4", SLOW)
    assert run.completed == ["T1", "T2", "T3"]
    assert reg.latest(SLOW).id == "T2-slow"
    assert reg.latest(FAST).id == "T4-fast"
    with pytest.raises(StateError):
        run.ledger.total("T4")

    run.trainer = mock_trainer(calls=calls)
    run.run_increment(3)
    assert calls[-1] == (SLOW, 3, 1.0)
    assert sum(c[:2] == (FAST, 3) for c in calls) == 1


def test_failed_model_leaves_no_files(tmp_path):
    model = build_hs_cnn(MINI_HS_CNN, np.random.default_rng(0))

    def trainer(kind, k, fraction):
        if kind == SLOW:
            raise RuntimeError("nan loss")
        return model, TrainHistory(duration_seconds=3.0)

    run = StaggeredRun(TrainingSchedule(), ModelRegistry.open(tmp_path), trainer)
    run.run_increment(0)
    with pytest.raises(TrainingFailed):
        run.run_increment(1)
    assert sorted(p.name for p in (tmp_path / "models").iterdir()) == ["T1-fast.tspd", "T2-fast.tspd"]
    assert len((tmp_path / "log.tsv").read_text().splitlines()) == 2


# ---------------------------------------------------------------- ledger


def _run_all_reference():
    run = StaggeredRun(TrainingSchedule(), ModelRegistry(), mock_trainer(reference_durations()))
    run.run_all()
    return run


def test_ledger_matches_reported_totals():
    run = _run_all_reference()
    assert format_hms(ledger_total(run.ledger, "T1")) == "0:07:23"
    assert format_hms(ledger_total(run.ledger, "T2")) == "2:19:06"


def test_ledger_later_increments_are_component_sums():
    run = _run_all_reference()
    assert format_hms(run.ledger.total("T3")) == "2:26:05"
    assert format_hms(run.ledger.total("T4")) == "4:38:13"


def test_ledger_csv_rows():
    run = _run_all_reference()
    lines = run.ledger.to_csv().splitlines()
    assert lines[0] == "increment,model_kind,data_fraction,duration_seconds,ensemble_total_seconds"
    assert lines[1] == "T1,fast,0.250000,443.000000,443.000000"
    assert lines[4] == "T3,fast,0.750000,1295.000000,8765.000000"
    assert lines[5] == "T3,slow,0.500000,7470.000000,8765.000000"
    assert len(lines) == 1 + 1 + 2 + 2 + 2


def test_zero_durations_total_zero():
    run = StaggeredRun(TrainingSchedule(), ModelRegistry(), mock_trainer({k: 0.0 for k in REFERENCE_TIMES}))
    run.run_all()
    assert all(run.ledger.total(f"T{i}") == 0 for i in range(1, 5))


@given(st.lists(st.floats(0, 1e5), min_size=6, max_size=6))
def test_ledger_total_is_sum_of_active_durations(values):
    durations = dict(zip(REFERENCE_TIMES, values))
    run = StaggeredRun(TrainingSchedule(), ModelRegistry(), mock_trainer(durations))
    run.run_all()
    for k, (label, _) in enumerate(run.plan):
        active = run.active_at(k)
        assert run.ledger.total(label) == pytest.approx(sum(s.duration_seconds for s in active), abs=1e-9)
        assert run.ledger.active[label] == tuple(s.id for s in active)


def test_hms_round_trip():
    for text in REFERENCE_TIMES.values():
        assert format_hms(parse_hms(text)) == text


# ---------------------------------------------------------------- registry invariants


@given(st.lists(st.sampled_from([FAST, SLOW]), min_size=1, max_size=20))
def test_registry_is_append_only_and_latest_tracks_last(kinds):
    reg = ModelRegistry()
    seen = []
    for i, kind in enumerate(kinds):
        snap = ModelSnapshot(f"s{i}", kind, 1.0, 1.0, "T1", f"models/s{i}.tspd", 0.0)
        before = reg.log
        reg.register(snap, Stub(kind, i))
        assert reg.log[: len(before)] == before
        seen.append(snap)
        for kd in (FAST, SLOW):
            last = [s for s in seen if s.kind == kd]
            assert reg.latest(kd) == (last[-1] if last else None)


def test_replay_from_disk_resumes(tmp_path):
    model = build_hs_cnn(MINI_HS_CNN, np.random.default_rng(0))
    calls = []

    def trainer(kind, k, fraction):
        calls.append((kind, k))
        return model, TrainHistory(duration_seconds=10.0 * (k + 1))

    run = StaggeredRun(TrainingSchedule(), ModelRegistry.open(tmp_path), trainer)
    run.run_increment(0)
    run.run_increment(1)

    reopened = ModelRegistry.open(tmp_path)
    resumed = StaggeredRun(TrainingSchedule(), reopened, trainer)
    assert resumed.completed == ["T1", "T2"]
    assert resumed.ledger.total("T2") == run.ledger.total("T2")
    assert [s.to_line() for s in reopened.log] == [s.to_line() for s in run.registry.log]
    assert np.array_equal(reopened.model("T2-slow").params["head.weight"].data, model.params["head.weight"].data)
    resumed.run_all()
    assert calls[3:] == [(FAST, 2), (FAST, 3), (SLOW, 3)]


def test_parallel_training_keeps_pairs_consistent():
    reg = ModelRegistry()
    barrier = threading.Barrier(2, timeout=5)
    observed = []
    stop = threading.Event()

    def trainer(kind, k, fraction):
        if k in (1, 3):
            barrier.wait()  # both kinds really train concurrently
        time.sleep(0.01)
        return Stub(kind, k), TrainHistory(duration_seconds=1.0)

    def reader():
        while not stop.is_set():
            fast, slow = reg.latest_pair()
            if fast is not None:
                observed.append((fast.increment, slow.increment if slow else None))

    t = threading.Thread(target=reader)
    t.start()
    try:
        run = StaggeredRun(TrainingSchedule(), reg, trainer, parallel=True)
        run.run_all()
    finally:
        stop.set()
        t.join()
    assert [s.id for s in run.active_at(3)] == ["T4-fast", "T4-slow"]
    order = {f"T{i}": i for i in range(1, 5)}
    for fast_inc, slow_inc in observed:
        assert slow_inc is None or order[slow_inc] <= order[fast_inc] + 1
