"""Mini-batch training loop shared by both network families."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from twospeed import autodiff as ad
from twospeed.data import AugmentPolicy, View, augment_batch, to_batch
from twospeed.models import Model, forward_macs


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_accuracy: float


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    duration_seconds: float = 0.0
    samples_seen: int = 0

    @property
    def final_val_accuracy(self) -> float:
        return self.epochs[-1].val_accuracy if self.epochs else float("nan")


def nominal_seconds(model: Model, samples: int, macs_per_second: float) -> float:
    """Deterministic training-time estimate: forward+backward is ~3x forward MACs per sample."""
    return 3.0 * forward_macs(model.kind, model.config) * samples / macs_per_second


def accuracy(model: Model, view: View, batch_size: int = 256) -> float:
    if len(view) == 0:
        return float("nan")
    probs = model.predict_proba(to_batch(view.images(), model._dtype()), batch_size)
    return float((probs.argmax(axis=1) == view.labels).mean())


LR_SCHEDULES = ("constant", "cosine")


def train_model(
    model: Model,
    train: View,
    val: View,
    epochs: int,
    lr: float,
    batch_size: int = 64,
    augment: AugmentPolicy | None = None,
    rng: np.random.Generator | None = None,
    clock: Callable[[Model, int, float], float] | None = None,
    lr_schedule: str = "constant",
) -> tuple[Model, TrainHistory]:
    """Train a copy of ``model`` with Adam; returns the eval-mode result and its history.

    ``clock(model, samples_seen, wall_seconds)`` maps the run to the recorded
    duration; by default the measured wall time is kept. ``lr_schedule`` is
    ``"constant"`` or ``"cosine"`` (per-step decay from ``lr`` to zero).
    """
    if lr_schedule not in LR_SCHEDULES:
        raise ValueError(f"lr_schedule must be one of {LR_SCHEDULES}, got {lr_schedule!r}")
    if len(train) == 0:
        raise ValueError("training view is empty")
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if len(val) and np.intersect1d(train.indices, val.indices).size:
        raise ValueError("train and validation views overlap")
    rng = rng if rng is not None else np.random.default_rng(0)
    net = model.copy().train()
    params = net.parameters()
    weight_decay = getattr(net.config, "l2_lambda", 0.0)
    state = ad.OptimizerState.for_params(params, lr, weight_decay=weight_decay)
    mask = net.decay_mask()
    dtype = net._dtype()
    history = TrainHistory()
    labels_all = train.labels
    steps_per_epoch = math.ceil(len(train) / batch_size)
    total_steps, step = epochs * steps_per_epoch, 0
    start = time.perf_counter()
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(train))
        loss_sum, correct = 0.0, 0
        net.train()
        for s in range(0, len(order), batch_size):
            idx = order[s : s + batch_size]
            imgs = train.images(idx)
            if augment is not None:
                imgs = augment_batch(imgs, augment, rng)
            x = to_batch(imgs, dtype)
            y = labels_all[idx]
            with ad.Tape() as tape:
                logits = net.logits(x, rng)
                loss = ad.cross_entropy_loss(logits, y)
            for p in params:
                p.grad = None
            tape.backward(loss)
            if lr_schedule == "cosine":
                state.lr = lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
            step += 1
            ad.adam_step(params, [p.grad for p in params], state, mask)
            loss_sum += float(loss.data) * len(idx)
            correct += int((logits.data.argmax(axis=1) == y).sum())
        history.samples_seen += len(order)
        net.eval()
        history.epochs.append(
            EpochRecord(epoch, loss_sum / len(order), correct / len(order), accuracy(net, val))
        )
    wall = time.perf_counter() - start
    history.duration_seconds = wall if clock is None else float(clock(net, history.samples_seen, wall))
    return net.eval(), history
