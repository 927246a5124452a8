import dataclasses

import numpy as np
import pytest

from twospeed.data import AugmentPolicy, ChipDataset
from twospeed.models import MINI_HS_CNN, TINY_VIT, build_hs_cnn, build_vit, forward_macs
from twospeed.training import nominal_seconds, train_model


def _toy(n=4, seed=0):
    """Two linearly separable classes: dark chips and bright chips."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    images = np.where(labels[:, None, None, None] == 1, 200, 40) + rng.integers(-10, 10, (n, 32, 32, 3))
    return ChipDataset(images.astype(np.uint8), labels, ["dark", "bright"], "toy")


def _cnn(seed=0):
    return build_hs_cnn(dataclasses.replace(MINI_HS_CNN, num_classes=2), np.random.default_rng(seed))


def test_lr_zero_keeps_parameters():
    ds = _toy()
    model = _cnn()
    net, _ = train_model(model, ds.subset([0, 1, 2, 3]), ds.subset([]), 2, 0.0, rng=np.random.default_rng(0))
    for name, p in model.params.items():
        np.testing.assert_array_equal(net.params[name].data, p.data)


def test_loss_decreases_on_separable_toy():
    ds = _toy()
    _, hist = train_model(_cnn(), ds.subset([0, 1, 2, 3]), ds.subset([]), 4, 1e-3, batch_size=4, rng=np.random.default_rng(0))
    losses = [e.train_loss for e in hist.epochs]
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_same_seed_gives_identical_history_and_weights():
    ds = _toy(12)
    runs = [
        train_model(_cnn(), ds.subset(range(8)), ds.subset(range(8, 12)), 2, 1e-3, 4,
                    AugmentPolicy(0.5, 0.5, 25, (0.8, 1.2), (0.7, 1.3)), np.random.default_rng(3))
        for _ in range(2)
    ]
    (a, ha), (b, hb) = runs
    assert ha.epochs == hb.epochs
    for name in a.params:
        np.testing.assert_array_equal(a.params[name].data, b.params[name].data)


def test_returns_eval_mode_copy():
    ds = _toy()
    model = _cnn()
    net, _ = train_model(model, ds.subset([0, 1]), ds.subset([2, 3]), 1, 1e-3, rng=np.random.default_rng(0))
    assert net is not model and not net.training


@pytest.mark.parametrize(
    "train, val, epochs, kw",
    [([], [2], 1, {}), ([0, 1], [1, 2], 1, {}), ([0, 1], [2], 0, {}), ([0, 1], [2], 1, {"lr_schedule": "step"})],
)
def test_input_errors(train, val, epochs, kw):
    ds = _toy()
    with pytest.raises(ValueError):
        train_model(_cnn(), ds.subset(train), ds.subset(val), epochs, 1e-3, **kw)


def test_cosine_schedule_differs_from_constant_and_still_learns():
    ds = _toy()
    views = ds.subset([0, 1, 2, 3]), ds.subset([])
    const, _ = train_model(_cnn(), *views, 3, 1e-3, 4, rng=np.random.default_rng(0))
    cos, hist = train_model(_cnn(), *views, 3, 1e-3, 4, rng=np.random.default_rng(0), lr_schedule="cosine")
    w = "head.weight"
    # the first step uses the full rate, later ones less
    assert not np.array_equal(const.params[w].data, cos.params[w].data)
    assert hist.epochs[-1].train_loss < hist.epochs[0].train_loss


def test_cosine_single_step_matches_constant():
    ds = _toy()
    views = ds.subset([0, 1, 2, 3]), ds.subset([])
    a, _ = train_model(_cnn(), *views, 1, 1e-3, 4, rng=np.random.default_rng(0))
    b, _ = train_model(_cnn(), *views, 1, 1e-3, 4, rng=np.random.default_rng(0), lr_schedule="cosine")
    for name in a.params:
        np.testing.assert_array_equal(a.params[name].data, b.params[name].data)


def test_nominal_clock():
    vit = build_vit(dataclasses.replace(TINY_VIT, num_classes=2), np.random.default_rng(0))
    per_sample = 3 * forward_macs("vit", vit.config) / 1e9
    assert nominal_seconds(vit, 1000, 1e9) == pytest.approx(1000 * per_sample)
    ds = _toy()
    _, hist = train_model(vit, ds.subset([0, 1, 2]), ds.subset([3]), 2, 1e-3, rng=np.random.default_rng(0),
                          clock=lambda net, n, wall: nominal_seconds(net, n, 1e9))
    assert hist.samples_seen == 6
    assert hist.duration_seconds == pytest.approx(6 * per_sample)
