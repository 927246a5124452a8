"""Procedural chips whose classes differ either locally or only over long range.

Local-texture classes are fine checkerboards: any 4x4 window identifies them.
Stripe classes are faint periodic lines at a class orientation with a random
phase per chip, buried in pixel noise: a window smaller than the period holds
too little signal to tell orientations apart, while the whole chip does.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from twospeed.data import CHIP_SIDE, ChipDataset

BACKGROUND = 128.0


@dataclass(frozen=True)
class ClassSpec:
    name: str
    kind: str  # local_texture | long_range_stripes | blank
    period: float = 0.0  # checker tile size, or stripe period, in pixels
    orientation: float = 0.0  # degrees; 0 means every row is constant
    noise: float = 0.0  # gaussian pixel noise std
    amplitude: float = 0.0

    def __post_init__(self):
        if self.kind not in ("local_texture", "long_range_stripes", "blank"):
            raise ValueError(f"unknown class kind {self.kind!r}")
        if self.kind != "blank" and self.period <= 0:
            raise ValueError(f"class {self.name!r} needs a positive period")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")


def default6() -> list[ClassSpec]:
    """Three checkerboard textures and three stripe orientations 30 degrees apart."""
    return [
        ClassSpec("checker-1", "local_texture", period=1, noise=30.0, amplitude=40.0),
        ClassSpec("checker-2", "local_texture", period=2, noise=30.0, amplitude=40.0),
        ClassSpec("checker-3", "local_texture", period=3, noise=30.0, amplitude=40.0),
        ClassSpec("stripes-0", "long_range_stripes", period=16, orientation=0.0, noise=30.0, amplitude=13.0),
        ClassSpec("stripes-30", "long_range_stripes", period=16, orientation=30.0, noise=30.0, amplitude=13.0),
        ClassSpec("stripes-60", "long_range_stripes", period=16, orientation=60.0, noise=30.0, amplitude=13.0),
    ]


PRESETS = {"default6": default6}


def _grid():
    y, x = np.mgrid[0:CHIP_SIDE, 0:CHIP_SIDE].astype(np.float64)
    return y, x


def stripe_profile(orientation: float, period: float, phase: float) -> np.ndarray:
    """Line intensity in [0, 1]: a sharpened raised cosine across the stripe normal."""
    y, x = _grid()
    th = math.radians(orientation)
    u = y * math.cos(th) + x * math.sin(th)
    return ((1.0 + np.cos(2 * math.pi * u / period + phase)) / 2.0) ** 4


def _chip(spec: ClassSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    mask = np.zeros((CHIP_SIDE, CHIP_SIDE), dtype=bool)
    if spec.kind == "blank":
        base = np.full((CHIP_SIDE, CHIP_SIDE), BACKGROUND)
    elif spec.kind == "local_texture":
        t = int(spec.period)
        oy, ox = rng.integers(0, 2 * t, size=2)
        y, x = _grid()
        checker = ((((y + oy) // t) + ((x + ox) // t)) % 2) * 2 - 1
        base = BACKGROUND + spec.amplitude * checker
    else:
        prof = stripe_profile(spec.orientation, spec.period, rng.uniform(0, 2 * math.pi))
        mask = prof >= 0.5
        base = BACKGROUND + spec.amplitude * prof
    img = base[..., None] + rng.normal(0.0, spec.noise, (CHIP_SIDE, CHIP_SIDE, 3)) if spec.noise else np.repeat(base[..., None], 3, axis=2)
    return np.rint(np.clip(img, 0, 255)).astype(np.uint8), mask


def generate_synthetic(classes: list[ClassSpec], n_per_class: int, seed: int, return_masks: bool = False):
    """Deterministic dataset with ``n_per_class`` chips per class, labels in spec order.

    With ``return_masks`` also returns an ``n x 32 x 32`` boolean array marking
    stripe pixels (all false for non-stripe classes).
    """
    if len(classes) < 2:
        raise ValueError("need at least two classes")
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    if len({c.name for c in classes}) != len(classes):
        raise ValueError("class names must be unique")
    rng = np.random.default_rng(seed)
    n = n_per_class * len(classes)
    images = np.empty((n, CHIP_SIDE, CHIP_SIDE, 3), dtype=np.uint8)
    masks = np.zeros((n, CHIP_SIDE, CHIP_SIDE), dtype=bool)
    labels = np.repeat(np.arange(len(classes)), n_per_class)
    for i, ci in enumerate(labels):
        images[i], masks[i] = _chip(classes[ci], rng)
    ds = ChipDataset(images, labels, [c.name for c in classes], f"synthetic:seed={seed}")
    return (ds, masks) if return_masks else ds


_KIND_DEFAULTS = {
    "local_texture": {"period": 2.0, "noise": 30.0, "amplitude": 40.0},
    "long_range_stripes": {"period": 16.0, "noise": 30.0, "amplitude": 13.0},
    "blank": {"noise": 30.0},
}


def parse_class_specs(text: str) -> list[ClassSpec]:
    """Resolve a preset name or a ``;``-separated list of ``name:kind[,key=value...]``.

    Example: ``a:local_texture,period=2;b:long_range_stripes,orientation=30,amplitude=20``.
    Keys are period, orientation, noise and amplitude; omitted keys take
    per-kind defaults matching the ``default6`` preset.
    """
    if text in PRESETS:
        return PRESETS[text]()
    out = []
    for item in filter(None, (s.strip() for s in text.split(";"))):
        head, *pairs = item.split(",")
        name, sep, kind = head.partition(":")
        if not sep or kind not in _KIND_DEFAULTS:
            raise ValueError(f"bad class spec {item!r}: expected name:kind with kind in {sorted(_KIND_DEFAULTS)}")
        fields = dict(_KIND_DEFAULTS[kind])
        for pair in pairs:
            key, sep, val = pair.partition("=")
            if not sep or key not in ("period", "orientation", "noise", "amplitude"):
                raise ValueError(f"bad class spec {item!r}: unknown setting {pair!r}")
            fields[key] = float(val)
        out.append(ClassSpec(name, kind, **fields))
    if not out:
        raise ValueError(f"no classes in {text!r}")
    return out


# ---------------------------------------------------------------- separability oracle


def window_features(images: np.ndarray, y0: int, x0: int, size: int) -> np.ndarray:
    """Phase-invariant features of one window: 2-D DFT magnitudes of the luma."""
    luma = images[:, y0 : y0 + size, x0 : x0 + size].astype(np.float64) @ np.array([0.299, 0.587, 0.114])
    return np.abs(np.fft.fft2(luma)).reshape(len(images), -1)


def nearest_centroid_accuracy(train_x, train_y, test_x, test_y) -> float:
    classes = np.unique(train_y)
    cents = np.stack([train_x[train_y == c].mean(axis=0) for c in classes])
    d = ((test_x[:, None, :] - cents[None]) ** 2).sum(axis=-1)
    return float((classes[d.argmin(axis=1)] == test_y).mean())


def window_separability(images, labels, window: int = 8, stride: int = 1, train_fraction: float = 0.5):
    """Nearest-centroid accuracy of every ``window x window`` position and of the whole chip.

    Returns ``(best_window_accuracy, whole_chip_accuracy)``; the first half of
    each class (by order) trains the centroids, the rest is scored.
    """
    labels = np.asarray(labels)
    train = np.zeros(len(labels), dtype=bool)
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        train[idx[: int(len(idx) * train_fraction)]] = True
    best = 0.0
    side = images.shape[1]
    for y0 in range(0, side - window + 1, stride):
        for x0 in range(0, side - window + 1, stride):
            f = window_features(images, y0, x0, window)
            best = max(best, nearest_centroid_accuracy(f[train], labels[train], f[~train], labels[~train]))
    f = window_features(images, 0, 0, side)
    whole = nearest_centroid_accuracy(f[train], labels[train], f[~train], labels[~train])
    return best, whole
