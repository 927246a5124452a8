"""Chip datasets: storage format, seeded splits, nested increments and augmentation."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from twospeed.fileio import atomic_write_bytes

CHIP_SIDE = 32
CHIP_BYTES = CHIP_SIDE * CHIP_SIDE * 3
MANIFEST_VERSION = 1

LCZ_CLASSES = (
    "Compact high-rise",
    "Compact mid-rise",
    "Compact low-rise",
    "Open high-rise",
    "Open mid-rise",
    "Open low-rise",
    "Lightweight low-rise",
    "Large low-rise",
    "Sparsely built",
    "Heavy industry",
    "Dense trees",
    "Scattered trees",
    "Bush, scrub",
    "Low plants",
    "Bare rock or paved",
    "Bare soil or sand",
    "Water",
)


class DatasetError(ValueError):
    """Raised when a dataset on disk is malformed."""


@dataclass
class ChipDataset:
    images: np.ndarray  # n x 32 x 32 x 3, uint8
    labels: np.ndarray  # n, int64
    class_names: list[str]
    provenance: str = ""

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[1:] != (CHIP_SIDE, CHIP_SIDE, 3):
            raise DatasetError(f"images must be n x 32 x 32 x 3, got {self.images.shape}")
        if self.labels.shape != (len(self.images),):
            raise DatasetError("one label per image required")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise DatasetError("label out of range for class_names")

    @property
    def n(self) -> int:
        return len(self.labels)

    def __len__(self) -> int:
        return self.n

    def subset(self, indices) -> "View":
        return View(self, np.asarray(indices, dtype=np.int64))


@dataclass(frozen=True)
class View:
    """Index view onto a dataset; pixels are gathered lazily."""

    dataset: ChipDataset
    indices: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)

    @property
    def labels(self) -> np.ndarray:
        return self.dataset.labels[self.indices]

    def images(self, idx=None) -> np.ndarray:
        sel = self.indices if idx is None else self.indices[idx]
        return self.dataset.images[sel]


def to_batch(images: np.ndarray, dtype=np.float32) -> np.ndarray:
    """uint8 ``n x H x W x 3`` chips to a ``n x 3 x H x W`` float batch in [0, 1]."""
    dtype = np.dtype(dtype)
    return np.ascontiguousarray(images.transpose(0, 3, 1, 2), dtype=dtype) / dtype.type(255.0)


# ---------------------------------------------------------------- storage


def write_dataset(ds: ChipDataset, path) -> Path:
    """Write ``<path>/manifest.json`` plus label and image blobs; returns the manifest path."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": MANIFEST_VERSION,
        "n": ds.n,
        "width": CHIP_SIDE,
        "height": CHIP_SIDE,
        "channels": 3,
        "class_names": list(ds.class_names),
        "labels_file": "labels.u16",
        "images_file": "images.u8",
        "provenance": ds.provenance,
    }
    atomic_write_bytes(root / "labels.u16", ds.labels.astype("<u2").tobytes())
    atomic_write_bytes(root / "images.u8", ds.images.tobytes())
    mpath = root / "manifest.json"
    atomic_write_bytes(mpath, (json.dumps(manifest, indent=2) + "\n").encode())
    return mpath


def load_dataset(path) -> ChipDataset:
    """Load from a manifest file or the directory holding ``manifest.json``."""
    mpath = Path(path)
    if mpath.is_dir():
        mpath = mpath / "manifest.json"
    if not mpath.exists():
        raise DatasetError(f"manifest not found: {mpath}")
    try:
        m = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"manifest is not valid JSON: {exc}") from exc
    if m.get("format_version") != MANIFEST_VERSION:
        raise DatasetError(f"unsupported manifest format_version {m.get('format_version')!r}")
    if (m.get("width"), m.get("height"), m.get("channels")) != (CHIP_SIDE, CHIP_SIDE, 3):
        raise DatasetError("only 32x32x3 chips are supported")
    n = m.get("n")
    if not isinstance(n, int) or n < 0:
        raise DatasetError("manifest field n must be a non-negative integer")
    names = m.get("class_names")
    if not isinstance(names, list) or not names:
        raise DatasetError("manifest needs a non-empty class_names list")
    root = mpath.parent
    try:
        lab_raw = (root / m["labels_file"]).read_bytes()
        img_raw = (root / m["images_file"]).read_bytes()
    except (KeyError, OSError) as exc:
        raise DatasetError(f"missing blob: {exc}") from exc
    if len(lab_raw) != 2 * n:
        raise DatasetError(f"labels file holds {len(lab_raw) // 2} labels, manifest says n={n}")
    if len(img_raw) != n * CHIP_BYTES:
        raise DatasetError(f"images file is {len(img_raw)} bytes, expected n*3072 = {n * CHIP_BYTES}")
    labels = np.frombuffer(lab_raw, dtype="<u2").astype(np.int64)
    if n and labels.max() >= len(names):
        bad = int(np.argmax(labels >= len(names)))
        raise DatasetError(f"label {labels[bad]} at index {bad} exceeds class count {len(names)}")
    images = np.frombuffer(img_raw, dtype=np.uint8).reshape(n, CHIP_SIDE, CHIP_SIDE, 3).copy()
    return ChipDataset(images, labels, list(names), m.get("provenance", ""))


# ---------------------------------------------------------------- PPM import


def read_ppm(path) -> np.ndarray:
    """Read a binary (P6, maxval 255) PPM into an ``H x W x 3`` uint8 array."""
    data = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetError(f"{path}: truncated PPM header")
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != b"P6":
        raise DatasetError(f"{path}: not a binary P6 PPM")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise DatasetError(f"{path}: only maxval 255 is supported")
    pix = data[pos : pos + w * h * 3]
    if len(pix) != w * h * 3:
        raise DatasetError(f"{path}: truncated pixel data")
    return np.frombuffer(pix, dtype=np.uint8).reshape(h, w, 3).copy()


def ppm_bytes(image: np.ndarray) -> bytes:
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode() + image.tobytes()


def import_ppm_dir(src) -> ChipDataset:
    """Pack ``src/<class>/*.ppm`` chips into a dataset; classes sorted by name."""
    root = Path(src)
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not classes:
        raise DatasetError(f"{root}: no class subdirectories")
    images, labels = [], []
    for ci, name in enumerate(classes):
        for f in sorted((root / name).glob("*.ppm")):
            img = read_ppm(f)
            if img.shape != (CHIP_SIDE, CHIP_SIDE, 3):
                raise DatasetError(f"{f}: expected 32x32 chip, got {img.shape[1]}x{img.shape[0]}")
            images.append(img)
            labels.append(ci)
    arr = np.stack(images) if images else np.zeros((0, CHIP_SIDE, CHIP_SIDE, 3), np.uint8)
    return ChipDataset(arr, np.asarray(labels), classes, f"import:{root.name}")


# ---------------------------------------------------------------- splits


@dataclass(frozen=True)
class SplitPlan:
    seed: int
    holdout_indices: np.ndarray
    trainval_order: np.ndarray
    increment_fractions: tuple[float, ...] = (0.25, 0.5, 0.75, 1.0)
    val_fraction: float = 0.10

    def increment_size(self, k: int) -> int:
        return int(math.floor(self.increment_fractions[k] * len(self.trainval_order) + 1e-9))


def make_split_plan(
    ds_or_n,
    seed: int,
    holdout_fraction: float = 0.2,
    val_fraction: float = 0.10,
    increments=(0.25, 0.5, 0.75, 1.0),
) -> SplitPlan:
    """Shuffle once; the first slice of the permutation is the holdout, the rest is ordered train/val."""
    n = ds_or_n if isinstance(ds_or_n, int) else len(ds_or_n)
    if not 0.0 < holdout_fraction < 1.0:
        raise ValueError(f"holdout_fraction must be in (0, 1), got {holdout_fraction}")
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must be in (0, 1), got {val_fraction}")
    incs = tuple(float(f) for f in increments)
    if not incs or any(not 0.0 < f <= 1.0 for f in incs) or any(b <= a for a, b in zip(incs, incs[1:])):
        raise ValueError("increments must be strictly ascending fractions in (0, 1]")
    if incs[-1] != 1.0:
        raise ValueError("the last increment must be 1.0")
    perm = np.random.default_rng(seed).permutation(n)
    n_hold = int(round(holdout_fraction * n))
    return SplitPlan(seed, np.sort(perm[:n_hold]), perm[n_hold:], incs, float(val_fraction))


def increment_view(ds: ChipDataset, plan: SplitPlan, k: int) -> tuple[View, View]:
    """Train and validation views of cumulative increment ``k`` (0-based)."""
    if not 0 <= k < len(plan.increment_fractions):
        raise IndexError(f"increment {k} not in plan with {len(plan.increment_fractions)} increments")
    idx = plan.trainval_order[: plan.increment_size(k)]
    n_val = int(round(plan.val_fraction * len(idx)))
    cut = len(idx) - n_val
    return View(ds, idx[:cut]), View(ds, idx[cut:])


def holdout_view(ds: ChipDataset, plan: SplitPlan) -> View:
    return View(ds, plan.holdout_indices)


# ---------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentPolicy:
    flip_lr: float = 0.5
    flip_ud: float = 0.5
    brightness_delta_max: float = 25.0  # pixel units
    contrast_range: tuple[float, float] = (0.8, 1.2)
    saturation_range: tuple[float, float] = (0.7, 1.3)

    def __post_init__(self):
        for p in (self.flip_lr, self.flip_ud):
            if not 0.0 <= p <= 1.0:
                raise ValueError("flip probabilities must lie in [0, 1]")
        if self.brightness_delta_max < 0:
            raise ValueError("brightness_delta_max must be >= 0")
        for lo, hi in (self.contrast_range, self.saturation_range):
            if not lo <= 1.0 <= hi:
                raise ValueError("contrast and saturation ranges must contain 1.0")

    @classmethod
    def identity(cls) -> "AugmentPolicy":
        return cls(0.0, 0.0, 0.0, (1.0, 1.0), (1.0, 1.0))


LUMA = np.array([0.299, 0.587, 0.114])


def augment_batch(images: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """Random flips, brightness, contrast and saturation on a uint8 ``n x H x W x 3`` batch."""
    n = len(images)
    x = images.astype(np.float64)
    lr = rng.random(n) < policy.flip_lr
    ud = rng.random(n) < policy.flip_ud
    delta = rng.uniform(-policy.brightness_delta_max, policy.brightness_delta_max, n)
    contrast = rng.uniform(*policy.contrast_range, n)
    sat = rng.uniform(*policy.saturation_range, n)
    x[lr] = x[lr, :, ::-1]
    x[ud] = x[ud, ::-1]
    x = np.clip(x + delta[:, None, None, None], 0, 255)
    mean = x.mean(axis=(1, 2), keepdims=True)
    x = np.clip((x - mean) * contrast[:, None, None, None] + mean, 0, 255)
    luma = (x @ LUMA)[..., None]
    x = luma + sat[:, None, None, None] * (x - luma)
    return np.rint(np.clip(x, 0, 255)).astype(np.uint8)
