"""Per-chip attribution maps: occlusion sensitivity and ViT attention rollout."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from twospeed.data import ppm_bytes
from twospeed.fileio import atomic_write_bytes


class SaliencyError(ValueError):
    pass


@dataclass(frozen=True)
class SaliencyMap:
    values: np.ndarray  # H x W in [0, 1]
    target_class: int | None
    method: str

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def _max_normalize(m: np.ndarray) -> np.ndarray:
    top = m.max() if m.size else 0.0
    return m / top if top > 0 else np.zeros_like(m)


def _chip_to_float(chip) -> np.ndarray:
    """Accept ``H x W x 3`` uint8 or ``3 x H x W`` float in [0, 1]; return the latter."""
    chip = np.asarray(chip)
    if chip.dtype == np.uint8:
        return chip.transpose(2, 0, 1).astype(np.float64) / 255.0
    if chip.ndim != 3 or chip.shape[0] != 3:
        raise SaliencyError(f"chip must be H x W x 3 uint8 or 3 x H x W float, got {chip.shape}")
    return chip.astype(np.float64)


def occlusion_windows(height: int, width: int, patch: int, stride: int) -> list[tuple[int, int]]:
    ys = range(0, height - patch + 1, stride)
    xs = range(0, width - patch + 1, stride)
    return [(y, x) for y in ys for x in xs]


def occlusion_map(
    model,
    chip,
    target_class: int,
    baseline,
    patch: int = 4,
    stride: int = 2,
    windows=None,
) -> SaliencyMap:
    """Average clamped drop in ``target_class`` probability over occluders covering each pixel.

    ``model`` needs only ``predict_proba`` and ``num_classes``; ``baseline`` is
    the replacement colour as three values in [0, 1].
    """
    if not 0 <= target_class < model.num_classes:
        raise SaliencyError(f"target class {target_class} out of range [0, {model.num_classes})")
    x = _chip_to_float(chip)
    _, h, w = x.shape
    base = np.asarray(baseline, dtype=np.float64).reshape(3, 1, 1)
    wins = occlusion_windows(h, w, patch, stride) if windows is None else list(windows)
    batch = np.repeat(x[None], len(wins) + 1, axis=0)
    for i, (y0, x0) in enumerate(wins, start=1):
        batch[i, :, y0 : y0 + patch, x0 : x0 + patch] = base
    dtype = getattr(model, "_dtype", lambda: np.float64)()
    probs = model.predict_proba(batch.astype(dtype))[:, target_class].astype(np.float64)
    drops = np.maximum(probs[0] - probs[1:], 0.0)
    total = np.zeros((h, w))
    count = np.zeros((h, w))
    for d, (y0, x0) in zip(drops, wins):
        total[y0 : y0 + patch, x0 : x0 + patch] += d
        count[y0 : y0 + patch, x0 : x0 + patch] += 1
    avg = np.divide(total, count, out=np.zeros_like(total), where=count > 0)
    return SaliencyMap(_max_normalize(avg), target_class, "occlusion")


def rollout_matrices(attentions, residual: float = 0.5) -> list[np.ndarray]:
    """Cumulative rollout products for one chip, one matrix per layer.

    ``attentions`` holds per-layer ``heads x T x T`` (or ``T x T``) weights.
    Each layer is head-averaged and mixed with the identity before composing.
    """
    out = []
    acc = None
    for a in attentions:
        a = np.asarray(a, dtype=np.float64)
        if a.ndim == 3:
            a = a.mean(axis=0)
        mixed = residual * np.eye(a.shape[0]) + (1.0 - residual) * a
        acc = mixed if acc is None else mixed @ acc
        out.append(acc)
    return out


def attention_rollout(model, chip) -> SaliencyMap:
    """Class-token rollout over all encoder layers, upsampled to pixels."""
    if getattr(model, "kind", None) != "vit":
        raise SaliencyError(f"attention rollout needs a ViT model, got {getattr(model, 'kind', type(model).__name__)}")
    x = _chip_to_float(chip)[None].astype(model._dtype())
    was = model.training
    model.eval()
    try:
        _, maps = model.logits(x, return_attention=True)
    finally:
        model.training = was
    roll = rollout_matrices([m[0] for m in maps])[-1]
    cfg = model.config
    g = cfg.image_size // cfg.patch_size
    grid = roll[0, 1:].reshape(g, g)
    pix = np.kron(grid, np.ones((cfg.patch_size, cfg.patch_size)))
    return SaliencyMap(_max_normalize(pix), None, "attention_rollout")


# ---------------------------------------------------------------- image output


def pgm_bytes(values: np.ndarray) -> bytes:
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2 or v.size and (v.min() < 0 or v.max() > 1):
        raise SaliencyError("map must be 2-D with values in [0, 1]")
    h, w = v.shape
    return f"P5\n{w} {h}\n255\n".encode() + np.rint(v * 255).astype(np.uint8).tobytes()


def write_map_image(smap: SaliencyMap | np.ndarray, path) -> Path:
    values = smap.values if isinstance(smap, SaliencyMap) else smap
    path = Path(path)
    atomic_write_bytes(path, pgm_bytes(values))
    return path


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    head, rest = data.split(b"\n", 1)
    dims, rest = rest.split(b"\n", 1)
    maxval, payload = rest.split(b"\n", 1)
    if head != b"P5" or maxval != b"255":
        raise SaliencyError(f"{path}: not an 8-bit binary PGM")
    w, h = (int(t) for t in dims.split())
    if len(payload) != w * h:
        raise SaliencyError(f"{path}: truncated PGM payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).astype(np.float64) / 255.0


def write_montage(chip: np.ndarray, smap: SaliencyMap, path) -> Path:
    """Side-by-side P6 image: the chip on the left, the map in grey on the right."""
    chip = np.asarray(chip, dtype=np.uint8)
    grey = np.rint(smap.values * 255).astype(np.uint8)
    img = np.concatenate([chip, np.repeat(grey[..., None], 3, axis=2)], axis=1)
    path = Path(path)
    atomic_write_bytes(path, ppm_bytes(img))
    return path


def mask_contrast(smap: SaliencyMap, mask: np.ndarray) -> float:
    """Mean saliency on ``mask`` divided by mean saliency off it (inf if off-mask mean is 0)."""
    on = smap.values[mask].mean() if mask.any() else 0.0
    off = smap.values[~mask].mean() if (~mask).any() else 0.0
    if off == 0:
        return float("inf") if on > 0 else 0.0
    return float(on / off)
