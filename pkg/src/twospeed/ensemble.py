"""Weighted-average fusion of component probability outputs."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from twospeed.models import Model


@dataclass(frozen=True)
class Component:
    model: Model
    weight: float
    name: str = ""


@dataclass(frozen=True)
class EnsembleSpec:
    components: tuple[Component, ...]

    def __post_init__(self):
        if not self.components:
            raise ValueError("an ensemble needs at least one component")
        for c in self.components:
            if not (math.isfinite(c.weight) and c.weight > 0):
                raise ValueError(f"component weights must be positive and finite, got {c.weight}")

    @classmethod
    def of(cls, *pairs: tuple[Model, float], names: Sequence[str] | None = None) -> "EnsembleSpec":
        names = names or [f"component{i}" for i in range(len(pairs))]
        return cls(tuple(Component(m, float(w), n) for (m, w), n in zip(pairs, names)))

    @property
    def weights(self) -> list[float]:
        return [c.weight for c in self.components]


def normalize_weights(weights: Sequence[float]) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or not len(w):
        raise ValueError("weights must be a non-empty list")
    if not np.all(np.isfinite(w)) or np.any(w <= 0):
        raise ValueError("weights must be positive and finite")
    return w / w.sum()


def weighted_average(probs: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    """``sum_i w_i p_i / sum_i w_i`` for vectors or row-stacked matrices.

    Weights are normalised before accumulation, so rescaling every weight by
    the same positive factor gives a bit-identical result.
    """
    if len(probs) != len(weights):
        raise ValueError(f"{len(probs)} probability inputs but {len(weights)} weights")
    w = normalize_weights(weights)
    arrs = [np.asarray(p, dtype=np.float64) for p in probs]
    if any(a.shape != arrs[0].shape for a in arrs):
        raise ValueError("probability inputs must share one shape")
    out = np.zeros_like(arrs[0])
    for wi, a in zip(w, arrs):
        out += wi * a
    return out


def argmax_lowest(p: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest class index (numpy's first-occurrence rule)."""
    return np.argmax(p, axis=-1)


class ComponentError(RuntimeError):
    pass


def ensemble_predict(spec: EnsembleSpec, batch: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode forward of every component, fused; returns ``(classes, fused probabilities)``."""
    probs = []
    for i, comp in enumerate(spec.components):
        try:
            probs.append(comp.model.predict_proba(batch))
        except Exception as exc:
            raise ComponentError(f"component {i} ({comp.name or comp.model.kind}) failed: {exc}") from exc
    fused = weighted_average(probs, spec.weights)
    return argmax_lowest(fused), fused


SWEEP_GRID = tuple((round(a / 10, 1), round(1 - a / 10, 1)) for a in range(1, 10))


def weight_sweep(probs_a: np.ndarray, probs_b: np.ndarray, labels, grid=SWEEP_GRID):
    """Overall accuracy of the A:B fusion at each weight pair.

    Takes precomputed component probabilities on one evaluation set. Returns
    ``(rows, best)`` where rows are ``(w_a, w_b, oa)``; ``best`` maximises OA,
    then prefers the pair closest to 50:50, then the larger ``w_a``.
    """
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("evaluation set is empty")
    rows = []
    for wa, wb in grid:
        if wa <= 0 or wb <= 0 or not math.isclose(wa + wb, 1.0):
            raise ValueError(f"grid pair ({wa}, {wb}) must be positive and sum to 1")
        pred = argmax_lowest(weighted_average([probs_a, probs_b], [wa, wb]))
        rows.append((wa, wb, float((pred == labels).mean())))
    best = max(rows, key=lambda r: (r[2], -round(abs(r[0] - 0.5), 9), r[0]))
    return rows, best


def sweep_csv(rows) -> str:
    lines = ["w_cnn,w_vit,overall_accuracy"]
    lines += [f"{wa:.1f},{wb:.1f},{oa:.6f}" for wa, wb, oa in rows]
    return "\n".join(lines) + "\n"
