"""Loss surface around a parameter point along two filter-normalized random directions."""

from __future__ import annotations

import csv
import os
from typing import Callable

import numpy as np

from ..autodiff import ParamSet
from ..engine import evaluate_params


def random_direction(theta: ParamSet, rng: np.random.Generator) -> ParamSet:
    return theta.map(lambda k, v: rng.standard_normal(v.shape))


def filter_normalize(direction: ParamSet, theta: ParamSet) -> ParamSet:
    """Rescale each weight row (each whole vector for 1-D buffers) to the norm of ``theta``'s."""
    direction.check_compatible(theta)

    def norm(k, d):
        t = theta[k]
        if d.ndim == 1:
            nd = np.linalg.norm(d)
            return d * (np.linalg.norm(t) / nd) if nd > 0 else np.zeros_like(d)
        nd = np.linalg.norm(d, axis=-1, keepdims=True)
        nt = np.linalg.norm(t, axis=-1, keepdims=True)
        safe = np.where(nd > 0, nd, 1.0)
        return np.where(nd > 0, d * (nt / safe), 0.0)

    return direction.map(norm)


def grid_coords(half_width: float, resolution: int) -> np.ndarray:
    """``resolution`` points on ``[-W, W]`` with the middle one exactly 0."""
    if resolution < 1 or resolution % 2 == 0:
        raise ValueError(f"grid resolution must be odd, got {resolution}")
    c = (resolution - 1) // 2
    if c == 0:
        return np.zeros(1)
    return half_width * (np.arange(resolution) - c) / c


def scan(theta: ParamSet, loss_fn: Callable[[ParamSet], float], d1: ParamSet, d2: ParamSet,
         half_width: float = 1.0, resolution: int = 21) -> np.ndarray:
    """``out[i, j] = loss(theta + a_i d1 + b_j d2)``."""
    coords = grid_coords(half_width, resolution)
    out = np.empty((resolution, resolution))
    for i, a in enumerate(coords):
        for j, b in enumerate(coords):
            p = ParamSet((k, v + a * d1[k] + b * d2[k]) for k, v in theta.items())
            out[i, j] = loss_fn(p)
    return out


def landscape_scan(theta: ParamSet, loss_fn: Callable[[ParamSet], float],
                   rng: np.random.Generator, half_width: float = 1.0, resolution: int = 21
                   ) -> tuple[np.ndarray, ParamSet, ParamSet]:
    d1 = filter_normalize(random_direction(theta, rng), theta)
    d2 = filter_normalize(random_direction(theta, rng), theta)
    return scan(theta, loss_fn, d1, d2, half_width, resolution), d1, d2


def training_loss_fn(batch, model, alpha: ParamSet | None = None,
                     steps: int | None = None) -> Callable[[ParamSet], float]:
    """Mean post-adaptation query loss over a fixed set of training tasks."""
    steps = model.adapt.steps if steps is None else steps

    def f(params: ParamSet) -> float:
        losses, _ = evaluate_params(params, batch, model, alpha, steps=steps)
        return float(np.mean(losses))

    return f


def write_grid(path: str | os.PathLike, grid: np.ndarray) -> None:
    """CSV ``i, j, loss`` with integer offsets from the centre cell."""
    c = (grid.shape[0] - 1) // 2
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["i", "j", "loss"])
        for a in range(grid.shape[0]):
            for b in range(grid.shape[1]):
                w.writerow([a - c, b - c, repr(float(grid[a, b]))])
