"""Trust-region meta-update: conjugate gradient on Fisher-vector products plus line search."""

from __future__ import annotations

import gc as _gc
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .. import autodiff as ad
from ..autodiff import Graph, Node, ParamSet

Objective = Callable[[Graph, Mapping[str, Node]], tuple[Node, Node]]


@dataclass(frozen=True)
class TRPOConfig:
    delta: float = 0.01
    cg_iters: int = 10
    cg_damping: float = 1e-2
    backtrack_ratio: float = 0.5
    max_backtracks: int = 10
    cg_residual_tol: float = 1e-10

    def __post_init__(self):
        if self.delta <= 0:
            raise ValueError(f"delta must be positive, got {self.delta}")


@dataclass
class TRPOInfo:
    accepted: bool
    loss_before: float
    loss_after: float
    kl: float
    step_fraction: float
    backtracks: int
    cg_residual: float
    history: list = field(default_factory=list)


def conjugate_gradient(fvp: Callable[[np.ndarray], np.ndarray], b: np.ndarray, iters: int = 10,
                       tol: float = 1e-10) -> tuple[np.ndarray, float]:
    """Approximately solve ``F x = b``; returns the lowest-residual iterate and its residual."""
    x = np.zeros_like(b)
    r = b.copy()
    p = b.copy()
    rr = float(r @ r)
    best_x, best_rr = x.copy(), rr
    for _ in range(iters):
        if rr < tol:
            break
        fp = fvp(p)
        pfp = float(p @ fp)
        if pfp <= 0:
            break
        a = rr / pfp
        x = x + a * p
        r = r - a * fp
        rr_new = float(r @ r)
        if rr_new < best_rr:
            best_x, best_rr = x.copy(), rr_new
        p = r + (rr_new / rr) * p
        rr = rr_new
    return best_x, float(np.sqrt(best_rr))


def natural_gradient_step(g: np.ndarray, fvp: Callable[[np.ndarray], np.ndarray],
                          cfg: TRPOConfig) -> tuple[np.ndarray, float]:
    """Full step ``x * sqrt(2 delta / x^T F x)`` with ``x = F^-1 g`` (CG, damped F)."""

    def damped(v):
        return fvp(v) + cfg.cg_damping * v

    x, res = conjugate_gradient(damped, g, cfg.cg_iters, cfg.cg_residual_tol)
    shs = float(x @ damped(x))
    if shs <= 0 or not np.isfinite(shs):
        return np.zeros_like(g), res
    return x * np.sqrt(2.0 * cfg.delta / shs), res


def trpo_meta_update(theta: ParamSet, objective: Objective, cfg: TRPOConfig,
                     chunks: Sequence | None = None) -> tuple[ParamSet, TRPOInfo]:
    """Minimize ``objective``'s loss subject to its mean KL staying within ``delta``.

    ``objective(graph, nodes)`` returns ``(loss, kl)`` where ``kl`` measures
    the divergence from the policy at the current ``theta``. A step is taken
    only when the loss strictly decreases and the measured KL is at most
    ``delta``; otherwise ``theta`` is returned unchanged.

    With ``chunks`` the objective is called as ``objective(graph, nodes, chunk)``
    for each chunk and the pieces are summed. Each Fisher-vector product then
    rebuilds one chunk's graph at a time, trading compute for bounded memory.
    """
    parts = [None] if chunks is None else list(chunks)

    def call(graph, nodes, c):
        return objective(graph, nodes) if c is None else objective(graph, nodes, c)

    loss0, g = 0.0, None
    kl_graphs = []
    for c in parts:
        graph = Graph()
        nodes = theta.nodes(graph)
        wrt = list(nodes.values())
        loss, kl = call(graph, nodes, c)
        loss0 += float(loss.value)
        gc = np.concatenate([x.value.ravel() for x in ad.grad(loss, wrt)])
        g = gc if g is None else g + gc
        if len(parts) == 1:
            kl_graphs.append((wrt, ad.grad(kl, wrt, create_graph=True)))
        else:
            del graph, nodes, wrt, loss, kl
            _gc.collect()
    info = TRPOInfo(False, loss0, loss0, 0.0, 0.0, 0, 0.0)
    if not np.any(g):
        return theta, info

    shapes = [x.shape for x in theta.values()]
    sizes = [int(np.prod(s)) for s in shapes]

    def hvp(wrt, kl_grads, pieces):
        dot = None
        for kg, vp in zip(kl_grads, pieces):
            term = ad.sum(ad.mask_mul(kg, vp))
            dot = term if dot is None else ad.add(dot, term)
        return np.concatenate([h.value.ravel() for h in ad.grad(dot, wrt)])

    def fvp(v: np.ndarray) -> np.ndarray:
        pieces, i = [], 0
        for s, n in zip(shapes, sizes):
            pieces.append(v[i:i + n].reshape(s))
            i += n
        if kl_graphs:
            return hvp(*kl_graphs[0], pieces)
        out = np.zeros_like(v)
        for c in parts:
            graph = Graph()
            nodes = theta.nodes(graph)
            wrt = list(nodes.values())
            _, kl = call(graph, nodes, c)
            out += hvp(wrt, ad.grad(kl, wrt, create_graph=True), pieces)
            del graph, nodes, wrt, kl
            _gc.collect()  # nodes and their graph form cycles; free chunk buffers now
        return out

    step, info.cg_residual = natural_gradient_step(g, fvp, cfg)
    kl_graphs.clear()
    flat = theta.to_flat()
    frac = 1.0
    for k in range(cfg.max_backtracks):
        cand = theta.from_flat(flat - frac * step)
        lv = kv = 0.0
        for c in parts:
            cg = Graph()
            l_new, kl_new = call(cg, cand.nodes(cg, requires_grad=False), c)
            lv += float(l_new.value)
            kv += float(kl_new.value)
            del cg, l_new, kl_new
            _gc.collect()
        info.history.append((frac, lv, kv))
        if np.isfinite(lv) and np.isfinite(kv) and lv < loss0 and kv <= cfg.delta:
            info.accepted = True
            info.loss_after, info.kl, info.step_fraction, info.backtracks = lv, kv, frac, k
            return cand, info
        frac *= cfg.backtrack_ratio
    info.backtracks = cfg.max_backtracks
    return theta, info
