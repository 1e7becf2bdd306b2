"""Adaptation subroutines: MAML, FOMAML, ANIL, MetaSGD and ProtoNet."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Node, ParamSet, ShapeError
from .nn import DropoutSpec, mlp_forward

GRADIENT_KINDS = ("maml", "fomaml", "anil", "metasgd")
KINDS = GRADIENT_KINDS + ("protonet",)


class AdaptationError(RuntimeError):
    def __init__(self, message: str, step: int):
        self.step = step
        super().__init__(f"{message} at inner step {step}")


@dataclass
class AdaptConfig:
    kind: str = "maml"
    steps: int = 5
    alpha: float = 0.01
    second_order: bool | None = None
    adapted_names: tuple[str, ...] | None = None
    eval_steps: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown adaptation kind {self.kind!r}")
        if self.second_order is None:
            self.second_order = self.kind in ("maml", "anil", "metasgd")
        if self.kind == "fomaml":
            self.second_order = False
        if self.kind == "metasgd":
            self.steps = 1
            self.eval_steps = 1
        if self.kind in GRADIENT_KINDS and self.steps < 1:
            raise ValueError(f"{self.kind} needs steps >= 1")
        if self.eval_steps is None:
            self.eval_steps = 10 if self.kind in ("maml", "fomaml", "anil") else self.steps

    def evaluation(self) -> "AdaptConfig":
        """Same subroutine with the evaluation step count, first-order."""
        return AdaptConfig(self.kind, self.eval_steps, self.alpha, False, self.adapted_names,
                           self.eval_steps)


@dataclass
class Prototypes:
    class_ids: np.ndarray
    vectors: Node  # (classes, dim) or (tasks, classes, dim)


@dataclass
class Solver:
    """Task-specific solver: adapted parameters, or prototypes plus the embedding params."""

    kind: str
    params: "OrderedDict[str, Node]"
    prototypes: Prototypes | None = None
    activation: str = "relu"

    def forward(self, x, graph: Graph, dropout: DropoutSpec | None = None) -> Node:
        """Regression outputs / class logits for ``x``."""
        if self.prototypes is None:
            return mlp_forward(self.params, x, graph, self.activation, dropout)
        emb = mlp_forward(self.params, x, graph, self.activation, dropout)
        return ad.neg(squared_distances(emb, self.prototypes.vectors))


@dataclass
class MetaSGDState:
    alpha: ParamSet


def metasgd_init(theta: ParamSet, alpha: float) -> MetaSGDState:
    return MetaSGDState(theta.map(lambda k, v: np.full(v.shape, alpha)))


def _tile(nodes: Mapping[str, Node], names, n_tasks: int | None):
    out = OrderedDict(nodes)
    if n_tasks is not None:
        for k in names:
            out[k] = ad.tile_leading(nodes[k], n_tasks)
    return out


def adapt_gradient(theta: Mapping[str, Node], x_s, y_s, cfg: AdaptConfig,
                   loss: Callable[[Node, np.ndarray], Node], graph: Graph,
                   activation: str = "relu", step_sizes: Mapping[str, Node] | None = None,
                   steps: int | None = None, create_graph: bool | None = None) -> Solver:
    """Gradient-based adaptation starting from ``theta``.

    With task-batched support ``x_s`` of shape ``(tasks, k, d)`` each adapted
    parameter gets its own copy per task, so a single backward pass yields
    every task's inner gradient.
    """
    if cfg.kind not in GRADIENT_KINDS:
        raise ValueError(f"adapt_gradient does not handle {cfg.kind!r}")
    steps = cfg.steps if steps is None else steps
    create_graph = cfg.second_order if create_graph is None else create_graph
    names = list(cfg.adapted_names or theta.keys())
    if cfg.kind == "metasgd" and step_sizes is None:
        raise ValueError("metasgd needs per-parameter step sizes")

    x_s = np.asarray(x_s, dtype=np.float64)
    n_tasks = x_s.shape[0] if x_s.ndim == 3 else None
    params = _tile(theta, names, n_tasks)
    xs = graph.constant(x_s)
    for step in range(steps):
        pred = mlp_forward(params, xs, graph, activation)
        inner = loss(pred, y_s)
        if n_tasks is not None:
            # sum of per-task means, so each task copy sees its own gradient
            inner = ad.scale(inner, n_tasks)
        if not np.isfinite(inner.value):
            raise AdaptationError(f"non-finite inner loss {float(inner.value)}", step)
        grads = ad.grad(inner, [params[k] for k in names], create_graph=create_graph)
        new = OrderedDict(params)
        for k, g in zip(names, grads):
            if cfg.kind == "metasgd":
                new[k] = ad.sub(params[k], ad.mul(step_sizes[k], g))
            else:
                new[k] = ad.sub(params[k], ad.scale(g, cfg.alpha))
        params = new
    return Solver(cfg.kind, params, activation=activation)


def anil_names(theta: Mapping[str, object]) -> tuple[str, ...]:
    """Final weight matrix and bias."""
    last = len(theta) // 2 - 1
    return (f"w{last}", f"b{last}")


def _class_average_matrix(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels).astype(int)
    oh = np.eye(num_classes)[labels]  # (..., S, C)
    counts = oh.sum(axis=-2, keepdims=True)
    if np.any(counts == 0):
        raise ValueError("every class needs at least one support example")
    return np.swapaxes(oh / counts, -1, -2)  # (..., C, S)


def adapt_protonet(theta: Mapping[str, Node], x_s, y_s, graph: Graph,
                   num_classes: int | None = None, activation: str = "relu",
                   dropout: DropoutSpec | None = None) -> Solver:
    """Class-mean embeddings of the support set; no gradient steps."""
    y_s = np.asarray(y_s).astype(int)
    if num_classes is None:
        num_classes = int(y_s.max()) + 1
    avg = _class_average_matrix(y_s, num_classes)
    emb = mlp_forward(theta, x_s, graph, activation, dropout)
    protos = ad.matmul(graph.constant(avg), emb)
    return Solver("protonet", OrderedDict(theta), Prototypes(np.arange(num_classes), protos),
                  activation)


def squared_distances(emb: Node, protos: Node) -> Node:
    """``(..., Q, D)`` x ``(..., C, D)`` -> ``(..., Q, C)`` squared Euclidean distances."""
    if emb.shape[-1] != protos.shape[-1] or emb.shape[:-2] != protos.shape[:-2]:
        raise ShapeError("squared_distances", emb.shape, protos.shape)
    lead = emb.shape[:-2]
    q, c, d = emb.shape[-2], protos.shape[-2], emb.shape[-1]
    e = ad.broadcast_to(ad.reshape(emb, lead + (q, 1, d)), lead + (q, c, d))
    p = ad.broadcast_to(ad.reshape(protos, lead + (1, c, d)), lead + (q, c, d))
    return ad.sum(ad.square(ad.sub(e, p)), axis=-1)


def protonet_predict(solver: Solver, x, graph: Graph,
                     dropout: DropoutSpec | None = None) -> Node:
    """Class probabilities ``softmax(-d(f(x), c_i))``."""
    if solver.prototypes is None:
        raise ValueError("protonet_predict needs a prototype solver")
    return ad.softmax(solver.forward(x, graph, dropout))


def adapt(theta: Mapping[str, Node], episode_support, cfg: AdaptConfig, loss, graph: Graph,
          activation: str = "relu", step_sizes=None, num_classes: int | None = None,
          steps: int | None = None, create_graph: bool | None = None) -> Solver:
    """Dispatch on ``cfg.kind``; ``episode_support`` is ``(x_s, y_s)``."""
    x_s, y_s = episode_support
    if cfg.kind == "protonet":
        return adapt_protonet(theta, x_s, y_s, graph, num_classes, activation)
    if cfg.kind == "anil" and cfg.adapted_names is None:
        cfg = AdaptConfig(cfg.kind, cfg.steps, cfg.alpha, cfg.second_order, anil_names(theta),
                          cfg.eval_steps)
    return adapt_gradient(theta, x_s, y_s, cfg, loss, graph, activation, step_sizes,
                          steps=steps, create_graph=create_graph)


def detach_solver(solver: Solver, graph: Graph) -> Solver:
    params = OrderedDict((k, ad.detach(v)) for k, v in solver.params.items())
    protos = None
    if solver.prototypes is not None:
        protos = Prototypes(solver.prototypes.class_ids, ad.detach(solver.prototypes.vectors))
    return Solver(solver.kind, params, protos, solver.activation)
