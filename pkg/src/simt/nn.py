"""MLP backbones, initialization and inverted dropout."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Node, ParamSet, ShapeError


@dataclass(frozen=True)
class MLPConfig:
    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(int(d) < 1 for d in dims):
            raise ValueError(f"all layer dims must be >= 1, got {dims}")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"activation must be relu or tanh, got {self.activation!r}")

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.output_dim)

    @property
    def num_layers(self) -> int:
        return len(self.hidden_dims) + 1

    def layer_names(self, i: int) -> tuple[str, str]:
        return f"w{i}", f"b{i}"

    def last_layer_names(self) -> tuple[str, str]:
        return self.layer_names(self.num_layers - 1)


@dataclass
class DropoutSpec:
    """Inverted dropout on hidden activations.

    ``layer_selector`` is ``"all"`` or a sequence of hidden-layer indices.
    Masks come from a private generator seeded once from ``seed``; every
    call draws a fresh mask from that stream.
    """

    p: float = 0.0
    layer_selector: str | Sequence[int] = "all"
    seed: int = 0
    rng: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not 0.0 <= self.p < 1.0:
            raise ValueError(f"dropout p must be in [0, 1), got {self.p}")
        self.rng = np.random.default_rng(self.seed)

    def selects(self, layer: int) -> bool:
        return self.layer_selector == "all" or layer in self.layer_selector


def init_params(cfg: MLPConfig) -> ParamSet:
    """Glorot-uniform weights stored ``(out, in)``, zero biases."""
    rng = np.random.default_rng(cfg.seed)
    entries = []
    dims = cfg.dims
    for i in range(cfg.num_layers):
        fan_in, fan_out = dims[i], dims[i + 1]
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w, b = cfg.layer_names(i)
        entries.append((w, rng.uniform(-bound, bound, size=(fan_out, fan_in))))
        entries.append((b, np.zeros(fan_out)))
    return ParamSet(entries)


def _linear(x: Node, w: Node, b: Node) -> Node:
    h = ad.matmul(x, ad.transpose(w))
    if b.value.ndim == 1 or b.value.ndim == h.value.ndim:
        return ad.add(h, b)
    # per-task bias (n, out) against activations (n, ..., out)
    extra = h.value.ndim - b.value.ndim
    bb = ad.reshape(b, (b.shape[0],) + (1,) * extra + b.shape[1:])
    return ad.add(h, ad.broadcast_to(bb, h.shape))


def mlp_forward(params: Mapping[str, Node], x, graph: Graph, activation: str = "relu",
                dropout: DropoutSpec | None = None) -> Node:
    """Forward pass; ``x`` is ``(batch, in)`` or task-batched ``(tasks, batch, in)``.

    Parameters may carry a leading task axis matching ``x``.
    """
    x = x if isinstance(x, Node) else graph.constant(x)
    n_layers = len(params) // 2
    if n_layers < 1 or len(params) % 2:
        raise ShapeError("mlp_forward", detail=f"expected weight/bias pairs, got {list(params)}")
    act = ad.relu if activation == "relu" else ad.tanh
    h = x
    for i in range(n_layers):
        w, b = params[f"w{i}"], params[f"b{i}"]
        if h.shape[-1] != w.shape[-1]:
            raise ShapeError("mlp_forward", h.shape, w.shape, detail=f"layer {i}")
        h = _linear(h, w, b)
        if i < n_layers - 1:
            h = act(h)
            if dropout is not None and dropout.selects(i):
                h = dropout_apply(h, dropout, graph)
    return h


def dropout_mask(shape: tuple[int, ...], p: float, rng: np.random.Generator) -> np.ndarray:
    keep = rng.random(shape) >= p
    return keep.astype(np.float64) / (1.0 - p)


def dropout_apply(activations: Node, spec: DropoutSpec, graph: Graph | None = None) -> Node:
    if spec.p == 0.0:
        return activations
    return ad.mask_mul(activations, dropout_mask(activations.shape, spec.p, spec.rng))
