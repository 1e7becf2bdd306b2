"""Diagonal Gaussian MLP policy with a state-independent log standard deviation."""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .. import autodiff as ad
from ..autodiff import Graph, Node, ParamSet
from ..nn import MLPConfig, init_params, mlp_forward

HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


@dataclass(frozen=True)
class GaussianPolicy:
    mlp: MLPConfig = MLPConfig(2, (100, 100), 2, "relu", 0)
    init_log_std: float = 0.0

    def init_params(self) -> ParamSet:
        base = init_params(self.mlp)
        return ParamSet(list(base.items()) + [("log_std", np.full(self.mlp.output_dim,
                                                                  self.init_log_std))])


def _mlp_part(params: Mapping[str, Node]) -> "OrderedDict[str, Node]":
    return OrderedDict((k, v) for k, v in params.items() if k != "log_std")


def _expand(v: Node, shape: tuple[int, ...]) -> Node:
    """Broadcast a per-dim vector ``(d,)`` or per-task ``(n, d)`` to ``shape``."""
    if v.value.ndim == 1:
        return v if v.shape == shape else ad.broadcast_to(v, shape)
    extra = len(shape) - v.value.ndim
    return ad.broadcast_to(ad.reshape(v, (v.shape[0],) + (1,) * extra + v.shape[1:]), shape)


def policy_mean(params: Mapping[str, Node], states, graph: Graph,
                activation: str = "relu") -> Node:
    return mlp_forward(_mlp_part(params), states, graph, activation)


def gaussian_logprob(mu: Node, log_std: Node, actions) -> Node:
    """Log density summed over action dims; shape ``mu.shape[:-1]``."""
    g = mu.graph
    a = g.constant(actions)
    ls = _expand(log_std, mu.shape)
    z = ad.mul(ad.sub(a, mu), ad.exp(ad.neg(ls)))
    per_dim = ad.sub(ad.scale(ad.square(z), -0.5), ls)
    return ad.sub(ad.sum(per_dim, axis=-1), g.constant(HALF_LOG_2PI * mu.shape[-1]))


def policy_logprob(params: Mapping[str, Node], states, actions, graph: Graph,
                   activation: str = "relu") -> Node:
    mu = policy_mean(params, states, graph, activation)
    return gaussian_logprob(mu, params["log_std"], actions)


def gaussian_kl(mu1, log_std1, mu2, log_std2) -> Node:
    """Closed-form ``KL(N(mu1, s1) || N(mu2, s2))`` per state, summed over dims.

    Any argument may be a constant array; at least one must be a node.
    """
    graph = next(x.graph for x in (mu1, log_std1, mu2, log_std2) if isinstance(x, Node))

    def node(x):
        return x if isinstance(x, Node) else graph.constant(x)

    mu1, mu2 = node(mu1), node(mu2)
    shape = mu1.shape
    ls1, ls2 = _expand(node(log_std1), shape), _expand(node(log_std2), shape)
    diff = ad.sub(mu1, mu2)
    num = ad.add(ad.exp(ad.scale(ls1, 2.0)), ad.square(diff))
    quad = ad.scale(ad.mul(num, ad.exp(ad.scale(ls2, -2.0))), 0.5)
    per_dim = ad.add(ad.sub(ls2, ls1), quad)
    return ad.sub(ad.sum(per_dim, axis=-1), graph.constant(0.5 * shape[-1]))


def mean_np(params: ParamSet | Mapping[str, np.ndarray], states: np.ndarray,
            activation: str = "relu") -> np.ndarray:
    """Numpy policy mean for rollouts; params may carry a leading task axis."""
    names = [k for k in params if k != "log_std"]
    n_layers = len(names) // 2
    h = states
    for i in range(n_layers):
        w, b = np.asarray(params[f"w{i}"]), np.asarray(params[f"b{i}"])
        h = h @ np.swapaxes(w, -1, -2)
        if b.ndim == 2:
            b = b.reshape((b.shape[0],) + (1,) * (h.ndim - 2) + b.shape[1:])
        h = h + b
        if i < n_layers - 1:
            h = np.maximum(h, 0.0) if activation == "relu" else np.tanh(h)
    return h
