"""Momentum network, momentum targets, distillation and the meta-training step."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .adapt import AdaptConfig, MetaSGDState, Solver, adapt, detach_solver, metasgd_init
from .autodiff import Graph, Node, ParamSet, ShapeError
from .nn import DropoutSpec, MLPConfig, init_params
from .tasks import TASK_LOSSES, Episode, mse_loss


class NumericError(RuntimeError):
    """Non-finite loss during a training step."""

    def __init__(self, message: str, details: dict | None = None):
        self.details = details or {}
        super().__init__(message if not details else f"{message}: {details}")


@dataclass
class MomentumState:
    theta_moment: ParamSet
    eta: float = 0.995
    alpha_moment: ParamSet | None = None

    @classmethod
    def from_theta(cls, theta: ParamSet, eta: float, alpha: ParamSet | None = None):
        return cls(theta.copy(), eta, None if alpha is None else alpha.copy())


@dataclass
class SimtConfig:
    lam: float = 0.5
    temperature: float = 4.0
    dropout: DropoutSpec = field(default_factory=DropoutSpec)
    eta: float = 0.995
    teach_on_support: bool = False
    lambda_rampup_steps: int = 0
    dropout_task_term: bool = True

    def __post_init__(self):
        if not 0.0 <= self.lam < 1.0:
            raise ValueError(f"lambda must be in [0, 1), got {self.lam}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if not 0.0 <= self.eta < 1.0:
            raise ValueError(f"eta must be in [0, 1), got {self.eta}")
        if self.lambda_rampup_steps < 0:
            raise ValueError("lambda_rampup_steps must be >= 0")

    def lam_at(self, step: int) -> float:
        if self.lambda_rampup_steps > 0:
            return self.lam * min(1.0, step / self.lambda_rampup_steps)
        return self.lam


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class Adam:
    """Adaptive moment estimation over a :class:`ParamSet`."""

    def __init__(self, params: ParamSet, cfg: AdamConfig):
        self.cfg = cfg
        self.m = params.map(lambda k, v: np.zeros_like(v))
        self.v = params.map(lambda k, v: np.zeros_like(v))
        self.t = 0

    def step(self, params: ParamSet, grads: Mapping[str, np.ndarray]) -> ParamSet:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        new, m_new, v_new = [], [], []
        for k, p in params.items():
            g = grads[k]
            m = c.beta1 * self.m[k] + (1.0 - c.beta1) * g
            v = c.beta2 * self.v[k] + (1.0 - c.beta2) * (g * g)
            new.append((k, p - c.lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)))
            m_new.append((k, m))
            v_new.append((k, v))
        self.m, self.v = ParamSet(m_new), ParamSet(v_new)
        return ParamSet(new)


@dataclass
class FewShotModel:
    """What is being meta-learned: backbone, adaptation subroutine and task loss."""

    mlp: MLPConfig
    adapt: AdaptConfig
    task_kind: str
    n_way: int | None = None

    @property
    def loss(self):
        return TASK_LOSSES[self.task_kind]


@dataclass
class TrainState:
    theta: ParamSet
    optimizer: Adam
    momentum: MomentumState | None = None
    metasgd: MetaSGDState | None = None
    step: int = 0
    history: list = field(default_factory=list)

    def meta_params(self) -> ParamSet:
        """Everything the outer optimizer updates."""
        entries = [(f"theta/{k}", v) for k, v in self.theta.items()]
        if self.metasgd is not None:
            entries += [(f"lr/{k}", v) for k, v in self.metasgd.alpha.items()]
        return ParamSet(entries)


def init_train_state(model: FewShotModel, opt: AdamConfig, simt: SimtConfig | None = None
                     ) -> TrainState:
    """θ from the standard initialization, θ_moment an exact copy of it."""
    theta = init_params(model.mlp)
    metasgd = metasgd_init(theta, model.adapt.alpha) if model.adapt.kind == "metasgd" else None
    state = TrainState(theta, None, None, metasgd)
    state.optimizer = Adam(state.meta_params(), opt)
    if simt is not None:
        state.momentum = MomentumState.from_theta(theta, simt.eta,
                                                  None if metasgd is None else metasgd.alpha)
    return state


# ---------------------------------------------------------------------------
# momentum network


def ema_update(state: MomentumState, theta: ParamSet, alpha: ParamSet | None = None
               ) -> MomentumState:
    """``theta_moment <- eta * theta_moment + (1 - eta) * theta`` elementwise."""
    state.theta_moment.check_compatible(theta)
    eta = state.eta

    def mix(old: ParamSet, new: ParamSet) -> ParamSet:
        return ParamSet((k, eta * old[k] + (1.0 - eta) * new[k]) for k in old)

    moment_alpha = state.alpha_moment
    if alpha is not None and moment_alpha is not None:
        moment_alpha.check_compatible(alpha)
        moment_alpha = mix(moment_alpha, alpha)
    return MomentumState(mix(state.theta_moment, theta), eta, moment_alpha)


def momentum_target(state: MomentumState, support, adapt_cfg: AdaptConfig, graph: Graph,
                    loss=mse_loss, activation: str = "relu", num_classes: int | None = None
                    ) -> Solver:
    """Adapt the momentum network on ``support``; first-order and fully detached."""
    nodes = state.theta_moment.nodes(graph, requires_grad=False)
    step_sizes = None
    if state.alpha_moment is not None:
        step_sizes = state.alpha_moment.nodes(graph, requires_grad=False)
    solver = adapt(nodes, support, adapt_cfg, loss, graph, activation, step_sizes,
                   num_classes, create_graph=False)
    return detach_solver(solver, graph)


# ---------------------------------------------------------------------------
# distillation losses


def kd_loss_regression(student_out: Node, target_out) -> Node:
    """Mean over examples of ``||z_target - z_student||^2``; target is constant."""
    t = target_out.value if isinstance(target_out, Node) else np.asarray(target_out, dtype=float)
    if student_out.shape != t.shape:
        raise ShapeError("kd_loss_regression", student_out.shape, t.shape)
    return mse_loss(student_out, t)


def kd_loss_classification(student_logits: Node, target_logits, temperature: float) -> Node:
    """``T^2 * KL(softmax(z_t / T) || softmax(z_s / T))`` averaged over examples."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    t = target_logits.value if isinstance(target_logits, Node) else np.asarray(target_logits, float)
    if student_logits.shape != t.shape:
        raise ShapeError("kd_loss_classification", student_logits.shape, t.shape)
    n = t.size // t.shape[-1]
    log_p = ad._log_softmax(t * (1.0 / temperature))
    p = np.exp(log_p)
    log_q = ad.log_softmax(ad.scale(student_logits, 1.0 / temperature))
    g = student_logits.graph
    # cross term carries the gradient; the entropy term is a constant
    kl_sum = ad.sub(g.constant(np.sum(p * log_p)), ad.sum(ad.mask_mul(log_q, p)))
    return ad.scale(kl_sum, temperature * temperature / n)


def kd_loss_for(model: FewShotModel, temperature: float):
    if model.task_kind == "classification":
        return lambda s, t: kd_loss_classification(s, t, temperature)
    return kd_loss_regression


@dataclass
class HybridTerms:
    total: Node
    task: Node
    kd: Node | None
    lam: float
    student_out: Node


def hybrid_loss(student: Solver, target: Solver | None, query, lam: float, task_loss, kd_loss,
                graph: Graph, dropout: DropoutSpec | None = None, support=None,
                teach_on_support: bool = False, dropout_task_term: bool = True) -> HybridTerms:
    """``(1 - lam) * L(phi_drop, Q) + lam * L_teach(phi_drop, phi_moment, Q)``.

    One dropout mask per call is shared by both terms. With
    ``teach_on_support`` the distillation term is measured on the support set.
    """
    if not 0.0 <= lam < 1.0:
        raise ValueError(f"lambda must be in [0, 1), got {lam}")
    x_q, y_q = query
    out = student.forward(x_q, graph, dropout)
    task_out = out if dropout_task_term or dropout is None else student.forward(x_q, graph)
    task = task_loss(task_out, y_q)
    if lam == 0.0 or target is None:
        return HybridTerms(task, task, None, lam, out)
    if teach_on_support:
        x_t = support[0]
        s_out = student.forward(x_t, graph, dropout)
    else:
        x_t, s_out = x_q, out
    t_out = target.forward(x_t, graph)
    kd = kd_loss(s_out, t_out.value)
    total = ad.add(ad.scale(task, 1.0 - lam), ad.scale(kd, lam))
    return HybridTerms(total, task, kd, lam, out)


# ---------------------------------------------------------------------------
# training steps


def _graph_inputs(state: TrainState, graph: Graph):
    theta = state.theta.nodes(graph)
    alpha = state.metasgd.alpha.nodes(graph) if state.metasgd is not None else None
    wrt = [(f"theta/{k}", n) for k, n in theta.items()]
    if alpha is not None:
        wrt += [(f"lr/{k}", n) for k, n in alpha.items()]
    return theta, alpha, wrt


def _apply_update(state: TrainState, wrt, total: Node) -> None:
    grads = ad.grad(total, [n for _, n in wrt])
    gd = {name: g.value for (name, _), g in zip(wrt, grads)}
    new = state.optimizer.step(state.meta_params(), gd)
    state.theta = ParamSet((k[len("theta/"):], v) for k, v in new.items() if k.startswith("theta/"))
    if state.metasgd is not None:
        state.metasgd = MetaSGDState(ParamSet((k[len("lr/"):], v) for k, v in new.items()
                                              if k.startswith("lr/")))


def _query_accuracy(model: FewShotModel, out: Node, y_q) -> float:
    if model.task_kind != "classification":
        return math.nan
    return float(np.mean(np.argmax(out.value, -1) == np.asarray(y_q)))


def _check_finite(total: Node, task: Node, kd: Node | None, out: Node, step: int) -> None:
    if np.isfinite(total.value):
        return
    bad = out.value.reshape(out.shape[0], -1) if out.value.ndim > 2 else out.value[None]
    tasks = [int(i) for i in np.nonzero(~np.all(np.isfinite(bad), axis=1))[0]]
    raise NumericError(f"non-finite total loss at step {step}", {
        "task_index": tasks, "task_loss": float(task.value),
        "kd_loss": None if kd is None else float(kd.value),
    })


def sq_train_step(state: TrainState, batch: Episode, model: FewShotModel) -> tuple[TrainState, dict]:
    """Plain support/query meta-update (no target model)."""
    graph = Graph()
    theta, alpha, wrt = _graph_inputs(state, graph)
    solver = adapt(theta, (batch.x_s, batch.y_s), model.adapt, model.loss, graph,
                   model.mlp.activation, alpha, model.n_way)
    out = solver.forward(batch.x_q, graph)
    loss = model.loss(out, batch.y_q)
    _check_finite(loss, loss, None, out, state.step)
    _apply_update(state, wrt, loss)
    state.step += 1
    row = {"step": state.step, "task_loss": float(loss.value), "kd_loss": 0.0,
           "total_loss": float(loss.value), "lam": 0.0,
           "accuracy": _query_accuracy(model, out, batch.y_q)}
    return state, row


def simt_train_step(state: TrainState, batch: Episode, model: FewShotModel, simt: SimtConfig
                    ) -> tuple[TrainState, dict]:
    """One meta-iteration of the momentum-target algorithm over a stacked task batch.

    Order: momentum targets, student adaptation, dropout, hybrid loss,
    optimizer step on θ, then the EMA update using the new θ.
    """
    if state.momentum is None:
        raise ValueError("simt_train_step needs a momentum state")
    lam = simt.lam_at(state.step)
    graph = Graph()
    theta, alpha, wrt = _graph_inputs(state, graph)
    support = (batch.x_s, batch.y_s)
    target = None
    if lam > 0.0:
        target = momentum_target(state.momentum, support, model.adapt, graph, model.loss,
                                 model.mlp.activation, model.n_way)
    student = adapt(theta, support, model.adapt, model.loss, graph, model.mlp.activation,
                    alpha, model.n_way)
    dropout = simt.dropout if simt.dropout.p > 0 else None
    terms = hybrid_loss(student, target, (batch.x_q, batch.y_q), lam, model.loss,
                        kd_loss_for(model, simt.temperature), graph, dropout, support,
                        simt.teach_on_support, simt.dropout_task_term)
    _check_finite(terms.total, terms.task, terms.kd, terms.student_out, state.step)
    _apply_update(state, wrt, terms.total)
    state.momentum = ema_update(state.momentum, state.theta,
                                None if state.metasgd is None else state.metasgd.alpha)
    state.step += 1
    kd = 0.0 if terms.kd is None else float(terms.kd.value)
    row = {"step": state.step, "task_loss": float(terms.task.value), "kd_loss": kd,
           "total_loss": float(terms.total.value), "lam": lam,
           "accuracy": _query_accuracy(model, terms.student_out, batch.y_q)}
    return state, row


# ---------------------------------------------------------------------------
# evaluation


def per_task_losses(task_kind: str, out: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Query loss of each task in a stacked batch (numpy, no graph)."""
    if task_kind == "regression-mse":
        return ((out - y) ** 2).sum(-1).mean(-1)
    if task_kind == "regression-angular":
        return ((np.cos(out) - np.cos(y)) ** 2 + (np.sin(out) - np.sin(y)) ** 2).mean(axis=(-1, -2))
    logp = ad._log_softmax(out)
    picked = np.take_along_axis(logp, y[..., None].astype(int), -1)[..., 0]
    return -picked.mean(-1)


def evaluate_params(theta: ParamSet, batch: Episode, model: FewShotModel,
                    alpha: ParamSet | None = None, steps: int | None = None
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Adapt ``theta`` on each task's support set; per-task query loss and accuracy.

    Uses the evaluation step count and no dropout.
    """
    cfg = model.adapt.evaluation()
    graph = Graph()
    nodes = theta.nodes(graph, requires_grad=False)
    step_sizes = alpha.nodes(graph, requires_grad=False) if alpha is not None else None
    solver = adapt(nodes, (batch.x_s, batch.y_s), cfg, model.loss, graph, model.mlp.activation,
                   step_sizes, model.n_way, steps=steps, create_graph=False)
    out = solver.forward(batch.x_q, graph).value
    losses = per_task_losses(model.task_kind, out, batch.y_q)
    if model.task_kind == "classification":
        acc = (np.argmax(out, -1) == batch.y_q).mean(-1)
    else:
        acc = np.full(losses.shape, np.nan)
    return losses, acc


def network_params(state: TrainState, which: str) -> tuple[ParamSet, ParamSet | None]:
    if which == "theta":
        return state.theta, None if state.metasgd is None else state.metasgd.alpha
    if which == "momentum":
        if state.momentum is None:
            raise ValueError("no momentum network in this state")
        return state.momentum.theta_moment, state.momentum.alpha_moment
    raise ValueError(f"network must be theta or momentum, got {which!r}")


def summarize(values: np.ndarray) -> dict:
    values = np.asarray(values, dtype=np.float64)
    n = values.size
    std = float(values.std(ddof=1)) if n > 1 else 0.0
    half = 1.96 * std / math.sqrt(n) if n > 1 else 0.0
    m = float(values.mean())
    return {"mean": m, "std": std, "ci95": half, "n": int(n)}
