"""MAML-TRPO meta-RL on 2-D navigation, with optional momentum-target distillation.

All tasks of a meta-batch are processed together: rollouts are stored as
padded ``(tasks, rollouts, horizon, ...)`` arrays with a validity mask, and
per-task means are expressed as weighted sums so a single graph serves the
whole batch.
"""

from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .. import autodiff as ad
from ..autodiff import Graph, Node, ParamSet
from .advantage import GAEConfig, Trajectory, fit_baselines_batch, gae_batch
from .env import GOAL_RADIUS, clip_action, nav_reward, sample_goals
from .policy import (HALF_LOG_2PI, GaussianPolicy, gaussian_kl, gaussian_logprob, mean_np,
                     policy_logprob, policy_mean)
from .trpo import TRPOConfig, TRPOInfo, trpo_meta_update

log = logging.getLogger(__name__)


@dataclass
class RolloutBatch:
    goals: np.ndarray     # (N, 2)
    states: np.ndarray    # (N, K, H, 2)
    actions: np.ndarray   # (N, K, H, 2)
    rewards: np.ndarray   # (N, K, H)
    log_probs: np.ndarray  # (N, K, H)
    mask: np.ndarray      # (N, K, H)

    @property
    def num_tasks(self) -> int:
        return self.states.shape[0]

    def flat(self, arr: np.ndarray) -> np.ndarray:
        n, k, h = self.mask.shape
        return arr.reshape((n, k * h) + arr.shape[3:])

    def task_returns(self) -> np.ndarray:
        """Mean undiscounted return per task, ``(N,)``."""
        return (self.rewards * self.mask).sum(-1).mean(-1)

    def step_weights(self) -> np.ndarray:
        """``mask / |S_i|`` flattened to ``(N, K*H)``: per-task means as weighted sums."""
        counts = self.mask.sum(axis=(1, 2))
        return self.flat(self.mask) / counts[:, None]

    def select(self, tasks: slice) -> "RolloutBatch":
        return RolloutBatch(self.goals[tasks], self.states[tasks], self.actions[tasks],
                            self.rewards[tasks], self.log_probs[tasks], self.mask[tasks])

    def trajectory(self, task: int, k: int) -> Trajectory:
        t = int(self.mask[task, k].sum())
        return Trajectory(self.states[task, k, :t], self.actions[task, k, :t],
                          self.rewards[task, k, :t], self.log_probs[task, k, :t])


def rollout(params: Mapping[str, np.ndarray], goals: np.ndarray, k: int, horizon: int,
            rng: np.random.Generator, activation: str = "relu") -> RolloutBatch:
    """``k`` episodes per goal; params may be shared or carry a leading task axis."""
    n = len(goals)
    log_std = np.asarray(params["log_std"])
    std = np.exp(log_std)
    std = std.reshape(n, 1, 2) if std.ndim == 2 else std
    ls_sum = log_std.sum(-1).reshape(n, 1) if log_std.ndim == 2 else log_std.sum()
    states = np.zeros((n, k, horizon, 2))
    actions = np.zeros((n, k, horizon, 2))
    rewards = np.zeros((n, k, horizon))
    logp = np.zeros((n, k, horizon))
    mask = np.zeros((n, k, horizon))
    pos = np.zeros((n, k, 2))
    alive = np.ones((n, k), dtype=bool)
    goal = goals[:, None, :]
    for t in range(horizon):
        mu = mean_np(params, pos, activation)
        eps = rng.standard_normal((n, k, 2))
        a = mu + std * eps
        states[:, :, t] = pos
        actions[:, :, t] = a
        mask[:, :, t] = alive
        logp[:, :, t] = -0.5 * (eps * eps).sum(-1) - ls_sum - 2 * HALF_LOG_2PI
        new_pos = pos + clip_action(a)
        rewards[:, :, t] = nav_reward(new_pos, goal) * alive
        reached = np.sqrt(((new_pos - goal) ** 2).sum(-1)) < GOAL_RADIUS
        pos = np.where(alive[..., None], new_pos, pos)
        alive = alive & ~reached
        if not alive.any():
            break
    return RolloutBatch(goals, states, actions, rewards, logp * mask, mask)


def compute_advantages(batch: RolloutBatch, gae: GAEConfig, normalize: bool = True) -> np.ndarray:
    """GAE on per-task linear baselines, flattened to ``(N, K*H)``."""
    values = fit_baselines_batch(batch.states, batch.rewards, batch.mask, gae.gamma)
    adv = gae_batch(batch.rewards, values, batch.mask, gae)
    if normalize:
        m = batch.mask
        cnt = m.sum(axis=(1, 2), keepdims=True)
        mean = adv.sum(axis=(1, 2), keepdims=True) / cnt
        var = (((adv - mean) * m) ** 2).sum(axis=(1, 2), keepdims=True) / cnt
        adv = (adv - mean) / (np.sqrt(var) + 1e-8) * m
    return batch.flat(adv)


def _tiled(params: Mapping[str, Node], n: int) -> "OrderedDict[str, Node]":
    return OrderedDict((k, ad.tile_leading(v, n)) for k, v in params.items())


def pg_loss(params: Mapping[str, Node], batch: RolloutBatch, adv: np.ndarray, graph: Graph,
            activation: str = "relu") -> Node:
    """Vanilla policy-gradient loss, summed over tasks of per-task means."""
    logp = policy_logprob(params, batch.flat(batch.states), batch.flat(batch.actions), graph,
                          activation)
    return ad.neg(ad.sum(ad.mask_mul(logp, batch.step_weights() * adv)))


def pg_adapt(theta: Mapping[str, Node], support: RolloutBatch, adv: np.ndarray, alpha: float,
             graph: Graph, create_graph: bool = True, activation: str = "relu"
             ) -> "OrderedDict[str, Node]":
    """One policy-gradient step per task: ``phi = theta - alpha * grad L(theta, S)``."""
    params = _tiled(theta, support.num_tasks)
    loss = pg_loss(params, support, adv, graph, activation)
    grads = ad.grad(loss, list(params.values()), create_graph=create_graph)
    for g in grads:
        if not np.all(np.isfinite(g.value)):
            raise FloatingPointError("non-finite policy gradient in adaptation")
    return OrderedDict((k, ad.sub(v, ad.scale(g, alpha))) for (k, v), g in zip(params.items(), grads))


def trpo_surrogate(phi_new: Mapping[str, Node], old_log_probs: np.ndarray, query: RolloutBatch,
                   adv: np.ndarray, graph: Graph, activation: str = "relu") -> Node:
    """``-mean over tasks of (1/|Q|) sum ratio * A`` with the ratio formed in log space."""
    logp = policy_logprob(phi_new, query.flat(query.states), query.flat(query.actions), graph,
                          activation)
    ratio = ad.exp(ad.sub(logp, graph.constant(old_log_probs)))
    w = query.step_weights() * adv / query.num_tasks
    return ad.neg(ad.sum(ad.mask_mul(ratio, w)))


def _dist(params, states, graph: Graph, activation: str):
    """(mean, log_std) for a parameter dict of nodes or arrays."""
    if all(isinstance(v, Node) for v in params.values()):
        return policy_mean(params, states, graph, activation), params["log_std"]
    arr = {k: np.asarray(v.value if isinstance(v, Node) else v) for k, v in params.items()}
    return mean_np(arr, states, activation), arr["log_std"]


def gaussian_kl_np(mu1, ls1, mu2, ls2) -> np.ndarray:
    """Numpy twin of :func:`gaussian_kl`; log-stds broadcast over the state axis."""
    ls1, ls2 = np.asarray(ls1), np.asarray(ls2)
    if ls1.ndim == 2:
        ls1 = ls1[:, None, :]
    if ls2.ndim == 2:
        ls2 = ls2[:, None, :]
    per_dim = ls2 - ls1 + 0.5 * (np.exp(2 * ls1) + (mu1 - mu2) ** 2) * np.exp(-2 * ls2) - 0.5
    return per_dim.sum(-1)


def _weighted_mean_kl(p_mu, p_ls, q_mu, q_ls, batch: RolloutBatch) -> Node:
    kl = gaussian_kl(p_mu, p_ls, q_mu, q_ls)
    return ad.sum(ad.mask_mul(kl, batch.step_weights() / batch.num_tasks))


def avg_policy_kl(phi_old, phi_new, batch: RolloutBatch, graph: Graph,
                  activation: str = "relu") -> Node:
    """Mean over tasks and visited states of ``KL(pi_old(.|s) || pi_new(.|s))``."""
    states = batch.flat(batch.states)
    mo, lo = _dist(phi_old, states, graph, activation)
    mn, ln = _dist(phi_new, states, graph, activation)
    return _weighted_mean_kl(mo, lo, mn, ln, batch)


def kd_rl_loss(phi: Mapping[str, Node], phi_moment, query: RolloutBatch, graph: Graph,
               activation: str = "relu") -> Node:
    """``mean KL(pi_phi(s) || pi_moment(s))``; the momentum side is a constant."""
    states = query.flat(query.states)
    mu, ls = _dist(phi, states, graph, activation)
    frozen = {k: (v.value if isinstance(v, Node) else np.asarray(v)) for k, v in phi_moment.items()}
    mm, lm = _dist(frozen, states, graph, activation)
    return _weighted_mean_kl(mu, ls, mm, lm, query)


# ---------------------------------------------------------------------------
# training


@dataclass
class RLSimtConfig:
    lam: float = 0.1
    eta: float = 0.995
    lambda_rampup_steps: int = 0
    momentum_on_query: bool = False

    def lam_at(self, step: int) -> float:
        if self.lambda_rampup_steps > 0:
            return self.lam * min(1.0, step / self.lambda_rampup_steps)
        return self.lam


@dataclass
class MetaRLConfig:
    iterations: int = 200
    meta_batch: int = 20
    rollouts: int = 20
    horizon: int = 100
    alpha: float = 0.1
    gae: GAEConfig = field(default_factory=GAEConfig)
    trpo: TRPOConfig = field(default_factory=TRPOConfig)
    normalize_advantages: bool = True
    policy: GaussianPolicy = field(default_factory=GaussianPolicy)
    simt: RLSimtConfig | None = None
    seed: int = 0
    eval_tasks: int = 40
    eval_steps: tuple[float, ...] = (0.1, 0.05, 0.05)
    task_chunk: int | None = 5


@dataclass
class RLState:
    theta: ParamSet
    theta_moment: ParamSet | None
    iteration: int = 0
    best_return: float = -np.inf
    best_theta: ParamSet | None = None
    best_moment: ParamSet | None = None
    curves: list = field(default_factory=list)
    trpo_log: list = field(default_factory=list)


def _values(nodes: Mapping[str, Node]) -> "OrderedDict[str, np.ndarray]":
    return OrderedDict((k, v.value) for k, v in nodes.items())


def meta_rl_iteration(state: RLState, cfg: MetaRLConfig, rng: np.random.Generator
                      ) -> tuple[RLState, TRPOInfo, dict]:
    """Sample tasks, adapt, sample query rollouts, trust-region meta-update, then EMA."""
    act = cfg.policy.mlp.activation
    goals = sample_goals(cfg.meta_batch, rng)
    support = rollout(state.theta, goals, cfg.rollouts, cfg.horizon, rng, act)
    adv_s = compute_advantages(support, cfg.gae, cfg.normalize_advantages)

    n = cfg.meta_batch
    chunk = n if cfg.task_chunk is None else max(1, cfg.task_chunk)
    chunks = [slice(i, min(i + chunk, n)) for i in range(0, n, chunk)]

    # the old adapted policy, built by the same code path the objective uses
    phi_old = OrderedDict()
    for c in chunks:
        g0 = Graph()
        part = _values(pg_adapt(state.theta.nodes(g0, requires_grad=False), support.select(c),
                                adv_s[c], cfg.alpha, g0, create_graph=True, activation=act))
        for k, v in part.items():
            phi_old.setdefault(k, []).append(v)
    phi_old = OrderedDict((k, np.concatenate(v)) for k, v in phi_old.items())
    query = rollout(phi_old, goals, cfg.rollouts, cfg.horizon, rng, act)
    adv_q = compute_advantages(query, cfg.gae, cfg.normalize_advantages)
    q_states = query.flat(query.states)
    q_actions = query.flat(query.actions)
    old_mu = mean_np(phi_old, q_states, act)
    old_ls = phi_old["log_std"]
    g0 = Graph()
    old_logp = gaussian_logprob(g0.constant(old_mu), g0.constant(old_ls), q_actions).value

    lam = cfg.simt.lam_at(state.iteration) if cfg.simt is not None else 0.0
    phi_moment = None
    if lam > 0.0:
        src = query if cfg.simt.momentum_on_query else support
        src_adv = adv_q if cfg.simt.momentum_on_query else adv_s
        gm = Graph()
        phi_moment = _values(pg_adapt(state.theta_moment.nodes(gm, requires_grad=False), src,
                                      src_adv, cfg.alpha, gm, create_graph=False, activation=act))
        mom_mu, mom_ls = mean_np(phi_moment, q_states, act), phi_moment["log_std"]

    w_surr = query.step_weights() * adv_q / n
    w_kl = query.step_weights() / n

    def objective(graph: Graph, theta_nodes, c: slice = slice(None)):
        # one query forward shared by the surrogate, the trust-region KL and the KD term
        phi = pg_adapt(theta_nodes, support.select(c), adv_s[c], cfg.alpha, graph, True, act)
        mu_new = policy_mean(phi, q_states[c], graph, act)
        logp = gaussian_logprob(mu_new, phi["log_std"], q_actions[c])
        ratio = ad.exp(ad.sub(logp, graph.constant(old_logp[c])))
        surr = ad.neg(ad.sum(ad.mask_mul(ratio, w_surr[c])))
        kl = ad.sum(ad.mask_mul(gaussian_kl(old_mu[c], old_ls[c], mu_new, phi["log_std"]),
                                w_kl[c]))
        if phi_moment is None:
            return surr, kl
        teach = ad.sum(ad.mask_mul(gaussian_kl(mu_new, phi["log_std"], mom_mu[c], mom_ls[c]),
                                   w_kl[c]))
        return ad.add(ad.scale(surr, 1.0 - lam), ad.scale(teach, lam)), kl

    new_theta, info = trpo_meta_update(state.theta, objective, cfg.trpo,
                                       None if len(chunks) == 1 else chunks)
    state.theta = new_theta
    if state.theta_moment is not None:
        eta = cfg.simt.eta
        state.theta_moment = ParamSet((k, eta * v + (1.0 - eta) * new_theta[k])
                                      for k, v in state.theta_moment.items())
    state.iteration += 1
    pre, post = support.task_returns(), query.task_returns()
    # loss components at the pre-update parameters, where every ratio is 1
    task0 = -float(np.sum(w_surr))
    kd0 = 0.0
    if phi_moment is not None:
        kd0 = float(np.sum(w_kl * gaussian_kl_np(old_mu, old_ls, mom_mu, mom_ls)))
    stats = {"iteration": state.iteration, "task_loss": task0, "kd_loss": kd0,
             "total_loss": (1.0 - lam) * task0 + lam * kd0, "pre_return": float(pre.mean()),
             "post_return": float(post.mean()), "pre_std": float(pre.std()),
             "post_std": float(post.std()), "lam": lam}
    return state, info, stats


def init_rl_state(cfg: MetaRLConfig) -> RLState:
    theta = cfg.policy.init_params()
    moment = theta.copy() if cfg.simt is not None else None
    return RLState(theta, moment)


def simt_rl_train(cfg: MetaRLConfig, state: RLState | None = None,
                  rng: np.random.Generator | None = None) -> RLState:
    """Meta-train; tracks the iterate with the best post-adaptation training return."""
    state = init_rl_state(cfg) if state is None else state
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    while state.iteration < cfg.iterations:
        theta_before, moment_before = state.theta, state.theta_moment
        state, info, stats = meta_rl_iteration(state, cfg, rng)
        state.trpo_log.append(info)
        state.curves.append((stats["iteration"], 0, stats["pre_return"], stats["pre_std"], cfg.seed))
        state.curves.append((stats["iteration"], 1, stats["post_return"], stats["post_std"], cfg.seed))
        # the returns were measured with the parameters before this update
        if stats["post_return"] > state.best_return:
            state.best_return = stats["post_return"]
            state.best_theta, state.best_moment = theta_before, moment_before
        log.debug("iter %d pre %.3f post %.3f accepted=%s", stats["iteration"],
                  stats["pre_return"], stats["post_return"], info.accepted)
    return state


def evaluate_policy(theta: ParamSet, cfg: MetaRLConfig, rng: np.random.Generator,
                    n_tasks: int | None = None, step_sizes: tuple[float, ...] | None = None
                    ) -> list[dict]:
    """Returns after 0, 1, 2, ... adaptation steps (0.1 then 0.05 by default)."""
    act = cfg.policy.mlp.activation
    n = cfg.eval_tasks if n_tasks is None else n_tasks
    step_sizes = cfg.eval_steps if step_sizes is None else step_sizes
    goals = sample_goals(n, rng)
    params = OrderedDict(theta.items())
    out = []
    for step in range(len(step_sizes) + 1):
        batch = rollout(params, goals, cfg.rollouts, cfg.horizon, rng, act)
        r = batch.task_returns()
        out.append({"grad_steps": step, "mean_return": float(r.mean()),
                    "std_return": float(r.std()), "per_task": r})
        if step == len(step_sizes):
            break
        adv = compute_advantages(batch, cfg.gae, cfg.normalize_advantages)
        g = Graph()
        if step == 0:
            nodes = OrderedDict((k, g.constant(v)) for k, v in params.items())
            phi = pg_adapt(nodes, batch, adv, step_sizes[step], g, create_graph=False,
                           activation=act)
        else:
            nodes = OrderedDict((k, g.constant(v)) for k, v in params.items())
            loss = pg_loss(nodes, batch, adv, g, act)
            grads = ad.grad(loss, list(nodes.values()))
            phi = OrderedDict((k, ad.sub(v, ad.scale(gr, step_sizes[step])))
                              for (k, v), gr in zip(nodes.items(), grads))
        params = _values(phi)
    return out
