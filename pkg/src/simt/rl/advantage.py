"""Linear feature baseline and generalized advantage estimation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

RIDGE = 1e-5
REFINE_STEPS = 10


def ridge_solve(x: np.ndarray, y: np.ndarray, ridge: float = RIDGE,
                refine: int = REFINE_STEPS) -> np.ndarray:
    """Ridge least squares, then iterated-Tikhonov refinement toward the exact fit.

    Every solve uses the regularized (always invertible) normal matrix; the
    refinement steps remove the ridge bias when the data admit an exact fit.
    """
    a = x.T @ x + ridge * np.eye(x.shape[1])
    w = np.linalg.solve(a, x.T @ y)
    for _ in range(refine):
        w = w + np.linalg.solve(a, x.T @ (y - x @ w))
    return w


@dataclass(frozen=True)
class GAEConfig:
    gamma: float = 0.95
    lam: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must be in [0, 1), got {self.gamma}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lam must be in [0, 1], got {self.lam}")


@dataclass
class Trajectory:
    states: np.ndarray      # (T, 2)
    actions: np.ndarray     # (T, 2)
    rewards: np.ndarray     # (T,)
    log_probs: np.ndarray   # (T,)
    terminal: bool = True

    def __post_init__(self):
        t = len(self.rewards)
        if not (len(self.states) == len(self.actions) == len(self.log_probs) == t):
            raise ValueError("trajectory fields have inconsistent lengths")

    def __len__(self) -> int:
        return len(self.rewards)


def features(states: np.ndarray, t: np.ndarray | None = None) -> np.ndarray:
    """``[s, s*s, 0.01 t, (0.01 t)^2, (0.01 t)^3, 1]`` per time step."""
    states = np.asarray(states, dtype=np.float64)
    n = len(states)
    al = (np.arange(n) if t is None else np.asarray(t)).reshape(-1, 1) * 0.01
    return np.concatenate([states, states * states, al, al ** 2, al ** 3, np.ones((n, 1))], axis=1)


def discounted_returns(rewards: np.ndarray, gamma: float) -> np.ndarray:
    out = np.zeros(len(rewards))
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


@dataclass
class LinearBaseline:
    coeffs: np.ndarray

    def predict(self, states: np.ndarray, t: np.ndarray | None = None) -> np.ndarray:
        return features(states, t) @ self.coeffs


def baseline_fit(trajectories: Sequence[Trajectory], gamma: float = 0.95,
                 ridge: float = RIDGE) -> LinearBaseline:
    """Ridge least squares of discounted returns-to-go on the time/state features."""
    if not trajectories:
        raise ValueError("need at least one trajectory")
    x = np.concatenate([features(tr.states) for tr in trajectories])
    y = np.concatenate([discounted_returns(tr.rewards, gamma) for tr in trajectories])
    return LinearBaseline(ridge_solve(x, y, ridge))


def baseline_predict(b: LinearBaseline, states: np.ndarray, t=None) -> np.ndarray:
    return b.predict(states, t)


def gae_advantages(traj: Trajectory, baseline: LinearBaseline, cfg: GAEConfig = GAEConfig()
                   ) -> np.ndarray:
    """``A_t = sum_k (gamma*lam)^k delta_{t+k}`` with the value after the last step set to 0."""
    v = baseline.predict(traj.states)
    v_next = np.append(v[1:], 0.0)
    delta = traj.rewards + cfg.gamma * v_next - v
    adv = np.zeros(len(delta))
    acc = 0.0
    decay = cfg.gamma * cfg.lam
    for t in range(len(delta) - 1, -1, -1):
        acc = delta[t] + decay * acc
        adv[t] = acc
    return adv


def gae_batch(rewards: np.ndarray, values: np.ndarray, mask: np.ndarray, cfg: GAEConfig
              ) -> np.ndarray:
    """Vectorized GAE over padded ``(..., H)`` arrays; steps with mask 0 are padding."""
    h = rewards.shape[-1]
    v_next = np.concatenate([values[..., 1:] * mask[..., 1:], np.zeros(values.shape[:-1] + (1,))],
                            axis=-1)
    delta = (rewards + cfg.gamma * v_next - values) * mask
    adv = np.zeros_like(delta)
    acc = np.zeros(rewards.shape[:-1])
    decay = cfg.gamma * cfg.lam
    for t in range(h - 1, -1, -1):
        acc = delta[..., t] + decay * acc * mask[..., t]
        adv[..., t] = acc
    return adv * mask


def returns_batch(rewards: np.ndarray, mask: np.ndarray, gamma: float) -> np.ndarray:
    h = rewards.shape[-1]
    out = np.zeros_like(rewards)
    acc = np.zeros(rewards.shape[:-1])
    for t in range(h - 1, -1, -1):
        acc = rewards[..., t] * mask[..., t] + gamma * acc * mask[..., t]
        out[..., t] = acc
    return out


def fit_baselines_batch(states: np.ndarray, rewards: np.ndarray, mask: np.ndarray, gamma: float,
                        ridge: float = RIDGE) -> np.ndarray:
    """Per-task baseline values for padded ``(tasks, K, H, d)`` rollouts."""
    n, k, h, d = states.shape
    al = (np.arange(h) * 0.01)[None, None, :, None] * np.ones((n, k, h, 1))
    feats = np.concatenate([states, states * states, al, al ** 2, al ** 3, np.ones((n, k, h, 1))],
                           axis=-1)
    ret = returns_batch(rewards, mask, gamma)
    values = np.zeros((n, k, h))
    m = mask.astype(bool)
    for i in range(n):
        x = feats[i][m[i]]
        y = ret[i][m[i]]
        coeffs = ridge_solve(x, y, ridge)
        values[i] = feats[i] @ coeffs
    return values * mask
