"""2-D point navigation with per-task goals."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ACTION_LIMIT = 0.1
GOAL_RADIUS = 0.01


class EnvError(RuntimeError):
    pass


def clip_action(action: np.ndarray) -> np.ndarray:
    return np.clip(action, -ACTION_LIMIT, ACTION_LIMIT)


def nav_reward(position: np.ndarray, goal: np.ndarray) -> np.ndarray:
    """Negative squared distance to the goal."""
    d = position - goal
    return -np.sum(d * d, axis=-1)


def sample_goals(n: int, rng: np.random.Generator, low: float = -0.5, high: float = 0.5) -> np.ndarray:
    return rng.uniform(low, high, size=(n, 2))


@dataclass
class NavEnv:
    goal: np.ndarray
    horizon: int = 100
    state: np.ndarray = field(default_factory=lambda: np.zeros(2))
    t: int = 0
    done: bool = False

    def __post_init__(self):
        self.goal = np.asarray(self.goal, dtype=np.float64)
        self.state = np.asarray(self.state, dtype=np.float64)

    def reset(self) -> np.ndarray:
        self.state = np.zeros(2)
        self.t = 0
        self.done = False
        return self.state.copy()


def env_step(env: NavEnv, action) -> tuple[np.ndarray, float, bool]:
    if env.done:
        raise EnvError("step called on a finished episode; call reset()")
    env.state = env.state + clip_action(np.asarray(action, dtype=np.float64))
    env.t += 1
    reward = float(nav_reward(env.state, env.goal))
    dist = float(np.sqrt(np.sum((env.state - env.goal) ** 2)))
    env.done = dist < GOAL_RADIUS or env.t >= env.horizon
    return env.state.copy(), reward, env.done
