"""Desk-scale worlds: named tabular MDPs and the continuous PointReach task.

``make_world(name, seed)`` is the single entry point used by the CLI; tabular
worlds are :class:`~bppolab.mdp.TabularMDP` instances, PointReach is a
:class:`PointReach`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .mdp import (NumericalError, TabularMDP, Trajectory, exact_action_values,
                  optimal_policy, random_mdp, rollout_tabular)

TABULAR_WORLDS = ("tabular-grid", "tabular-random", "tabular-bandit")
CONTINUOUS_WORLDS = ("point-reach",)
WORLD_NAMES = TABULAR_WORLDS + CONTINUOUS_WORLDS


@dataclass(frozen=True)
class PointReach:
    """Point mass steering to a goal.

    ``s' = s + 0.1 * clip(a, -1, 1) + N(0, 0.01^2 I)``, reward ``-||s - g||``,
    50 steps, no early termination. Positions are kept inside ``[-2, 2]^2`` so
    the reward is bounded by ``r_max``.
    """

    goal: tuple[float, float]
    horizon: int = 50
    step_size: float = 0.1
    noise_std: float = 0.01
    bound: float = 2.0
    gamma: float = 0.99
    name: str = "point-reach"

    state_dim = 2
    action_dim = 2
    action_low = -1.0
    action_high = 1.0

    @classmethod
    def from_seed(cls, seed: int, **kwargs) -> "PointReach":
        g = np.random.default_rng(np.random.SeedSequence([seed, 0x60A1])).uniform(-1, 1, size=2)
        return cls(goal=(float(g[0]), float(g[1])), **kwargs)

    @property
    def r_max(self) -> float:
        # farthest point of the box from a goal inside [-1, 1]^2
        return math.hypot(self.bound + 1.0, self.bound + 1.0)

    def reset(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(-1.0, 1.0, size=(n, 2))

    def reward(self, states: np.ndarray) -> np.ndarray:
        return -np.linalg.norm(states - np.asarray(self.goal), axis=-1)

    def step(self, states, actions, rng: np.random.Generator):
        """Vectorized transition; returns ``(next_states, rewards)``."""
        states = np.atleast_2d(states)
        actions = np.atleast_2d(actions)
        if not (np.all(np.isfinite(states)) and np.all(np.isfinite(actions))):
            raise NumericalError("non-finite state or action in PointReach.step")
        a = np.clip(actions, self.action_low, self.action_high)
        noise = self.noise_std * rng.standard_normal(states.shape)
        nxt = np.clip(states + self.step_size * a + noise, -self.bound, self.bound)
        return nxt, self.reward(states)


def rollout_continuous(env: PointReach, policy, n_episodes: int, rng: np.random.Generator,
                       deterministic: bool = False, horizon: int | None = None):
    """Run ``n_episodes`` episodes in lockstep.

    Returns ``(states, actions, rewards, next_states)`` with shapes
    ``(T, n, ...)``. Actions are stored after clipping to the action box,
    i.e. as executed by the environment.
    """
    horizon = env.horizon if horizon is None else horizon
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    s = env.reset(n_episodes, rng)
    S, A, R, S2 = [], [], [], []
    for _ in range(horizon):
        a = policy.sample(s, rng, deterministic=deterministic)
        if not np.all(np.isfinite(a)):
            raise NumericalError("policy produced a non-finite action")
        a = np.clip(a, env.action_low, env.action_high)
        s2, r = env.step(s, a, rng)
        S.append(s)
        A.append(a)
        R.append(r)
        S2.append(s2)
        s = s2
    return np.array(S), np.array(A), np.array(R), np.array(S2)


def rollout(world, policy, horizon: int, rng: np.random.Generator,
            deterministic: bool = False) -> Trajectory:
    """One trajectory in either kind of world."""
    if isinstance(world, TabularMDP):
        table = policy.table() if hasattr(policy, "table") else policy
        return rollout_tabular(world, table, horizon, rng)
    S, A, R, S2 = rollout_continuous(world, policy, 1, rng, deterministic, horizon)
    return Trajectory(S[:, 0], A[:, 0], R[:, 0], S2[:, 0], terminal=False)


class ProportionalController:
    """Noisy proportional controller ``a = clip(gain * (g - s)) + N(0, noise^2)``."""

    discrete = False

    def __init__(self, env: PointReach, gain: float = 1.0, noise_std: float = 0.3):
        self.env = env
        self.gain = gain
        self.noise_std = noise_std

    def mean(self, states):
        d = np.asarray(self.env.goal) - np.atleast_2d(states)
        return np.clip(self.gain * d, self.env.action_low, self.env.action_high)

    def sample(self, states, rng, deterministic=False):
        mu = self.mean(states)
        if deterministic:
            return mu
        return mu + self.noise_std * rng.standard_normal(mu.shape)

    def describe(self) -> str:
        return f"proportional(gain={self.gain}, noise_std={self.noise_std})"


# --- tabular worlds -----------------------------------------------------------

def grid_world(size: int = 4, slip: float = 0.2, gamma: float = 0.9) -> TabularMDP:
    """Slippery grid; the bottom-right cell pays 1 per step and the top-right -1."""
    n = size * size
    moves = [(-1, 0), (1, 0), (0, -1), (0, 1)]  # up, down, left, right
    P = np.zeros((n, 4, n))
    for s in range(n):
        row, col = divmod(s, size)
        for a in range(4):
            for b, (dr, dc) in enumerate(moves):
                p = 1.0 - slip if a == b else slip / 3.0
                r2 = min(max(row + dr, 0), size - 1)
                c2 = min(max(col + dc, 0), size - 1)
                P[s, a, r2 * size + c2] += p
    R = np.zeros((n, 4))
    R[n - 1, :] = 1.0
    R[size - 1, :] = -1.0
    d0 = np.zeros(n)
    d0[0] = 1.0
    return TabularMDP(R, P, d0, gamma, name="tabular-grid")


def bandit_world(rewards=(0.2, 0.5, 1.0), gamma: float = 0.9) -> TabularMDP:
    """One state, one action per arm; the arm's reward is paid every step."""
    r = np.asarray(rewards, dtype=np.float64)[None, :]
    P = np.ones((1, r.shape[1], 1))
    return TabularMDP(r, P, np.ones(1), gamma, name="tabular-bandit")


def seeded_random_world(seed: int, n_states: int = 8, n_actions: int = 4,
                        gamma: float = 0.9, branching: int = 3) -> TabularMDP:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7AB]))
    mdp = random_mdp(n_states, n_actions, gamma, rng, branching=branching,
                     reward_low=0.0, reward_high=1.0)
    return TabularMDP(mdp.reward, mdp.transition, mdp.initial_dist, gamma,
                      name="tabular-random")


def make_world(name: str, seed: int = 0):
    if name == "tabular-grid":
        return grid_world()
    if name == "tabular-random":
        return seeded_random_world(seed)
    if name == "tabular-bandit":
        return bandit_world()
    if name == "point-reach":
        return PointReach.from_seed(seed)
    raise ValueError(f"unknown world {name!r}; choose from {', '.join(WORLD_NAMES)}")


def mediocre_action(mdp: TabularMDP, quality: float) -> np.ndarray:
    """Per state, the action at the ``quality`` quantile of the optimal Q ranking."""
    Q = exact_action_values(mdp, optimal_policy(mdp))
    order = np.argsort(Q, axis=1, kind="stable")  # ascending
    rank = int(round(quality * (mdp.n_actions - 1)))
    return order[:, rank]


def behavior_table(mdp: TabularMDP, quality: float = 0.5, epsilon: float = 0.5) -> np.ndarray:
    """Epsilon-soft perturbation of a hand-built base policy.

    The grid world's base policy always moves right; other tabular worlds use
    the action ranked at ``quality`` under the optimal action values.
    """
    if not 0.0 <= quality <= 1.0:
        raise ValueError("quality must lie in [0, 1]")
    if mdp.name == "tabular-grid":
        base = np.full(mdp.n_states, 3)
    else:
        base = mediocre_action(mdp, quality)
    table = np.full((mdp.n_states, mdp.n_actions), epsilon / mdp.n_actions)
    table[np.arange(mdp.n_states), base] += 1.0 - epsilon
    return table


def behavior_policy(world, quality: float = 0.5):
    """Default data-collection policy for a world (a table or a controller)."""
    if isinstance(world, TabularMDP):
        return behavior_table(world, quality)
    # quality scales the controller gain; 0.5 is a sluggish controller
    return ProportionalController(world, gain=2.0 * quality, noise_std=0.3)
