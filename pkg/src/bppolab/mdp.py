"""Finite discounted MDPs solved exactly by linear algebra.

Every quantity here (values, occupancies, returns, advantages) comes from a
direct linear solve, so identities between them hold to rounding error.
Policies are plain ``(n_states, n_actions)`` probability tables; any object
with a ``table()`` method returning such an array is accepted as well.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PROB_ATOL = 1e-12
MDP_FORMAT_VERSION = 1


class NumericalError(RuntimeError):
    """Raised when a computation produces non-finite or inconsistent numbers."""


def _frozen(x, dtype=np.float64):
    arr = np.array(x, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class TabularMDP:
    reward: np.ndarray  # r[s, a]
    transition: np.ndarray  # p[s, a, s']
    initial_dist: np.ndarray  # d0[s]
    gamma: float
    horizon: int | None = None
    name: str = field(default="tabular", compare=False)

    def __post_init__(self):
        object.__setattr__(self, "reward", _frozen(self.reward))
        object.__setattr__(self, "transition", _frozen(self.transition))
        object.__setattr__(self, "initial_dist", _frozen(self.initial_dist))
        S, A = self.reward.shape
        if self.transition.shape != (S, A, S):
            raise ValueError(f"transition shape {self.transition.shape} != {(S, A, S)}")
        if self.initial_dist.shape != (S,):
            raise ValueError(f"initial_dist shape {self.initial_dist.shape} != {(S,)}")
        if not np.all(np.isfinite(self.reward)):
            raise ValueError("reward table has non-finite entries")
        if np.any(self.transition < 0) or np.any(np.abs(self.transition.sum(-1) - 1) > PROB_ATOL):
            raise ValueError("each transition row must be a probability vector")
        if np.any(self.initial_dist < 0) or abs(self.initial_dist.sum() - 1) > PROB_ATOL:
            raise ValueError("initial_dist must be a probability vector")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.horizon is not None and self.horizon < 1:
            raise ValueError("horizon must be a positive integer")

    @property
    def n_states(self) -> int:
        return self.reward.shape[0]

    @property
    def n_actions(self) -> int:
        return self.reward.shape[1]

    @property
    def r_max(self) -> float:
        return float(np.abs(self.reward).max())

    def scaled(self, c: float) -> "TabularMDP":
        return TabularMDP(c * self.reward, self.transition, self.initial_dist,
                          self.gamma, self.horizon, self.name)


def policy_table(pi, mdp: TabularMDP | None = None) -> np.ndarray:
    """Return the probability table of ``pi`` after validating it."""
    table = pi.table() if hasattr(pi, "table") else np.asarray(pi, dtype=np.float64)
    if table.ndim != 2:
        raise ValueError("a tabular policy is a 2-D (state, action) table")
    if mdp is not None and table.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError(f"policy shape {table.shape} does not match MDP "
                         f"{(mdp.n_states, mdp.n_actions)}")
    if np.any(table < 0) or np.any(np.abs(table.sum(1) - 1) > PROB_ATOL):
        raise ValueError("policy rows must be probability vectors")
    return table


def induced_chain(mdp: TabularMDP, pi):
    """State-to-state transition matrix and expected reward under ``pi``."""
    table = policy_table(pi, mdp)
    P_pi = np.einsum("sa,sat->st", table, mdp.transition)
    r_pi = np.einsum("sa,sa->s", table, mdp.reward)
    return P_pi, r_pi


def _solve(matrix, rhs):
    try:
        x = np.linalg.solve(matrix, rhs)
    except np.linalg.LinAlgError as exc:  # only reachable with gamma >= 1
        raise NumericalError(f"singular Bellman system: {exc}") from exc
    if not np.all(np.isfinite(x)):
        raise NumericalError("Bellman solve produced non-finite values")
    return x


def exact_state_values(mdp: TabularMDP, pi) -> np.ndarray:
    """V_pi from (I - gamma P_pi) V = r_pi."""
    P_pi, r_pi = induced_chain(mdp, pi)
    return _solve(np.eye(mdp.n_states) - mdp.gamma * P_pi, r_pi)


def exact_action_values(mdp: TabularMDP, pi) -> np.ndarray:
    V = exact_state_values(mdp, pi)
    return mdp.reward + mdp.gamma * mdp.transition @ V


def exact_advantage(mdp: TabularMDP, pi) -> np.ndarray:
    V = exact_state_values(mdp, pi)
    Q = mdp.reward + mdp.gamma * mdp.transition @ V
    return Q - V[:, None]


def visitation_frequencies(mdp: TabularMDP, pi) -> np.ndarray:
    """Discounted unnormalized occupancy rho = sum_t gamma^t P(s_t = s).

    Solves rho = d0 + gamma P_pi^T rho; the result sums to 1 / (1 - gamma).
    """
    P_pi, _ = induced_chain(mdp, pi)
    return _solve(np.eye(mdp.n_states) - mdp.gamma * P_pi.T, mdp.initial_dist)


def exact_return(mdp: TabularMDP, pi) -> float:
    return float(mdp.initial_dist @ exact_state_values(mdp, pi))


def performance_difference(mdp: TabularMDP, pi_new, pi_old) -> tuple[float, float]:
    """Return ``(J(pi_new) - J(pi_old), E_{rho_new, pi_new}[A_old])``.

    The two numbers are equal by the performance difference identity; callers
    compare them to certify it.
    """
    new = policy_table(pi_new, mdp)
    direct = exact_return(mdp, new) - exact_return(mdp, pi_old)
    rho_new = visitation_frequencies(mdp, new)
    adv_old = exact_advantage(mdp, pi_old)
    advantage_form = float(rho_new @ np.einsum("sa,sa->s", new, adv_old))
    return direct, advantage_form


def occupancy_expectation(rho: np.ndarray, per_state: np.ndarray) -> float:
    """Unnormalized expectation sum_s rho(s) f(s), the convention used by every bound."""
    return float(np.dot(rho, per_state))


# --- total variation --------------------------------------------------------

def tv_divergence(pi_a, pi_b, s: int | None = None):
    """Total variation between two discrete action distributions.

    With policy tables and ``s=None`` the per-state vector is returned; with a
    state index (or two 1-D distributions) a scalar.
    """
    a = pi_a.table() if hasattr(pi_a, "table") else np.asarray(pi_a, dtype=np.float64)
    b = pi_b.table() if hasattr(pi_b, "table") else np.asarray(pi_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"distribution shapes differ: {a.shape} vs {b.shape}")
    if s is not None:
        a, b = a[s], b[s]
    tv = 0.5 * np.abs(a - b).sum(axis=-1)
    return float(tv) if np.ndim(tv) == 0 else tv


_GL_NODES = 129


def gaussian_tv_divergence(mean_a, std_a, mean_b, std_b, n_nodes: int = _GL_NODES) -> float:
    """TV between two diagonal Gaussians by tensor-product Gauss-Legendre quadrature.

    Each dimension is integrated over the midpoint of the means +- (6 pooled
    standard deviations + half the mean gap).
    """
    mean_a, std_a, mean_b, std_b = (np.atleast_1d(np.asarray(x, dtype=np.float64))
                                    for x in (mean_a, std_a, mean_b, std_b))
    d = mean_a.shape[0]
    if d > 3:
        raise ValueError("tensor-product quadrature is limited to action_dim <= 3")
    nodes, weights = np.polynomial.legendre.leggauss(n_nodes)
    pooled = np.sqrt(0.5 * (std_a ** 2 + std_b ** 2))
    center = 0.5 * (mean_a + mean_b)
    half = 6.0 * pooled + 0.5 * np.abs(mean_a - mean_b)
    axes = [center[i] + half[i] * nodes for i in range(d)]
    axis_w = [half[i] * weights for i in range(d)]
    grids = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=-1)
    w = np.ones(pts.shape[0])
    for wi in np.meshgrid(*axis_w, indexing="ij"):
        w = w * wi.ravel()

    def density(mu, sd):
        z = (pts - mu) / sd
        return np.exp(-0.5 * (z ** 2).sum(-1) - np.log(sd).sum() - 0.5 * d * math.log(2 * math.pi))

    return float(0.5 * np.dot(w, np.abs(density(mean_a, std_a) - density(mean_b, std_b))))


def dataset_tv_divergence(pi, s_t: int, a_t: int) -> float:
    """Divergence between a logged action and a discrete policy, 0.5 * (1 - pi(a_t|s_t)).

    This is the per-transition dataset mismatch used by the offline bounds. It
    is defined for discrete policies only; for densities it has no meaning.
    """
    table = policy_table(pi)
    return 0.5 * (1.0 - float(table[s_t, a_t]))


# --- sampling ---------------------------------------------------------------

def sample_categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF draw from each row of ``probs`` (one uniform per row)."""
    probs = np.atleast_2d(probs)
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[0])[:, None] * cdf[:, -1:]
    idx = (u >= cdf).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


@dataclass(frozen=True)
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminal: bool  # episode ended by the environment, not by the horizon

    def __len__(self):
        return len(self.rewards)

    def discounted_return(self, gamma: float) -> float:
        return float(np.dot(gamma ** np.arange(len(self)), self.rewards))


def rollout_tabular(mdp: TabularMDP, pi, horizon: int, rng: np.random.Generator) -> Trajectory:
    """Sample one trajectory of exactly ``horizon`` steps (tabular worlds never terminate)."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    table = policy_table(pi, mdp)
    s = int(sample_categorical(mdp.initial_dist, rng)[0])
    states, actions, rewards, nexts = [], [], [], []
    for _ in range(horizon):
        a = int(sample_categorical(table[s], rng)[0])
        s2 = int(sample_categorical(mdp.transition[s, a], rng)[0])
        states.append(s)
        actions.append(a)
        rewards.append(mdp.reward[s, a])
        nexts.append(s2)
        s = s2
    return Trajectory(np.array(states), np.array(actions), np.array(rewards),
                      np.array(nexts), terminal=False)


def rollout_returns_tabular(mdp: TabularMDP, pi, n_episodes: int, horizon: int,
                            rng: np.random.Generator) -> np.ndarray:
    """Discounted returns of ``n_episodes`` parallel rollouts (vectorized over episodes)."""
    table = policy_table(pi, mdp)
    s = sample_categorical(np.broadcast_to(mdp.initial_dist, (n_episodes, mdp.n_states)), rng)
    total = np.zeros(n_episodes)
    disc = 1.0
    for _ in range(horizon):
        a = sample_categorical(table[s], rng)
        total += disc * mdp.reward[s, a]
        s = sample_categorical(mdp.transition[s, a], rng)
        disc *= mdp.gamma
    return total


# --- construction -----------------------------------------------------------

def random_mdp(n_states: int, n_actions: int, gamma: float, rng: np.random.Generator,
               branching: int | None = None, reward_low: float = -1.0,
               reward_high: float = 1.0, concentration: float = 1.0) -> TabularMDP:
    """Garnet-style random MDP: each (s, a) reaches ``branching`` successors."""
    branching = n_states if branching is None else branching
    P = np.zeros((n_states, n_actions, n_states))
    for s in range(n_states):
        for a in range(n_actions):
            succ = rng.choice(n_states, size=branching, replace=False)
            P[s, a, succ] = rng.dirichlet(np.full(branching, concentration))
    P /= P.sum(-1, keepdims=True)
    r = rng.uniform(reward_low, reward_high, size=(n_states, n_actions))
    d0 = rng.dirichlet(np.ones(n_states))
    return TabularMDP(r, P, d0, gamma, name="random")


def random_policy(n_states: int, n_actions: int, rng: np.random.Generator,
                  concentration: float = 1.0) -> np.ndarray:
    return rng.dirichlet(np.full(n_actions, concentration), size=n_states)


def optimal_policy(mdp: TabularMDP, tol: float = 1e-12, max_iter: int = 10_000) -> np.ndarray:
    """Deterministic optimal policy by policy iteration with exact evaluation."""
    pi = np.zeros((mdp.n_states, mdp.n_actions))
    pi[:, 0] = 1.0
    for _ in range(max_iter):
        Q = exact_action_values(mdp, pi)
        best = Q.argmax(1)
        current = pi.argmax(1)
        # keep the current action on ties to guarantee termination
        keep = Q[np.arange(mdp.n_states), current] >= Q.max(1) - tol
        best = np.where(keep, current, best)
        if np.array_equal(best, current):
            return pi
        pi = np.eye(mdp.n_actions)[best]
    raise NumericalError("policy iteration did not converge")


# --- text serialization -----------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def dumps_mdp(mdp: TabularMDP) -> str:
    lines = [
        "# bppolab tabular MDP",
        f"format_version {MDP_FORMAT_VERSION}",
        f"name {mdp.name}",
        f"n_states {mdp.n_states}",
        f"n_actions {mdp.n_actions}",
        f"gamma {_fmt(mdp.gamma)}",
        f"horizon {mdp.horizon if mdp.horizon is not None else 'none'}",
        "initial_dist " + " ".join(_fmt(x) for x in mdp.initial_dist),
    ]
    for s in range(mdp.n_states):
        lines.append(f"reward {s} : " + " ".join(_fmt(x) for x in mdp.reward[s]))
    for s in range(mdp.n_states):
        for a in range(mdp.n_actions):
            lines.append(f"transition {s} {a} : "
                         + " ".join(_fmt(x) for x in mdp.transition[s, a]))
    return "\n".join(lines) + "\n"


def loads_mdp(text: str) -> TabularMDP:
    header: dict[str, str] = {}
    rewards: dict[int, list[float]] = {}
    trans: dict[tuple[int, int], list[float]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, _, rest = line.partition(" ")
        try:
            if key == "reward":
                idx, _, vals = rest.partition(":")
                rewards[int(idx)] = [float(v) for v in vals.split()]
            elif key == "transition":
                idx, _, vals = rest.partition(":")
                s, a = (int(v) for v in idx.split())
                trans[(s, a)] = [float(v) for v in vals.split()]
            else:
                header[key] = rest.strip()
        except ValueError as exc:
            raise ValueError(f"line {lineno}: cannot parse {raw!r}") from exc
    version = int(header.get("format_version", -1))
    if version != MDP_FORMAT_VERSION:
        raise ValueError(f"unsupported MDP format version {version}")
    S, A = int(header["n_states"]), int(header["n_actions"])
    r = np.array([rewards[s] for s in range(S)])
    P = np.array([[trans[(s, a)] for a in range(A)] for s in range(S)])
    d0 = np.array([float(v) for v in header["initial_dist"].split()])
    horizon = None if header.get("horizon", "none") == "none" else int(header["horizon"])
    return TabularMDP(r, P, d0, float(header["gamma"]), horizon, header.get("name", "tabular"))


def save_mdp(mdp: TabularMDP, path) -> None:
    Path(path).write_text(dumps_mdp(mdp))


def load_mdp(path) -> TabularMDP:
    return loads_mdp(Path(path).read_text())
