"""Supervised fits that precede policy improvement: behavior cloning, SARSA Q and MC V.

Tabular datasets can be fitted with exact tables, in which case Q and V are
computed in closed form as the fixed points the stochastic updates converge
to. Continuous datasets use MLP heads trained by clipped Adam.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import DataError, OfflineDataset, sample_minibatch
from .mdp import NumericalError
from .models import ClippedAdam, GaussianMlpPolicy, ScalarMlp, TabularSoftmaxPolicy


@dataclass
class FitConfig:
    steps: int = 20_000
    batch_size: int = 256
    lr: float = 1e-4
    hidden: tuple = (64, 64)
    tau: float = 0.005          # Polyak rate of the SARSA target net
    gamma: float | None = None  # defaults to the dataset's gamma
    log_every: int = 100
    clip_norm: float | None = 0.5


# --- behavior cloning -----------------------------------------------------------

def bc_loss_and_grad(policy, states, actions):
    """Negative mean log-likelihood and its gradient."""
    n = len(states)
    loss = -float(np.mean(policy.log_prob(states, actions)))
    grads = policy.grad_log_prob(states, actions, np.full(n, -1.0 / n))
    return loss, grads


@dataclass
class BCResult:
    policy: object
    mean_log_likelihood: float
    curve: list = field(default_factory=list)  # (step, full-dataset mean log-likelihood)


def behavior_cloning(dataset: OfflineDataset, policy, config: FitConfig,
                     rng: np.random.Generator) -> BCResult:
    """Maximize the dataset log-likelihood of ``policy`` (modified in place) by minibatch ascent."""
    opt = ClippedAdam(policy.params, lr=config.lr, clip_norm=config.clip_norm)
    curve = []

    def full_ll():
        return float(np.mean(policy.log_prob(dataset.states, dataset.actions)))

    batch = min(config.batch_size, len(dataset))
    for step in range(config.steps):
        if config.log_every and step % config.log_every == 0:
            curve.append((step, full_ll()))
        mb = sample_minibatch(dataset, batch, rng)
        loss, grads = bc_loss_and_grad(policy, mb.states, mb.actions)
        if not math.isfinite(loss):
            raise NumericalError(f"behavior cloning diverged at step {step} (loss={loss})")
        opt.step(policy.params, grads)
        policy.post_update()
    ll = full_ll()
    curve.append((config.steps, ll))
    return BCResult(policy, ll, curve)


def empirical_action_frequencies(dataset: OfflineDataset, n_states: int, n_actions: int):
    """Per-state action counts normalized to frequencies (the tabular MLE); unvisited rows uniform."""
    counts = np.zeros((n_states, n_actions))
    np.add.at(counts, (dataset.states.astype(np.int64), dataset.actions.astype(np.int64)), 1.0)
    tot = counts.sum(axis=1, keepdims=True)
    return np.where(tot > 0, counts / np.maximum(tot, 1.0), 1.0 / n_actions)


# --- features -------------------------------------------------------------------

def _one_hot(idx, n):
    out = np.zeros((len(idx), n))
    out[np.arange(len(idx)), np.asarray(idx, dtype=np.int64)] = 1.0
    return out


@dataclass(frozen=True)
class Featurizer:
    """Maps states and state-action pairs to MLP inputs (one-hot for discrete spaces)."""

    discrete: bool
    state_dim: int
    action_dim: int

    @classmethod
    def for_dataset(cls, dataset: OfflineDataset):
        m = dataset.metadata
        if dataset.discrete:
            return cls(True, int(m["n_states"]), int(m["n_actions"]))
        return cls(False, int(m.get("state_dim", dataset.states.shape[1])),
                   int(m.get("action_dim", dataset.actions.shape[1])))

    def state(self, s):
        if self.discrete:
            return _one_hot(np.atleast_1d(s), self.state_dim)
        return np.atleast_2d(np.asarray(s, dtype=np.float64))

    def state_action(self, s, a):
        if self.discrete:
            return np.hstack([self.state(s), _one_hot(np.atleast_1d(a), self.action_dim)])
        return np.hstack([self.state(s), np.atleast_2d(np.asarray(a, dtype=np.float64))])

    @property
    def state_width(self):
        return self.state_dim

    @property
    def state_action_width(self):
        return self.state_dim + self.action_dim


# --- Q by SARSA ------------------------------------------------------------------

def sarsa_rows(dataset: OfflineDataset) -> np.ndarray:
    """Indices usable as SARSA targets: terminal steps and steps with an in-episode successor.

    A timeout-cut final step has no successor action in the data, so it is
    skipped; its state-action pair is still learned wherever it recurs.
    """
    lengths = dataset.episode_ends - dataset.episode_starts
    bad = (lengths == 1) & ~dataset.dones[dataset.episode_starts]
    if np.any(bad):
        ep = int(dataset.episode_ids[dataset.episode_starts[np.flatnonzero(bad)[0]]])
        raise DataError(f"episode {ep} has a single non-terminal transition; "
                        "SARSA needs the successor action")
    return np.flatnonzero(dataset.dones | ~dataset.is_last)


@dataclass
class FittedQ:
    kind: str                   # "table" or "mlp"
    table: np.ndarray | None = None
    model: ScalarMlp | None = None
    featurizer: Featurizer | None = None
    final_loss: float = float("nan")
    steps: int = 0
    uncovered_successors: int = 0

    def __call__(self, states, actions):
        if self.kind == "table":
            return self.table[np.asarray(states, dtype=np.int64), np.asarray(actions, dtype=np.int64)]
        return self.model(self.featurizer.state_action(states, actions))


def _fit_q_table(dataset, gamma, target_table):
    nS, nA = int(dataset.metadata["n_states"]), int(dataset.metadata["n_actions"])
    rows = np.arange(len(dataset)) if target_table is not None else sarsa_rows(dataset)
    s = dataset.states[rows].astype(np.int64)
    a = dataset.actions[rows].astype(np.int64)
    r = dataset.rewards[rows]
    live = ~dataset.dones[rows]
    pair = s * nA + a
    n = nS * nA
    counts = np.bincount(pair, minlength=n).astype(np.float64)
    covered = counts > 0
    # least-squares table: Q(s,a) = mean of (r + gamma * bootstrap) over rows at (s,a)
    M = np.zeros((n, n))
    if target_table is None:
        succ = rows + 1
        sp = dataset.states[succ[live]].astype(np.int64) * nA + dataset.actions[succ[live]].astype(np.int64)
        np.add.at(M, (pair[live], sp), 1.0)
    else:
        s2 = dataset.next_states[rows[live]].astype(np.int64)
        for b in range(nA):
            np.add.at(M, (pair[live], s2 * nA + b), target_table[s2, b])
    rbar = np.bincount(pair, weights=r, minlength=n)
    c = np.maximum(counts, 1.0)
    M /= c[:, None]
    rbar /= c
    # pairs never regressed on keep Q = 0; count how often they are bootstrapped from
    uncovered = int(np.count_nonzero(M[:, ~covered].sum(axis=0) > 0))
    idx = np.flatnonzero(covered)
    A = np.eye(len(idx)) - gamma * M[np.ix_(idx, idx)]
    q = np.zeros(n)
    q[idx] = np.linalg.solve(A, rbar[idx])
    Q = q.reshape(nS, nA)
    resid = Q.ravel()[idx] - (rbar[idx] + gamma * M[idx] @ q)
    return FittedQ("table", table=Q, final_loss=float(np.mean(resid ** 2)),
                   uncovered_successors=uncovered)


def q_loss_and_grad(model: ScalarMlp, x, targets):
    return model.loss_and_grad(x, targets)


class SarsaLearner:
    """Stateful SARSA fitter for an MLP Q head with a Polyak-averaged target.

    Kept alive across calls so the iterative variant can interleave a few Q
    steps with each policy step without resetting the optimizer or target.
    """

    def __init__(self, dataset: OfflineDataset, config: FitConfig, rng: np.random.Generator,
                 action_clip: float | None = None):
        self.dataset = dataset
        self.config = config
        self.gamma = config.gamma if config.gamma is not None else float(dataset.metadata["gamma"])
        self.feat = Featurizer.for_dataset(dataset)
        self.model = ScalarMlp(self.feat.state_action_width, config.hidden, "relu", rng)
        self.target = self.model.copy()
        self.opt = ClippedAdam(self.model.params, lr=config.lr, clip_norm=config.clip_norm)
        self.action_clip = action_clip
        self.steps = 0
        self.loss = float("nan")

    def train(self, n_steps: int, rng: np.random.Generator, target_policy=None) -> float:
        ds, cfg = self.dataset, self.config
        rows = np.arange(len(ds)) if target_policy is not None else sarsa_rows(ds)
        batch = min(cfg.batch_size, len(rows))
        for _ in range(n_steps):
            i = rows[rng.integers(0, len(rows), size=batch)]
            live = ~ds.dones[i]
            if target_policy is None:
                j = np.where(live, i + 1, i)  # terminal rows never read the successor
                s2, a2 = ds.states[j], ds.actions[j]
            else:
                s2 = ds.next_states[i]
                a2 = target_policy.sample(s2, rng)
                if self.action_clip is not None:
                    a2 = np.clip(a2, -self.action_clip, self.action_clip)
            boot = self.target(self.feat.state_action(s2, a2))
            y = ds.rewards[i] + self.gamma * live * boot
            x = self.feat.state_action(ds.states[i], ds.actions[i])
            loss, grads = self.model.loss_and_grad(x, y)
            if not math.isfinite(loss):
                raise NumericalError(f"Q fit diverged at step {self.steps}")
            self.opt.step(self.model.params, grads)
            for p, tp in zip(self.model.params, self.target.params):
                tp *= 1.0 - cfg.tau
                tp += cfg.tau * p
            self.steps += 1
            self.loss = loss
        return self.loss

    def fitted(self) -> FittedQ:
        return FittedQ("mlp", model=self.model.copy(), featurizer=self.feat,
                       final_loss=self.loss, steps=self.steps)


def fit_q_sarsa(dataset: OfflineDataset, config: FitConfig, rng: np.random.Generator,
                representation: str = "mlp", target_policy=None,
                action_clip: float | None = None) -> FittedQ:
    """Fit Q of the data-generating policy by SARSA.

    With ``target_policy`` the bootstrap action comes from that policy instead
    of the data, which evaluates the new policy on the logged transitions.
    """
    gamma = config.gamma if config.gamma is not None else float(dataset.metadata["gamma"])
    if representation == "table":
        if not dataset.discrete:
            raise ValueError("table representation needs a discrete dataset")
        tt = None if target_policy is None else target_policy.table()
        return _fit_q_table(dataset, gamma, tt)
    if representation != "mlp":
        raise ValueError(f"unknown representation {representation!r}")
    learner = SarsaLearner(dataset, config, rng, action_clip)
    learner.train(config.steps, rng, target_policy)
    return learner.fitted()


# --- V by Monte-Carlo regression -----------------------------------------------

@dataclass
class FittedV:
    kind: str
    table: np.ndarray | None = None
    model: ScalarMlp | None = None
    featurizer: Featurizer | None = None
    final_mse: float = float("nan")
    steps: int = 0

    def __call__(self, states):
        if self.kind == "table":
            return self.table[np.asarray(states, dtype=np.int64)]
        return self.model(self.featurizer.state(states))


def v_loss_and_grad(model: ScalarMlp, x, returns):
    return model.loss_and_grad(x, returns)


def fit_value(dataset: OfflineDataset, config: FitConfig, rng: np.random.Generator,
              representation: str = "mlp") -> FittedV:
    """Regress discounted returns-to-go on states (MSE)."""
    gamma = config.gamma if config.gamma is not None else float(dataset.metadata["gamma"])
    G = dataset.returns
    if G is None or dataset.metadata.get("_returns_gamma") != gamma:
        dataset.with_returns(gamma)
        G = dataset.returns
    if representation == "table":
        nS = int(dataset.metadata["n_states"])
        s = dataset.states.astype(np.int64)
        cnt = np.bincount(s, minlength=nS)
        V = np.bincount(s, weights=G, minlength=nS) / np.maximum(cnt, 1)
        return FittedV("table", table=V, final_mse=float(np.mean((V[s] - G) ** 2)))
    feat = Featurizer.for_dataset(dataset)
    model = ScalarMlp(feat.state_width, config.hidden, "relu", rng)
    opt = ClippedAdam(model.params, lr=config.lr, clip_norm=config.clip_norm)
    batch = min(config.batch_size, len(dataset))
    for step in range(config.steps):
        i = rng.integers(0, len(dataset), size=batch)
        loss, grads = model.loss_and_grad(feat.state(dataset.states[i]), G[i])
        if not math.isfinite(loss):
            raise NumericalError(f"V fit diverged at step {step}")
        opt.step(model.params, grads)
    mse = float(np.mean((model(feat.state(dataset.states)) - G) ** 2))
    return FittedV("mlp", model=model, featurizer=feat, final_mse=mse, steps=config.steps)


# --- advantages -----------------------------------------------------------------

def asymmetric_weight(A, omega: float):
    """Scale positive advantages by omega and negative ones by 1 - omega."""
    if not 0.0 < omega < 1.0:
        raise ValueError("omega must lie in (0, 1)")
    A = np.asarray(A, dtype=np.float64)
    return np.abs(omega - (A < 0)) * A


def normalize_advantages(adv, guard: float = 1e-8):
    adv = np.asarray(adv, dtype=np.float64)
    if adv.size < 2:
        raise ValueError("advantage normalization needs at least 2 samples")
    return (adv - adv.mean()) / (adv.std() + guard)


@dataclass
class AdvantageEstimator:
    q: object           # callable (states, actions) -> Q
    v: object           # callable states -> V
    omega: float = 0.9

    def __post_init__(self):
        if not 0.0 < self.omega < 1.0:
            raise ValueError("omega must lie in (0, 1)")

    def advantage(self, states, actions):
        A = np.asarray(self.q(states, actions), dtype=np.float64) - np.asarray(self.v(states))
        if not np.all(np.isfinite(A)):
            raise NumericalError("non-finite advantage estimate")
        return A

    def weighted(self, states, actions):
        return asymmetric_weight(self.advantage(states, actions), self.omega)

    def with_q(self, q) -> "AdvantageEstimator":
        return AdvantageEstimator(q, self.v, self.omega)


def exact_estimator(Q: np.ndarray, V: np.ndarray, omega: float = 0.9) -> AdvantageEstimator:
    """Estimator backed by given tables (e.g. the exact Q and V of a tabular world)."""
    return AdvantageEstimator(FittedQ("table", table=np.asarray(Q)),
                              FittedV("table", table=np.asarray(V)), omega)


def default_bc_policy(dataset: OfflineDataset, rng: np.random.Generator, hidden=(64, 64)):
    """Fresh policy of the right family for the dataset's action space."""
    m = dataset.metadata
    if dataset.discrete:
        return TabularSoftmaxPolicy.uniform(int(m["n_states"]), int(m["n_actions"]))
    return GaussianMlpPolicy(int(m["state_dim"]), int(m["action_dim"]), hidden, rng)
