"""Offline datasets: generation, return labels, minibatches and the text file format.

File layout: one header line ``#bppolab-dataset <json metadata>`` followed by
one tab-separated line per transition::

    episode  t  done  timeout  reward  state...  action...  next_state...

Floats are written with 17 significant digits so a save/load round trip is
bit-exact. ``done`` marks environment termination (no bootstrapping);
``timeout`` marks an episode cut by the horizon (bootstrapping allowed).
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .envs import PointReach, rollout_continuous
from .mdp import TabularMDP, sample_categorical

DATASET_FORMAT_VERSION = 1
HEADER_TAG = "#bppolab-dataset"


class DataError(ValueError):
    """Malformed, inconsistent or unusable offline data."""


class EmptyDatasetError(DataError):
    pass


def _fmt(x) -> str:
    return format(float(x), ".17g")


@dataclass(frozen=True)
class Minibatch:
    indices: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    returns: np.ndarray | None


@dataclass
class OfflineDataset:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    timeouts: np.ndarray
    episode_ids: np.ndarray
    timesteps: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.rewards)
        if n == 0:
            raise EmptyDatasetError("dataset has no transitions")
        for name in ("states", "actions", "next_states", "dones", "timeouts",
                     "episode_ids", "timesteps"):
            if len(getattr(self, name)) != n:
                raise DataError(f"field {name!r} has length {len(getattr(self, name))} != {n}")
        self.dones = np.asarray(self.dones, dtype=bool)
        self.timeouts = np.asarray(self.timeouts, dtype=bool)
        self._validate()
        for name in ("states", "actions", "rewards", "next_states", "dones", "timeouts",
                     "episode_ids", "timesteps"):
            getattr(self, name).setflags(write=False)

    # --- structure ---------------------------------------------------------

    @property
    def discrete(self) -> bool:
        return bool(self.metadata.get("discrete", self.states.ndim == 1))

    def __len__(self):
        return len(self.rewards)

    @property
    def n_episodes(self) -> int:
        return len(self.episode_starts)

    @property
    def episode_starts(self) -> np.ndarray:
        ep = self.episode_ids
        return np.flatnonzero(np.r_[True, ep[1:] != ep[:-1]])

    @property
    def episode_ends(self) -> np.ndarray:
        """Index one past the last transition of each episode."""
        return np.r_[self.episode_starts[1:], len(self)]

    @property
    def is_last(self) -> np.ndarray:
        ep = self.episode_ids
        return np.r_[ep[1:] != ep[:-1], True]

    @property
    def successor_index(self) -> np.ndarray:
        """Index of the following transition in the same episode, or -1."""
        idx = np.arange(len(self)) + 1
        return np.where(self.is_last, -1, idx)

    def _validate(self):
        ep, t = self.episode_ids, self.timesteps
        starts = np.flatnonzero(np.r_[True, ep[1:] != ep[:-1]])
        if len(np.unique(ep)) != len(starts):
            raise DataError("episodes are not contiguous")
        last = np.r_[ep[1:] != ep[:-1], True]
        same = ~last[:-1]
        if np.any(t[1:][same] <= t[:-1][same]):
            raise DataError("timesteps must strictly increase within an episode")
        if np.any(self.dones & ~last):
            raise DataError("done flag set before the end of an episode")
        if np.any(self.dones & self.timeouts):
            raise DataError("a transition cannot be both terminal and a timeout")
        if np.any(last & ~(self.dones | self.timeouts)):
            bad = int(np.flatnonzero(last & ~(self.dones | self.timeouts))[0])
            raise DataError(f"record {bad + 1}: episode {int(ep[bad])} is truncated "
                            "(last transition has neither done nor timeout)")
        nxt = self.next_states[:-1][same]
        cur = self.states[1:][same]
        if nxt.size and np.max(np.abs(np.asarray(nxt, float) - np.asarray(cur, float))) > 1e-12:
            raise DataError("next_state does not match the following state")

    # --- access ------------------------------------------------------------

    def subset(self, idx) -> Minibatch:
        idx = np.asarray(idx)
        returns = self.metadata.get("_returns")
        return Minibatch(idx, self.states[idx], self.actions[idx], self.rewards[idx],
                         self.next_states[idx], self.dones[idx],
                         None if returns is None else returns[idx])

    def with_returns(self, gamma: float) -> "OfflineDataset":
        """Attach Monte-Carlo return labels (kept out of the serialized metadata)."""
        self.metadata["_returns"] = monte_carlo_returns(self, gamma)
        self.metadata["_returns_gamma"] = gamma
        return self

    @property
    def returns(self) -> np.ndarray | None:
        return self.metadata.get("_returns")

    def state_visit_counts(self, n_states: int) -> np.ndarray:
        return np.bincount(self.states.astype(np.int64), minlength=n_states)

    def state_action_occupancy(self, n_states: int, n_actions: int, gamma: float) -> np.ndarray:
        """Empirical discounted occupancy: mean over episodes of sum_t gamma^t 1[s_t, a_t]."""
        rho = np.zeros((n_states, n_actions))
        t_in_ep = np.arange(len(self)) - np.repeat(self.episode_starts,
                                                   self.episode_ends - self.episode_starts)
        np.add.at(rho, (self.states.astype(np.int64), self.actions.astype(np.int64)),
                  gamma ** t_in_ep)
        return rho / self.n_episodes


# --- generation ---------------------------------------------------------------

def _describe(policy) -> str:
    if hasattr(policy, "describe"):
        return policy.describe()
    if isinstance(policy, np.ndarray):
        return "table:" + ",".join(_fmt(x) for x in policy.ravel())
    return type(policy).__name__


def _created_stamp() -> str:
    # reproducible by default; SOURCE_DATE_EPOCH follows the reproducible-builds convention
    return os.environ.get("SOURCE_DATE_EPOCH", "0")


def generate_dataset(world, behavior, n_episodes: int, horizon: int,
                     rng: np.random.Generator, seed: int | None = None,
                     env_name: str | None = None) -> OfflineDataset:
    """Collect ``n_episodes`` episodes of ``horizon`` steps with ``behavior``."""
    if n_episodes < 1:
        raise EmptyDatasetError("n_episodes must be >= 1; estimators need data")
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if isinstance(world, TabularMDP):
        table = behavior.table() if hasattr(behavior, "table") else np.asarray(behavior)
        s = sample_categorical(np.broadcast_to(world.initial_dist,
                                               (n_episodes, world.n_states)), rng)
        S, A, R, S2 = [], [], [], []
        for _ in range(horizon):
            a = sample_categorical(table[s], rng)
            s2 = sample_categorical(world.transition[s, a], rng)
            S.append(s)
            A.append(a)
            R.append(world.reward[s, a])
            S2.append(s2)
            s = s2
        S, A, R, S2 = (np.array(x).T for x in (S, A, R, S2))  # (episode, t)
        gamma = world.gamma
        meta_dims = {"discrete": True, "n_states": world.n_states, "n_actions": world.n_actions}
    elif isinstance(world, PointReach):
        S, A, R, S2 = rollout_continuous(world, behavior, n_episodes, rng, horizon=horizon)
        S, A, S2 = (np.swapaxes(x, 0, 1) for x in (S, A, S2))
        R = R.T
        gamma = world.gamma
        meta_dims = {"discrete": False, "state_dim": world.state_dim,
                     "action_dim": world.action_dim}
    else:
        raise TypeError(f"unsupported world type {type(world).__name__}")
    n = n_episodes * horizon
    flat = lambda x: x.reshape(n, *x.shape[2:])
    timeouts = np.zeros((n_episodes, horizon), dtype=bool)
    timeouts[:, -1] = True
    meta = {
        "format_version": DATASET_FORMAT_VERSION,
        "env": env_name or getattr(world, "name", "unknown"),
        "behavior": _describe(behavior),
        "seed": seed,
        "gamma": gamma,
        "created": _created_stamp(),
        **meta_dims,
    }
    return OfflineDataset(
        states=flat(S), actions=flat(A), rewards=flat(R).astype(np.float64),
        next_states=flat(S2), dones=np.zeros(n, dtype=bool), timeouts=timeouts.ravel(),
        episode_ids=np.repeat(np.arange(n_episodes), horizon),
        timesteps=np.tile(np.arange(horizon), n_episodes), metadata=meta)


def monte_carlo_returns(dataset: OfflineDataset, gamma: float) -> np.ndarray:
    """Discounted return-to-go G_t = r_t + gamma * G_{t+1}, restarted at each episode."""
    G = np.zeros(len(dataset))
    r = dataset.rewards
    last = dataset.is_last
    acc = 0.0
    for i in range(len(dataset) - 1, -1, -1):
        acc = r[i] if last[i] else r[i] + gamma * acc
        G[i] = acc
    return G


def sample_minibatch(dataset: OfflineDataset, size: int, rng: np.random.Generator) -> Minibatch:
    """Uniform draw with replacement."""
    if not 1 <= size:
        raise ValueError("minibatch size must be >= 1")
    if size > len(dataset):
        raise ValueError(f"minibatch size {size} exceeds dataset size {len(dataset)}")
    return dataset.subset(rng.integers(0, len(dataset), size=size))


# --- serialization ------------------------------------------------------------

def _vec(x, discrete):
    if discrete:
        return [str(int(x))]
    return [_fmt(v) for v in np.atleast_1d(x)]


def dumps_dataset(dataset: OfflineDataset) -> str:
    meta = {k: v for k, v in dataset.metadata.items() if not k.startswith("_")}
    lines = [f"{HEADER_TAG} {json.dumps(meta, sort_keys=True)}"]
    disc = dataset.discrete
    for i in range(len(dataset)):
        fields = [str(int(dataset.episode_ids[i])), str(int(dataset.timesteps[i])),
                  str(int(dataset.dones[i])), str(int(dataset.timeouts[i])),
                  _fmt(dataset.rewards[i])]
        fields += _vec(dataset.states[i], disc)
        fields += _vec(dataset.actions[i], disc)
        fields += _vec(dataset.next_states[i], disc)
        lines.append("\t".join(fields))
    return "\n".join(lines) + "\n"


def loads_dataset(text: str) -> OfflineDataset:
    lines = text.splitlines()
    if not lines or not lines[0].startswith(HEADER_TAG + " "):
        raise DataError("line 1: missing dataset header")
    try:
        meta = json.loads(lines[0][len(HEADER_TAG) + 1:])
    except json.JSONDecodeError as exc:
        raise DataError(f"line 1: bad header json: {exc}") from exc
    version = meta.get("format_version")
    if version != DATASET_FORMAT_VERSION:
        raise DataError(f"dataset format version {version} != {DATASET_FORMAT_VERSION}")
    disc = bool(meta.get("discrete"))
    ds = 1 if disc else int(meta["state_dim"])
    da = 1 if disc else int(meta["action_dim"])
    width = 5 + 2 * ds + da
    rows = [ln for ln in enumerate(lines[1:], start=2) if ln[1].strip()]
    if not rows:
        raise EmptyDatasetError("dataset file has a header but no transitions")
    ep, t, done, to, rew, S, A, S2 = ([] for _ in range(8))
    num = int if disc else float
    for lineno, line in rows:
        parts = line.split("\t")
        if len(parts) != width:
            raise DataError(f"line {lineno}: expected {width} fields, got {len(parts)}")
        try:
            ep.append(int(parts[0]))
            t.append(int(parts[1]))
            done.append(parts[2] == "1")
            to.append(parts[3] == "1")
            rew.append(float(parts[4]))
            s = [num(v) for v in parts[5:5 + ds]]
            a = [num(v) for v in parts[5 + ds:5 + ds + da]]
            s2 = [num(v) for v in parts[5 + ds + da:]]
        except ValueError as exc:
            raise DataError(f"line {lineno}: {exc}") from exc
        S.append(s[0] if disc else s)
        A.append(a[0] if disc else a)
        S2.append(s2[0] if disc else s2)
    try:
        return OfflineDataset(np.array(S), np.array(A), np.array(rew), np.array(S2),
                              np.array(done), np.array(to), np.array(ep), np.array(t), meta)
    except DataError as exc:
        raise DataError(f"inconsistent dataset: {exc}") from exc


def save_dataset(dataset: OfflineDataset, path) -> None:
    Path(path).write_text(dumps_dataset(dataset))


def load_dataset(path) -> OfflineDataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    return loads_dataset(path.read_text())
