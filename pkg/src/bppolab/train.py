"""Behavior proximal policy optimization: clipped surrogate, clip decay and the accept gate."""
from __future__ import annotations

import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import OfflineDataset
from .envs import PointReach, rollout_continuous
from .estimators import (AdvantageEstimator, FitConfig, FittedQ, SarsaLearner,
                         asymmetric_weight, fit_q_sarsa, normalize_advantages)
from .mdp import NumericalError, TabularMDP, exact_return
from .models import ClippedAdam

VARIANTS = ("replacement", "iterative", "onestep")
MAX_DROP_FRACTION = 0.01
EVAL_SEED_SALT = 0xE7A1
RATIO_SEED_SALT = 0x4A710


@dataclass
class TrainConfig:
    eps0: float = 0.25
    sigma: float = 0.96          # clip-ratio decay
    decay_steps: int = 200
    omega: float = 0.9
    steps: int = 1000
    batch_size: int = 512
    actions_per_state: int = 1
    lr: float = 1e-4
    lr_decay: float = 0.96
    clip_norm: float = 0.5
    variant: str = "replacement"
    q_refit_steps: int = 5       # iterative variant: Q steps per policy step
    eval_episodes: int = 10
    eval_deterministic: bool = True
    ratio_samples: int = 1024
    action_clip: float | None = None
    seed: int = 0

    def __post_init__(self):
        if not self.eps0 > 0:
            raise ValueError("eps0 must be positive")
        if not 0.0 < self.sigma <= 1.0:
            raise ValueError("sigma must lie in (0, 1]")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.actions_per_state < 1:
            raise ValueError("actions_per_state must be >= 1")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if not 0.0 < self.omega < 1.0:
            raise ValueError("omega must lie in (0, 1)")


def clip_ratio_schedule(eps0: float, sigma: float, i: int, decay_steps: int = 200) -> float:
    if i < 0:
        raise ValueError("step index must be >= 0")
    return eps0 * sigma ** min(i, decay_steps)


# --- surrogate --------------------------------------------------------------------

@dataclass
class LossInfo:
    loss: float
    n_used: int
    n_dropped: int
    clipped_fraction: float


def surrogate_terms(ratio, adv, eps):
    """Per-sample ``min(ratio * A, clip(ratio, 1 - 2 eps, 1 + 2 eps) * A)``."""
    clipped = np.clip(ratio, 1.0 - 2.0 * eps, 1.0 + 2.0 * eps)
    return np.minimum(ratio * adv, clipped * adv)


def bppo_loss(pi, logp_old, states, actions, adv, eps: float):
    """Negative clipped surrogate and its gradient w.r.t. ``pi``'s parameters.

    ``logp_old`` holds the frozen log-probabilities of the snapshot policy.
    Samples with a non-finite ratio are dropped; more than 1% dropped aborts.
    """
    adv = np.asarray(adv, dtype=np.float64)
    with np.errstate(over="ignore", invalid="ignore"):
        ratio = np.exp(pi.log_prob(states, actions) - np.asarray(logp_old))
    ok = np.isfinite(ratio)
    n_drop = int(np.count_nonzero(~ok))
    if n_drop > MAX_DROP_FRACTION * len(ratio):
        raise NumericalError(f"{n_drop}/{len(ratio)} importance ratios are non-finite")
    if n_drop:
        states, actions, ratio, adv = states[ok], actions[ok], ratio[ok], adv[ok]
    n = len(ratio)
    unclipped = ratio * adv
    obj = surrogate_terms(ratio, adv, eps)
    # the ratio branch carries the gradient wherever it attains the min
    active = unclipped <= obj
    weights = np.where(active, -unclipped / n, 0.0)
    grads = pi.grad_log_prob(states, actions, weights)
    loss = -float(np.mean(obj))
    return loss, grads, LossInfo(loss, n, n_drop, float(np.mean(~active)))


def sample_loss_batch(dataset: OfflineDataset, pi_k, estimator: AdvantageEstimator,
                      config: TrainConfig, rng: np.random.Generator):
    """States uniform from the data, ``M`` actions per state from ``pi_k``, normalized weighted advantages."""
    idx = rng.integers(0, len(dataset), size=config.batch_size)
    states = np.repeat(dataset.states[idx], config.actions_per_state, axis=0)
    actions = pi_k.sample(states, rng)
    q_actions = actions
    if config.action_clip is not None:
        q_actions = np.clip(actions, -config.action_clip, config.action_clip)
    adv = normalize_advantages(asymmetric_weight(estimator.advantage(states, q_actions),
                                                 estimator.omega))
    return states, actions, adv


# --- evaluation ---------------------------------------------------------------------

@dataclass(frozen=True)
class EvalResult:
    mean: float
    se: float
    returns: tuple = ()


def evaluate_policy(policy, world, n_episodes: int = 10, rng: np.random.Generator | None = None,
                    deterministic: bool = True) -> EvalResult:
    """Exact return on tabular worlds; mean discounted rollout return otherwise."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    if isinstance(world, TabularMDP):
        table = policy.table() if hasattr(policy, "table") else np.asarray(policy)
        return EvalResult(exact_return(world, table), 0.0)
    if not isinstance(world, PointReach):
        raise TypeError(f"cannot evaluate on {type(world).__name__}")
    if rng is None:
        raise ValueError("continuous evaluation needs an rng")
    _, _, R, _ = rollout_continuous(world, policy, n_episodes, rng, deterministic=deterministic)
    disc = world.gamma ** np.arange(R.shape[0])
    rets = disc @ R
    se = float(rets.std(ddof=1) / math.sqrt(n_episodes)) if n_episodes > 1 else 0.0
    return EvalResult(float(rets.mean()), se, tuple(float(x) for x in rets))


def ratio_trace(pi_k, behavior, dataset: OfflineDataset, rng: np.random.Generator,
                eps: float, n_samples: int | None = None) -> dict:
    """Summary of pi_k(a|s) / pi_beta(a|s) for data states and a ~ pi_beta."""
    if n_samples is None or n_samples >= len(dataset):
        states = dataset.states
    else:
        states = dataset.states[rng.integers(0, len(dataset), size=n_samples)]
    actions = behavior.sample(states, rng)
    with np.errstate(over="ignore"):
        ratio = np.exp(pi_k.log_prob(states, actions) - behavior.log_prob(states, actions))
    lo, hi = 1.0 - 2.0 * eps, 1.0 + 2.0 * eps
    return {"mean_abs_dev": float(np.mean(np.abs(ratio - 1.0))),
            "in_band": float(np.mean((ratio >= lo) & (ratio <= hi))),
            "ratios": ratio}


def band_fraction(ratios, eps: float, slack: float = 0.0) -> float:
    r = np.asarray(ratios)
    return float(np.mean((r >= 1.0 - 2.0 * eps - slack) & (r <= 1.0 + 2.0 * eps + slack)))


# --- training loop ---------------------------------------------------------------------

TRACE_COLUMNS = ("step", "eps", "lr", "loss", "J", "J_best", "accepted", "k", "anchor",
                 "grad_norm", "clipped_norm", "clip_frac", "dropped",
                 "ratio_mean_abs_dev", "ratio_in_band")


@dataclass
class ImprovementTrace:
    variant: str
    records: list = field(default_factory=list)
    accepted_J: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)   # pi_0 ... pi_K
    final_policy: object = None

    @property
    def final_J(self) -> float:
        if self.variant == "onestep":
            return self.records[-1]["J"] if self.records else self.accepted_J[0]
        return self.accepted_J[-1]

    def column(self, name):
        return np.array([r[name] for r in self.records])

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(TRACE_COLUMNS) + "\n")
        for r in self.records:
            buf.write(",".join(_cell(r[c]) for c in TRACE_COLUMNS) + "\n")
        return buf.getvalue()


def _cell(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def _substream(seed: int, salt: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, salt]))


def train_bppo(dataset: OfflineDataset, world, bc_policy, estimator: AdvantageEstimator,
               config: TrainConfig, fit_config: FitConfig | None = None,
               q_representation: str = "mlp", rng: np.random.Generator | None = None
               ) -> ImprovementTrace:
    """Run the gated improvement loop starting from the cloned policy.

    replacement: advantages stay those of the behavior policy.
    iterative:   Q is re-evaluated for the current snapshot (closed form for
                 tables, ``q_refit_steps`` SARSA steps per policy step for MLPs).
    onestep:     no gate and no rebasing; the snapshot is always the cloned policy.
    """
    if isinstance(world, TabularMDP) != bool(getattr(bc_policy, "discrete", False)):
        raise ValueError("policy family does not match the world")
    rng = rng if rng is not None else _substream(config.seed, 0xB990)
    eval_seed = int(_substream(config.seed, EVAL_SEED_SALT).integers(2 ** 63))
    ratio_rng = _substream(config.seed, RATIO_SEED_SALT)

    def evaluate(policy):
        return evaluate_policy(policy, world, config.eval_episodes,
                               np.random.default_rng(eval_seed), config.eval_deterministic).mean

    behavior = bc_policy.copy()
    pi = bc_policy.copy()
    pi_k = bc_policy.copy()
    J_k = evaluate(pi_k)
    trace = ImprovementTrace(config.variant, accepted_J=[J_k], checkpoints=[pi_k.copy()])
    opt = ClippedAdam(pi.params, lr=config.lr, lr_decay=config.lr_decay,
                      decay_steps=config.decay_steps, clip_norm=config.clip_norm)
    est = estimator
    learner = None
    if config.variant == "iterative":
        if fit_config is None:
            raise ValueError("iterative variant needs a fit config for Q re-evaluation")
        if q_representation == "table":
            est = estimator.with_q(fit_q_sarsa(dataset, fit_config, rng, "table", target_policy=pi_k))
        else:
            learner = SarsaLearner(dataset, fit_config, rng, config.action_clip)
            src = estimator.q
            if isinstance(src, FittedQ) and src.kind == "mlp":  # warm start from Q of the behavior policy
                for p, tp, q in zip(learner.model.params, learner.target.params, src.model.params):
                    p[...] = q
                    tp[...] = q
            est = estimator.with_q(FittedQ("mlp", model=learner.model, featurizer=learner.feat))
    k = 0
    for i in range(config.steps):
        eps = clip_ratio_schedule(config.eps0, config.sigma, i, config.decay_steps)
        snapshot = behavior if config.variant == "onestep" else pi_k
        states, actions, adv = sample_loss_batch(dataset, snapshot, est, config, rng)
        logp_old = snapshot.log_prob(states, actions)
        loss, grads, info = bppo_loss(pi, logp_old, states, actions, adv, eps)
        if not math.isfinite(loss):
            raise NumericalError(f"non-finite surrogate at step {i}")
        stats = opt.step(pi.params, grads)
        pi.post_update()
        J = evaluate(pi)
        accepted = False
        if config.variant != "onestep" and J > J_k:
            accepted = True
            k += 1
            pi_k = pi.copy()
            J_k = J
            trace.accepted_J.append(J)
            trace.checkpoints.append(pi_k.copy())
            if config.variant == "iterative" and learner is None:
                est = estimator.with_q(fit_q_sarsa(dataset, fit_config, rng, "table",
                                                   target_policy=pi_k))
        if learner is not None:
            learner.train(config.q_refit_steps, rng, target_policy=pi_k)
        rt = ratio_trace(pi, behavior, dataset, ratio_rng, eps, config.ratio_samples)
        trace.records.append({
            "step": i, "eps": eps, "lr": stats["lr"], "loss": loss, "J": J, "J_best": J_k,
            "accepted": accepted, "k": k, "anchor": 0 if config.variant == "onestep" else k,
            "grad_norm": stats["grad_norm"], "clipped_norm": stats["clipped_norm"],
            "clip_frac": info.clipped_fraction, "dropped": info.n_dropped,
            "ratio_mean_abs_dev": rt["mean_abs_dev"], "ratio_in_band": rt["in_band"],
        })
    trace.final_policy = pi.copy() if config.variant == "onestep" else pi_k.copy()
    return trace


def config_dict(config) -> dict:
    return asdict(config)
