"""End-to-end runs: dataset, behavior cloning, Q and V fits, then policy improvement.

``RunConfig`` is the flat key=value configuration shared by the command line,
the demos and the experiment tests.
"""
from __future__ import annotations

import dataclasses
import io
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .data import OfflineDataset, generate_dataset, load_dataset
from .envs import PointReach, behavior_policy, make_world
from .estimators import (AdvantageEstimator, FitConfig, behavior_cloning, default_bc_policy,
                         fit_q_sarsa, fit_value)
from .mdp import TabularMDP
from .train import TrainConfig, evaluate_policy, train_bppo

METRICS_HEADER = "# bppolab-metrics v1"
METRICS_COLUMNS = ("run_id", "seed", "stage", "step", "metric", "value")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    world: str = "tabular-grid"
    dataset: str = ""               # path; empty means generate
    episodes: int = 100
    horizon: int = 50
    behavior_quality: float = 0.5
    representation: str = "auto"    # auto | table | mlp (Q and V heads)
    hidden: str = "64,64"
    bc_steps: int = 20_000
    bc_lr: float = 1e-4
    q_steps: int = 20_000
    q_lr: float = 1e-4
    v_steps: int = 20_000
    v_lr: float = 1e-4
    fit_batch_size: int = 256
    tau: float = 0.005
    eps0: float = 0.25
    sigma: float = 0.96
    decay_steps: int = 200
    omega: float = 0.9
    steps: int = 1000
    batch_size: int = 512
    actions_per_state: int = 1
    lr: float = 1e-4
    lr_decay: float = 0.96
    clip_norm: float = 0.5
    variant: str = "replacement"
    q_refit_steps: int = 5
    eval_episodes: int = 10
    ratio_samples: int = 1024
    seed: int = 0

    def hidden_tuple(self):
        return tuple(int(x) for x in self.hidden.split(",") if x.strip())

    def train_config(self, action_clip=None) -> TrainConfig:
        return TrainConfig(eps0=self.eps0, sigma=self.sigma, decay_steps=self.decay_steps,
                           omega=self.omega, steps=self.steps, batch_size=self.batch_size,
                           actions_per_state=self.actions_per_state, lr=self.lr,
                           lr_decay=self.lr_decay, clip_norm=self.clip_norm,
                           variant=self.variant, q_refit_steps=self.q_refit_steps,
                           eval_episodes=self.eval_episodes, ratio_samples=self.ratio_samples,
                           action_clip=action_clip, seed=self.seed)

    def fit_config(self, which: str) -> FitConfig:
        steps, lr = {"bc": (self.bc_steps, self.bc_lr), "q": (self.q_steps, self.q_lr),
                     "v": (self.v_steps, self.v_lr)}[which]
        return FitConfig(steps=steps, batch_size=self.fit_batch_size, lr=lr,
                         hidden=self.hidden_tuple(), tau=self.tau)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def dumps(self) -> str:
        return "".join(f"{f.name}={_fmt_value(getattr(self, f.name))}\n" for f in fields(self))


def _fmt_value(v):
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def _parse_value(kind, raw: str, key: str):
    try:
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from exc


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def parse_overrides(pairs, base: RunConfig | None = None, source: str = "override") -> RunConfig:
    """Apply ``key=value`` strings; unknown keys are rejected."""
    values = {}
    for lineno, item in pairs:
        if "=" not in item:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {item!r}")
        key, raw = (x.strip() for x in item.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        values[key] = _parse_value(_FIELD_TYPES[key], raw, key)
    return dataclasses.replace(base or RunConfig(), **values)


def loads_config(text: str, base: RunConfig | None = None, source: str = "config") -> RunConfig:
    pairs = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if line:
            pairs.append((lineno, line))
    return parse_overrides(pairs, base, source)


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config not found: {path}")
    return loads_config(path.read_text(), base, str(path))


# --- running ---------------------------------------------------------------------

def substream(seed: int, stage: str) -> np.random.Generator:
    salt = int.from_bytes(stage.encode()[:8].ljust(8, b"\0"), "little")
    return np.random.default_rng(np.random.SeedSequence([seed, salt]))


@dataclass
class PipelineResult:
    config: RunConfig
    world: object
    dataset: OfflineDataset
    bc_policy: object
    bc_log_likelihood: float
    bc_curve: list
    q: object
    v: object
    trace: object
    J_bc: float
    J_final: float

    @property
    def run_id(self) -> str:
        return f"{self.config.world}-{self.config.variant}-s{self.config.seed}"

    def metrics_csv(self) -> str:
        return metrics_csv([self])


def build_dataset(cfg: RunConfig, world=None) -> OfflineDataset:
    world = world if world is not None else make_world(cfg.world, cfg.seed)
    if cfg.dataset:
        return load_dataset(cfg.dataset)
    return generate_dataset(world, behavior_policy(world, cfg.behavior_quality), cfg.episodes,
                            cfg.horizon, substream(cfg.seed, "dataset"), seed=cfg.seed,
                            env_name=cfg.world)


@dataclass
class Fits:
    bc_policy: object
    bc_log_likelihood: float
    bc_curve: list
    q: object
    v: object


def fit_all(cfg: RunConfig, dataset: OfflineDataset) -> Fits:
    rep = cfg.representation
    if rep == "auto":
        rep = "table" if dataset.discrete else "mlp"
    policy = default_bc_policy(dataset, substream(cfg.seed, "bc-init"), cfg.hidden_tuple())
    bc = behavior_cloning(dataset, policy, cfg.fit_config("bc"), substream(cfg.seed, "bc"))
    action_clip = None if dataset.discrete else PointReach.action_high
    q = fit_q_sarsa(dataset, cfg.fit_config("q"), substream(cfg.seed, "q"), rep,
                    action_clip=action_clip)
    v = fit_value(dataset, cfg.fit_config("v"), substream(cfg.seed, "v"), rep)
    return Fits(bc.policy, bc.mean_log_likelihood, bc.curve, q, v)


def run_pipeline(cfg: RunConfig, dataset: OfflineDataset | None = None,
                 fits: Fits | None = None) -> PipelineResult:
    """Clone, fit Q and V, then improve. ``fits`` lets variants share the same supervised stage."""
    world = make_world(cfg.world, cfg.seed)
    if dataset is None:
        dataset = build_dataset(cfg, world)
    if isinstance(world, TabularMDP) != dataset.discrete:
        raise ValueError("dataset action space does not match the world")
    if fits is None:
        fits = fit_all(cfg, dataset)
    rep = cfg.representation
    if rep == "auto":
        rep = "table" if dataset.discrete else "mlp"
    action_clip = None if dataset.discrete else PointReach.action_high
    tcfg = cfg.train_config(action_clip)
    est = AdvantageEstimator(fits.q, fits.v, cfg.omega)
    trace = train_bppo(dataset, world, fits.bc_policy, est, tcfg, cfg.fit_config("q"),
                       q_representation=rep, rng=substream(cfg.seed, "improve"))
    return PipelineResult(cfg, world, dataset, fits.bc_policy, fits.bc_log_likelihood,
                          fits.bc_curve, fits.q, fits.v, trace, trace.accepted_J[0], trace.final_J)


def _cell(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


TRACE_METRICS = ("eps", "lr", "loss", "J", "J_best", "accepted", "k", "anchor", "grad_norm",
                 "clipped_norm", "clip_frac", "dropped", "ratio_mean_abs_dev", "ratio_in_band")


def metrics_rows(res: PipelineResult):
    rid, seed = res.run_id, res.config.seed
    for step, ll in res.bc_curve:
        yield rid, seed, "bc", step, "log_likelihood", ll
    q = res.q
    yield rid, seed, "q", q.steps, "final_loss", q.final_loss
    yield rid, seed, "v", res.v.steps, "final_mse", res.v.final_mse
    yield rid, seed, "improve", 0, "J_initial", res.J_bc
    for rec in res.trace.records:
        for m in TRACE_METRICS:
            yield rid, seed, "improve", rec["step"] + 1, m, rec[m]
    yield rid, seed, "improve", len(res.trace.records), "J_final", res.J_final


def metrics_csv(results) -> str:
    buf = io.StringIO()
    buf.write(METRICS_HEADER + "\n")
    buf.write(",".join(METRICS_COLUMNS) + "\n")
    for res in results:
        for row in metrics_rows(res):
            buf.write(",".join(_cell(x) for x in row) + "\n")
    return buf.getvalue()


def evaluate_checkpoint(policy, world, seeds, n_episodes: int = 10, deterministic: bool = True):
    """Per-seed evaluations; tabular worlds give the exact return with zero error."""
    out = []
    for s in seeds:
        out.append(evaluate_policy(policy, world, n_episodes, substream(s, "evaluate"),
                                   deterministic))
    return out
