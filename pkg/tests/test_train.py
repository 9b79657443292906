import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bppolab.data import generate_dataset
from bppolab.envs import PointReach, ProportionalController, behavior_table, make_world
from bppolab.estimators import FitConfig, exact_estimator
from bppolab.mdp import NumericalError, exact_advantage, exact_return, random_policy
from bppolab.models import GaussianMlpPolicy, TabularSoftmaxPolicy
from bppolab.pipeline import RunConfig, run_pipeline
from bppolab.train import (TrainConfig, band_fraction, bppo_loss, clip_ratio_schedule,
                           evaluate_policy, ratio_trace, sample_loss_batch, surrogate_terms,
                           train_bppo)
from bppolab.verify import check_gradients, exact_tables, kink_free


# --- schedule ---------------------------------------------------------------------

def test_schedule_start_value():
    assert clip_ratio_schedule(0.25, 0.96, 0) == 0.25


def test_schedule_without_decay():
    assert all(clip_ratio_schedule(0.25, 1.0, i) == 0.25 for i in (0, 1, 57, 200, 10_000))


def test_schedule_freezes_after_cutoff():
    frozen = 0.25 * 0.96 ** 200
    assert clip_ratio_schedule(0.25, 0.96, 500) == frozen
    assert all(clip_ratio_schedule(0.25, 0.96, i) == frozen for i in range(200, 260))


def test_schedule_rejects_negative_step():
    with pytest.raises(ValueError):
        clip_ratio_schedule(0.25, 0.96, -1)


@pytest.mark.parametrize("bad", [dict(eps0=0.0), dict(sigma=0.0), dict(sigma=1.1),
                                 dict(actions_per_state=0), dict(variant="ppo"),
                                 dict(omega=1.0), dict(steps=-1)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


# --- surrogate ------------------------------------------------------------------------

def test_identity_ratio_gives_minus_mean_advantage():
    pi = TabularSoftmaxPolicy(np.random.default_rng(0).standard_normal((3, 2)))
    s, a = np.array([0, 1, 2, 2]), np.array([1, 0, 0, 1])
    adv = np.array([0.5, -1.0, 2.0, 0.1])
    loss, _, info = bppo_loss(pi, pi.log_prob(s, a), s, a, adv, 0.2)
    assert loss == pytest.approx(-adv.mean(), abs=1e-15)
    assert info.clipped_fraction == 0.0


def test_clipped_branch_wins_above_band():
    eps = 0.1
    terms = surrogate_terms(np.array([1 + 3 * eps]), np.array([2.0]), eps)
    assert terms[0] == pytest.approx((1 + 2 * eps) * 2.0)


def test_clipped_sample_has_no_gradient():
    pi = TabularSoftmaxPolicy(np.array([[math.log(3.0), 0.0]]))  # pi(a0) = 0.75
    logp_old = np.log([0.5])
    _, grads, info = bppo_loss(pi, logp_old, np.array([0]), np.array([0]), np.array([1.0]), 0.1)
    # ratio 1.5 > 1.2 with positive advantage: clipped
    assert info.clipped_fraction == 1.0
    assert np.all(grads[0] == 0.0)


@settings(max_examples=200)
@given(st.floats(0.0, 5.0), st.floats(-10, 10), st.floats(0.01, 0.45))
def test_surrogate_is_a_lower_bound(ratio, adv, eps):
    assert surrogate_terms(np.array([ratio]), np.array([adv]), eps)[0] <= ratio * adv + 1e-12


def test_bppo_gradient_tabular():
    rng = np.random.default_rng(1)
    pi_k = TabularSoftmaxPolicy(rng.standard_normal((4, 3)))
    pi = TabularSoftmaxPolicy(pi_k.logits + 0.3 * rng.standard_normal((4, 3)))
    s = rng.integers(0, 4, 64)
    a = pi_k.sample(s, rng)
    adv = rng.standard_normal(64)
    logp_old = pi_k.log_prob(s, a)
    eps = 0.1
    keep = kink_free(np.exp(pi.log_prob(s, a) - logp_old), eps)
    s, a, adv, logp_old = s[keep], a[keep], adv[keep], logp_old[keep]

    def lg():
        loss, grads, _ = bppo_loss(pi, logp_old, s, a, adv, eps)
        return loss, grads

    assert check_gradients(lg, pi.params, 12, rng) <= 1e-4


def test_bppo_gradient_gaussian():
    rng = np.random.default_rng(2)
    pi_k = GaussianMlpPolicy(2, 2, (16, 16), rng, init_log_std=-0.5)
    pi = pi_k.copy()
    for p in pi.params:
        p += 0.05 * rng.standard_normal(p.shape)
    s = rng.standard_normal((128, 2))
    a = pi_k.sample(s, rng)
    adv = rng.standard_normal(128)
    logp_old = pi_k.log_prob(s, a)
    eps = 0.05
    keep = kink_free(np.exp(pi.log_prob(s, a) - logp_old), eps)
    s, a, adv, logp_old = s[keep], a[keep], adv[keep], logp_old[keep]

    def lg():
        loss, grads, _ = bppo_loss(pi, logp_old, s, a, adv, eps)
        return loss, grads

    assert check_gradients(lg, pi.params, 80, rng) <= 1e-4


def test_nonfinite_ratios_dropped_then_abort():
    pi = TabularSoftmaxPolicy.uniform(1, 2)
    s, a = np.zeros(200, int), np.zeros(200, int)
    logp_old = np.full(200, math.log(0.5))
    logp_old[0] = -np.inf  # ratio overflows to inf
    _, _, info = bppo_loss(pi, logp_old, s, a, np.ones(200), 0.1)
    assert info.n_dropped == 1 and info.n_used == 199
    logp_old[:3] = -np.inf
    with pytest.raises(NumericalError):
        bppo_loss(pi, logp_old, s, a, np.ones(200), 0.1)


# --- loss batches -----------------------------------------------------------------------

def tabular_setup(seed=0):
    w = make_world("tabular-random", seed)
    b = behavior_table(w)
    ds = generate_dataset(w, b, 20, 10, np.random.default_rng(seed))
    Q, V = exact_tables(w, b)
    return w, b, ds, exact_estimator(Q, V, 0.9)


def test_loss_batch_shape_and_domain():
    w, b, ds, est = tabular_setup()
    pi = TabularSoftmaxPolicy.from_table(b)
    cfg = TrainConfig(batch_size=37, actions_per_state=1)
    s, a, adv = sample_loss_batch(ds, pi, est, cfg, np.random.default_rng(0))
    assert len(s) == len(a) == len(adv) == 37
    assert np.all((a >= 0) & (a < w.n_actions))
    assert abs(adv.mean()) < 1e-10
    s3, _, _ = sample_loss_batch(ds, pi, est, TrainConfig(batch_size=10, actions_per_state=3),
                                 np.random.default_rng(0))
    assert len(s3) == 30


def test_sampled_advantage_matches_exact_expectation():
    w, b, ds, est = tabular_setup()
    pi_k = random_policy(w.n_states, w.n_actions, np.random.default_rng(4))
    A = exact_advantage(w, b)
    s0 = int(ds.states[0])
    rng = np.random.default_rng(5)
    acts = TabularSoftmaxPolicy.from_table(pi_k).sample(np.full(10_000, s0), rng)
    draws = est.advantage(np.full(10_000, s0), acts)
    se = draws.std(ddof=1) / math.sqrt(len(draws))
    assert abs(draws.mean() - pi_k[s0] @ A[s0]) <= 3 * se


# --- evaluation -----------------------------------------------------------------------------

def test_tabular_evaluation_is_exact():
    w = make_world("tabular-grid")
    b = behavior_table(w)
    assert evaluate_policy(TabularSoftmaxPolicy.from_table(b), w).mean == pytest.approx(
        exact_return(w, b), abs=1e-12)


def test_deterministic_env_and_policy_have_zero_spread():
    class Fixed:
        def sample(self, states, rng, deterministic=False):
            return np.full_like(states, 0.5)

    class SameStart(PointReach):
        def reset(self, n, rng):
            return np.zeros((n, 2))

    env = SameStart(goal=(0.3, -0.2), noise_std=0.0)
    res = evaluate_policy(Fixed(), env, 5, np.random.default_rng(0))
    # lockstep matrix products may differ in the last bit between episodes
    assert res.se <= 1e-12
    assert max(res.returns) - min(res.returns) <= 1e-12


# --- ratio monitoring ------------------------------------------------------------------------

def test_ratio_trace_identity():
    w, b, ds, _ = tabular_setup()
    pi = TabularSoftmaxPolicy.from_table(b)
    rt = ratio_trace(pi, pi.copy(), ds, np.random.default_rng(0), 0.01)
    assert np.allclose(rt["ratios"], 1.0) and rt["in_band"] == 1.0
    assert rt["mean_abs_dev"] <= 1e-12


def test_band_fraction_slack():
    r = np.array([0.5, 0.9, 1.0, 1.12, 1.3])
    assert band_fraction(r, 0.05) == pytest.approx(2 / 5)
    assert band_fraction(r, 0.05, slack=0.05) == pytest.approx(3 / 5)


# --- improvement loop ---------------------------------------------------------------------------

def test_zero_steps_returns_bc():
    w, b, ds, est = tabular_setup()
    bc = TabularSoftmaxPolicy.from_table(b)
    tr = train_bppo(ds, w, bc, est, TrainConfig(steps=0))
    assert tr.records == [] and len(tr.checkpoints) == 1
    assert tr.final_J == exact_return(w, bc.table())


@pytest.mark.parametrize("variant", ["replacement", "iterative", "onestep"])
def test_trace_invariants(variant):
    w, b, ds, est = tabular_setup(3)
    bc = TabularSoftmaxPolicy.from_table(b)
    cfg = TrainConfig(steps=60, batch_size=128, lr=0.05, variant=variant, eps0=0.25, sigma=0.96)
    tr = train_bppo(ds, w, bc, est, cfg, FitConfig(), "table", np.random.default_rng(0))
    J = np.array(tr.accepted_J)
    assert np.all(np.diff(J) > 0)
    for rec in tr.records:
        assert rec["eps"] == 0.25 * 0.96 ** min(rec["step"], 200)
        assert rec["clipped_norm"] <= 0.5 + 1e-12
    if variant == "onestep":
        assert tr.column("anchor").max() == 0 and len(tr.checkpoints) == 1
        assert tr.final_J == tr.records[-1]["J"]
    else:
        assert tr.final_J == J[-1]
        for ck, j in zip(tr.checkpoints, J):
            assert exact_return(w, ck.table()) == j


def test_trace_is_deterministic():
    def run():
        w, b, ds, est = tabular_setup(1)
        cfg = TrainConfig(steps=20, batch_size=64, lr=0.05)
        return train_bppo(ds, w, TabularSoftmaxPolicy.from_table(b), est, cfg,
                          rng=np.random.default_rng(7)).to_csv()
    assert run() == run()


def test_policy_family_mismatch_rejected():
    w, b, ds, est = tabular_setup()
    with pytest.raises(ValueError):
        train_bppo(ds, w, GaussianMlpPolicy(1, 1, (4,), np.random.default_rng(0)), est, TrainConfig())


def test_bandit_reaches_optimal_arm():
    cfg = RunConfig(world="tabular-bandit", representation="table", episodes=50, horizon=20,
                    bc_steps=2000, bc_lr=0.05, lr=0.3, steps=300, batch_size=256, seed=0)
    res = run_pipeline(cfg)
    optimal = 1.0 / (1 - res.world.gamma)
    assert res.J_bc < 0.6 * optimal
    assert res.J_final >= 0.99 * optimal


def test_continuous_loop_runs_and_gates():
    env = PointReach.from_seed(0)
    ds = generate_dataset(env, ProportionalController(env, 1.0, 0.3), 10, 50,
                          np.random.default_rng(0)).with_returns(env.gamma)
    cfg = RunConfig(world="point-reach", bc_steps=200, q_steps=200, v_steps=200, hidden="16,16",
                    steps=15, batch_size=64, lr=1e-3, variant="iterative", ratio_samples=128)
    res = run_pipeline(cfg, dataset=ds)
    assert np.all(np.diff(res.trace.accepted_J) > 0)
    assert np.all(np.isfinite(res.trace.column("loss")))
