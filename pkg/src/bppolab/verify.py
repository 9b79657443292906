"""Independent oracles and exact checks of the improvement bounds on tabular worlds.

All expectations over state distributions use the unnormalized discounted
occupancy (total mass 1/(1-gamma)), the convention under which the
performance-difference identity holds exactly.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .mdp import (TabularMDP, dataset_tv_divergence, exact_action_values, exact_advantage,
                  exact_return, exact_state_values, policy_table, visitation_frequencies)

SLACK_TOL = 1e-9


# --- brute-force oracles ------------------------------------------------------

def truncation_horizon(gamma: float, r_max: float, tol: float) -> int:
    """Smallest T with gamma^T * r_max / (1 - gamma) < tol."""
    if r_max == 0.0 or gamma == 0.0:
        return 1
    T = math.ceil(math.log(tol * (1.0 - gamma) / r_max) / math.log(gamma))
    T = max(T, 1)
    while gamma ** T * r_max / (1.0 - gamma) >= tol:
        T += 1
    return T


def _state_marginals(mdp: TabularMDP, pi: np.ndarray, T: int):
    """Yield (t, P(s_t = .)) by pushing the start distribution through the chain."""
    d = mdp.initial_dist.copy()
    for t in range(T):
        yield t, d
        d = np.einsum("s,sa,sax->x", d, pi, mdp.transition)


def brute_force_return(mdp: TabularMDP, pi, tolerance: float = 1e-8) -> float:
    """Return summed step by step over the forward state marginals up to the truncation horizon."""
    pi = policy_table(pi, mdp)
    T = truncation_horizon(mdp.gamma, mdp.r_max, tolerance)
    r_pi = (pi * mdp.reward).sum(axis=1)
    return float(sum(mdp.gamma ** t * (d @ r_pi) for t, d in _state_marginals(mdp, pi, T)))


def brute_force_visitation(mdp: TabularMDP, pi, tolerance: float = 1e-10) -> np.ndarray:
    pi = policy_table(pi, mdp)
    T = truncation_horizon(mdp.gamma, 1.0, tolerance)
    return sum(mdp.gamma ** t * d for t, d in _state_marginals(mdp, pi, T))


def enumerate_paths_return(mdp: TabularMDP, pi, T: int) -> float:
    """Truncated return by listing every (s_0, a_0, ..., s_{T-1}, a_{T-1}) path with its probability.

    Cost grows as (S*A)^T, so only for tiny worlds.
    """
    pi = policy_table(pi, mdp)
    S, A = mdp.n_states, mdp.n_actions
    total = 0.0
    for path in itertools.product(range(S * A), repeat=T):
        s0 = path[0] // A
        prob = mdp.initial_dist[s0]
        ret = 0.0
        for t, sa in enumerate(path):
            s, a = divmod(sa, A)
            if t > 0:
                ps, pa = divmod(path[t - 1], A)
                prob *= mdp.transition[ps, pa, s]
            prob *= pi[s, a]
            if prob == 0.0:
                break
            ret += mdp.gamma ** t * mdp.reward[s, a]
        else:
            total += prob * ret
    return total


# --- Theorem-1 style identity ----------------------------------------------------

@dataclass
class IdentityReport:
    direct: float
    trajectory_form: float
    occupancy_form: float

    @property
    def max_error(self) -> float:
        return max(abs(self.trajectory_form - self.direct), abs(self.occupancy_form - self.direct))


def verify_theorem1(mdp: TabularMDP, pi_new, pi_old, tol: float = 1e-13) -> IdentityReport:
    """J(pi') - J(pi) three ways: direct, sum_t gamma^t E[A_pi] along pi' paths, and via rho_{pi'}."""
    pn, po = policy_table(pi_new, mdp), policy_table(pi_old, mdp)
    A = exact_advantage(mdp, po)
    direct = exact_return(mdp, pn) - exact_return(mdp, po)
    a_bar = (pn * A).sum(axis=1)
    T = truncation_horizon(mdp.gamma, max(float(np.abs(A).max()), 1e-300), tol)
    traj = float(sum(mdp.gamma ** t * (d @ a_bar) for t, d in _state_marginals(mdp, pn, T)))
    occ = float(visitation_frequencies(mdp, pn) @ a_bar)
    return IdentityReport(direct, traj, occ)


# --- dataset divergence -------------------------------------------------------------

def proposition1_oracle(pi_row, a_t: int, weight: float = 0.5) -> float:
    """Two-branch evaluation of TV between the point mass at ``a_t`` and ``pi_row``.

    ``weight`` is the share given to the ``a = a_t`` branch; the other branch
    integrates the remaining actions. Both branches carry the same value, so the
    result does not depend on ``weight``.
    """
    pi_row = np.asarray(pi_row, dtype=np.float64)
    on = abs(1.0 - pi_row[a_t])
    off = float(np.sum(np.delete(pi_row, a_t)))   # |0 - pi(a)| summed over a != a_t
    return 0.5 * (weight * on + (1.0 - weight) * off)


# --- bound reports ------------------------------------------------------------------

@dataclass
class BoundReport:
    name: str
    lhs: float
    rhs: float
    terms: dict = field(default_factory=dict)
    tol: float = SLACK_TOL

    @property
    def slack(self) -> float:
        return self.lhs - self.rhs

    @property
    def passed(self) -> bool:
        return self.slack >= -self.tol

    def line(self) -> str:
        return (f"{self.name} lhs={self.lhs:.12g} rhs={self.rhs:.12g} "
                f"slack={self.slack:.6g} {'PASS' if self.passed else 'FAIL'}")


def _tv_rows(p, q):
    return 0.5 * np.abs(p - q).sum(axis=1)


def occupancy_from_policy(mdp: TabularMDP, pi_data) -> np.ndarray:
    """State-action occupancy rho(s) * pi(a|s) of the data-collection policy."""
    p = policy_table(pi_data, mdp)
    return visitation_frequencies(mdp, p)[:, None] * p


def dataset_occupancy(dataset, mdp: TabularMDP, mode: str = "empirical", pi_data=None):
    """State-action occupancy of a dataset.

    empirical: mean over episodes of sum_t gamma^t 1[s_t, a_t] from the records.
    policy:    exact occupancy of ``pi_data`` (the infinite-data limit).
    """
    if mode == "empirical":
        return dataset.state_action_occupancy(mdp.n_states, mdp.n_actions, mdp.gamma)
    if mode == "policy":
        if pi_data is None:
            raise ValueError("policy mode needs pi_data")
        return occupancy_from_policy(mdp, pi_data)
    raise ValueError(f"unknown occupancy mode {mode!r}")


def _mismatch(rho_sa, pi_beta):
    """E_{(s,a) ~ rho_D}[1 - pi_beta(a|s)]: twice the per-record dataset TV."""
    return float((rho_sa * (1.0 - pi_beta)).sum())


def theorem2_bound(mdp: TabularMDP, rho_D_sa, pi, pi_beta) -> BoundReport:
    pi, pb = policy_table(pi, mdp), policy_table(pi_beta, mdp)
    rho_D = rho_D_sa.sum(axis=1)
    A_b = exact_advantage(mdp, pb)
    big_a = float(np.abs(A_b).max())
    tv = _tv_rows(pi, pb)
    max_tv = float(tv.max())
    exp_tv = float(visitation_frequencies(mdp, pb) @ tv)
    mis = _mismatch(rho_D_sa, pb)
    surrogate = float(rho_D @ (pi * A_b).sum(axis=1))
    pen1 = 4 * mdp.gamma * big_a * max_tv * exp_tv
    pen2 = 2 * mdp.gamma * big_a * max_tv * mis
    lhs = exact_return(mdp, pi) - exact_return(mdp, pb)
    return BoundReport("theorem2", lhs, surrogate - pen1 - pen2, {
        "surrogate": surrogate, "penalty_policy": pen1, "penalty_dataset": pen2,
        "A_max": big_a, "max_tv": max_tv, "expected_tv": exp_tv, "dataset_mismatch": mis})


def _theorem3_parts(mdp, rho_D_sa, pi, pi_k, pi_beta):
    rho_D = rho_D_sa.sum(axis=1)
    A_k = exact_advantage(mdp, pi_k)
    big_a = float(np.abs(A_k).max())
    max_tv = float(_tv_rows(pi, pi_k).max())
    g = mdp.gamma
    exp_tv_k = float(visitation_frequencies(mdp, pi_k) @ _tv_rows(pi, pi_k))
    exp_tv_kb = float(visitation_frequencies(mdp, pi_beta) @ _tv_rows(pi_k, pi_beta))
    mis = _mismatch(rho_D_sa, pi_beta)
    terms = {
        "surrogate": float(rho_D @ (pi * A_k).sum(axis=1)),
        "penalty_policy": 4 * g * big_a * max_tv * exp_tv_k,
        "penalty_snapshot": 4 * g * big_a * max_tv * exp_tv_kb,
        "penalty_dataset": 2 * g * big_a * max_tv * mis,
        "A_max": big_a, "max_tv": max_tv, "expected_tv": exp_tv_k,
        "expected_tv_snapshot": exp_tv_kb, "dataset_mismatch": mis,
    }
    return terms


def theorem3_bound(mdp: TabularMDP, rho_D_sa, pi, pi_k, pi_beta) -> BoundReport:
    pi, pk, pb = (policy_table(x, mdp) for x in (pi, pi_k, pi_beta))
    t = _theorem3_parts(mdp, rho_D_sa, pi, pk, pb)
    rhs = t["surrogate"] - t["penalty_policy"] - t["penalty_snapshot"] - t["penalty_dataset"]
    lhs = exact_return(mdp, pi) - exact_return(mdp, pk)
    return BoundReport("theorem3", lhs, rhs, t)


def theorem4_gap(mdp: TabularMDP, rho_D_sa, pi, pi_k, pi_beta, r_max: float | None = None
                 ) -> BoundReport:
    """Replacement gap, reported as a bound with lhs = allowance and rhs = |gap|."""
    pi, pk, pb = (policy_table(x, mdp) for x in (pi, pi_k, pi_beta))
    r_max = mdp.r_max if r_max is None else r_max
    rho_D = rho_D_sa.sum(axis=1)
    with_k = float(rho_D @ (pi * exact_advantage(mdp, pk)).sum(axis=1))
    with_b = float(rho_D @ (pi * exact_advantage(mdp, pb)).sum(axis=1))
    exp_tv = float(visitation_frequencies(mdp, pb) @ _tv_rows(pk, pb))
    allowance = 2 * mdp.gamma * (mdp.gamma + 1) * r_max * exp_tv
    gap = abs(with_k - with_b)
    return BoundReport("theorem4", allowance, gap, {
        "surrogate_snapshot": with_k, "surrogate_behavior": with_b, "gap": gap,
        "r_max": r_max, "expected_tv_snapshot": exp_tv, "allowance": allowance})


def corollary_bound(mdp: TabularMDP, rho_D_sa, pi, pi_k, pi_beta, r_max: float | None = None
                    ) -> BoundReport:
    pi, pk, pb = (policy_table(x, mdp) for x in (pi, pi_k, pi_beta))
    r_max = mdp.r_max if r_max is None else r_max
    t = _theorem3_parts(mdp, rho_D_sa, pi, pk, pb)
    rho_D = rho_D_sa.sum(axis=1)
    t["surrogate_behavior"] = float(rho_D @ (pi * exact_advantage(mdp, pb)).sum(axis=1))
    t["constant"] = 2 * mdp.gamma * (mdp.gamma + 1) * r_max * t["expected_tv_snapshot"]
    rhs = (t["surrogate_behavior"] - t["penalty_policy"] - t["penalty_snapshot"]
           - t["penalty_dataset"] - t["constant"])
    lhs = exact_return(mdp, pi) - exact_return(mdp, pk)
    return BoundReport("corollary", lhs, rhs, t)


def verify_lemma1(mdp: TabularMDP, pi, pi_beta) -> BoundReport:
    """Per-state check; the report carries the worst state."""
    pi, pb = policy_table(pi, mdp), policy_table(pi_beta, mdp)
    A_b = exact_advantage(mdp, pb)
    left = np.abs((pi * A_b).sum(axis=1))
    right = 2 * np.abs(A_b).max(axis=1) * _tv_rows(pi, pb)
    worst = int(np.argmin(right - left))
    return BoundReport("lemma1", float(right[worst]), float(left[worst]),
                       {"state": worst, "per_state_slack": right - left})


def visitation_gap(mdp: TabularMDP, pi, pi_ref) -> tuple[float, float]:
    """(||rho_pi - rho_ref||_1, 2 gamma E_{rho_ref}[TV]) with unnormalized occupancies."""
    pi, pr = policy_table(pi, mdp), policy_table(pi_ref, mdp)
    d = float(np.abs(visitation_frequencies(mdp, pi) - visitation_frequencies(mdp, pr)).sum())
    return d, 2 * mdp.gamma * float(visitation_frequencies(mdp, pr) @ _tv_rows(pi, pr))


# --- random case batteries ------------------------------------------------------------

def perturb(base: np.ndarray, radius: float, rng: np.random.Generator) -> np.ndarray:
    """Mix each row with a random distribution; per-state TV to ``base`` is at most ``radius``."""
    q = rng.dirichlet(np.ones(base.shape[1]), size=base.shape[0])
    lam = rng.uniform(0.0, radius)
    return (1.0 - lam) * base + lam * q


@dataclass
class BoundCase:
    mdp: TabularMDP
    pi_beta: np.ndarray
    pi_data: np.ndarray
    pi_k: np.ndarray
    pi: np.ndarray
    rho_D_sa: np.ndarray


def random_world(rng: np.random.Generator, max_states: int = 6, max_actions: int = 4,
                 gamma_range=(0.5, 0.95)) -> TabularMDP:
    S = int(rng.integers(2, max_states + 1))
    A = int(rng.integers(2, max_actions + 1))
    g = float(rng.uniform(*gamma_range))
    P = rng.dirichlet(np.ones(S), size=(S, A))
    r = rng.uniform(-1.0, 1.0, size=(S, A))
    d0 = rng.dirichlet(np.ones(S))
    return TabularMDP(r, P, d0, g, name="random-case")


def random_bound_case(rng: np.random.Generator, radius: float = 0.2,
                      improver_from: str = "snapshot") -> BoundCase:
    """World, cloned policy, data policy near it, snapshot near it, candidate near the snapshot.

    ``improver_from="behavior"`` draws the candidate around the cloned policy
    instead (the setting with no intermediate snapshot).
    """
    mdp = random_world(rng)
    S, A = mdp.n_states, mdp.n_actions
    pb = rng.dirichlet(np.ones(A), size=S)
    pd = perturb(pb, radius, rng)
    pk = perturb(pb, radius, rng)
    pi = perturb(pk if improver_from == "snapshot" else pb, radius, rng)
    return BoundCase(mdp, pb, pd, pk, pi, occupancy_from_policy(mdp, pd))


def random_triple(rng: np.random.Generator, adversarial: bool = False):
    mdp = random_world(rng, gamma_range=(0.5, 0.99))
    S, A = mdp.n_states, mdp.n_actions
    if not adversarial:
        return mdp, rng.dirichlet(np.ones(A), size=S), rng.dirichlet(np.ones(A), size=S)
    pols = []
    for _ in range(2):
        p = np.full((S, A), 1e-9)
        p[np.arange(S), rng.integers(0, A, size=S)] = 0.0
        p[p == 0.0] = 1.0 - 1e-9 * (A - 1)
        pols.append(p)
    return mdp, pols[0], pols[1]


def run_suite(name: str, n_cases: int, seed: int = 0, radius: float = 0.2,
              perturb_bound: float = 0.0):
    """Yield one report per case for the named suite.

    ``perturb_bound`` shifts every bound right side up by that amount, a
    harness self-test that must produce failures.
    """
    if name not in _SUITE_SALT:
        raise ValueError(f"unknown suite {name!r}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, _SUITE_SALT[name]]))
    for _ in range(n_cases):
        if name == "theorem1":
            mdp, p1, p2 = random_triple(rng)
            rep = verify_theorem1(mdp, p1, p2)
            out = BoundReport("theorem1", 1e-9, rep.max_error, {
                "direct": rep.direct, "trajectory_form": rep.trajectory_form,
                "occupancy_form": rep.occupancy_form}, tol=0.0)
        elif name == "proposition1":
            A = int(rng.integers(2, 6))
            row = rng.dirichlet(np.ones(A))
            a_t = int(rng.integers(A))
            got = dataset_tv_divergence(row[None, :], 0, a_t)
            want = proposition1_oracle(row, a_t, float(rng.uniform()))
            out = BoundReport("proposition1", 1e-12, abs(got - want), {"value": got, "oracle": want},
                              tol=0.0)
        elif name == "theorem2":
            c = random_bound_case(rng, radius, improver_from="behavior")
            out = theorem2_bound(c.mdp, c.rho_D_sa, c.pi, c.pi_beta)
        elif name == "theorem3":
            c = random_bound_case(rng, radius)
            out = theorem3_bound(c.mdp, c.rho_D_sa, c.pi, c.pi_k, c.pi_beta)
        elif name == "theorem4":
            c = random_bound_case(rng, radius)
            out = theorem4_gap(c.mdp, c.rho_D_sa, c.pi, c.pi_k, c.pi_beta)
        elif name == "corollary":
            c = random_bound_case(rng, radius)
            out = corollary_bound(c.mdp, c.rho_D_sa, c.pi, c.pi_k, c.pi_beta)
        else:
            c = random_bound_case(rng, radius, improver_from="behavior")
            out = verify_lemma1(c.mdp, c.pi, c.pi_beta)
        if perturb_bound:
            out.rhs += perturb_bound
        yield out


SUITES = ("theorem1", "proposition1", "theorem2", "theorem3", "theorem4", "corollary", "lemma1")
_SUITE_SALT = {name: i + 101 for i, name in enumerate(SUITES)}


# --- gradient checking ------------------------------------------------------------------

def check_gradients(loss_and_grad, params, n_probes: int, rng: np.random.Generator,
                    h: float = 1e-6, floor: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference partials.

    ``loss_and_grad()`` evaluates at the current contents of ``params``;
    probes pick random coordinates and perturb them in place. The relative
    error uses ``max(|analytic|, |numeric|, floor)`` as denominator.
    """
    _, grads = loss_and_grad()
    grads = [np.array(g, dtype=np.float64) for g in grads]
    sizes = np.array([p.size for p in params])
    worst = 0.0
    for _ in range(n_probes):
        k = int(rng.choice(len(params), p=sizes / sizes.sum()))
        j = np.unravel_index(int(rng.integers(params[k].size)), params[k].shape)
        old = params[k][j]
        params[k][j] = old + h
        up = loss_and_grad()[0]
        params[k][j] = old - h
        down = loss_and_grad()[0]
        params[k][j] = old
        num = (up - down) / (2 * h)
        ana = float(grads[k][j])
        worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), floor))
    return worst


def kink_free(ratio, eps: float, margin: float = 1e-3) -> np.ndarray:
    """Samples whose ratio is at least ``margin`` away from both clip edges."""
    ratio = np.asarray(ratio)
    return (np.abs(ratio - (1 - 2 * eps)) > margin) & (np.abs(ratio - (1 + 2 * eps)) > margin)


def exact_tables(mdp: TabularMDP, pi):
    """(Q, V) of ``pi`` by direct solve, for building exact estimators."""
    p = policy_table(pi, mdp)
    return exact_action_values(mdp, p), exact_state_values(mdp, p)

