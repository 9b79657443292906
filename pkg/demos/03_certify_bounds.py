"""
Certifying the improvement bounds
=================================

Each suite draws random small worlds with a behavior policy, a nearby
improved policy and an occupancy for the data, then compares both sides of a
bound in exact arithmetic (up to float64). The last part shows a world where
the dataset-only lower bound cannot hold: the data never leave a costly
state, so the dataset term vanishes while the bound keeps a large constant.
"""
import numpy as np

from bppolab.mdp import TabularMDP
from bppolab.verify import SUITES, occupancy_from_policy, run_suite, theorem2_bound, visitation_gap

for name in SUITES:
    reps = list(run_suite(name, 200, seed=0))
    slack = np.array([r.slack for r in reps])
    print(f"{name:13s} 200 cases, failures {int((~np.array([r.passed for r in reps])).sum())}, "
          f"min slack {slack.min():.3g}")

# two states: 0 costs -1 per step and either stays (a0) or leaves (a1) for the
# absorbing state 1, which pays +1
P = np.zeros((2, 2, 2))
P[0, 0, 0] = P[0, 1, 1] = 1.0
P[1, :, 1] = 1.0
trap = TabularMDP(np.array([[-1.0, -1.0], [1.0, 1.0]]), P, np.array([1.0, 0.0]), 0.99)

stay = np.array([[1.0, 0.0], [1.0, 0.0]])
leave_sometimes = np.array([[0.9, 0.1], [0.9, 0.1]])
rep = theorem2_bound(trap, occupancy_from_policy(trap, stay), leave_sometimes, stay)
print(f"\ntrap: true gain {rep.lhs:.4f}, claimed lower bound {rep.rhs:.4f}, passed={rep.passed}")

gap, bound = visitation_gap(trap, leave_sometimes, stay)
print(f"occupancy gap {gap:.3f} vs 2*gamma*E[TV] = {bound:.3f}; "
      f"times 1/(1-gamma) = {bound / (1 - trap.gamma):.1f}")
