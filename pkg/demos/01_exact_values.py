"""
Exact values on a small grid
============================

Everything in a tabular world can be computed with a couple of linear
solves. This walk-through builds the slippery 4x4 grid, evaluates a uniform
policy, and checks the performance-difference identity both ways.
"""
import numpy as np

from bppolab.envs import make_world
from bppolab.mdp import (exact_action_values, exact_advantage, exact_return,
                         exact_state_values, optimal_policy, performance_difference,
                         visitation_frequencies)

grid = make_world("tabular-grid")
print(f"{grid.n_states} states, {grid.n_actions} actions, gamma={grid.gamma}")

uniform = np.full((grid.n_states, grid.n_actions), 1.0 / grid.n_actions)

# V solves (I - gamma P_pi) V = r_pi; Q follows from one Bellman backup
V = exact_state_values(grid, uniform)
Q = exact_action_values(grid, uniform)
print("V(uniform), row by row:")
print(np.round(V.reshape(4, 4), 3))

# advantages average to zero under the policy that defines them
A = exact_advantage(grid, uniform)
print("max |sum_a pi(a|s) A(s,a)| =", np.abs((uniform * A).sum(1)).max())

# the occupancy is unnormalized: its mass is the effective horizon
rho = visitation_frequencies(grid, uniform)
print(f"sum rho = {rho.sum():.6f}  vs 1/(1-gamma) = {1 / (1 - grid.gamma):.6f}")

# J(pi') - J(pi) equals the pi'-occupancy-weighted advantage of pi
best = optimal_policy(grid)
direct, via_occupancy = performance_difference(grid, best, uniform)
print(f"J(best) = {exact_return(grid, best):.6f}, J(uniform) = {exact_return(grid, uniform):.6f}")
print(f"difference: direct {direct:.12f}, via occupancy {via_occupancy:.12f}")
