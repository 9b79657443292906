"""
PointReach with networks
========================

The continuous world has no closed form, so the gate evaluates 10 rollouts of
the mean action with a fixed seed. This is a short run meant to finish in
well under a minute; configs/desk_pointreach.cfg holds the full settings.
"""
import numpy as np

from bppolab.envs import PointReach, ProportionalController
from bppolab.pipeline import RunConfig, run_pipeline
from bppolab.train import evaluate_policy

env = PointReach.from_seed(0)
ctrl = ProportionalController(env)
print("behavior controller return:",
      round(evaluate_policy(ctrl, env, 10, np.random.default_rng(0)).mean, 3))

cfg = RunConfig(world="point-reach", representation="mlp", hidden="32,32", episodes=50,
                horizon=50, bc_steps=1000, bc_lr=1e-3, q_steps=1000, q_lr=1e-3,
                v_steps=1000, v_lr=1e-3, steps=100, batch_size=256, lr=1e-4, seed=0)
res = run_pipeline(cfg)
print(f"J(clone) = {res.J_bc:.3f}, J(final) = {res.J_final:.3f}, "
      f"accepted {len(res.trace.accepted_J) - 1} of {cfg.steps} steps")
print("in-band fraction of ratios at the end:", res.trace.records[-1]["ratio_in_band"])
