#!/usr/bin/env python3
"""Fit the neural operator on a 1D code family and use it to warm-start a solve.

Training data comes from the exact linear-quadratic solution, so this runs in
a few minutes.  The warm-started solve should settle in fewer rounds.
"""
import numpy as np

from mfgflow import operator as op
from mfgflow.fbsde import TrainConfig, rounds_to_reach, train_fixed

N = 10
smp, build = op.toy_sampler(N=N), op.toy_problem_builder(N)

# a quarter of the queries spread over the box keep mass off empty regions
samples = op.collect_samples(smp.draw(256, 0, 0), build, 64, seed=0, box=smp.box,
                             box_fraction=0.25)
model = op.OperatorModel(smp.layout, N, smp.box, code_bounds=smp.bounds(), seed=0)
op.fit_operator(model, samples, 2000, lr=1e-2, queries_per_step=16)
held = op.collect_samples(smp.draw(16, 0, 1), build, 64, seed=1)
print(f"held-out l_PINO {op.heldout_loss(model, held):.3g}")

code = smp.draw(1, 0, 2)[0]
inf = op.infer_equilibrium(model, code, resolution=400)
print(f"inference: {inf.seconds * 1e3:.0f} ms, masses per step {np.round(inf.masses, 3)}")

cfg = TrainConfig(M=256, k_phi=2, max_rounds=60, tol=0.0, lr_theta=1e-2, lr_phi=1e-2)
cold = train_fixed(build(code), cfg)
warm = train_fixed(build(code), cfg, warm_start=op.OperatorWarmStart(model, code))
goal = float(np.mean(cold.column("total")[-10:]))
for name, r in (("cold", cold), ("warm", warm)):
    t = r.column("total")
    smooth = [{"v": t[max(0, i - 4):i + 1].mean()} for i in range(len(t))]
    print(f"{name}: first total {t[0]:.3f}, reaches {goal:.3f} at round "
          f"{rounds_to_reach(smooth, 'v', goal)}")
