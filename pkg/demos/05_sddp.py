"""Cutting-plane solver on the arithmetic walk, with Monte Carlo policy evaluation.

Run: python demos/05_sddp.py
"""
# %%
from __future__ import annotations

import numpy as np

from riskstop.lattice import ModelSpec, sample_paths
from riskstop.risk import Expectation, MeanAVaR
from riskstop.sddp import SDDPConfig, concave_outer_loop, simulate_policy, solve

model = ModelSpec("arithmetic", s0=1.0, r=0.01, T=10, strike=1.0, sigma=0.2)
cfg = SDDPConfig(forward_paths=2)

# %% Lower bound from the cuts, upper bound from a chord grid; each cut is audited.
neutral = solve(model, Expectation(), N=30, iterations=150, seed=1, config=cfg)
averse = solve(model, MeanAVaR(0.2, 0.05), iterations=150, seed=1, config=cfg, disc=neutral.disc)
for name, res in (("lambda=0", neutral), ("lambda=0.2", averse)):
    print(f"{name:>10s}: lower={res.lower_bound:.6f} upper={res.upper_bound:.6f} gap={res.gap():.1e}"
          f" audit failures={res.audit['failures']}/{res.audit['checked']}")

# %% Policies evaluated on fresh paths from the continuous law.
paths = sample_paths(model, 4000, seed=7)
for name, res in (("lambda=0", neutral), ("lambda=0.2", averse)):
    profit, tau = simulate_policy(model, res.approx, paths.states)
    print(f"{name:>10s}: mean profit {profit.mean():.4f}, stopping-stage histogram {np.bincount(tau, minlength=11)}")

# %% Risk-averse buyer via reweighted stage laws.
buyer = concave_outer_loop(model, 0.2, 0.05, iterations=100, seed=1, config=cfg, disc=neutral.disc,
                           scenarios=200, max_outer=5)
profit, _ = simulate_policy(model, buyer.result.approx, paths.states)
print("outer loop:", buyer.status, "after", buyer.outer_iterations, "rounds; profit range",
      float(profit.max() - profit.min()))
