"""Risk-averse American put on a geometric random walk: values and stopping regions.

Run: python demos/04_american_put.py
"""
# %%
from __future__ import annotations

import numpy as np

from riskstop.amput import build_grids, extract_regions, price_put, root_value
from riskstop.lattice import ModelSpec, discretize
from riskstop.risk import Concave, EVaR, Expectation

model = ModelSpec("geometric", s0=1.0, r=0.01, T=10, strike=1.0, sigma=0.2)

# %% With two equally likely moves the recursion is the classical binomial tree.
print("binomial risk-neutral value:", root_value(price_put(model, discretize(model, 2, mode="binomial"),
                                                           Expectation())))

# %% Sampled stage laws plus a shared state grid for a sweep over the EVaR level.
disc = discretize(model, 50, seed=3)
grids = build_grids(model, disc, n_points=400)
for beta in (0.0, 0.5, 1.0):
    buyer = price_put(model, disc, Concave(EVaR(beta)), grids)
    holder = price_put(model, disc, EVaR(beta), grids)
    cont = sum(int((~g.stop).sum()) for g in buyer[:-1])
    print(f"beta={beta}: buyer value {root_value(buyer):.5f} ({cont} continuation grid points),"
          f" holder value {root_value(holder):.5f}")

# %% Stop/continue intervals per stage, ready for plotting.
regions = extract_regions(price_put(model, disc, Concave(EVaR(0.5)), grids))
print("\n".join(regions.to_csv().splitlines()[:8]))
