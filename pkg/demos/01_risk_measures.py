"""Risk measures on a small discrete loss distribution.

Run: python demos/01_risk_measures.py
"""
# %%
from __future__ import annotations

import numpy as np

from riskstop.risk import (AVaR, Concave, DiscreteDistribution, EVaR, Expectation, MeanAVaR,
                           avar_dual_weights, evaluate, reweight_concave)

rng = np.random.default_rng(0)
dist = DiscreteDistribution(rng.normal(size=50), np.full(50, 1 / 50))

# %% Every measure sits between the mean and the worst case.
for spec in (Expectation(), AVaR(0.5), AVaR(0.9), EVaR(0.5), EVaR(2.0), MeanAVaR(0.2, 0.05)):
    print(f"{spec.label():>18s}  {evaluate(spec, dist): .6f}")
print(f"{'max':>18s}  {dist.atoms.max(): .6f}")

# %% The concave (acceptability) side mirrors the convex one.
print("Concave(AVaR(0.5)) =", evaluate(Concave(AVaR(0.5)), dist))
print("-AVaR(0.5) of -Z   =", -evaluate(AVaR(0.5), DiscreteDistribution(-dist.atoms, dist.probs)))

# %% AVaR dual weights: the upper tail gets mass p / (1 - alpha), capped.
q = avar_dual_weights(0.9, dist)
print("support of the dual weights:", np.count_nonzero(q), "atoms, total", q.sum())

# %% Reweighting used by the concave outer loop: lowest ceil(alpha N) ranks get the extra mass.
w = reweight_concave(0.2, 0.05, 100, np.arange(100))
print("first six weights:", w[:6], "sum:", w.sum())
