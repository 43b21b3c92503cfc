"""Recursivity and dynamic consistency of flat versus nested preference systems.

Run: python demos/03_preference_lab.py
"""
# %%
from __future__ import annotations

import numpy as np

from riskstop.preference import (Additive, FlatSystem, MaxType, NestedSystem,
                                 check_dynamic_consistency, check_recursivity, interchange_values)
from riskstop.risk import AVaR, Expectation
from riskstop.snell import random_tree

tree = random_tree(np.random.default_rng(0), 3)

# %% Flat AVaR over a whole path is not recursive: a counterexample turns up quickly.
rep = check_recursivity(FlatSystem(AVaR(0.5)), tree, 0, 1, 3, trials=1000, seed=0)
print("flat AVaR recursive:", rep.holds, " trial:", rep.trials)
print("whole-window value", rep.counterexample["whole"], "vs split", rep.counterexample["split"])

# %% Expectation and nested systems pass the same search.
for system in (FlatSystem(Expectation()), NestedSystem(Additive(AVaR(0.5))), NestedSystem(MaxType(AVaR(0.5)))):
    print(type(system).__name__, "recursive:",
          check_recursivity(system, tree, 0, 1, 3, trials=300, seed=0).holds)

# %% Max-type nested AVaR is dynamically consistent.
print("dynamic consistency:",
      check_dynamic_consistency(NestedSystem(MaxType(AVaR(0.5))), tree, trials=300, seed=1).holds)

# %% Minimizing inside the risk measure equals the risk of the pointwise minimum.
rng = np.random.default_rng(2)
psi, p = rng.normal(size=(5, 3)), rng.dirichlet(np.ones(5))
print("interchange:", interchange_values(AVaR(0.4), p, psi))
