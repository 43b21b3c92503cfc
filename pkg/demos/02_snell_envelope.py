"""Snell envelope under nested risk measures, checked against brute force.

Run: python demos/02_snell_envelope.py
"""
# %%
from __future__ import annotations

import numpy as np

from riskstop.risk import AVaR, EVaR, Expectation
from riskstop.snell import (check_delay_ordering, check_minimal_dominating, check_supermartingale,
                            count_stopping_times, enumerate_stopping_oracle, optimal_stopping_time,
                            random_lattice, random_tree, snell_envelope)

rng = np.random.default_rng(1)
tree = random_tree(rng, 3, branching=2)
print("nodes:", tree.n_nodes, " stopping times to enumerate:", count_stopping_times(tree))

# %% Backward recursion versus enumeration of every stopping time.
for spec in (Expectation(), AVaR(0.5), EVaR(1.0)):
    res = snell_envelope(tree, spec)
    orc = enumerate_stopping_oracle(tree, spec)
    tau = optimal_stopping_time(res, tree)
    print(f"{spec.label():>12s}  recursion={res.root_value:.10f}  brute force={orc.value:.10f}"
          f"  first-hit stopping stages per leaf={tau.leaf_times(tree)}")

# %% The envelope is a supermartingale under the risk measure and the smallest one above Z.
res = snell_envelope(tree, AVaR(0.5))
print("supermartingale:", check_supermartingale(res.values, tree, AVaR(0.5))[0])
print("minimal dominating:", check_minimal_dominating(res, tree, AVaR(0.5))[0])

# %% On Markov lattices with monotone payoffs, a more averse EVaR never stops earlier.
lat = random_lattice(rng, 4, width=3).to_tree()
print("EVaR(0) -> EVaR(1) delays stopping:", check_delay_ordering(lat, EVaR(0.0), EVaR(1.0)))
