"""Optimal stopping under nested risk measures."""

from __future__ import annotations

from .risk import (AVaR, Concave, DiscreteDistribution, EVaR, Expectation, MeanAVaR, RiskSpec,
                   RiskSpecError, ScalingError, avar_dual_weights, evaluate, evaluate_rows,
                   rank_by_frequency, reweight_concave)
from .lattice import ModelError, ModelSpec, StageDiscretization, discretize, sample_paths
from .snell import (FiltrationTree, MarkovLattice, SnellResult, StoppingTime,
                    enumerate_stopping_oracle, nested_value, optimal_stopping_time,
                    random_lattice, random_tree, snell_envelope)
from .preference import (Additive, FlatSystem, MaxType, MinType, NestedSystem,
                         check_dynamic_consistency, check_recursivity, nested_evaluate)
from .amput import extract_regions, price_basket, price_put
from .sddp import SDDPConfig, concave_outer_loop, solve

__version__ = "0.1.0"
