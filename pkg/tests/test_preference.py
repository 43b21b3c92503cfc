from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from riskstop.preference import (Additive, FlatSystem, MaxType, MinType, NestedSystem,
                                 OneStepMapping, check_dynamic_consistency, check_recursivity,
                                 interchange_values, nested_evaluate)
from riskstop.risk import AVaR, EVaR, Expectation, MeanAVaR, evaluate_rows
from riskstop.snell import random_tree, snell_envelope


def tree3(seed=0, random_probs=True):
    return random_tree(np.random.default_rng(seed), 3, random_probs=random_probs)


def test_flat_expectation_equals_nested_additive():
    tree = tree3(1)
    z = np.random.default_rng(2).normal(size=tree.n_nodes)
    flat = FlatSystem(Expectation()).evaluate(tree, z, 0, 3)
    nested = NestedSystem(Additive(Expectation())).evaluate(tree, z, 0, 3)
    assert flat == pytest.approx(nested)
    # direct sum over leaves
    total = sum(tree.path_prob[l] * sum(z[i] for i in tree.ancestors(l)) for l in tree.leaves)
    assert flat[0] == pytest.approx(total)


def test_flat_avar_single_stage_window():
    tree = tree3(4)
    z = np.random.default_rng(5).normal(size=tree.n_nodes)
    # over one transition flat and nested additive coincide
    a = FlatSystem(AVaR(0.5)).evaluate(tree, z, 1, 2)
    b = NestedSystem(Additive(AVaR(0.5))).evaluate(tree, z, 1, 2)
    assert a == pytest.approx(b)


def test_flat_avar_not_recursive_expectation_recursive():
    tree = tree3(0)
    rep = check_recursivity(FlatSystem(AVaR(0.5)), tree, 0, 1, 3, trials=1000, seed=0)
    assert not rep.holds and rep.trials <= 1000
    ce = rep.counterexample
    assert abs(ce["whole"] - ce["split"]) > 1e-10
    assert json.loads(rep.to_json())["holds"] is False
    ok = check_recursivity(FlatSystem(Expectation()), tree, 0, 1, 3, trials=300, seed=0)
    assert ok.holds and ok.cases == 300


@pytest.mark.parametrize("mapping", [Additive(AVaR(0.5)), MaxType(EVaR(1.0)), MinType(AVaR(0.3)),
                                     Additive(MeanAVaR(0.2, 0.05))])
def test_nested_systems_are_recursive(mapping):
    rep = check_recursivity(NestedSystem(mapping), tree3(3), 0, 1, 3, trials=200, seed=1)
    assert rep.holds


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([AVaR(0.5), EVaR(1.0), Expectation()]))
def test_max_type_fold_is_snell_envelope(seed, spec):
    tree = tree3(seed)
    val = NestedSystem(MaxType(spec)).evaluate(tree, tree.z, 0, 3)
    assert val[0] == pytest.approx(snell_envelope(tree, spec).root_value, abs=1e-12)


def test_dynamic_consistency_reports():
    tree = tree3(6)
    for mapping in (Additive(Expectation()), Additive(AVaR(0.5)), MaxType(AVaR(0.5)), MaxType(EVaR(1.0))):
        rep = check_dynamic_consistency(NestedSystem(mapping), tree, trials=200, seed=2)
        assert rep.holds and rep.cases > 0
    strict = check_dynamic_consistency(NestedSystem(Additive(Expectation())), tree, trials=200,
                                       seed=2, strict=True)
    assert strict.holds and strict.cases > 0


def test_max_type_avar_not_strictly_consistent():
    rep = check_dynamic_consistency(NestedSystem(MaxType(AVaR(0.5))), tree3(6), trials=500,
                                    seed=2, strict=True)
    assert not rep.holds
    ce = rep.counterexample
    assert set(ce) >= {"stages", "process", "process_prime", "R_su", "R_su_prime"}


def test_flat_avar_dynamic_consistency_search_runs():
    rep = check_dynamic_consistency(FlatSystem(AVaR(0.5)), tree3(8), trials=300, seed=3)
    assert rep.trials >= 1 and rep.property == "dynamic consistency"


def test_stagewise_mappings_and_evaluate_helper():
    tree = tree3(2)
    z = tree.z
    sys_ = NestedSystem([Additive(Expectation()), MaxType(AVaR(0.5)), Additive(EVaR(0.5))])
    out = nested_evaluate(sys_, tree, z, 0, 3)
    # manual fold
    V = z.copy()
    for s, (kind, spec) in zip((2, 1, 0), (("add", EVaR(0.5)), ("max", AVaR(0.5)), ("add", Expectation()))):
        nodes = tree.stage_nodes[s]
        r = tree.conditional(spec, V, s)
        V[nodes] = z[nodes] + r if kind == "add" else np.maximum(z[nodes], r)
    assert out == pytest.approx(V[tree.stage_nodes[0]])
    with pytest.raises(ValueError):
        nested_evaluate(sys_, tree, z, 2, 2)
    with pytest.raises(ValueError):
        OneStepMapping("mul", Expectation())


def test_empty_trials_report_zero_cases():
    rep = check_recursivity(FlatSystem(AVaR(0.5)), tree3(0), 0, 1, 3, trials=0)
    assert rep.holds and rep.cases == 0
    rep = check_dynamic_consistency(NestedSystem(Additive(Expectation())), tree3(0), trials=0)
    assert rep.holds and rep.cases == 0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([Expectation(), AVaR(0.4), EVaR(0.7), MeanAVaR(0.2, 0.3)]))
def test_interchangeability(seed, spec):
    rng = np.random.default_rng(seed)
    n, k = 4, 3
    psi = rng.normal(size=(n, k))
    p = rng.dirichlet(np.ones(n))
    over, pointwise = interchange_values(spec, p, psi)
    assert over == pytest.approx(pointwise, abs=1e-9)
    assert pointwise == pytest.approx(evaluate_rows(spec, psi.min(axis=1)[None], p)[0])
