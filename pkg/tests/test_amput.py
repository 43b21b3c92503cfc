from __future__ import annotations

import numpy as np
import pytest

from riskstop.amput import (GridCoverageError, TreeTooLarge, build_grids, build_scenario_tree,
                            extract_regions, fugit_mask, price_basket, price_put, root_value,
                            value_table_csv)
from riskstop.lattice import ModelError, ModelSpec, StageDiscretization, discretize
from riskstop.risk import AVaR, Concave, EVaR, Expectation, MeanAVaR
from riskstop.snell import snell_envelope


def textbook_binomial_put(S0, K, sigma, r, T, weight_up=0.5):
    """Recombining lattice with u, d = exp(r - sigma^2/2 +- sigma), up weight ``weight_up``."""
    u = np.exp(r - 0.5 * sigma ** 2 + sigma)
    d = np.exp(r - 0.5 * sigma ** 2 - sigma)
    j = np.arange(T + 1)
    V = np.maximum(K - S0 * u ** j * d ** (T - j), 0.0)
    for t in range(T - 1, -1, -1):
        j = np.arange(t + 1)
        S = S0 * u ** j * d ** (t - j)
        # V[:-1] is the down child of node j (index j), V[1:] the up child
        cont = np.exp(-r) * (weight_up * V[1:] + (1 - weight_up) * V[:-1])
        V = np.maximum(K - S, cont)
    return V[0]


def avar_two_point_weight(alpha):
    """AVaR weight on the larger of two equally likely values."""
    return min(0.5 / (1 - alpha), 1.0)


def geo(T=25, **kw):
    base = dict(kind="geometric", s0=1.0, r=0.01, T=T, strike=1.0, sigma=0.2)
    base.update(kw)
    return ModelSpec(**base)


@pytest.mark.parametrize("S0,K,sigma,r,T", [(1.0, 1.0, 0.2, 0.01, 25), (1.0, 1.1, 0.3, 0.02, 12),
                                            (2.0, 1.8, 0.1, 0.0, 8)])
def test_binomial_expectation_matches_textbook(S0, K, sigma, r, T):
    m = ModelSpec("geometric", S0, r, T, K, sigma=sigma)
    vf = price_put(m, discretize(m, 2, mode="binomial"), Expectation())
    assert root_value(vf) == pytest.approx(textbook_binomial_put(S0, K, sigma, r, T), abs=1e-12)
    assert [g.grid.size for g in vf] == list(range(1, T + 2))


def test_binomial_avar_matches_reweighted_lattice():
    # for a put, the larger child value is the down move, so AVaR puts its weight there
    m = geo(T=15)
    vf = price_put(m, discretize(m, 2, mode="binomial"), AVaR(0.3))
    w_down = avar_two_point_weight(0.3)
    assert root_value(vf) == pytest.approx(textbook_binomial_put(1.0, 1.0, 0.2, 0.01, 15,
                                                                 weight_up=1 - w_down), abs=1e-12)


def test_zero_volatility_is_intrinsic_envelope():
    m = geo(T=6, sigma=0.0, strike=1.2)
    vf = price_put(m, discretize(m, 4, seed=0), EVaR(1.0))
    want = max(np.exp(-0.01 * t) * max(1.2 - np.exp(0.01 * t), 0) for t in range(7))
    assert root_value(vf) == pytest.approx(want) == pytest.approx(0.2)
    a = ModelSpec("arithmetic", 1.0, 0.01, 6, 1.1, sigma=0.0)
    vf = price_put(a, discretize(a, 3, seed=0), AVaR(0.5))
    want = max(max(1.1 - (1 + 0.01 * t), 0) - 0.01 * t for t in range(7))
    assert root_value(vf) == pytest.approx(want)


@pytest.mark.parametrize("spec", [Expectation(), AVaR(0.5), EVaR(0.5), MeanAVaR(0.2, 0.05)])
@pytest.mark.parametrize("kind", ["geometric", "arithmetic"])
def test_grid_recursion_equals_scenario_tree(kind, spec):
    m = ModelSpec(kind, 1.0, 0.01, 3, 1.0, sigma=0.25)
    disc = discretize(m, 4, seed=5)
    vf = price_put(m, disc, spec)
    st = build_scenario_tree(m, disc)
    if kind == "geometric":
        # the tree recursion has no discounting; compare undiscounted models instead
        m0 = ModelSpec(kind, 1.0, 0.0, 3, 1.0, sigma=0.25)
        vf = price_put(m0, disc, spec)
        st = build_scenario_tree(m0, disc)
    assert root_value(vf) == pytest.approx(snell_envelope(st.tree, spec).root_value, abs=1e-12)


def test_range_grids_give_upper_values_that_tighten():
    m = ModelSpec("arithmetic", 1.0, 0.01, 4, 1.0, sigma=0.2)
    disc = discretize(m, 6, seed=2)
    exact = root_value(price_put(m, disc, MeanAVaR(0.2, 0.05)))
    coarse = root_value(price_put(m, disc, MeanAVaR(0.2, 0.05), exact_limit=1, n_points=50))
    fine = root_value(price_put(m, disc, MeanAVaR(0.2, 0.05), exact_limit=1, n_points=100))
    assert exact - 1e-12 <= fine <= coarse + 1e-12
    assert fine - exact < 1e-2


def test_grid_coverage_enforced():
    m = geo(T=2)
    disc = discretize(m, 3, seed=0)
    grids = build_grids(m, disc)
    bad = [grids[0], grids[1][1:-1], grids[2]]
    with pytest.raises(GridCoverageError):
        price_put(m, disc, Expectation(), bad)
    with pytest.raises(ValueError):
        price_put(m, disc, Expectation(), grids[:2])


def test_regions_single_interval_and_fugit():
    m = geo(T=20)
    vf = price_put(m, discretize(m, 2, mode="binomial"), Expectation())
    rep = extract_regions(vf)
    for g, r in zip(vf[1:-1], rep.stages[1:-1]):
        # in the money the put stops on a lower interval; far out of the money
        # both payoff and continuation vanish and stopping is merely indifferent
        itm = g.grid <= m.strike
        stop_itm = g.stop[itm]
        if stop_itm.any():
            k = np.flatnonzero(stop_itm).max()
            assert stop_itm[:k + 1].all() and r.stop[0][0] == g.grid[0]
        oom_stops = g.stop & ~itm
        assert np.all(g.values[oom_stops] == 0)
        assert np.array_equal(fugit_mask(g, m.strike)[itm], g.stop[itm])
    csv = rep.to_csv()
    assert csv.splitlines()[0] == "stage,region,lo,hi"
    table = value_table_csv(vf)
    assert table.splitlines()[0] == "stage,S,value,decision"
    assert len(table.splitlines()) == 1 + sum(g.grid.size for g in vf)


def test_regions_move_with_evar_level():
    m = geo(T=8)
    disc = discretize(m, 30, seed=3)
    grids = build_grids(m, disc, n_points=300)
    buyer = [price_put(m, disc, Concave(EVaR(b)), grids) for b in (0.0, 0.5, 1.0)]
    holder = [price_put(m, disc, EVaR(b), grids) for b in (0.0, 0.5, 1.0)]
    for lo, hi in zip(buyer, buyer[1:]):
        for a, b in zip(lo, hi):
            assert np.all(~b.stop <= ~a.stop)  # continuation set shrinks
    for lo, hi in zip(holder, holder[1:]):
        for a, b in zip(lo, hi):
            assert np.all(~a.stop <= ~b.stop)  # continuation set grows
            assert np.all(a.values <= b.values + 1e-12)


def test_basket_reduces_to_univariate_call():
    b = ModelSpec("basket", [1.0], 0.01, 3, 1.0, cov=[[0.04]], weights=[1.0])
    disc = discretize(b, 5, seed=2)
    a = ModelSpec("arithmetic", 1.0, 0.01, 3, 1.0, sigma=0.2, option="call")
    flat = StageDiscretization(disc.atoms[:, :, 0], disc.probs)
    for spec in (Expectation(), AVaR(0.3), EVaR(1.0)):
        assert price_basket(b, disc, spec).value == pytest.approx(root_value(price_put(a, flat, spec)),
                                                                  abs=1e-12)


def test_basket_deterministic():
    d = 3
    b = ModelSpec("basket", np.full(d, 1.0), 0.05, 4, 2.9, cov=np.zeros((d, d)))
    disc = discretize(b, 2, seed=0)
    want = max(max(d * (1 + 0.05 * t) - 2.9, 0) - 0.05 * t for t in range(5))
    assert price_basket(b, disc, AVaR(0.5)).value == pytest.approx(want)


def test_basket_exact_and_policy_simulation_bracket():
    d = 2
    cov = 0.04 * np.array([[1.0, 0.3], [0.3, 1.0]])
    b = ModelSpec("basket", np.ones(d), 0.01, 3, 2.0, cov=cov)
    disc = discretize(b, 4, seed=1)
    exact = price_basket(b, disc, MeanAVaR(0.2, 0.05))
    approx = price_basket(b, disc, MeanAVaR(0.2, 0.05), evaluation="policy-simulation", iterations=60)
    assert approx.value <= exact.value + 1e-9
    assert approx.value == pytest.approx(exact.value, rel=1e-3)
    with pytest.raises(ValueError):
        price_basket(b, disc, Expectation(), evaluation="mc")


def test_limits_and_model_checks():
    b = ModelSpec("basket", np.ones(2), 0.01, 6, 2.0, cov=0.04 * np.eye(2))
    with pytest.raises(TreeTooLarge):
        price_basket(b, discretize(b, 20, seed=0), Expectation())
    with pytest.raises(ModelError):
        price_put(b, discretize(b, 2, seed=0), Expectation())
