from __future__ import annotations

import json

import numpy as np
import pytest

from riskstop.amput import build_grids, price_put, root_value
from riskstop.lattice import ModelError, ModelSpec, discretize, sample_paths
from riskstop.risk import (AVaR, DiscreteDistribution, EVaR, Expectation, MeanAVaR, RiskSpecError,
                           avar_dual_weights)
from riskstop.sddp import (SDDPConfig, ValueApprox, backward_pass, concave_outer_loop,
                           exact_continuation, forward_pass, simulate_policy, solve, upper_bound)


def ari(T=4, **kw):
    base = dict(kind="arithmetic", s0=1.0, r=0.01, T=T, strike=1.0, sigma=0.2)
    base.update(kw)
    return ModelSpec(**base)


def exact_root(model, disc, spec):
    return root_value(price_put(model, disc, spec))


def test_single_stage_backward_step_is_exact():
    m = ari(T=1)
    disc = discretize(m, 8, seed=1)
    approx = ValueApprox(m)
    X = np.linspace(0.6, 1.4, 9)[:, None]
    backward_pass(m, disc, AVaR(0.5), approx, [X])
    want = exact_continuation(m, disc, AVaR(0.5), 0, X)
    assert approx.continuation(0, X) == pytest.approx(want, abs=1e-14)


def test_cuts_on_all_reachable_states_recover_grid_value():
    m = ari(T=3)
    disc = discretize(m, 4, seed=2)
    spec = MeanAVaR(0.2, 0.05)
    grids = build_grids(m, disc)  # exact reachable sets at this size
    approx = ValueApprox(m)
    backward_pass(m, disc, spec, approx, [g[:, None] for g in grids[:-1]])
    assert approx.value(0, [[1.0]])[0] == pytest.approx(exact_root(m, disc, spec), abs=1e-12)


def test_mean_avar_cut_slope_matches_finite_difference():
    m = ari(T=1)
    disc = discretize(m, 10, seed=4)
    spec = MeanAVaR(0.2, 0.05)
    x = 0.97
    approx = ValueApprox(m)
    backward_pass(m, disc, spec, approx, [np.array([[x]])])
    slope = approx.stages[0].slopes[0, 0]
    h = 1e-7
    fd = (exact_continuation(m, disc, spec, 0, [[x + h]]) - exact_continuation(m, disc, spec, 0, [[x - h]]))[0] / (2 * h)
    assert slope == pytest.approx(fd, abs=1e-6)
    # and it splits into the mean part and the tail part
    atoms, p = disc.stage(1)
    kids = x + m.drift + atoms
    g = -(kids < m.strike).astype(float)
    tail = avar_dual_weights(0.05, DiscreteDistribution(np.maximum(m.strike - kids, 0) - m.r, p))
    assert slope == pytest.approx(0.8 * p @ g + 0.2 * tail @ g, abs=1e-12)


def test_desk_scale_bounds_and_audit():
    m = ari(T=5)
    res = solve(m, MeanAVaR(0.2, 0.05), N=10, iterations=150, seed=1)
    lows = np.array([r.lower for r in res.trace])
    assert np.all(np.diff(lows) >= -1e-14)
    exact = exact_root(m, res.disc, MeanAVaR(0.2, 0.05))
    assert np.all(lows <= exact + 1e-12)
    assert res.upper_bound >= exact - 1e-12
    assert res.audit["failures"] == 0 and res.audit["checked"] == res.approx.n_cuts
    assert res.gap() < 0.01


def test_upper_bound_refinement_is_monotone():
    m = ari(T=4)
    disc = discretize(m, 6, seed=3)
    spec = MeanAVaR(0.2, 0.05)
    coarse = build_grids(m, disc, n_points=40, exact_limit=1)
    fine = [g if g.size == 1 else np.sort(np.concatenate([g, 0.5 * (g[1:] + g[:-1])])) for g in coarse]
    u1 = upper_bound(m, disc, spec, grids=coarse)
    u2 = upper_bound(m, disc, spec, grids=fine)
    assert exact_root(m, disc, spec) - 1e-12 <= u2 <= u1 + 1e-14


def test_zero_volatility_bounds_meet():
    m = ari(T=5, sigma=0.0, strike=1.1)
    res = solve(m, AVaR(0.5), N=3, iterations=5, seed=0, config=SDDPConfig(upper_cadence=1))
    want = max(max(1.1 - (1 + 0.01 * t), 0) - 0.01 * t for t in range(6))
    assert res.lower_bound == pytest.approx(want, abs=1e-12)
    assert res.upper_bound == pytest.approx(want, abs=1e-12)


def test_single_atom_discretization_policy_value_equals_lower_bound():
    m = ari(T=4)
    res = solve(m, Expectation(), N=1, iterations=10, seed=5)
    fw = forward_pass(m, res.disc, res.approx, 3, seed=1)
    assert np.all(fw.profits == fw.profits[0])
    assert fw.profits[0] == pytest.approx(res.lower_bound, abs=1e-12)


def test_reproducible_runs():
    m = ari(T=3)
    a = solve(m, MeanAVaR(0.2, 0.05), N=5, iterations=20, seed=7)
    b = solve(m, MeanAVaR(0.2, 0.05), N=5, iterations=20, seed=7)
    assert [r.lower for r in a.trace] == [r.lower for r in b.trace]
    assert np.array_equal(a.approx.stages[0].slopes, b.approx.stages[0].slopes)
    fa = forward_pass(m, a.disc, a.approx, 4, seed=3)
    fb = forward_pass(m, b.disc, b.approx, 4, seed=3)
    assert np.array_equal(fa.states, fb.states)


def test_policy_value_below_upper_bound():
    m = ari(T=5)
    res = solve(m, Expectation(), N=10, iterations=100, seed=2)
    paths = sample_paths(m, 2000, seed=11, disc=res.disc)
    profits, taus = simulate_policy(m, res.approx, paths.states)
    se = profits.std(ddof=1) / np.sqrt(profits.size)
    assert profits.mean() <= res.upper_bound + 3 * se
    assert np.all((0 <= taus) & (taus <= m.T))


def test_trace_and_policy_export():
    m = ari(T=3)
    res = solve(m, AVaR(0.3), N=4, iterations=30, seed=0)
    lines = res.trace_csv().splitlines()
    assert lines[0] == "iteration,lower,upper,elapsed_ms" and len(lines) == 31
    assert lines[1].split(",")[2] == ""  # no upper bound before the first cadence point
    d = json.loads(res.policy_json())
    again = ValueApprox.from_dict(d)
    X = np.linspace(0.5, 1.5, 7)[:, None]
    for t in range(3):
        assert again.value(t, X) == pytest.approx(res.approx.value(t, X))
    assert d["risk"] == {"kind": "avar", "alpha": 0.3}


def test_basket_runs_without_upper_bound():
    b = ModelSpec("basket", np.ones(3), 0.01, 3, 3.0, cov=0.04 * (0.5 * np.eye(3) + 0.5))
    res = solve(b, MeanAVaR(0.2, 0.05), N=5, iterations=20, seed=0)
    assert res.upper_bound is None and res.gap() is None
    assert res.audit["failures"] == 0
    with pytest.raises(ModelError):
        upper_bound(b, res.disc, Expectation())


def test_rejections():
    with pytest.raises(ModelError):
        solve(ModelSpec("geometric", 1.0, 0.01, 3, 1.0, sigma=0.2), Expectation(), N=3, iterations=2)
    with pytest.raises(RiskSpecError):
        solve(ari(), EVaR(1.0), N=3, iterations=2)
    with pytest.raises(ValueError):
        solve(ari(), Expectation(), N=3, iterations=0)
    with pytest.raises(ValueError):
        solve(ari(), Expectation(), iterations=2)


def test_concave_loop_risk_neutral_stops_at_once():
    out = concave_outer_loop(ari(T=3), 0.0, 0.05, N=10, iterations=20, seed=0)
    assert out.status == "converged" and out.outer_iterations == 1
    assert np.all(out.disc.probs == 0.1)


def test_concave_loop_weights_follow_formula():
    N = 20
    out = concave_outer_loop(ari(T=3), 0.2, 0.05, N=N, iterations=20, seed=0, max_outer=3)
    for row in out.disc.probs:
        vals = np.sort(row)[::-1]
        assert vals[0] == pytest.approx(0.8 / N + 0.2)
        assert vals[1:] == pytest.approx(np.full(N - 1, 0.8 / N))
    assert out.status in ("converged", "max_outer")
    assert len(out.changes) == out.outer_iterations
