"""American put and basket option values under nested risk preferences.

Univariate models are solved by backward recursion on per-stage state grids:

    V_T(S) = payoff_T(S)
    V_t(S) = payoff_t(S) v  disc * rho(V_{t+1}(children of S))

with ``disc = exp(-r)`` for the geometric walk and 1 for the arithmetic walk
(whose payoff already subtracts r t). Next-stage values are read off by
piecewise-linear interpolation in S.

Grids
-----
Stage grids cover the set of states reachable from S_0 under the
discretization, so no child ever falls outside the next grid. While the
reachable set is small it *is* the grid (a recombining binomial lattice stays
exact). Beyond ``exact_limit`` points the grid becomes ``n_points`` points over
a central window of +-``width`` standard deviations of the T-stage increment,
plus sparser points out to the reachable extremes and the strike.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .lattice import ModelError, ModelSpec, StageDiscretization, children
from .risk import RiskSpec, evaluate_rows
from .snell import FiltrationTree, SnellResult, snell_envelope

TOL = 1e-10


class GridCoverageError(ValueError):
    """A child state fell outside the next stage's grid."""


class TreeTooLarge(ValueError):
    """Exact scenario tree would exceed the node bound."""


@dataclass
class GridValueFunction:
    """Stage-t values on a grid, with payoff and continuation parts."""

    stage: int
    grid: np.ndarray
    values: np.ndarray
    payoff: np.ndarray
    continuation: np.ndarray

    def __call__(self, states) -> np.ndarray:
        s = np.asarray(states, dtype=float)
        lo, hi = self.grid[0], self.grid[-1]
        slack = 1e-9 * max(1.0, abs(lo), abs(hi))
        if np.any(s < lo - slack) or np.any(s > hi + slack):
            raise GridCoverageError(f"state outside the stage-{self.stage} grid [{lo}, {hi}]")
        return np.interp(s, self.grid, self.values)

    @property
    def stop(self) -> np.ndarray:
        """Grid points where stopping is optimal (payoff >= continuation)."""
        if self.continuation is None or np.all(np.isnan(self.continuation)):
            return np.ones(self.grid.size, dtype=bool)
        return self.payoff >= self.continuation - TOL


def _dedupe(x: np.ndarray) -> np.ndarray:
    x = np.sort(x.ravel())
    if x.size < 2:
        return x
    keep = np.concatenate([[True], np.diff(x) > 1e-12 * (1.0 + np.abs(x[1:]))])
    return x[keep]


def reachable_bounds(model: ModelSpec, disc: StageDiscretization) -> list[tuple[float, float]]:
    """Smallest and largest state reachable at each stage 0..T."""
    out = [(model.s0, model.s0)]
    lo = hi = model.s0
    for t in range(1, model.T + 1):
        atoms, probs = disc.stage(t)
        live = atoms[probs > 0] if np.any(probs > 0) else atoms
        lo = float(children(model, [lo], [live.min()])[0, 0])
        hi = float(children(model, [hi], [live.max()])[0, 0])
        out.append((lo, hi))
    return out


def build_grids(model: ModelSpec, disc: StageDiscretization, n_points: int = 2000,
                width: float = 5.0, exact_limit: int = 20000) -> list[np.ndarray]:
    """Per-stage grids covering every reachable state (see module notes)."""
    if not model.univariate:
        raise ModelError("state grids need a univariate model")
    if disc.T < model.T:
        raise ModelError("discretization has fewer stages than the model")
    bounds = reachable_bounds(model, disc)
    grids = [np.array([model.s0])]
    exact = True
    sd = model.increment_std * np.sqrt(model.T)
    for t in range(1, model.T + 1):
        atoms, probs = disc.stage(t)
        if exact:
            cand = children(model, grids[-1], atoms[probs > 0])
            if cand.size <= exact_limit * 4:
                pts = _dedupe(cand)
                if pts.size <= exact_limit:
                    grids.append(pts)
                    continue
            exact = False
        lo, hi = bounds[t]
        if model.kind == "geometric":
            centre = np.log(model.s0) + t * (model.r - 0.5 * model.sigma ** 2)
            a, b = np.log(lo), np.log(hi)
        else:
            centre = model.s0 + t * model.drift
            a, b = lo, hi
        c_lo, c_hi = max(a, centre - width * sd), min(b, centre + width * sd)
        parts = [np.array([a, b])]
        if c_lo < c_hi:
            parts.append(np.linspace(c_lo, c_hi, n_points))
        n_tail = max(n_points // 8, 2)
        if a < c_lo:
            parts.append(np.linspace(a, c_lo, n_tail))
        if c_hi < b:
            parts.append(np.linspace(c_hi, b, n_tail))
        pts = np.concatenate(parts)
        if model.kind == "geometric":
            pts = np.exp(pts)
            pts[0], pts[1] = lo, hi
        if lo < model.strike < hi:
            pts = np.append(pts, model.strike)
        grids.append(_dedupe(pts))
    return grids


def price_put(model: ModelSpec, disc: StageDiscretization, spec: RiskSpec,
              grids: list[np.ndarray] | None = None, **grid_kw) -> list[GridValueFunction]:
    """Backward recursion for a univariate American option on state grids.

    Despite the name the payoff follows ``model.option`` (a put by default).
    Returns one :class:`GridValueFunction` per stage 0..T.
    """
    if not model.univariate:
        raise ModelError("price_put handles univariate models; use price_basket")
    if grids is None:
        grids = build_grids(model, disc, **grid_kw)
    if len(grids) != model.T + 1:
        raise ValueError(f"need {model.T + 1} stage grids")
    grids = [np.sort(np.asarray(g, dtype=float)) for g in grids]
    disc_factor = np.exp(-model.r) if model.kind == "geometric" else 1.0
    T = model.T
    pay = model.payoff(T, grids[T])
    out = [None] * (T + 1)
    out[T] = GridValueFunction(T, grids[T], pay, pay, np.full(pay.size, np.nan))
    for t in range(T - 1, -1, -1):
        atoms, probs = disc.stage(t + 1)
        ch = children(model, grids[t], atoms)
        nxt = out[t + 1]
        try:
            vals = nxt(ch)
        except GridCoverageError as e:
            raise GridCoverageError(f"stage {t} children not covered: {e}") from None
        cont = disc_factor * evaluate_rows(spec, vals, probs)
        pay = model.payoff(t, grids[t])
        out[t] = GridValueFunction(t, grids[t], np.maximum(pay, cont), pay, cont)
    return out


def root_value(values: list[GridValueFunction]) -> float:
    return float(values[0].values[0]) + 0.0


def value_table_csv(values: list[GridValueFunction]) -> str:
    """CSV with columns stage, S, value, decision."""
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["stage", "S", "value", "decision"])
    for g in values:
        stop = g.stop
        for s, v, k in zip(g.grid, g.values, stop):
            w.writerow([g.stage, repr(float(s)), repr(float(v)), "stop" if k else "continue"])
    return out.getvalue()


# ---------------------------------------------------------------------------
# regions


def _runs(grid: np.ndarray, mask: np.ndarray) -> list[tuple[float, float]]:
    out = []
    i = 0
    n = mask.size
    while i < n:
        if mask[i]:
            j = i
            while j + 1 < n and mask[j + 1]:
                j += 1
            out.append((float(grid[i]), float(grid[j])))
            i = j + 1
        else:
            i += 1
    return out


@dataclass
class StageRegions:
    stage: int
    stop: list = field(default_factory=list)
    cont: list = field(default_factory=list)


@dataclass
class RegionReport:
    """Stopping and continuation sets per stage as runs of grid points."""

    stages: list

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["stage", "region", "lo", "hi"])
        for r in self.stages:
            for name, runs in (("stop", r.stop), ("continue", r.cont)):
                for lo, hi in runs:
                    w.writerow([r.stage, name, repr(lo), repr(hi)])
        return out.getvalue()


def extract_regions(values: list[GridValueFunction]) -> RegionReport:
    """Scan each stage grid for maximal runs of stop / continue points."""
    stages = []
    for g in values:
        stop = g.stop
        stages.append(StageRegions(g.stage, _runs(g.grid, stop), _runs(g.grid, ~stop)))
    return RegionReport(stages)


def fugit_mask(g: GridValueFunction, strike: float, tol: float = TOL) -> np.ndarray:
    """Grid points with S + V_t(S) <= K."""
    return g.grid + g.values <= strike + tol


# ---------------------------------------------------------------------------
# basket


@dataclass
class ScenarioTree:
    """Full (non-recombining) scenario tree of a model under a discretization."""

    tree: FiltrationTree
    states: np.ndarray


def build_scenario_tree(model: ModelSpec, disc: StageDiscretization,
                        max_nodes: int = 200_000) -> ScenarioTree:
    N, T = disc.N, model.T
    total = sum(N ** t for t in range(T + 1))
    if total > max_nodes:
        raise TreeTooLarge(f"scenario tree would have {total} nodes (limit {max_nodes})")
    d = model.dim
    states = [np.atleast_2d(np.asarray(model.s0, dtype=float)).reshape(1, d)]
    parent = [np.array([-1])]
    prob = [np.array([1.0])]
    offset = 0
    for t in range(1, T + 1):
        atoms, probs = disc.stage(t)
        prev = states[-1]
        a = atoms.reshape(N, d)
        if model.univariate:
            ch = children(model, prev[:, 0], a[:, 0])[..., None]
        else:
            ch = children(model, prev, a)
        states.append(ch.reshape(-1, d))
        parent.append(np.repeat(np.arange(prev.shape[0]) + offset, N))
        prob.append(np.tile(probs, prev.shape[0]))
        offset += prev.shape[0]
    S = np.concatenate(states)
    stage = np.concatenate([np.full(s.shape[0], t) for t, s in enumerate(states)])
    flat = S[:, 0] if model.univariate else S
    z = np.array([model.payoff(int(t), flat[i]) for i, t in enumerate(stage)], dtype=float)
    tree = FiltrationTree(np.concatenate(parent), np.concatenate(prob), z)
    return ScenarioTree(tree, flat)


@dataclass
class BasketResult:
    value: float
    method: str
    snell: SnellResult | None = None
    scenario_tree: ScenarioTree | None = None
    sddp: object | None = None


def price_basket(model: ModelSpec, disc: StageDiscretization, spec: RiskSpec,
                 evaluation: str = "exact-tree", max_nodes: int = 200_000,
                 **sddp_kw) -> BasketResult:
    """Value of sup_tau rho_{0,T}([w.S_tau - K]_+ - r tau).

    ``exact-tree`` runs the Snell recursion on the full scenario tree;
    ``policy-simulation`` returns the SDDP lower bound and greedy policy.
    """
    if evaluation == "exact-tree":
        st = build_scenario_tree(model, disc, max_nodes)
        res = snell_envelope(st.tree, spec)
        return BasketResult(res.root_value, evaluation, snell=res, scenario_tree=st)
    if evaluation == "policy-simulation":
        from .sddp import solve
        out = solve(model, spec, disc=disc, **sddp_kw)
        return BasketResult(out.lower_bound, evaluation, sddp=out)
    raise ValueError(f"unknown evaluation {evaluation!r}")
