"""Cutting-plane approximation of risk-averse stopping for additive walks.

For arithmetic and basket models every stage value

    V_t(x) = payoff_t(x) v C_t(x),   C_t(x) = rho(V_{t+1}(x + mu + eps))

is convex in the state, so C_t is bounded below by a growing set of affine
cuts. A cut at a trial state x uses the dual weights q of the polyhedral
risk measure at the child values: with child values v_i and subgradients g_i
of the current lower model,

    C_t(y) >= sum_i q_i (v_i + g_i . (y - x)).

The forward pass simulates the greedy policy (stop iff payoff >= lower
continuation) along sampled atom paths and hands every visited state to the
backward pass. A deterministic upper bound for univariate models comes from
chords of the convex value function on covering grids.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .amput import build_grids, price_put
from .lattice import (ModelError, ModelSpec, StageDiscretization, children, discretize,
                      sample_paths)
from .risk import (Expectation, RiskSpec, RiskSpecError, dual_weights_rows,
                   evaluate_rows, rank_by_frequency, reweight_concave)

DEDUPE_TOL = 1e-9
AUDIT_TOL = 1e-8


class ConvergenceError(RuntimeError):
    """Outer reweighting loop failed to settle."""


def _check(model: ModelSpec, spec: RiskSpec) -> None:
    if model.kind == "geometric":
        raise ModelError("cuts need an additive walk (arithmetic or basket)")
    if not spec.polyhedral:
        raise RiskSpecError(f"{spec.label()} has no polyhedral dual; cuts need one")


# ---------------------------------------------------------------------------
# state helpers: every state array is (m, d) internally


def _flat(model: ModelSpec, X: np.ndarray):
    return X[:, 0] if model.univariate else X


def _pay(model: ModelSpec, t: int, X: np.ndarray) -> np.ndarray:
    return np.asarray(model.payoff(t, _flat(model, X)), dtype=float)


def _pay_grad(model: ModelSpec, t: int, X: np.ndarray) -> np.ndarray:
    g = np.asarray(model.payoff_grad(t, _flat(model, X)), dtype=float)
    return g[:, None] if model.univariate else g


def _atoms(model: ModelSpec, disc: StageDiscretization, t: int):
    a, p = disc.stage(t)
    return a.reshape(a.shape[0], model.dim), p


def _kids(model: ModelSpec, X: np.ndarray, atoms: np.ndarray) -> np.ndarray:
    """(m, d) states and (N, d) atoms -> (m, N, d) children."""
    return X[:, None, :] + np.atleast_1d(model.drift) + atoms[None, :, :]


def _root(model: ModelSpec) -> np.ndarray:
    return np.atleast_1d(np.asarray(model.s0, dtype=float)).reshape(1, model.dim)


# ---------------------------------------------------------------------------
# cut storage


@dataclass
class Cut:
    stage: int
    slope: np.ndarray
    intercept: float
    iteration: int

    def __call__(self, X) -> np.ndarray:
        return np.asarray(X, dtype=float) @ self.slope + self.intercept


@dataclass
class StageCuts:
    """Affine minorants of C_t for one stage."""

    dim: int
    slopes: np.ndarray = None
    intercepts: np.ndarray = None
    iterations: np.ndarray = None
    trials: np.ndarray = None

    def __post_init__(self):
        if self.slopes is None:
            self.slopes = np.empty((0, self.dim))
            self.intercepts = np.empty(0)
            self.iterations = np.empty(0, dtype=int)
            self.trials = np.empty((0, self.dim))

    def __len__(self) -> int:
        return self.intercepts.size

    def add(self, slopes, intercepts, iteration: int, trials) -> None:
        self.slopes = np.vstack([self.slopes, slopes])
        self.intercepts = np.concatenate([self.intercepts, intercepts])
        self.iterations = np.concatenate([self.iterations, np.full(len(intercepts), iteration)])
        self.trials = np.vstack([self.trials, trials])

    def evaluate(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Max over cuts and the index of the active cut (-inf / -1 without cuts)."""
        if len(self) == 0:
            return np.full(X.shape[0], -np.inf), np.full(X.shape[0], -1)
        vals = X @ self.slopes.T + self.intercepts
        k = np.argmax(vals, axis=1)
        return vals[np.arange(X.shape[0]), k], k


@dataclass
class ValueApprox:
    """Lower model of V_t for t = 0..T built from payoffs and cuts."""

    model: ModelSpec
    stages: list = field(default_factory=list)

    def __post_init__(self):
        if not self.stages:
            self.stages = [StageCuts(self.model.dim) for _ in range(self.model.T)]

    @property
    def n_cuts(self) -> int:
        return sum(len(s) for s in self.stages)

    def continuation(self, t: int, X) -> np.ndarray:
        X = np.asarray(X, dtype=float).reshape(-1, self.model.dim)
        if t >= self.model.T:
            return np.full(X.shape[0], -np.inf)
        return self.stages[t].evaluate(X)[0]

    def value_and_grad(self, t: int, X) -> tuple[np.ndarray, np.ndarray]:
        X = np.asarray(X, dtype=float).reshape(-1, self.model.dim)
        pay = _pay(self.model, t, X)
        grad = _pay_grad(self.model, t, X)
        if t >= self.model.T:
            return pay, grad
        cut, k = self.stages[t].evaluate(X)
        use = cut > pay
        if np.any(use):
            grad[use] = self.stages[t].slopes[k[use]]
        return np.where(use, cut, pay), grad

    def value(self, t: int, X) -> np.ndarray:
        return self.value_and_grad(t, X)[0]

    def stop(self, t: int, X) -> np.ndarray:
        """Greedy decision: stop iff payoff >= lower continuation."""
        X = np.asarray(X, dtype=float).reshape(-1, self.model.dim)
        return _pay(self.model, t, X) >= self.continuation(t, X)

    def to_dict(self) -> dict[str, Any]:
        return {
            "model": self.model.to_dict(),
            "stages": [
                {"stage": t, "cuts": [
                    {"slope": s.tolist(), "intercept": float(b), "iteration": int(i)}
                    for s, b, i in zip(c.slopes, c.intercepts, c.iterations)]}
                for t, c in enumerate(self.stages)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ValueApprox:
        model = ModelSpec.from_dict(d["model"])
        out = cls(model)
        for st in d["stages"]:
            cuts = st["cuts"]
            if cuts:
                slopes = np.array([c["slope"] for c in cuts], dtype=float).reshape(-1, model.dim)
                out.stages[st["stage"]].add(slopes, np.array([c["intercept"] for c in cuts]),
                                            0, np.full(slopes.shape, np.nan))
                out.stages[st["stage"]].iterations = np.array([c["iteration"] for c in cuts])
        return out


# ---------------------------------------------------------------------------
# exact restricted recursion (for audits and small problems)


def exact_continuation(model: ModelSpec, disc: StageDiscretization, spec: RiskSpec,
                       t: int, X, limit: float = 1e7) -> np.ndarray:
    """C_t at states X by full enumeration of the remaining scenario tree."""
    X = np.asarray(X, dtype=float).reshape(-1, model.dim)
    N = disc.N
    if X.shape[0] * float(N) ** (model.T - t) > limit:
        raise ValueError("exact recursion too large")

    def V(s, Y):
        pay = _pay(model, s, Y)
        if s == model.T:
            return pay
        return np.maximum(pay, C(s, Y))

    def C(s, Y):
        atoms, probs = _atoms(model, disc, s + 1)
        kids = _kids(model, Y, atoms)
        vals = V(s + 1, kids.reshape(-1, model.dim)).reshape(Y.shape[0], N)
        return evaluate_rows(spec, vals, probs)

    return C(t, X)


def audit_states(model: ModelSpec, disc: StageDiscretization, t: int, count: int = 50,
                 seed: int = 0) -> np.ndarray:
    """States spread over the likely range of stage t."""
    if model.univariate:
        sd = model.increment_std * math.sqrt(max(t, 1))
        c = model.s0 + t * model.drift
        return np.linspace(c - 3 * sd, c + 3 * sd, count)[:, None]
    paths = sample_paths(model, count, seed=seed + 7919 * (t + 1), disc=disc)
    return paths.states[:, t, :]


@dataclass
class Auditor:
    """Checks every new cut against exact continuation values at fixed states."""

    states: list
    exact: list
    checked: int = 0
    failures: int = 0
    worst: float = -np.inf

    @classmethod
    def build(cls, model, disc, spec, count: int = 50, limit: float = 1e7, seed: int = 0):
        states, exact = [], []
        for t in range(model.T):
            X = audit_states(model, disc, t, count, seed)
            try:
                e = exact_continuation(model, disc, spec, t, X, limit)
            except ValueError:
                X, e = None, None
            states.append(X)
            exact.append(e)
        if any(e is None for e in exact) and model.univariate:
            # deep stages: a fine chord grid gives values >= exact, still a valid check
            grids = build_grids(model, disc, n_points=8000)
            vf = price_put(model, disc, spec, grids)
            for t in range(model.T):
                if exact[t] is None:
                    # audit inside the covered range: spread over the stage grid
                    g = grids[t]
                    X = g[np.unique(np.linspace(0, g.size - 1, count).round().astype(int))][:, None]
                    atoms, probs = disc.stage(t + 1)
                    kids = children(model, X[:, 0], atoms)
                    states[t] = X
                    exact[t] = evaluate_rows(spec, vf[t + 1](kids), probs)
        return cls(states, exact)

    def check(self, t: int, slopes, intercepts) -> None:
        if self.states[t] is None:
            return
        gap = (self.states[t] @ np.atleast_2d(slopes).T + intercepts) - self.exact[t][:, None]
        self.checked += gap.shape[1]
        bad = np.any(gap > AUDIT_TOL, axis=0)
        self.failures += int(bad.sum())
        if gap.size:
            self.worst = max(self.worst, float(gap.max()))

    def to_dict(self) -> dict[str, Any]:
        return {"checked": self.checked, "failures": self.failures,
                "max_violation": self.worst if np.isfinite(self.worst) else None}


# ---------------------------------------------------------------------------
# passes


def backward_pass(model: ModelSpec, disc: StageDiscretization, spec: RiskSpec,
                  approx: ValueApprox, trial_states, iteration: int = 0,
                  auditor: Auditor | None = None) -> int:
    """Add one cut per (deduplicated) trial state at each stage T-1..0.

    ``trial_states[t]`` is an (m, d) array of stage-t states. Returns the
    number of cuts added.
    """
    added = 0
    for t in range(model.T - 1, -1, -1):
        X = np.asarray(trial_states[t], dtype=float).reshape(-1, model.dim)
        if X.shape[0] == 0:
            continue
        X = np.unique(np.round(X / DEDUPE_TOL) * DEDUPE_TOL, axis=0)
        atoms, probs = _atoms(model, disc, t + 1)
        m, N = X.shape[0], atoms.shape[0]
        kids = _kids(model, X, atoms).reshape(-1, model.dim)
        vals, grads = approx.value_and_grad(t + 1, kids)
        vals = vals.reshape(m, N)
        q = dual_weights_rows(spec, vals, probs)
        level = np.sum(q * vals, axis=1)
        slopes = np.einsum("mn,mnd->md", q, grads.reshape(m, N, model.dim))
        intercepts = level - np.sum(slopes * X, axis=1)
        if auditor is not None:
            auditor.check(t, slopes, intercepts)
        approx.stages[t].add(slopes, intercepts, iteration, X)
        added += m
    return added


@dataclass
class ForwardResult:
    states: np.ndarray  # (count, T+1, d)
    profits: np.ndarray
    taus: np.ndarray


def simulate_policy(model: ModelSpec, approx: ValueApprox, states) -> tuple[np.ndarray, np.ndarray]:
    """Apply the greedy policy to given paths (count, T+1[, d]).

    Returns the stopped payoffs and stopping stages.
    """
    S = np.asarray(states, dtype=float)
    if model.univariate and S.ndim == 2:
        S = S[..., None]
    count = S.shape[0]
    profits = np.empty(count)
    taus = np.full(count, model.T)
    alive = np.ones(count, dtype=bool)
    for t in range(model.T + 1):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        X = S[idx, t, :]
        stop = np.ones(idx.size, dtype=bool) if t == model.T else approx.stop(t, X)
        hit = idx[stop]
        profits[hit] = _pay(model, t, S[hit, t, :])
        taus[hit] = t
        alive[hit] = False
    return profits, taus


def forward_pass(model: ModelSpec, disc: StageDiscretization, approx: ValueApprox,
                 count: int, seed: int = 0) -> ForwardResult:
    paths = sample_paths(model, count, seed=seed, disc=disc)
    S = paths.states[..., None] if model.univariate else paths.states
    profits, taus = simulate_policy(model, approx, S)
    return ForwardResult(S, profits, taus)


def upper_bound(model: ModelSpec, disc: StageDiscretization, spec: RiskSpec,
                n_points: int = 2000, exact_limit: int = 20000, grids=None) -> float:
    """Deterministic upper bound from chord interpolation on covering grids.

    ``grids`` overrides the automatic per-stage grids.
    """
    if not model.univariate:
        raise ModelError("the chord upper bound is only available for univariate models")
    if grids is None:
        grids = build_grids(model, disc, n_points=n_points, exact_limit=exact_limit)
    vf = price_put(model, disc, spec, grids)
    return float(vf[0].values[0])


# ---------------------------------------------------------------------------
# driver


@dataclass
class SDDPConfig:
    forward_paths: int = 4
    upper_cadence: int = 25
    upper_points: int = 2000
    audit: bool = True
    audit_points: int = 50
    audit_limit: float = 1e7


@dataclass
class IterationTrace:
    iteration: int
    lower: float
    upper: float | None
    elapsed_ms: float


@dataclass
class SDDPResult:
    model: ModelSpec
    spec: RiskSpec
    disc: StageDiscretization
    approx: ValueApprox
    trace: list
    audit: dict | None
    seed: int

    @property
    def lower_bound(self) -> float:
        return self.trace[-1].lower

    @property
    def upper_bound(self) -> float | None:
        ups = [r.upper for r in self.trace if r.upper is not None]
        return ups[-1] if ups else None

    def gap(self, iteration: int | None = None) -> float | None:
        """Relative gap (UB - LB) / |UB| at ``iteration`` (default: last)."""
        ub = self.upper_bound
        if ub is None:
            return None
        rec = self.trace[-1] if iteration is None else self.trace[iteration - 1]
        return (ub - rec.lower) / max(abs(ub), 1e-12)

    def trace_csv(self, timing: bool = True) -> str:
        """Bound trace; ``timing=False`` drops the wall-clock column so reruns compare byte for byte."""
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["iteration", "lower", "upper"] + (["elapsed_ms"] if timing else []))
        for r in self.trace:
            row = [r.iteration, repr(r.lower), "" if r.upper is None else repr(r.upper)]
            w.writerow(row + ([f"{r.elapsed_ms:.3f}"] if timing else []))
        return out.getvalue()

    def policy_json(self) -> str:
        d = self.approx.to_dict()
        d["risk"] = self.spec.to_dict()
        d["seed"] = self.seed
        return json.dumps(d, indent=1)


def _iter_seed(seed: int, it: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=(2, it)).generate_state(1)[0])


def solve(model: ModelSpec, spec: RiskSpec, N: int | None = None, iterations: int = 100,
          seed: int = 0, config: SDDPConfig | None = None,
          disc: StageDiscretization | None = None) -> SDDPResult:
    """Run forward/backward passes and return bounds, cuts and the trace."""
    _check(model, spec)
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    cfg = config or SDDPConfig()
    if disc is None:
        if N is None:
            raise ValueError("give N or a discretization")
        disc = discretize(model, N, seed=seed)
    approx = ValueApprox(model)
    auditor = Auditor.build(model, disc, spec, cfg.audit_points, cfg.audit_limit, seed) \
        if cfg.audit else None
    ub = None
    x0 = _root(model)
    trace = []
    start = time.perf_counter()
    for it in range(1, iterations + 1):
        fw = forward_pass(model, disc, approx, cfg.forward_paths, _iter_seed(seed, it))
        trials = [fw.states[:, t, :] for t in range(model.T)]
        backward_pass(model, disc, spec, approx, trials, it, auditor)
        lower = float(approx.value(0, x0)[0])
        if model.univariate and ub is None and (it % cfg.upper_cadence == 0 or it == iterations):
            ub = upper_bound(model, disc, spec, cfg.upper_points)
        trace.append(IterationTrace(it, lower, ub, 1e3 * (time.perf_counter() - start)))
    return SDDPResult(model, spec, disc, approx, trace,
                      auditor.to_dict() if auditor else None, seed)


def histogram_csv(values, bins, label: str) -> str:
    counts, edges = np.histogram(np.asarray(values, dtype=float), bins=bins)
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow([f"{label}_lo", f"{label}_hi", "count"])
    for lo, hi, c in zip(edges[:-1], edges[1:], counts):
        w.writerow([repr(float(lo)), repr(float(hi)), int(c)])
    return out.getvalue()


# ---------------------------------------------------------------------------
# concave (buyer) reweighting


def _lowest_counts(vals: np.ndarray, k: int, tol: float = 1e-12) -> np.ndarray:
    """Per-atom frequency of being among the k lowest values of a row.

    Atoms tied with the k-th lowest value share the remaining slots equally,
    so the count does not depend on atom order.
    """
    kth = np.sort(vals, axis=1)[:, k - 1:k]
    below = vals < kth - tol
    tied = np.abs(vals - kth) <= tol
    share = (k - below.sum(axis=1, keepdims=True)) / tied.sum(axis=1, keepdims=True)
    return (below + tied * share).sum(axis=0)


@dataclass
class ConcaveResult:
    disc: StageDiscretization
    result: SDDPResult
    changes: list
    status: str

    @property
    def outer_iterations(self) -> int:
        return len(self.changes)


def concave_outer_loop(model: ModelSpec, lam: float, alpha: float, N: int | None = None,
                       iterations: int = 100, seed: int = 0, config: SDDPConfig | None = None,
                       disc: StageDiscretization | None = None, scenarios: int = 200,
                       max_outer: int = 10, tol: float = 1e-6) -> ConcaveResult:
    """Approximate a buyer's concave MeanAVaR by reweighting stage atoms.

    Each round solves the risk-neutral problem under the current stage
    probabilities, counts per stage which atoms land among the ceil(alpha N)
    lowest next-stage values along simulated scenarios, and reassigns
    probabilities by that frequency ranking.
    """
    if disc is None:
        if N is None:
            raise ValueError("give N or a discretization")
        disc = discretize(model, N, seed=seed)
    N = disc.N
    k = max(1, math.ceil(alpha * N - 1e-9))
    changes = []
    status = "max_outer"
    res = None
    for outer in range(max_outer):
        res = solve(model, Expectation(), iterations=iterations, seed=seed, config=config, disc=disc)
        paths = sample_paths(model, scenarios, seed=_iter_seed(seed, 10_000 + outer), disc=disc)
        S = paths.states[..., None] if model.univariate else paths.states
        probs = np.empty_like(disc.probs)
        for t in range(1, model.T + 1):
            atoms, _ = _atoms(model, disc, t)
            kids = _kids(model, S[:, t - 1, :], atoms)
            vals = res.approx.value(t, kids.reshape(-1, model.dim)).reshape(scenarios, N)
            counts = _lowest_counts(vals, k)
            probs[t - 1] = reweight_concave(lam, alpha, N, rank_by_frequency(counts))
        change = float(0.5 * np.abs(probs - disc.probs).sum(axis=1).max())
        changes.append(change)
        disc = disc.with_probs(probs)
        if change < tol:
            status = "converged"
            break
    if status != "converged":
        res = solve(model, Expectation(), iterations=iterations, seed=seed, config=config, disc=disc)
    return ConcaveResult(disc, res, changes, status)
