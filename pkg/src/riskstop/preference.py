"""Desk-scale laboratory for multistage preference systems.

A preference system maps a process (Z_t, ..., Z_u) on a tree to an
F_t-measurable value R_{t,u}. Two families are provided:

* :class:`NestedSystem` folds one-step mappings backwards (recursive by
  construction);
* :class:`FlatSystem` applies one conditional risk measure to the whole sum
  Z_t + ... + Z_u at once (recursive only for the expectation).

The ``check_*`` functions search random processes for violations of
recursivity and (strict) dynamic consistency and return a
:class:`PropertyReport`.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .risk import RiskSpec, evaluate_rows
from .snell import FiltrationTree

TOL = 1e-10
ONESTEP_KINDS = ("additive", "max", "min")


@dataclass(frozen=True)
class OneStepMapping:
    """(Z_s, Z_{s+1}) -> Z_s (+ | v | ^) rho_{s|F_s}(Z_{s+1})."""

    kind: str
    spec: RiskSpec

    def __post_init__(self):
        if self.kind not in ONESTEP_KINDS:
            raise ValueError(f"unknown one-step kind {self.kind!r}")

    def combine(self, current, risk):
        if self.kind == "additive":
            return current + risk
        if self.kind == "max":
            return np.maximum(current, risk)
        return np.minimum(current, risk)


def Additive(spec: RiskSpec) -> OneStepMapping:
    return OneStepMapping("additive", spec)


def MaxType(spec: RiskSpec) -> OneStepMapping:
    return OneStepMapping("max", spec)


def MinType(spec: RiskSpec) -> OneStepMapping:
    return OneStepMapping("min", spec)


def _check_stages(tree: FiltrationTree, t: int, u: int) -> None:
    if not 0 <= t < u <= tree.T:
        raise ValueError(f"need 0 <= t < u <= {tree.T}, got t={t}, u={u}")


@dataclass
class NestedSystem:
    """Preference system generated by one-step mappings (one per transition or shared)."""

    mappings: OneStepMapping | Sequence[OneStepMapping]

    def mapping(self, s: int) -> OneStepMapping:
        if isinstance(self.mappings, OneStepMapping):
            return self.mappings
        return self.mappings[s]

    def evaluate(self, tree: FiltrationTree, process, t: int, u: int) -> np.ndarray:
        _check_stages(tree, t, u)
        z = np.asarray(process, dtype=float)
        V = z.copy()
        for s in range(u - 1, t - 1, -1):
            nodes = tree.stage_nodes[s]
            m = self.mapping(s)
            V[nodes] = m.combine(z[nodes], tree.conditional(m.spec, V, s))
        return V[tree.stage_nodes[t]]


@dataclass
class FlatSystem:
    """R_{t,u}(Z) = rho_{|F_t}(Z_t + ... + Z_u), one conditional measure over the horizon."""

    spec: RiskSpec

    def evaluate(self, tree: FiltrationTree, process, t: int, u: int) -> np.ndarray:
        _check_stages(tree, t, u)
        z = np.asarray(process, dtype=float)
        # running sums from stage t, and each stage-u node's stage-t ancestor
        acc = z.copy()
        anc = np.arange(tree.n_nodes)
        for i in range(tree.n_nodes):
            p = tree.parent[i]
            if tree.stage[i] > t:
                acc[i] = acc[p] + z[i]
                anc[i] = anc[p]
        heads = tree.stage_nodes[t]
        tails = tree.stage_nodes[u]
        groups = [tails[anc[tails] == h] for h in heads]
        width = max(g.size for g in groups)
        vals = np.zeros((heads.size, width))
        prob = np.zeros((heads.size, width))
        for r, (h, g) in enumerate(zip(heads, groups)):
            vals[r, :g.size] = acc[g]
            prob[r, :g.size] = tree.path_prob[g] / tree.path_prob[h]
        return evaluate_rows(self.spec, vals, prob)


def nested_evaluate(system, tree: FiltrationTree, process, t: int, u: int) -> np.ndarray:
    """R_{t,u}(Z_t, ..., Z_u) at each stage-t node (ordered like ``tree.stage_nodes[t]``)."""
    return system.evaluate(tree, process, t, u)


@dataclass
class PropertyReport:
    property: str
    holds: bool
    trials: int
    cases: int = 0
    counterexample: dict[str, Any] | None = field(default=None)

    def to_dict(self) -> dict[str, Any]:
        d = {"property": self.property, "holds": self.holds, "trials": self.trials, "cases": self.cases}
        if self.counterexample is not None:
            d["counterexample"] = self.counterexample
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _random_process(rng: np.random.Generator, tree: FiltrationTree) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, tree.n_nodes)


def check_recursivity(system, tree: FiltrationTree, t: int, v: int, u: int,
                      trials: int = 1000, seed: int = 0, tol: float = TOL) -> PropertyReport:
    """Search for a process with R_{t,u}(Z) != R_{t,v}(Z_t..Z_{v-1}, R_{v,u}(Z_v..Z_u))."""
    if not t < v < u:
        raise ValueError("need t < v < u")
    rng = np.random.default_rng(seed)
    for k in range(trials):
        z = _random_process(rng, tree)
        whole = system.evaluate(tree, z, t, u)
        w = z.copy()
        w[tree.stage_nodes[v]] = system.evaluate(tree, z, v, u)
        split = system.evaluate(tree, w, t, v)
        gap = np.abs(whole - split)
        if np.any(gap > tol):
            j = int(np.argmax(gap))
            ce = {"trial": k, "tree": tree.to_dict(), "process": z.tolist(),
                  "node": int(tree.stage_nodes[t][j]), "whole": float(whole[j]), "split": float(split[j])}
            return PropertyReport("recursivity", False, k + 1, k + 1, ce)
    return PropertyReport("recursivity", True, trials, trials)


def check_dynamic_consistency(system, tree: FiltrationTree, trials: int = 1000, seed: int = 0,
                              strict: bool = False, tol: float = TOL) -> PropertyReport:
    """Search for pairs Z, Z' agreeing on stages s..t-1 that violate the forward implication.

    Z' raises a random subset of the stage >= t values of Z by random
    amounts (or, every fourth trial, redraws them); pairs whose premise
    R_{t,u}(Z) <= R_{t,u}(Z') fails are skipped. With ``strict`` the premise
    and conclusion also require a strict improvement somewhere.
    """
    name = "strict dynamic consistency" if strict else "dynamic consistency"
    if tree.T < 2:
        raise ValueError("dynamic consistency needs at least three stages")
    rng = np.random.default_rng(seed)
    cases = 0
    for k in range(trials):
        s, t, u = sorted(rng.choice(tree.T + 1, size=3, replace=False).tolist())
        z = _random_process(rng, tree)
        late = tree.stage >= t
        z2 = z.copy()
        if k % 4 == 3:
            z2[late] = rng.uniform(-1.0, 1.0, int(late.sum()))
        else:
            bump = rng.uniform(0.0, 1.0, tree.n_nodes) * (rng.random(tree.n_nodes) < 0.5)
            z2[late] += bump[late]
        a, b = system.evaluate(tree, z, t, u), system.evaluate(tree, z2, t, u)
        if np.any(a > b + tol):
            continue
        if strict and not np.any(a < b - tol):
            continue
        cases += 1
        a_s, b_s = system.evaluate(tree, z, s, u), system.evaluate(tree, z2, s, u)
        ok = not np.any(a_s > b_s + tol)
        if strict:
            ok = ok and bool(np.any(a_s < b_s - tol))
        if not ok:
            ce = {"trial": k, "stages": [s, t, u], "tree": tree.to_dict(),
                  "process": z.tolist(), "process_prime": z2.tolist(),
                  "R_su": a_s.tolist(), "R_su_prime": b_s.tolist()}
            return PropertyReport(name, False, k + 1, cases, ce)
    return PropertyReport(name, True, trials, cases)


def interchange_values(spec: RiskSpec, probs, psi) -> tuple[float, float]:
    """Compare min over selections eta of rho(psi[i, eta_i]) with rho(min_y psi[i, y]).

    ``psi`` has one row per atom and one column per choice; every selection
    is enumerated.
    """
    psi = np.asarray(psi, dtype=float)
    n, k = psi.shape
    if k ** n > 2 ** 20:
        raise ValueError("too many selections to enumerate")
    sel = np.array(list(itertools.product(range(k), repeat=n)))
    picked = psi[np.arange(n)[None, :], sel]
    over_selections = float(evaluate_rows(spec, picked, probs).min())
    pointwise = float(evaluate_rows(spec, psi.min(axis=1)[None, :], probs)[0])
    return over_selections, pointwise
