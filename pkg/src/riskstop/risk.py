"""Law-invariant coherent risk measures on finite discrete distributions.

Every risk evaluation in the package goes through :func:`evaluate_rows`, which
applies one :class:`RiskSpec` to many small distributions at once (one per
row). This is how the conditional mappings are applied node by node: each row
holds the child values of one node and the child probabilities.

Conventions
-----------
Outcomes are rewards or costs with "larger is riskier". ``AVaR(alpha)``
averages the upper ``1 - alpha`` probability tail, so ``alpha = 0`` is the
expectation. ``EVaR(beta)`` is ``inf_{u>0} (beta + log E exp(uZ)) / u``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

PROB_TOL = 1e-12
RENORM_TOL = 1e-9

# golden-section search on log(1/u) for EVaR
_EVAR_LOG_BOUNDS = (-40.0, 40.0)
_EVAR_ITERS = 56  # bracket width 80 * 0.618^56 ~ 1e-10; f is flat at its minimum
_GOLD = (math.sqrt(5.0) - 1.0) / 2.0

KINDS = ("expectation", "avar", "evar", "mean_avar", "concave")


class RiskSpecError(ValueError):
    """Invalid risk-measure parameters."""


class ScalingError(ArithmeticError):
    """EVaR evaluation failed even after max-shift normalization."""


def _as_probs(probs, n: int) -> np.ndarray:
    p = np.asarray(probs, dtype=float)
    if p.shape != (n,):
        raise ValueError(f"expected {n} probabilities, got shape {p.shape}")
    if np.any(~np.isfinite(p)) or np.any(p < -PROB_TOL):
        raise ValueError("probabilities must be finite and nonnegative")
    p = np.clip(p, 0.0, None)
    total = p.sum()
    if abs(total - 1.0) > RENORM_TOL:
        raise ValueError(f"probabilities sum to {total!r}, not 1")
    if total != 1.0:
        p = p / total
    return p


@dataclass(frozen=True, eq=False)
class DiscreteDistribution:
    """Finite list of atoms with probabilities.

    Probabilities off by less than 1e-9 in total are renormalized; larger
    deviations are rejected.
    """

    atoms: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        z = np.array(self.atoms, dtype=float).reshape(-1)
        if z.size == 0:
            raise ValueError("distribution needs at least one atom")
        object.__setattr__(self, "atoms", z)
        object.__setattr__(self, "probs", _as_probs(self.probs, z.size))

    @classmethod
    def uniform(cls, atoms) -> DiscreteDistribution:
        z = np.asarray(atoms, dtype=float).reshape(-1)
        return cls(z, np.full(z.size, 1.0 / max(z.size, 1)))

    def __len__(self) -> int:
        return self.atoms.size

    def mean(self) -> float:
        return float(self.probs @ self.atoms)

    def map(self, fn) -> DiscreteDistribution:
        """Apply ``fn`` to the atoms, keeping the probabilities."""
        return DiscreteDistribution(fn(self.atoms), self.probs)


@dataclass(frozen=True)
class RiskSpec:
    """Declarative one-step risk mapping.

    Build instances with the helpers :func:`Expectation`, :func:`AVaR`,
    :func:`EVaR`, :func:`MeanAVaR` and :func:`Concave`.
    """

    kind: str
    alpha: float = 0.0
    beta: float = 0.0
    lam: float = 0.0
    inner: RiskSpec | None = field(default=None)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise RiskSpecError(f"unknown risk kind {self.kind!r}")
        if self.kind in ("avar", "mean_avar") and not 0.0 <= self.alpha < 1.0:
            raise RiskSpecError(f"alpha must lie in [0, 1), got {self.alpha}")
        if self.kind == "evar" and not (self.beta >= 0.0 and math.isfinite(self.beta)):
            raise RiskSpecError(f"beta must be finite and >= 0, got {self.beta}")
        if self.kind == "mean_avar" and not 0.0 <= self.lam <= 1.0:
            raise RiskSpecError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.kind == "concave":
            if self.inner is None:
                raise RiskSpecError("concave spec needs an inner spec")
            if self.inner.kind == "concave":
                raise RiskSpecError("concave specs cannot be nested")
        elif self.inner is not None:
            raise RiskSpecError(f"{self.kind} spec takes no inner spec")

    @property
    def polyhedral(self) -> bool:
        """True for convex specs with a finite dual set (usable for cuts)."""
        return self.kind in ("expectation", "avar", "mean_avar")

    def label(self) -> str:
        if self.kind == "expectation":
            return "E"
        if self.kind == "avar":
            return f"AVaR({self.alpha:g})"
        if self.kind == "evar":
            return f"EVaR({self.beta:g})"
        if self.kind == "mean_avar":
            return f"MeanAVaR({self.lam:g},{self.alpha:g})"
        return f"Concave({self.inner.label()})"

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"kind": self.kind}
        if self.kind in ("avar", "mean_avar"):
            d["alpha"] = self.alpha
        if self.kind == "evar":
            d["beta"] = self.beta
        if self.kind == "mean_avar":
            d["lambda"] = self.lam
        if self.kind == "concave":
            d["inner"] = self.inner.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> RiskSpec:
        allowed = {"kind", "alpha", "beta", "lambda", "inner"}
        unknown = set(d) - allowed
        if unknown:
            raise RiskSpecError(f"unknown risk fields: {sorted(unknown)}")
        if "kind" not in d:
            raise RiskSpecError("risk spec needs a 'kind'")
        inner = d.get("inner")
        return cls(
            kind=str(d["kind"]).lower(),
            alpha=float(d.get("alpha", 0.0)),
            beta=float(d.get("beta", 0.0)),
            lam=float(d.get("lambda", 0.0)),
            inner=cls.from_dict(inner) if inner is not None else None,
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> RiskSpec:
        return cls.from_dict(json.loads(text))


def Expectation() -> RiskSpec:
    return RiskSpec("expectation")


def AVaR(alpha: float) -> RiskSpec:
    return RiskSpec("avar", alpha=alpha)


def EVaR(beta: float) -> RiskSpec:
    return RiskSpec("evar", beta=beta)


def MeanAVaR(lam: float, alpha: float) -> RiskSpec:
    return RiskSpec("mean_avar", alpha=alpha, lam=lam)


def Concave(inner: RiskSpec) -> RiskSpec:
    return RiskSpec("concave", inner=inner)


# ---------------------------------------------------------------------------
# vectorized evaluation


def _rows(values, probs) -> tuple[np.ndarray, np.ndarray]:
    z = np.atleast_2d(np.asarray(values, dtype=float))
    p = np.asarray(probs, dtype=float)
    p = np.broadcast_to(p, z.shape) if p.ndim == 1 else np.atleast_2d(p)
    if p.shape != z.shape:
        raise ValueError(f"values {z.shape} and probs {p.shape} do not match")
    return z, p


def _avar_weights(z: np.ndarray, p: np.ndarray, alpha: float) -> np.ndarray:
    if alpha == 0.0:
        return p.copy()
    order = np.argsort(-z, axis=1, kind="stable")
    ps = np.take_along_axis(p, order, axis=1)
    cum = np.cumsum(ps, axis=1)
    cum = cum / cum[:, -1:]
    upper = np.minimum(cum / (1.0 - alpha), 1.0)
    lower = np.concatenate([np.zeros((z.shape[0], 1)), upper[:, :-1]], axis=1)
    qs = upper - lower
    q = np.empty_like(qs)
    np.put_along_axis(q, order, qs, axis=1)
    return q


def _evar(z: np.ndarray, p: np.ndarray, beta: float) -> np.ndarray:
    if not np.all(np.isfinite(z)):
        raise ScalingError("EVaR needs finite atoms")
    if beta == 0.0:
        return np.sum(p * z, axis=1)
    live = p > 0
    top = np.max(np.where(live, z, -np.inf), axis=1)
    low = np.min(np.where(live, z, np.inf), axis=1)
    spread = top - low
    out = top.copy()
    busy = spread > 0
    if not np.any(busy):
        return out
    zs, ps = z[busy], p[busy]
    # shift by the max so every exponent is <= 0 and the top atom keeps the log finite
    y = np.minimum((zs - top[busy, None]) / spread[busy, None], 0.0)

    def f(x):
        t = np.exp(x)
        mgf = (ps * np.exp(y / t[:, None])).sum(axis=1)
        return t * (beta + np.log(mgf))

    m = y.shape[0]
    a = np.full(m, _EVAR_LOG_BOUNDS[0])
    b = np.full(m, _EVAR_LOG_BOUNDS[1])
    c = b - _GOLD * (b - a)
    d = a + _GOLD * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(_EVAR_ITERS):
        left = fc <= fd
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        new_c = b - _GOLD * (b - a)
        new_d = a + _GOLD * (b - a)
        # reuse the surviving interior point
        c_next = np.where(left, new_c, d)
        d_next = np.where(left, c, new_d)
        f_new = f(np.where(left, new_c, new_d))
        fc, fd = np.where(left, f_new, fd), np.where(left, fc, f_new)
        c, d = c_next, d_next
    best = np.minimum(np.minimum(fc, fd), 0.0)  # 0 is the u -> inf limit (the max)
    if not np.all(np.isfinite(best)):
        raise ScalingError("EVaR objective is not finite after normalization")
    out[busy] = top[busy] + spread[busy] * best
    return out


def evaluate_rows(spec: RiskSpec, values, probs) -> np.ndarray:
    """Evaluate ``spec`` on every row of ``values``.

    ``probs`` is either one probability vector shared by all rows or a matrix
    of the same shape as ``values``. Rows must already be valid distributions.
    """
    z, p = _rows(values, probs)
    kind = spec.kind
    if kind == "expectation":
        return np.sum(p * z, axis=1)
    if kind == "avar":
        return np.sum(_avar_weights(z, p, spec.alpha) * z, axis=1)
    if kind == "mean_avar":
        mean = np.sum(p * z, axis=1)
        tail = np.sum(_avar_weights(z, p, spec.alpha) * z, axis=1)
        return (1.0 - spec.lam) * mean + spec.lam * tail
    if kind == "evar":
        return _evar(z, p, spec.beta)
    return -evaluate_rows(spec.inner, -z, p)


def evaluate(spec: RiskSpec, dist: DiscreteDistribution) -> float:
    """Risk of a single distribution."""
    return float(evaluate_rows(spec, dist.atoms[None, :], dist.probs)[0])


def dual_weights_rows(spec: RiskSpec, values, probs) -> np.ndarray:
    """Maximizing dual probabilities of a polyhedral spec, row by row.

    ``sum(q * values, axis=1)`` reproduces :func:`evaluate_rows`.
    """
    z, p = _rows(values, probs)
    if spec.kind == "expectation":
        return p.copy()
    if spec.kind == "avar":
        return _avar_weights(z, p, spec.alpha)
    if spec.kind == "mean_avar":
        return (1.0 - spec.lam) * p + spec.lam * _avar_weights(z, p, spec.alpha)
    raise RiskSpecError(f"{spec.label()} has no polyhedral dual")


def avar_dual_weights(alpha: float, dist: DiscreteDistribution) -> np.ndarray:
    """Dual weights attaining AVaR: 0 <= q_i <= p_i / (1 - alpha), sum 1.

    The atom at the quantile gets the fractional remainder.
    """
    if not 0.0 <= alpha < 1.0:
        raise RiskSpecError(f"alpha must lie in [0, 1), got {alpha}")
    return _avar_weights(dist.atoms[None, :], dist.probs[None, :], alpha)[0]


def rank_by_frequency(counts: Sequence[float]) -> np.ndarray:
    """Atom indices sorted by decreasing count; ties keep index order."""
    return np.argsort(-np.asarray(counts, dtype=float), kind="stable")


def reweight_concave(lam: float, alpha: float, n: int, ranking: Sequence[int]) -> np.ndarray:
    """Reassign probabilities to ``n`` equally likely atoms.

    ``ranking`` lists atom indices from most to least frequently "bad". The
    first ``floor(alpha n)`` atoms receive ``(1-lam)/n + lam/(alpha n)``, the
    next one receives the fractional remainder and the rest ``(1-lam)/n``.
    """
    an = alpha * n
    if an <= 0:
        raise RiskSpecError("alpha * n must be positive")
    if not 0.0 <= lam <= 1.0:
        raise RiskSpecError(f"lambda must lie in [0, 1], got {lam}")
    ranking = np.asarray(ranking, dtype=int)
    if sorted(ranking.tolist()) != list(range(n)):
        raise ValueError("ranking must be a permutation of range(n)")
    k = min(int(math.floor(an + 1e-9)), n)
    frac = an - k
    if abs(frac) < 1e-12:
        frac = 0.0
    base = (1.0 - lam) / n
    out = np.full(n, base)
    out[ranking[:k]] = base + lam / an
    if k < n and frac > 0:
        out[ranking[k]] = base + lam * frac / an
    return out
