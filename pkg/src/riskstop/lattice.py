"""Random-walk price models, stage discretizations and scenario sampling.

Seeding
-------
All randomness derives from one integer master seed through
``numpy.random.SeedSequence(seed, spawn_key=...)``:

* stage ``t`` of a discretization uses ``spawn_key=(0, t)``;
* path ``i`` of :func:`sample_paths` uses ``spawn_key=(1, i)``.

A path set therefore depends only on ``(seed, count)``, and a discretization
only on ``(seed, N)``. Gaussian draws use the inverse normal CDF applied to
53-bit uniforms strictly inside (0, 1).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Any, Iterator

import numpy as np
from scipy.special import ndtri

MODEL_KINDS = ("geometric", "arithmetic", "basket")


class ModelError(ValueError):
    """Invalid model or discretization request."""


@dataclass
class ModelSpec:
    """Random-walk price model with an option written on it.

    ``geometric``:  S_t = S_{t-1} exp(r - sigma^2/2 + eps), eps ~ N(0, sigma^2)
    ``arithmetic``: S_t = S_{t-1} + r S_0 + eps,           eps ~ N(0, sigma^2 S_0^2)
    ``basket``:     S_t = S_{t-1} + r S_0 + eps (vectors),  eps ~ N(0, cov)

    The geometric model pays ``[K - S]_+`` and discounts the continuation by
    ``exp(-r)`` per stage. Arithmetic and basket models pay the option value
    minus ``r t`` at stage ``t`` and do not discount.
    """

    kind: str
    s0: Any
    r: float
    T: int
    strike: float
    sigma: float | None = None
    cov: Any = None
    weights: Any = None
    option: str | None = None
    _chol: np.ndarray | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ModelError(f"unknown model kind {self.kind!r}")
        if int(self.T) != self.T or self.T < 1:
            raise ModelError(f"T must be a positive integer, got {self.T}")
        self.T = int(self.T)
        if self.option is None:
            self.option = "call" if self.kind == "basket" else "put"
        if self.option not in ("put", "call"):
            raise ModelError(f"option must be 'put' or 'call', got {self.option!r}")
        if self.kind == "basket":
            self.s0 = np.asarray(self.s0, dtype=float).reshape(-1)
            d = self.s0.size
            cov = np.asarray(self.cov, dtype=float)
            if cov.shape != (d, d):
                raise ModelError(f"cov must be {d}x{d}, got {cov.shape}")
            if not np.allclose(cov, cov.T, atol=1e-12):
                raise ModelError("cov must be symmetric")
            self.cov = cov
            self.weights = (np.ones(d) if self.weights is None
                            else np.asarray(self.weights, dtype=float).reshape(-1))
            if self.weights.size != d:
                raise ModelError(f"need {d} basket weights, got {self.weights.size}")
            self._chol = _psd_factor(cov)
        else:
            self.s0 = float(self.s0)
            if self.sigma is None or not self.sigma >= 0:
                raise ModelError("univariate models need sigma >= 0")
            self.sigma = float(self.sigma)
            if self.kind == "geometric" and self.s0 <= 0:
                raise ModelError("geometric walk needs S0 > 0")

    @property
    def dim(self) -> int:
        return self.s0.size if self.kind == "basket" else 1

    @property
    def univariate(self) -> bool:
        return self.kind != "basket"

    @property
    def drift(self):
        """Additive drift r S_0 of the arithmetic and basket walks."""
        return self.r * self.s0

    @property
    def increment_std(self) -> float:
        if self.kind == "geometric":
            return self.sigma
        if self.kind == "arithmetic":
            return self.sigma * abs(self.s0)
        raise ModelError("basket increments are described by cov")

    def aggregate(self, states) -> np.ndarray:
        """Scalar state the payoff depends on (the weighted basket sum)."""
        states = np.asarray(states, dtype=float)
        return states @ self.weights if self.kind == "basket" else states

    def intrinsic(self, states) -> np.ndarray:
        x = self.aggregate(states)
        if self.option == "put":
            return np.maximum(self.strike - x, 0.0)
        return np.maximum(x - self.strike, 0.0)

    def payoff(self, t: int, states) -> np.ndarray:
        """Reward for stopping at stage ``t``."""
        if self.kind == "geometric":
            return self.intrinsic(states)
        return self.intrinsic(states) - self.r * t

    def payoff_grad(self, t: int, states) -> np.ndarray:
        """A subgradient of :meth:`payoff` in the state (shape of ``states``)."""
        x = self.aggregate(states)
        if self.option == "put":
            active = (self.strike - x > 0).astype(float)
            sign = -1.0
        else:
            active = (x - self.strike > 0).astype(float)
            sign = 1.0
        if self.kind == "basket":
            return sign * active[..., None] * self.weights
        return sign * active

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"kind": self.kind, "T": self.T, "r": self.r,
                             "strike": self.strike, "option": self.option}
        if self.kind == "basket":
            d.update(s0=self.s0.tolist(), cov=self.cov.tolist(), weights=self.weights.tolist())
        else:
            d.update(s0=self.s0, sigma=self.sigma)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ModelSpec:
        allowed = {"kind", "s0", "r", "T", "strike", "sigma", "cov", "weights", "option"}
        unknown = set(d) - allowed
        if unknown:
            raise ModelError(f"unknown model fields: {sorted(unknown)}")
        missing = {"kind", "s0", "r", "T", "strike"} - set(d)
        if missing:
            raise ModelError(f"missing model fields: {sorted(missing)}")
        return cls(**d)


def _psd_factor(cov: np.ndarray) -> np.ndarray:
    """Lower factor L with L L^T = cov; Cholesky with a PSD fallback."""
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    w, v = np.linalg.eigh(cov)
    if w.min() < -1e-10 * max(1.0, abs(w).max()):
        raise ModelError("cov is not positive semidefinite")
    return v * np.sqrt(np.clip(w, 0.0, None))


def step(model: ModelSpec, state, increment):
    """One transition of the model; broadcasts over leading axes."""
    state = np.asarray(state, dtype=float)
    increment = np.asarray(increment, dtype=float)
    if model.kind == "geometric":
        return state * np.exp(model.r - 0.5 * model.sigma ** 2 + increment)
    return state + model.drift + increment


def children(model: ModelSpec, states, atoms) -> np.ndarray:
    """Child states of every state under every increment atom.

    Univariate: ``states`` (m,) and ``atoms`` (N,) give (m, N).
    Basket: ``states`` (m, d) and ``atoms`` (N, d) give (m, N, d).
    """
    states = np.asarray(states, dtype=float)
    atoms = np.asarray(atoms, dtype=float)
    if model.kind == "basket":
        return step(model, states[:, None, :], atoms[None, :, :])
    return step(model, states[:, None], atoms[None, :])


# ---------------------------------------------------------------------------
# discretization


@dataclass
class StageDiscretization:
    """Increment atoms and probabilities for stages 1..T.

    ``atoms`` has shape (T, N) for univariate models and (T, N, d) for
    baskets; ``probs`` has shape (T, N).
    """

    atoms: np.ndarray
    probs: np.ndarray
    mode: str = "montecarlo"
    seed: int | None = None

    def __post_init__(self):
        self.atoms = np.asarray(self.atoms, dtype=float)
        self.probs = np.asarray(self.probs, dtype=float)
        if self.probs.ndim != 2 or self.probs.shape != self.atoms.shape[:2]:
            raise ModelError("probs must have shape (T, N) matching atoms")
        if self.probs.shape[1] < 1:
            raise ModelError("need at least one atom per stage")
        if np.any(self.probs < -1e-12) or np.any(np.abs(self.probs.sum(axis=1) - 1) > 1e-9):
            raise ModelError("stage probabilities must be nonnegative and sum to 1")

    @property
    def T(self) -> int:
        return self.probs.shape[0]

    @property
    def N(self) -> int:
        return self.probs.shape[1]

    def stage(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        """Atoms and probabilities of the increment entering stage ``t``."""
        if not 1 <= t <= self.T:
            raise IndexError(f"stage {t} outside 1..{self.T}")
        return self.atoms[t - 1], self.probs[t - 1]

    def with_probs(self, probs) -> StageDiscretization:
        return StageDiscretization(self.atoms, np.asarray(probs, dtype=float), self.mode, self.seed)

    def truncated(self, T: int) -> StageDiscretization:
        return StageDiscretization(self.atoms[:T], self.probs[:T], self.mode, self.seed)


def _uniforms(rng: np.random.Generator, size) -> np.ndarray:
    k = rng.integers(0, 2 ** 53, size=size, dtype=np.int64)
    return (k.astype(float) + 0.5) / 2.0 ** 53


def _gaussians(model: ModelSpec, rng: np.random.Generator, n: int) -> np.ndarray:
    z = ndtri(_uniforms(rng, (n, model.dim)))
    if model.kind == "basket":
        return z @ model._chol.T
    return z[:, 0] * model.increment_std


def stage_rng(seed: int, t: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0, t)))


def path_rng(seed: int, i: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1, i)))


def discretize(model: ModelSpec, N: int, seed: int = 0, mode: str = "montecarlo",
               same_atoms: bool = False) -> StageDiscretization:
    """Build per-stage increment distributions.

    ``montecarlo`` draws N i.i.d. increments per stage with weight 1/N, fresh
    per stage (or one draw reused for every stage with ``same_atoms``).
    ``binomial`` uses the two atoms +-std with probability 1/2, where std is
    sigma for the geometric walk and sigma S_0 for the arithmetic walk.
    """
    mode = mode.lower()
    T = model.T
    if mode == "binomial":
        if not model.univariate:
            raise ModelError("binomial discretization needs a univariate model")
        s = model.increment_std
        atoms = np.tile([s, -s], (T, 1))
        return StageDiscretization(atoms, np.full((T, 2), 0.5), "binomial", seed)
    if mode != "montecarlo":
        raise ModelError(f"unknown discretization mode {mode!r}")
    if N < 1:
        raise ModelError("N must be >= 1")
    if same_atoms:
        one = _gaussians(model, stage_rng(seed, 1), N)
        atoms = np.stack([one] * T)
    else:
        atoms = np.stack([_gaussians(model, stage_rng(seed, t), N) for t in range(1, T + 1)])
    return StageDiscretization(atoms, np.full((T, N), 1.0 / N), "montecarlo", seed)


# ---------------------------------------------------------------------------
# scenario paths


@dataclass
class ScenarioPath:
    """States S_0..S_T of one scenario and the atom index used per stage.

    ``indices`` is -1 for increments drawn from the true law.
    """

    states: np.ndarray
    indices: np.ndarray


@dataclass
class PathSet:
    """A batch of scenario paths stored as arrays.

    ``states`` has shape (count, T+1) or (count, T+1, d); ``indices`` has
    shape (count, T).
    """

    states: np.ndarray
    indices: np.ndarray

    def __len__(self) -> int:
        return self.states.shape[0]

    def __iter__(self) -> Iterator[ScenarioPath]:
        for s, i in zip(self.states, self.indices):
            yield ScenarioPath(s, i)

    def __getitem__(self, i: int) -> ScenarioPath:
        return ScenarioPath(self.states[i], self.indices[i])

    def to_csv(self, fh=None) -> str | None:
        """One row per path with the states of every stage (and asset)."""
        out = fh if fh is not None else io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        T1 = self.states.shape[1]
        if self.states.ndim == 2:
            header = [f"s{t}" for t in range(T1)]
        else:
            header = [f"s{t}_{j}" for t in range(T1) for j in range(self.states.shape[2])]
        w.writerow(["path"] + header)
        for i, row in enumerate(self.states.reshape(len(self), -1)):
            w.writerow([i] + [repr(float(v)) for v in row])
        return out.getvalue() if fh is None else None


def sample_paths(model: ModelSpec, count: int, seed: int = 0,
                 disc: StageDiscretization | None = None) -> PathSet:
    """Sample ``count`` scenario paths.

    With ``disc`` the increments are atoms drawn by their stage
    probabilities; without it they are fresh draws from the model's true
    Gaussian law.
    """
    if count < 1:
        raise ModelError("count must be >= 1")
    T = model.T
    d = model.dim
    shape = (count, T + 1) if model.univariate else (count, T + 1, d)
    states = np.empty(shape)
    indices = np.full((count, T), -1, dtype=int)
    states[:, 0] = model.s0
    if disc is not None:
        if disc.T < T:
            raise ModelError("discretization has fewer stages than the model")
        cum = np.cumsum(disc.probs[:T], axis=1)
        cum[:, -1] = 1.0
    for i in range(count):
        rng = path_rng(seed, i)
        if disc is None:
            eps = _gaussians(model, rng, T)
        else:
            u = _uniforms(rng, T)
            idx = np.array([np.searchsorted(cum[t], u[t], side="right") for t in range(T)])
            idx = np.minimum(idx, disc.N - 1)
            indices[i] = idx
            eps = disc.atoms[np.arange(T), idx]
        s = states[i, 0]
        for t in range(1, T + 1):
            s = step(model, s, eps[t - 1])
            states[i, t] = s
    return PathSet(states, indices)
