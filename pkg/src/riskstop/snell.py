"""Risk-averse Snell envelopes and stopping times on finite scenario trees.

A :class:`FiltrationTree` carries the filtration (nodes at stage t are the
atoms of F_t) and an adapted process Z (one value per node). One-step
conditional risk mappings are given as a single :class:`RiskSpec` shared by
all stages or as a list with one spec per stage 0..T-1; at each node the spec
is applied to the distribution of the children.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .risk import RiskSpec, evaluate_rows

TOL = 1e-10


class TreeError(ValueError):
    """Malformed tree or stopping time."""


class OracleTooLarge(RuntimeError):
    """Stopping-time enumeration would exceed the configured bound."""


class OrderingPreconditionError(RuntimeError):
    """The 'low' specs are not dominated by the 'high' specs on the instance."""


@dataclass(eq=False)
class FiltrationTree:
    """Scenario tree with conditional child probabilities and process values.

    Nodes are numbered so that every parent precedes its children; node 0 is
    the root (``parent[0] == -1``). All leaves sit at the final stage T.
    """

    parent: np.ndarray
    prob: np.ndarray
    z: np.ndarray
    stage: np.ndarray = field(init=False)
    T: int = field(init=False)

    def __post_init__(self):
        self.parent = np.asarray(self.parent, dtype=int)
        self.prob = np.asarray(self.prob, dtype=float)
        self.z = np.asarray(self.z, dtype=float)
        n = self.parent.size
        if n == 0 or self.prob.size != n or self.z.size != n:
            raise TreeError("parent, prob and z must have the same nonzero length")
        if self.parent[0] != -1 or np.any(self.parent[1:] < 0):
            raise TreeError("node 0 must be the only root")
        if np.any(self.parent[1:] >= np.arange(1, n)):
            raise TreeError("parents must precede their children")
        stage = np.zeros(n, dtype=int)
        for i in range(1, n):
            stage[i] = stage[self.parent[i]] + 1
        self.stage = stage
        self.T = int(stage.max())
        kids: list[list[int]] = [[] for _ in range(n)]
        for i in range(1, n):
            kids[self.parent[i]].append(i)
        self.children = kids
        leaves = [i for i in range(n) if not kids[i]]
        if any(stage[i] != self.T for i in leaves):
            raise TreeError("every leaf must sit at the final stage")
        if self.T == 0:
            raise TreeError("tree needs at least one stage after the root")
        self.leaves = np.array(leaves, dtype=int)
        self.stage_nodes = [np.flatnonzero(stage == t) for t in range(self.T + 1)]
        for i in range(n):
            if kids[i]:
                s = self.prob[kids[i]].sum()
                if abs(s - 1.0) > 1e-9 or np.any(self.prob[kids[i]] < -1e-12):
                    raise TreeError(f"child probabilities of node {i} sum to {s}")
        # padded child tables per stage for vectorized conditional evaluation
        self._kid_idx = []
        self._kid_prob = []
        for t in range(self.T):
            nodes = self.stage_nodes[t]
            width = max(len(kids[i]) for i in nodes)
            idx = np.zeros((nodes.size, width), dtype=int)
            pr = np.zeros((nodes.size, width))
            for r, i in enumerate(nodes):
                k = kids[i]
                idx[r, :len(k)] = k
                pr[r, :len(k)] = self.prob[k]
            self._kid_idx.append(idx)
            self._kid_prob.append(pr)
        absp = np.ones(n)
        for i in range(1, n):
            absp[i] = absp[self.parent[i]] * self.prob[i]
        self.path_prob = absp

    @property
    def n_nodes(self) -> int:
        return self.parent.size

    def with_values(self, z) -> FiltrationTree:
        return FiltrationTree(self.parent, self.prob, z)

    def child_table(self, t: int, values) -> tuple[np.ndarray, np.ndarray]:
        """Child values and probabilities of the stage-``t`` nodes (padded)."""
        values = np.asarray(values, dtype=float)
        pr = self._kid_prob[t]
        vals = np.where(pr > 0, values[self._kid_idx[t]], 0.0)
        return vals, pr

    def conditional(self, spec: RiskSpec, values, t: int) -> np.ndarray:
        """Apply ``spec`` to the children of each stage-``t`` node."""
        vals, pr = self.child_table(t, values)
        return evaluate_rows(spec, vals, pr)

    def ancestors(self, i: int) -> list[int]:
        out = []
        while i >= 0:
            out.append(i)
            i = self.parent[i]
        return out[::-1]

    def leaf_paths(self) -> list[list[int]]:
        return [self.ancestors(int(l)) for l in self.leaves]

    def to_dict(self) -> dict[str, Any]:
        return {"parent": self.parent.tolist(), "prob": self.prob.tolist(), "z": self.z.tolist()}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> FiltrationTree:
        unknown = set(d) - {"parent", "prob", "z"}
        if unknown:
            raise TreeError(f"unknown tree fields: {sorted(unknown)}")
        return cls(d["parent"], d["prob"], d["z"])

    @classmethod
    def from_json(cls, text: str) -> FiltrationTree:
        return cls.from_dict(json.loads(text))


def random_tree(rng: np.random.Generator, T: int, branching: int = 2,
                random_probs: bool = True, low: float = -1.0, high: float = 1.0) -> FiltrationTree:
    """Complete tree with ``branching`` children per node and Z ~ U[low, high]."""
    parent = [-1]
    prob = [1.0]
    frontier = [0]
    for _ in range(T):
        nxt = []
        for i in frontier:
            if random_probs:
                p = rng.dirichlet(np.ones(branching))
            else:
                p = np.full(branching, 1.0 / branching)
            for k in range(branching):
                parent.append(i)
                prob.append(float(p[k]))
                nxt.append(len(parent) - 1)
        frontier = nxt
    z = rng.uniform(low, high, size=len(parent))
    return FiltrationTree(parent, prob, z)


@dataclass
class MarkovLattice:
    """Stage-indexed Markov chain with a value per state.

    ``values[t]`` holds Z_t for each state at stage t (one state at stage 0);
    ``transitions[t]`` is the row-stochastic matrix from stage t to t+1.
    """

    values: list
    transitions: list

    def __post_init__(self):
        self.values = [np.asarray(v, dtype=float).reshape(-1) for v in self.values]
        self.transitions = [np.asarray(p, dtype=float) for p in self.transitions]
        if self.values[0].size != 1:
            raise TreeError("stage 0 must have a single state")
        if len(self.transitions) != len(self.values) - 1:
            raise TreeError("need one transition matrix per stage step")
        for t, P in enumerate(self.transitions):
            if P.shape != (self.values[t].size, self.values[t + 1].size):
                raise TreeError(f"transition {t} has shape {P.shape}")
            if np.any(P < 0) or np.any(np.abs(P.sum(axis=1) - 1) > 1e-9):
                raise TreeError(f"transition {t} is not row-stochastic")

    @property
    def T(self) -> int:
        return len(self.transitions)

    def to_tree(self) -> FiltrationTree:
        """Expand into the scenario tree of state paths (zero-probability moves dropped)."""
        parent, prob, z = [-1], [1.0], [float(self.values[0][0])]
        frontier = [(0, 0)]  # (node id, state)
        for t, P in enumerate(self.transitions):
            nxt = []
            for node, s in frontier:
                for s2 in np.flatnonzero(P[s] > 0):
                    parent.append(node)
                    prob.append(float(P[s, s2]))
                    z.append(float(self.values[t + 1][s2]))
                    nxt.append((len(parent) - 1, int(s2)))
            frontier = nxt
        return FiltrationTree(parent, prob, z)


def random_lattice(rng: np.random.Generator, T: int, width: int = 3,
                   low: float = -1.0, high: float = 1.0) -> MarkovLattice:
    values = [rng.uniform(low, high, 1)] + [rng.uniform(low, high, width) for _ in range(T)]
    trans = []
    for t in range(T):
        rows = 1 if t == 0 else width
        trans.append(rng.dirichlet(np.ones(width), size=rows))
    return MarkovLattice(values, trans)


def stage_specs(onestep: RiskSpec | Sequence[RiskSpec], T: int) -> list[RiskSpec]:
    if isinstance(onestep, RiskSpec):
        return [onestep] * T
    specs = list(onestep)
    if len(specs) != T:
        raise ValueError(f"need {T} stage specs, got {len(specs)}")
    return specs


# ---------------------------------------------------------------------------
# envelopes and stopping times


@dataclass
class SnellResult:
    """Envelope values, continuation values and stop decisions per node."""

    values: np.ndarray
    continuation: np.ndarray
    stop: np.ndarray
    mode: str

    @property
    def root_value(self) -> float:
        return float(self.values[0])

    def to_csv(self, tree: FiltrationTree) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["node", "stage", "Z", "E", "decision"])
        for i in range(tree.n_nodes):
            w.writerow([i, int(tree.stage[i]), repr(float(tree.z[i])),
                        repr(float(self.values[i])), "stop" if self.stop[i] else "continue"])
        return out.getvalue()

    def to_dict(self) -> dict[str, Any]:
        return {"mode": self.mode, "root_value": self.root_value,
                "values": self.values.tolist(), "stop": self.stop.tolist()}


def snell_envelope(tree: FiltrationTree, onestep, mode: str = "max") -> SnellResult:
    """Backward recursion E_T = Z_T, E_t = Z_t v rho_t(E_{t+1}) (or ^ for ``min``)."""
    if mode not in ("max", "min"):
        raise ValueError("mode must be 'max' or 'min'")
    specs = stage_specs(onestep, tree.T)
    E = tree.z.copy()
    cont = np.full(tree.n_nodes, np.nan)
    stop = np.zeros(tree.n_nodes, dtype=bool)
    stop[tree.leaves] = True
    for t in range(tree.T - 1, -1, -1):
        nodes = tree.stage_nodes[t]
        c = tree.conditional(specs[t], E, t)
        zt = tree.z[nodes]
        cont[nodes] = c
        if mode == "max":
            E[nodes] = np.maximum(zt, c)
            stop[nodes] = zt >= c
        else:
            E[nodes] = np.minimum(zt, c)
            stop[nodes] = zt <= c
    return SnellResult(E, cont, stop, mode)


@dataclass
class StoppingTime:
    """Adapted stopping time as the set of nodes where it fires.

    ``stop[i]`` is True iff tau equals the stage of node i on every path
    through node i. Each root-to-leaf path contains exactly one such node.
    """

    stop: np.ndarray

    def validate(self, tree: FiltrationTree) -> None:
        for path in tree.leaf_paths():
            if int(self.stop[path].sum()) != 1:
                raise TreeError(f"path to leaf {path[-1]} does not stop exactly once")

    def leaf_times(self, tree: FiltrationTree) -> np.ndarray:
        """tau on each path, ordered like ``tree.leaves``."""
        out = np.empty(tree.leaves.size, dtype=int)
        for k, path in enumerate(tree.leaf_paths()):
            hit = [i for i in path if self.stop[i]]
            out[k] = tree.stage[hit[0]]
        return out

    def expected_stage(self, tree: FiltrationTree) -> float:
        return float(np.sum(tree.path_prob * tree.stage * self.stop))


def optimal_stopping_time(result: SnellResult, tree: FiltrationTree, m: int = 0,
                          tol: float = TOL) -> StoppingTime:
    """First stage t >= m with E_t = Z_t (within ``tol``)."""
    if not 0 <= m <= tree.T:
        raise ValueError(f"m must lie in 0..{tree.T}")
    touch = np.abs(result.values - tree.z) <= tol
    stop = np.zeros(tree.n_nodes, dtype=bool)
    done = np.zeros(tree.n_nodes, dtype=bool)
    for i in range(tree.n_nodes):
        p = tree.parent[i]
        if p >= 0 and done[p]:
            done[i] = True
            continue
        if tree.stage[i] >= m and (touch[i] or tree.stage[i] == tree.T):
            stop[i] = True
            done[i] = True
    return StoppingTime(stop)


def nested_values(tree: FiltrationTree, onestep, tau: StoppingTime) -> np.ndarray:
    """Per-node value of 1{tau=t} Z_t + rho_t(... rho_{T-1}(1{tau=T} Z_T))."""
    specs = stage_specs(onestep, tree.T)
    ind = np.asarray(tau.stop, dtype=float)
    V = ind * tree.z
    for t in range(tree.T - 1, -1, -1):
        nodes = tree.stage_nodes[t]
        V[nodes] = ind[nodes] * tree.z[nodes] + tree.conditional(specs[t], V, t)
    return V


def nested_value(tree: FiltrationTree, onestep, tau: StoppingTime) -> float:
    """Stopping risk measure rho_{0,T}(Z_tau)."""
    return float(nested_values(tree, onestep, tau)[0])


def count_stopping_times(tree: FiltrationTree, m: int = 0) -> int:
    counts = [1] * tree.n_nodes
    for i in range(tree.n_nodes - 1, -1, -1):
        kids = tree.children[i]
        if not kids:
            continue
        prod = 1
        for k in kids:
            prod *= counts[k]
        counts[i] = prod + (1 if tree.stage[i] >= m else 0)
    return counts[0]


@dataclass
class OracleResult:
    value: float
    tau: StoppingTime
    optimal: list  # every StoppingTime within tolerance of the optimum
    count: int


def enumerate_stopping_oracle(tree: FiltrationTree, onestep, m: int = 0, sense: str = "max",
                              limit: int = 2 ** 20, tol: float = 1e-9) -> OracleResult:
    """Exhaustive search over adapted stopping times tau >= m.

    Every stopping time is scored with the nested stopping risk measure built
    subtree by subtree. Among the optimal ones (within ``tol``) the returned
    ``tau`` has the largest expected stopping stage.
    """
    if sense not in ("max", "min"):
        raise ValueError("sense must be 'max' or 'min'")
    total = count_stopping_times(tree, m)
    if total > limit:
        raise OracleTooLarge(f"{total} stopping times exceed the limit {limit}")
    specs = stage_specs(onestep, tree.T)
    # per node: values array, list of stop-node tuples, expected-stage weights
    opts: list[Any] = [None] * tree.n_nodes
    for i in range(tree.n_nodes - 1, -1, -1):
        t = int(tree.stage[i])
        here = (float(tree.z[i]), (i,), tree.path_prob[i] * t)
        kids = tree.children[i]
        if not kids:
            opts[i] = (np.array([here[0]]), [here[1]], np.array([here[2]]))
            continue
        sizes = [opts[k][0].size for k in kids]
        combo = np.indices(sizes).reshape(len(kids), -1).T
        vals = np.column_stack([opts[k][0][combo[:, j]] for j, k in enumerate(kids)])
        risk = evaluate_rows(specs[t], vals, tree.prob[kids])
        stops = [tuple(itertools.chain.from_iterable(opts[k][1][c[j]] for j, k in enumerate(kids)))
                 for c in combo]
        weight = sum(opts[k][2][combo[:, j]] for j, k in enumerate(kids))
        if t >= m:
            risk = np.append(risk, here[0])
            stops.append(here[1])
            weight = np.append(weight, here[2])
        opts[i] = (risk, stops, weight)
        for k in kids:
            opts[k] = None
    vals, stops, weight = opts[0]
    best = vals.max() if sense == "max" else vals.min()
    near = np.flatnonzero(np.abs(vals - best) <= tol)

    def as_tau(s):
        flag = np.zeros(tree.n_nodes, dtype=bool)
        flag[list(s)] = True
        return StoppingTime(flag)

    pick = near[np.argmax(weight[near])]
    return OracleResult(float(vals[pick]), as_tau(stops[pick]),
                        [as_tau(stops[j]) for j in near], int(vals.size))


# ---------------------------------------------------------------------------
# structural checks


def check_supermartingale(values, tree: FiltrationTree, onestep,
                          tol: float = TOL) -> tuple[bool, int | None]:
    """Is X_t >= rho_t(X_{t+1}) at every node? Returns (holds, first violating node)."""
    specs = stage_specs(onestep, tree.T)
    values = np.asarray(values, dtype=float)
    for t in range(tree.T):
        nodes = tree.stage_nodes[t]
        bad = values[nodes] < tree.conditional(specs[t], values, t) - tol
        if np.any(bad):
            return False, int(nodes[np.argmax(bad)])
    return True, None


def check_minimal_dominating(result: SnellResult, tree: FiltrationTree, onestep,
                             delta: float = 1e-6, tol: float = TOL) -> tuple[bool, int | None]:
    """Lowering any single envelope value by ``delta`` must break domination or
    the supermartingale inequality at that node (max mode)."""
    specs = stage_specs(onestep, tree.T)
    E = result.values
    for i in range(tree.n_nodes):
        lowered = E[i] - delta
        if lowered < tree.z[i] - tol:
            continue
        t = int(tree.stage[i])
        if t < tree.T:
            vals = E[tree.children[i]]
            c = evaluate_rows(specs[t], vals[None, :], tree.prob[tree.children[i]])[0]
            if lowered < c - tol:
                continue
        return False, i
    return True, None


def check_delay_ordering(tree: FiltrationTree, specs_low, specs_high, tol: float = TOL) -> bool:
    """Envelope and tau*_0 ordering for dominated one-step mappings.

    Raises :class:`OrderingPreconditionError` when some child distribution met
    during the run has rho_low > rho_high.
    """
    low = stage_specs(specs_low, tree.T)
    high = stage_specs(specs_high, tree.T)
    r_low = snell_envelope(tree, low)
    r_high = snell_envelope(tree, high)
    for t in range(tree.T):
        for E in (r_low.values, r_high.values):
            a = tree.conditional(low[t], E, t)
            b = tree.conditional(high[t], E, t)
            if np.any(a > b + tol):
                node = int(tree.stage_nodes[t][np.argmax(a > b + tol)])
                raise OrderingPreconditionError(f"rho_low exceeds rho_high at node {node}")
    if np.any(r_low.values > r_high.values + tol):
        return False
    tau_low = optimal_stopping_time(r_low, tree).leaf_times(tree)
    tau_high = optimal_stopping_time(r_high, tree).leaf_times(tree)
    return bool(np.all(tau_low <= tau_high))
