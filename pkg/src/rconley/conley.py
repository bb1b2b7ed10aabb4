"""Invariant sets, exit sets, isolating blocks, filtration pairs and index certificates.

All statements are made per fiber of a sampled window.  Window-truncated
invariant sets are outer approximations, so "isolating" verdicts are sound
while "not isolating" verdicts are inconclusive.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import sparse

from .boxset import BoxSet, dilate, interior
from .enclosure import EnclosureError, FiberedEnclosure, FiberedSet, build_enclosure, iterate_image
from .noise import NoisePath
from .systems import MapFamily, NoInverse


class ConleyError(RuntimeError):
    pass


def reliable_range(T: int) -> range:
    """Fibers with at least ``T/2`` steps of history and of future in the window."""
    return range(-(T // 2), T // 2 + 1)


def _check_window(E: FiberedEnclosure, N: FiberedSet):
    if N.T != E.T:
        raise EnclosureError(f"fibered set window T={N.T} does not match enclosure T={E.T}")


@dataclass
class InvResult:
    inv: FiberedSet
    T: int

    @property
    def reliable_range(self) -> range:
        return reliable_range(self.T)

    def __getitem__(self, t: int) -> BoxSet:
        return self.inv[t]


def invariant_set(E: FiberedEnclosure, N: FiberedSet) -> InvResult:
    """Nodes of the layered graph on ``N`` reachable from fiber ``-T`` and reaching fiber ``T``."""
    _check_window(E, N)
    T = E.T
    if T < 1:
        raise ConleyError("empty window")
    Nn = N.map(BoxSet.without_outer)
    fwd = {-T: Nn[-T]}
    for t in range(-T, T):
        fwd[t + 1] = E.image(t, fwd[t]) & Nn[t + 1]
    bwd = {T: Nn[T]}
    for t in range(T - 1, -T - 1, -1):
        bwd[t] = E.preimage(t, bwd[t + 1]) & Nn[t]
    inv = FiberedSet(N.grid, T, {t: fwd[t] & bwd[t] for t in range(-T, T + 1)}, E.path)
    return InvResult(inv, T)


def omega_limit(E: FiberedEnclosure, D: FiberedSet, n0: int) -> BoxSet:
    """Tail union of pushed-forward images landing on fiber 0, from ``k = n0`` to ``T``."""
    _check_window(E, D)
    if not 0 <= n0 < E.T:
        raise ConleyError(f"burn-in n0={n0} must satisfy 0 <= n0 < T={E.T}")
    out = BoxSet.empty(E.grid)
    for k in range(n0, E.T + 1):
        out = out | iterate_image(E, D, -k, k)
    return out


def exit_set(E: FiberedEnclosure, N: FiberedSet, t: int) -> BoxSet:
    """Boxes of ``N_t`` whose image is not inside ``int N_{t+1}``.

    Computed row-wise and as ``N_t`` intersected with the preimage of the
    complement of the interior; the two must agree.
    """
    _check_window(E, N)
    if not -E.T <= t < E.T:
        raise EnclosureError(f"fiber out of window: exit set needs fibers {t} and {t + 1}")
    grid = E.grid
    Nt = N[t].without_outer()
    inner = interior(N[t + 1])
    # route 1: scan each source row of the transition matrix
    M = E.matrices[t]
    src = Nt.flat
    bad = ~inner.bits[M.indices]
    # every row of an enclosure is nonempty, so reduceat sees one segment per row
    row_bad = np.logical_or.reduceat(bad, M.indptr[:-1])
    by_rows = BoxSet.from_flat(grid, src[row_bad[src]])
    # route 2: preimage of everything outside the interior (outer cell included,
    # boxes outside the phase space are never images and are left out)
    outside = ~inner.bits & np.append(grid.valid, True)
    by_pre = Nt & E.preimage(t, BoxSet(grid, outside))
    if by_rows != by_pre:
        raise AssertionError(f"exit-set formulas disagree at fiber {t}")
    return by_rows


def exit_sets(E: FiberedEnclosure, N: FiberedSet) -> dict[int, BoxSet]:
    return {t: exit_set(E, N, t) for t in range(-E.T, E.T)}


def is_isolating_neighborhood(E: FiberedEnclosure, N: FiberedSet, inv: InvResult | None = None) -> dict[int, bool]:
    """Per fiber: truncated Inv inside the combinatorial interior of ``N_t``."""
    inv = inv or invariant_set(E, N)
    return {t: inv[t].issubset(interior(N[t])) for t in N.fibers}


def is_isolating_block(E: FiberedEnclosure, N: FiberedSet) -> dict[int, Optional[bool]]:
    """Per fiber: image ∩ N ∩ preimage inside ``int N_t``; edge fibers give ``None`` (unchecked)."""
    _check_window(E, N)
    out: dict[int, Optional[bool]] = {-E.T: None, E.T: None}
    for t in range(-E.T + 1, E.T):
        core = E.image(t - 1, N[t - 1]) & N[t] & E.preimage(t, N[t + 1].without_outer())
        out[t] = core.issubset(interior(N[t]))
    return dict(sorted(out.items()))


def holds_on(verdicts: dict, fibers) -> bool:
    return all(verdicts[t] for t in fibers)


def chain_neighborhood(E: FiberedEnclosure, N: FiberedSet, S: FiberedSet, eps_layers: int) -> FiberedSet:
    """Boxes of ``N`` reached from ``S`` by eps-chains in ``N`` and reaching ``S`` by such chains."""
    _check_window(E, N)
    if eps_layers < 1:
        raise ConleyError("eps_layers must be >= 1")
    T = E.T
    Nn = N.map(BoxSet.without_outer)
    S = S & Nn
    U = {-T: S[-T]}
    for t in range(-T, T):
        U[t + 1] = S[t + 1] | (dilate(E.image(t, U[t]), eps_layers) & Nn[t + 1])
    V = {T: S[T]}
    for t in range(T - 1, -T - 1, -1):
        V[t] = S[t] | (E.preimage(t, dilate(V[t + 1], eps_layers)) & Nn[t])
    return FiberedSet(N.grid, T, {t: U[t] & V[t] & Nn[t] for t in N.fibers}, E.path)


def block_from_chain(E: FiberedEnclosure, N: FiberedSet, S: FiberedSet, eps_layers: int) -> FiberedSet:
    """Chain neighbourhood that passes the block check on the reliable range (shrinking eps if needed)."""
    rr = reliable_range(E.T)
    for eps in range(eps_layers, 0, -1):
        B = chain_neighborhood(E, N, S, eps)
        if holds_on(is_isolating_block(E, B), rr):
            return B
    raise ConleyError("no block at this resolution")


# ---------------------------------------------------------------- filtration pairs
@dataclass
class FiltrationPair:
    N: FiberedSet
    L: FiberedSet
    axioms: dict[int, tuple] = field(default_factory=dict)
    k: int | None = None
    degenerate: bool = False
    enclosure: FiberedEnclosure | None = field(default=None, repr=False, compare=False)

    @property
    def T(self) -> int:
        return self.N.T

    @property
    def quotient(self) -> FiberedSet:
        return self.N - self.L

    @property
    def verified(self) -> bool:
        return bool(self.axioms) and all(all(v is not False for v in self.axioms[t]) for t in reliable_range(self.T))

    def failing_fibers(self) -> list[int]:
        return [t for t in reliable_range(self.T) if any(v is False for v in self.axioms.get(t, ()))]

    def to_json(self) -> dict:
        return {
            "N": self.N.to_json(),
            "L": self.L.to_json(),
            "k": self.k,
            "degenerate": self.degenerate,
            "axioms": {str(t): list(v) for t, v in self.axioms.items()},
        }


def verify_filtration_pair(E: FiberedEnclosure, P: FiltrationPair) -> dict[int, tuple]:
    """Per fiber ``(a, b, c)``; ``None`` marks a condition needing a fiber beyond the window.

    (a) Inv of ``N \\ L`` inside its interior; (b) one layer around the exit
    set of ``N`` lies in ``L``; (c) the image of ``L`` misses ``N \\ L``.
    """
    _check_window(E, P.N)
    T = E.T
    if not P.L.issubset(P.N):
        raise ConleyError("L must be contained in N")
    Q = P.N - P.L
    inv = invariant_set(E, Q)
    out = {}
    for t in P.N.fibers:
        a = inv[t].issubset(interior(Q[t]))
        if t < T:
            b = (dilate(exit_set(E, P.N, t), 1) & P.N[t]).issubset(P.L[t])
            c = (E.image(t, P.L[t]) & Q[t + 1]).is_empty()
        else:
            b = c = None
        out[t] = (a, b, c)
    P.axioms = out
    P.degenerate = all(inv[t].is_empty() for t in reliable_range(T))
    return out


def build_filtration_pair(E: FiberedEnclosure, B: FiberedSet, k: int) -> FiltrationPair:
    """``L = dilate(exit set, k) ∩ B``, lowering ``k`` until the axioms hold on the reliable range."""
    _check_window(E, B)
    if k < 1:
        raise ConleyError("dilation k must be positive")
    T = E.T
    exits = exit_sets(E, B)
    # the last fiber has no successor in the window: reuse the previous exit set
    exits[T] = exits[T - 1]
    rr = reliable_range(T)
    full = invariant_set(E, B)
    for kk in range(k, -1, -1):
        L = FiberedSet(B.grid, T, {t: dilate(exits[t], kk) & B[t] for t in B.fibers}, E.path)
        P = FiltrationPair(B, L, k=kk, enclosure=E)
        verify_filtration_pair(E, P)
        # L must not swallow part of Inv B, or the pair isolates a smaller set
        keeps = all((full[t] & L[t]).is_empty() for t in rr)
        if P.verified and keeps:
            return P
    raise ConleyError("no valid L at this resolution")


# ---------------------------------------------------------------- pointed graph
@dataclass(eq=False)
class PointedGraph:
    """Quotient graph of ``N/L``: node 0 is the base point, node ``i >= 1`` is box ``nodes[t][i-1]``."""

    T: int
    nodes: dict[int, np.ndarray]
    edges: dict[int, sparse.csr_matrix]
    enclosure: FiberedEnclosure | None = None
    pair: FiltrationPair | None = None
    collar_violations: dict[int, int] = field(default_factory=dict)

    def size(self, t: int) -> int:
        return len(self.nodes[t]) + 1

    def node_of(self, t: int, flat: int) -> int:
        i = np.searchsorted(self.nodes[t], flat)
        if i < len(self.nodes[t]) and self.nodes[t][i] == flat:
            return int(i) + 1
        return 0

    def successors(self, t: int, i: int) -> np.ndarray:
        M = self.edges[t]
        return M.indices[M.indptr[i] : M.indptr[i + 1]]

    def power(self, t: int, k: int) -> sparse.csr_matrix:
        """Relation of ``k`` steps from fiber ``t``."""
        if t < -self.T or t + k > self.T:
            raise ConleyError(f"window exhausted: {k} steps from {t}")
        R = identity_relation(self.size(t))
        for j in range(t, t + k):
            R = compose(R, self.edges[j])
        return R

    def to_json(self) -> dict:
        return {
            "T": self.T,
            "nodes": {str(t): [int(v) for v in n] for t, n in self.nodes.items()},
            "edges": {
                str(t): [[int(j) for j in M.indices[M.indptr[i] : M.indptr[i + 1]]] for i in range(M.shape[0])]
                for t, M in self.edges.items()
            },
        }


    @classmethod
    def from_json(cls, d: dict) -> "PointedGraph":
        nodes = {int(t): np.asarray(v, dtype=np.int64) for t, v in d["nodes"].items()}
        edges = {}
        for t, rows in d["edges"].items():
            t = int(t)
            r = [i for i, row in enumerate(rows) for _ in row]
            c = [j for row in rows for j in row]
            edges[t] = relation_from_pairs(r, c, (len(nodes[t]) + 1, len(nodes[t + 1]) + 1))
        return cls(int(d["T"]), dict(sorted(nodes.items())), dict(sorted(edges.items())))


def identity_relation(n: int) -> sparse.csr_matrix:
    return sparse.identity(n, dtype=bool, format="csr")


def compose(A: sparse.csr_matrix, B: sparse.csr_matrix) -> sparse.csr_matrix:
    """Relation "A then B" in row convention."""
    C = (A.astype(np.int32) @ B.astype(np.int32)).tocsr()
    C.data = C.data > 0
    C = C.astype(bool)
    C.eliminate_zeros()
    C.sort_indices()
    return C


def relation_from_pairs(rows, cols, shape) -> sparse.csr_matrix:
    M = sparse.csr_matrix((np.ones(len(rows), dtype=bool), (np.asarray(rows), np.asarray(cols))), shape=shape, dtype=bool)
    M.sum_duplicates()
    M.sort_indices()
    return M


def pointed_map(E: FiberedEnclosure, P: FiltrationPair, strict: bool = True) -> PointedGraph:
    """Quotient graph of the pair.

    Nodes one layer outside ``L`` should map only to the base point.  With
    ``strict`` a violation raises; otherwise it is counted per fiber in
    ``collar_violations``.
    """
    _check_window(E, P.N)
    grid = E.grid
    T = E.T
    Q = P.N - P.L
    nodes = {t: Q[t].flat for t in P.N.fibers}
    edges = {}
    for t in range(-T, T):
        src, dst = nodes[t], nodes[t + 1]
        M = E.matrices[t][src]
        lookup = np.zeros(grid.n_boxes + 1, dtype=np.int64)
        lookup[dst] = np.arange(1, len(dst) + 1)
        coo = M.tocoo()
        tgt = lookup[coo.col]
        rows = coo.row + 1
        inside = tgt > 0
        star_rows = np.unique(rows[~inside])
        all_rows = np.concatenate([[0], rows[inside], star_rows])
        all_cols = np.concatenate([[0], tgt[inside], np.zeros(len(star_rows), dtype=np.int64)])
        edges[t] = relation_from_pairs(all_rows, all_cols, (len(src) + 1, len(dst) + 1))
    G = PointedGraph(T, nodes, edges, E, P)
    for t in range(-T, T):
        collar = (dilate(P.L[t], 1) & P.N[t]) - P.L[t]
        bad = [b for b in collar.flat if np.any(G.successors(t, G.node_of(t, b)) != 0)]
        if bad:
            G.collar_violations[t] = len(bad)
            if strict:
                raise ConleyError(
                    f"collar node {tuple(int(v) for v in grid.multi_index(bad[0]))} at fiber {t} "
                    "maps into N\\L: axiom (c) violation upstream"
                )
    return G


def absorption_time(G: PointedGraph, t: int, start: np.ndarray | None = None, limit: int | None = None) -> int | None:
    """Least ``n`` with every ``n``-step path from ``start`` (default: all nodes) at the base point."""
    R = np.zeros(G.size(t), dtype=bool)
    if start is None:
        R[1:] = True
    else:
        R[np.asarray(start, dtype=np.int64)] = True
    R[0] = False
    n = 0
    top = G.T if limit is None else min(G.T, t + limit)
    while R[1:].any():
        if t + n >= top:
            return None
        R = G.edges[t + n].T @ R
        n += 1
    return n


@dataclass
class IndexCertificate:
    verdict: str
    absorption_horizon: int | None
    details: dict

    @property
    def labels(self) -> list[str]:
        if self.verdict == "trivial-certified":
            return ["trivial-certified"]
        if self.verdict == "nonempty-invariant-evidence":
            return ["no-certificate", "nonempty-invariant-evidence"]
        return ["no-certificate"]

    def to_json(self) -> dict:
        return {
            "verdict": self.verdict,
            "labels": self.labels,
            "absorption_horizon": self.absorption_horizon,
            "details": {str(k): v for k, v in self.details.items()},
        }


def index_certificate(G: PointedGraph) -> IndexCertificate:
    """Certify a trivial index when some power of the quotient map is constant at the base point."""
    rr = reliable_range(G.T)
    times = {t: absorption_time(G, t) for t in rr}
    if all(n is not None for n in times.values()):
        horizon = max(times.values(), default=0)
        if horizon <= 2 * G.T:
            return IndexCertificate("trivial-certified", horizon, {t: {"absorption": n} for t, n in times.items()})
    details = {t: {"absorption": n} for t, n in times.items()}
    verdict = "no-certificate"
    if G.enclosure is not None and G.pair is not None:
        inv = invariant_set(G.enclosure, G.pair.quotient)
        for t in rr:
            details[t]["inv_boxes"] = len(inv[t])
        if all(not inv[t].is_empty() for t in rr):
            verdict = "nonempty-invariant-evidence"
    return IndexCertificate(verdict, None, details)


# ---------------------------------------------------------------- metric and robustness
def _sample_in(B: BoxSet, m: int, rng: np.random.Generator) -> np.ndarray:
    flat = B.flat
    pick = flat[rng.integers(0, len(flat), size=m)]
    lo, hi = B.grid.clipped_bounds()
    lo, hi = lo[pick], hi[pick]
    return lo + rng.random(lo.shape) * (hi - lo)


@dataclass
class RandomMetric:
    forward: dict[int, float]
    inverse: dict[int, float | None]
    inverse_available: bool

    @property
    def total(self) -> dict[int, float]:
        return {t: self.forward[t] + (self.inverse[t] or 0.0) for t in self.forward}

    @property
    def max(self) -> float:
        return max(self.total.values(), default=0.0)

    def to_json(self) -> dict:
        return {
            "per_fiber": {str(t): v for t, v in self.total.items()},
            "forward": {str(t): v for t, v in self.forward.items()},
            "inverse": {str(t): v for t, v in self.inverse.items()},
            "inverse_available": self.inverse_available,
            "max": self.max,
        }


def random_metric(
    f: MapFamily,
    g: MapFamily,
    N: FiberedSet,
    path: NoisePath,
    m: int = 200,
    seed: int = 0,
    strict: bool = False,
) -> RandomMetric:
    """Sampled distance between two random maps and their inverses over ``N``.

    The forward term at fiber ``t`` samples ``N_{t-1}`` with the step-``(t-1)``
    noise; the inverse term samples ``N_{t+1}`` and inverts the step-``t`` map,
    i.e. the map carrying fiber ``t`` to ``t+1``.
    """
    rng = np.random.Generator(np.random.Philox(key=seed))
    inv_ok = f.has_inverse and g.has_inverse
    if not inv_ok and strict:
        raise NoInverse("inverse unavailable for random metric")
    fwd, inv = {}, {}
    for t in range(-N.T + 1, N.T):
        Dm, Dp = N[t - 1].without_outer(), N[t + 1].without_outer()
        if len(Dm):
            x = _sample_in(Dm, m, rng)
            xi = path.value(t - 1)
            fwd[t] = float(np.max(np.linalg.norm(f.map_points(x, xi) - g.map_points(x, xi), axis=1)))
        else:
            fwd[t] = 0.0
        if not inv_ok:
            inv[t] = None
            continue
        if len(Dp):
            y = _sample_in(Dp, m, rng)
            xi = path.value(t)
            try:
                inv[t] = float(np.max(np.linalg.norm(f.inverse_points(y, xi) - g.inverse_points(y, xi), axis=1)))
            except NoInverse:
                if strict:
                    raise
                inv[t] = None
        else:
            inv[t] = 0.0
    return RandomMetric(fwd, inv, inv_ok)


def robustness_check(E_f: FiberedEnclosure, P: FiltrationPair, g: MapFamily, m: int = 200) -> dict:
    """Re-verify ``P`` under the enclosure of ``g`` on the same grid and path."""
    E_g = build_enclosure(g, E_f.grid, E_f.path)
    Pg = FiltrationPair(P.N, P.L, k=P.k)
    axioms = verify_filtration_pair(E_g, Pg)
    metric = random_metric(E_f.family, g, P.N, E_f.path, m=m)
    failing = Pg.failing_fibers()
    return {
        "holds": not failing,
        "failing_fibers": failing,
        "failing_axioms": {str(t): [n for n, v in zip("abc", axioms[t]) if v is False] for t in failing},
        "metric_max": metric.max,
        "metric": metric,
    }
