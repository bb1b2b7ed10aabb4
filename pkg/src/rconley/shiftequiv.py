"""Shift-equivalence witnesses between quotient graphs of filtration pairs.

Relations are sparse boolean matrices in row convention: ``R[i, j]`` means
node ``i`` may go to node ``j`` and "A then B" is ``A @ B``.  Node 0 of each
fiber is the base point.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .boxset import BoxSet, interior
from .conley import (
    ConleyError,
    FiltrationPair,
    PointedGraph,
    absorption_time,
    build_filtration_pair,
    chain_neighborhood,
    compose,
    holds_on,
    identity_relation,
    invariant_set,
    is_isolating_block,
    pointed_map,
    relation_from_pairs,
    reliable_range,
)
from .enclosure import FiberedEnclosure, FiberedSet

VERDICT_ORDER = {"equal": 0, "outer-consistent": 1, "failed": 2}


class WitnessError(ConleyError):
    pass


@dataclass(eq=False)
class GraphMap:
    """Per-fiber relation from ``source`` fiber ``t`` into ``target`` fiber ``t + offsets[t]``."""

    source: PointedGraph
    target: PointedGraph
    offsets: dict[int, int]
    relation: dict[int, sparse.csr_matrix]
    monotone: str = "none"

    def copy(self) -> "GraphMap":
        return GraphMap(self.source, self.target, dict(self.offsets), {t: M.copy() for t, M in self.relation.items()}, self.monotone)

    def edges(self):
        """All ``(t, i, j)`` entries of the relation."""
        for t in sorted(self.relation):
            coo = self.relation[t].tocoo()
            for i, j in zip(coo.row, coo.col):
                yield t, int(i), int(j)

    def toggled(self, t: int, i: int, j: int) -> "GraphMap":
        """Copy with the single entry ``(i, j)`` at fiber ``t`` flipped."""
        out = self.copy()
        M = out.relation[t].tolil()
        M[i, j] = not M[i, j]
        M = M.tocsr()
        M.eliminate_zeros()
        M.sort_indices()
        out.relation[t] = M
        return out

    def offsets_monotone(self) -> bool:
        ts = sorted(self.offsets)
        pairs = [(self.offsets[a], self.offsets[b]) for a, b in zip(ts, ts[1:]) if b == a + 1]
        if self.monotone == "nonincreasing":
            return all(x >= y for x, y in pairs)
        if self.monotone == "nondecreasing":
            return all(x <= y for x, y in pairs)
        return True

    def to_json(self) -> dict:
        return {
            "offsets": {str(t): n for t, n in sorted(self.offsets.items())},
            "monotone": self.monotone,
            "relation": {
                str(t): [[int(j) for j in M.indices[M.indptr[i] : M.indptr[i + 1]]] for i in range(M.shape[0])]
                for t, M in sorted(self.relation.items())
            },
        }


    @classmethod
    def from_json(cls, d: dict, source: PointedGraph, target: PointedGraph) -> "GraphMap":
        offsets = {int(t): int(n) for t, n in d["offsets"].items()}
        relation = {}
        for t, rows in d["relation"].items():
            t = int(t)
            r = [i for i, row in enumerate(rows) for _ in row]
            c = [j for row in rows for j in row]
            relation[t] = relation_from_pairs(r, c, (source.size(t), target.size(t + offsets[t])))
        return cls(source, target, offsets, relation, d.get("monotone", "none"))


@dataclass
class WitnessReport:
    verdicts: dict[int, str]
    checks: dict[int, dict[str, str]]
    T: int

    @property
    def reliable(self) -> range:
        return reliable_range(self.T)

    def failed_fibers(self) -> list[int]:
        return [t for t in self.reliable if self.verdicts.get(t) == "failed"]

    def unchecked_fibers(self) -> list[int]:
        return [t for t in self.reliable if self.verdicts.get(t, "unchecked") == "unchecked"]

    @property
    def passed(self) -> bool:
        return not self.failed_fibers()

    def counts(self) -> dict[str, int]:
        out = {"equal": 0, "outer-consistent": 0, "failed": 0, "unchecked": 0}
        for t in self.reliable:
            out[self.verdicts.get(t, "unchecked")] += 1
        return out

    def to_json(self) -> dict:
        return {
            "verdicts": {str(t): v for t, v in sorted(self.verdicts.items())},
            "checks": {str(t): c for t, c in sorted(self.checks.items())},
            "reliable_counts": self.counts(),
        }


@dataclass(eq=False)
class EquivalenceWitness:
    c: PointedGraph
    d: PointedGraph
    r: GraphMap
    s: GraphMap
    report: WitnessReport | None = None

    def verify(self) -> WitnessReport:
        self.report = verify_witness(self.c, self.d, self.r, self.s)
        return self.report

    def reversed(self) -> "EquivalenceWitness":
        w = EquivalenceWitness(self.d, self.c, self.s, self.r)
        if self.report is not None:
            # swapping the roles swaps (i) with (ii) and (iii) with (iv); the fiber verdicts stay
            w.report = WitnessReport(dict(self.report.verdicts), {t: _swap_checks(c) for t, c in self.report.checks.items()}, self.report.T)
        return w

    def to_json(self) -> dict:
        return {
            "c": self.c.to_json(),
            "d": self.d.to_json(),
            "r": self.r.to_json(),
            "s": self.s.to_json(),
            "report": None if self.report is None else self.report.to_json(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "EquivalenceWitness":
        """Rebuild graphs and maps from an export; the stored report is not trusted, call :meth:`verify`."""
        c, dd = PointedGraph.from_json(d["c"]), PointedGraph.from_json(d["d"])
        return cls(c, dd, GraphMap.from_json(d["r"], c, dd), GraphMap.from_json(d["s"], dd, c))


def _swap_checks(c: dict) -> dict:
    names = {"i": "ii", "ii": "i", "iii": "iv", "iv": "iii", "total_r": "total_s", "total_s": "total_r"}
    return {names.get(k, k): v for k, v in c.items()}


# ---------------------------------------------------------------- relation helpers
def _graph_power(G: PointedGraph, t: int, k: int) -> sparse.csr_matrix:
    cache = G.__dict__.setdefault("_power_cache", {})
    key = (t, k)
    if key not in cache:
        cache[key] = G.power(t, k) if k <= 1 else compose(_graph_power(G, t, k - 1), G.edges[t + k - 1])
    return cache[key]


def _projection(src: PointedGraph, ts: int, tgt: PointedGraph, tt: int) -> sparse.csr_matrix:
    """Send each node to the same box in ``tgt`` or to the base point when absent."""
    boxes = src.nodes[ts]
    lookup = np.searchsorted(tgt.nodes[tt], boxes)
    lookup = np.minimum(lookup, max(len(tgt.nodes[tt]) - 1, 0))
    present = (len(tgt.nodes[tt]) > 0) & (tgt.nodes[tt][lookup] == boxes) if len(boxes) else np.zeros(0, bool)
    cols = np.where(present, lookup + 1, 0)
    rows = np.arange(len(boxes) + 1)
    return relation_from_pairs(rows, np.concatenate([[0], cols]), (src.size(ts), tgt.size(tt)))


def _same_nodes(a: PointedGraph, b: PointedGraph) -> bool:
    return a.T == b.T and all(np.array_equal(a.nodes[t], b.nodes[t]) for t in a.nodes)


def _compare(X: sparse.csr_matrix, Y: sparse.csr_matrix) -> tuple[bool, bool]:
    """(X ⊆ Y, Y ⊆ X)."""
    Xb, Yb = X.astype(bool), Y.astype(bool)
    return (Xb > Yb).nnz == 0, (Yb > Xb).nnz == 0


def _total(R: sparse.csr_matrix) -> bool:
    counts = np.diff(R.indptr)
    base = R.indices[R.indptr[0] : R.indptr[1]]
    return bool(np.all(counts >= 1)) and list(base) == [0]


def _monotonize(raw: dict[int, int | None], direction: str) -> dict[int, int]:
    """Running max so that offsets are nonincreasing (scan right to left) or nondecreasing (left to right)."""
    ts = sorted(raw)
    order = ts[::-1] if direction == "nonincreasing" else ts
    out, best = {}, None
    for t in order:
        v = raw[t]
        if v is None:
            best = None if direction == "nondecreasing" else best
            continue
        best = v if best is None else max(best, v)
        out[t] = best
    return dict(sorted(out.items()))


# ---------------------------------------------------------------- verification
def verify_witness(c: PointedGraph, d: PointedGraph, r: GraphMap, s: GraphMap) -> WitnessReport:
    """Quasi-commutativity and composition identities per fiber.

    Checks (i) ``c r ~ r d`` and (ii) ``d s ~ s c`` with the offset
    adjustment chosen per fiber, (iii) ``s r = d^n`` and (iv) ``r s = c^n``.
    """
    T = c.T
    n1, n2 = r.offsets, s.offsets
    verdicts, checks = {}, {}

    def power(G, t, k):
        if t < -T or t + k > T:
            raise IndexError
        return _graph_power(G, t, k)

    def qc(graph_a, graph_b, m, n, t):
        # graph_a: source system, graph_b: target system, m: map a -> b
        if t not in n or t + 1 not in n:
            raise IndexError
        a, b = n[t], n[t + 1]
        lhs = compose(compose(graph_a.edges[t], m.relation[t + 1]), power(graph_b, t + 1 + b, max(0, a - b)))
        rhs = compose(m.relation[t], power(graph_b, t + a, 1 + max(0, b - a)))
        sub, sup = _compare(lhs, rhs)
        if sub and sup:
            return "equal"
        return "outer-consistent" if (sub or sup) else "failed"

    def ident(m1, m2, na, nb, graph, t):
        if t not in na:
            raise IndexError
        u = t + na[t]
        if u not in nb:
            raise IndexError
        comp = compose(m1.relation[t], m2.relation[u])
        pw = power(graph, t, na[t] + nb[u])
        sub, sup = _compare(comp, pw)
        if sub and sup:
            return "equal"
        # thickening of the composite is tolerated, losing paths is not
        return "outer-consistent" if sup else "failed"

    # every fiber is evaluated where the window allows; pass/fail only looks at the reliable range
    for t in sorted(c.nodes):
        res = {}
        for name, fn in (
            ("i", lambda: qc(c, d, r, n1, t)),
            ("ii", lambda: qc(d, c, s, n2, t)),
            ("iii", lambda: ident(s, r, n2, n1, d, t)),
            ("iv", lambda: ident(r, s, n1, n2, c, t)),
        ):
            try:
                res[name] = fn()
            except (IndexError, KeyError):
                res[name] = "unchecked"
        for name, m in (("total_r", r), ("total_s", s)):
            if t in m.relation:
                res[name] = "equal" if _total(m.relation[t]) else "failed"
        computed = [v for k, v in res.items() if v != "unchecked"]
        if not any(v != "unchecked" for k, v in res.items() if k in ("i", "ii", "iii", "iv")):
            verdicts[t] = "unchecked"
        else:
            verdicts[t] = max(computed, key=VERDICT_ORDER.__getitem__)
        checks[t] = res
    return WitnessReport(verdicts, checks, T)


# ---------------------------------------------------------------- lemma constructions
def _enclosure_of(*pairs: FiltrationPair, E: FiberedEnclosure | None = None) -> FiberedEnclosure:
    if E is not None:
        return E
    for P in pairs:
        if getattr(P, "enclosure", None) is not None:
            return P.enclosure
    raise WitnessError("no enclosure attached to the pairs; pass E explicitly")


def _graph(E: FiberedEnclosure, P: FiltrationPair) -> PointedGraph:
    cache = P.__dict__.setdefault("_graph_cache", {})
    if id(E) not in cache:
        cache[id(E)] = pointed_map(E, P, strict=False)
    return cache[id(E)]


def _check_L_invariance(E: FiberedEnclosure, N: FiberedSet, L: FiberedSet) -> None:
    # hypotheses are only decidable where the window leaves room on both sides
    for t in reliable_range(E.T):
        stray = (E.image(t, L[t]) & N[t + 1]) - L[t + 1]
        if not stray.is_empty():
            raise WitnessError(f"hypothesis failed: image of L at fiber {t} meets N \\ L ({len(stray)} boxes)")


def collapse_witness(P_small: FiltrationPair, P_big: FiltrationPair, E: FiberedEnclosure | None = None) -> EquivalenceWitness:
    """Witness between ``(N, L')`` and ``(N ∪ L, L)`` with ``L' ⊆ L`` (collapse the larger exit region)."""
    E = _enclosure_of(P_small, P_big, E=E)
    T = E.T
    if P_big.N != (P_small.N | P_big.L):
        raise WitnessError("hypothesis failed: big pair must be (N ∪ L, L)")
    if any(not P_small.L[t].issubset(P_big.L[t]) for t in reliable_range(T)):
        raise WitnessError("hypothesis failed: L' is not inside L")
    _check_L_invariance(E, P_big.N, P_big.L)
    c, d = _graph(E, P_small), _graph(E, P_big)
    r = GraphMap(c, d, {t: 0 for t in c.nodes}, {t: _projection(c, t, d, t) for t in c.nodes}, "constant")
    raw = {}
    for t in c.nodes:
        region = (P_small.N[t] & P_big.L[t]) - P_small.L[t]
        start = [c.node_of(t, b) for b in region.flat]
        raw[t] = absorption_time(c, t, np.asarray(start, dtype=np.int64)) if start else 0
    if any(raw[t] is None for t in reliable_range(T)):
        raise WitnessError("absorption time exceeds window")
    n = _monotonize(raw, "nonincreasing")
    rel = {}
    for t, k in list(n.items()):
        if t + k > T:
            del n[t]
            continue
        rel[t] = compose(_projection(d, t, c, t), _graph_power(c, t, k))
    s = GraphMap(d, c, n, rel, "nonincreasing")
    w = EquivalenceWitness(c, d, r, s)
    w.verify()
    return w


def enlarge_witness(P_inner: FiltrationPair, P_outer: FiltrationPair, E: FiberedEnclosure | None = None) -> EquivalenceWitness:
    """Witness between ``(N, L)`` and ``(N', L)`` with ``N ⊆ N'``."""
    E = _enclosure_of(P_inner, P_outer, E=E)
    T = E.T
    if not P_inner.N.issubset(P_outer.N):
        raise WitnessError("hypothesis failed: N is not inside N'")
    if any(P_inner.L[t] != P_outer.L[t] for t in reliable_range(T)):
        raise WitnessError("hypothesis failed: pairs must share L")
    _check_L_invariance(E, P_outer.N, P_outer.L)
    c, d = _graph(E, P_inner), _graph(E, P_outer)
    r = GraphMap(c, d, {t: 0 for t in c.nodes}, {t: _projection(c, t, d, t) for t in c.nodes}, "constant")
    raw: dict[int, int | None] = {}
    for t in d.nodes:
        R = np.ones(d.size(t), dtype=bool)
        R[0] = False
        k = 0
        while True:
            inner = np.zeros(d.size(t + k), dtype=bool)
            inner[0] = True
            idx = np.searchsorted(d.nodes[t + k], c.nodes[t + k])
            inner[idx + 1] = True
            if not np.any(R & ~inner):
                raw[t] = k
                break
            if t + k >= T:
                raw[t] = None
                break
            R = d.edges[t + k].T @ R
            k += 1
    if any(raw[t] is None for t in reliable_range(T)):
        raise WitnessError("absorption time exceeds window")
    n = _monotonize(raw, "nonincreasing")
    rel = {}
    for t, k in list(n.items()):
        if t + k > T:
            del n[t]
            continue
        rel[t] = compose(_graph_power(d, t, k), _projection(d, t + k, c, t + k))
    s = GraphMap(d, c, n, rel, "nonincreasing")
    w = EquivalenceWitness(c, d, r, s)
    w.verify()
    return w


def _trusted(report: WitnessReport) -> set[int]:
    return {t for t, v in report.verdicts.items() if v in ("equal", "outer-consistent")}


def compose_witness(w1: EquivalenceWitness, w2: EquivalenceWitness) -> EquivalenceWitness:
    """Witness for ``C ~ E`` from ``C ~ D`` and ``D ~ E`` (maps composed, offsets added)."""
    if not _same_nodes(w1.d, w2.c):
        raise WitnessError("witnesses do not share the middle system")
    ok1 = _trusted(w1.report or w1.verify())
    ok2 = _trusted(w2.report or w2.verify())

    def chain(m1: GraphMap, m2: GraphMap, ok_a: set, ok_b: set) -> tuple[dict, dict]:
        # entries resting on a fiber the parts could not certify are left out (unchecked)
        offs, rel = {}, {}
        for t, a in m1.offsets.items():
            u = t + a
            if u in m2.offsets and t in ok_a and u in ok_b:
                offs[t] = a + m2.offsets[u]
                rel[t] = compose(m1.relation[t], m2.relation[u])
        return offs, rel

    ro, rr = chain(w1.r, w2.r, ok1, ok2)
    so, sr = chain(w2.s, w1.s, ok2, ok1)
    w = EquivalenceWitness(
        w1.c,
        w2.d,
        GraphMap(w1.c, w2.d, ro, rr),
        GraphMap(w2.d, w1.c, so, sr),
    )
    w.verify()
    return w


# ---------------------------------------------------------------- common block
def _absorbed_within(G: PointedGraph, t: int, k: int) -> np.ndarray:
    """Mask of nodes at fiber ``t`` all of whose ``k``-step paths end at the base point."""
    X = np.zeros(G.size(t + k), dtype=bool)
    X[0] = True
    for u in range(t + k - 1, t - 1, -1):
        M = G.edges[u]
        escapes = (M @ (~X).astype(np.int8)) > 0
        X = ~np.asarray(escapes).ravel()
    return X


def _witness_to_block_pair(E: FiberedEnclosure, P0: FiltrationPair, P: FiltrationPair) -> EquivalenceWitness:
    T = E.T
    G = _graph(E, P)
    raw = {}
    for t in P.N.fibers:
        start = [G.node_of(t, b) for b in P0.L[t].flat]
        raw[t] = absorption_time(G, t, np.asarray(start, dtype=np.int64)) if start else 0
    if any(raw[t] is None for t in reliable_range(T)):
        raise WitnessError("absorption time exceeds window")
    n = _monotonize({t: (T - t if v is None else v) for t, v in raw.items()}, "nondecreasing")
    K = {}
    for t in P.N.fibers:
        k = min(n[t], T - t)
        mask = _absorbed_within(G, t, k)
        K[t] = P.L[t] | BoxSet.from_flat(E.grid, G.nodes[t][mask[1:]])
    Kb = FiberedSet(E.grid, T, K, E.path)
    Q = FiltrationPair(P0.N | Kb, Kb)
    Rt = FiltrationPair(P.N, Kb)
    w1 = collapse_witness(P0, Q, E)
    w2 = enlarge_witness(Q, Rt, E)
    w3 = collapse_witness(P, Rt, E)
    return compose_witness(compose_witness(w1, w2), w3.reversed())


def equivalence_via_common_block(P: FiltrationPair, P2: FiltrationPair, eps_layers: int = 1, E: FiberedEnclosure | None = None, k0: int = 1) -> EquivalenceWitness:
    """Witness ``P ~ P2`` through a chain block inside both quotients."""
    E = _enclosure_of(P, P2, E=E)
    rr = reliable_range(E.T)
    Q1, Q2 = P.quotient, P2.quotient
    S1, S2 = invariant_set(E, Q1).inv, invariant_set(E, Q2).inv
    if any(S1[t] != S2[t] for t in rr):
        raise WitnessError("pairs isolate different sets")
    A = Q1 & Q2
    P0 = None
    for eps in range(eps_layers, 0, -1):
        B = chain_neighborhood(E, A, S1, eps)
        inside = all(B[t].issubset(interior(Q1[t]) & interior(Q2[t])) for t in rr)
        if not (inside and holds_on(is_isolating_block(E, B), rr)):
            continue
        try:
            P0 = build_filtration_pair(E, B, k0)
            break
        except ConleyError:
            continue
    if P0 is None:
        raise WitnessError("chain block not inside both pairs; increase resolution")
    wa = _witness_to_block_pair(E, P0, P)
    wb = _witness_to_block_pair(E, P0, P2)
    return compose_witness(wa.reversed(), wb)
