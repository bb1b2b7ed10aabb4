import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import PROPERTY_CASES
from rconley.boxset import BoxSet, Grid, box_of, boxes_meeting_ball, boxes_meeting_box, dilate, interior
from rconley.conley import (
    ConleyError,
    FiltrationPair,
    absorption_time,
    block_from_chain,
    build_filtration_pair,
    chain_neighborhood,
    exit_set,
    exit_sets,
    holds_on,
    index_certificate,
    invariant_set,
    is_isolating_block,
    is_isolating_neighborhood,
    omega_limit,
    pointed_map,
    random_metric,
    reliable_range,
    robustness_check,
    verify_filtration_pair,
)
from rconley.enclosure import EnclosureError, FiberedSet, build_enclosure, iterate_image
from rconley.noise import NoiseModel, sample_path
from rconley.systems import affine, random_diagonal, random_logistic

RR16 = reliable_range(16)


def const_path(T, dims=1):
    return sample_path(NoiseModel.constant([0.0] * dims), 0, T)


def closed_meets(grid, lo, hi):
    w = grid.box_width[0]
    return [b for b in range(grid.n_boxes) if grid.lo[0] + b * w <= hi and lo <= grid.lo[0] + (b + 1) * w]


# ---------------------------------------------------------------- invariant set
def test_reliable_range():
    assert reliable_range(16) == range(-8, 9)
    assert reliable_range(5) == range(-2, 3)


def test_empty_neighbourhood_has_empty_inv(contraction):
    E, _ = contraction
    inv = invariant_set(E, FiberedSet.empty(E.grid, 16))
    assert inv.inv.is_empty()
    assert all(is_isolating_neighborhood(E, FiberedSet.empty(E.grid, 16)).values())


def test_contraction_inv_is_near_origin(contraction, disk_grid):
    E, N = contraction
    inv = invariant_set(E, N)
    assert not inv[0].is_empty()
    assert inv[0].issubset(dilate(box_of(disk_grid, (0.0, 0.0)), 2))
    assert inv.reliable_range == RR16
    assert all(inv[t].issubset(N[t]) for t in N.fibers)


def test_window_mismatch(contraction, disk_grid):
    E, _ = contraction
    with pytest.raises(EnclosureError, match="does not match"):
        invariant_set(E, FiberedSet.empty(disk_grid, 4))


def _layered_oracle(E, N):
    """Brute force: box b on fiber t survives iff some full-window orbit passes through it."""
    T = E.T
    alive_f = {-T: set(N[-T].flat)}
    for t in range(-T, T):
        nxt = set()
        for b in alive_f[t]:
            nxt |= set(E.forward(t, b).flat) & set(N[t + 1].flat)
        alive_f[t + 1] = nxt
    alive_b = {T: set(N[T].flat)}
    for t in range(T - 1, -T - 1, -1):
        alive_b[t] = {b for b in N[t].flat if set(E.forward(t, b).flat) & alive_b[t + 1]}
    return {t: alive_f[t] & alive_b[t] for t in N.fibers}


def test_doubling_inv(doubling):
    E, N = doubling
    inv = invariant_set(E, N)
    oracle = _layered_oracle(E, N)
    assert all(set(inv[t].flat) == oracle[t] for t in N.fibers)
    assert inv[0].flat.tolist() == [14, 15, 16, 17]
    assert inv[0].issubset(dilate(box_of(E.grid, [0.0]), 2))


# ---------------------------------------------------------------- omega limit
def test_omega_limit_examples(disk_grid, logistic, logistic_grid):
    path = const_path(16)
    E = build_enclosure(affine(np.eye(2) * 0.5), disk_grid, path)
    full = FiberedSet.constant(BoxSet.full(disk_grid), 16, path)
    assert omega_limit(E, FiberedSet.empty(disk_grid, 16), 3).is_empty()
    assert omega_limit(E, full, 8).issubset(dilate(box_of(disk_grid, (0.0, 0.0)), 2))
    D = FiberedSet.constant(boxes_meeting_box(logistic_grid, (0.7,), (1.3,)), 16)
    assert box_of(logistic_grid, [1.0]).issubset(omega_limit(logistic, D, 8))
    with pytest.raises(ConleyError):
        omega_limit(E, full, 16)


def test_omega_limit_nonincreasing_in_burn_in(contraction):
    E, N = contraction
    sets = [omega_limit(E, N, n0) for n0 in range(0, 16)]
    assert all(b.issubset(a) for a, b in zip(sets, sets[1:]))


# ---------------------------------------------------------------- exit sets
def test_exit_set_empty_for_contraction(contraction):
    E, N = contraction
    assert all(B.is_empty() for B in exit_sets(E, N).values())


def test_exit_set_expansion_ring(expansion):
    E, N = expansion
    ring = N[0] - interior(N[0])
    ex = exit_set(E, N, 0)
    assert not ex.is_empty()
    assert ring.issubset(ex)
    assert not box_of(E.grid, (0.0, 0.0)).issubset(ex)


def test_exit_set_doubling_matches_interval_oracle(doubling):
    E, N = doubling
    g = E.grid
    w = g.box_width[0]
    inner = set(interior(N[1]).flat)
    oracle = []
    for b in range(g.n_boxes):
        a = g.lo[0] + b * w
        lo, hi = 2 * a, 2 * (a + w)
        leaves = lo < g.lo[0] or hi > g.hi[0]
        if leaves or not set(closed_meets(g, lo, hi)) <= inner:
            oracle.append(b)
    ex = exit_set(E, N, 0)
    assert ex.flat.tolist() == oracle
    # the closed form with a two-layer margin contains the exact set
    centers = g.centers[:, 0]
    assert set(ex.flat) <= set(np.flatnonzero(np.abs(centers) >= 0.5 - 2 * w))
    assert np.all(np.abs(centers[ex.flat]) >= 0.46875)


def test_exit_set_window(contraction):
    E, N = contraction
    with pytest.raises(EnclosureError, match="out of window"):
        exit_set(E, N, 16)


# ---------------------------------------------------------------- isolation
def test_logistic_whole_interval_isolates_for_every_lambda(logistic_grid):
    path = sample_path(NoiseModel.uniform([-0.4], [0.4]), 0, 16)
    N = FiberedSet.constant(boxes_meeting_box(logistic_grid, (0.0,), (1.5,)), 16, path)
    for lam in (0.0, 0.25, 0.5, 0.75, 1.0):
        E = build_enclosure(random_logistic(lam=lam), logistic_grid, path)
        assert holds_on(is_isolating_neighborhood(E, N), RR16), lam


def test_identity_is_never_isolating():
    g = Grid((0.0, 0.0), (1.0, 1.0), (8, 8))
    path = const_path(4)
    E = build_enclosure(affine(np.eye(2)), g, path)
    single = FiberedSet.constant(box_of(g, (0.5, 0.5)), 4)
    assert not any(is_isolating_neighborhood(E, single).values())
    square = FiberedSet.constant(boxes_meeting_box(g, (0.2, 0.2), (0.8, 0.8)), 4)
    blk = is_isolating_block(E, square)
    assert blk[-4] is None and blk[4] is None
    assert not any(v for v in blk.values() if v is not None)


def test_blocks(contraction, doubling):
    E, N = contraction
    assert holds_on(is_isolating_block(E, N), RR16)
    E2, N2 = doubling
    assert holds_on(is_isolating_block(E2, N2), range(-9, 10))


# ---------------------------------------------------------------- chains and blocks
def test_chain_neighbourhood(contraction):
    E, N = contraction
    S = invariant_set(E, N).inv
    assert chain_neighborhood(E, N, FiberedSet.empty(E.grid, 16), 1).is_empty()
    C = chain_neighborhood(E, N, S, 1)
    assert all(C[t].issubset(dilate(S[t], 3)) for t in N.fibers)
    # wider chains give larger neighbourhoods, all containing Inv
    chain = [chain_neighborhood(E, N, S, e) for e in (1, 2, 3, 4)]
    for small, big in zip(chain, chain[1:]):
        assert small.issubset(big)
    assert all(S.issubset(c) for c in chain)
    with pytest.raises(ConleyError):
        chain_neighborhood(E, N, S, 0)


def test_block_from_chain(contraction, disk_grid):
    E, N = contraction
    S = invariant_set(E, N).inv
    B = block_from_chain(E, N, S, 1)
    assert holds_on(is_isolating_block(E, B), RR16)
    empty = block_from_chain(E, N, FiberedSet.empty(disk_grid, 16), 1)
    assert empty.is_empty()
    path = const_path(16)
    E2 = build_enclosure(affine(np.eye(2) * 2.0), disk_grid, path)
    N2 = FiberedSet.constant(boxes_meeting_ball(disk_grid, (0, 0), 1.0), 16, path)
    S2 = invariant_set(E2, N2).inv
    B2 = block_from_chain(E2, N2, S2, 1)
    assert S2.issubset(B2) and len(B2[0]) == 36
    assert box_of(disk_grid, (0.0, 0.0)).issubset(B2[0])


# ---------------------------------------------------------------- filtration pairs
def test_contraction_pair_has_empty_exit(contraction):
    E, N = contraction
    P = build_filtration_pair(E, N, 1)
    assert P.L.is_empty() and P.verified
    assert all(P.axioms[t] == (True, True, True) for t in RR16)
    # near the window edge the truncated Inv is too fat for (a)
    assert all(P.axioms[t][1:] == (True, True) for t in range(-16, 16))
    assert P.axioms[16][1:] == (None, None)


def test_expansion_pair(expansion):
    E, N = expansion
    P = build_filtration_pair(E, N, 1)
    assert P.verified and P.k == 1
    ex = exit_set(E, N, 0)
    assert P.L[0] == dilate(ex, 1) & N[0]
    assert box_of(E.grid, (0.0, 0.0)).issubset(P.quotient[0])


def _axiom_oracle(E, N, L, t):
    """Direct enumeration of the three conditions at fiber t."""
    Q = {s: set(N[s].flat) - set(L[s].flat) for s in N.fibers}
    inv = _layered_oracle(E, FiberedSet(N.grid, N.T, {s: BoxSet.from_flat(N.grid, sorted(Q[s])) for s in N.fibers}))
    inner = set(interior(BoxSet.from_flat(N.grid, sorted(Q[t]))).flat)
    a = inv[t] <= inner
    ex = {b for b in N[t].flat if not set(E.forward(t, b).flat) <= set(interior(N[t + 1]).flat) or E.forward(t, b).contains_outer}
    ring = set(dilate(BoxSet.from_flat(N.grid, sorted(ex)), 1).flat) & set(N[t].flat)
    b = ring <= set(L[t].flat)
    c = not any(set(E.forward(t, x).flat) & Q[t + 1] for x in L[t].flat)
    return a, b, c


def test_doubling_pair_matches_axiom_oracle(doubling):
    E, N = doubling
    for k in (1, 2):
        P = build_filtration_pair(E, N, k)
        assert P.k == k and P.verified
        assert P.L[0].flat.tolist() == list(range(0, 9 + k - 1 + 1)) + list(range(23 - k, 32))
        for t in range(-10, 10):
            assert P.axioms[t] == _axiom_oracle(E, N, P.L, t)


def test_degenerate_pair(contraction):
    E, N = contraction
    P = FiltrationPair(N, N)
    ax = verify_filtration_pair(E, P)
    assert all(ax[t] == (True, True, True) for t in range(-16, 16))
    assert P.degenerate and P.verified


def test_pair_errors(contraction):
    E, N = contraction
    with pytest.raises(ConleyError, match="contained"):
        verify_filtration_pair(E, FiltrationPair(FiberedSet.empty(E.grid, 16), N))
    with pytest.raises(ConleyError):
        build_filtration_pair(E, N, 0)


# ---------------------------------------------------------------- pointed graph and certificate
def test_contraction_pointed_graph(contraction, disk_grid):
    E, N = contraction
    P = build_filtration_pair(E, N, 1)
    G = pointed_map(E, P)
    for t in range(-16, 16):
        M = G.edges[t]
        assert M[0].indices.tolist() == [0]
        # no exits: only the base point reaches the base point
        assert M[1:, 0].nnz == 0
        assert np.all(np.diff(M.indptr) > 0)
    o = G.node_of(0, int(box_of(disk_grid, (0.0, 0.0)).flat[0]))
    assert o in G.successors(0, o)
    cert = index_certificate(G)
    assert cert.verdict == "nonempty-invariant-evidence"
    assert cert.labels == ["no-certificate", "nonempty-invariant-evidence"]
    assert cert.absorption_horizon is None


def test_expansion_pointed_graph(expansion, disk_grid):
    E, N = expansion
    P = build_filtration_pair(E, N, 1)
    G = pointed_map(E, P, strict=False)
    origin = int(box_of(disk_grid, (0.0, 0.0)).flat[0])
    for t in range(-16, 16):
        o, o2 = G.node_of(t, origin), G.node_of(t + 1, origin)
        assert o2 in G.successors(t, o)
        # every node of the next fiber is hit
        assert len(np.unique(G.edges[t].indices)) == G.size(t + 1)
        if t not in G.collar_violations:
            collar = (dilate(P.L[t], 1) & N[t]) - P.L[t]
            assert all(G.successors(t, G.node_of(t, b)).tolist() == [0] for b in collar.flat)
    # one collar layer is not always enough at this resolution
    assert G.collar_violations
    with pytest.raises(ConleyError, match="axiom"):
        pointed_map(E, P, strict=True)
    assert index_certificate(G).verdict == "nonempty-invariant-evidence"


def test_certificates_for_wandering_map():
    g = Grid((-0.5,), (1.0,), (24,))
    path = const_path(10)
    E = build_enclosure(affine([[1.0]], [0.5]), g, path)
    N = FiberedSet.constant(boxes_meeting_box(g, (0.0,), (0.25,)), 10, path)
    P = build_filtration_pair(E, N, 1)
    cert = index_certificate(pointed_map(E, P, strict=False))
    assert cert.verdict == "trivial-certified" and cert.absorption_horizon == 0
    # with L empty every node steps straight to the base point
    G = pointed_map(E, FiltrationPair(N, FiberedSet.empty(g, 10)), strict=False)
    assert all(G.edges[t][1:].indices.tolist() == [0] * (G.size(t) - 1) for t in range(-10, 10))
    cert = index_certificate(G)
    assert cert.verdict == "trivial-certified" and cert.absorption_horizon == 1
    assert cert.to_json()["labels"] == ["trivial-certified"]


def test_pointed_graph_json(contraction):
    E, N = contraction
    G = pointed_map(E, build_filtration_pair(E, N, 1))
    d = json.loads(json.dumps(G.to_json()))
    assert d["edges"]["0"][0] == [0]
    assert len(d["nodes"]["0"]) == G.size(0) - 1


# ---------------------------------------------------------------- metric and robustness
def test_random_metric_examples(logistic_grid):
    g = Grid((-1.0,), (1.0,), (16,))
    path = const_path(4)
    N = FiberedSet.constant(BoxSet.full(g), 4, path)
    f = affine([[0.5]])
    same = random_metric(f, f, N, path)
    assert same.max == 0.0
    kicked = random_metric(f, affine([[0.5]], [0.03]), N, path)
    assert all(v == pytest.approx(0.03, abs=1e-12) for v in kicked.forward.values())
    # inverses differ by delta / a
    assert all(v == pytest.approx(0.06, abs=1e-12) for v in kicked.inverse.values())


def test_random_metric_logistic_bound(logistic_grid):
    path = sample_path(NoiseModel.uniform([-0.4], [0.4]), 0, 16)
    N = FiberedSet.constant(boxes_meeting_box(logistic_grid, (0.0,), (1.5,)), 16, path)
    m = random_metric(random_logistic(lam=0.0), random_logistic(lam=1.0), N, path)
    top = N[0].flat.max()
    xs = np.linspace(0.0, logistic_grid.box_upper[top, 0], 4001)
    peak = np.max(np.abs(xs * (1 - xs)))
    for t, v in m.forward.items():
        assert v <= 0.1 * abs(path.value(t - 1)[0]) * peak + 1e-12
    assert m.inverse_available


def test_robustness(disk_grid):
    path = sample_path(NoiseModel.constant([0.0]), 0, 16)
    f = affine(np.eye(2) * 0.5)
    E = build_enclosure(f, disk_grid, path)
    N = FiberedSet.constant(boxes_meeting_ball(disk_grid, (0, 0), 1.0), 16, path)
    P = build_filtration_pair(E, N, 1)
    same = robustness_check(E, P, f)
    assert same["holds"] and same["metric_max"] == 0.0
    small = robustness_check(E, P, f.with_bump_size(0.01))
    assert small["holds"]
    big = robustness_check(E, P, f.with_bump_size(0.5))
    assert not big["holds"] and big["failing_fibers"]
    assert all(big["failing_axioms"][str(t)] for t in big["failing_fibers"])


# ---------------------------------------------------------------- properties on small systems
SMALL = Grid((-1.5, -1.5), (1.5, 1.5), (14, 14))
SMALL_T = 6
_SYSTEMS = {}


def _system(i, T=SMALL_T):
    key = (i, T)
    if key not in _SYSTEMS:
        if i == 0:
            f, model = random_diagonal(2), NoiseModel.uniform([0.3, 0.3], [0.7, 0.7])
        elif i == 1:
            f, model = random_diagonal(2), NoiseModel.uniform([1.5, 1.5], [2.5, 2.5])
        elif i == 2:
            f = affine([[0.9, -0.5], [0.5, 0.9]], noise_offsets=[[0.1, 0.0]])
            model = NoiseModel.uniform([-1.0], [1.0])
        else:
            f = affine([[1.6, 0.0], [0.0, 0.6]], noise_matrices=[[[0.2, 0.0], [0.0, 0.1]]])
            model = NoiseModel.uniform([-1.0], [1.0])
        path = sample_path(model, 3, T)
        _SYSTEMS[key] = build_enclosure(f, SMALL, path)
    return _SYSTEMS[key]


@st.composite
def neighbourhoods(draw, T=SMALL_T):
    """Either a random box set per fiber or a jittered ball around the origin."""
    seed = draw(st.integers(0, 2**31))
    rng = np.random.default_rng(seed)
    if draw(st.booleans()):
        p = draw(st.floats(0.2, 0.9))
        sets = [BoxSet.from_mask(SMALL, rng.random(SMALL.shape) < p) for _ in range(2 * T + 1)]
    else:
        r = draw(st.floats(0.3, 1.4))
        c = rng.uniform(-0.2, 0.2, 2)
        sets = [boxes_meeting_ball(SMALL, c, r + rng.uniform(0, 0.1)) for _ in range(2 * T + 1)]
    return FiberedSet(SMALL, T, sets)


@settings(max_examples=PROPERTY_CASES)
@given(st.integers(0, 3), neighbourhoods())
def test_exit_set_routes_agree_with_row_oracle(i, N):
    E = _system(i)
    for t in (-SMALL_T, 0, SMALL_T - 1):
        ex = exit_set(E, N, t)
        inner = interior(N[t + 1])
        brute = [b for b in N[t].flat if not E.forward(t, b).issubset(inner)]
        assert ex.flat.tolist() == brute


@settings(max_examples=PROPERTY_CASES)
@given(st.integers(0, 3), neighbourhoods(), st.integers(0, SMALL_T // 2))
def test_inv_inside_truncated_omega(i, N, n0):
    E = _system(i)
    assert invariant_set(E, N)[0].issubset(omega_limit(E, N, n0))


@settings(max_examples=PROPERTY_CASES)
@given(st.integers(0, 3), neighbourhoods(), neighbourhoods())
def test_inv_subadditive(i, A, B):
    E = _system(i)
    ia, ib, iab = invariant_set(E, A), invariant_set(E, B), invariant_set(E, A | B)
    assert all((ia[t] | ib[t]).issubset(iab[t]) for t in A.fibers)


@settings(max_examples=PROPERTY_CASES)
@given(st.integers(0, 3), neighbourhoods())
def test_block_implies_neighbourhood(i, N):
    E = _system(i)
    blk = is_isolating_block(E, N)
    nbh = is_isolating_neighborhood(E, N)
    assert all(nbh[t] for t, v in blk.items() if v)


@settings(max_examples=PROPERTY_CASES)
@given(st.integers(0, 3), st.floats(0.3, 1.4), st.integers(0, 2**31))
def test_inv_nonincreasing_in_window(i, r, seed):
    rng = np.random.default_rng(seed)
    B = boxes_meeting_ball(SMALL, rng.uniform(-0.2, 0.2, 2), r)
    prev = None
    for T in (2, 3, 4, 6):
        cur = invariant_set(_system(i, T), FiberedSet.constant(B, T))[0]
        if prev is not None:
            assert cur.issubset(prev)
        prev = cur


@settings(max_examples=PROPERTY_CASES)
@given(st.integers(0, 3), neighbourhoods(), st.integers(0, 2**31))
def test_pointed_graph_soundness(i, N, seed):
    E = _system(i)
    rng = np.random.default_rng(seed)
    L = FiberedSet(SMALL, SMALL_T, [B & BoxSet.from_mask(SMALL, rng.random(SMALL.shape) < 0.3) for _, B in N.items()])
    P = FiltrationPair(N, L)
    G = pointed_map(E, P, strict=False)
    Q = P.quotient
    for t in range(-SMALL_T, SMALL_T):
        for b in Q[t].flat[:10]:
            fwd = E.forward(t, b)
            succ = set(G.successors(t, G.node_of(t, b)).tolist())
            # every enclosure edge inside N\L is a graph edge, everything else is the base point
            assert {G.node_of(t + 1, c) for c in (fwd & Q[t + 1]).flat} <= succ
            assert (0 in succ) == (not fwd.issubset(Q[t + 1]))
    for t in (-2, 0, 1):
        n = absorption_time(G, t)
        if n is not None:
            R = Q[t]
            for j in range(t, t + n):
                R = E.image(j, R) & Q[j + 1]
            assert R.is_empty()


@settings(max_examples=PROPERTY_CASES)
@given(st.integers(0, 3), st.floats(0.3, 1.45), st.integers(0, 2**31))
def test_forward_invariance_when_nothing_exits(i, r, seed):
    E = _system(i)
    rng = np.random.default_rng(seed)
    N = FiberedSet(SMALL, SMALL_T, [boxes_meeting_ball(SMALL, (0, 0), r + rng.uniform(0, 0.05)) for _ in range(2 * SMALL_T + 1)])
    exits = exit_sets(E, N)
    if all(B.is_empty() for B in exits.values()):
        for t in range(-SMALL_T, SMALL_T):
            assert iterate_image(E, N, t, 1).issubset(interior(N[t + 1]))


def test_forward_invariance_is_exercised():
    # the contraction gives empty exit sets for mid-sized balls
    E = _system(0)
    N = FiberedSet.constant(boxes_meeting_ball(SMALL, (0, 0), 1.0), SMALL_T)
    assert all(B.is_empty() for B in exit_sets(E, N).values())
