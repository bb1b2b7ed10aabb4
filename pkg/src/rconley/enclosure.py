"""Fibered combinatorial enclosures of a random map along a noise path."""
from __future__ import annotations

import gzip
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np
from scipy import sparse

from .boxset import BoxSet, Grid, GridError
from .noise import NoisePath
from .systems import MapFamily


class EnclosureError(ValueError):
    pass


class FiberedSet:
    """One :class:`BoxSet` per fiber ``t = -T .. T``."""

    __slots__ = ("grid", "T", "_sets", "path")

    def __init__(self, grid: Grid, T: int, sets: Mapping[int, BoxSet] | Iterable[BoxSet], path: NoisePath | None = None):
        if not isinstance(sets, Mapping):
            sets = dict(zip(range(-T, T + 1), sets))
        if sorted(sets) != list(range(-T, T + 1)):
            raise EnclosureError(f"fibered set needs exactly the fibers {-T}..{T}")
        for B in sets.values():
            if B.grid != grid:
                raise GridError("all fibers must share the grid")
        self.grid = grid
        self.T = T
        self._sets = {t: sets[t] for t in range(-T, T + 1)}
        self.path = path

    @classmethod
    def constant(cls, B: BoxSet, T: int, path: NoisePath | None = None) -> "FiberedSet":
        return cls(B.grid, T, {t: B for t in range(-T, T + 1)}, path)

    @classmethod
    def empty(cls, grid: Grid, T: int) -> "FiberedSet":
        return cls.constant(BoxSet.empty(grid), T)

    @property
    def fibers(self) -> range:
        return range(-self.T, self.T + 1)

    def __getitem__(self, t: int) -> BoxSet:
        try:
            return self._sets[t]
        except KeyError:
            raise EnclosureError(f"fiber {t} out of window [-{self.T}, {self.T}]") from None

    def items(self):
        return self._sets.items()

    def _zip(self, other: "FiberedSet", op) -> "FiberedSet":
        if other.T != self.T:
            raise EnclosureError("fibered sets have different windows")
        return FiberedSet(self.grid, self.T, {t: op(self[t], other[t]) for t in self.fibers}, self.path)

    def __or__(self, other):
        return self._zip(other, BoxSet.__or__)

    def __and__(self, other):
        return self._zip(other, BoxSet.__and__)

    def __sub__(self, other):
        return self._zip(other, BoxSet.__sub__)

    def map(self, fn) -> "FiberedSet":
        return FiberedSet(self.grid, self.T, {t: fn(B) for t, B in self._sets.items()}, self.path)

    def issubset(self, other: "FiberedSet") -> bool:
        return all(self[t].issubset(other[t]) for t in self.fibers)

    def is_empty(self) -> bool:
        return all(B.is_empty() for B in self._sets.values())

    def __eq__(self, other) -> bool:
        if not isinstance(other, FiberedSet):
            return NotImplemented
        return self.T == other.T and all(self[t] == other[t] for t in self.fibers)

    def __hash__(self):
        return hash(tuple(hash(self[t]) for t in self.fibers))

    def counts(self) -> dict[int, int]:
        return {t: len(B) for t, B in self._sets.items()}

    def to_json(self) -> dict:
        return {
            "grid": self.grid.descriptor(),
            "T": self.T,
            "fibers": {str(t): {"boxes": [list(m) for m in B.members], "outer": B.contains_outer} for t, B in self._sets.items()},
        }

    @classmethod
    def from_json(cls, d: dict) -> "FiberedSet":
        grid = Grid.from_descriptor(d["grid"])
        T = int(d["T"])
        sets = {
            int(t): BoxSet.from_indices(grid, v["boxes"], outer=v["outer"]) for t, v in d["fibers"].items()
        }
        return cls(grid, T, sets)


# ---------------------------------------------------------------- ranges → sparse rows
def _expand_ranges(i_lo: np.ndarray, i_hi: np.ndarray, shape: tuple[int, ...]) -> tuple[np.ndarray, np.ndarray]:
    """For each row r, enumerate the multi-index rectangle ``[i_lo[r], i_hi[r]]``.

    Returns ``(rows, flat_targets)``; rows with an empty rectangle contribute nothing.
    """
    ext = np.maximum(i_hi - i_lo + 1, 0)
    counts = np.prod(ext, axis=1)
    rows = np.repeat(np.arange(len(counts)), counts)
    starts = np.cumsum(counts) - counts
    local = np.arange(counts.sum()) - np.repeat(starts, counts)
    coords = np.empty((len(rows), len(shape)), dtype=np.int64)
    ext_r = ext[rows]
    for a in range(len(shape) - 1, -1, -1):
        coords[:, a] = i_lo[rows, a] + local % ext_r[:, a]
        local //= ext_r[:, a]
    flat = np.ravel_multi_index(tuple(coords.T), shape) if len(rows) else np.zeros(0, dtype=np.int64)
    return rows, flat


def _image_ranges(grid: Grid, img_lo: np.ndarray, img_hi: np.ndarray):
    """Box index ranges of closed image rectangles, plus an exit flag per row."""
    slo, shi = np.asarray(grid.space_lo), np.asarray(grid.space_hi)
    finite = np.all(np.isfinite(img_lo) & np.isfinite(img_hi), axis=1)
    img_lo = np.where(np.isfinite(img_lo), img_lo, -np.inf)
    img_hi = np.where(np.isfinite(img_hi), img_hi, np.inf)
    # the true image stays in phase space, so clip to it
    lo = np.maximum(img_lo, slo)
    hi = np.minimum(img_hi, shi)
    dlo, dhi = np.asarray(grid.lo), np.asarray(grid.hi)
    leaves = np.any((lo < dlo) | (hi > dhi), axis=1) | ~finite
    i_lo = np.empty(lo.shape, dtype=np.int64)
    i_hi = np.empty(hi.shape, dtype=np.int64)
    for a in range(grid.dims):
        n = grid.shape[a]
        w = grid.box_width[a]
        la = np.clip(lo[:, a], dlo[a] - w, dhi[a] + w)
        ha = np.clip(hi[:, a], dlo[a] - w, dhi[a] + w)
        il = grid.axis_index(a, la)
        # a closed image touching a box's lower face also meets the box below
        il = np.where(dlo[a] + il * w == la, il - 1, il)
        ih = grid.axis_index(a, ha)
        i_lo[:, a] = np.clip(il, 0, n - 1)
        i_hi[:, a] = np.clip(ih, 0, n - 1)
        empty = (ha < dlo[a]) | (la > dhi[a])
        i_hi[empty, a] = i_lo[empty, a] - 1
    # non-finite images: anything in the domain is possible
    if (~finite).any():
        i_lo[~finite] = 0
        i_hi[~finite] = np.asarray(grid.shape) - 1
    return i_lo, i_hi, leaves, ~finite


@dataclass(eq=False)
class FiberedEnclosure:
    """Per-fiber transition matrices ``M[t]`` of shape ``(n+1, n+1)``.

    Row ``b`` lists the boxes (and possibly the outer cell, last column)
    that may contain a point of box ``b`` after one step from fiber ``t``.
    """

    grid: Grid
    path: NoisePath
    family: MapFamily
    matrices: dict[int, sparse.csr_matrix]
    nonfinite: dict[int, int] = field(default_factory=dict)
    _transposed: dict[int, sparse.csr_matrix] = field(default_factory=dict, repr=False)

    @property
    def T(self) -> int:
        return self.path.T

    def _mat(self, t: int) -> sparse.csr_matrix:
        try:
            return self.matrices[t]
        except KeyError:
            raise EnclosureError(f"fiber out of window: no step from t={t} (T={self.T})") from None

    def _mat_t(self, t: int) -> sparse.csr_matrix:
        if t not in self._transposed:
            self._transposed[t] = self._mat(t).T.tocsr()
        return self._transposed[t]

    def forward(self, t: int, b) -> BoxSet:
        """Image of one box (multi-index or flat index)."""
        flat = b if isinstance(b, (int, np.integer)) else int(self.grid.flat_index(b)[0])
        M = self._mat(t)
        row = M.indices[M.indptr[flat] : M.indptr[flat + 1]]
        return BoxSet.from_flat(self.grid, row[row < self.grid.outer], outer=bool(np.any(row == self.grid.outer)))

    def image(self, t: int, B: BoxSet) -> BoxSet:
        return BoxSet(self.grid, self._mat_t(t) @ B.bits)

    def preimage(self, t: int, B: BoxSet) -> BoxSet:
        # void rows point at the outer cell; keep them out of preimages
        return BoxSet(self.grid, (self._mat(t) @ B.bits) & np.append(self.grid.valid, True))

    def edge_count(self) -> int:
        return sum(M.nnz for M in self.matrices.values())

    def to_json(self) -> dict:
        fibers = {}
        for t, M in self.matrices.items():
            adj = {}
            for b in range(self.grid.n_boxes + 1):
                row = M.indices[M.indptr[b] : M.indptr[b + 1]]
                if b < self.grid.n_boxes and not self.grid.valid[b]:
                    continue
                key = "outer" if b == self.grid.outer else str(b)
                adj[key] = ["outer" if j == self.grid.outer else int(j) for j in np.sort(row)]
            fibers[str(t)] = adj
        return {
            "grid": self.grid.descriptor(),
            "family": self.family.to_json(),
            "path": self.path.to_json(),
            "fibers": fibers,
        }

    def export(self, fname: str, compress: bool | None = None) -> None:
        data = json.dumps(self.to_json(), sort_keys=True).encode()
        if compress or (compress is None and fname.endswith(".gz")):
            data = gzip.compress(data, mtime=0)
        with open(fname, "wb") as fh:
            fh.write(data)


def _fiber_matrix(f: MapFamily, grid: Grid, xi: np.ndarray) -> tuple[sparse.csr_matrix, int]:
    n = grid.n_boxes
    src = np.flatnonzero(grid.valid)
    lo, hi = grid.clipped_bounds()
    lo, hi = lo[src], hi[src]
    with np.errstate(all="ignore"):
        if f.enclosure == "interval":
            img_lo, img_hi = f.map_boxes(lo, hi, xi)
        else:
            c = 0.5 * (lo + hi)
            r = 0.5 * np.linalg.norm(hi - lo, axis=1)
            fc = f.map_points(c, xi)
            w = min(grid.box_width)
            k = np.ceil(f.lipschitz_bound * r / w) + 1
            pad = (k * w)[:, None]
            img_lo, img_hi = fc - pad, fc + pad
    i_lo, i_hi, leaves, bad = _image_ranges(grid, img_lo, img_hi)
    rows, cols = _expand_ranges(i_lo, i_hi, grid.shape)
    keep = grid.valid[cols]
    rows, cols = rows[keep], cols[keep]
    out_rows = np.flatnonzero(leaves)
    # a box whose image misses every valid box can only have left the domain
    hit = np.zeros(len(src), dtype=bool)
    hit[rows] = True
    out_rows = np.union1d(out_rows, np.flatnonzero(~hit))
    all_rows = np.concatenate([src[rows], src[out_rows], np.flatnonzero(~grid.valid), [n]])
    all_cols = np.concatenate([cols, np.full(len(out_rows), n), np.full(int((~grid.valid).sum()), n), [n]])
    M = sparse.csr_matrix(
        (np.ones(len(all_rows), dtype=bool), (all_rows, all_cols)),
        shape=(n + 1, n + 1),
        dtype=bool,
    )
    M.sum_duplicates()
    M.sort_indices()
    return M, int(bad.sum())


def build_enclosure(f: MapFamily, grid: Grid, path: NoisePath, threads: int = 1) -> FiberedEnclosure:
    """Outer enclosure of ``f`` driven by ``path`` on every step ``t = -T .. T-1``."""
    if f.dims != grid.dims:
        raise EnclosureError(f"map has {f.dims} coordinates, grid has {grid.dims}")
    if path.dims != f.noise_dims:
        raise EnclosureError(f"map expects {f.noise_dims} noise coordinates, path has {path.dims}")
    if path.model is not None:
        for t in path.steps:
            if not path.model.in_support(path.value(t)):
                raise EnclosureError(f"noise value outside model support at t={t}")

    def one(t):
        return t, _fiber_matrix(f, grid, path.value(t))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, path.steps))
    else:
        results = [one(t) for t in path.steps]
    mats = {t: M for t, (M, _) in results}
    nonfinite = {t: bad for t, (_, bad) in results if bad}
    return FiberedEnclosure(grid, path, f, mats, nonfinite)


def preimage(E: FiberedEnclosure, t: int, B: BoxSet) -> BoxSet:
    """Boxes on fiber ``t`` whose image meets ``B`` (a set on fiber ``t+1``)."""
    return E.preimage(t, B)


def iterate_image(E: FiberedEnclosure, D: FiberedSet | BoxSet, t0: int, k: int) -> BoxSet:
    """``k``-fold image of ``D`` at fiber ``t0``, landing on fiber ``t0 + k``."""
    if k < 0:
        raise EnclosureError("k must be non-negative")
    if not (-E.T <= t0 and t0 + k <= E.T):
        raise EnclosureError(f"window exhausted: steps {t0}..{t0 + k} outside [-{E.T}, {E.T}]")
    B = D[t0] if isinstance(D, FiberedSet) else D
    for t in range(t0, t0 + k):
        B = E.image(t, B)
    return B


def lipschitz_padding(L: float, grid: Grid) -> int:
    """Dilation layers used by the sampled enclosure for a box of ``grid``."""
    r = 0.5 * math.sqrt(sum(w * w for w in grid.box_width))
    return int(math.ceil(L * r / min(grid.box_width))) + 1
