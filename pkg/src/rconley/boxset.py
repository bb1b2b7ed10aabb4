"""Rectangular grids and finite unions of closed boxes.

A :class:`BoxSet` is a subset of the grid's boxes plus one distinguished
*outer* cell standing for "left the domain".  Sets are immutable; every
operation returns a new set.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

OUTER = "outer"


class GridError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Grid:
    """Uniform box grid on ``[lo, hi]`` with ``subdivisions`` boxes per axis.

    ``space_lo``/``space_hi`` optionally restrict the phase space to a
    sub-rectangle of the domain (bounds may be infinite).  Boxes disjoint
    from the phase space are *void*: they never belong to a set, and they
    are ignored when taking combinatorial interiors.
    """

    lo: tuple[float, ...]
    hi: tuple[float, ...]
    subdivisions: tuple[int, ...]
    space_lo: tuple[float, ...] | None = None
    space_hi: tuple[float, ...] | None = None
    box_width: tuple[float, ...] = field(init=False)

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lo)
        hi = tuple(float(v) for v in self.hi)
        subs = tuple(int(v) for v in self.subdivisions)
        if not (len(lo) == len(hi) == len(subs)) or not lo:
            raise GridError("lo, hi and subdivisions must have the same positive length")
        for a, b, n in zip(lo, hi, subs):
            if not (math.isfinite(a) and math.isfinite(b) and a < b):
                raise GridError(f"need finite lo < hi on every axis, got [{a}, {b}]")
            if n < 2:
                raise GridError(f"subdivisions must be >= 2, got {n}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "subdivisions", subs)
        object.__setattr__(self, "box_width", tuple((b - a) / n for a, b, n in zip(lo, hi, subs)))
        for name, default in (("space_lo", -math.inf), ("space_hi", math.inf)):
            val = getattr(self, name)
            if val is None:
                val = (default,) * len(lo)
            val = tuple(float(v) for v in val)
            if len(val) != len(lo):
                raise GridError(f"{name} has wrong dimension")
            object.__setattr__(self, name, val)
        if any(a >= b for a, b in zip(self.space_lo, self.space_hi)):
            raise GridError("empty phase space")

    @property
    def dims(self) -> int:
        return len(self.lo)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.subdivisions

    @cached_property
    def n_boxes(self) -> int:
        return int(np.prod(self.subdivisions))

    @property
    def outer(self) -> int:
        """Flat index of the outer cell."""
        return self.n_boxes

    def __eq__(self, other):
        if not isinstance(other, Grid):
            return NotImplemented
        return self.descriptor() == other.descriptor()

    def __hash__(self):
        return hash(tuple(map(tuple, self.descriptor().values())))

    def descriptor(self) -> dict:
        return {
            "lo": list(self.lo),
            "hi": list(self.hi),
            "subdivisions": list(self.subdivisions),
            "space_lo": [_enc_float(v) for v in self.space_lo],
            "space_hi": [_enc_float(v) for v in self.space_hi],
        }

    @classmethod
    def from_descriptor(cls, d: dict) -> "Grid":
        return cls(
            tuple(d["lo"]),
            tuple(d["hi"]),
            tuple(d["subdivisions"]),
            tuple(_dec_float(v) for v in d["space_lo"]) if "space_lo" in d else None,
            tuple(_dec_float(v) for v in d["space_hi"]) if "space_hi" in d else None,
        )

    @cached_property
    def _multi(self) -> np.ndarray:
        idx = np.indices(self.shape).reshape(self.dims, -1).T
        idx.setflags(write=False)
        return idx

    def multi_index(self, flat) -> np.ndarray:
        return self._multi[np.asarray(flat, dtype=np.intp)]

    def flat_index(self, multi) -> np.ndarray:
        multi = np.atleast_2d(np.asarray(multi, dtype=np.intp))
        return np.ravel_multi_index(tuple(multi.T), self.shape)

    @cached_property
    def box_lower(self) -> np.ndarray:
        out = np.asarray(self.lo) + self._multi * np.asarray(self.box_width)
        out.setflags(write=False)
        return out

    @cached_property
    def box_upper(self) -> np.ndarray:
        out = np.asarray(self.lo) + (self._multi + 1) * np.asarray(self.box_width)
        # the last box on each axis ends exactly on hi
        last = self._multi == (np.asarray(self.shape) - 1)
        out = np.where(last, np.asarray(self.hi), out)
        out.setflags(write=False)
        return out

    @cached_property
    def centers(self) -> np.ndarray:
        out = 0.5 * (self.box_lower + self.box_upper)
        out.setflags(write=False)
        return out

    @cached_property
    def valid(self) -> np.ndarray:
        """Boxes meeting the (closed) phase space."""
        ok = np.all(
            (self.box_upper >= np.asarray(self.space_lo)) & (self.box_lower <= np.asarray(self.space_hi)),
            axis=1,
        )
        ok.setflags(write=False)
        return ok

    @property
    def restricted(self) -> bool:
        return not bool(np.all(self.valid))

    def clipped_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Box bounds intersected with the phase space (void boxes give lo > hi)."""
        return (
            np.maximum(self.box_lower, np.asarray(self.space_lo)),
            np.minimum(self.box_upper, np.asarray(self.space_hi)),
        )

    def axis_index(self, axis: int, values: np.ndarray) -> np.ndarray:
        """Unclipped half-open cell index of ``values`` along ``axis``."""
        lo, w = self.lo[axis], self.box_width[axis]
        values = np.asarray(values, dtype=float)
        i = np.floor((values - lo) / w)
        i = np.where(np.isfinite(i), i, np.sign(values - lo) * 1e18)
        i = i.astype(np.int64)
        # floating-point repair of the division against the stored box width
        i = np.where(lo + i * w > values, i - 1, i)
        i = np.where(lo + (i + 1) * w <= values, i + 1, i)
        return i


def _enc_float(v: float):
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


def _dec_float(v) -> float:
    return float(v)


def locate(grid: Grid, p: Sequence[float]):
    """Box multi-index containing ``p`` or :data:`OUTER`."""
    p = np.asarray(p, dtype=float)
    if p.shape != (grid.dims,):
        raise GridError(f"point has {p.size} coordinates, grid has {grid.dims}")
    flat = locate_many(grid, p[None, :])[0]
    if flat == grid.outer:
        return OUTER
    return tuple(int(v) for v in grid.multi_index(flat))


def locate_many(grid: Grid, pts: np.ndarray) -> np.ndarray:
    """Vectorised :func:`locate` returning flat indices (outer cell = ``grid.outer``)."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    if pts.shape[1] != grid.dims:
        raise GridError("dimension mismatch")
    idx = np.empty(pts.shape, dtype=np.int64)
    inside = np.all(np.isfinite(pts), axis=1)
    for a in range(grid.dims):
        x = pts[:, a]
        i = grid.axis_index(a, np.where(np.isfinite(x), x, grid.lo[a]))
        n = grid.shape[a]
        i = np.where(x == grid.hi[a], n - 1, i)
        inside &= (x >= grid.lo[a]) & (x <= grid.hi[a])
        inside &= (x >= grid.space_lo[a]) & (x <= grid.space_hi[a])
        idx[:, a] = np.clip(i, 0, n - 1)
    flat = np.ravel_multi_index(tuple(idx.T), grid.shape)
    return np.where(inside, flat, grid.outer)


class BoxSet:
    """Immutable finite union of closed grid boxes, possibly with the outer cell."""

    __slots__ = ("grid", "_bits", "_hash")

    def __init__(self, grid: Grid, bits: np.ndarray):
        bits = np.asarray(bits, dtype=bool)
        if bits.shape != (grid.n_boxes + 1,):
            raise GridError("bit vector has wrong length")
        if bits[:-1].any() and not np.all(grid.valid[bits[:-1]]):
            raise GridError("box set contains boxes outside the phase space")
        bits = bits.copy()
        bits.setflags(write=False)
        self.grid = grid
        self._bits = bits
        self._hash = None

    # construction -------------------------------------------------------
    @classmethod
    def empty(cls, grid: Grid) -> "BoxSet":
        return cls(grid, np.zeros(grid.n_boxes + 1, dtype=bool))

    @classmethod
    def full(cls, grid: Grid) -> "BoxSet":
        """All in-domain boxes of the phase space (no outer cell)."""
        return cls(grid, np.append(grid.valid, False))

    @classmethod
    def from_mask(cls, grid: Grid, mask: np.ndarray, outer: bool = False) -> "BoxSet":
        mask = np.asarray(mask, dtype=bool).reshape(-1)
        return cls(grid, np.append(mask, outer))

    @classmethod
    def from_flat(cls, grid: Grid, flat: Iterable[int], outer: bool = False) -> "BoxSet":
        bits = np.zeros(grid.n_boxes + 1, dtype=bool)
        flat = np.fromiter((int(v) for v in flat), dtype=np.int64)
        if flat.size and (flat.min() < 0 or flat.max() > grid.n_boxes):
            raise GridError("flat index out of range")
        bits[flat] = True
        bits[-1] |= outer
        return cls(grid, bits)

    @classmethod
    def from_indices(cls, grid: Grid, indices: Iterable[Sequence[int]], outer: bool = False) -> "BoxSet":
        indices = [tuple(i) for i in indices]
        for i in indices:
            if len(i) != grid.dims or any(not 0 <= v < n for v, n in zip(i, grid.shape)):
                raise GridError(f"multi-index {i} outside grid")
        flat = grid.flat_index(indices) if indices else []
        return cls.from_flat(grid, flat, outer)

    # accessors ----------------------------------------------------------
    @property
    def bits(self) -> np.ndarray:
        return self._bits

    @property
    def mask(self) -> np.ndarray:
        """Boolean array shaped like the grid (outer cell dropped)."""
        return self._bits[:-1].reshape(self.grid.shape)

    @property
    def contains_outer(self) -> bool:
        return bool(self._bits[-1])

    @property
    def flat(self) -> np.ndarray:
        return np.flatnonzero(self._bits[:-1])

    @property
    def members(self) -> list[tuple[int, ...]]:
        return [tuple(int(v) for v in m) for m in self.grid.multi_index(self.flat)]

    def __len__(self) -> int:
        return int(self._bits[:-1].sum())

    def __bool__(self) -> bool:
        return bool(self._bits.any())

    def is_empty(self) -> bool:
        return not self._bits.any()

    def __contains__(self, item) -> bool:
        if item == OUTER:
            return self.contains_outer
        flat = int(self.grid.flat_index(item)[0])
        return bool(self._bits[flat])

    def __iter__(self):
        return iter(self.members)

    def __repr__(self) -> str:
        n = len(self)
        shown = self.members[:6]
        more = ", ..." if n > 6 else ""
        outer = " +outer" if self.contains_outer else ""
        return f"BoxSet({n} boxes{outer}: {shown}{more})"

    # algebra ------------------------------------------------------------
    def _check(self, other: "BoxSet"):
        if not isinstance(other, BoxSet):
            raise TypeError("expected BoxSet")
        if other.grid is not self.grid and other.grid != self.grid:
            raise GridError("box sets live on different grids")

    def __or__(self, other: "BoxSet") -> "BoxSet":
        self._check(other)
        return BoxSet(self.grid, self._bits | other._bits)

    def __and__(self, other: "BoxSet") -> "BoxSet":
        self._check(other)
        return BoxSet(self.grid, self._bits & other._bits)

    def __sub__(self, other: "BoxSet") -> "BoxSet":
        self._check(other)
        return BoxSet(self.grid, self._bits & ~other._bits)

    def __xor__(self, other: "BoxSet") -> "BoxSet":
        self._check(other)
        return BoxSet(self.grid, self._bits ^ other._bits)

    union, intersection, difference = __or__, __and__, __sub__

    def complement(self) -> "BoxSet":
        """Complement within the domain: the outer cell is never included."""
        return BoxSet(self.grid, np.append(self.grid.valid & ~self._bits[:-1], False))

    def without_outer(self) -> "BoxSet":
        if not self.contains_outer:
            return self
        bits = self._bits.copy()
        bits[-1] = False
        return BoxSet(self.grid, bits)

    def issubset(self, other: "BoxSet") -> bool:
        self._check(other)
        return not np.any(self._bits & ~other._bits)

    __le__ = issubset

    def issuperset(self, other: "BoxSet") -> bool:
        return other.issubset(self)

    __ge__ = issuperset

    def __eq__(self, other) -> bool:
        if not isinstance(other, BoxSet):
            return NotImplemented
        return self.grid == other.grid and np.array_equal(self._bits, other._bits)

    def __hash__(self) -> int:
        if self._hash is None:
            self._hash = hash(self._bits.tobytes())
        return self._hash

    # serialisation ------------------------------------------------------
    def to_json(self) -> dict:
        return {
            "grid": self.grid.descriptor(),
            "boxes": [list(m) for m in self.members],
            "outer": self.contains_outer,
        }

    @classmethod
    def from_json(cls, d: dict, grid: Grid | None = None) -> "BoxSet":
        g = Grid.from_descriptor(d["grid"])
        if grid is not None:
            if grid != g:
                raise GridError("grid descriptor does not match")
            g = grid
        return cls.from_indices(g, d["boxes"], outer=bool(d.get("outer", False)))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        d = self.grid.dims
        writer.writerow([f"i{a}" for a in range(d)] + [f"{s}{a}" for a in range(d) for s in ("lo", "hi")])
        for f in self.flat:
            m = self.grid.multi_index(f)
            lo, hi = self.grid.box_lower[f], self.grid.box_upper[f]
            row = [int(v) for v in m]
            for a in range(d):
                row += [repr(float(lo[a])), repr(float(hi[a]))]
            writer.writerow(row)
        return buf.getvalue()


def _structure(dims: int) -> np.ndarray:
    return np.ones((3,) * dims, dtype=bool)


def interior(B: BoxSet) -> BoxSet:
    """Boxes of ``B`` whose whole Moore neighbourhood lies in ``B``.

    Boxes on the domain boundary are never interior.  Void neighbours
    (outside a restricted phase space) are ignored, which realises the
    interior relative to the phase space.
    """
    grid = B.grid
    if not B.mask.any():
        return BoxSet.empty(grid)
    void = ~grid.valid.reshape(grid.shape)
    eroded = ndimage.binary_erosion(B.mask | void, structure=_structure(grid.dims), border_value=0)
    return BoxSet.from_mask(grid, eroded & B.mask)


def dilate(B: BoxSet, k: int) -> BoxSet:
    """Grow ``B`` by ``k`` Moore layers, clipped to the domain (outer flag kept)."""
    if k < 0:
        raise ValueError("dilation must be non-negative")
    grid = B.grid
    if k == 0 or not B.mask.any():
        return B
    grown = ndimage.binary_dilation(B.mask, structure=_structure(grid.dims), iterations=k)
    grown &= grid.valid.reshape(grid.shape)
    return BoxSet.from_mask(grid, grown, outer=B.contains_outer)


def regularize(B: BoxSet) -> BoxSet:
    """Drop boxes that are not in the closure of the interior (isolated "hairs")."""
    return B & dilate(interior(B), 1)


def hausdorff_semidist(A: BoxSet, B: BoxSet) -> float:
    """max over A-box centres of the distance to the nearest B-box centre."""
    A._check(B)
    if B.mask.sum() == 0:
        raise ValueError("empty target")
    if A.mask.sum() == 0:
        return 0.0
    tree = cKDTree(A.grid.centers[B.flat])
    dist, _ = tree.query(A.grid.centers[A.flat])
    # exact zero on shared boxes regardless of rounding in the tree
    dist[B.bits[A.flat]] = 0.0
    return float(dist.max())


def hausdorff_dist(A: BoxSet, B: BoxSet) -> float:
    return max(hausdorff_semidist(A, B), hausdorff_semidist(B, A))


def boxes_meeting_ball(grid: Grid, center: Sequence[float], radius: float) -> BoxSet:
    """Boxes whose closed extent meets the closed Euclidean ball."""
    c = np.asarray(center, dtype=float)
    nearest = np.clip(c, grid.box_lower, grid.box_upper)
    d2 = np.sum((nearest - c) ** 2, axis=1)
    return BoxSet.from_mask(grid, (d2 <= radius * radius) & grid.valid)


def boxes_meeting_box(grid: Grid, lo: Sequence[float], hi: Sequence[float]) -> BoxSet:
    """Boxes whose closed extent meets the closed rectangle ``[lo, hi]``."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    hit = np.all((grid.box_upper >= lo) & (grid.box_lower <= hi), axis=1)
    return BoxSet.from_mask(grid, hit & grid.valid)


def box_of(grid: Grid, p: Sequence[float]) -> BoxSet:
    """Singleton set of the box located at ``p`` (empty if ``p`` is outside)."""
    flat = locate_many(grid, np.asarray(p, dtype=float)[None, :])[0]
    if flat == grid.outer:
        return BoxSet.empty(grid)
    return BoxSet.from_flat(grid, [flat])
