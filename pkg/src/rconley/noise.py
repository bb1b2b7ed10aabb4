"""Sampled noise windows.  The shift acts on a path by re-indexing."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

NOISE_KINDS = ("uniform", "discrete", "constant")


class NoiseError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseModel:
    """i.i.d. noise: per step a vector of ``dims`` coordinates.

    * ``uniform``: coordinate i ~ U(low[i], high[i]) independently
    * ``discrete``: rows of ``values`` drawn with probabilities ``weights``
    * ``constant``: always ``value``
    """

    kind: str
    dims: int
    low: tuple[float, ...] = ()
    high: tuple[float, ...] = ()
    values: tuple[tuple[float, ...], ...] = ()
    weights: tuple[float, ...] = ()
    value: tuple[float, ...] = ()
    # every shipped model is i.i.d., hence ergodic under the shift
    ergodic: bool = field(default=True, init=False)

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise NoiseError(f"unknown noise kind {self.kind!r}")
        if self.dims < 1:
            raise NoiseError("noise needs at least one coordinate")
        if self.kind == "uniform":
            if len(self.low) != self.dims or len(self.high) != self.dims:
                raise NoiseError("uniform bounds must have one entry per coordinate")
            for a, b in zip(self.low, self.high):
                if not (math.isfinite(a) and math.isfinite(b) and a < b):
                    raise NoiseError(f"uniform noise needs a < b, got ({a}, {b})")
        elif self.kind == "discrete":
            if not self.values or len(self.values) != len(self.weights):
                raise NoiseError("discrete noise needs matching values and weights")
            if any(len(v) != self.dims for v in self.values):
                raise NoiseError("discrete values must have dims coordinates")
            if any(not (w > 0) for w in self.weights):
                raise NoiseError("weights must be positive")
            if abs(sum(self.weights) - 1.0) > 1e-12:
                raise NoiseError("weights must sum to 1")
        else:
            if len(self.value) != self.dims:
                raise NoiseError("constant value must have dims coordinates")

    @classmethod
    def uniform(cls, low, high) -> "NoiseModel":
        low, high = np.atleast_1d(low).astype(float), np.atleast_1d(high).astype(float)
        return cls("uniform", len(low), low=tuple(low), high=tuple(high))

    @classmethod
    def discrete(cls, values, weights) -> "NoiseModel":
        vals = np.asarray(values, dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None]
        return cls(
            "discrete",
            vals.shape[1],
            values=tuple(tuple(row) for row in vals),
            weights=tuple(float(w) for w in weights),
        )

    @classmethod
    def constant(cls, value) -> "NoiseModel":
        v = np.atleast_1d(value).astype(float)
        return cls("constant", len(v), value=tuple(v))

    def in_support(self, xi: np.ndarray) -> bool:
        xi = np.asarray(xi, dtype=float)
        if self.kind == "uniform":
            return bool(np.all((xi >= self.low) & (xi <= self.high)))
        if self.kind == "discrete":
            return any(np.array_equal(xi, np.asarray(v)) for v in self.values)
        return bool(np.array_equal(xi, np.asarray(self.value)))

    def draw(self, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "uniform":
            return rng.uniform(self.low, self.high)
        if self.kind == "discrete":
            i = rng.choice(len(self.values), p=np.asarray(self.weights))
            return np.asarray(self.values[i], dtype=float)
        return np.asarray(self.value, dtype=float)

    def to_json(self) -> dict:
        d = {"kind": self.kind, "dims": self.dims}
        if self.kind == "uniform":
            d.update(low=list(self.low), high=list(self.high))
        elif self.kind == "discrete":
            d.update(values=[list(v) for v in self.values], weights=list(self.weights))
        else:
            d.update(value=list(self.value))
        return d

    @classmethod
    def from_json(cls, d: dict) -> "NoiseModel":
        kind = d["kind"]
        if kind == "uniform":
            return cls.uniform(d["low"], d["high"])
        if kind == "discrete":
            return cls.discrete(d["values"], d["weights"])
        if kind == "constant":
            return cls.constant(d["value"])
        raise NoiseError(f"unknown noise kind {kind!r}")


def _counter(t: int) -> int:
    # zigzag so that negative indices get their own stream
    return 2 * t if t >= 0 else -2 * t - 1


def draw_at(model: NoiseModel, seed: int, t: int) -> np.ndarray:
    """The noise value at absolute index ``t`` for ``seed`` (independent of the window)."""
    bitgen = np.random.Philox(key=int(seed) & (2**64 - 1), counter=[0, _counter(int(t)), 0, 0])
    return model.draw(np.random.Generator(bitgen))


@dataclass(frozen=True, eq=False)
class NoisePath:
    """Noise values for steps ``t = -T .. T-1``.

    ``values[t + T]`` drives the step from fiber ``t`` to ``t + 1``.  ``offset``
    records the accumulated shift relative to the generating stream.
    """

    model: NoiseModel | None
    seed: int | None
    T: int
    values: np.ndarray
    offset: int = 0

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None]
        if self.T < 1:
            raise NoiseError("half-window T must be >= 1")
        if vals.shape[0] != 2 * self.T:
            raise NoiseError(f"expected {2 * self.T} noise values, got {vals.shape[0]}")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def dims(self) -> int:
        return self.values.shape[1]

    @property
    def fibers(self) -> range:
        return range(-self.T, self.T + 1)

    @property
    def steps(self) -> range:
        return range(-self.T, self.T)

    def value(self, t: int) -> np.ndarray:
        if not -self.T <= t < self.T:
            raise NoiseError(f"window exhausted: no noise value at t={t} for T={self.T}")
        return self.values[t + self.T]

    def __eq__(self, other) -> bool:
        if not isinstance(other, NoisePath):
            return NotImplemented
        return (
            self.T == other.T
            and self.seed == other.seed
            and self.offset == other.offset
            and self.model == other.model
            and np.array_equal(self.values, other.values)
        )

    def __hash__(self):
        return hash((self.T, self.seed, self.offset, self.values.tobytes()))

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "T": self.T,
            "offset": self.offset,
            "model": None if self.model is None else self.model.to_json(),
            "values": self.values.tolist(),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)

    @classmethod
    def from_json(cls, d: dict) -> "NoisePath":
        model = None if d.get("model") is None else NoiseModel.from_json(d["model"])
        return cls(model, d.get("seed"), int(d["T"]), np.asarray(d["values"], dtype=float), int(d.get("offset", 0)))

    @classmethod
    def from_values(cls, values, model: NoiseModel | None = None) -> "NoisePath":
        """Wrap an explicit window of ``2T`` noise values."""
        vals = np.asarray(values, dtype=float)
        if vals.shape[0] % 2:
            raise NoiseError("explicit paths need an even number of values")
        return cls(model, None, vals.shape[0] // 2, vals)


def sample_path(model: NoiseModel, seed: int, T: int) -> NoisePath:
    if T < 1:
        raise NoiseError("T must be >= 1")
    vals = np.stack([draw_at(model, seed, t) for t in range(-T, T)])
    return NoisePath(model, int(seed), int(T), vals)


def shift(path: NoisePath, k: int) -> NoisePath:
    """Path whose index ``t`` reads the old index ``t + k``; the window shrinks by ``|k|``."""
    k = int(k)
    if abs(k) >= path.T:
        raise NoiseError(f"window exhausted: |k|={abs(k)} >= T={path.T}")
    if k == 0:
        return path
    T2 = path.T - abs(k)
    start = -T2 + k + path.T
    vals = path.values[start : start + 2 * T2]
    return NoisePath(path.model, path.seed, T2, vals, path.offset + k)
