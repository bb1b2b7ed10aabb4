"""Parametrised random maps.

A map is evaluated coordinate-wise through plain arithmetic, so the same
code path serves float arrays (points) and :class:`Interval` arrays (boxes).
Noise enters each family linearly through the homotopy parameter ``lam``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy import optimize

from .interval import Interval

BUILTINS = ("random-diagonal", "random-logistic", "random-lorenz-euler")
FAMILY_KINDS = ("builtin", "affine", "polynomial", "field")
FIELDS = ("lorenz", "lorenz-y0", "logistic", "linear")
INTEGRATORS = ("euler", "rk4")
_BUILTIN_DEFAULTS = {
    "random-diagonal": {},
    "random-logistic": {"K": 1.0, "r": 0.8, "h": 0.1},
    "random-lorenz-euler": {"sigma": 0.9, "rho": 0.5, "beta": 0.9, "h": 0.05, "reduced": False},
}


class FamilyError(ValueError):
    pass


class NoInverse(FamilyError):
    pass


Coords = list  # list of per-axis arrays or Intervals


def _param(params: dict, key: str, default=None):
    if key in params:
        return params[key]
    if default is None:
        raise FamilyError(f"missing parameter {key!r}")
    return default


# ---------------------------------------------------------------- fields
def _lorenz_coeffs(p: dict, xi, lam: float):
    amp = p.get("noise_scale", [1.0, 1.0, 1.0])
    sigma = p["sigma"] + lam * amp[0] * xi[0]
    rho = p["rho"] + lam * amp[1] * xi[1]
    beta = p["beta"] + lam * amp[2] * xi[2]
    return sigma, rho, beta


def lorenz_field(x: Coords, xi, lam: float, p: dict) -> Coords:
    sigma, rho, beta = _lorenz_coeffs(p, xi, lam)
    X, Y, Z = x
    return [sigma * (Y - X), rho * X - Y - X * Z, X * Y - beta * Z]


def lorenz_y0_field(x: Coords, xi, lam: float, p: dict) -> Coords:
    sigma, _, beta = _lorenz_coeffs(p, xi, lam)
    X, Z = x
    return [-sigma * X, -beta * Z]


def logistic_field(x: Coords, xi, lam: float, p: dict) -> Coords:
    K = p["K"]
    r = p["r"] + lam * xi[0]
    X = x[0]
    return [r * X * (1.0 - X / K)]


def linear_field(x: Coords, xi, lam: float, p: dict) -> Coords:
    A = np.asarray(p["matrix"], dtype=float)
    out = []
    for i in range(A.shape[0]):
        acc = 0.0
        for j in range(A.shape[1]):
            if A[i, j] != 0.0:
                acc = acc + A[i, j] * x[j]
        out.append(acc)
    return out


_FIELD_FUNCS: dict[str, Callable] = {
    "lorenz": lorenz_field,
    "lorenz-y0": lorenz_y0_field,
    "logistic": logistic_field,
    "linear": linear_field,
}

_FIELD_DIMS = {"lorenz": (3, 3), "lorenz-y0": (2, 3), "logistic": (1, 1)}


def _axpy(a: float, v: Coords, x: Coords) -> Coords:
    return [xi + a * vi for xi, vi in zip(x, v)]


def integrate(field_fn: Callable, x: Coords, xi, lam: float, p: dict, h: float, integrator: str, substeps: int) -> Coords:
    """Fixed-step (non-validated) integration over time ``h``."""
    dt = h / substeps
    for _ in range(substeps):
        if integrator == "euler":
            x = _axpy(dt, field_fn(x, xi, lam, p), x)
        else:
            k1 = field_fn(x, xi, lam, p)
            k2 = field_fn(_axpy(dt / 2, k1, x), xi, lam, p)
            k3 = field_fn(_axpy(dt / 2, k2, x), xi, lam, p)
            k4 = field_fn(_axpy(dt, k3, x), xi, lam, p)
            x = [
                a + (dt / 6) * b1 + (dt / 3) * b2 + (dt / 3) * b3 + (dt / 6) * b4
                for a, b1, b2, b3, b4 in zip(x, k1, k2, k3, k4)
            ]
    return x


# ---------------------------------------------------------------- family
@dataclass(frozen=True)
class MapFamily:
    """One member ``phi_lam(xi, .)`` of a noise-driven family of maps.

    ``kind``/``name``/``params`` select the formula.  ``lipschitz_bound`` is
    required when ``enclosure == "sampled"``.  ``bump`` adds a constant
    vector to every image (used for C0 perturbations).
    """

    kind: str
    name: str = ""
    params: dict = field(default_factory=dict)
    lam: float = 1.0
    lipschitz_bound: float | None = None
    enclosure: str = "interval"
    bump: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind not in FAMILY_KINDS:
            raise FamilyError(f"unknown family kind {self.kind!r}")
        if not (0.0 <= self.lam <= 1.0):
            raise FamilyError("lam must lie in [0, 1]")
        if self.enclosure not in ("interval", "sampled"):
            raise FamilyError("enclosure must be 'interval' or 'sampled'")
        if self.enclosure == "sampled" and self.lipschitz_bound is None:
            raise FamilyError("missing Lipschitz bound for sampled enclosure")
        if self.lipschitz_bound is not None and not self.lipschitz_bound >= 0:
            raise FamilyError("Lipschitz bound must be non-negative")
        if self.kind == "builtin" and self.name not in BUILTINS:
            raise FamilyError(f"unknown builtin {self.name!r}; expected one of {BUILTINS}")
        if self.kind == "builtin":
            # missing parameters take the library defaults
            object.__setattr__(self, "params", {**_BUILTIN_DEFAULTS[self.name], **self.params})
        if self.kind == "field":
            if self.name not in FIELDS:
                raise FamilyError(f"unknown field {self.name!r}")
            if not _param(self.params, "h") > 0:
                raise FamilyError("time step h must be positive")
            if self.params.get("integrator", "euler") not in INTEGRATORS:
                raise FamilyError("integrator must be euler or rk4")
        if self.kind == "polynomial":
            terms = _param(self.params, "terms")
            if not terms or len(terms) != self.dims:
                raise FamilyError("polynomial needs one term list per output coordinate")
            degree = max((sum(t["powers"]) for comp in terms for t in comp), default=0)
            if degree < 1:
                raise FamilyError("polynomial degree must be >= 1")
        if self.kind == "affine":
            A = np.asarray(_param(self.params, "matrix"), dtype=float)
            if A.ndim != 2 or A.shape[0] != A.shape[1]:
                raise FamilyError("affine matrix must be square")
        if self.bump is not None and len(self.bump) != self.dims:
            raise FamilyError("bump has wrong dimension")

    # ------------------------------------------------------------ shape
    @property
    def dims(self) -> int:
        p = self.params
        if self.kind == "builtin":
            if self.name == "random-diagonal":
                return int(p.get("dims", len(p.get("base", [0.0, 0.0]))))
            if self.name == "random-logistic":
                return 1
            return 2 if p.get("reduced", False) else 3
        if self.kind == "affine":
            return len(p["matrix"])
        if self.kind == "polynomial":
            return len(p["terms"])
        if self.name == "linear":
            return len(p["matrix"])
        return _FIELD_DIMS[self.name][0]

    @property
    def noise_dims(self) -> int:
        p = self.params
        if self.kind == "builtin":
            if self.name == "random-diagonal":
                return self.dims
            if self.name == "random-logistic":
                return 1
            return 3
        if self.kind == "affine":
            n = max(len(p.get("noise_matrices", [])), len(p.get("noise_offsets", [])))
            return n or int(p.get("noise_dims", 1))
        if self.kind == "polynomial":
            return int(p.get("noise_dims", 1))
        if self.name == "linear":
            return int(p.get("noise_dims", 1))
        return _FIELD_DIMS[self.name][1]

    def with_lambda(self, lam: float) -> "MapFamily":
        return replace(self, lam=float(lam))

    def perturbed(self, bump: Sequence[float]) -> "MapFamily":
        bump = tuple(float(b) for b in bump)
        if self.bump is not None:
            bump = tuple(a + b for a, b in zip(self.bump, bump))
        return replace(self, bump=bump)

    def with_bump_size(self, delta: float) -> "MapFamily":
        """Perturb by the constant vector ``(delta, ..., delta)`` (sup-norm ``delta``)."""
        return self.perturbed([delta] * self.dims)

    # ------------------------------------------------------------ evaluation
    def apply(self, x: Coords, xi) -> Coords:
        """Generic evaluation on coordinate lists (floats, arrays or Intervals)."""
        xi = np.asarray(xi, dtype=float).reshape(-1)
        lam, p = self.lam, self.params
        if self.kind == "builtin":
            if self.name == "random-diagonal":
                base = p.get("base", [0.0] * self.dims)
                out = [(base[i] + lam * xi[i]) * x[i] for i in range(self.dims)]
            elif self.name == "random-logistic":
                X = x[0]
                c = p["h"] * (p["r"] + lam * xi[0])
                out = [X + c * X * (1.0 - X / p["K"])]
            else:
                fn = lorenz_y0_field if p.get("reduced", False) else lorenz_field
                out = integrate(fn, x, xi, lam, p, p["h"], "euler", 1)
        elif self.kind == "affine":
            A, b = self._affine(xi)
            out = []
            for i in range(self.dims):
                acc = b[i]
                for j in range(self.dims):
                    if A[i, j] != 0.0:
                        acc = acc + A[i, j] * x[j]
                out.append(acc)
        elif self.kind == "polynomial":
            out = []
            for comp in p["terms"]:
                acc = 0.0
                for term in comp:
                    nc = term.get("noise_coef", [])
                    coef = term.get("coef", 0.0) + lam * sum(c * xi[k] for k, c in enumerate(nc))
                    if coef == 0.0:
                        continue
                    mono = coef
                    for j, e in enumerate(term["powers"]):
                        if e:
                            mono = mono * (x[j] ** int(e))
                    acc = acc + mono
                out.append(acc)
        else:
            out = integrate(
                _FIELD_FUNCS[self.name],
                x,
                xi,
                lam,
                p,
                p["h"],
                p.get("integrator", "euler"),
                int(p.get("substeps", 1)),
            )
        if self.bump is not None:
            out = [o + b for o, b in zip(out, self.bump)]
        return out

    def _affine(self, xi):
        p, lam = self.params, self.lam
        A = np.array(p["matrix"], dtype=float)
        b = np.array(p.get("offset", [0.0] * len(A)), dtype=float)
        for k, M in enumerate(p.get("noise_matrices", [])):
            A = A + lam * xi[k] * np.asarray(M, dtype=float)
        for k, v in enumerate(p.get("noise_offsets", [])):
            b = b + lam * xi[k] * np.asarray(v, dtype=float)
        return A, b

    def map_points(self, pts: np.ndarray, xi) -> np.ndarray:
        """Apply to an ``(m, dims)`` array of points."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        out = self.apply([pts[:, i] for i in range(self.dims)], xi)
        return np.stack([np.broadcast_to(np.asarray(o, dtype=float), pts.shape[:1]) for o in out], axis=1)

    def map_boxes(self, lo: np.ndarray, hi: np.ndarray, xi) -> tuple[np.ndarray, np.ndarray]:
        """Interval image of the boxes ``[lo, hi]`` (rows), outward rounded."""
        out = self.apply([Interval(lo[:, i], hi[:, i]) for i in range(self.dims)], xi)
        out = [Interval.lift(o) for o in out]
        n = lo.shape[0]
        return (
            np.stack([np.broadcast_to(o.lo, (n,)) for o in out], axis=1),
            np.stack([np.broadcast_to(o.hi, (n,)) for o in out], axis=1),
        )

    # ------------------------------------------------------------ inverse
    @property
    def has_inverse(self) -> bool:
        return self.kind != "polynomial"

    def inverse_points(self, pts: np.ndarray, xi) -> np.ndarray:
        """Preimages of points under ``phi(xi, .)``; raises :class:`NoInverse` for polynomials."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        if not self.has_inverse:
            raise NoInverse("no inverse available for polynomial families")
        xi = np.asarray(xi, dtype=float).reshape(-1)
        if self.bump is not None:
            pts = pts - np.asarray(self.bump)
            base = replace(self, bump=None)
        else:
            base = self
        if self.kind == "builtin" and self.name == "random-diagonal":
            a = np.asarray(self.params.get("base", [0.0] * self.dims)) + self.lam * xi[: self.dims]
            return pts / a
        if self.kind == "affine":
            A, b = self._affine(xi)
            return np.linalg.solve(A, (pts - b).T).T
        if self.kind == "builtin" and self.name == "random-logistic":
            return np.array([[_solve_scalar(lambda x: base.map_points([[x]], xi)[0, 0], y[0])] for y in pts])
        out = []
        for y in pts:
            sol = optimize.fsolve(lambda x: base.map_points(x[None, :], xi)[0] - y, y, xtol=1e-13, full_output=True)
            if sol[2] != 1:
                raise NoInverse(f"inverse iteration did not converge at {y}")
            out.append(sol[0])
        return np.asarray(out)

    # ------------------------------------------------------------ io
    def to_json(self) -> dict:
        d = {
            "kind": self.kind,
            "name": self.name,
            "params": self.params,
            "lam": self.lam,
            "enclosure": self.enclosure,
        }
        if self.lipschitz_bound is not None:
            d["lipschitz_bound"] = self.lipschitz_bound
        if self.bump is not None:
            d["bump"] = list(self.bump)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "MapFamily":
        return cls(
            kind=d["kind"],
            name=d.get("name", ""),
            params=dict(d.get("params", {})),
            lam=float(d.get("lam", 1.0)),
            lipschitz_bound=d.get("lipschitz_bound"),
            enclosure=d.get("enclosure", "interval"),
            bump=None if d.get("bump") is None else tuple(d["bump"]),
        )

    def __hash__(self):
        return hash(repr(self.to_json()))


def _solve_scalar(f: Callable[[float], float], y: float) -> float:
    # bracket by expanding around y; the shipped 1D maps are increasing near y
    a, b = y - 1.0, y + 1.0
    for _ in range(60):
        fa, fb = f(a) - y, f(b) - y
        if fa * fb <= 0:
            return optimize.brentq(lambda x: f(x) - y, a, b, xtol=1e-15, rtol=4 * np.finfo(float).eps)
        a, b = a - (b - a), b + (b - a)
    raise NoInverse(f"could not bracket preimage of {y}")


# ---------------------------------------------------------------- builders
def random_diagonal(dims: int = 2, base: Sequence[float] | None = None, lam: float = 1.0) -> MapFamily:
    """``x_i -> (base_i + lam xi_i) x_i``; with base 0 the noise is the diagonal itself."""
    base = [0.0] * dims if base is None else [float(b) for b in base]
    return MapFamily("builtin", "random-diagonal", {"dims": dims, "base": base}, lam=lam)


def random_logistic(K: float = 1.0, r: float = 0.8, h: float = 0.1, lam: float = 1.0) -> MapFamily:
    """Euler step ``x + h r_lam x (1 - x/K)`` with ``r_lam = r + lam xi``."""
    return MapFamily("builtin", "random-logistic", {"K": K, "r": r, "h": h}, lam=lam)


def random_lorenz_euler(
    sigma: float = 0.9,
    rho: float = 0.5,
    beta: float = 0.9,
    h: float = 0.05,
    lam: float = 1.0,
    reduced: bool = False,
) -> MapFamily:
    """Euler time-h map of the Lorenz field with noisy ``sigma, rho, beta``.

    ``reduced`` restricts to the ``y = 0`` plane with coordinates ``(x, z)``.
    """
    return MapFamily(
        "builtin",
        "random-lorenz-euler",
        {"sigma": sigma, "rho": rho, "beta": beta, "h": h, "reduced": reduced},
        lam=lam,
    )


def affine(matrix, offset=None, noise_matrices=(), noise_offsets=(), lam: float = 1.0) -> MapFamily:
    p = {"matrix": np.asarray(matrix, dtype=float).tolist()}
    if offset is not None:
        p["offset"] = [float(v) for v in offset]
    if noise_matrices:
        p["noise_matrices"] = [np.asarray(M, dtype=float).tolist() for M in noise_matrices]
    if noise_offsets:
        p["noise_offsets"] = [[float(v) for v in b] for b in noise_offsets]
    if not noise_matrices and not noise_offsets:
        p["noise_dims"] = 1
    return MapFamily("affine", "", p, lam=lam)


def time_h_family(name: str, params: dict, h: float, integrator: str = "euler", substeps: int = 1, lam: float = 1.0) -> MapFamily:
    p = dict(params)
    p.update(h=float(h), integrator=integrator, substeps=int(substeps))
    return MapFamily("field", name, p, lam=lam)
