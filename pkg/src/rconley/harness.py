"""Ensemble drivers: continuation over lambda, time-h checks, perturbation sweeps.

Cells are independent jobs.  They may run in a thread pool but are always
reduced in sorted cell order, so reports are byte-identical across runs and
thread counts.  Wall-clock timings go to a separate sidecar.
"""
from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .boxset import BoxSet, Grid, box_of, dilate
from .conley import (
    ConleyError,
    FiltrationPair,
    IndexCertificate,
    InvResult,
    build_filtration_pair,
    exit_sets,
    index_certificate,
    invariant_set,
    is_isolating_block,
    is_isolating_neighborhood,
    pointed_map,
    reliable_range,
    robustness_check,
)
from .enclosure import FiberedEnclosure, FiberedSet, build_enclosure
from .noise import NoiseModel, sample_path
from .systems import MapFamily, time_h_family

CHECKS = ("isolating", "block", "pair", "certificate", "witness")

CONTINUATION_NOTE = (
    "continuation property: N is isolating for every sampled (lambda, seed), so the random "
    "Conley index of the isolated invariant set is independent of lambda on this grid"
)
TIMEH_NOTE = (
    "time-h maps share the isolating neighborhood N for every h checked, so N is expected "
    "to isolate an invariant set of the flow"
)


class HarnessError(ValueError):
    pass


def _run_cells(fn: Callable, cells: Sequence, threads: int) -> list:
    if threads > 1 and len(cells) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, cells))
    return [fn(c) for c in cells]


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False)


# ---------------------------------------------------------------- continuation
@dataclass
class SweepConfig:
    family: MapFamily
    noise: NoiseModel
    grid: Grid
    N: BoxSet
    lambdas: list[float]
    seeds: list[int]
    T: int
    checks: tuple[str, ...] = ("isolating",)
    threads: int = 1
    # the shipped examples may assert a nontrivial index at lambda = 0
    assert_nontrivial: bool = False
    overrides: dict[float, MapFamily] = field(default_factory=dict)
    k: int = 1

    def __post_init__(self):
        lams = [float(v) for v in self.lambdas]
        if not lams:
            raise HarnessError("lambda grid is empty")
        if lams != sorted(lams):
            raise HarnessError("lambda grid must be sorted")
        if lams[0] < 0 or lams[-1] > 1:
            raise HarnessError("lambda values must lie in [0, 1]")
        if not self.seeds:
            raise HarnessError("at least one seed is required")
        if self.T < 1:
            raise HarnessError("T must be >= 1")
        bad = [c for c in self.checks if c not in CHECKS]
        if bad:
            raise HarnessError(f"unknown checks {bad}; expected a subset of {CHECKS}")
        self.lambdas = lams
        self.seeds = [int(s) for s in self.seeds]

    def family_at(self, lam: float) -> MapFamily:
        return self.overrides.get(lam, self.family.with_lambda(lam))

    def to_json(self) -> dict:
        return {
            "family": self.family.to_json(),
            "noise": self.noise.to_json(),
            "grid": self.grid.descriptor(),
            "N": self.N.flat.tolist(),
            "lambdas": self.lambdas,
            "seeds": self.seeds,
            "T": self.T,
            "checks": list(self.checks),
            "assert_nontrivial": self.assert_nontrivial,
            "overrides": {repr(k): v.to_json() for k, v in sorted(self.overrides.items())},
            "k": self.k,
        }


@dataclass
class EnsembleReport:
    kind: str
    cells: list[dict]
    aggregate: dict
    conclusions: list[str]
    config: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(self.aggregate.get("all_passed"))

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "config": self.config,
            "cells": self.cells,
            "aggregate": self.aggregate,
            "conclusions": self.conclusions,
        }

    def dumps(self) -> str:
        return _dumps(self.to_json())

    def timing_json(self) -> str:
        return _dumps(self.timing)


def _inv_stats(counts: list[int]) -> dict:
    if not counts:
        return {"min": None, "max": None, "mean": None}
    return {"min": int(min(counts)), "max": int(max(counts)), "mean": round(float(np.mean(counts)), 6)}


def _cell(cfg: SweepConfig, lam: float, seed: int) -> dict:
    t0 = time.perf_counter()
    f = cfg.family_at(lam)
    path = sample_path(cfg.noise, seed, cfg.T)
    E = build_enclosure(f, cfg.grid, path)
    N = FiberedSet.constant(cfg.N, cfg.T, path)
    rr = reliable_range(cfg.T)
    inv = invariant_set(E, N)
    iso = is_isolating_neighborhood(E, N, inv)
    failing = [t for t in rr if not iso[t]]
    out = {
        "lambda": lam,
        "seed": seed,
        "isolating": not failing,
        "failing_fibers": failing,
        "inv_boxes_fiber0": len(inv[0]),
        "inv_nonempty": all(not inv[t].is_empty() for t in rr),
        "nonfinite_steps": {str(t): n for t, n in sorted(E.nonfinite.items())},
    }
    if "block" in cfg.checks:
        blk = is_isolating_block(E, N)
        out["block"] = all(blk[t] for t in rr)
    if "pair" in cfg.checks or "certificate" in cfg.checks:
        try:
            P = build_filtration_pair(E, N, cfg.k)
            out["pair"] = {"verified": P.verified, "k": P.k, "L_boxes_fiber0": len(P.L[0])}
            if "certificate" in cfg.checks:
                out["certificate"] = index_certificate(pointed_map(E, P, strict=False)).labels
        except ConleyError as exc:
            out["pair"] = {"verified": False, "error": str(exc)}
            if "certificate" in cfg.checks:
                out["certificate"] = None
    out["_seconds"] = time.perf_counter() - t0
    return out


def continuation_sweep(cfg: SweepConfig) -> EnsembleReport:
    """Check the shared ``N`` for every ``(lambda, seed)``; conclude only if all pass."""
    cells = [(lam, seed) for lam in cfg.lambdas for seed in cfg.seeds]
    t0 = time.perf_counter()
    results = _run_cells(lambda c: _cell(cfg, *c), cells, cfg.threads)
    results.sort(key=lambda r: (r["lambda"], r["seed"]))
    timing = {f"{r['lambda']}/{r['seed']}": r.pop("_seconds") for r in results}
    timing["total"] = time.perf_counter() - t0

    per_lambda = {}
    for lam in cfg.lambdas:
        rows = [r for r in results if r["lambda"] == lam]
        per_lambda[repr(lam)] = {
            "cells": len(rows),
            "isolating": sum(r["isolating"] for r in rows),
            "pass_fraction": sum(r["isolating"] for r in rows) / len(rows),
            "inv_boxes_fiber0": _inv_stats([r["inv_boxes_fiber0"] for r in rows]),
        }
    all_iso = all(r["isolating"] for r in results)
    failures = [
        {"lambda": r["lambda"], "seed": r["seed"], "fibers": r["failing_fibers"]} for r in results if not r["isolating"]
    ]
    anomalies = []
    if "certificate" in cfg.checks and all_iso:
        for seed in cfg.seeds:
            trivial = [
                r["lambda"]
                for r in results
                if r["seed"] == seed and r.get("certificate") and "trivial-certified" in r["certificate"]
            ]
            if trivial and len(trivial) != len(cfg.lambdas):
                anomalies.append({"seed": seed, "trivial_at": trivial, "note": "certificate flips across lambda"})
    spacing = float(np.max(np.diff(cfg.lambdas))) if len(cfg.lambdas) > 1 else 0.0
    aggregate = {
        "cells": len(results),
        "isolating_cells": sum(r["isolating"] for r in results),
        "per_lambda": per_lambda,
        "all_isolating": all_iso,
        "failures": failures,
        "anomalies": anomalies,
        "lambda_spacing": spacing,
        "continuity_in_lambda": "not testable on a finite grid; judged by the user",
        "all_passed": all_iso and not anomalies,
    }
    if "block" in cfg.checks:
        aggregate["block_cells"] = sum(bool(r.get("block")) for r in results)
    if "pair" in cfg.checks:
        aggregate["pair_cells"] = sum(bool(r["pair"]["verified"]) for r in results)
        aggregate["all_passed"] = aggregate["all_passed"] and aggregate["pair_cells"] == len(results)
    conclusions = [CONTINUATION_NOTE] if all_iso else []
    return EnsembleReport("continuation", results, aggregate, conclusions, cfg.to_json(), timing)


# ---------------------------------------------------------------- nonemptiness
def wazewski_report(
    cert: IndexCertificate | Iterable[IndexCertificate],
    inv: InvResult | Iterable[InvResult],
    model: NoiseModel,
    continuation_passed: bool = True,
    assert_nontrivial: bool = False,
) -> dict:
    """Nonemptiness conclusion from a nontrivial index, plus the measured nonempty fraction."""
    certs = [cert] if isinstance(cert, IndexCertificate) else list(cert)
    invs = [inv] if isinstance(inv, InvResult) else list(inv)
    nonempty = [all(not r[t].is_empty() for t in r.reliable_range) for r in invs]
    fraction = sum(nonempty) / len(nonempty) if nonempty else None
    trivial = any(c.verdict == "trivial-certified" for c in certs)
    out = {
        "measured_nonempty_fraction": fraction,
        "paths": len(nonempty),
        "ergodic_by_construction": bool(model.ergodic),
        "conclusion": None,
    }
    if trivial:
        out["verdict"] = "index trivial"
        return out
    out["verdict"] = "nontrivial (asserted)" if assert_nontrivial else "no trivial certificate"
    if continuation_passed:
        out["conclusion"] = "nonempty invariant set expected a.s."
        out["caveat"] = (
            "relies on ergodicity of the noise shift, true by construction for i.i.d. noise"
            if model.ergodic
            else "noise model not known to be ergodic; conclusion holds per path only"
        )
        if assert_nontrivial:
            out["basis"] = "user assertion of a nontrivial index at lambda = 0"
        else:
            out["basis"] = "no trivial-index certificate found at lambda = 0"
    return out


# ---------------------------------------------------------------- time-h maps
def time_h_check(
    field_name: str,
    params: dict,
    h_list: Sequence[float],
    grid: Grid,
    N: BoxSet,
    noise: NoiseModel,
    seeds: Sequence[int],
    T: int,
    lambdas: Sequence[float] = (1.0,),
    integrator: str = "euler",
    substeps: int = 1,
    threads: int = 1,
) -> EnsembleReport:
    """Isolation of ``N`` for the time-h maps of a field, for each ``h`` and seed."""
    if not h_list or any(not h > 0 for h in h_list):
        raise HarnessError("h_list must hold positive step sizes")
    if not seeds:
        raise HarnessError("at least one seed is required")
    cells = [(float(h), float(lam), int(s)) for h in sorted(h_list) for lam in sorted(lambdas) for s in seeds]
    rr = reliable_range(T)

    def one(cell):
        h, lam, seed = cell
        t0 = time.perf_counter()
        f = time_h_family(field_name, params, h, integrator, substeps, lam)
        path = sample_path(noise, seed, T)
        E = build_enclosure(f, grid, path)
        NN = FiberedSet.constant(N, T, path)
        inv = invariant_set(E, NN)
        iso = is_isolating_neighborhood(E, NN, inv)
        failing = [t for t in rr if not iso[t]]
        rejected = {str(t): n for t, n in sorted(E.nonfinite.items())}
        return {
            "h": h,
            "lambda": lam,
            "seed": seed,
            "isolating": not failing and not rejected,
            "failing_fibers": failing,
            "step_rejections": rejected,
            "inv_boxes_fiber0": len(inv[0]),
            "_seconds": time.perf_counter() - t0,
        }

    t0 = time.perf_counter()
    results = _run_cells(one, cells, threads)
    results.sort(key=lambda r: (r["h"], r["lambda"], r["seed"]))
    timing = {f"{r['h']}/{r['lambda']}/{r['seed']}": r.pop("_seconds") for r in results}
    timing["total"] = time.perf_counter() - t0
    per_h = {}
    for h in sorted({r["h"] for r in results}):
        rows = [r for r in results if r["h"] == h]
        per_h[repr(h)] = {
            "isolating": all(r["isolating"] for r in rows),
            "step_rejections": sum(sum(r["step_rejections"].values()) for r in rows),
            "inv_boxes_fiber0": _inv_stats([r["inv_boxes_fiber0"] for r in rows]),
        }
    all_iso = all(v["isolating"] for v in per_h.values())
    aggregate = {
        "per_h": per_h,
        "all_isolating": all_iso,
        "failed_h": [float(k) for k, v in per_h.items() if not v["isolating"]],
        "integrator": integrator,
        "substeps": substeps,
        "caveats": [
            "non-validated integrator: time-h maps use a fixed-step scheme without error bounds",
            "continuity of N along the flow is assumed, not verified",
        ],
        "all_passed": all_iso,
    }
    conclusions = [TIMEH_NOTE] if all_iso else []
    config = {
        "field": field_name,
        "params": params,
        "h_list": sorted(float(h) for h in h_list),
        "grid": grid.descriptor(),
        "N": N.flat.tolist(),
        "noise": noise.to_json(),
        "seeds": [int(s) for s in seeds],
        "T": T,
        "lambdas": sorted(float(v) for v in lambdas),
    }
    return EnsembleReport("timeh", results, aggregate, conclusions, config, timing)


# ---------------------------------------------------------------- robustness
def perturbation_sweep(
    base: MapFamily,
    deltas: Sequence[float],
    P: FiltrationPair,
    E: FiberedEnclosure | None = None,
    m: int = 200,
    threads: int = 1,
) -> EnsembleReport:
    """Re-verify ``P`` under constant bumps of sup-norm ``delta``; report the robustness radius."""
    E = E or P.enclosure
    if E is None:
        raise HarnessError("pass the base enclosure or attach it to the pair")
    if not P.verified:
        raise HarnessError("the pair must be verified for the base map")
    ds = sorted(float(d) for d in deltas)

    def one(d):
        res = robustness_check(E, P, base.with_bump_size(d), m=m)
        return {
            "delta": d,
            "holds": res["holds"],
            "failing_fibers": res["failing_fibers"],
            "failing_axioms": res["failing_axioms"],
            "metric_max": res["metric_max"],
        }

    t0 = time.perf_counter()
    rows = _run_cells(one, ds, threads)
    # once a delta fails no larger delta is reported as passing
    broken = False
    for r in rows:
        broken = broken or not r["holds"]
        r["passing"] = not broken
    prefix = [r["delta"] for r in rows if r["passing"]]
    aggregate = {
        "passing_prefix": prefix,
        "robustness_radius": prefix[-1] if prefix else None,
        "cutoff": next((r["delta"] for r in rows if not r["passing"]), None),
        "raw_nonmonotone": [r["delta"] for r in rows if r["holds"] and not r["passing"]],
        "all_passed": bool(prefix),
    }
    config = {"base": base.to_json(), "deltas": ds, "m": m, "k": P.k}
    return EnsembleReport("perturbation", rows, aggregate, [], config, {"total": time.perf_counter() - t0})


def origin_padding(grid: Grid, point: Sequence[float], k: int) -> BoxSet:
    """Boxes within ``k`` layers of the box holding ``point``."""
    return dilate(box_of(grid, point), k)
