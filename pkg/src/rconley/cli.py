"""Command-line front end.

Exit codes: 0 when every requested check passes, 1 when a check fails or the
pipeline stops with an error, 2 for configuration errors.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path

from . import __version__
from .boxset import BoxSet, Grid, boxes_meeting_ball, boxes_meeting_box, box_of, dilate
from .config import ConfigError, load, resolve
from .conley import (
    ConleyError,
    build_filtration_pair,
    exit_sets,
    index_certificate,
    invariant_set,
    is_isolating_block,
    is_isolating_neighborhood,
    pointed_map,
    reliable_range,
)
from .enclosure import EnclosureError, FiberedSet, build_enclosure
from .harness import SweepConfig, continuation_sweep, time_h_check, wazewski_report
from .noise import NoiseModel, sample_path
from .shiftequiv import WitnessError, equivalence_via_common_block
from .systems import FamilyError, MapFamily

COMMANDS = ("compute", "sweep", "timeh", "equiv")
PIPELINE_ERRORS = (ConleyError, EnclosureError, FamilyError, ValueError)


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


# ---------------------------------------------------------------- builders
def build_grid(cfg: dict) -> Grid:
    g = dict(cfg["grid"])
    return Grid.from_descriptor(g)


def build_family(cfg: dict) -> MapFamily:
    _need(cfg, "system")
    return MapFamily.from_json(cfg["system"])


def build_noise(cfg: dict) -> NoiseModel:
    return NoiseModel.from_json(cfg["noise"])


def build_region(grid: Grid, r: dict) -> BoxSet:
    if r["shape"] == "ball":
        return boxes_meeting_ball(grid, r["center"], r["radius"])
    return boxes_meeting_box(grid, r["lo"], r["hi"])


def _region(cfg: dict, name: str) -> dict:
    return next(r for r in cfg["regions"] if r["name"] == name)


def _need(cfg: dict, section: str) -> None:
    if section not in cfg:
        raise ConfigError(f"missing [{section}] section", section)


# ---------------------------------------------------------------- compute
def _rects(grid: Grid, B: BoxSet) -> list:
    lo, hi = grid.clipped_bounds()
    return [[lo[b].tolist(), hi[b].tolist()] for b in B.flat]


def _compute_cell(cfg, grid, family, noise, region, seed, checks, plot_fibers):
    T = cfg["run"]["T"]
    rr = reliable_range(T)
    path = sample_path(noise, seed, T)
    E = build_enclosure(family, grid, path)
    N = FiberedSet.constant(build_region(grid, region), T, path)
    inv = invariant_set(E, N)
    exits = exit_sets(E, N)
    iso = is_isolating_neighborhood(E, N, inv)
    out = {
        "seed": seed,
        "isolating": all(iso[t] for t in rr),
        "failing_fibers": [t for t in rr if not iso[t]],
        "exit_boxes": {str(t): len(exits[t]) for t in sorted(exits)},
        "exit_empty_everywhere": all(e.is_empty() for e in exits.values()),
        "exit_nonempty_everywhere": all(not e.is_empty() for e in exits.values()),
        "inv_boxes_fiber0": len(inv[0]),
        "nonfinite_steps": {str(t): n for t, n in sorted(E.nonfinite.items())},
    }
    passed = {"isolating": out["isolating"]}
    if "block" in checks:
        blk = is_isolating_block(E, N)
        out["block"] = all(blk[t] for t in rr)
        passed["block"] = out["block"]
    P = None
    if "pair" in checks or "certificate" in checks:
        try:
            P = build_filtration_pair(E, N, region["k"])
            G = pointed_map(E, P, strict=False)
            qinv = invariant_set(E, P.quotient)
            out["pair"] = {
                "verified": P.verified,
                "k": P.k,
                "L_boxes_fiber0": len(P.L[0]),
                "quotient_inv_boxes_fiber0": len(qinv[0]),
                "collar_violations": {str(t): n for t, n in sorted(G.collar_violations.items())},
            }
            out["certificate"] = index_certificate(G).to_json()
        except ConleyError as exc:
            out["pair"] = {"verified": False, "error": str(exc)}
            out["certificate"] = None
        passed["pair"] = out["pair"]["verified"]
    if "inv_target" in checks and "inv_target" in region:
        target = dilate(box_of(grid, region["inv_target"]), region["inv_pad"])
        out["inv_within_target"] = inv[0].issubset(target)
        passed["inv_target"] = out["inv_within_target"]
    out["checks_passed"] = {k: v for k, v in passed.items() if k in checks}
    plots, rows = {}, []
    for t in plot_fibers:
        if t not in N.fibers:
            continue
        sets = {"N": N[t], "inv": inv[t]}
        if t in exits:
            sets["exit"] = exits[t]
        if P is not None:
            sets["L"] = P.L[t]
        plots[str(t)] = {name: _rects(grid, B) for name, B in sets.items()}
        for name, B in sets.items():
            for b in B.flat:
                rows.append([seed, t, name, int(b), *grid.multi_index(b).tolist()])
    return out, plots, rows


def cmd_compute(cfg: dict, threads: int) -> tuple[dict, dict, bool]:
    if not cfg["regions"]:
        raise ConfigError("compute needs at least one region", "regions")
    grid, family, noise = build_grid(cfg), build_family(cfg), build_noise(cfg)
    checks = cfg["run"]["checks"]
    results, plots, rows = {}, {}, []
    ok = True
    for region in cfg["regions"]:
        cells, pl = [], {}
        for seed in cfg["run"]["seeds"]:
            out, p, r = _compute_cell(cfg, grid, family, noise, region, seed, checks, cfg["run"]["plot_fibers"])
            cells.append(out)
            pl[str(seed)] = p
            rows += [[region["name"], *row] for row in r]
            ok = ok and all(out["checks_passed"].values())
        results[region["name"]] = {
            "cells": cells,
            "all_passed": all(all(c["checks_passed"].values()) for c in cells),
        }
        plots[region["name"]] = pl
    return results, {"plot": plots, "rows": rows}, ok


# ---------------------------------------------------------------- other commands
def cmd_sweep(cfg: dict, threads: int) -> tuple[dict, dict, bool]:
    _need(cfg, "sweep")
    sw = cfg["sweep"]
    grid = build_grid(cfg)
    region = _region(cfg, sw["region"])
    N = build_region(grid, region)
    scfg = SweepConfig(
        build_family(cfg),
        build_noise(cfg),
        grid,
        N,
        sw["lambdas"],
        cfg["run"]["seeds"],
        cfg["run"]["T"],
        checks=tuple(sw["checks"]),
        threads=threads,
        assert_nontrivial=sw["assert_nontrivial"],
        k=region["k"],
    )
    rep = continuation_sweep(scfg)
    # nonemptiness conclusion from the lambda = 0 slice
    lam0 = scfg.lambdas[0]
    certs, invs = [], []
    for seed in scfg.seeds:
        path = sample_path(scfg.noise, seed, scfg.T)
        E = build_enclosure(scfg.family_at(lam0), grid, path)
        NN = FiberedSet.constant(N, scfg.T, path)
        invs.append(invariant_set(E, NN))
        try:
            P = build_filtration_pair(E, NN, region["k"])
            certs.append(index_certificate(pointed_map(E, P, strict=False)))
        except ConleyError:
            pass
    waz = wazewski_report(certs, invs, scfg.noise, rep.aggregate["all_isolating"], sw["assert_nontrivial"])
    waz["lambda"] = lam0
    results = rep.to_json()
    results.pop("config")
    results["nonemptiness"] = waz
    return results, {"timing": rep.timing}, rep.passed


def cmd_timeh(cfg: dict, threads: int) -> tuple[dict, dict, bool]:
    _need(cfg, "timeh")
    th = cfg["timeh"]
    grid = build_grid(cfg)
    N = build_region(grid, _region(cfg, th["region"]))
    rep = time_h_check(
        th["field"],
        th["params"],
        th["h_list"],
        grid,
        N,
        build_noise(cfg),
        cfg["run"]["seeds"],
        cfg["run"]["T"],
        lambdas=th["lambdas"],
        integrator=th["integrator"],
        substeps=th["substeps"],
        threads=threads,
    )
    results = rep.to_json()
    results.pop("config")
    return results, {"timing": rep.timing}, rep.passed


def cmd_equiv(cfg: dict, threads: int) -> tuple[dict, dict, bool]:
    _need(cfg, "equiv")
    eq = cfg["equiv"]
    grid, family, noise = build_grid(cfg), build_family(cfg), build_noise(cfg)
    T = cfg["run"]["T"]
    rA, rB = _region(cfg, eq["first"]), _region(cfg, eq["second"])
    cells, ok = [], True
    for seed in cfg["run"]["seeds"]:
        path = sample_path(noise, seed, T)
        E = build_enclosure(family, grid, path)
        cell = {"seed": seed}
        try:
            P1 = build_filtration_pair(E, FiberedSet.constant(build_region(grid, rA), T, path), rA["k"])
            P2 = build_filtration_pair(E, FiberedSet.constant(build_region(grid, rB), T, path), rB["k"])
            w = equivalence_via_common_block(P1, P2, eps_layers=eq["eps_layers"], E=E)
            cell.update(
                verified=w.report.passed,
                counts=w.report.counts(),
                failed_fibers=w.report.failed_fibers(),
                offsets_r={str(t): n for t, n in sorted(w.r.offsets.items())},
                offsets_s={str(t): n for t, n in sorted(w.s.offsets.items())},
                verdicts={str(t): v for t, v in sorted(w.report.verdicts.items())},
            )
        except (WitnessError, ConleyError) as exc:
            cell.update(verified=False, error=str(exc))
        ok = ok and cell["verified"]
        cells.append(cell)
    return {"cells": cells, "all_passed": ok}, {}, ok


HANDLERS = {"compute": cmd_compute, "sweep": cmd_sweep, "timeh": cmd_timeh, "equiv": cmd_equiv}


# ---------------------------------------------------------------- output
def run(command: str, cfg: dict, threads: int = 1) -> tuple[dict, dict, bool]:
    """Run ``command`` on a resolved config; returns (report, extras, passed)."""
    t0 = time.perf_counter()
    try:
        results, extras, ok = HANDLERS[command](cfg, threads)
        error = None
    except ConfigError:
        raise
    except PIPELINE_ERRORS as exc:
        results, extras, ok = {}, {}, False
        error = {"type": type(exc).__name__, "message": str(exc)}
    report = {
        "tool": "rconley",
        "version": __version__,
        "command": command,
        "config": cfg,
        "results": results,
        "passed": ok,
    }
    if error:
        report["error"] = error
    extras.setdefault("timing", {})
    extras["timing"]["wall_seconds"] = time.perf_counter() - t0
    extras["timing"]["threads"] = threads
    return report, extras, ok


def write_outputs(out_dir: Path, report: dict, extras: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(_dumps(report))
    (out_dir / "timing.json").write_text(_dumps(extras.get("timing", {})))
    if "plot" in extras:
        (out_dir / "plot_data.json").write_text(_dumps(extras["plot"]))
    if "rows" in extras:
        with open(out_dir / "boxes.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            dims = len(report["config"]["grid"]["lo"])
            w.writerow(["region", "seed", "fiber", "set", "flat"] + [f"i{d}" for d in range(dims)])
            w.writerows(extras["rows"])
    cells = report["results"].get("cells")
    if cells and command_table(report):
        keys = sorted({k for c in cells for k, v in c.items() if not isinstance(v, (dict, list))})
        with open(out_dir / "cells.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(keys)
            for c in cells:
                w.writerow([c.get(k, "") for k in keys])


def command_table(report: dict) -> bool:
    return report["command"] in ("sweep", "timeh", "equiv")


def _threads(arg: int | None) -> int:
    if arg is not None:
        return max(1, arg)
    env = os.environ.get("RCONLEY_THREADS")
    try:
        return max(1, int(env)) if env else 1
    except ValueError:
        return 1


def _err(payload: dict) -> None:
    sys.stderr.write(json.dumps(payload, sort_keys=True) + "\n")


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(prog="rconley", description="Random Conley index computations on box grids.")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--out-dir", default="rconley-out")
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--seed-override", type=int, default=None)
    p = sub.add_parser("verify-report", help="re-run a report's embedded config and compare byte for byte")
    p.add_argument("report")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--out-dir", default=None)
    args = ap.parse_args(argv)
    threads = _threads(args.threads)

    if args.command == "verify-report":
        try:
            text = Path(args.report).read_text()
            old = json.loads(text)
            cfg = resolve(old["config"])
            command = old["command"]
        except (OSError, ValueError, KeyError) as exc:
            _err({"error": "config", "message": str(exc)})
            return 2
        report, extras, _ = run(command, cfg, threads)
        same = _dumps(report) == text
        if args.out_dir:
            write_outputs(Path(args.out_dir), report, extras)
        print(json.dumps({"reproduced": same, "report": args.report}))
        return 0 if same else 1

    try:
        cfg = load(args.config)
        if args.seed_override is not None:
            cfg["run"]["seeds"] = [args.seed_override]
            cfg = resolve(cfg)
        report, extras, ok = run(args.command, cfg, threads)
    except ConfigError as exc:
        _err({"error": "config", "key": exc.key, "message": str(exc)})
        return 2
    write_outputs(Path(args.out_dir), report, extras)
    if "error" in report:
        _err({"error": "pipeline", **report["error"]})
    print(json.dumps({"command": args.command, "passed": ok, "out_dir": args.out_dir}))
    return 0 if ok else 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
