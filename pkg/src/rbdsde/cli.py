"""Batch front-end: seeded scenario runs with CSV artifacts and a manifest.

Every subcommand reads one JSON scenario document, executes the matching
module pipeline and writes plot-ready CSVs plus a run manifest (config hash,
seeds, versions, wall time, output hashes).  Exit codes: 0 success,
2 validation failure, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import platform
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .bdsde import (dump_solution_csv, skorokhod_residual, solve_generalized,
                    solve_penalized, solve_reflected_direct)
from .doss import conversion_residual, dump_flow_csv, invert_flow, solve_flow
from .errors import NumericsError, ValidationError
from .field_lab import (b_measurability_probe, build_field,
                        deterministic_pde_residual, dump_field_csv,
                        obstacle_gap_report)
from .fixpoint import comparison_check, dump_picard_csv, picard_solve
from .noise import coarsen_bundle, sample_bundle, stream_id, STREAM_KIND_B_PATH
from .reflected_sde import make_ensemble, simulate_reflected, ReflectedPath
from .scenarios import scenario_from_config

SUBCOMMANDS = ("simulate-x", "solve", "penalize-sweep", "picard", "compare",
               "doss-check", "field", "residuals", "probe-b")


def _load_config(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"scenario file not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"scenario file {p} is not valid JSON: {exc}") from exc


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    h.update(path.read_bytes())
    return h.hexdigest()


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(x):
    return f"{x:.17g}"


def _ensemble(scenario, b_scenario=0, replicate=0):
    return make_ensemble(scenario.domain, scenario.sde, scenario.start,
                         scenario.grid, scenario.n_paths, scenario.coeffs.ell,
                         scenario.seed, b_scenario=b_scenario, replicate=replicate)


def _solve_by_scheme(scenario, paths):
    coeffs, basis = scenario.coeffs, scenario.basis
    scheme = scenario.scheme
    if isinstance(scheme, tuple) and scheme[0] == "penalized":
        return solve_penalized(coeffs, scheme[1], paths, basis)
    if scheme == "direct" or (scheme == "generalized" and coeffs.has_obstacle):
        return solve_reflected_direct(coeffs, paths, basis)
    if scheme == "generalized":
        return solve_generalized(coeffs, paths, basis)
    raise ValidationError(f"unknown scheme {scheme!r}")


def _cmd_simulate_x(scenario, args, out: Path):
    paths = _ensemble(scenario)
    outputs = []
    for p in range(min(args.dump_paths, paths.n_paths)):
        single = ReflectedPath(grid=paths.grid, start_index=paths.start_index,
                               start_x=paths.start_x, x_values=paths.x_values[p],
                               a_values=paths.a_values[p])
        from .reflected_sde import dump_path_csv
        f = out / f"x_path_{p:03d}.csv"
        dump_path_csv(single, f)
        outputs.append(f)
    psi = scenario.domain.psi(paths.x_values)
    rows = [(_fmt(t), _fmt(np.mean(np.linalg.norm(paths.x_values[:, i], axis=-1))),
             _fmt(np.mean(paths.a_values[:, i])), _fmt(np.max(-psi[:, i])))
            for i, t in enumerate(paths.grid.nodes)]
    f = out / "x_summary.csv"
    _write_csv(f, ["time", "mean_norm_x", "mean_a", "max_excursion"], rows)
    outputs.append(f)
    print(f"simulated {paths.n_paths} paths; mean A_T = "
          f"{np.mean(paths.a_values[:, -1]):.6g}, "
          f"max excursion = {np.max(-psi):.3g}")
    return outputs


def _cmd_solve(scenario, args, out: Path):
    paths = _ensemble(scenario)
    sol = _solve_by_scheme(scenario, paths)
    f = out / "solution_summary.csv"
    dump_solution_csv(sol, scenario.coeffs, paths, f)
    print(f"scheme={sol.metadata['scheme']} Y_start={sol.y_start:.8g} "
          f"tolerance={sol.scheme_tolerance:.3g}")
    return [f]


def _cmd_penalize_sweep(scenario, args, out: Path):
    if not scenario.coeffs.has_obstacle:
        raise ValidationError("the penalization sweep needs an obstacle scenario")
    levels = [float(v) for v in args.levels.split(",") if v.strip()]
    paths = _ensemble(scenario)
    direct = solve_reflected_direct(scenario.coeffs, paths, scenario.basis)
    rows = []
    prev = None
    monotone = True
    for n in levels:
        sol = solve_penalized(scenario.coeffs, n, paths, scenario.basis)
        gap = float(np.max(np.abs(sol.y_values - direct.y_values)))
        resid = skorokhod_residual(sol, scenario.coeffs, paths)
        rows.append((_fmt(n), _fmt(sol.y_start), _fmt(sol.metadata["se_y_start"]),
                     _fmt(gap), _fmt(resid)))
        if prev is not None and sol.y_start < prev - 3 * sol.metadata["se_y_start"]:
            monotone = False
        prev = sol.y_start
        print(f"n={n:g}: Y0={sol.y_start:.8g} sup|Y^n - Y^direct|={gap:.4g} "
              f"residual={resid:.4g}")
    f = out / "penalization_sweep.csv"
    _write_csv(f, ["n", "mean_y0", "se_y0", "sup_gap_vs_direct",
                   "skorokhod_residual"], rows)
    print(f"direct Y0={direct.y_start:.8g}; monotone mean Y0: {monotone}")
    return [f]


def _cmd_picard(scenario, args, out: Path):
    paths = _ensemble(scenario)
    sol, report = picard_solve(scenario.coeffs, paths, scenario.basis,
                               tol=args.tol, max_iter=args.max_iter)
    f1 = out / "picard_report.csv"
    dump_picard_csv(report, f1)
    f2 = out / "solution_summary.csv"
    dump_solution_csv(sol, scenario.coeffs, paths, f2)
    print(f"picard: converged={report.converged} iterations={report.iterations}")
    for k, d in enumerate(report.distances, start=1):
        ratio = f" ratio={report.ratios[k - 2]:.4f}" if k >= 2 else ""
        print(f"  iter {k}: squared distance {d:.6g}{ratio}")
    return [f1, f2]


def _cmd_compare(scenario, args, out: Path):
    coeffs_a = scenario.coeffs
    if coeffs_a.has_obstacle:
        coeffs_a = coeffs_a.without_obstacle()
    base_l, base_f, base_phi = (coeffs_a.terminal_l, coeffs_a.driver_f,
                                coeffs_a.boundary_phi)
    dl, df, dphi = args.bump_terminal, args.bump_driver, args.bump_boundary
    coeffs_b = replace(
        coeffs_a,
        terminal_l=lambda x: base_l(x) + dl,
        driver_f=lambda t, x, y, z: base_f(t, x, y, z) + df,
        boundary_phi=lambda t, x, y: base_phi(t, x, y) + dphi,
    )
    paths = _ensemble(scenario)
    report = comparison_check(coeffs_a, coeffs_b, paths, scenario.basis)
    f = out / "comparison_report.csv"
    _write_csv(f, ["node", "violations"],
               [(i, int(v)) for i, v in enumerate(report["violations_per_node"])])
    print(f"ordering violations: {report['total_violations']} "
          f"(threshold {report['threshold']:.4g}, worst gap {report['worst_gap']:.4g})")
    return [f]


def _cmd_doss_check(scenario, args, out: Path):
    if scenario.noise is None:
        raise ValidationError("the scenario has no backward-noise coefficient")
    grid = scenario.grid
    bundle = sample_bundle(grid, 1, scenario.coeffs.ell, scenario.seed,
                           stream_id(STREAM_KIND_B_PATH, 0))
    lo, hi, _ = scenario.field_x
    x_samples = np.linspace(lo, hi, 5)[:, None]
    y_samples = np.linspace(-2.0, 3.0, 41)
    fld = solve_flow(scenario.noise, bundle, x_samples, y_samples)
    inv = invert_flow(fld, fld.eta[0, 0], t_indices=[0])
    roundtrip = float(np.nanmax(np.abs(inv.values[0, 0] - y_samples)))
    residuals = []
    for factor in (4, 1):
        if grid.n_steps % factor == 0:
            b = coarsen_bundle(bundle, factor)
            residuals.append((b.grid.n_steps, conversion_residual(scenario.noise, b)))
    rows = [("min_d_eta_dy", _fmt(float(np.min(fld.d_eta_dy)))),
            ("roundtrip_error", _fmt(roundtrip))]
    rows += [(f"conversion_residual_N{n}", _fmt(r)) for n, r in residuals]
    f = out / "doss_report.csv"
    _write_csv(f, ["quantity", "value"], rows)
    f2 = out / "flow_field.csv"
    dump_flow_csv(fld, f2)
    print(f"flow: min D_y eta={np.min(fld.d_eta_dy):.6g} roundtrip={roundtrip:.3g} "
          + " ".join(f"resid(N={n})={r:.3g}" for n, r in residuals))
    return [f, f2]


def _field_for(scenario, b_scenario, workers):
    t_nodes, x_grid = scenario.field_grids()
    flow = None
    if scenario.noise is not None:
        bundle = sample_bundle(scenario.grid, 1, scenario.coeffs.ell,
                               scenario.seed, stream_id(STREAM_KIND_B_PATH, b_scenario))
        y_samples = np.linspace(-4.0, 6.0, 61)
        flow = solve_flow(scenario.noise, bundle, x_grid, y_samples)
    scheme = scenario.scheme
    if scheme == "generalized" and scenario.coeffs.has_obstacle:
        scheme = "direct"
    return build_field(scenario.domain, scenario.sde, scenario.coeffs,
                       scenario.grid, t_nodes, x_grid, scheme=scheme,
                       n_paths=scenario.n_paths, seed=scenario.seed,
                       b_scenario=b_scenario, basis=scenario.basis, flow=flow,
                       workers=workers)


def _cmd_field(scenario, args, out: Path):
    outputs = []
    for b in range(scenario.n_b_scenarios):
        fld = _field_for(scenario, b, args.workers)
        f = out / f"field_b{b:02d}.csv"
        dump_field_csv(fld, f)
        outputs.append(f)
        msg = f"field b={b}: max|u|={np.max(np.abs(fld.u)):.6g}"
        if fld.h_values is not None:
            rep = obstacle_gap_report(fld)
            msg += (f" min gap={rep['min_gap']:.4g} "
                    f"violations={rep['violations']}")
        print(msg)
    return outputs


def _cmd_residuals(scenario, args, out: Path):
    fld = _field_for(scenario, 0, args.workers)
    rep = deterministic_pde_residual(fld)
    rows = [("interior_sup", _fmt(rep["interior_sup"])),
            ("interior_l2", _fmt(rep["interior_l2"]))]
    if rep["boundary_sup"] is not None:
        rows += [("boundary_sup", _fmt(rep["boundary_sup"])),
                 ("boundary_l2", _fmt(rep["boundary_l2"]))]
    f = out / "residuals.csv"
    _write_csv(f, ["quantity", "value"], rows)
    print("residuals: " + ", ".join(f"{k}={v}" for k, v in rows))
    return [f]


def _cmd_probe_b(scenario, args, out: Path):
    report = b_measurability_probe(
        scenario.domain, scenario.sde, scenario.coeffs, scenario.grid,
        scenario.start, n_b_scenarios=args.n_b or scenario.n_b_scenarios,
        n_paths_ladder=tuple(int(v) for v in args.ladder.split(",")),
        seed=scenario.seed, basis=scenario.basis, workers=args.workers)
    rows = [(r["n_paths"], _fmt(r["within_b_variance"]), _fmt(r["across_b_variance"]))
            for r in report["rows"]]
    f = out / "b_probe.csv"
    _write_csv(f, ["n_paths", "within_b_variance", "across_b_variance"], rows)
    slope = report["within_slope"]
    print(f"across-B variance={report['across_b_variance']:.6g}; "
          f"within-B slope vs n_paths={slope if slope is None else round(slope, 3)}")
    return [f]


_RUNNERS = {
    "simulate-x": _cmd_simulate_x,
    "solve": _cmd_solve,
    "penalize-sweep": _cmd_penalize_sweep,
    "picard": _cmd_picard,
    "compare": _cmd_compare,
    "doss-check": _cmd_doss_check,
    "field": _cmd_field,
    "residuals": _cmd_residuals,
    "probe-b": _cmd_probe_b,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rbdsde",
        description="Reflected generalized backward doubly stochastic lab")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--scenario", required=True, help="path to a JSON scenario")
        p.add_argument("--seed", type=int, default=None, help="override the seed")
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--out", default=None, help="output directory "
                       "(default $RBDSDE_OUT or ./rbdsde_out)")
        p.add_argument("--n-paths", type=int, default=None)
        p.add_argument("--grid-steps", type=int, default=None)
        if name == "simulate-x":
            p.add_argument("--dump-paths", type=int, default=5)
        if name == "penalize-sweep":
            p.add_argument("--n", dest="levels", default="4,16,64,256")
        if name == "picard":
            p.add_argument("--tol", type=float, default=1e-4)
            p.add_argument("--max-iter", type=int, default=8)
        if name == "compare":
            p.add_argument("--bump-terminal", type=float, default=1.0)
            p.add_argument("--bump-driver", type=float, default=0.5)
            p.add_argument("--bump-boundary", type=float, default=0.0)
        if name == "probe-b":
            p.add_argument("--n-b", type=int, default=None)
            p.add_argument("--ladder", default="500,1000,2000")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    started = time.time()
    try:
        cfg = _load_config(args.scenario)
        scenario = scenario_from_config(cfg)
        if args.seed is not None:
            scenario.seed = args.seed
        if args.n_paths is not None:
            scenario.n_paths = args.n_paths
        if args.grid_steps is not None:
            grid = scenario.grid
            from .noise import TimeGrid
            scenario.grid = TimeGrid(grid.t_start, grid.t_end, args.grid_steps)
        out = Path(args.out or scenario.extras.get("out_dir")
                   or os.environ.get("RBDSDE_OUT") or "rbdsde_out")
        out.mkdir(parents=True, exist_ok=True)
        outputs = _RUNNERS[args.command](scenario, args, out)
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 2
    except (NumericsError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3

    manifest = {
        "command": args.command,
        "config_sha256": hashlib.sha256(
            json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()).hexdigest(),
        "seed": scenario.seed,
        "versions": {"rbdsde": __version__, "numpy": np.__version__,
                     "python": platform.python_version()},
        "wall_time_s": round(time.time() - started, 3),
        "outputs": [{"path": str(p), "sha256": _sha256(Path(p))} for p in outputs],
    }
    with open(out / "run_manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
