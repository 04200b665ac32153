"""The solution field u(t, x) and its validation diagnostics.

Every grid point (t, x) is one backward solve launched from a reflected
ensemble started there; u(t, x) is the solved value at the starting node.
All grid points share the same forward-noise block (common random numbers),
so the Monte Carlo error surface is smooth in (t, x) and finite-difference
residuals of the field are not drowned by independent noise.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from ._parallel import parallel_map
from .bdsde import (CoefficientSet, RegressionBasis, solve_generalized,
                    solve_penalized, solve_reflected_direct)
from .errors import ValidationError
from .geometry import Domain
from .noise import TimeGrid
from .reflected_sde import SdeSpec, make_ensemble

__all__ = ["SolutionField", "build_field", "obstacle_gap_report",
           "deterministic_pde_residual", "b_measurability_probe",
           "dump_field_csv"]


@dataclass
class SolutionField:
    """u (and optionally v = inverse-flow of u) on a (t, x) grid, one B scenario."""

    t_nodes: np.ndarray        # (n_t,)
    x_grid: np.ndarray         # (n_x, d)
    u: np.ndarray              # (n_t, n_x)
    v: np.ndarray | None
    h_values: np.ndarray | None
    b_path_id: int
    domain: Domain
    sde: SdeSpec
    coeffs: CoefficientSet
    metadata: dict = field(default_factory=dict)

    @property
    def scheme_tolerance(self) -> float:
        return self.metadata["scheme_tolerance"]


def build_field(domain: Domain, sde: SdeSpec, coeffs: CoefficientSet,
                grid: TimeGrid, t_nodes, x_grid, *, scheme="direct",
                n_paths: int = 2000, seed: int = 0, b_scenario: int = 0,
                basis: RegressionBasis | None = None, flow=None,
                workers: int = 1, inner_picard: bool = True) -> SolutionField:
    """Assemble u(t, x) = (solved value at the start node) over the grid.

    scheme is "direct", ("penalized", n) or "generalized".  The terminal row
    is the terminal function itself, exactly.  When the problem carries
    backward noise, pass the solved flow to also tabulate the conjugated
    field v; the same frozen B path must underlie both.
    """
    t_nodes = np.asarray(t_nodes, dtype=float)
    x_grid = np.atleast_2d(np.asarray(x_grid, dtype=float))
    if np.any(domain.psi(x_grid) < -domain.boundary_tol):
        raise ValidationError("x grid must lie in the closure of the domain")
    basis = basis or RegressionBasis()
    if isinstance(scheme, tuple):
        kind, pen = scheme
    else:
        kind, pen = scheme, None
    if kind not in ("direct", "penalized", "generalized"):
        raise ValidationError(f"unknown scheme {scheme!r}")
    if kind in ("direct", "penalized") and not coeffs.has_obstacle:
        raise ValidationError(f"scheme {kind!r} requires an obstacle")

    n_t, n_x = len(t_nodes), x_grid.shape[0]
    u = np.empty((n_t, n_x))
    tol = 0.0

    jobs = []
    for it, t in enumerate(t_nodes):
        for jx in range(n_x):
            jobs.append((it, jx, float(t), x_grid[jx]))

    def run(job):
        it, jx, t, x = job
        if abs(t - grid.t_end) < 1e-12 * max(1.0, abs(grid.t_end)):
            return float(coeffs.terminal_l(x[None, :])[0]), 0.0
        try:
            paths = make_ensemble(domain, sde, (t, x), grid, n_paths, coeffs.ell,
                                  seed, b_scenario=b_scenario)
            if kind == "direct":
                sol = solve_reflected_direct(coeffs, paths, basis,
                                             inner_picard=inner_picard)
            elif kind == "penalized":
                sol = solve_penalized(coeffs, pen, paths, basis,
                                      inner_picard=inner_picard)
            else:
                sol = solve_generalized(coeffs, paths, basis,
                                        inner_picard=inner_picard)
        except Exception as exc:
            raise type(exc)(f"field point (t={t}, x={x}): {exc}") from exc
        return sol.y_start, sol.scheme_tolerance

    results = parallel_map(run, jobs, workers)
    for (it, jx, _, _), (val, stol) in zip(jobs, results):
        u[it, jx] = val
        tol = max(tol, stol)

    h_values = None
    if coeffs.has_obstacle:
        h_values = np.empty_like(u)
        for it, t in enumerate(t_nodes):
            h_values[it] = coeffs.obstacle_h(float(t), x_grid)

    v = None
    if flow is not None:
        v = np.empty_like(u)
        for it, t in enumerate(t_nodes):
            v[it] = flow.invert(float(t), x_grid, u[it])

    meta = {
        "scheme": scheme,
        "n_paths": n_paths,
        "n_steps": grid.n_steps,
        "seed": seed,
        "basis_degree": basis.degree,
        "scheme_tolerance": float(tol),
    }
    return SolutionField(t_nodes=t_nodes, x_grid=x_grid, u=u, v=v,
                         h_values=h_values, b_path_id=b_scenario,
                         domain=domain, sde=sde, coeffs=coeffs, metadata=meta)


def obstacle_gap_report(fld: SolutionField) -> dict:
    """Min/mean of u - h over the grid and the count of tolerance violations."""
    if fld.h_values is None:
        raise ValidationError("the field has no obstacle")
    gap = fld.u - fld.h_values
    tol = fld.scheme_tolerance
    return {
        "min_gap": float(np.min(gap)),
        "mean_gap": float(np.mean(gap)),
        "violations": int(np.sum(gap < -tol)),
        "tolerance": tol,
    }


def _dt_stencil(u: np.ndarray, dt: float) -> np.ndarray:
    """Second-order time derivative: central inside, one-sided at the ends."""
    du = np.empty_like(u)
    du[1:-1] = (u[2:] - u[:-2]) / (2.0 * dt)
    du[0] = (-3.0 * u[0] + 4.0 * u[1] - u[2]) / (2.0 * dt)
    du[-1] = (3.0 * u[-1] - 4.0 * u[-2] + u[-3]) / (2.0 * dt)
    return du


def deterministic_pde_residual(fld: SolutionField, fd_stencil: dict | None = None) -> dict:
    """Finite-difference residuals of the deterministic reduction (no backward noise).

    Interior: min{u - h, -du/dt - (a u_xx / 2 + b u_x) - f(t,x,u, sigma u_x)};
    boundary columns on the domain boundary get the one-sided inward normal
    derivative residual du/dn + phi(t, x, u).  1-D fields only.
    """
    if fld.coeffs.noise_g is not None or fld.coeffs.noise_g_z is not None:
        raise ValidationError("the deterministic reduction requires zero backward noise")
    if fld.x_grid.shape[1] != 1:
        raise ValidationError("finite-difference residuals are implemented for d = 1")
    n_t, n_x = fld.u.shape
    if n_t < 3 or n_x < 5:
        raise ValidationError("grid too coarse for the residual stencils")
    t = fld.t_nodes
    x = fld.x_grid[:, 0]
    dts = np.diff(t)
    dxs = np.diff(x)
    if np.ptp(dts) > 1e-9 * dts[0] or np.ptp(dxs) > 1e-9 * dxs[0]:
        raise ValidationError("residual stencils need uniform t and x grids")
    dt, dx = dts[0], dxs[0]
    u = fld.u

    u_t = np.empty_like(u)
    for j in range(n_x):
        u_t[:, j] = _dt_stencil(u[:, j], dt)
    u_x = np.empty_like(u)
    u_xx = np.empty_like(u)
    u_x[:, 1:-1] = (u[:, 2:] - u[:, :-2]) / (2.0 * dx)
    u_xx[:, 1:-1] = (u[:, 2:] - 2.0 * u[:, 1:-1] + u[:, :-2]) / dx**2

    xcol = fld.x_grid
    sig = fld.sde.diffusion(xcol)[:, 0, 0]
    drift = fld.sde.drift(xcol)[:, 0]
    interior = np.empty((n_t, n_x - 2))
    for it in range(n_t):
        xi = xcol[1:-1]
        lu = 0.5 * sig[1:-1] ** 2 * u_xx[it, 1:-1] + drift[1:-1] * u_x[it, 1:-1]
        z_arg = (sig[1:-1] * u_x[it, 1:-1])[:, None]
        fval = fld.coeffs.driver_f(float(t[it]), xi, u[it, 1:-1], z_arg)
        pde = -u_t[it, 1:-1] - lu - fval
        if fld.h_values is not None:
            interior[it] = np.minimum(u[it, 1:-1] - fld.h_values[it, 1:-1], pde)
        else:
            interior[it] = pde

    boundary = []
    for j, sign in ((0, +1.0), (n_x - 1, -1.0)):
        xp = fld.x_grid[j]
        if abs(fld.domain.psi(xp)) > 1e-6 * fld.domain.diameter:
            continue  # grid edge is not the domain boundary (e.g. a subgrid)
        normal = fld.domain.inward_normal(xp)[0]
        for it in range(n_t):
            if sign > 0:
                one_sided = (-3.0 * u[it, 0] + 4.0 * u[it, 1] - u[it, 2]) / (2.0 * dx)
            else:
                one_sided = (3.0 * u[it, -1] - 4.0 * u[it, -2] + u[it, -3]) / (2.0 * dx)
            du_dn = normal * one_sided
            phi = float(fld.coeffs.boundary_phi(float(t[it]), xp[None, :],
                                                np.atleast_1d(u[it, j]))[0])
            boundary.append(du_dn + phi)
    boundary = np.asarray(boundary)

    return {
        "interior_residual": interior,
        "interior_sup": float(np.max(np.abs(interior))),
        "interior_l2": float(np.sqrt(np.mean(interior**2))),
        "boundary_residual": boundary,
        "boundary_sup": float(np.max(np.abs(boundary))) if boundary.size else None,
        "boundary_l2": float(np.sqrt(np.mean(boundary**2))) if boundary.size else None,
    }


def b_measurability_probe(domain: Domain, sde: SdeSpec, coeffs: CoefficientSet,
                          grid: TimeGrid, point, *, n_b_scenarios: int = 32,
                          n_paths_ladder=(500, 1000, 2000), replicates: int = 4,
                          seed: int = 0, basis: RegressionBasis | None = None,
                          workers: int = 1) -> dict:
    """Variance decomposition of u(t, x) across and within backward scenarios.

    For each B stream the point value is re-estimated on `replicates`
    independent W ensembles.  The across-B variance (bias-corrected for the
    within part) estimates the genuine randomness of the field; the within-B
    variance is Monte Carlo error and should scale like 1/n_paths.
    """
    basis = basis or RegressionBasis()
    t, x = point
    x = np.atleast_1d(np.asarray(x, dtype=float))

    def estimate(job):
        b, rep, n_paths = job
        paths = make_ensemble(domain, sde, (t, x), grid, n_paths, coeffs.ell,
                              seed, b_scenario=b, replicate=rep)
        if coeffs.has_obstacle:
            sol = solve_reflected_direct(coeffs, paths, basis)
        else:
            sol = solve_generalized(coeffs, paths, basis)
        return sol.y_start

    rows = []
    for n_paths in n_paths_ladder:
        jobs = [(b, rep, n_paths) for b in range(n_b_scenarios)
                for rep in range(replicates)]
        vals = np.asarray(parallel_map(estimate, jobs, workers))
        vals = vals.reshape(n_b_scenarios, replicates)
        within = float(np.mean(np.var(vals, axis=1, ddof=1)))
        across_raw = float(np.var(np.mean(vals, axis=1), ddof=1))
        across = max(across_raw - within / replicates, 0.0)
        rows.append({"n_paths": n_paths, "within_b_variance": within,
                     "across_b_variance": across})
    ladder = np.asarray([r["n_paths"] for r in rows], dtype=float)
    within = np.asarray([r["within_b_variance"] for r in rows])
    slope = None
    if np.all(within > 0) and len(rows) >= 2:
        slope = float(np.polyfit(np.log(ladder), np.log(within), 1)[0])
    return {"rows": rows, "within_slope": slope,
            "across_b_variance": rows[-1]["across_b_variance"]}


def dump_field_csv(fld: SolutionField, out) -> None:
    """CSV rows (t, x..., u, v, h, u - h) over the field grid."""
    d = fld.x_grid.shape[1]
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t"] + [f"x_{k + 1}" for k in range(d)] + ["u", "v", "h", "gap"])
        for it, t in enumerate(fld.t_nodes):
            for jx in range(fld.x_grid.shape[0]):
                v = fld.v[it, jx] if fld.v is not None else ""
                h = fld.h_values[it, jx] if fld.h_values is not None else ""
                gap = fld.u[it, jx] - h if h != "" else ""
                writer.writerow([f"{t:.12g}"]
                                + [f"{c:.12g}" for c in fld.x_grid[jx]]
                                + [f"{fld.u[it, jx]:.17g}",
                                   f"{v:.17g}" if v != "" else "",
                                   f"{h:.17g}" if h != "" else "",
                                   f"{gap:.17g}" if gap != "" else ""])
