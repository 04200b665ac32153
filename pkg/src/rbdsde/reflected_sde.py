"""Normally reflected diffusions by Euler--Maruyama with projection.

The state is pushed by an explicit Euler step; whenever the step leaves the
closure it is projected back and the displacement length is booked as the
increment of the boundary local time A.  A therefore increases only at steps
whose pre-projection point exited, is nondecreasing and starts at 0.
Paths started at (t, x) are frozen at x (and A at 0) on nodes before t.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .geometry import Domain
from .noise import (PathBundle, TimeGrid, sample_bundle, sample_noise_block,
                    stream_id, STREAM_KIND_B_PATH, STREAM_KIND_W_BLOCK)

__all__ = [
    "SdeSpec",
    "ReflectedPath",
    "PathEnsemble",
    "simulate_reflected",
    "simulate_ensemble",
    "make_ensemble",
    "moment_scaling_report",
    "dump_path_csv",
]


@dataclass(frozen=True)
class SdeSpec:
    """Drift b: (n,d)->(n,d) and diffusion sigma: (n,d)->(n,d,d), vectorized.

    lipschitz_k is declared metadata used only by diagnostics.
    """

    drift: callable
    diffusion: callable
    lipschitz_k: float = 1.0


@dataclass(frozen=True)
class ReflectedPath:
    """One trajectory with its boundary local time."""

    grid: TimeGrid
    start_index: int
    start_x: np.ndarray
    x_values: np.ndarray  # (N+1, d)
    a_values: np.ndarray  # (N+1,)


@dataclass(frozen=True)
class PathEnsemble:
    """A W-ensemble of reflected paths conditioned on one shared B path.

    This is the unit of work for the backward solvers: within the ensemble
    all paths share the grid, the starting point and the backward increments.
    """

    grid: TimeGrid
    start_index: int
    start_x: np.ndarray
    x_values: np.ndarray      # (n_paths, N+1, d)
    a_values: np.ndarray      # (n_paths, N+1)
    w_increments: np.ndarray  # (n_paths, N, d)
    b_increments: np.ndarray  # (N, ell)
    b_path_id: int = 0
    seed: int = 0

    @property
    def n_paths(self) -> int:
        return self.x_values.shape[0]

    @property
    def d(self) -> int:
        return self.x_values.shape[2]

    @property
    def ell(self) -> int:
        return self.b_increments.shape[1]


def _step_kernel(domain: Domain, spec: SdeSpec, x, dw, dt):
    """One projected Euler step for a (n, d) state block."""
    drift = spec.drift(x)
    sig = spec.diffusion(x)
    prop = x + drift * dt + np.einsum("nij,nj->ni", sig, dw)
    outside = domain.psi(prop) < 0.0
    da = np.zeros(x.shape[0])
    if np.any(outside):
        proj, dist = domain.project_to_closure(prop[outside])
        prop[outside] = proj
        da[outside] = dist
    return prop, da


def _simulate_block(domain, spec, start_index, x0, grid, w_increments):
    n_paths = w_increments.shape[0]
    d = x0.shape[0]
    x = np.empty((n_paths, grid.n_steps + 1, d))
    a = np.zeros((n_paths, grid.n_steps + 1))
    x[:, : start_index + 1] = x0
    cur = np.broadcast_to(x0, (n_paths, d)).copy()
    dt = grid.dt
    for i in range(start_index, grid.n_steps):
        cur, da = _step_kernel(domain, spec, cur, w_increments[:, i], dt)
        x[:, i + 1] = cur
        a[:, i + 1] = a[:, i] + da
    return x, a


def simulate_reflected(domain: Domain, spec: SdeSpec, start, bundle: PathBundle) -> ReflectedPath:
    """Simulate one reflected trajectory X with local time A from start=(t, x)."""
    t0, x0 = start
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if domain.psi(x0) < -domain.boundary_tol:
        raise ValidationError("start point lies outside the closure")
    i0 = bundle.grid.index_of(t0)
    x, a = _simulate_block(domain, spec, i0, x0, bundle.grid, bundle.w_increments[None])
    return ReflectedPath(grid=bundle.grid, start_index=i0, start_x=x0,
                         x_values=x[0], a_values=a[0])


def simulate_ensemble(domain: Domain, spec: SdeSpec, start, grid: TimeGrid,
                      w_increments: np.ndarray, b_increments: np.ndarray,
                      b_path_id: int = 0, seed: int = 0) -> PathEnsemble:
    """Simulate an ensemble of reflected paths from a common start point."""
    t0, x0 = start
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if domain.psi(x0) < -domain.boundary_tol:
        raise ValidationError("start point lies outside the closure")
    i0 = grid.index_of(t0)
    x, a = _simulate_block(domain, spec, i0, x0, grid, w_increments)
    return PathEnsemble(grid=grid, start_index=i0, start_x=x0, x_values=x,
                        a_values=a, w_increments=w_increments,
                        b_increments=b_increments, b_path_id=b_path_id, seed=seed)


def make_ensemble(domain: Domain, spec: SdeSpec, start, grid: TimeGrid,
                  n_paths: int, ell: int, seed: int, b_scenario: int = 0,
                  replicate: int = 0) -> PathEnsemble:
    """Sample noise and simulate in one go.

    The W block is keyed by (seed, b_scenario, replicate) and the B path by
    (seed, b_scenario) only, so different replicates share the same backward
    scenario, and regenerating any piece is order independent.

    Starts at a later grid node consume the leading draws of the same W
    stream (the forward increments are exchangeable, the backward path is
    not): ensembles launched from nearby times then share almost all their
    noise, which keeps the Monte Carlo error surface of a solution field
    smooth in t as well as in x.
    """
    d = np.atleast_1d(start[1]).shape[0]
    w = sample_noise_block(grid, d, n_paths, seed,
                           stream_id(STREAM_KIND_W_BLOCK, b_scenario, replicate))
    i0 = grid.index_of(start[0])
    if i0 > 0:
        shifted = np.zeros_like(w)
        shifted[:, i0:] = w[:, :grid.n_steps - i0]
        w = shifted
    b = sample_bundle(grid, 1, ell, seed,
                      stream_id(STREAM_KIND_B_PATH, b_scenario)).b_increments
    return simulate_ensemble(domain, spec, start, grid, w, b,
                             b_path_id=b_scenario, seed=seed)


def moment_scaling_report(domain: Domain, spec: SdeSpec, grid: TimeGrid,
                          base_start, perturbed_starts, p: float, n_paths: int,
                          seed: int = 0, mu: float = 1.0) -> dict:
    """Empirical moment-scaling diagnostics for coupled start perturbations.

    Simulates the base start and every perturbed start with the SAME
    increments (synchronous coupling) and estimates
    E[sup_s |X - X'|^p] and E[sup_s |A - A'|^p].  Reports log-log slopes of
    those moments against the start separation |x - x'| (target p) or
    |t - t'| (target p/2), plus an estimate of E[exp(mu * A_T)] for the base
    start as a finiteness diagnostic.
    """
    if p <= 4:
        raise ValidationError("the moment estimate requires p > 4")
    d = np.atleast_1d(base_start[1]).shape[0]
    w = sample_noise_block(grid, d, n_paths, seed, stream_id(STREAM_KIND_W_BLOCK, 0))
    b = np.zeros((grid.n_steps, 1))
    base = simulate_ensemble(domain, spec, base_start, grid, w, b)
    rows = []
    for start in perturbed_starts:
        other = simulate_ensemble(domain, spec, start, grid, w, b)
        dx = np.linalg.norm(np.atleast_1d(start[1]) - np.atleast_1d(base_start[1]))
        dt_gap = abs(start[0] - base_start[0])
        x_gap = np.linalg.norm(base.x_values - other.x_values, axis=-1)
        mom_x = float(np.mean(np.max(x_gap, axis=1) ** p))
        a_gap = np.abs(base.a_values - other.a_values)
        mom_a = float(np.mean(np.max(a_gap, axis=1) ** p))
        rows.append({"dx": dx, "dt": dt_gap, "moment_x": mom_x, "moment_a": mom_a})

    def _slope(xs, ys):
        xs, ys = np.asarray(xs), np.asarray(ys)
        keep = (xs > 0) & (ys > 0)
        if keep.sum() < 2:
            return None
        return float(np.polyfit(np.log(xs[keep]), np.log(ys[keep]), 1)[0])

    report = {
        "p": p,
        "rows": rows,
        "slope_x_in_dx": _slope([r["dx"] for r in rows], [r["moment_x"] for r in rows]),
        "slope_x_in_dt": _slope([r["dt"] for r in rows], [r["moment_x"] for r in rows]),
        "slope_a_in_dx": _slope([r["dx"] for r in rows], [r["moment_a"] for r in rows]),
        "exp_moment_a": float(np.mean(np.exp(mu * base.a_values[:, -1]))),
        "mu": mu,
    }
    return report


def dump_path_csv(path: ReflectedPath, out) -> None:
    """Write one trajectory as CSV columns (step, time, x_1..x_d, A)."""
    d = path.x_values.shape[1]
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "time"] + [f"x_{k + 1}" for k in range(d)] + ["A"])
        nodes = path.grid.nodes
        for i in range(path.grid.n_steps + 1):
            writer.writerow([i, f"{nodes[i]:.12g}"]
                            + [f"{v:.17g}" for v in path.x_values[i]]
                            + [f"{path.a_values[i]:.17g}"])
