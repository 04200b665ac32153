"""Backward solvers for generalized, penalized and reflected doubly stochastic equations.

All solvers run a least-squares Monte Carlo recursion conditioned on one
frozen backward path: within a path ensemble every trajectory shares the
same backward increments, so conditional expectations with respect to the
forward motion are plain regressions on the current state.

The backward driver term is always evaluated at the right node of each step
(the discrete backward-Ito convention); the reflection constraint is handled
either by penalizing the driver or by a direct max-projection step.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import RegressionError, ValidationError
from .reflected_sde import PathEnsemble

__all__ = [
    "Constants",
    "CoefficientSet",
    "RegressionBasis",
    "BackwardSolution",
    "solve_generalized",
    "solve_penalized",
    "solve_reflected_direct",
    "skorokhod_residual",
    "dump_solution_csv",
]


@dataclass(frozen=True)
class Constants:
    """Structural metadata: Lipschitz bounds and the weighted-norm exponents.

    beta must be negative (monotone boundary driver), alpha in (0, 1)
    (z-Lipschitz weight of the backward-noise coefficient).
    """

    c: float = 1.0
    lipschitz_k: float = 1.0
    beta: float = -0.5
    alpha: float = 0.5
    mu: float = 0.0

    def __post_init__(self):
        if not self.beta < 0:
            raise ValidationError(f"beta must be negative, got {self.beta}")
        if not 0 < self.alpha < 1:
            raise ValidationError(f"alpha must lie in (0,1), got {self.alpha}")
        if not self.c > 0:
            raise ValidationError(f"c must be positive, got {self.c}")


@dataclass(frozen=True)
class CoefficientSet:
    """The data (l, f, phi, g, h) of one backward problem, all vectorized.

    terminal_l(x)->(n,), driver_f(t,x,y,z)->(n,), boundary_phi(t,x,y)->(n,),
    noise_g(t,x,y)->(n,ell) or None, obstacle_h(t,x)->(n,) or None.
    noise_g_z(t,x,y,z)->(n,ell), when set, is the z-dependent variant that
    only the fixed-point solver may use.
    """

    terminal_l: callable
    driver_f: callable
    boundary_phi: callable
    noise_g: callable = None
    obstacle_h: callable = None
    noise_g_z: callable = None
    ell: int = 1
    constants: Constants = field(default_factory=Constants)

    @property
    def has_obstacle(self) -> bool:
        return self.obstacle_h is not None

    def without_obstacle(self) -> "CoefficientSet":
        return replace(self, obstacle_h=None)

    def spot_check(self, domain, grid, rng=None, samples: int = 256, tol: float = 1e-9):
        """Sampled structural checks: phi monotone in y with constant beta,
        and h(T, x) <= l(x) when an obstacle is present."""
        rng = rng or np.random.default_rng(0)
        d = domain.dimension
        x = domain.center + (rng.uniform(-1, 1, (samples, d))) * domain.diameter / 2
        x, _ = domain.project_to_closure(x)
        t = rng.uniform(grid.t_start, grid.t_end, ())
        y1 = rng.standard_normal(samples)
        y2 = rng.standard_normal(samples)
        gap = (y1 - y2) * (self.boundary_phi(t, x, y1) - self.boundary_phi(t, x, y2))
        bound = self.constants.beta * (y1 - y2) ** 2
        if np.any(gap > bound + tol):
            raise ValidationError(
                "boundary driver violates the declared monotonicity constant beta")
        if self.has_obstacle:
            if np.any(self.obstacle_h(grid.t_end, x) > self.terminal_l(x) + tol):
                raise ValidationError("obstacle at terminal time exceeds the terminal value")


@dataclass(frozen=True)
class RegressionBasis:
    """Polynomials in the (per-step standardized) state up to ``degree``,
    plus the obstacle value as an extra regressor when present.

    ``knots`` (absolute first-coordinate values, 1-D state only) switch the
    design to piecewise polynomials: one block of {indicator, x, ..., x^deg}
    per region between consecutive knots.  ``quantile_knots = q`` places the
    knots at per-step quantiles of the state cloud instead, which keeps every
    region populated; localizing the fit this way is what keeps the repeated
    max-projection of the reflected scheme from accumulating misfit bias,
    and balanced occupancy prevents wild extrapolation in thin regions.
    The first column is always a global intercept and is exempt from the
    ridge penalty.
    """

    degree: int = 3
    include_obstacle: bool = True
    knots: tuple = None
    quantile_knots: int = 0

    def exponents(self, d: int):
        from itertools import product
        exps = [e for e in product(range(self.degree + 1), repeat=d)
                if sum(e) <= self.degree]
        exps.sort(key=lambda e: (sum(e), e))
        return exps

    def design(self, x: np.ndarray, h_vals: np.ndarray | None) -> np.ndarray:
        n, d = x.shape
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        std = np.where(std < 1e-12 * (1.0 + np.abs(mean)), 1.0, std)
        xs = (x - mean) / std
        cols = []
        knots = self.knots
        if self.quantile_knots:
            if d != 1:
                raise ValidationError("piecewise (knotted) bases require a 1-D state")
            qs = np.quantile(x[:, 0], np.linspace(0, 1, self.quantile_knots + 1)[1:-1])
            knots = tuple(np.unique(qs))
        if knots is None:
            for e in self.exponents(d):
                col = np.ones(n)
                for k, p in enumerate(e):
                    if p:
                        col = col * xs[:, k] ** p
                cols.append(col)
        else:
            if d != 1:
                raise ValidationError("piecewise (knotted) bases require a 1-D state")
            bins = np.digitize(x[:, 0], np.asarray(knots, dtype=float))
            cols.append(np.ones(n))
            for k in range(len(knots) + 1):
                mask = (bins == k).astype(float)
                if k > 0:
                    cols.append(mask)
                for p in range(1, self.degree + 1):
                    cols.append(mask * xs[:, 0] ** p)
        if h_vals is not None and self.include_obstacle:
            hs = h_vals - h_vals.mean()
            scale = hs.std()
            if scale > 1e-12 * (1.0 + np.abs(h_vals.mean())):
                cols.append(hs / scale)
        return np.column_stack(cols)


@dataclass
class BackwardSolution:
    """Per-path, per-node samples of (Y, Z, K) with solver provenance."""

    grid: object
    start_index: int
    y_values: np.ndarray   # (n_paths, N+1)
    z_values: np.ndarray   # (n_paths, N, d)
    k_values: np.ndarray   # (n_paths, N+1), nondecreasing, k_0 = 0
    b_path_id: int
    metadata: dict

    @property
    def n_paths(self) -> int:
        return self.y_values.shape[0]

    @property
    def y_start(self) -> float:
        return float(np.mean(self.y_values[:, self.start_index]))

    @property
    def scheme_tolerance(self) -> float:
        return self.metadata["scheme_tolerance"]


class _Regressor:
    """Per-step ridge regression on a fixed design matrix.

    The ridge weight is 1e-8 * n_paths on every column except the leading
    intercept, which stays unpenalized so that constants are reproduced
    exactly (several oracle identities rely on that).
    """

    def __init__(self, phi: np.ndarray, ridge_scale: float = 1e-8):
        self.phi = phi
        n, m = phi.shape
        penalty = np.ones(m)
        penalty[0] = 0.0
        gram = phi.T @ phi + ridge_scale * n * np.diag(penalty)
        self.cond = float(np.linalg.cond(gram))
        if not np.isfinite(self.cond):
            raise RegressionError(f"regression is rank deficient (cond={self.cond:.3e})")
        self._gram = gram

    def fit(self, targets: np.ndarray) -> np.ndarray:
        if not np.all(np.isfinite(targets)):
            raise RegressionError("non-finite regression targets")
        beta = np.linalg.solve(self._gram, self.phi.T @ targets)
        return self.phi @ beta

    def fit_cross(self, targets: np.ndarray) -> np.ndarray:
        """Two-fold cross-fitted predictions: each half is evaluated with
        coefficients trained on the other half, so a prediction never sees
        its own row's noise (zero in-sample leverage).  Used for control
        variates, where in-sample fits would bias the mean by tr(H)/n.

        Predictions are clipped to the quantile envelope of the training
        fold's own fitted values; the envelope depends only on the other
        fold, so the evaluated rows keep an exactly zero conditional mean
        while tail extrapolation stays bounded.
        """
        n, m = self.phi.shape
        if n < 4 * m:
            return np.zeros(targets.shape, dtype=float)
        half = n // 2
        out = np.empty(targets.shape, dtype=float)
        for rows, other in (((slice(0, half)), slice(half, n)),
                            ((slice(half, n)), slice(0, half))):
            phi_tr = self.phi[other]
            n_tr = phi_tr.shape[0]
            penalty = np.ones(m)
            penalty[0] = 0.0
            gram = phi_tr.T @ phi_tr + 1e-8 * n_tr * np.diag(penalty)
            beta = np.linalg.solve(gram, phi_tr.T @ targets[other])
            train_pred = phi_tr @ beta
            lo = np.quantile(train_pred, 0.005, axis=0)
            hi = np.quantile(train_pred, 0.995, axis=0)
            out[rows] = np.clip(self.phi[rows] @ beta, lo, hi)
        return out


def _neg(x):
    return np.maximum(-x, 0.0)


def _backward_solve(coeffs: CoefficientSet, paths: PathEnsemble, basis: RegressionBasis,
                    scheme: str, penalization: float | None = None,
                    inner_picard: bool = True, stiffness_cap: float = 0.5,
                    allow_implicit: bool = True, g_dot_db: np.ndarray | None = None,
                    control_variate: bool = True) -> BackwardSolution:
    grid = paths.grid
    n, n_steps, d = paths.w_increments.shape
    if paths.b_increments.shape[0] != n_steps:
        raise ValidationError("forward and backward increments disagree on n_steps")
    dt = grid.dt
    nodes = grid.nodes
    start = paths.start_index

    implicit_penalty = False
    if scheme == "penalized":
        if penalization is None or penalization < 0:
            raise ValidationError("penalization level must be >= 0")
        if penalization * dt > stiffness_cap:
            if not allow_implicit:
                raise ValidationError(
                    f"n*dt = {penalization * dt:.3g} exceeds the stiffness cap "
                    f"{stiffness_cap} and implicit mode is disabled")
            implicit_penalty = True
    if scheme in ("penalized", "direct") and not coeffs.has_obstacle:
        raise ValidationError(f"scheme {scheme!r} requires an obstacle")

    h_fn = coeffs.obstacle_h if coeffs.has_obstacle else None
    g_fn = coeffs.noise_g
    if coeffs.noise_g_z is not None and g_dot_db is None and g_fn is None:
        raise ValidationError(
            "z-dependent noise coefficients are only solvable through the "
            "fixed-point iteration")

    y = np.asarray(coeffs.terminal_l(paths.x_values[:, n_steps]), dtype=float)
    if y.shape != (n,):
        raise ValidationError("terminal function must map (n,d) states to (n,) values")
    y_all = np.empty((n, n_steps + 1))
    z_all = np.zeros((n, n_steps, d))
    dk_all = np.zeros((n, n_steps))
    y_all[:, n_steps] = y
    max_cond = 0.0
    se_y_start = 0.0

    for i in range(n_steps - 1, start - 1, -1):
        t_i, t_r = nodes[i], nodes[i + 1]
        xi = paths.x_values[:, i]
        xr = paths.x_values[:, i + 1]
        dw = paths.w_increments[:, i]
        da = paths.a_values[:, i + 1] - paths.a_values[:, i]
        h_i = np.asarray(h_fn(t_i, xi), dtype=float) if h_fn is not None else None

        reg = _Regressor(basis.design(xi, h_i))
        max_cond = max(max_cond, reg.cond)

        z = reg.fit(y[:, None] * dw) / dt
        z_all[:, i] = z

        # zero-conditional-mean control variate: subtracting the fitted
        # martingale increment leaves every regression estimand unchanged but
        # removes the dominant one-step fluctuation of the target.  Must be
        # cross-fitted, otherwise its mean is biased by the leverage trace.
        # Gated by ensemble size only (estimation noise ~ sqrt(m/n) must be
        # small); any data-dependent switch would reintroduce selection bias
        # and break the smoothness of error surfaces across coupled solves.
        if control_variate and paths.n_paths >= 200 * reg.phi.shape[1]:
            z_cv = reg.fit_cross(y[:, None] * dw) / dt
            cv = np.sum(z_cv * dw, axis=1)
        else:
            cv = 0.0

        if g_dot_db is not None:
            g_term = g_dot_db[:, i]
        elif g_fn is not None:
            g_term = np.asarray(g_fn(t_r, xr, y), dtype=float) @ paths.b_increments[i]
        else:
            g_term = 0.0

        pen = penalization if (scheme == "penalized" and not implicit_penalty
                               and penalization) else 0.0

        def _target(y_eval):
            tgt = (y - cv + coeffs.driver_f(t_i, xi, y_eval, z) * dt
                   + coeffs.boundary_phi(t_i, xi, y_eval) * da + g_term)
            if pen:
                tgt = tgt + pen * _neg(y_eval - h_i) * dt
            return tgt

        target = _target(y)
        y_hat = reg.fit(target)
        if inner_picard:
            target = _target(y_hat)
            y_hat = reg.fit(target)

        if scheme == "direct":
            y_new = np.maximum(y_hat, h_i)
            dk_all[:, i] = y_new - y_hat
        elif scheme == "penalized":
            if implicit_penalty:
                nd = penalization * dt
                below = y_hat < h_i
                y_new = np.where(below, (y_hat + nd * h_i) / (1.0 + nd), y_hat)
            else:
                y_new = y_hat
            dk_all[:, i] = penalization * dt * _neg(y_new - h_i) if penalization else 0.0
        else:
            y_new = y_hat

        if i == start:
            se_y_start = float(np.std(target) / np.sqrt(n))
        y = y_new
        y_all[:, i] = y

    y_all[:, :start] = y_all[:, start][:, None]
    k_values = np.zeros((n, n_steps + 1))
    np.cumsum(dk_all, axis=1, out=k_values[:, 1:])

    consts = coeffs.constants
    scale = 1.0 + float(np.max(np.abs(y_all)))
    scheme_tolerance = scale * (max(consts.c, consts.lipschitz_k, 1.0) * dt
                                + 4.0 / np.sqrt(n))
    meta = {
        "scheme": scheme,
        "penalization": penalization,
        "basis_degree": basis.degree,
        "n_paths": n,
        "dt": dt,
        "max_condition_number": max_cond,
        "se_y_start": se_y_start,
        "implicit_penalty": implicit_penalty,
        "inner_picard": inner_picard,
        "control_variate": control_variate,
        "scheme_tolerance": float(scheme_tolerance),
    }
    return BackwardSolution(grid=grid, start_index=start, y_values=y_all,
                            z_values=z_all, k_values=k_values,
                            b_path_id=paths.b_path_id, metadata=meta)


def solve_generalized(coeffs: CoefficientSet, x_paths: PathEnsemble,
                      basis: RegressionBasis | None = None, *,
                      inner_picard: bool = True, control_variate: bool = True,
                      g_dot_db: np.ndarray | None = None) -> BackwardSolution:
    """Solve the non-reflected generalized equation by backward regression.

    Per step: Z_i = Regress[Y_{i+1} dW_i | X_i] / dt, then
    Y_i = Regress[Y_{i+1} + f(t_i,X_i,Y,Z_i) dt + phi(t_i,X_i,Y) dA_i
    + <g(t_{i+1},X_{i+1},Y_{i+1}), dB_i> | X_i], with one optional inner
    pass that re-evaluates f and phi at the fitted Y_i.
    """
    basis = basis or RegressionBasis()
    return _backward_solve(coeffs, x_paths, basis, scheme="generalized",
                           inner_picard=inner_picard, g_dot_db=g_dot_db,
                           control_variate=control_variate)


def solve_penalized(coeffs: CoefficientSet, n: float, x_paths: PathEnsemble,
                    basis: RegressionBasis | None = None, *,
                    inner_picard: bool = True, control_variate: bool = True,
                    stiffness_cap: float = 0.5,
                    allow_implicit: bool = True) -> BackwardSolution:
    """Penalized scheme: driver gains n*(y - h)^- and K accumulates
    n*(Y_i - h_i)^- dt.  When n*dt exceeds the stiffness cap the penalty is
    applied through an implicit scalar update instead (closed form)."""
    basis = basis or RegressionBasis()
    return _backward_solve(coeffs, x_paths, basis, scheme="penalized",
                           penalization=float(n), inner_picard=inner_picard,
                           stiffness_cap=stiffness_cap, allow_implicit=allow_implicit,
                           control_variate=control_variate)


def solve_reflected_direct(coeffs: CoefficientSet, x_paths: PathEnsemble,
                           basis: RegressionBasis | None = None, *,
                           inner_picard: bool = True,
                           control_variate: bool = True) -> BackwardSolution:
    """Direct scheme: the unreflected candidate is pushed up onto the
    obstacle each step and the push is booked into K (discrete Snell-type
    projection).  By construction Y >= h and (Y - h) dK = 0 exactly."""
    basis = basis or RegressionBasis()
    return _backward_solve(coeffs, x_paths, basis, scheme="direct",
                           inner_picard=inner_picard, control_variate=control_variate)


def skorokhod_residual(sol: BackwardSolution, coeffs: CoefficientSet,
                       paths: PathEnsemble) -> float:
    """Magnitude of the discrete complementarity sum mean_p sum_i (Y_i - h_i) dK_i.

    Zero exactly for the direct scheme; for the penalized scheme the signed
    sum is nonpositive and shrinks like 1/n, so its magnitude is reported.
    """
    if not coeffs.has_obstacle:
        raise ValidationError("the complementarity residual needs an obstacle")
    nodes = sol.grid.nodes
    total = np.zeros(sol.n_paths)
    for i in range(sol.start_index, sol.grid.n_steps):
        dk = sol.k_values[:, i + 1] - sol.k_values[:, i]
        if not np.any(dk):
            continue
        gap = sol.y_values[:, i] - coeffs.obstacle_h(nodes[i], paths.x_values[:, i])
        total += gap * dk
    return float(abs(np.mean(total)))


def dump_solution_csv(sol: BackwardSolution, coeffs: CoefficientSet,
                      paths: PathEnsemble, out) -> None:
    """Per-node summary CSV: time, mean/sd of Y, mean K, complementarity term."""
    nodes = sol.grid.nodes
    has_h = coeffs.has_obstacle
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time", "mean_y", "sd_y", "mean_k", "skorokhod_contribution"])
        for i in range(sol.grid.n_steps + 1):
            if has_h and i < sol.grid.n_steps:
                dk = sol.k_values[:, i + 1] - sol.k_values[:, i]
                gap = sol.y_values[:, i] - coeffs.obstacle_h(nodes[i], paths.x_values[:, i])
                contrib = float(np.mean(gap * dk))
            else:
                contrib = 0.0
            writer.writerow([f"{nodes[i]:.12g}",
                             f"{np.mean(sol.y_values[:, i]):.17g}",
                             f"{np.std(sol.y_values[:, i]):.17g}",
                             f"{np.mean(sol.k_values[:, i]):.17g}",
                             f"{contrib:.17g}"])
