"""Built-in scenario library and strict configuration parsing.

A scenario bundles the domain, forward dynamics, coefficient set, grids and
seeds for one reproducible experiment.  Configs are plain JSON documents;
unknown keys are rejected so typos cannot silently change a run.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bdsde import CoefficientSet, Constants, RegressionBasis
from .doss import NoiseCoefficient
from .errors import ValidationError
from .geometry import Domain, ball
from .noise import TimeGrid
from .reflected_sde import SdeSpec

__all__ = ["Scenario", "build_scenario", "scenario_from_config", "BUILTIN_NAMES"]

BUILTIN_NAMES = ("heat", "american_put", "linear_fk", "neumann_drift",
                 "exp_noise_flow")


@dataclass
class Scenario:
    name: str
    domain: Domain
    sde: SdeSpec
    coeffs: CoefficientSet
    grid: TimeGrid
    start: tuple
    n_paths: int = 2000
    n_b_scenarios: int = 1
    scheme: object = "generalized"
    seed: int = 0
    basis: RegressionBasis = field(default_factory=RegressionBasis)
    noise: NoiseCoefficient | None = None
    field_t_count: int = 11
    field_x: tuple = (-1.0, 1.0, 11)
    extras: dict = field(default_factory=dict)

    def field_grids(self):
        t_nodes = np.linspace(self.grid.t_start, self.grid.t_end, self.field_t_count)
        lo, hi, count = self.field_x
        x_grid = np.linspace(lo, hi, int(count))[:, None]
        return t_nodes, x_grid


def _const_diffusion(sigma: float, d: int):
    def diffusion(x):
        return np.broadcast_to(sigma * np.eye(d), (x.shape[0], d, d)).copy()
    return diffusion


def _zero_drift(x):
    return np.zeros_like(x)


def _ones_field(value):
    def g(t, x, y):
        return np.full(np.shape(y) + (1,), float(value))
    return g


def _check_keys(cfg: dict, allowed, where: str):
    unknown = set(cfg) - set(allowed)
    if unknown:
        raise ValidationError(f"unknown keys {sorted(unknown)} in {where}; "
                              f"allowed: {sorted(allowed)}")


def _maybe_obstacle(params):
    level = params.get("obstacle_level")
    if level is None:
        return None
    return lambda t, x: np.full(x.shape[0], float(level))


def _build_linear_fk(params: dict) -> dict:
    _check_keys(params, {"name", "a", "x0", "radius", "obstacle_level"},
                "linear_fk coefficients")
    a = float(params.get("a", 0.25))
    x0 = float(params.get("x0", 0.0))
    radius = float(params.get("radius", 10.0))
    coeffs = CoefficientSet(
        terminal_l=lambda x: x[:, 0] ** 2,
        driver_f=lambda t, x, y, z: a * y,
        boundary_phi=lambda t, x, y: np.zeros_like(y),
        obstacle_h=_maybe_obstacle(params),
        constants=Constants(c=max(a * a, 1e-6), lipschitz_k=1.0, beta=-0.1, alpha=0.5),
    )
    return dict(domain=ball([0.0], radius),
                sde=SdeSpec(drift=_zero_drift, diffusion=_const_diffusion(1.0, 1),
                            lipschitz_k=1.0),
                coeffs=coeffs, grid=TimeGrid(0.0, 0.5, 100), start=(0.0, [x0]),
                extras={"a": a, "x0": x0})


def _build_heat(params: dict) -> dict:
    _check_keys(params, {"name", "sigma", "x0", "radius", "obstacle_level"},
                "heat coefficients")
    sigma = float(params.get("sigma", np.sqrt(2.0)))
    x0 = float(params.get("x0", 0.0))
    radius = float(params.get("radius", 10.0))
    coeffs = CoefficientSet(
        terminal_l=lambda x: x[:, 0] ** 2,
        driver_f=lambda t, x, y, z: np.zeros_like(y),
        boundary_phi=lambda t, x, y: np.zeros_like(y),
        obstacle_h=_maybe_obstacle(params),
        constants=Constants(c=1e-6, lipschitz_k=1.0, beta=-0.1, alpha=0.5),
    )
    return dict(domain=ball([0.0], radius),
                sde=SdeSpec(drift=_zero_drift, diffusion=_const_diffusion(sigma, 1),
                            lipschitz_k=1.0),
                coeffs=coeffs, grid=TimeGrid(0.0, 1.0, 100), start=(0.0, [x0]),
                extras={"sigma": sigma, "x0": x0},
                field_x=(-1.0, 1.0, 21))


def _build_american_put(params: dict) -> dict:
    _check_keys(params, {"name", "s0", "strike", "rate", "vol"},
                "american_put coefficients")
    s0 = float(params.get("s0", 40.0))
    strike = float(params.get("strike", 40.0))
    rate = float(params.get("rate", 0.06))
    vol = float(params.get("vol", 0.2))
    payoff = lambda x: np.maximum(strike - x[:, 0], 0.0)
    coeffs = CoefficientSet(
        terminal_l=payoff,
        driver_f=lambda t, x, y, z: -rate * y,
        boundary_phi=lambda t, x, y: np.zeros_like(y),
        obstacle_h=lambda t, x: np.maximum(strike - x[:, 0], 0.0),
        constants=Constants(c=max(rate * rate, 1e-6), lipschitz_k=max(rate, vol),
                            beta=-0.1, alpha=0.5),
    )
    center = 3.75 * strike
    return dict(domain=ball([center], center - 0.01 * strike),
                sde=SdeSpec(drift=lambda x: rate * x,
                            diffusion=lambda x: (vol * x)[:, :, None],
                            lipschitz_k=max(rate, vol)),
                coeffs=coeffs, grid=TimeGrid(0.0, 0.5, 100), start=(0.0, [s0]),
                basis=RegressionBasis(degree=2, quantile_knots=8),
                extras={"s0": s0, "strike": strike, "rate": rate, "vol": vol})


def _build_neumann_drift(params: dict) -> dict:
    """Manufactured Neumann scenario: u*(t,x) = x^2 + (T - t) solves the
    reduction with f = -2 b x and boundary driver 2 + beta (y - u*)."""
    _check_keys(params, {"name", "drift", "beta_phi", "n_steps"},
                "neumann_drift coefficients")
    b0 = float(params.get("drift", 0.3))
    beta_phi = float(params.get("beta_phi", -0.5))
    n_steps = int(params.get("n_steps", 400))
    grid = TimeGrid(0.0, 1.0, n_steps)
    t_end = grid.t_end

    def u_star(t, x):
        return x[:, 0] ** 2 + (t_end - t)

    coeffs = CoefficientSet(
        terminal_l=lambda x: x[:, 0] ** 2,
        driver_f=lambda t, x, y, z: -2.0 * b0 * x[:, 0],
        boundary_phi=lambda t, x, y: 2.0 + beta_phi * (y - u_star(t, x)),
        constants=Constants(c=1e-2, lipschitz_k=max(2.0 * abs(b0), 1.0),
                            beta=beta_phi, alpha=0.5),
    )
    return dict(domain=ball([0.0], 1.0),
                sde=SdeSpec(drift=lambda x: np.full_like(x, b0),
                            diffusion=_const_diffusion(1.0, 1), lipschitz_k=1.0),
                coeffs=coeffs, grid=grid, start=(0.0, [0.0]),
                extras={"drift": b0, "beta_phi": beta_phi},
                field_x=(-1.0, 1.0, 21))


def _build_exp_noise_flow(params: dict) -> dict:
    """Backward-noise scenarios: constant field (conjugation checks), linear
    field (exact exponential flow) or z-linear field (fixed-point solves)."""
    _check_keys(params, {"name", "g_mode", "gamma", "sigma", "obstacle",
                         "f_slope", "z_coeff"},
                "exp_noise_flow coefficients")
    g_mode = params.get("g_mode", "constant")
    gamma = float(params.get("gamma", 0.3))
    sigma = float(params.get("sigma", 0.8))
    f_slope = float(params.get("f_slope", -0.2))
    z_coeff = float(params.get("z_coeff", 0.5))
    with_obstacle = bool(params.get("obstacle", True))
    grid = TimeGrid(0.0, 1.0, 64)
    t_end = grid.t_end

    obstacle = None
    if with_obstacle:
        obstacle = lambda t, x: 1.0 - 0.4 * t - 0.25 * x[:, 0] ** 2

    noise_g = None
    noise_g_z = None
    noise = None
    alpha = 0.5
    if g_mode == "constant":
        noise_g = lambda t, x, y: np.full(np.shape(y) + (1,), gamma)
        zero = lambda t, x, y: np.zeros(np.shape(y) + (1,))
        zero_x = lambda t, x, y: np.zeros(np.shape(y) + (1, np.shape(x)[-1]))
        noise = NoiseCoefficient(g=noise_g, d_y=zero, d_yy=zero, d_x=zero_x, d_xy=zero_x)
    elif g_mode == "linear":
        noise_g = lambda t, x, y: np.asarray(y)[..., None]
        one = lambda t, x, y: np.ones(np.shape(y) + (1,))
        zero = lambda t, x, y: np.zeros(np.shape(y) + (1,))
        zero_x = lambda t, x, y: np.zeros(np.shape(y) + (1, np.shape(x)[-1]))
        noise = NoiseCoefficient(g=noise_g, d_y=one, d_yy=zero, d_x=zero_x, d_xy=zero_x)
    elif g_mode == "z_linear":
        alpha = z_coeff ** 2
        noise_g_z = lambda t, x, y, z: (gamma + z_coeff * z[:, 0])[..., None]
    else:
        raise ValidationError(f"unknown g_mode {g_mode!r}")

    coeffs = CoefficientSet(
        terminal_l=lambda x: 1.0 + 0.25 * x[:, 0] ** 2,
        driver_f=lambda t, x, y, z: f_slope * y,
        boundary_phi=lambda t, x, y: 0.4 - 0.3 * y,
        noise_g=noise_g,
        noise_g_z=noise_g_z,
        obstacle_h=obstacle,
        constants=Constants(c=max(f_slope * f_slope, 1e-4), lipschitz_k=1.0,
                            beta=-0.3, alpha=alpha),
    )
    return dict(domain=ball([0.0], 1.0),
                sde=SdeSpec(drift=_zero_drift, diffusion=_const_diffusion(sigma, 1),
                            lipschitz_k=1.0),
                coeffs=coeffs, grid=grid, start=(0.0, [0.2]), noise=noise,
                extras={"g_mode": g_mode, "gamma": gamma, "sigma": sigma},
                field_x=(-1.0, 1.0, 11))


_BUILDERS = {
    "linear_fk": _build_linear_fk,
    "heat": _build_heat,
    "american_put": _build_american_put,
    "neumann_drift": _build_neumann_drift,
    "exp_noise_flow": _build_exp_noise_flow,
}


def build_scenario(name: str, params: dict | None = None, **overrides) -> Scenario:
    """Instantiate a built-in scenario by name with optional overrides."""
    if name not in _BUILDERS:
        raise ValidationError(f"unknown scenario {name!r}; "
                              f"built-ins: {sorted(_BUILDERS)}")
    parts = _BUILDERS[name](dict(params or {}))
    parts.setdefault("basis", RegressionBasis())
    parts.setdefault("noise", None)
    scenario = Scenario(name=name, **parts)
    for key, val in overrides.items():
        if not hasattr(scenario, key):
            raise ValidationError(f"unknown scenario override {key!r}")
        setattr(scenario, key, val)
    return scenario


_TOP_KEYS = {"name", "coefficients", "grid", "n_paths", "n_b_scenarios",
             "scheme", "seed", "basis", "field", "start", "constants", "out_dir"}


def scenario_from_config(cfg: dict) -> Scenario:
    """Build a Scenario from a JSON config document (strict keys)."""
    if not isinstance(cfg, dict):
        raise ValidationError("config must be a JSON object")
    _check_keys(cfg, _TOP_KEYS, "config")
    co = cfg.get("coefficients")
    if not isinstance(co, dict) or "name" not in co:
        raise ValidationError('config needs "coefficients": {"name": ...}')
    scenario = build_scenario(co["name"], co)
    if "grid" in cfg:
        g = cfg["grid"]
        _check_keys(g, {"t_start", "t_end", "n_steps"}, "grid")
        scenario.grid = TimeGrid(float(g.get("t_start", 0.0)), float(g["t_end"]),
                                 int(g["n_steps"]))
    if "n_paths" in cfg:
        n = int(cfg["n_paths"])
        if n < 2:
            raise ValidationError("n_paths must be at least 2")
        scenario.n_paths = n
    if "n_b_scenarios" in cfg:
        scenario.n_b_scenarios = int(cfg["n_b_scenarios"])
        if scenario.n_b_scenarios < 1:
            raise ValidationError("n_b_scenarios must be >= 1")
    if "scheme" in cfg:
        s = cfg["scheme"]
        _check_keys(s, {"kind", "n"}, "scheme")
        kind = s.get("kind")
        if kind == "penalized":
            if "n" not in s or float(s["n"]) < 0:
                raise ValidationError("penalized scheme needs a level n >= 0")
            scenario.scheme = ("penalized", float(s["n"]))
        elif kind in ("direct", "generalized"):
            scenario.scheme = kind
        else:
            raise ValidationError(f"unknown scheme kind {kind!r}")
    if "seed" in cfg:
        scenario.seed = int(cfg["seed"])
    if "basis" in cfg:
        b = cfg["basis"]
        _check_keys(b, {"degree", "include_obstacle", "knots", "quantile_knots"},
                    "basis")
        scenario.basis = RegressionBasis(
            degree=int(b.get("degree", 3)),
            include_obstacle=bool(b.get("include_obstacle", True)),
            knots=tuple(b["knots"]) if b.get("knots") else None,
            quantile_knots=int(b.get("quantile_knots", 0)))
    if "field" in cfg:
        f = cfg["field"]
        _check_keys(f, {"t_count", "x_min", "x_max", "x_count"}, "field")
        scenario.field_t_count = int(f.get("t_count", scenario.field_t_count))
        lo, hi, cnt = scenario.field_x
        scenario.field_x = (float(f.get("x_min", lo)), float(f.get("x_max", hi)),
                            int(f.get("x_count", cnt)))
    if "constants" in cfg:
        from dataclasses import replace as _replace
        c = cfg["constants"]
        _check_keys(c, {"c", "lipschitz_k", "beta", "alpha", "mu"}, "constants")
        base = scenario.coeffs.constants
        merged = Constants(c=float(c.get("c", base.c)),
                           lipschitz_k=float(c.get("lipschitz_k", base.lipschitz_k)),
                           beta=float(c.get("beta", base.beta)),
                           alpha=float(c.get("alpha", base.alpha)),
                           mu=float(c.get("mu", base.mu)))
        scenario.coeffs = _replace(scenario.coeffs, constants=merged)
    if "start" in cfg:
        s = cfg["start"]
        _check_keys(s, {"t", "x"}, "start")
        scenario.start = (float(s["t"]), list(map(float, np.atleast_1d(s["x"]))))
    if "name" in cfg:
        scenario.name = str(cfg["name"])
    scenario.extras["out_dir"] = cfg.get("out_dir")
    return scenario
