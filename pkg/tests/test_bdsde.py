import numpy as np
import pytest

from rbdsde import (CoefficientSet, Constants, RegressionBasis, SdeSpec,
                    TimeGrid, ValidationError, ball, make_ensemble,
                    skorokhod_residual, solve_generalized, solve_penalized,
                    solve_reflected_direct)
from rbdsde.errors import RegressionError

from oracles import binomial_american_put


def _free_space(radius=10.0):
    dom = ball([0.0], radius)
    sde = SdeSpec(drift=lambda x: np.zeros_like(x),
                  diffusion=lambda x: np.ones((x.shape[0], 1, 1)),
                  lipschitz_k=1.0)
    return dom, sde


def _coeffs(f=None, phi=None, g=None, g_z=None, h=None, l=None, ell=1, **ckw):
    zero = lambda t, x, y: np.zeros_like(y)
    return CoefficientSet(
        terminal_l=l or (lambda x: x[:, 0] ** 2),
        driver_f=f or (lambda t, x, y, z: np.zeros_like(y)),
        boundary_phi=phi or zero,
        noise_g=g,
        noise_g_z=g_z,
        obstacle_h=h,
        ell=ell,
        constants=Constants(**({"c": 1e-4, "beta": -0.5, "alpha": 0.5} | ckw)),
    )


def _paths(n_paths=2000, n_steps=50, seed=0, ell=1, radius=10.0, x0=0.0, t_end=1.0):
    dom, sde = _free_space(radius)
    grid = TimeGrid(0.0, t_end, n_steps)
    return make_ensemble(dom, sde, (0.0, [x0]), grid, n_paths, ell, seed)


def test_constants_propagate_exactly_without_control_variate():
    paths = _paths(500, 40)
    coeffs = _coeffs(l=lambda x: np.full(x.shape[0], 3.0))
    sol = solve_generalized(coeffs, paths, RegressionBasis(degree=3),
                            control_variate=False)
    np.testing.assert_allclose(sol.y_values, 3.0, atol=1e-10)
    assert np.all(sol.k_values == 0.0)


def test_constants_propagate_with_control_variate_to_mc_tolerance():
    paths = _paths(4000, 50)
    coeffs = _coeffs(l=lambda x: np.full(x.shape[0], 3.0))
    sol = solve_generalized(coeffs, paths)
    # node means stay on the constant; per-path values carry the (unbiased)
    # control-variate refit noise, largest on tail paths
    np.testing.assert_allclose(sol.y_values.mean(axis=0), 3.0, atol=5e-3)
    assert np.mean(np.abs(sol.y_values - 3.0)) <= 2e-2
    # Z is pure regression noise around zero with rms ~ y sqrt(m / (n dt))
    n, m = 4000, 4
    noise_scale = 3.0 * np.sqrt(m / (n * paths.grid.dt))
    assert np.sqrt(np.mean(sol.z_values ** 2)) <= 2.0 * noise_scale
    assert abs(np.mean(sol.z_values)) <= 0.05


def test_constant_driver_gives_linear_ramp():
    rho = 0.7
    paths = _paths(400, 64)
    coeffs = _coeffs(f=lambda t, x, y, z: np.full_like(y, rho),
                     l=lambda x: np.zeros(x.shape[0]))
    sol = solve_generalized(coeffs, paths, control_variate=False)
    nodes = paths.grid.nodes
    expected = rho * (1.0 - nodes)
    np.testing.assert_allclose(sol.y_values.mean(axis=0), expected, atol=1e-10)


def test_backward_noise_telescoping_is_exact():
    gamma = np.array([0.4, -0.2])
    paths = _paths(300, 32, ell=2)
    coeffs = _coeffs(g=lambda t, x, y: np.broadcast_to(gamma, y.shape + (2,)),
                     l=lambda x: np.zeros(x.shape[0]), ell=2)
    sol = solve_generalized(coeffs, paths, control_variate=False)
    b_running = np.concatenate([np.zeros((1, 2)),
                                np.cumsum(paths.b_increments, axis=0)])
    expected = (b_running[-1] - b_running) @ gamma
    np.testing.assert_allclose(sol.y_values,
                               np.broadcast_to(expected, sol.y_values.shape),
                               atol=1e-10)


def test_terminal_condition_exact_and_y_frozen_before_start():
    dom, sde = _free_space()
    grid = TimeGrid(0.0, 1.0, 40)
    paths = make_ensemble(dom, sde, (0.5, [0.3]), grid, 500, 1, 7)
    coeffs = _coeffs(f=lambda t, x, y, z: 0.3 * y)
    sol = solve_generalized(coeffs, paths)
    np.testing.assert_array_equal(sol.y_values[:, -1],
                                  coeffs.terminal_l(paths.x_values[:, -1]))
    i0 = grid.index_of(0.5)
    for j in range(i0):
        np.testing.assert_array_equal(sol.y_values[:, j], sol.y_values[:, i0])


def test_linear_quadratic_feynman_kac_oracle():
    a = 0.25
    t_end = 0.5
    paths = _paths(5000, 50, seed=3, t_end=t_end)
    coeffs = _coeffs(f=lambda t, x, y, z: a * y, c=a * a)
    sol = solve_generalized(coeffs, paths)
    closed = np.exp(a * t_end) * (0.0 + t_end)
    assert abs(sol.y_start - closed) <= 3e-2


def test_penalized_zero_level_matches_generalized_bitwise():
    paths = _paths(800, 30, seed=2)
    coeffs = _coeffs(f=lambda t, x, y, z: 0.2 * y,
                     h=lambda t, x: x[:, 0] ** 2 - 1.0)
    pen = solve_penalized(coeffs, 0.0, paths)
    gen = solve_generalized(coeffs, paths)
    assert np.array_equal(pen.y_values, gen.y_values)
    assert np.array_equal(pen.z_values, gen.z_values)
    assert np.all(pen.k_values == 0.0)


def test_inactive_obstacle_leaves_solution_unchanged():
    paths = _paths(600, 25, seed=4)
    far = lambda t, x: np.full(x.shape[0], -1e6)
    coeffs = _coeffs(h=far)
    pen = solve_penalized(coeffs, 64.0, paths)       # implicit mode (n dt > cap)
    direct = solve_reflected_direct(coeffs, paths)
    gen = solve_generalized(coeffs, paths)
    assert np.all(pen.k_values == 0.0)
    assert np.all(direct.k_values == 0.0)
    assert np.array_equal(pen.y_values, gen.y_values)
    assert np.array_equal(direct.y_values, gen.y_values)


def test_stiffness_cap_enforced_when_implicit_disabled():
    paths = _paths(200, 20)
    coeffs = _coeffs(h=lambda t, x: np.zeros(x.shape[0]))
    with pytest.raises(ValidationError):
        solve_penalized(coeffs, 1000.0, paths, allow_implicit=False)


def _put_setup(n_paths, n_steps, seed):
    s0 = strike = 40.0
    rate, vol, t_end = 0.06, 0.2, 0.5
    dom = ball([150.0], 149.99)
    sde = SdeSpec(drift=lambda x: rate * x,
                  diffusion=lambda x: (vol * x)[:, :, None],
                  lipschitz_k=max(rate, vol))
    grid = TimeGrid(0.0, t_end, n_steps)
    paths = make_ensemble(dom, sde, (0.0, [s0]), grid, n_paths, 1, seed)
    payoff = lambda x: np.maximum(strike - x[:, 0], 0.0)
    coeffs = CoefficientSet(
        terminal_l=payoff,
        driver_f=lambda t, x, y, z: -rate * y,
        boundary_phi=lambda t, x, y: np.zeros_like(y),
        obstacle_h=lambda t, x: np.maximum(strike - x[:, 0], 0.0),
        constants=Constants(c=max(rate**2, 1e-6), lipschitz_k=max(rate, vol),
                            beta=-0.1, alpha=0.5))
    basis = RegressionBasis(degree=2, quantile_knots=8)
    tree = binomial_american_put(s0, strike, rate, vol, t_end, 2000)
    return coeffs, paths, basis, tree


def test_penalization_ladder_is_monotone_and_approaches_direct():
    coeffs, paths, basis, _ = _put_setup(8000, 50, seed=1)
    direct = solve_reflected_direct(coeffs, paths, basis)
    levels = [4.0, 16.0, 64.0, 256.0]
    y0 = []
    gaps = []
    resid = []
    for n in levels:
        sol = solve_penalized(coeffs, n, paths, basis)
        y0.append(sol.y_start)
        gaps.append(np.max(np.abs(sol.y_values - direct.y_values)))
        resid.append(skorokhod_residual(sol, coeffs, paths))
        se = sol.metadata["se_y_start"]
    for a, b in zip(y0, y0[1:]):
        assert b >= a - 3 * max(se, 1e-6)
    assert all(g1 > g2 for g1, g2 in zip(gaps, gaps[1:]))
    # complementarity residual: decreasing trend in n (n (Y-h)^- ~ 1/n tail)
    trend = np.polyfit(np.log(levels), np.log(resid), 1)[0]
    assert trend < 0 and resid[-1] < resid[0]
    assert np.all(np.diff(direct.k_values, axis=1) >= 0)


def test_direct_scheme_with_binding_deterministic_obstacle():
    # f = phi = g = 0, l = 0, obstacle T - t binds everywhere:
    # dynamic programming by hand gives Y_t = T - t and K_T = T
    paths = _paths(1000, 50)
    t_end = paths.grid.t_end
    coeffs = _coeffs(l=lambda x: np.zeros(x.shape[0]),
                     h=lambda t, x: np.full(x.shape[0], t_end - t))
    sol = solve_reflected_direct(coeffs, paths, control_variate=False)
    nodes = paths.grid.nodes
    np.testing.assert_allclose(sol.y_values.mean(axis=0), t_end - nodes, atol=1e-10)
    assert abs(np.mean(sol.k_values[:, -1]) - t_end) <= 1e-2
    # the default estimator stays within one time step of the hand value
    noisy = solve_reflected_direct(coeffs, paths)
    np.testing.assert_allclose(noisy.y_values.mean(axis=0), t_end - nodes,
                               atol=paths.grid.dt)


def test_skorokhod_residual_properties():
    coeffs, paths, basis, _ = _put_setup(4000, 50, seed=5)
    direct = solve_reflected_direct(coeffs, paths, basis)
    assert skorokhod_residual(direct, coeffs, paths) == 0.0
    pen = solve_penalized(coeffs, 16.0, paths, basis)
    assert skorokhod_residual(pen, coeffs, paths) > 0.0
    plain = _coeffs()
    with pytest.raises(ValidationError):
        skorokhod_residual(direct, plain, paths)


def test_obstacle_domination_exact_for_direct_scheme():
    coeffs, paths, basis, _ = _put_setup(3000, 40, seed=6)
    sol = solve_reflected_direct(coeffs, paths, basis)
    nodes = paths.grid.nodes
    for i in range(paths.grid.n_steps):
        gap = sol.y_values[:, i] - coeffs.obstacle_h(nodes[i], paths.x_values[:, i])
        assert np.min(gap) >= 0.0
    np.testing.assert_allclose(sol.k_values[:, -1],
                               np.sum(np.diff(sol.k_values, axis=1), axis=1),
                               atol=1e-12)


def test_measurability_residual_variance_small_at_point_start():
    paths = _paths(4000, 50)
    coeffs = _coeffs()
    sol = solve_generalized(coeffs, paths)
    resid_sd = sol.metadata["se_y_start"] * np.sqrt(paths.n_paths)
    terminal_sd = np.std(coeffs.terminal_l(paths.x_values[:, -1]))
    assert resid_sd <= 0.1 * terminal_sd


def test_rank_deficiency_reported_with_condition_number():
    paths = _paths(100, 10)
    bad = _coeffs(l=lambda x: np.full(x.shape[0], np.nan))
    with pytest.raises(RegressionError):
        solve_generalized(bad, paths)


def test_mismatched_grids_rejected():
    paths = _paths(100, 10)
    object.__setattr__(paths, "b_increments", np.zeros((9, 1)))
    with pytest.raises(ValidationError):
        solve_generalized(_coeffs(), paths)


def test_z_dependent_noise_requires_fixpoint_route():
    paths = _paths(100, 10)
    coeffs = _coeffs(g_z=lambda t, x, y, z: z[:, :1])
    with pytest.raises(ValidationError):
        solve_generalized(coeffs, paths)


def test_constants_validation_and_spot_checks():
    with pytest.raises(ValidationError):
        Constants(beta=0.1)
    with pytest.raises(ValidationError):
        Constants(alpha=1.5)
    with pytest.raises(ValidationError):
        Constants(c=-1.0)
    dom, _ = _free_space()
    grid = TimeGrid(0.0, 1.0, 10)
    bad_phi = _coeffs(phi=lambda t, x, y: 1.0 * y)  # increasing, violates beta < 0
    with pytest.raises(ValidationError):
        bad_phi.spot_check(dom, grid)
    bad_h = _coeffs(h=lambda t, x: x[:, 0] ** 2 + 1.0)  # h(T, x) > l(x)
    with pytest.raises(ValidationError):
        bad_h.spot_check(dom, grid)
    good = _coeffs(phi=lambda t, x, y: -0.6 * y,
                   h=lambda t, x: x[:, 0] ** 2 - 1.0)
    good.spot_check(dom, grid)
