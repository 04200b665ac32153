import numpy as np
import pytest

from rbdsde import (CoefficientSet, Constants, NoiseCoefficient, RangeError,
                    SdeSpec, TimeGrid, ValidationError, ball,
                    conversion_residual, invert_flow, sample_bundle,
                    solve_flow, transform_coefficients)
from rbdsde.doss import dump_flow_csv
from rbdsde.noise import coarsen_bundle

from oracles import lipschitz_slope


def _zero_g():
    z1 = lambda t, x, y: np.zeros(np.shape(y) + (1,))
    zx = lambda t, x, y: np.zeros(np.shape(y) + (1, np.shape(x)[-1]))
    return NoiseCoefficient(g=z1, d_y=z1, d_yy=z1, d_x=zx, d_xy=zx)


def _const_g(gamma):
    g = lambda t, x, y: np.full(np.shape(y) + (1,), gamma)
    z1 = lambda t, x, y: np.zeros(np.shape(y) + (1,))
    zx = lambda t, x, y: np.zeros(np.shape(y) + (1, np.shape(x)[-1]))
    return NoiseCoefficient(g=g, d_y=z1, d_yy=z1, d_x=zx, d_xy=zx)


def _linear_g():
    g = lambda t, x, y: np.asarray(y, dtype=float)[..., None]
    one = lambda t, x, y: np.ones(np.shape(y) + (1,))
    z1 = lambda t, x, y: np.zeros(np.shape(y) + (1,))
    zx = lambda t, x, y: np.zeros(np.shape(y) + (1, np.shape(x)[-1]))
    return NoiseCoefficient(g=g, d_y=one, d_yy=z1, d_x=zx, d_xy=zx)


def _b_running_tail(bundle):
    b = np.concatenate([[0.0], np.cumsum(bundle.b_increments[:, 0])])
    return b[-1] - b


def test_zero_field_gives_identity_flow():
    grid = TimeGrid(0.0, 1.0, 128)
    bundle = sample_bundle(grid, 1, 1, 0, 0)
    ys = np.linspace(-1, 1, 7)
    fld = solve_flow(_zero_g(), bundle, [[0.0]], ys)
    np.testing.assert_array_equal(fld.eta, np.broadcast_to(ys, fld.eta.shape))
    np.testing.assert_array_equal(fld.d_eta_dy, np.ones_like(fld.d_eta_dy))


def test_constant_field_is_exact_additive_shift():
    grid = TimeGrid(0.0, 1.0, 64)
    bundle = sample_bundle(grid, 1, 1, 3, 1)
    ys = np.linspace(-2, 2, 9)
    fld = solve_flow(_const_g(0.7), bundle, [[0.0]], ys)
    tail = _b_running_tail(bundle)
    expected = ys[None, None, :] + 0.7 * tail[:, None, None]
    np.testing.assert_allclose(fld.eta, expected, atol=1e-13)


def test_linear_field_matches_exponential_flow():
    grid = TimeGrid(0.0, 1.0, 2**12)
    bundle = sample_bundle(grid, 1, 1, 42, 7)
    ys = np.linspace(0.5, 2.0, 13)
    fld = solve_flow(_linear_g(), bundle, [[0.0]], ys)
    tail = _b_running_tail(bundle)
    exact = ys[None, None, :] * np.exp(tail)[:, None, None]
    rel = np.abs(fld.eta - exact) / np.abs(exact)
    assert np.max(rel) <= 1e-3
    # terminal identity exact and monotone conjugation everywhere
    np.testing.assert_array_equal(fld.eta[-1, 0], ys)
    assert np.all(np.diff(fld.eta, axis=2) > 0)
    assert np.min(fld.d_eta_dy) > 0


def test_inverse_of_exponential_flow_and_roundtrip():
    grid = TimeGrid(0.0, 1.0, 2**11)
    bundle = sample_bundle(grid, 1, 1, 5, 2)
    ys = np.linspace(0.25, 3.0, 23)
    fld = solve_flow(_linear_g(), bundle, [[0.0]], ys)
    tail = _b_running_tail(bundle)
    it = 512
    vq = np.array([0.8, 1.1, 1.9])
    eps = fld.invert(grid.nodes[it], np.zeros((3, 1)), vq)
    exact = vq * np.exp(-tail[it])
    np.testing.assert_allclose(eps, exact, rtol=2e-3)
    # roundtrip on tabulated samples
    inv = invert_flow(fld, fld.eta[it, 0], t_indices=[it])
    assert np.nanmax(np.abs(inv.values[0, 0] - ys)) <= 1e-8
    # out-of-range values are flagged per query, not raised
    out = invert_flow(fld, np.array([1e9]), t_indices=[it])
    assert not out.in_range[0, 0, 0]
    assert np.isnan(out.values[0, 0, 0])
    with pytest.raises(RangeError):
        fld.invert(grid.nodes[it], np.zeros((1, 1)), np.array([1e9]))


def test_variational_derivative_matches_finite_differences_at_order_two():
    # nonlinear field so eta is genuinely curved in y
    g = lambda t, x, y: (np.sin(y) + 1.2)[..., None]
    gy = lambda t, x, y: np.cos(y)[..., None]
    gyy = lambda t, x, y: (-np.sin(y))[..., None]
    zx = lambda t, x, y: np.zeros(np.shape(y) + (1, np.shape(x)[-1]))
    noise = NoiseCoefficient(g=g, d_y=gy, d_yy=gyy, d_x=zx, d_xy=zx)
    grid = TimeGrid(0.0, 1.0, 512)
    bundle = sample_bundle(grid, 1, 1, 9, 0)
    spacings, errors = [], []
    for n_y in (11, 21, 41, 81):
        ys = np.linspace(-1.0, 1.0, n_y)
        fld = solve_flow(noise, bundle, [[0.0]], ys)
        h = ys[1] - ys[0]
        fd = (fld.eta[:, :, 2:] - fld.eta[:, :, :-2]) / (2 * h)
        err = np.max(np.abs(fd - fld.d_eta_dy[:, :, 1:-1]))
        spacings.append(h)
        errors.append(err)
    slope = lipschitz_slope(spacings, errors)
    assert slope >= 1.8


def test_transform_is_identity_for_zero_field():
    grid = TimeGrid(0.0, 1.0, 64)
    bundle = sample_bundle(grid, 1, 1, 1, 1)
    ys = np.linspace(-3, 3, 25)
    fld = solve_flow(_zero_g(), bundle, [[0.0]], ys)
    coeffs = CoefficientSet(
        terminal_l=lambda x: x[:, 0] ** 2,
        driver_f=lambda t, x, y, z: 0.3 * y + 0.1 * z[:, 0],
        boundary_phi=lambda t, x, y: 0.5 - 0.2 * y,
        obstacle_h=lambda t, x: 0.3 - x[:, 0] ** 2,
        constants=Constants(c=0.1, beta=-0.2, alpha=0.5))
    tc = transform_coefficients(coeffs, fld)
    x = np.array([[0.0], [0.1]])
    y = np.array([0.5, -0.4])
    z = np.array([[0.2], [-0.1]])
    t = 0.25
    np.testing.assert_allclose(tc.driver_f(t, x, y, z),
                               coeffs.driver_f(t, x, y, z), atol=1e-10)
    np.testing.assert_allclose(tc.boundary_phi(t, x, y),
                               coeffs.boundary_phi(t, x, y), atol=1e-10)
    np.testing.assert_allclose(tc.obstacle_h(t, x), coeffs.obstacle_h(t, x),
                               atol=1e-8)


def test_transform_constant_field_all_corrections_vanish():
    grid = TimeGrid(0.0, 1.0, 64)
    bundle = sample_bundle(grid, 1, 1, 2, 3)
    ys = np.linspace(-4, 4, 33)
    gamma = 0.6
    fld = solve_flow(_const_g(gamma), bundle, [[0.0]], ys)
    coeffs = CoefficientSet(
        terminal_l=lambda x: x[:, 0],
        driver_f=lambda t, x, y, z: np.zeros_like(y),
        boundary_phi=lambda t, x, y: np.zeros_like(y),
        constants=Constants(c=0.1, beta=-0.2, alpha=0.5))
    tc = transform_coefficients(coeffs, fld)
    x = np.zeros((3, 1))
    y = np.array([-1.0, 0.0, 1.0])
    z = np.zeros((3, 1))
    np.testing.assert_allclose(tc.driver_f(0.3, x, y, z), 0.0, atol=1e-12)


def test_transform_linear_field_driver_correction():
    # for g(y) = y the only surviving correction at z = 0 is -(g D_y g)/(2 D_y eta)
    # with eta = y e^c and D_y eta = e^c, i.e. exactly -y/2
    grid = TimeGrid(0.0, 1.0, 2**11)
    bundle = sample_bundle(grid, 1, 1, 11, 4)
    ys = np.linspace(0.25, 3.0, 45)
    fld = solve_flow(_linear_g(), bundle, [[0.0]], ys)
    coeffs = CoefficientSet(
        terminal_l=lambda x: x[:, 0],
        driver_f=lambda t, x, y, z: np.zeros_like(y),
        boundary_phi=lambda t, x, y: np.zeros_like(y),
        constants=Constants(c=0.1, beta=-0.2, alpha=0.5))
    tc = transform_coefficients(coeffs, fld)
    x = np.zeros((4, 1))
    y = np.array([0.5, 1.0, 1.5, 2.0])
    z = np.zeros((4, 1))
    np.testing.assert_allclose(tc.driver_f(0.4, x, y, z), -0.5 * y, rtol=3e-3)


def test_conversion_residual_trivial_and_order():
    grid = TimeGrid(0.0, 1.0, 2**12)
    bundle = sample_bundle(grid, 1, 1, 21, 5)
    assert conversion_residual(_const_g(0.8), bundle) == 0.0
    zero_bundle = coarsen_bundle(bundle, 4)
    object.__setattr__(zero_bundle, "b_increments", np.zeros_like(zero_bundle.b_increments))
    assert conversion_residual(_linear_g(), zero_bundle) == 0.0
    r_coarse = [conversion_residual(_linear_g(), coarsen_bundle(
        sample_bundle(grid, 1, 1, s, 5), 4)) for s in range(16)]
    r_fine = [conversion_residual(_linear_g(), sample_bundle(grid, 1, 1, s, 5))
              for s in range(16)]
    ratio = np.mean(r_coarse) / np.mean(r_fine)
    assert 2.0 <= ratio <= 8.0  # ~4x drop for a 4x finer grid


def test_flow_multidimensional_noise_warns():
    grid = TimeGrid(0.0, 1.0, 32)
    bundle = sample_bundle(grid, 1, 2, 0, 0)
    g = lambda t, x, y: np.stack([np.ones_like(y), 0 * y], axis=-1)
    noise = NoiseCoefficient(g=g, ell=2)
    with pytest.warns(UserWarning):
        solve_flow(noise, bundle, [[0.0]], np.linspace(-1, 1, 5))


def test_eval_range_guards():
    grid = TimeGrid(0.0, 1.0, 32)
    bundle = sample_bundle(grid, 1, 1, 0, 0)
    fld = solve_flow(_const_g(0.1), bundle, [[0.0]], np.linspace(-1, 1, 9))
    with pytest.raises(RangeError):
        fld.eval("eta", 0.5, np.zeros((1, 1)), np.array([5.0]))
    with pytest.raises(RangeError):
        fld.eval("eta", 2.5, np.zeros((1, 1)), np.array([0.0]))


def test_flow_csv_dump(tmp_path):
    grid = TimeGrid(0.0, 1.0, 4)
    bundle = sample_bundle(grid, 1, 1, 0, 0)
    fld = solve_flow(_const_g(0.3), bundle, [[0.0]], np.linspace(0, 1, 3))
    out = tmp_path / "flow.csv"
    dump_flow_csv(fld, out)
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "t,x_1,y,eta,d_eta_dy"
    assert len(lines) == 1 + 5 * 1 * 3
