import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rbdsde import ValidationError, ball, ellipsoid

from oracles import ellipse_closest_point


def test_psi_ball_center_boundary_exterior():
    dom = ball([0.0, 0.0], 1.0)
    assert dom.psi(np.zeros(2)) == pytest.approx(1.0)
    assert dom.psi(np.array([1.0, 0.0])) == pytest.approx(0.0, abs=1e-15)
    assert dom.psi(np.array([2.0, 0.0])) == pytest.approx(-1.0)


def test_inward_normal_ball_is_radial():
    dom = ball([0.0, 0.0], 1.0)
    np.testing.assert_allclose(dom.inward_normal(np.array([1.0, 0.0])),
                               [-1.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(dom.inward_normal(np.array([0.0, -1.0])),
                               [0.0, 1.0], atol=1e-12)


def test_inward_normal_rejects_off_boundary_points():
    dom = ball([0.0, 0.0], 1.0)
    with pytest.raises(ValidationError):
        dom.inward_normal(np.array([0.5, 0.0]))


def test_inward_normal_ellipse_matches_normalized_gradient():
    dom = ellipsoid([0.0, 0.0], [2.0, 1.0])
    # analytic gradient of the level function at (2, 0) is (-2*2/4, 0) = (-1, 0)
    np.testing.assert_allclose(dom.inward_normal(np.array([2.0, 0.0])),
                               [-1.0, 0.0], atol=1e-12)
    x = np.array([2.0 * np.cos(0.7), np.sin(0.7)])
    grad = -2.0 * x / np.array([4.0, 1.0])
    np.testing.assert_allclose(dom.inward_normal(x), grad / np.linalg.norm(grad),
                               atol=1e-9)


def test_projection_ball_trivial_cases():
    dom = ball([0.0, 0.0], 1.0)
    proj, dist = dom.project_to_closure(np.array([0.5, 0.0]))
    np.testing.assert_allclose(proj, [0.5, 0.0])
    assert dist == 0.0
    proj, dist = dom.project_to_closure(np.array([2.0, 0.0]))
    np.testing.assert_allclose(proj, [1.0, 0.0], atol=1e-14)
    assert dist == pytest.approx(1.0, abs=1e-12)


def test_projection_ellipse_against_mesh_oracle():
    dom = ellipsoid([0.0, 0.0], [2.0, 1.0])
    proj, dist = dom.project_to_closure(np.array([0.0, 2.0]))
    np.testing.assert_allclose(proj, [0.0, 1.0], atol=1e-10)
    assert dist == pytest.approx(1.0, abs=1e-10)
    rng = np.random.default_rng(3)
    for _ in range(12):
        x = rng.uniform(-4, 4, 2)
        if dom.psi(x) >= 0:
            continue
        proj, dist = dom.project_to_closure(x)
        ref_point, ref_dist = ellipse_closest_point([2.0, 1.0], x)
        assert dist == pytest.approx(ref_dist, abs=1e-7)
        np.testing.assert_allclose(proj, ref_point, atol=1e-5)


def test_projection_optimality_no_mesh_point_closer():
    dom = ellipsoid([0.5, -0.25], [2.0, 1.0])
    thetas = np.linspace(0, 2 * np.pi, 4000)
    boundary = np.column_stack([0.5 + 2.0 * np.cos(thetas),
                                -0.25 + np.sin(thetas)])
    rng = np.random.default_rng(11)
    for _ in range(8):
        x = rng.uniform(-5, 5, 2)
        if dom.psi(x) >= 0:
            continue
        _, dist = dom.project_to_closure(x)
        mesh_best = np.min(np.linalg.norm(boundary - x, axis=1))
        assert dist <= mesh_best + 1e-7


def test_sign_consistency_on_samples():
    dom = ellipsoid([1.0, 2.0, -1.0], [1.0, 2.0, 0.5])
    rng = np.random.default_rng(5)
    inside = dom.center + rng.uniform(-1, 1, (200, 3)) * dom.semi_axes * 0.95 / np.sqrt(3)
    assert np.all(dom.psi(inside) > 0)
    outside = dom.center + rng.uniform(1.5, 3.0, (200, 3)) * dom.semi_axes
    proj, _ = dom.project_to_closure(outside)
    assert np.max(np.abs(dom.psi(proj))) <= 1e-9


def test_normal_consistency_for_exterior_points():
    dom = ball([0.0, 0.0], 2.0)
    rng = np.random.default_rng(7)
    pts = rng.uniform(-6, 6, (50, 2))
    pts = pts[dom.psi(pts) < 0]
    proj, _ = dom.project_to_closure(pts)
    for x, p in zip(pts, proj):
        n = dom.inward_normal(p)
        assert np.dot(n, p - x) > 0


@settings(max_examples=60, deadline=None)
@given(st.floats(-50, 50), st.floats(-50, 50), st.floats(-50, 50))
def test_projection_idempotent(x0, x1, x2):
    dom = ellipsoid([0.0, 1.0, 0.0], [3.0, 1.0, 2.0])
    x = np.array([x0, x1, x2])
    once, _ = dom.project_to_closure(x)
    twice, moved = dom.project_to_closure(once)
    np.testing.assert_allclose(twice, once, atol=1e-9)
    assert moved <= 1e-9


def test_domain_validation():
    with pytest.raises(ValidationError):
        ball([0.0], -1.0)
    with pytest.raises(ValidationError):
        ellipsoid([0.0, 0.0], [1.0])
    with pytest.raises(ValidationError):
        from rbdsde.geometry import Domain
        Domain(kind="box", center=[0.0])
