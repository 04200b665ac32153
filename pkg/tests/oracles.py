"""Independent reference computations used by the tests.

These are deliberately implemented with different methods than the library
(trees, quadrature, dense boundary meshes), so agreement is evidence rather
than tautology.
"""

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.optimize import minimize_scalar


def binomial_american_put(s0, strike, rate, vol, maturity, steps):
    """Cox-Ross-Rubinstein tree price of an American put."""
    dt = maturity / steps
    up = np.exp(vol * np.sqrt(dt))
    down = 1.0 / up
    disc = np.exp(-rate * dt)
    p_up = (np.exp(rate * dt) - down) / (up - down)
    j = np.arange(steps + 1)
    prices = s0 * up ** (steps - j) * down ** j
    value = np.maximum(strike - prices, 0.0)
    for i in range(steps - 1, -1, -1):
        prices = s0 * up ** (i - np.arange(i + 1)) * down ** np.arange(i + 1)
        value = disc * (p_up * value[:-1] + (1.0 - p_up) * value[1:])
        value = np.maximum(value, strike - prices)
    return float(value[0])


def heat_smoothing(terminal, x, tau, sigma, quad_points=80):
    """Gauss-Hermite quadrature of terminal(x + sigma*sqrt(tau)*Z), Z ~ N(0,1)."""
    nodes, weights = hermegauss(quad_points)
    weights = weights / np.sqrt(2.0 * np.pi)
    shifted = np.asarray(x)[..., None] + sigma * np.sqrt(tau) * nodes
    return np.sum(terminal(shifted) * weights, axis=-1)


def ellipse_closest_point(semi_axes, point, mesh=200001):
    """Closest boundary point of a 2-D ellipse by dense parameter search
    refined with a bounded scalar minimization."""
    a, b = semi_axes
    px, py = point

    def dist2(theta):
        return (a * np.cos(theta) - px) ** 2 + (b * np.sin(theta) - py) ** 2

    thetas = np.linspace(0.0, 2.0 * np.pi, mesh)
    best = thetas[np.argmin(dist2(thetas))]
    span = 2.0 * np.pi / (mesh - 1)
    res = minimize_scalar(dist2, bounds=(best - 2 * span, best + 2 * span),
                          method="bounded", options={"xatol": 1e-14})
    theta = res.x
    closest = np.array([a * np.cos(theta), b * np.sin(theta)])
    return closest, float(np.sqrt(dist2(theta)))


def lipschitz_slope(xs, ys):
    """Least-squares slope of log ys against log xs."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    return float(np.polyfit(np.log(xs), np.log(ys), 1)[0])
