"""Smooth bounded domains: level function, inward normals, closest-point projection.

The domain is described by a level function ``psi`` with the convention
psi > 0 inside, psi = 0 on the boundary, psi < 0 outside; on the boundary
the normalized gradient of psi is the unit normal pointing into the domain.
Only balls and axis-aligned ellipsoids are supported, so projections and
normals are cheap and (for balls) exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

__all__ = ["Domain", "ball", "ellipsoid"]


@dataclass(frozen=True)
class Domain:
    """Ball or axis-aligned ellipsoid in R^d.

    For a ball, ``psi`` is the exact signed distance R - |x - c|.  For an
    ellipsoid with semi-axes a_i, ``psi(x) = 1 - sum(((x_i-c_i)/a_i)^2)`` is a
    smooth level function (not a distance), with the same sign convention.
    """

    kind: str
    center: np.ndarray
    radius: float = 0.0
    semi_axes: np.ndarray = field(default=None)

    def __post_init__(self):
        center = np.atleast_1d(np.asarray(self.center, dtype=float))
        object.__setattr__(self, "center", center)
        if self.kind == "ball":
            if not self.radius > 0:
                raise ValidationError("ball radius must be positive")
        elif self.kind == "ellipsoid":
            axes = np.atleast_1d(np.asarray(self.semi_axes, dtype=float))
            if axes.shape != center.shape or not np.all(axes > 0):
                raise ValidationError("semi_axes must be positive and match center")
            object.__setattr__(self, "semi_axes", axes)
        else:
            raise ValidationError(f"unknown domain kind {self.kind!r}")

    @property
    def dimension(self) -> int:
        return self.center.shape[0]

    @property
    def diameter(self) -> float:
        if self.kind == "ball":
            return 2.0 * self.radius
        return 2.0 * float(np.max(self.semi_axes))

    @property
    def boundary_tol(self) -> float:
        # "on the boundary" is tested as |psi| <= this (scaled to domain size)
        return 1e-8 * self.diameter

    # -- level function ------------------------------------------------

    def psi(self, x) -> np.ndarray:
        """Level function, vectorized over leading axes of x."""
        x = np.asarray(x, dtype=float)
        rel = x - self.center
        if self.kind == "ball":
            return self.radius - np.linalg.norm(rel, axis=-1)
        q = np.sum((rel / self.semi_axes) ** 2, axis=-1)
        return 1.0 - q

    def psi_gradient(self, x) -> np.ndarray:
        """Gradient of psi; for a ball this is the unit inward radial field."""
        x = np.asarray(x, dtype=float)
        rel = x - self.center
        if self.kind == "ball":
            norm = np.linalg.norm(rel, axis=-1, keepdims=True)
            norm = np.where(norm == 0.0, 1.0, norm)
            return -rel / norm
        return -2.0 * rel / self.semi_axes**2

    def inward_normal(self, x) -> np.ndarray:
        """Unit inward normal at a boundary point.

        Raises ValidationError when x is farther from the boundary than the
        boundary tolerance.
        """
        x = np.asarray(x, dtype=float)
        dist = np.abs(self._boundary_distance(x))
        if np.any(dist > self.boundary_tol):
            raise ValidationError(
                f"point not on the boundary (distance {np.max(dist):.3e} "
                f"> tol {self.boundary_tol:.3e})"
            )
        grad = self.psi_gradient(x)
        norm = np.linalg.norm(grad, axis=-1, keepdims=True)
        return grad / norm

    def _boundary_distance(self, x) -> np.ndarray:
        """Signed Euclidean distance proxy used by the boundary tolerance test."""
        if self.kind == "ball":
            return self.psi(x)
        _, dist = self.project_to_closure(x)
        inside = self.psi(x) >= 0.0
        # for inside points, distance to the boundary via radial scaling bound
        x = np.asarray(x, dtype=float)
        rel = x - self.center
        q = np.sqrt(np.sum((rel / self.semi_axes) ** 2, axis=-1))
        inner = (1.0 - q) * np.min(self.semi_axes)
        return np.where(inside, inner, -dist)

    def contains(self, x, tol: float = 0.0) -> np.ndarray:
        return self.psi(x) >= -tol

    # -- projection ----------------------------------------------------

    def project_to_closure(self, x):
        """Closest point of the closure and the Euclidean distance moved.

        Interior points are fixed points with distance 0. Vectorized over the
        leading axes of x.
        """
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        pts = np.atleast_2d(x)
        rel = pts - self.center
        if self.kind == "ball":
            norm = np.linalg.norm(rel, axis=-1)
            outside = norm > self.radius
            scale = np.where(outside, self.radius / np.where(norm == 0, 1.0, norm), 1.0)
            proj = self.center + rel * scale[:, None]
            dist = np.where(outside, norm - self.radius, 0.0)
        else:
            proj = pts.copy()
            dist = np.zeros(pts.shape[0])
            outside = self.psi(pts) < 0.0
            if np.any(outside):
                p, d = _project_ellipsoid(rel[outside], self.semi_axes)
                proj[outside] = self.center + p
                dist[outside] = d
        if single:
            return proj[0], float(dist[0])
        return proj, dist


def _project_ellipsoid(rel, axes):
    """Closest point on the ellipsoid boundary for exterior points.

    The stationarity condition p_i = rel_i * a_i^2 / (a_i^2 + lam) reduces the
    problem to a scalar root-find in the Lagrange multiplier lam > 0; the
    constraint function is monotone decreasing there, so bisection with a
    Newton polish is safe.  Solved vectorized to 1e-14 relative.
    """
    a2 = axes**2

    def constraint(lam):
        return np.sum(a2 * rel**2 / (a2 + lam[:, None]) ** 2, axis=-1) - 1.0

    lo = np.zeros(rel.shape[0])
    hi = np.full(rel.shape[0], np.max(axes) * (np.linalg.norm(rel, axis=-1) + np.max(axes)))
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        too_low = constraint(mid) > 0.0
        lo = np.where(too_low, mid, lo)
        hi = np.where(too_low, hi, mid)
        if np.max(hi - lo) <= 1e-15 * np.max(hi):
            break
    lam = 0.5 * (lo + hi)
    proj = rel * a2 / (a2 + lam[:, None])
    dist = np.linalg.norm(rel - proj, axis=-1)
    return proj, dist


def ball(center, radius: float) -> Domain:
    return Domain(kind="ball", center=center, radius=float(radius))


def ellipsoid(center, semi_axes) -> Domain:
    return Domain(kind="ellipsoid", center=center, semi_axes=semi_axes)
