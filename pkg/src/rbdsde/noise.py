"""Two-sided Brownian inputs on a shared uniform grid, plus discrete integrators.

A PathBundle carries the increments of the forward motion W (R^d) and the
backward motion B (R^ell) on one grid.  Generation is counter-based
(numpy Philox keyed by (seed, stream_id)), so any stream can be regenerated
bit-for-bit in any order and on any number of workers.

The one convention everything downstream depends on: the backward Ito
integral evaluates its integrand at the RIGHT node of each step.  The API
only accepts right-node samples, so the convention cannot silently drift.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import ValidationError

__all__ = [
    "TimeGrid",
    "PathBundle",
    "sample_bundle",
    "sample_noise_block",
    "backward_ito_integral",
    "backward_stratonovich_integral",
    "coarsen_bundle",
    "dump_bundle",
    "load_bundle",
]

# stream-id layout: high byte tags the purpose, the rest indexes it.  Keeps
# W-ensembles, B paths and ad-hoc bundles on provably disjoint Philox keys.
STREAM_KIND_GENERIC = 0
STREAM_KIND_W_BLOCK = 1
STREAM_KIND_B_PATH = 2


def stream_id(kind: int, index: int, replicate: int = 0) -> int:
    if not (0 <= index < 2**40 and 0 <= replicate < 2**16):
        raise ValidationError("stream index out of range")
    return (kind << 56) | (replicate << 40) | index


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_i = t_start + i*dt, i = 0..n_steps."""

    t_start: float
    t_end: float
    n_steps: int

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValidationError("n_steps must be >= 1")
        if not self.t_end > self.t_start:
            raise ValidationError("t_end must exceed t_start")

    @property
    def dt(self) -> float:
        return (self.t_end - self.t_start) / self.n_steps

    @cached_property
    def nodes(self) -> np.ndarray:
        return self.t_start + self.dt * np.arange(self.n_steps + 1)

    def index_of(self, t: float) -> int:
        """Index of the grid node equal to t (within dt*1e-9)."""
        pos = (t - self.t_start) / self.dt
        i = int(round(pos))
        if not (0 <= i <= self.n_steps) or abs(pos - i) > 1e-9 * max(1, self.n_steps):
            raise ValidationError(f"t={t} is not a grid node")
        return i


@dataclass(frozen=True)
class PathBundle:
    """One forward path W and one backward path B, as per-step increments."""

    grid: TimeGrid
    w_increments: np.ndarray  # (N, d)
    b_increments: np.ndarray  # (N, ell)
    seed: int
    stream_id: int

    def __post_init__(self):
        n = self.grid.n_steps
        if self.w_increments.shape[0] != n or self.b_increments.shape[0] != n:
            raise ValidationError("increment arrays must have n_steps rows")

    @property
    def d(self) -> int:
        return self.w_increments.shape[1]

    @property
    def ell(self) -> int:
        return self.b_increments.shape[1]


def _generator(seed: int, stream: int) -> np.random.Generator:
    key = np.array([seed % 2**64, stream % 2**64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def sample_bundle(grid: TimeGrid, d: int, ell: int, seed: int, stream_id: int) -> PathBundle:
    """Draw one (W, B) bundle; increments are N(0, dt) per component.

    Same (seed, stream_id) reproduces the same arrays bit-for-bit.
    """
    if d < 1 or ell < 1:
        raise ValidationError("d and ell must be >= 1")
    rng = _generator(seed, stream_id)
    sd = np.sqrt(grid.dt)
    w = rng.standard_normal((grid.n_steps, d)) * sd
    b = rng.standard_normal((grid.n_steps, ell)) * sd
    return PathBundle(grid=grid, w_increments=w, b_increments=b, seed=seed, stream_id=stream_id)


def sample_noise_block(grid: TimeGrid, d: int, n_paths: int, seed: int, stream: int) -> np.ndarray:
    """(n_paths, N, d) block of forward increments from a single keyed stream."""
    rng = _generator(seed, stream)
    return rng.standard_normal((n_paths, grid.n_steps, d)) * np.sqrt(grid.dt)


def _check_range(grid: TimeGrid, from_step: int, to_step: int):
    if not (0 <= from_step <= to_step <= grid.n_steps):
        raise ValidationError(f"step range [{from_step}, {to_step}) out of bounds")


def backward_ito_integral(values_at_right_nodes, bundle: PathBundle,
                          from_step: int = 0, to_step: int | None = None) -> float:
    """Discrete backward Ito integral sum_i <v(t_{i+1}), dB_i> over the step range.

    ``values_at_right_nodes[i]`` must be the integrand evaluated at node
    t_{i+1} (right endpoint of step i) -- the defining convention of the
    backward integral.
    """
    if to_step is None:
        to_step = bundle.grid.n_steps
    _check_range(bundle.grid, from_step, to_step)
    vals = np.asarray(values_at_right_nodes, dtype=float)
    if vals.ndim == 1:
        vals = vals[:, None]
    if vals.shape != bundle.b_increments.shape:
        raise ValidationError("integrand must have one row per step, ell columns")
    seg = slice(from_step, to_step)
    return float(np.sum(vals[seg] * bundle.b_increments[seg]))


def backward_stratonovich_integral(g, states, bundle: PathBundle,
                                   from_step: int = 0, to_step: int | None = None) -> float:
    """Discrete backward Stratonovich integral of g along a state path.

    ``states[i]`` is the state at node t_i (N+1 entries).  Each step
    contributes <g(t_mid, y_mid), dB_i> with y_mid the average of the
    right-node state and its left companion (the predictor when the path
    was produced by a midpoint solve).
    """
    if to_step is None:
        to_step = bundle.grid.n_steps
    _check_range(bundle.grid, from_step, to_step)
    states = np.asarray(states, dtype=float)
    if states.shape[0] != bundle.grid.n_steps + 1:
        raise ValidationError("states must be given at all N+1 nodes")
    nodes = bundle.grid.nodes
    total = 0.0
    for i in range(from_step, to_step):
        y_mid = 0.5 * (states[i] + states[i + 1])
        t_mid = 0.5 * (nodes[i] + nodes[i + 1])
        gi = np.atleast_1d(np.asarray(g(t_mid, y_mid), dtype=float))
        total += float(gi @ bundle.b_increments[i])
    return total


def coarsen_bundle(bundle: PathBundle, factor: int) -> PathBundle:
    """Same Brownian paths on a grid coarsened by an integer factor.

    Blocks of increments are summed, so the coarse bundle is the restriction
    of the same W and B to the coarser nodes (used by self-reference
    convergence tests).
    """
    n = bundle.grid.n_steps
    if factor < 1 or n % factor != 0:
        raise ValidationError("factor must divide n_steps")
    grid = TimeGrid(bundle.grid.t_start, bundle.grid.t_end, n // factor)
    w = bundle.w_increments.reshape(n // factor, factor, -1).sum(axis=1)
    b = bundle.b_increments.reshape(n // factor, factor, -1).sum(axis=1)
    return PathBundle(grid=grid, w_increments=w, b_increments=b,
                      seed=bundle.seed, stream_id=bundle.stream_id)


_MAGIC = b"RBDS"
_VERSION = 1


def dump_bundle(bundle: PathBundle, path) -> None:
    """Binary dump for cross-implementation replay.

    Layout (little endian): magic "RBDS", uint32 version, uint64 N, d, ell,
    seed, stream_id, float64 t_start, t_end, then the W block (N*d float64,
    row major) and the B block (N*ell float64, row major).
    """
    head = _MAGIC + struct.pack(
        "<IQQQQQdd", _VERSION, bundle.grid.n_steps, bundle.d, bundle.ell,
        bundle.seed % 2**64, bundle.stream_id % 2**64,
        bundle.grid.t_start, bundle.grid.t_end,
    )
    with open(path, "wb") as fh:
        fh.write(head)
        fh.write(bundle.w_increments.astype("<f8").tobytes(order="C"))
        fh.write(bundle.b_increments.astype("<f8").tobytes(order="C"))


def load_bundle(path) -> PathBundle:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _MAGIC:
        raise ValidationError("not a bundle dump (bad magic)")
    version, n, d, ell, seed, stream, t0, t1 = struct.unpack("<IQQQQQdd", raw[4:4 + 60])
    if version != _VERSION:
        raise ValidationError(f"unsupported dump version {version}")
    off = 4 + 60
    w = np.frombuffer(raw, dtype="<f8", count=n * d, offset=off).reshape(n, d).copy()
    off += 8 * n * d
    b = np.frombuffer(raw, dtype="<f8", count=n * ell, offset=off).reshape(n, ell).copy()
    grid = TimeGrid(t0, t1, int(n))
    return PathBundle(grid=grid, w_increments=w, b_increments=b,
                      seed=int(seed), stream_id=int(stream))
