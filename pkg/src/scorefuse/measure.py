"""Linear measurement operators and their exact adjoints.

Locations use normalized coordinates: a grid with ``n`` cells along an axis
has node ``i`` at ``(i + 0.5) / n``. Interpolation is bicubic convolution
(Keys kernel, ``a = -0.5``), wrapping in x and clamping to the edge in y.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .fields import StateTensor

KEYS_A = -0.5


def cubic_kernel(s, a: float = KEYS_A):
    s = np.abs(np.asarray(s, dtype=np.float64))
    near = ((a + 2) * s - (a + 3)) * s * s + 1
    far = ((a * s - 5 * a) * s + 8 * a) * s - 4 * a
    return np.where(s <= 1, near, np.where(s < 2, far, 0.0))


def _taps(coords, n: int, periodic: bool):
    """Stencil indices and weights, shape ``(len(coords), 4)``, for normalized coords."""
    pos = np.asarray(coords, dtype=np.float64) * n - 0.5
    base = np.floor(pos)
    frac = pos - base
    offsets = np.arange(-1, 3)
    idx = base.astype(np.int64)[:, None] + offsets
    w = cubic_kernel(frac[:, None] - offsets)
    if periodic:
        idx = np.mod(idx, n)
    else:
        idx = np.clip(idx, 0, n - 1)
    return idx, w


def interp_matrix(coords, n: int, periodic: bool) -> np.ndarray:
    """Dense 1-D interpolation matrix mapping ``n`` node values to ``coords``."""
    idx, w = _taps(coords, n, periodic)
    mat = np.zeros((len(idx), n))
    rows = np.repeat(np.arange(len(idx)), 4)
    np.add.at(mat, (rows, idx.ravel()), w.ravel())
    return mat


def cell_centers(n: int) -> np.ndarray:
    return (np.arange(n) + 0.5) / n


@dataclass(frozen=True)
class ObsVector:
    """Flat observations with a ``(channel, y_norm, x_norm)`` tag per entry."""

    values: np.ndarray
    channel: np.ndarray
    y_norm: np.ndarray
    x_norm: np.ndarray

    def __post_init__(self):
        n = len(self.values)
        if not (len(self.channel) == len(self.y_norm) == len(self.x_norm) == n):
            raise ValueError("observation layout length does not match values")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("observation values must be finite")

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True)
class PointSet:
    """Query locations ``(channel, x_norm, y_norm)``; duplicates are allowed."""

    channel: tuple[str, ...]
    x_norm: np.ndarray
    y_norm: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x_norm, dtype=np.float64)
        y = np.asarray(self.y_norm, dtype=np.float64)
        if not (len(self.channel) == len(x) == len(y)):
            raise ValueError("point set fields must have equal length")
        if np.any((x < 0) | (x >= 1)):
            raise ValueError("x_norm must lie in [0, 1)")
        if np.any((y < 0) | (y > 1)):
            raise ValueError("y_norm must lie in [0, 1]")
        object.__setattr__(self, "channel", tuple(self.channel))
        object.__setattr__(self, "x_norm", x)
        object.__setattr__(self, "y_norm", y)

    def __len__(self):
        return len(self.x_norm)


class MeasurementOp(Protocol):
    out_size: int

    def apply(self, x: np.ndarray) -> np.ndarray: ...

    def vjp(self, x: np.ndarray, cotangent: np.ndarray) -> np.ndarray: ...


class IdentityOp:
    """Observes every entry of the state."""

    def __init__(self, shape):
        self.shape = tuple(shape)
        self.out_size = int(np.prod(self.shape))

    def apply(self, x: np.ndarray) -> np.ndarray:
        if np.shape(x) != self.shape:
            raise ValueError(f"state shape {np.shape(x)} does not match operator {self.shape}")
        return np.ravel(x).copy()

    def vjp(self, x, cotangent) -> np.ndarray:
        cot = np.asarray(cotangent, dtype=np.float64)
        if cot.size != self.out_size:
            raise ValueError(f"cotangent length {cot.size} does not match output length {self.out_size}")
        return cot.reshape(self.shape).copy()


class CoarsenOp:
    """Bicubic resampling of every channel at coarse cell centers."""

    def __init__(self, shape, factor_y: int, factor_x: int):
        c, h, w = shape
        for f, n, axis in ((factor_y, h, "y"), (factor_x, w, "x")):
            if f < 2 or n % f:
                raise ValueError(f"coarsening factor {f} must be >= 2 and divide the {axis} size {n}")
        self.shape = (c, h, w)
        self.coarse_shape = (c, h // factor_y, w // factor_x)
        self.factors = (factor_y, factor_x)
        self._wy = interp_matrix(cell_centers(h // factor_y), h, periodic=False)
        self._wx = interp_matrix(cell_centers(w // factor_x), w, periodic=True)
        self.out_size = int(np.prod(self.coarse_shape))

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.apply_grid(x).ravel()

    def apply_grid(self, x: np.ndarray) -> np.ndarray:
        if np.shape(x) != self.shape:
            raise ValueError(f"state shape {np.shape(x)} does not match operator {self.shape}")
        return self._wy @ x @ self._wx.T

    def vjp(self, x, cotangent) -> np.ndarray:
        cot = np.asarray(cotangent, dtype=np.float64)
        if cot.size != self.out_size:
            raise ValueError(f"cotangent length {cot.size} does not match output length {self.out_size}")
        return self._wy.T @ cot.reshape(self.coarse_shape) @ self._wx

    def layout(self, values) -> ObsVector:
        c, hc, wc = self.coarse_shape
        ch, yy, xx = np.meshgrid(np.arange(c), cell_centers(hc), cell_centers(wc), indexing="ij")
        return ObsVector(np.asarray(values, dtype=np.float64).ravel(), ch.ravel(), yy.ravel(), xx.ravel())


class PointOp:
    """Bicubic evaluation of named channels at scattered points."""

    def __init__(self, shape, channels: Sequence[str], points: PointSet):
        if len(points) == 0:
            raise ValueError("point set is empty")
        c, h, w = shape
        channels = list(channels)
        missing = sorted(set(points.channel) - set(channels))
        if missing:
            raise KeyError(f"channel {missing[0]!r} not in state (have {channels})")
        self.shape = (c, h, w)
        self.points = points
        self.channel_idx = np.array([channels.index(name) for name in points.channel])
        iy, wy = _taps(points.y_norm, h, periodic=False)
        ix, wx = _taps(points.x_norm, w, periodic=True)
        flat = (self.channel_idx[:, None, None] * h + iy[:, :, None]) * w + ix[:, None, :]
        self._idx = flat.reshape(len(points), 16)
        self._w = (wy[:, :, None] * wx[:, None, :]).reshape(len(points), 16)
        self.out_size = len(points)

    def apply(self, x: np.ndarray) -> np.ndarray:
        if np.shape(x) != self.shape:
            raise ValueError(f"state shape {np.shape(x)} does not match operator {self.shape}")
        return np.sum(np.ravel(x)[self._idx] * self._w, axis=1)

    def vjp(self, x, cotangent) -> np.ndarray:
        cot = np.asarray(cotangent, dtype=np.float64)
        if cot.shape != (self.out_size,):
            raise ValueError(f"cotangent length {cot.size} does not match output length {self.out_size}")
        out = np.bincount(self._idx.ravel(), weights=(self._w * cot[:, None]).ravel(),
                          minlength=int(np.prod(self.shape)))
        return out.reshape(self.shape)

    def layout(self, values) -> ObsVector:
        return ObsVector(np.asarray(values, dtype=np.float64), self.channel_idx,
                         self.points.y_norm, self.points.x_norm)


def coarsen(state: StateTensor, factor_y: int, factor_x: int) -> ObsVector:
    op = CoarsenOp(state.shape, factor_y, factor_x)
    return op.layout(op.apply(state.data))


def sample_points(state: StateTensor, pts: PointSet) -> ObsVector:
    op = PointOp(state.shape, state.channels, pts)
    return op.layout(op.apply(state.data))


def op_vjp(op: MeasurementOp, state, cotangent) -> StateTensor | np.ndarray:
    """Transposed action of ``op``; returns the same kind of object as ``state``."""
    if isinstance(cotangent, ObsVector):
        cotangent = cotangent.values
    if isinstance(state, StateTensor):
        return state.with_data(op.vjp(state.data, cotangent))
    return op.vjp(state, cotangent)


def upsample(coarse: np.ndarray, fine_shape) -> np.ndarray:
    """Bicubic interpolation of a coarse ``(C, h, w)`` field onto fine cell centers."""
    _, h, w = fine_shape
    _, hc, wc = coarse.shape
    uy = interp_matrix(cell_centers(h), hc, periodic=False)
    ux = interp_matrix(cell_centers(w), wc, periodic=True)
    return uy @ np.asarray(coarse, dtype=np.float64) @ ux.T


def clustered_points(
    channels: Sequence[str],
    n_points: int,
    n_clusters: int,
    rng: np.random.Generator,
    spread: float = 0.06,
) -> PointSet:
    """Scattered sites bunched in a few blobs, mimicking land-only stations.

    Every site observes every channel, so the returned set has
    ``n_points * len(channels)`` entries.
    """
    centers = np.column_stack([rng.uniform(0, 1, n_clusters), rng.uniform(0.15, 0.85, n_clusters)])
    which = rng.integers(0, n_clusters, n_points)
    xs = np.mod(centers[which, 0] + spread * rng.standard_normal(n_points), 1.0)
    ys = np.clip(centers[which, 1] + spread * rng.standard_normal(n_points), 0.0, 1.0)
    xs = np.where(xs >= 1.0, 0.0, xs)
    ch = [c for c in channels for _ in range(n_points)]
    return PointSet(tuple(ch), np.tile(xs, len(channels)), np.tile(ys, len(channels)))


POINT_HEADER = ("time", "channel", "x_norm", "y_norm", "value", "sigma_y")


@dataclass(frozen=True)
class PointObservations:
    """Scattered observations valid at one time index."""

    time: int
    points: PointSet
    values: np.ndarray
    sigma_y: np.ndarray


def write_point_obs(path, records: Sequence[PointObservations]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh)
        out.writerow(POINT_HEADER)
        for rec in records:
            for ch, x, y, v, s in zip(rec.points.channel, rec.points.x_norm, rec.points.y_norm,
                                      rec.values, rec.sigma_y):
                out.writerow([rec.time, ch, repr(float(x)), repr(float(y)), repr(float(v)), repr(float(s))])


def read_point_obs(path) -> dict[int, PointObservations]:
    rows: dict[int, list] = {}
    with open(Path(path), newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader, ()))
        if header != POINT_HEADER:
            raise ValueError(f"{path}: expected header {','.join(POINT_HEADER)}, got {','.join(header)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 6:
                raise ValueError(f"{path}:{lineno}: expected 6 fields, got {len(row)}")
            rows.setdefault(int(row[0]), []).append(row[1:])
    out = {}
    for t, items in sorted(rows.items()):
        ch = tuple(r[0] for r in items)
        x, y, v, s = (np.array([float(r[i]) for r in items]) for i in range(1, 5))
        out[t] = PointObservations(t, PointSet(ch, x, y), v, s)
    return out
