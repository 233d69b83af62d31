"""Gridded multi-channel state fields, normalization and FLD1 persistence.

A state is a ``(channels, height, width)`` float64 array on a grid that is
periodic in x and clamped in y. :class:`StateTensor` pairs that array with
its channel names; the numerical modules work on the bare arrays.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"FLD1"


class FieldFormatError(ValueError):
    """File does not start with the FLD1 magic bytes."""


class FieldDimensionError(ValueError):
    """Header dimensions are inconsistent or violate grid invariants."""


class FieldTruncatedError(ValueError):
    """Payload is shorter than the header declares."""


@dataclass(frozen=True)
class Grid:
    height: int
    width: int
    x_periodic: bool = True

    def __post_init__(self):
        if self.height < 4 or self.width < 4:
            raise FieldDimensionError(
                f"grid must be at least 4x4 for bicubic stencils, got {self.height}x{self.width}"
            )


@dataclass(frozen=True)
class StateTensor:
    grid: Grid
    channels: tuple[str, ...]
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        channels = tuple(self.channels)
        if len(set(channels)) != len(channels):
            raise ValueError(f"channel names must be unique: {channels}")
        data = np.array(self.data, dtype=np.float64)
        expected = (len(channels), self.grid.height, self.grid.width)
        if data.shape != expected:
            raise FieldDimensionError(f"data shape {data.shape} does not match {expected}")
        if not np.all(np.isfinite(data)):
            raise ValueError("state values must be finite")
        data.flags.writeable = False
        object.__setattr__(self, "channels", channels)
        object.__setattr__(self, "data", data)

    @classmethod
    def from_array(cls, data, channels: Sequence[str] | None = None) -> "StateTensor":
        data = np.asarray(data, dtype=np.float64)
        if data.ndim != 3:
            raise FieldDimensionError(f"expected (C, H, W) array, got shape {data.shape}")
        if channels is None:
            channels = [f"c{i}" for i in range(data.shape[0])]
        return cls(Grid(data.shape[1], data.shape[2]), tuple(channels), data)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def with_data(self, data) -> "StateTensor":
        return StateTensor(self.grid, self.channels, data)

    def channel_index(self, name: str) -> int:
        try:
            return self.channels.index(name)
        except ValueError:
            raise KeyError(f"channel {name!r} not in state (have {list(self.channels)})") from None


@dataclass(frozen=True)
class NormStats:
    """Per-channel mean and standard deviation in native units."""

    mean: dict[str, float]
    std: dict[str, float]

    def __post_init__(self):
        for name, s in self.std.items():
            if not s > 0:
                raise ValueError(f"std for channel {name!r} must be positive, got {s}")

    @classmethod
    def from_states(cls, states: Sequence[StateTensor]) -> "NormStats":
        stack = np.stack([s.data for s in states])
        channels = states[0].channels
        mean = stack.mean(axis=(0, 2, 3))
        std = stack.std(axis=(0, 2, 3))
        return cls(
            {c: float(m) for c, m in zip(channels, mean)},
            {c: float(s) for c, s in zip(channels, std)},
        )

    def _vectors(self, channels):
        for c in channels:
            if c not in self.mean or c not in self.std:
                raise KeyError(f"normalization stats missing channel {c!r}")
        mean = np.array([self.mean[c] for c in channels])[:, None, None]
        std = np.array([self.std[c] for c in channels])[:, None, None]
        return mean, std


def normalize(state: StateTensor, stats: NormStats) -> StateTensor:
    mean, std = stats._vectors(state.channels)
    return state.with_data((state.data - mean) / std)


def denormalize(state: StateTensor, stats: NormStats) -> StateTensor:
    mean, std = stats._vectors(state.channels)
    return state.with_data(state.data * std + mean)


def save_field(state: StateTensor, path) -> None:
    """Write ``state`` in FLD1 format. Values are stored as float32."""
    c, h, w = state.shape
    parts = [MAGIC, struct.pack("<III", c, h, w)]
    for name in state.channels:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
    parts.append(state.data.astype("<f4").tobytes(order="C"))
    Path(path).write_bytes(b"".join(parts))


def load_field(path) -> StateTensor:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise FieldFormatError(f"{path}: bad magic {buf[:4]!r}")
    if len(buf) < 16:
        raise FieldTruncatedError(f"{path}: header truncated")
    c, h, w = struct.unpack_from("<III", buf, 4)
    if c == 0 or h < 4 or w < 4:
        raise FieldDimensionError(f"{path}: invalid dimensions C={c} H={h} W={w}")
    pos = 16
    names = []
    for _ in range(c):
        if pos + 2 > len(buf):
            raise FieldTruncatedError(f"{path}: channel table truncated")
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        if pos + n > len(buf):
            raise FieldTruncatedError(f"{path}: channel table truncated")
        names.append(buf[pos:pos + n].decode("utf-8"))
        pos += n
    nbytes = 4 * c * h * w
    if len(buf) - pos < nbytes:
        raise FieldTruncatedError(
            f"{path}: payload has {len(buf) - pos} bytes, header declares {nbytes}"
        )
    if len(buf) - pos > nbytes:
        raise FieldDimensionError(f"{path}: {len(buf) - pos - nbytes} trailing bytes after payload")
    data = np.frombuffer(buf, dtype="<f4", count=c * h * w, offset=pos).reshape(c, h, w)
    return StateTensor(Grid(h, w), tuple(names), data.astype(np.float64))
