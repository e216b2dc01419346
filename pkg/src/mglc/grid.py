"""Regular state-space grids, three-channel field containers and the [-1, 1] codec."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, FitError, ShapeError

N_CHANNELS = 3
F_CHANNELS = (True, True, False)


@dataclass(frozen=True)
class GridSpec:
    x_min: float = -4.0
    x_max: float = 4.0
    y_min: float = -4.0
    y_max: float = 4.0
    resolution: int = 32

    def __post_init__(self):
        vals = (self.x_min, self.x_max, self.y_min, self.y_max)
        if not all(np.isfinite(v) for v in vals):
            raise ConfigError(f"grid bounds must be finite, got {vals}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ConfigError(f"grid bounds must be increasing, got {vals}")
        if int(self.resolution) != self.resolution or self.resolution < 4:
            raise ConfigError(f"grid resolution must be an integer >= 4, got {self.resolution}")
        if not (self.x_min < 0 < self.x_max and self.y_min < 0 < self.y_max):
            raise ConfigError("the origin must lie strictly inside the grid domain")

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / (self.resolution - 1)

    @property
    def dy(self) -> float:
        return (self.y_max - self.y_min) / (self.resolution - 1)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.resolution, self.resolution)

    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        g = self.resolution
        xs = self.x_min + np.arange(g) * self.dx
        ys = self.y_min + np.arange(g) * self.dy
        # pin the far endpoints so they are exact
        xs[-1] = self.x_max
        ys[-1] = self.y_max
        return xs, ys

    def to_dict(self) -> dict:
        return {
            "x_min": self.x_min,
            "x_max": self.x_max,
            "y_min": self.y_min,
            "y_max": self.y_max,
            "resolution": self.resolution,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(float(d["x_min"]), float(d["x_max"]), float(d["y_min"]), float(d["y_max"]), int(d["resolution"]))


def make_grid(spec: GridSpec) -> np.ndarray:
    """Grid points as a (G*G, 2) array in row-major order.

    Row ``i`` indexes y and column ``j`` indexes x, so point ``i*G + j`` is
    ``(x_min + j*dx, y_min + i*dy)``.
    """
    if not isinstance(spec, GridSpec):
        raise ConfigError(f"expected GridSpec, got {type(spec).__name__}")
    xs, ys = spec.axes()
    xx, yy = np.meshgrid(xs, ys, indexing="xy")
    return np.stack([xx.ravel(), yy.ravel()], axis=-1)


@dataclass(frozen=True, eq=False)
class GridField:
    """Channels (f1, f2, V) sampled on a grid, stored as a (3, G, G) array."""

    spec: GridSpec
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        g = self.spec.resolution
        if data.shape != (N_CHANNELS, g, g):
            raise ShapeError(f"field data must have shape (3, {g}, {g}), got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("field contains non-finite entries")
        data = data.copy()
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @classmethod
    def from_channels(cls, spec: GridSpec, f1, f2, v) -> "GridField":
        g = spec.resolution
        chans = [np.asarray(c, dtype=np.float64).reshape(g, g) for c in (f1, f2, v)]
        return cls(spec, np.stack(chans))

    @property
    def f1(self) -> np.ndarray:
        return self.data[0]

    @property
    def f2(self) -> np.ndarray:
        return self.data[1]

    @property
    def V(self) -> np.ndarray:
        return self.data[2]

    def with_channel(self, c: int, values) -> "GridField":
        data = np.array(self.data, dtype=np.float64)
        data[c] = np.asarray(values).reshape(self.spec.shape)
        return GridField(self.spec, data)

    def __eq__(self, other):
        if not isinstance(other, GridField):
            return NotImplemented
        return self.spec == other.spec and np.array_equal(self.data, other.data)


@dataclass(frozen=True)
class NormCodec:
    """Per-channel affine map ``raw -> (raw - offset) / scale``."""

    scale: tuple[float, float, float]
    offset: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if len(self.scale) != N_CHANNELS or len(self.offset) != N_CHANNELS:
            raise ConfigError("codec needs exactly three scales and offsets")
        if not all(np.isfinite(s) and s > 0 for s in self.scale):
            raise ConfigError(f"codec scales must be positive, got {self.scale}")

    def _sv(self):
        s = np.asarray(self.scale, dtype=np.float64).reshape(3, 1, 1)
        o = np.asarray(self.offset, dtype=np.float64).reshape(3, 1, 1)
        return s, o

    def encode_array(self, raw: np.ndarray) -> np.ndarray:
        s, o = self._sv()
        return (np.asarray(raw, dtype=np.float64) - o) / s

    def decode_array(self, enc: np.ndarray) -> np.ndarray:
        s, o = self._sv()
        return np.asarray(enc, dtype=np.float64) * s + o

    def to_dict(self) -> dict:
        return {"scale": list(self.scale), "offset": list(self.offset)}

    @classmethod
    def from_dict(cls, d: dict) -> "NormCodec":
        return cls(tuple(float(v) for v in d["scale"]), tuple(float(v) for v in d["offset"]))


def fit_codec(records: Iterable[GridField]) -> NormCodec:
    """Global max-abs scale per channel with zero offset."""
    peak = np.zeros(N_CHANNELS)
    n = 0
    for rec in records:
        data = np.asarray(rec.data if isinstance(rec, GridField) else rec, dtype=np.float64)
        if not np.all(np.isfinite(data)):
            raise FitError("cannot fit codec on non-finite field values")
        peak = np.maximum(peak, np.abs(data).reshape(N_CHANNELS, -1).max(axis=1))
        n += 1
    if n == 0:
        raise FitError("cannot fit codec on an empty collection")
    if np.any(peak == 0):
        raise FitError(f"channel(s) {np.flatnonzero(peak == 0).tolist()} are identically zero")
    return NormCodec(tuple(float(p) for p in peak))


def encode(f: GridField, codec: NormCodec) -> GridField:
    return GridField(f.spec, codec.encode_array(f.data))


def decode(f: GridField, codec: NormCodec) -> GridField:
    return GridField(f.spec, codec.decode_array(f.data))


def field_distance(a: GridField, b: GridField, channel_mask: Sequence[bool] = (True, True, True)) -> float:
    """Squared Euclidean distance over the selected channels."""
    if a.spec != b.spec:
        raise ShapeError("fields live on different grids")
    mask = np.asarray(channel_mask, dtype=bool)
    if mask.shape != (N_CHANNELS,):
        raise ShapeError("channel mask must have three entries")
    diff = (a.data - b.data)[mask]
    return float(np.sum(diff * diff))
