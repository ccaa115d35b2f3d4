"""Dense grid containers, the ``MDG1`` binary grid format and PPM export."""

from __future__ import annotations

import colorsys
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

GRID_MAGIC = b"MDG1"
_HEADER = struct.Struct("<4sII")

# red, blue, green, yellow
BASE_PALETTE = ((255, 0, 0), (0, 0, 255), (0, 255, 0), (255, 255, 0))
NAN_COLOR = (255, 0, 255)


class GridFormatError(ValueError):
    """Raised when a file is not a well-formed ``MDG1`` grid."""


class GridIOError(OSError):
    """I/O failure while reading or writing a grid; carries the path."""

    def __init__(self, path, cause):
        super().__init__(f"{path}: {cause}")
        self.path = Path(path)
        self.cause = cause


@dataclass(frozen=True)
class Grid:
    """H x W field of float64 values stored row-major.

    ``masked`` grids may hold NaN to mark invalid pixels; plain grids must
    be finite everywhere.
    """

    data: np.ndarray
    masked: bool = False

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"grid data must be a non-empty 2-D array, got shape {arr.shape}")
        if not self.masked and not np.isfinite(arr).all():
            raise ValueError("non-finite value in an unmasked grid")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]


@dataclass(frozen=True)
class GridStack:
    """K channel grids sharing one height/width, stored as a (K, H, W) array."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float64)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"grid stack must be a non-empty 3-D array, got shape {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def channels(self):
        return self.data.shape[0]

    def channel(self, k):
        return Grid(self.data[k], masked=True)


@dataclass(frozen=True)
class MaskGrid:
    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=bool)
        if arr.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)


def _as_array(grid):
    return grid.data if isinstance(grid, (Grid, GridStack, MaskGrid)) else np.asarray(grid)


def write_grid(grid, path):
    """Write a 2-D grid as ``MDG1``: magic, u32 height, u32 width, f64 LE data."""
    arr = np.asarray(_as_array(grid), dtype="<f8")
    if arr.ndim != 2:
        raise ValueError(f"write_grid expects a 2-D grid, got shape {arr.shape}")
    h, w = arr.shape
    payload = _HEADER.pack(GRID_MAGIC, h, w) + np.ascontiguousarray(arr).tobytes()
    try:
        Path(path).write_bytes(payload)
    except OSError as exc:
        raise GridIOError(path, exc) from exc


def read_grid(path, masked=True):
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise GridIOError(path, exc) from exc
    if len(raw) < _HEADER.size:
        raise GridFormatError(f"{path}: file too short for header ({len(raw)} bytes)")
    magic, h, w = _HEADER.unpack_from(raw)
    if magic != GRID_MAGIC:
        raise GridFormatError(f"{path}: bad magic {magic!r}")
    expected = h * w * 8
    actual = len(raw) - _HEADER.size
    if actual != expected:
        raise GridFormatError(f"{path}: expected {expected} payload bytes, found {actual}")
    data = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).reshape(h, w).astype(np.float64)
    return Grid(data, masked=masked)


def palette(k):
    """Fixed expert colours: the four base colours, then evenly spaced hues."""
    colors = list(BASE_PALETTE[: min(k, 4)])
    extra = k - len(colors)
    for i in range(extra):
        r, g, b = colorsys.hsv_to_rgb((i + 0.5) / extra, 1.0, 1.0)
        colors.append((round(255 * r), round(255 * g), round(255 * b)))
    return np.array(colors, dtype=np.float64)


def _write_ppm(rgb, path):
    h, w, _ = rgb.shape
    payload = f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(rgb, dtype=np.uint8).tobytes()
    try:
        Path(path).write_bytes(payload)
    except OSError as exc:
        raise GridIOError(path, exc) from exc


def render_rgb(grids, mode):
    """Build the (H, W, 3) uint8 image that :func:`export_color_image` writes."""
    arr = np.asarray(_as_array(grids), dtype=np.float64)
    if mode == "depth-colormap":
        if arr.ndim == 3:
            if arr.shape[0] != 1:
                raise ValueError("depth-colormap needs a single grid")
            arr = arr[0]
        valid = np.isfinite(arr)
        level = np.full(arr.shape, 0.5)
        if valid.any():
            lo, hi = arr[valid].min(), arr[valid].max()
            if hi > lo:
                level = (arr - lo) / (hi - lo)
        gray = np.rint(255.0 * np.where(valid, level, 0.0))
        rgb = np.repeat(gray[..., None], 3, axis=2)
        rgb[~valid] = NAN_COLOR
        return rgb.astype(np.uint8)

    if mode not in ("gate-argmax", "gate-blend"):
        raise ValueError(f"unknown export mode {mode!r}")
    if arr.ndim == 2:
        arr = arr[None]
    sums = arr.sum(axis=0)
    if not np.all(np.abs(sums - 1.0) <= 1e-6):
        raise ValueError("gate weights must sum to 1 per pixel within 1e-6")
    colors = palette(arr.shape[0])
    if mode == "gate-argmax":
        rgb = colors[np.argmax(arr, axis=0)]
    else:
        rgb = np.tensordot(arr, colors, axes=(0, 0))
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def export_color_image(grids, mode, path):
    """Write a binary PPM (P6) visualisation.

    ``mode`` is one of ``depth-colormap`` (grayscale over [min, max], a
    constant grid renders mid-gray), ``gate-argmax`` (palette colour of the
    dominant expert) or ``gate-blend`` (weight-averaged palette colour).
    """
    _write_ppm(render_rgb(grids, mode), path)
