"""Raster containers and the windowed/elementwise primitives shared by every
other module: min filter, same-size average pooling, binary entropy, PNG I/O.

All rasters are stored row-major as float64 in [0, 1] (when unit-range) and
every windowed operation handles borders by clamp-to-edge replication, so a
window that sticks out of the image re-reads the nearest edge sample.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image
from scipy.ndimage import minimum_filter

LN2 = float(np.log(2.0))

# Above this many window-element reads, avg_pool_same switches from direct
# window summation to an integral image to keep large inputs fast.
_DIRECT_BOX_LIMIT = 20_000_000


def _readonly(a: np.ndarray) -> np.ndarray:
    out = np.asarray(a, dtype=np.float64)
    if out.base is not None or out.flags.writeable:
        out = out.copy()
    out.flags.writeable = False
    return out


def _require_odd(k: int) -> None:
    if not isinstance(k, (int, np.integer)) or k < 1 or k % 2 == 0:
        raise ValueError(f"window size must be a positive odd integer, got {k!r}")


@dataclass(frozen=True)
class GrayMap:
    """A single-channel raster of float64 samples, immutable once built."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2 or arr.size == 0:
            raise ValueError(f"GrayMap needs a non-empty 2-D array, got shape {arr.shape}")
        object.__setattr__(self, "data", _readonly(arr))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @classmethod
    def full(cls, height: int, width: int, value: float) -> "GrayMap":
        return cls(np.full((height, width), float(value)))

    @classmethod
    def zeros(cls, height: int, width: int) -> "GrayMap":
        return cls.full(height, width, 0.0)

    def is_unit_range(self, tol: float = 0.0) -> bool:
        return bool(self.data.min() >= -tol and self.data.max() <= 1.0 + tol)

    def clipped01(self) -> "GrayMap":
        return GrayMap(np.clip(self.data, 0.0, 1.0))


@dataclass(frozen=True)
class ImageRGB:
    """Three equally sized unit-range channels."""

    r: GrayMap
    g: GrayMap
    b: GrayMap

    def __post_init__(self):
        shapes = {self.r.shape, self.g.shape, self.b.shape}
        if len(shapes) != 1:
            raise ValueError(f"channel shapes differ: {shapes}")

    @property
    def height(self) -> int:
        return self.r.height

    @property
    def width(self) -> int:
        return self.r.width

    @property
    def channels(self) -> tuple[GrayMap, GrayMap, GrayMap]:
        return (self.r, self.g, self.b)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "ImageRGB":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"expected an (H, W, 3) array, got shape {arr.shape}")
        return cls(GrayMap(arr[:, :, 0]), GrayMap(arr[:, :, 1]), GrayMap(arr[:, :, 2]))

    def to_array(self) -> np.ndarray:
        return np.stack([self.r.data, self.g.data, self.b.data], axis=2)

    def intensity(self) -> GrayMap:
        return GrayMap((self.r.data + self.g.data + self.b.data) / 3.0)


def as_gray_array(obj) -> np.ndarray:
    """Accept a GrayMap or a bare 2-D array and return the float64 samples."""
    if isinstance(obj, GrayMap):
        return obj.data
    arr = np.asarray(obj, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D raster, got shape {arr.shape}")
    return arr


def min_filter(m: GrayMap, k: int) -> GrayMap:
    """Windowed minimum: output(m) = min over the k x k window centered at m."""
    _require_odd(k)
    return GrayMap(minimum_filter(m.data, size=k, mode="nearest"))


def _box_mean(a: np.ndarray, k: int) -> np.ndarray:
    pad = k // 2
    p = np.pad(a, pad, mode="edge")
    if a.size * k * k <= _DIRECT_BOX_LIMIT:
        win = sliding_window_view(p, (k, k))
        return win.mean(axis=(2, 3))
    s = np.zeros((p.shape[0] + 1, p.shape[1] + 1))
    s[1:, 1:] = p.cumsum(axis=0).cumsum(axis=1)
    total = s[k:, k:] - s[:-k, k:] - s[k:, :-k] + s[:-k, :-k]
    return total / float(k * k)


def avg_pool_same(m: GrayMap, k: int) -> GrayMap:
    """Stride-1 average pooling with clamp-to-edge borders (output same size)."""
    _require_odd(k)
    return GrayMap(_box_mean(m.data, k))


def box_mean(a: np.ndarray, k: int) -> np.ndarray:
    """Raw-array box mean with the same border policy as avg_pool_same."""
    _require_odd(k)
    return _box_mean(np.asarray(a, dtype=np.float64), k)


def binary_entropy_array(p: np.ndarray) -> np.ndarray:
    """-p ln p - (1-p) ln(1-p) with the 0 ln 0 = 0 convention, natural log."""
    p = np.clip(np.asarray(p, dtype=np.float64), 0.0, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        left = np.where(p > 0.0, p * np.log(p), 0.0)
        right = np.where(p < 1.0, (1.0 - p) * np.log1p(-p), 0.0)
    return -(left + right)


def binary_entropy(p: GrayMap) -> GrayMap:
    """Per-pixel two-class entropy of a unit-range map; range [0, ln 2]."""
    return GrayMap(binary_entropy_array(p.data))


def read_png_rgb(path) -> ImageRGB:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return ImageRGB.from_array(arr)


def read_png_gray(path) -> GrayMap:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    return GrayMap(arr)


def _to_u8(a: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(obj, path) -> None:
    """Write a GrayMap as 8-bit grayscale or an ImageRGB as 8-bit RGB."""
    path = Path(path)
    if isinstance(obj, GrayMap):
        Image.fromarray(_to_u8(obj.data), mode="L").save(path)
    elif isinstance(obj, ImageRGB):
        Image.fromarray(_to_u8(obj.to_array()), mode="RGB").save(path)
    else:
        raise TypeError(f"cannot write {type(obj).__name__} as PNG")
