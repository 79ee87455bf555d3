"""Medium-transmission estimation from a single RGB image.

Pipeline: dark channel -> global atmospheric light from the brightest
dark-channel pixels -> raw transmission from clamped channel ratios ->
guided-filter refinement against the intensity image. Low transmission marks
regions where haze or smoke attenuates the scene.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imagecore import GrayMap, ImageRGB, box_mean, min_filter

# Floor on each atmospheric-light channel; keeps the channel ratios bounded
# on nearly black images.
A_MIN = 0.05

# Alias: a transmission map is a unit-range GrayMap.
TransmissionMap = GrayMap


@dataclass(frozen=True)
class AtmosphericLight:
    """Global ambient light color, each channel in [A_MIN, 1]."""

    r: float
    g: float
    b: float

    def __post_init__(self):
        for name, v in (("r", self.r), ("g", self.g), ("b", self.b)):
            if not (A_MIN <= v <= 1.0):
                raise ValueError(f"atmospheric light channel {name}={v} outside [{A_MIN}, 1]")

    def as_array(self) -> np.ndarray:
        return np.array([self.r, self.g, self.b])


@dataclass(frozen=True)
class TransmissionConfig:
    k: int = 15
    fraction: float = 0.001
    radius: int = 8
    eps: float = 1e-3

    def __post_init__(self):
        if self.k < 1 or self.k % 2 == 0:
            raise ValueError(f"patch size must be odd and positive, got {self.k}")
        if not (0.0 < self.fraction <= 1.0):
            raise ValueError(f"fraction must be in (0, 1], got {self.fraction}")
        if self.radius < 1:
            raise ValueError(f"radius must be >= 1, got {self.radius}")
        if self.eps <= 0.0:
            raise ValueError(f"eps must be > 0, got {self.eps}")

    @classmethod
    def for_size(cls, height: int, width: int) -> "TransmissionConfig":
        """Desk-scale images (<= 64 px) get a smaller patch than full-size ones."""
        k = 5 if min(height, width) <= 64 else 15
        return cls(k=k)


def dark_channel(img: ImageRGB, k: int) -> GrayMap:
    """Min over channels of the windowed min: near zero on haze-free scenes."""
    channel_min = np.minimum(np.minimum(img.r.data, img.g.data), img.b.data)
    return min_filter(GrayMap(channel_min), k)


def atmospheric_light(img: ImageRGB, dark: GrayMap, fraction: float = 0.001) -> AtmosphericLight:
    """Pick the most intense image pixel among the brightest dark-channel pixels.

    Candidates are the ceil(fraction * N) largest dark-channel values;
    intensity is the RGB mean. Ties break toward the lowest row-major index.
    """
    if img.height == 0 or img.width == 0:
        raise ValueError("empty image")
    if dark.shape != (img.height, img.width):
        raise ValueError("dark channel size does not match image")
    if not (0.0 < fraction <= 1.0):
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")

    n = dark.data.size
    n_top = max(1, int(np.ceil(fraction * n)))
    flat_dark = dark.data.ravel()
    # Stable sort by (-dark, index): deterministic candidate set under ties.
    order = np.lexsort((np.arange(n), -flat_dark))
    candidates = np.sort(order[:n_top])

    intensity = (img.r.data.ravel() + img.g.data.ravel() + img.b.data.ravel()) / 3.0
    best = candidates[int(np.argmax(intensity[candidates]))]
    i, j = divmod(int(best), img.width)
    return AtmosphericLight(
        r=max(A_MIN, float(img.r.data[i, j])),
        g=max(A_MIN, float(img.g.data[i, j])),
        b=max(A_MIN, float(img.b.data[i, j])),
    )


def transmission_raw(img: ImageRGB, a: AtmosphericLight, k: int) -> TransmissionMap:
    """T(m) = 1 - min over channels and the k x k patch of I^c / A^c.

    Each ratio is clamped to [0, 1] before the min so pixels brighter than
    the atmospheric light cannot push T negative.
    """
    ratios = [
        np.clip(img.r.data / a.r, 0.0, 1.0),
        np.clip(img.g.data / a.g, 0.0, 1.0),
        np.clip(img.b.data / a.b, 0.0, 1.0),
    ]
    haze = min_filter(GrayMap(np.minimum(np.minimum(ratios[0], ratios[1]), ratios[2])), k)
    return GrayMap(1.0 - haze.data)


def guided_filter(guide: GrayMap, src: GrayMap, radius: int, eps: float) -> GrayMap:
    """Edge-preserving smoothing of src by a local linear model on guide.

    Per window: a = cov(guide, src) / (var(guide) + eps), b = mean(src) -
    a * mean(guide); output = mean(a) * guide + mean(b). All means are box
    means over (2r+1)^2 windows with clamp-to-edge borders.
    """
    if guide.shape != src.shape:
        raise ValueError(f"guide shape {guide.shape} != input shape {src.shape}")
    if radius >= min(guide.height, guide.width):
        raise ValueError(f"radius {radius} too large for {guide.shape} map")
    if eps <= 0.0:
        raise ValueError(f"eps must be > 0, got {eps}")

    k = 2 * radius + 1
    g = guide.data
    s = src.data
    mean_g = box_mean(g, k)
    mean_s = box_mean(s, k)
    cov_gs = box_mean(g * s, k) - mean_g * mean_s
    var_g = box_mean(g * g, k) - mean_g * mean_g
    a = cov_gs / (var_g + eps)
    b = mean_s - a * mean_g
    return GrayMap(box_mean(a, k) * g + box_mean(b, k))


def estimate_transmission(img: ImageRGB, cfg: TransmissionConfig | None = None) -> TransmissionMap:
    """Full pipeline; the refined map is clamped back to [0, 1]."""
    if cfg is None:
        cfg = TransmissionConfig.for_size(img.height, img.width)
    dark = dark_channel(img, cfg.k)
    a = atmospheric_light(img, dark, cfg.fraction)
    raw = transmission_raw(img, a, cfg.k)
    refined = guided_filter(img.intensity(), raw, cfg.radius, cfg.eps)
    return refined.clipped01()


def estimate_transmission_with_light(
    img: ImageRGB, cfg: TransmissionConfig | None = None
) -> tuple[TransmissionMap, AtmosphericLight]:
    """Like estimate_transmission but also returns the estimated light."""
    if cfg is None:
        cfg = TransmissionConfig.for_size(img.height, img.width)
    dark = dark_channel(img, cfg.k)
    a = atmospheric_light(img, dark, cfg.fraction)
    raw = transmission_raw(img, a, cfg.k)
    refined = guided_filter(img.intensity(), raw, cfg.radius, cfg.eps)
    return refined.clipped01(), a
