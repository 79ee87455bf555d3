"""Procedural desk-scale smoke scenes with exact ground truth.

A scene is a background (vertical luminance gradient plus value-noise
texture), one or two semi-transparent plumes built from fractal value noise
under a rising teardrop envelope, and an optional thin white haze veil
outside the smoke mask that acts as a false-positive confuser. The true
per-pixel smoke opacity is kept alongside the binary mask.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imagecore import GrayMap, ImageRGB, read_png_gray, read_png_rgb, write_png

NOISE_OCTAVES = 4
NOISE_LACUNARITY = 2.0
NOISE_GAIN = 0.5

MANIFEST_NAME = "manifest.txt"
_MANIFEST_FIELDS = "index seed height width plumes opacity_lo opacity_hi background haze"


class CorruptDatasetError(Exception):
    """A dataset directory is missing files or disagrees with its manifest."""


def derive_seed(root_seed: int, purpose: str, index: int = 0) -> int:
    """Stable 63-bit sub-seed from (root seed, purpose, index)."""
    digest = hashlib.sha256(f"{root_seed}|{purpose}|{index}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    height: int = 64
    width: int = 64
    plumes: int = 1
    opacity_lo: float = 0.2
    opacity_hi: float = 0.9
    background: str = "gradient"
    haze: float = 0.1

    def __post_init__(self):
        if self.height < 8 or self.width < 8:
            raise ValueError("scene must be at least 8x8")
        if self.plumes not in (1, 2):
            raise ValueError(f"plume count must be 1 or 2, got {self.plumes}")
        if not (0.0 <= self.opacity_lo <= self.opacity_hi <= 1.0):
            raise ValueError(f"bad opacity range [{self.opacity_lo}, {self.opacity_hi}]")
        if self.background not in ("gradient", "textured"):
            raise ValueError(f"unknown background style {self.background!r}")
        if not (0.0 <= self.haze <= 0.3):
            raise ValueError(f"haze level {self.haze} outside [0, 0.3]")


@dataclass(frozen=True)
class LabeledScene:
    image: ImageRGB
    mask: GrayMap  # binary
    alpha: GrayMap  # true smoke opacity in [0, 1]


def _fade(t: np.ndarray) -> np.ndarray:
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def value_noise(height: int, width: int, scale: float, rng: np.random.Generator) -> np.ndarray:
    """Smooth lattice noise in [0, 1]; scale is the lattice cell size in pixels."""
    scale = max(float(scale), 1.0)
    gh = int(np.ceil(height / scale)) + 2
    gw = int(np.ceil(width / scale)) + 2
    grid = rng.random((gh, gw))

    ys = np.arange(height) / scale
    xs = np.arange(width) / scale
    yi = np.floor(ys).astype(int)
    xi = np.floor(xs).astype(int)
    fy = _fade(ys - yi)[:, None]
    fx = _fade(xs - xi)[None, :]

    v00 = grid[np.ix_(yi, xi)]
    v01 = grid[np.ix_(yi, xi + 1)]
    v10 = grid[np.ix_(yi + 1, xi)]
    v11 = grid[np.ix_(yi + 1, xi + 1)]
    top = v00 + fx * (v01 - v00)
    bot = v10 + fx * (v11 - v10)
    return top + fy * (bot - top)


def fractal_noise(
    height: int,
    width: int,
    base_scale: float,
    rng: np.random.Generator,
    octaves: int = NOISE_OCTAVES,
    lacunarity: float = NOISE_LACUNARITY,
    gain: float = NOISE_GAIN,
) -> np.ndarray:
    """Multi-octave value noise, renormalized to [0, 1]."""
    out = np.zeros((height, width))
    amplitude = 1.0
    total = 0.0
    scale = float(base_scale)
    for _ in range(octaves):
        out += amplitude * value_noise(height, width, scale, rng)
        total += amplitude
        amplitude *= gain
        scale /= lacunarity
    return out / total


def _background(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.height, spec.width
    top = rng.uniform(0.15, 0.35)
    bottom = rng.uniform(0.35, 0.55)
    grad = np.linspace(top, bottom, h)[:, None] * np.ones((1, w))
    amplitude = 0.04 if spec.background == "gradient" else 0.15
    texture = (fractal_noise(h, w, h / 3.0, rng) - 0.5) * amplitude
    luma = np.clip(grad + texture, 0.0, 1.0)
    # Slight per-channel tint keeps the dark channel honest.
    tint = rng.uniform(-0.03, 0.03, size=3)
    img = np.clip(luma[:, :, None] + tint[None, None, :], 0.0, 1.0)
    return img


def _plume_alpha(spec: SceneSpec, rng: np.random.Generator) -> tuple[np.ndarray, float]:
    """One plume's opacity field and its peak opacity."""
    h, w = spec.height, spec.width
    peak = rng.uniform(spec.opacity_lo, spec.opacity_hi)
    src_y = rng.uniform(0.65, 0.95) * h
    src_x = rng.uniform(0.2, 0.8) * w
    top_y = rng.uniform(0.05, 0.3) * h
    rise = max(src_y - top_y, 1.0)
    base_width = rng.uniform(0.05, 0.12) * w
    spread = rng.uniform(0.15, 0.3) * w
    drift = rng.uniform(-0.25, 0.25) * w

    ys = np.arange(h)[:, None]
    xs = np.arange(w)[None, :]
    # Height above the source, 0..1 between source and plume top.
    t = np.clip((src_y - ys) / rise, 0.0, 1.2)
    axis = src_x + drift * t
    width_at = base_width + spread * t
    radial = np.exp(-((xs - axis) / np.maximum(width_at, 1e-6)) ** 2)
    vertical = np.clip(1.0 - np.abs(t - 0.55) / 0.75, 0.0, 1.0)
    # Cut the soft outer shoulder so the visible plume edge stays close to
    # the half-peak mask contour instead of trailing off in a wide halo.
    envelope = np.clip((radial * vertical - 0.3) / 0.7, 0.0, 1.0)

    body = fractal_noise(h, w, h / 4.0, rng)
    body = np.clip((body - 0.25) / 0.75, 0.0, 1.0)
    alpha = envelope * (0.35 + 0.65 * body)
    top = alpha.max()
    if top > 0:
        alpha *= peak / top  # the drawn peak opacity is actually reached
    return alpha, peak


def generate(spec: SceneSpec) -> LabeledScene:
    """Deterministically render the scene described by spec."""
    rng = np.random.default_rng(derive_seed(spec.seed, "scene"))
    bg = _background(spec, rng)

    alpha = np.zeros((spec.height, spec.width))
    peak_max = 0.0
    for _ in range(spec.plumes):
        plume, peak = _plume_alpha(spec, rng)
        alpha = 1.0 - (1.0 - alpha) * (1.0 - plume)
        peak_max = max(peak_max, peak)
    mask = (alpha > 0.5 * peak_max).astype(np.float64) if peak_max > 0 else np.zeros_like(alpha)

    smoke_luma = rng.uniform(0.82, 0.95)
    smoke = np.clip(smoke_luma + rng.uniform(-0.02, 0.02, size=3), 0.0, 1.0)
    img = (1.0 - alpha[:, :, None]) * bg + alpha[:, :, None] * smoke[None, None, :]

    if spec.haze > 0.0:
        veil = spec.haze * (0.5 + 0.5 * fractal_noise(spec.height, spec.width, spec.height / 2.0, rng))
        veil = veil * (1.0 - mask)
        img = (1.0 - veil[:, :, None]) * img + veil[:, :, None]

    return LabeledScene(
        image=ImageRGB.from_array(np.clip(img, 0.0, 1.0)),
        mask=GrayMap(mask),
        alpha=GrayMap(alpha),
    )


def make_specs(
    n: int,
    root_seed: int,
    height: int = 64,
    width: int = 64,
    opacity_lo: float = 0.2,
    opacity_hi: float = 0.9,
    haze_max: float = 0.3,
) -> list[SceneSpec]:
    """Draw n varied scene specs from a root seed."""
    rng = np.random.default_rng(derive_seed(root_seed, "specs"))
    specs = []
    for i in range(n):
        specs.append(
            SceneSpec(
                seed=derive_seed(root_seed, "scene-seed", i),
                height=height,
                width=width,
                plumes=int(rng.integers(1, 3)),
                opacity_lo=opacity_lo,
                opacity_hi=opacity_hi,
                background="gradient" if rng.random() < 0.5 else "textured",
                haze=float(rng.uniform(0.0, haze_max)),
            )
        )
    return specs


def _names(index: int) -> tuple[str, str, str]:
    return (f"image_{index:04d}.png", f"mask_{index:04d}.png", f"alpha_{index:04d}.png")


def write_dataset(scenes, specs, directory) -> None:
    """Write image/mask/alpha PNG triples plus a manifest of specs."""
    if len(scenes) != len(specs):
        raise ValueError("scene and spec counts differ")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [f"# {_MANIFEST_FIELDS}"]
    for i, (scene, spec) in enumerate(zip(scenes, specs)):
        img_name, mask_name, alpha_name = _names(i)
        write_png(scene.image, directory / img_name)
        write_png(scene.mask, directory / mask_name)
        write_png(scene.alpha, directory / alpha_name)
        lines.append(
            f"{i} {spec.seed} {spec.height} {spec.width} {spec.plumes} "
            f"{spec.opacity_lo!r} {spec.opacity_hi!r} {spec.background} {spec.haze!r}"
        )
    (directory / MANIFEST_NAME).write_text("\n".join(lines) + "\n")


def read_dataset(directory) -> tuple[list[LabeledScene], list[SceneSpec]]:
    """Inverse of write_dataset up to 8-bit quantization of image and alpha."""
    directory = Path(directory)
    manifest = directory / MANIFEST_NAME
    if not manifest.is_file():
        raise CorruptDatasetError(f"missing manifest in {directory}")

    scenes = []
    specs = []
    expected = 0
    for line in manifest.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 9:
            raise CorruptDatasetError(f"malformed manifest record: {line!r}")
        index = int(parts[0])
        if index != expected:
            raise CorruptDatasetError(f"manifest indices out of order at {index}")
        expected += 1
        spec = SceneSpec(
            seed=int(parts[1]),
            height=int(parts[2]),
            width=int(parts[3]),
            plumes=int(parts[4]),
            opacity_lo=float(parts[5]),
            opacity_hi=float(parts[6]),
            background=parts[7],
            haze=float(parts[8]),
        )
        img_name, mask_name, alpha_name = _names(index)
        for name in (img_name, mask_name):
            if not (directory / name).is_file():
                raise CorruptDatasetError(f"missing file {name} listed in manifest")
        image = read_png_rgb(directory / img_name)
        mask_raw = read_png_gray(directory / mask_name)
        mask = GrayMap((mask_raw.data > 0.5).astype(np.float64))
        alpha_path = directory / alpha_name
        alpha = read_png_gray(alpha_path) if alpha_path.is_file() else GrayMap(mask.data)
        if image.height != spec.height or image.width != spec.width:
            raise CorruptDatasetError(f"size mismatch for {img_name}")
        scenes.append(LabeledScene(image=image, mask=mask, alpha=alpha))
        specs.append(spec)
    if not scenes:
        raise CorruptDatasetError(f"empty dataset in {directory}")
    return scenes, specs
