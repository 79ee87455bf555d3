"""Naive reference implementations used as independent test oracles.

Everything here is written as plain loops straight from the definitions,
deliberately ignoring the vectorized paths in the package.
"""

from __future__ import annotations

import numpy as np


def clamp(i: int, n: int) -> int:
    return min(max(i, 0), n - 1)


def naive_min_filter(a: np.ndarray, k: int) -> np.ndarray:
    h, w = a.shape
    r = k // 2
    out = np.empty_like(a)
    for i in range(h):
        for j in range(w):
            best = np.inf
            for di in range(-r, r + 1):
                for dj in range(-r, r + 1):
                    best = min(best, a[clamp(i + di, h), clamp(j + dj, w)])
            out[i, j] = best
    return out


def naive_box_mean(a: np.ndarray, k: int) -> np.ndarray:
    h, w = a.shape
    r = k // 2
    out = np.empty_like(a)
    for i in range(h):
        for j in range(w):
            total = 0.0
            for di in range(-r, r + 1):
                for dj in range(-r, r + 1):
                    total += a[clamp(i + di, h), clamp(j + dj, w)]
            out[i, j] = total / (k * k)
    return out


def naive_dark_channel(rgb: np.ndarray, k: int) -> np.ndarray:
    """rgb is (H, W, 3); min over channels and the clamped k x k patch."""
    h, w, _ = rgb.shape
    r = k // 2
    out = np.empty((h, w))
    for i in range(h):
        for j in range(w):
            best = np.inf
            for di in range(-r, r + 1):
                for dj in range(-r, r + 1):
                    px = rgb[clamp(i + di, h), clamp(j + dj, w)]
                    best = min(best, px[0], px[1], px[2])
            out[i, j] = best
    return out


def naive_atmospheric_light(rgb: np.ndarray, dark: np.ndarray, fraction: float) -> np.ndarray:
    """Exhaustive scan mirroring the documented tie rules."""
    h, w, _ = rgb.shape
    n = h * w
    n_top = max(1, int(np.ceil(fraction * n)))
    flat = [(-dark[i, j], i * w + j) for i in range(h) for j in range(w)]
    flat.sort()
    candidates = sorted(idx for _, idx in flat[:n_top])
    best_idx = None
    best_intensity = -1.0
    for idx in candidates:
        i, j = divmod(idx, w)
        intensity = rgb[i, j].mean()
        if intensity > best_intensity:
            best_intensity = intensity
            best_idx = idx
    i, j = divmod(best_idx, w)
    return rgb[i, j].copy()


def naive_guided_filter(guide: np.ndarray, src: np.ndarray, radius: int, eps: float) -> np.ndarray:
    k = 2 * radius + 1
    mean_g = naive_box_mean(guide, k)
    mean_s = naive_box_mean(src, k)
    mean_gs = naive_box_mean(guide * src, k)
    mean_gg = naive_box_mean(guide * guide, k)
    a = (mean_gs - mean_g * mean_s) / (mean_gg - mean_g * mean_g + eps)
    b = mean_s - a * mean_g
    return naive_box_mean(a, k) * guide + naive_box_mean(b, k)


def naive_coherence_loss(probs: np.ndarray, t: np.ndarray, k: int, sigma_p: float, sigma_t: float) -> float:
    """Quadruple loop over pixels and their in-bounds window neighbors."""
    h, w = probs.shape
    r = k // 2
    total = 0.0
    for i in range(h):
        for j in range(w):
            raw = []
            neigh = []
            for di in range(-r, r + 1):
                for dj in range(-r, r + 1):
                    ni, nj = i + di, j + dj
                    if 0 <= ni < h and 0 <= nj < w:
                        dist2 = di * di + dj * dj
                        tdiff2 = (t[i, j] - t[ni, nj]) ** 2
                        raw.append(np.exp(-dist2 / (2 * sigma_p**2) - tdiff2 / (2 * sigma_t**2)))
                        neigh.append((ni, nj))
            norm = sum(raw)
            for weight, (ni, nj) in zip(raw, neigh):
                total += (1.0 - t[i, j]) * (weight / norm) * abs(probs[i, j] - probs[ni, nj])
    return total / (h * w)


def finite_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Elementwise central differences of a scalar function of an array."""
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f(x)
        flat[i] = orig - h
        lo = f(x)
        flat[i] = orig
        gf[i] = (hi - lo) / (2 * h)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max elementwise |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / denom).max())
