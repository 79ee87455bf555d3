"""Training objectives, all differentiable through diffcore.

The five pieces: edge-weighted structure loss (weighted cross-entropy plus
weighted IoU), KL regularizer to a standard-normal latent prior, a
transmission-guided local coherence loss built on a bilateral kernel over
pixel distance and transmission similarity, an uncertainty-calibrated entropy
regularizer (entropy of a temperature-scaled sigmoid), the consistency loss
that trains the uncertainty head, and their weighted total.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import DiffValue
from .imagecore import as_gray_array, box_mean

U_EPS = 1e-3  # floor on the uncertainty temperature in the entropy loss


@dataclass(frozen=True)
class CoherenceConfig:
    """Window size and bandwidths of the bilateral coherence kernel."""

    k: int = 5
    sigma_p: float = 5.0
    sigma_t: float = 0.1

    def __post_init__(self):
        if self.k < 1 or self.k % 2 == 0:
            raise ValueError(f"window size must be odd and positive, got {self.k}")
        if self.sigma_p <= 0 or self.sigma_t <= 0:
            raise ValueError("bandwidths must be positive")


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.3
    lambda2: float = 0.01

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")


def _bce_logits(logits: DiffValue, target: np.ndarray) -> DiffValue:
    # softplus(s) - s*y == max(s,0) - s*y + log(1+e^-|s|): stable for any s.
    return dc.sub(dc.softplus(logits), dc.mul(logits, target))


def default_pool_k(height: int, width: int) -> int:
    """Edge-weight pooling kernel: 31 at native scale, 15 at desk scale."""
    return 15 if min(height, width) <= 64 else 31


def structure_loss(logits: DiffValue, target, pool_k: int | None = None) -> DiffValue:
    """Edge-weighted BCE plus weighted IoU against a binary mask.

    The weight map is w = 1 + 5*|boxmean(y) - y|, emphasizing boundary
    pixels; the BCE term is normalized by sum(w). IoU uses the +1-smoothed
    soft formulation on sigmoid probabilities.
    """
    y = as_gray_array(target)
    if logits.value.shape != y.shape:
        raise ValueError(f"logits shape {logits.value.shape} != target shape {y.shape}")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("target mask must be binary")
    if pool_k is None:
        pool_k = default_pool_k(*y.shape)

    w = 1.0 + 5.0 * np.abs(box_mean(y, pool_k) - y)
    ce = _bce_logits(logits, y)
    ce_term = dc.div(dc.dsum(dc.mul(ce, w)), float(w.sum()))

    p = dc.sigmoid(logits)
    inter = dc.dsum(dc.mul(p, w * y))
    union = dc.dsum(dc.mul(dc.add(p, y), w))
    iou_term = dc.sub(1.0, dc.div(dc.add(inter, 1.0), dc.add(dc.sub(union, inter), 1.0)))
    return dc.add(ce_term, iou_term)


def kl_standard_normal(mu: DiffValue, log_sigma: DiffValue) -> DiffValue:
    """KL( N(mu, exp(log_sigma)^2) || N(0, 1) ), summed over the latent dims."""
    if mu.value.shape != log_sigma.value.shape:
        raise ValueError(f"mu shape {mu.value.shape} != log_sigma shape {log_sigma.value.shape}")
    term = dc.add(
        dc.sub(dc.add(dc.mul(mu, mu), dc.exp(dc.mul(log_sigma, 2.0))), 1.0),
        dc.mul(log_sigma, -2.0),
    )
    return dc.mul(dc.dsum(term), 0.5)


def _window_offsets(k: int):
    r = k // 2
    return [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]


def _shifted_const(t: np.ndarray, dy: int, dx: int) -> tuple[np.ndarray, np.ndarray]:
    """Neighbor values t[i+dy, j+dx] plus a validity mask, zero outside."""
    h, w = t.shape
    out = np.zeros_like(t)
    valid = np.zeros_like(t)
    dst_r, src_r = dc._shift_slices(h, dy)
    dst_c, src_c = dc._shift_slices(w, dx)
    out[dst_r, dst_c] = t[src_r, src_c]
    valid[dst_r, dst_c] = 1.0
    return out, valid


def bilateral_weights(transmission, cfg: CoherenceConfig = CoherenceConfig()):
    """Normalized bilateral kernel for every window offset.

    Returns (offsets, weights) with weights of shape (len(offsets), H, W);
    at each pixel the weights over in-bounds offsets (center included) sum
    to 1, out-of-bounds entries are zero.
    """
    t = as_gray_array(transmission)
    offsets = _window_offsets(cfg.k)
    raw = np.zeros((len(offsets),) + t.shape)
    inv_2sp2 = 1.0 / (2.0 * cfg.sigma_p**2)
    inv_2st2 = 1.0 / (2.0 * cfg.sigma_t**2)
    for idx, (dy, dx) in enumerate(offsets):
        tn, valid = _shifted_const(t, dy, dx)
        spatial = (dy * dy + dx * dx) * inv_2sp2
        raw[idx] = valid * np.exp(-spatial - (t - tn) ** 2 * inv_2st2)
    return offsets, raw / raw.sum(axis=0)


def transmission_coherence_loss(
    probs: DiffValue,
    transmission,
    cfg: CoherenceConfig = CoherenceConfig(),
    precomputed=None,
) -> DiffValue:
    """Pull neighboring predictions together where transmission agrees.

    loss = (1/N) * sum_m (1 - T(m)) * sum_n W(m,n) * |p(m) - p(n)| over the
    k x k window around each pixel (in-bounds neighbors only). T carries no
    gradient; the reversed transmission focuses the pull on degraded regions.
    precomputed takes a cached bilateral_weights(transmission, cfg) result.
    """
    t = as_gray_array(transmission)
    if probs.value.shape != t.shape:
        raise ValueError(f"prediction shape {probs.value.shape} != transmission shape {t.shape}")
    offsets, weights = precomputed if precomputed is not None else bilateral_weights(t, cfg)
    coef = (1.0 - t) / t.size
    total = DiffValue(0.0)
    for (dy, dx), w_off in zip(offsets, weights):
        if dy == 0 and dx == 0:
            continue  # D(m,m) = 0
        diff = dc.absolute(dc.sub(probs, dc.translate(probs, dy, dx)))
        total = dc.add(total, dc.dsum(dc.mul(diff, coef * w_off)))
    return total


def calibrated_entropy_loss(
    logits: DiffValue, total_uncertainty, mode: str = "two-class", u_eps: float = U_EPS
) -> DiffValue:
    """Mean entropy of sigmoid(s / max(U, u_eps)).

    The uncertainty map acts as a detached per-pixel temperature: confident
    pixels get pushed toward binary predictions, uncertain ones stay soft.
    mode="two-class" uses -p ln p - (1-p) ln(1-p); mode="literal" repeats the
    -p ln p term for both classes instead.
    """
    u = as_gray_array(total_uncertainty)
    if logits.value.shape != u.shape:
        raise ValueError(f"logits shape {logits.value.shape} != uncertainty shape {u.shape}")
    if (u < 0).any():
        raise ValueError("uncertainty temperature must be non-negative")
    if mode not in ("two-class", "literal"):
        raise ValueError(f"unknown mode {mode!r}")

    scaled = dc.mul(logits, 1.0 / np.maximum(u, u_eps))
    p = dc.sigmoid(scaled)
    # -p ln p = p * softplus(-s); -(1-p) ln(1-p) = (1-p) * softplus(s)
    neg_p_logp = dc.mul(p, dc.softplus(dc.mul(scaled, -1.0)))
    if mode == "literal":
        return dc.dmean(dc.mul(neg_p_logp, 2.0))
    neg_q_logq = dc.mul(dc.sub(1.0, p), dc.softplus(scaled))
    return dc.dmean(dc.add(neg_p_logp, neg_q_logq))


def plain_entropy_loss(logits: DiffValue) -> DiffValue:
    """Entropy regularizer without temperature scaling (unit temperature)."""
    return calibrated_entropy_loss(logits, np.ones(logits.value.shape))


def uncertainty_consistency_loss(up_target, ua_target, up_pred: DiffValue, ua_pred: DiffValue) -> DiffValue:
    """Half the summed MSEs between predicted and sampled uncertainty maps."""
    up = as_gray_array(up_target)
    ua = as_gray_array(ua_target)
    if up_pred.value.shape != up.shape or ua_pred.value.shape != ua.shape:
        raise ValueError("uncertainty map shapes do not match targets")
    dp = dc.sub(up_pred, up)
    da = dc.sub(ua_pred, ua)
    mse_p = dc.dmean(dc.mul(dp, dp))
    mse_a = dc.dmean(dc.mul(da, da))
    return dc.mul(dc.add(mse_p, mse_a), 0.5)


def total_generator_loss(
    base: DiffValue,
    coherence: DiffValue,
    entropy: DiffValue,
    weights: LossWeights = LossWeights(),
) -> DiffValue:
    """base + lambda1 * coherence + lambda2 * entropy."""
    return dc.add(base, dc.add(dc.mul(coherence, weights.lambda1), dc.mul(entropy, weights.lambda2)))
