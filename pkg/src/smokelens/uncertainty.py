"""Monte-Carlo sample aggregation and the entropy-based uncertainty split.

Predictive uncertainty is the entropy of the mean prediction, aleatoric the
mean per-sample entropy, and epistemic their (clamped) Jensen gap.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .imagecore import GrayMap, binary_entropy_array


@dataclass(frozen=True)
class SampleSet:
    """B stochastic probability maps from repeated forward passes."""

    probs: np.ndarray  # (B, H, W), unit-range

    def __post_init__(self):
        arr = np.asarray(self.probs, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[0] < 1:
            raise ValueError(f"expected (B, H, W) samples with B >= 1, got shape {arr.shape}")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("sample probabilities must lie in [0, 1]")
        object.__setattr__(self, "probs", arr)

    @classmethod
    def from_maps(cls, maps: Sequence[GrayMap]) -> "SampleSet":
        if len(maps) == 0:
            raise ValueError("need at least one sample")
        return cls(np.stack([m.data for m in maps]))

    @property
    def b(self) -> int:
        return self.probs.shape[0]


@dataclass(frozen=True)
class UncertaintyMaps:
    """Predictive / aleatoric / epistemic entropy rasters, all >= 0."""

    predictive: GrayMap
    aleatoric: GrayMap
    epistemic: GrayMap


def mean_prediction(samples: SampleSet) -> GrayMap:
    """Pointwise average of the B probability maps."""
    return GrayMap(samples.probs.mean(axis=0))


def decompose(samples: SampleSet) -> UncertaintyMaps:
    """Split total uncertainty into aleatoric and epistemic parts.

    U_p = H(mean of samples); U_a = mean of H(sample); U_e = U_p - U_a,
    clamped at zero to absorb floating-point Jensen violations.
    """
    mean = samples.probs.mean(axis=0)
    u_p = binary_entropy_array(mean)
    u_a = binary_entropy_array(samples.probs).mean(axis=0)
    u_e = np.clip(u_p - u_a, 0.0, None)
    return UncertaintyMaps(GrayMap(u_p), GrayMap(u_a), GrayMap(u_e))
