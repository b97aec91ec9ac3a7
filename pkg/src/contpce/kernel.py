"""Two-dimensional Gaussian localization kernel and bandwidth rules.

The smoothing weight placed on a stratum u = (m1, m0) around a target
u* is the normalized product kernel

    k_{u*}(u) = h^{-2} K((m1 - m1*)/h) K((m0 - m0*)/h),

with K the standard normal density. It integrates to one, has zero
first moments and finite fourth moments, which is what the O(h^2)
localization bias and the truncated-grid integration scheme rely on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import PrincipalPoint
from .errors import ConfigError

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _phi(t):
    return _INV_SQRT_2PI * np.exp(-0.5 * np.square(t))


@dataclass(frozen=True)
class KernelConfig:
    """Bandwidth for the bivariate Gaussian product kernel.

    `h` is expressed in the same (typically standardized) units as m.
    """

    h: float

    def __post_init__(self):
        if not (self.h > 0.0 and np.isfinite(self.h)):
            raise ConfigError(f"bandwidth must be positive and finite, got {self.h}")


def bandwidth_optimal(n: int, scale: float = 0.15) -> float:
    """Estimation-rate bandwidth h = scale * n^(-1/6) (default scale 0.15)."""
    return scale * n ** (-1.0 / 6.0)


def bandwidth_undersmooth(n: int, scale: float = 0.1) -> float:
    """Undersmoothed bandwidth h = scale * n^(-1/5) for bootstrap inference."""
    return scale * n ** (-1.0 / 5.0)


BANDWIDTH_RULES = {
    "optimal": bandwidth_optimal,
    "undersmooth": bandwidth_undersmooth,
}


def kernel_weight(cfg: KernelConfig, u_star: PrincipalPoint, u: PrincipalPoint) -> float:
    """Evaluate k_{u*}(u). Vectorizes over array-valued u components."""
    h = cfg.h
    return _phi((np.asarray(u[0]) - u_star.m1) / h) * _phi((np.asarray(u[1]) - u_star.m0) / h) / (h * h)


def kernel_marginal(cfg: KernelConfig, u_star: PrincipalPoint, fixed_axis: int, m) -> float:
    """Integrate k_{u*} over the free axis with the other pinned at m.

    `fixed_axis` is 1 to pin the m1 coordinate, 0 to pin m0. The free
    Gaussian factor integrates to one, leaving h^{-1} K((m - m*)/h).
    """
    if fixed_axis not in (0, 1):
        raise ConfigError("fixed_axis must be 0 or 1")
    center = u_star.m1 if fixed_axis == 1 else u_star.m0
    return _phi((np.asarray(m) - center) / cfg.h) / cfg.h


def axis_profile(cfg: KernelConfig, center: float, nodes: np.ndarray) -> np.ndarray:
    """One-axis kernel factor h^{-1} K((nodes - center)/h) on given nodes."""
    return _phi((nodes - center) / cfg.h) / cfg.h
