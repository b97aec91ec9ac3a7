"""Copula densities and the copula-identified joint stratum density.

The joint conditional density of the stratum U = (M1, M0) given
covariates is modeled as

    e_u(x) = c_rho(F_{1,m1}(x), F_{0,m0}(x)) * f_{1,m1}(x) * f_{0,m0}(x),

where F/f are the single-arm conditional CDF/density of the intermediate
variable and c_rho couples the two arms. The copula family and rho are
user-chosen sensitivity parameters; they cannot be inferred from data.

Supported families: independence, gaussian, fgm (Farlie-Gumbel-
Morgenstern). Clayton is intentionally not shipped: there is no agreed
mapping from a correlation-style rho to its shape parameter, and the
interface stays open for extension.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .errors import ConfigError, DataError

CDF_CLAMP = 1e-12

_SQRT_2PI = math.sqrt(2.0 * math.pi)

# Rational approximation for the inverse normal CDF (Acklam's method,
# absolute error <= 1.15e-9), refined below by one Newton step on ndtr.
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def _ppf_lower(p: np.ndarray) -> np.ndarray:
    """Inverse CDF for p <= 0.5, where ndtr keeps full relative accuracy."""
    x = np.empty_like(p)
    tail = p < _P_LOW
    mid = ~tail
    if np.any(mid):
        q = p[mid] - 0.5
        r = q * q
        num = ((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]
        den = ((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0
        x[mid] = num * q / den
    if np.any(tail):
        q = np.sqrt(-2.0 * np.log(p[tail]))
        num = ((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]
        den = (((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0
        x[tail] = num / den
    # One Newton step: x <- x - (ndtr(x) - p) / phi(x). In the lower
    # tail ndtr(x) is small with full relative precision, so the
    # difference is accurate and the refinement lands near machine
    # precision for the given p.
    x -= (ndtr(x) - p) * _SQRT_2PI * np.exp(0.5 * x * x)
    return x


def norm_ppf(p):
    """Inverse standard normal CDF.

    Acklam's rational approximation (absolute error <= 1.15e-9),
    refined by one Newton correction against the exact CDF. The upper
    half mirrors through the lower half so the Newton residual never
    hits the cancellation-prone 1 - eps region of the CDF. Inputs
    outside (0, 1) raise.
    """
    p = np.asarray(p, dtype=float)
    if np.any(p <= 0.0) or np.any(p >= 1.0):
        raise DataError("norm_ppf requires arguments strictly inside (0, 1)")
    upper = p > 0.5
    folded = np.where(upper, 1.0 - p, p)
    x = _ppf_lower(folded)
    x = np.where(upper, -x, x)
    return x if x.ndim else float(x)


FAMILIES = ("independence", "gaussian", "fgm")


@dataclass(frozen=True)
class CopulaSpec:
    """Association model between the two potential intermediates.

    rho is the correlation-style parameter; the independence family
    ignores it.
    """

    family: str = "gaussian"
    rho: float = 0.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown copula family {self.family!r}; choose from {FAMILIES}")
        if not np.isfinite(self.rho):
            raise ConfigError("rho must be finite")
        if self.family == "gaussian" and not (-1.0 < self.rho < 1.0):
            raise ConfigError(f"gaussian copula needs rho in (-1, 1), got {self.rho}")
        if self.family == "fgm" and not (-1.0 <= self.rho <= 1.0):
            raise ConfigError(f"fgm copula needs rho in [-1, 1], got {self.rho}")


def copula_density(spec: CopulaSpec, u, v):
    """Copula density c_rho(u, v) for u, v in (0, 1). Broadcasts."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if np.any(u <= 0.0) or np.any(u >= 1.0) or np.any(v <= 0.0) or np.any(v >= 1.0):
        raise DataError("copula arguments must lie strictly inside (0, 1)")
    if spec.family == "independence":
        out = np.ones(np.broadcast(u, v).shape)
    elif spec.family == "fgm":
        out = 1.0 + spec.rho * (1.0 - 2.0 * u) * (1.0 - 2.0 * v)
    else:
        rho = spec.rho
        a = norm_ppf(u)
        b = norm_ppf(v)
        one_minus = 1.0 - rho * rho
        expo = (2.0 * rho * a * b - rho * rho * (a * a + b * b)) / (2.0 * one_minus)
        out = np.exp(expo) / math.sqrt(one_minus)
    return out if out.ndim else float(out)


@dataclass
class ClampCounter:
    """Mutable tally of numerical guard activations."""

    cdf_clamps: int = 0
    pi_clamps: int = 0
    density_floor_hits: int = 0

    def merge(self, other: "ClampCounter") -> None:
        self.cdf_clamps += other.cdf_clamps
        self.pi_clamps += other.pi_clamps
        self.density_floor_hits += other.density_floor_hits

    def as_dict(self) -> dict:
        return {
            "cdf_clamps": self.cdf_clamps,
            "pi_clamps": self.pi_clamps,
            "density_floor_hits": self.density_floor_hits,
        }


def clamp_cdf(values, counter: ClampCounter | None = None):
    """Clamp CDF values to [1e-12, 1 - 1e-12] before inverse mapping."""
    values = np.asarray(values, dtype=float)
    clipped = np.clip(values, CDF_CLAMP, 1.0 - CDF_CLAMP)
    if counter is not None:
        counter.cdf_clamps += int(np.count_nonzero(clipped != values))
    return clipped


def joint_principal_density(spec: CopulaSpec, ps, x, u, counter: ClampCounter | None = None):
    """Copula-identified joint density of U = (m1, m0) given covariates.

    `ps` is any principal-score model exposing ``density(x, z, m)`` and
    ``cdf(x, z, m)`` (see the nuisance module). `x` may be one covariate
    vector or an (n, p) matrix; the result then has length n.
    """
    x_in = np.asarray(x, dtype=float)
    single = x_in.ndim == 1
    x2 = np.atleast_2d(x_in)
    m1, m0 = float(u[0]), float(u[1])
    f1 = ps.density(x2, 1, m1)
    f0 = ps.density(x2, 0, m0)
    c = copula_density(
        spec,
        clamp_cdf(ps.cdf(x2, 1, m1), counter),
        clamp_cdf(ps.cdf(x2, 0, m0), counter),
    )
    out = np.asarray(c * f1 * f0, dtype=float).ravel()
    return float(out[0]) if single else out
