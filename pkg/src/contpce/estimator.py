"""Doubly robust point estimation, surfaces, and bootstrap inference.

The point estimator at a stratum u* = (m1*, m0*) is the ratio

    tau_hat = P_n[ xi1_hat * (Y - mu_hat_Z(X, M)) + T2(X) ] / P_n[ D(X) ],

where D(X_i) = <<e_hat(X_i)>>_{u*} smooths the copula-identified joint
stratum density over the kernel, T2(X_i) smooths (mu1_hat - mu0_hat) *
e_hat, and xi1_hat(x, z, m) = (-1)^(z+1) gamma1^(z)(x, m) / (pi_hat_z(x)
f_hat_zm(x)) weights outcome residuals by a one-axis kernel integral of
the joint density. All integrals run on the truncated uniform grids of
the quadrature module.

Implementation note: the grids are shared across observations, so the
per-observation integrands are evaluated in factorized form (per-axis
vectors plus, for the Gaussian copula, one grid-coupling matrix), and
the sums over observations and grid nodes reduce to dense matrix
products. This computes exactly the same Riemann sums as the generic
``smooth2d``/``smooth1d`` operations, only in a different summation
order; agreement is covered by tests. The factorization requires a
conditional-Gaussian principal score and an outcome mean affine in m,
which covers every strategy shipped here.
"""

from __future__ import annotations

import math
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import ndtr

from .copula import ClampCounter, CopulaSpec, copula_density, clamp_cdf, joint_principal_density, norm_ppf
from .data import Dataset, GridSpec, PrincipalPoint
from .errors import ConfigError, EstimationError
from .kernel import KernelConfig, axis_profile, BANDWIDTH_RULES
from .nuisance import fit_outcome, fit_principal_score, fit_treatment
from .quadrature import (
    MODE_ADAPTIVE,
    QuadratureConfig,
    adaptive_oracle_1d,
    adaptive_oracle_2d,
    midpoint_nodes,
    smooth1d,
)

PI_CLAMP = 1e-6
DENSITY_FLOOR = 1e-12
DENOM_FLOOR = 1e-10
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_EXP_CLIP = 700.0
# |ndtri(1e-12)|: CDF values beyond this many sd would be clamped by the
# generic copula path; used only to tally clamp-equivalent events.
_CLAMP_SD = 7.034484621065908

FLOOR_MODES = ("error", "clamp")


@dataclass(frozen=True)
class FittedNuisances:
    """The three nuisance models plus the copula sensitivity choice."""

    treatment: object
    outcome: object
    principal: object
    copula: CopulaSpec


def fit_parametric(data: Dataset) -> tuple:
    """Fit the parametric strategy: logistic TP, linear OM, Gaussian PS."""
    return fit_treatment(data), fit_outcome(data), fit_principal_score(data)


@dataclass(frozen=True)
class PointEstimate:
    u_star: PrincipalPoint
    tau_hat: float
    denom: float
    h: float
    n: int
    term_residual: float
    term_smoothed: float
    diagnostics: dict = field(default_factory=dict)


@dataclass(frozen=True)
class BootstrapResult:
    se: float
    ci: tuple[float, float]
    replicates: np.ndarray
    seed: int
    alpha: float
    n_failed: int = 0
    failure_reasons: dict = field(default_factory=dict)
    method: str = "percentile"


@dataclass(frozen=True)
class SurfaceNode:
    u: PrincipalPoint
    estimate: Optional[PointEstimate]
    reason: Optional[str] = None
    bootstrap: Optional[BootstrapResult] = None

    @property
    def ok(self) -> bool:
        return self.estimate is not None


@dataclass(frozen=True)
class SurfaceEstimate:
    grid: GridSpec
    nodes: tuple[SurfaceNode, ...]


# ---------------------------------------------------------------------------
# Spec-level single-row operations (reference path).

def gamma1(nuis: FittedNuisances, kernel: KernelConfig, quad: QuadratureConfig,
           u_star: PrincipalPoint, x, z: int, m: float,
           counter: ClampCounter | None = None) -> float:
    """One-axis kernel integral of the joint stratum density.

    For z = 1 this is int k_{u*}(m, m0) e_hat_{(m, m0)}(x) dm0 and
    symmetrically for z = 0.
    """
    x = np.asarray(x, dtype=float)

    if z == 1:
        def g(m0):
            m0 = np.asarray(m0, dtype=float).ravel()
            return np.array([joint_principal_density(nuis.copula, nuis.principal, x, (m, v), counter)
                             for v in m0])
        return smooth1d(quad, kernel, u_star, 1, m, g).value

    def g(m1):
        m1 = np.asarray(m1, dtype=float).ravel()
        return np.array([joint_principal_density(nuis.copula, nuis.principal, x, (v, m), counter)
                         for v in m1])
    return smooth1d(quad, kernel, u_star, 0, m, g).value


def xi1(nuis: FittedNuisances, kernel: KernelConfig, quad: QuadratureConfig,
        u_star: PrincipalPoint, x, z: int, m: float,
        floor_mode: str = "error", counter: ClampCounter | None = None) -> float:
    """Signed residual weight (-1)^(z+1) gamma1 / (pi_hat_z f_hat_zm)."""
    if floor_mode not in FLOOR_MODES:
        raise ConfigError(f"floor_mode must be one of {FLOOR_MODES}")
    x = np.asarray(x, dtype=float)
    gam = gamma1(nuis, kernel, quad, u_star, x, z, m, counter)
    p1 = float(nuis.treatment.prob1(x)[0])
    pi_z = p1 if z == 1 else 1.0 - p1
    clipped = min(max(pi_z, PI_CLAMP), 1.0 - PI_CLAMP)
    if counter is not None and clipped != pi_z:
        counter.pi_clamps += 1
    f_zm = float(np.ravel(nuis.principal.density(x[None, :], z, m))[0])
    if f_zm < DENSITY_FLOOR:
        if floor_mode == "error":
            raise EstimationError(
                f"principal-score density underflow ({f_zm:.3e}) at (z={z}, m={m!r})"
            )
        if counter is not None:
            counter.density_floor_hits += 1
        f_zm = DENSITY_FLOOR
    sign = 1.0 if z == 1 else -1.0
    return sign * gam / (clipped * f_zm)


# ---------------------------------------------------------------------------
# Vectorized integral engine.

def _affine_outcome(outcome, x: np.ndarray):
    if not hasattr(outcome, "affine"):
        raise ConfigError(
            "outcome model must expose affine(x, z) -> (a, b) with mu = a + b*m; "
            "only m-affine outcome strategies are supported by the grid engine"
        )
    a1, b1 = outcome.affine(x, 1)
    a0, b0 = outcome.affine(x, 0)
    return np.asarray(a1, float), np.asarray(b1, float), np.asarray(a0, float), np.asarray(b0, float)


def _gaussian_ps_params(principal, x: np.ndarray):
    if not hasattr(principal, "conditional_mean"):
        raise ConfigError(
            "principal-score model must expose conditional_mean/conditional_sd; "
            "only conditional-Gaussian strategies are supported by the grid engine"
        )
    mean1 = np.asarray(principal.conditional_mean(x, 1), dtype=float)
    mean0 = np.asarray(principal.conditional_mean(x, 0), dtype=float)
    sd1 = float(principal.conditional_sd(1))
    sd0 = float(principal.conditional_sd(0))
    return mean1, sd1, mean0, sd0


def _count_tail_nodes(offsets: np.ndarray, shifts: np.ndarray, threshold: float) -> int:
    """Count pairs (i, j) with |offsets[j] + shifts[i]| > threshold.

    `offsets` must be ascending; counting uses binary search per row.
    """
    hi = np.searchsorted(offsets, threshold - shifts, side="right")
    lo = np.searchsorted(offsets, -threshold - shifts, side="left")
    return int(np.sum(lo) + np.sum(offsets.size - hi))


def _pair_fields(spec: CopulaSpec, delta, g_row, eps, w_row, k1w, k0w, sd1, sd0):
    """Factorized per-axis matrices for the 2-D grid reduction.

    Returns (pairs, E0, scal) such that the kernel-weighted joint
    density summed over rows equals

        sum_l  E0 ∘ ((scal * A_l)^T B_l)          (elementwise in E0),

    where A_l, B_l are (n, N) per-axis factor matrices. E0 is None for
    the separable families, scal is all-ones except for the Gaussian
    coupling.
    """
    n = g_row.size
    a = delta[None, :] + g_row[:, None]
    b = eps[None, :] + w_row[:, None]
    f1 = _INV_SQRT_2PI / sd1 * np.exp(-0.5 * a * a)
    f0 = _INV_SQRT_2PI / sd0 * np.exp(-0.5 * b * b)
    scal = np.ones(n)
    if spec.family == "independence":
        pairs = [(f1 * k1w, f0 * k0w)]
        return pairs, None, scal
    if spec.family == "fgm":
        u1 = ndtr(a)
        u0 = ndtr(b)
        pairs = [
            (f1 * k1w, f0 * k0w),
            (spec.rho * (1.0 - 2.0 * u1) * f1 * k1w, (1.0 - 2.0 * u0) * f0 * k0w),
        ]
        return pairs, None, scal
    rho = spec.rho
    q = 1.0 / (2.0 * (1.0 - rho * rho))
    lam = rho / (1.0 - rho * rho)
    a_exp = -q * delta[None, :] ** 2 - 2.0 * q * delta[None, :] * g_row[:, None] \
        + lam * delta[None, :] * w_row[:, None]
    b_exp = -q * eps[None, :] ** 2 - 2.0 * q * eps[None, :] * w_row[:, None] \
        + lam * eps[None, :] * g_row[:, None]
    amat = (_INV_SQRT_2PI / sd1) * k1w * np.exp(np.minimum(a_exp, _EXP_CLIP))
    bmat = (_INV_SQRT_2PI / sd0) * k0w * np.exp(np.minimum(b_exp, _EXP_CLIP))
    scal = np.exp(-q * (g_row * g_row + w_row * w_row - 2.0 * rho * g_row * w_row)) \
        / math.sqrt(1.0 - rho * rho)
    e0 = np.exp(lam * np.outer(delta, eps))
    return [(amat, bmat)], e0, scal


def _field_bound(field: np.ndarray, n_grid: int) -> float:
    """Lemma-style grid error bound 2 V_hat / N from discrete variation.

    `field` holds the summed integrand times the per-node cell area;
    rescaling to the unit square multiplies by N^2.
    """
    scaled = field * (n_grid * n_grid)
    mixed = np.abs(np.diff(np.diff(scaled, axis=0), axis=1)).sum()
    edges = np.abs(np.diff(scaled[-1, :])).sum() + np.abs(np.diff(scaled[:, -1])).sum()
    return 2.0 * float(mixed + edges) / n_grid


def _sup_density(spec: CopulaSpec, sd1: float, sd0: float) -> float:
    base = 1.0 / (2.0 * math.pi * sd1 * sd0)
    if spec.family == "independence":
        return base
    if spec.family == "fgm":
        return base * (1.0 + abs(spec.rho))
    return base / math.sqrt(1.0 - spec.rho * spec.rho)


def _smoothed_grid_terms(data: Dataset, nuis: FittedNuisances, kernel: KernelConfig,
                         quad: QuadratureConfig, u_star: PrincipalPoint,
                         counter: ClampCounter):
    """Mean over rows of <<e_hat>> and <<(mu1_hat - mu0_hat) e_hat>>.

    Returns (denom_mean, term2_mean, denom_bound, term2_bound, work)
    where work counts grid multiply-accumulates (n * N^2 per weighted
    reduction stream).
    """
    n_grid = quad.grid_points_2d()
    half = quad.half_edge_2d(kernel.h)
    nodes1, d1 = midpoint_nodes(u_star.m1, half, n_grid)
    nodes0, d0 = midpoint_nodes(u_star.m0, half, n_grid)
    k1w = axis_profile(kernel, u_star.m1, nodes1) * d1
    k0w = axis_profile(kernel, u_star.m0, nodes0) * d0

    mean1, sd1, mean0, sd0 = _gaussian_ps_params(nuis.principal, data.x)
    delta = (nodes1 - u_star.m1) / sd1
    g_row = (u_star.m1 - mean1) / sd1
    eps = (nodes0 - u_star.m0) / sd0
    w_row = (u_star.m0 - mean0) / sd0
    counter.cdf_clamps += _count_tail_nodes(delta, g_row, _CLAMP_SD)
    counter.cdf_clamps += _count_tail_nodes(eps, w_row, _CLAMP_SD)

    a1, b1, a0, b0 = _affine_outcome(nuis.outcome, data.x)
    d_row = a1 - a0

    pairs, e0, scal = _pair_fields(nuis.copula, delta, g_row, eps, w_row, k1w, k0w, sd1, sd0)

    n = data.n
    denom_field = np.zeros((n_grid, n_grid))
    fld_d = np.zeros((n_grid, n_grid))
    fld_b1 = np.zeros((n_grid, n_grid))
    fld_b0 = np.zeros((n_grid, n_grid))
    for amat, bmat in pairs:
        for weight, out in ((scal, denom_field), (scal * d_row, fld_d),
                            (scal * b1, fld_b1), (scal * b0, fld_b0)):
            contrib = (amat * weight[:, None]).T @ bmat
            if e0 is not None:
                contrib *= e0
            out += contrib
    term2_field = fld_d + nodes1[:, None] * fld_b1 - nodes0[None, :] * fld_b0

    denom_mean = float(denom_field.sum()) / n
    term2_mean = float(term2_field.sum()) / n

    trunc_mass = _truncation_mass(quad, kernel.h)
    sup_e = _sup_density(nuis.copula, sd1, sd0)
    corners = np.abs(
        d_row[:, None]
        + np.outer(b1, [nodes1[0], nodes1[-1], nodes1[0], nodes1[-1]])
        - np.outer(b0, [nodes0[0], nodes0[0], nodes0[-1], nodes0[-1]])
    )
    sup_mu = float(corners.max()) if corners.size else 0.0
    denom_bound = sup_e * trunc_mass + _field_bound(denom_field / n, n_grid)
    term2_bound = sup_e * sup_mu * trunc_mass + _field_bound(term2_field / n, n_grid)
    work = 4 * len(pairs) * n * n_grid * n_grid
    return denom_mean, term2_mean, denom_bound, term2_bound, work


def _truncation_mass(quad: QuadratureConfig, h: float) -> float:
    t = quad.half_edge_2d(h) / h
    inside = 2.0 * ndtr(t) - 1.0
    return max(0.0, 1.0 - inside * inside)


def _gamma_over_f(spec: CopulaSpec, a_row: np.ndarray, beta_nodes: np.ndarray,
                  w_row: np.ndarray, weights: np.ndarray, sd_free: float,
                  counter: ClampCounter) -> np.ndarray:
    """Row-wise integral I_i = sum_k weights_k c(u_i, v_ik) f_free(t_k).

    This is gamma1 divided by the (row-constant) pinned-axis density
    f_hat_{z m}(x), which cancels exactly against the same factor in
    xi1; computing the ratio directly avoids needless underflow. `a_row`
    holds the pinned-axis standardized residuals, `beta_nodes` the
    free-axis grid offsets (ascending), `w_row` the free-axis row
    shifts.
    """
    n = a_row.size
    n_nodes = beta_nodes.size
    counter.cdf_clamps += int(np.count_nonzero(np.abs(a_row) > _CLAMP_SD))
    counter.cdf_clamps += _count_tail_nodes(beta_nodes, w_row, _CLAMP_SD)
    out = np.empty(n)
    chunk = max(1, int(4_000_000 // max(n_nodes, 1)))
    for start in range(0, n, chunk):
        sl = slice(start, min(start + chunk, n))
        beta = beta_nodes[None, :] + w_row[sl, None]
        if spec.family == "independence":
            vals = _INV_SQRT_2PI / sd_free * np.exp(-0.5 * beta * beta)
        elif spec.family == "fgm":
            f_free = _INV_SQRT_2PI / sd_free * np.exp(-0.5 * beta * beta)
            u_pin = ndtr(a_row[sl])
            vals = f_free * (1.0 + spec.rho * (1.0 - 2.0 * u_pin[:, None]) * (1.0 - 2.0 * ndtr(beta)))
        else:
            rho = spec.rho
            one_minus = 1.0 - rho * rho
            resid = beta - rho * a_row[sl, None]
            vals = (_INV_SQRT_2PI / (sd_free * math.sqrt(one_minus))) \
                * np.exp(-0.5 * resid * resid / one_minus)
        out[sl] = vals @ weights
    return out


def _residual_term(data: Dataset, nuis: FittedNuisances, kernel: KernelConfig,
                   quad: QuadratureConfig, u_star: PrincipalPoint,
                   counter: ClampCounter, floor_mode: str):
    """Mean over rows of xi1_hat * (y - mu_hat_Z); returns (mean, work)."""
    n_nodes = quad.grid_points_1d()
    mean1, sd1, mean0, sd0 = _gaussian_ps_params(nuis.principal, data.x)
    p1 = np.asarray(nuis.treatment.prob1(data.x), dtype=float)
    p1c = np.clip(p1, PI_CLAMP, 1.0 - PI_CLAMP)
    counter.pi_clamps += int(np.count_nonzero(p1c != p1))
    mu_obs = np.asarray(nuis.outcome.mean(data.x, data.z.astype(float), data.m), dtype=float)
    resid = data.y - mu_obs

    contrib = np.zeros(data.n)
    work = 0
    for z_val in (1, 0):
        idx = np.flatnonzero(data.z == z_val)
        if idx.size == 0:
            continue
        m_obs = data.m[idx]
        if z_val == 1:
            pin_center, pin_sd, pin_mean = u_star.m1, sd1, mean1[idx]
            free_center, free_sd, free_mean = u_star.m0, sd0, mean0[idx]
            pi_z = p1c[idx]
        else:
            pin_center, pin_sd, pin_mean = u_star.m0, sd0, mean0[idx]
            free_center, free_sd, free_mean = u_star.m1, sd1, mean1[idx]
            pi_z = 1.0 - p1c[idx]
        a_row = (m_obs - pin_mean) / pin_sd
        f_pin = _INV_SQRT_2PI / pin_sd * np.exp(-0.5 * a_row * a_row)
        low = f_pin < DENSITY_FLOOR
        if np.any(low):
            if floor_mode == "error":
                row = int(idx[np.argmax(low)])
                raise EstimationError(
                    f"principal-score density underflow at row {row} "
                    f"(f = {float(f_pin[np.argmax(low)]):.3e} < {DENSITY_FLOOR})"
                )
            counter.density_floor_hits += int(np.count_nonzero(low))
        # Ratio f / max(f, floor): 1 where healthy, <1 where clamped.
        ratio = np.where(low, f_pin / DENSITY_FLOOR, 1.0)

        half = quad.half_width_1d(kernel.h)
        nodes, spacing = midpoint_nodes(free_center, half, n_nodes)
        weights = axis_profile(kernel, free_center, nodes) * spacing
        beta_nodes = (nodes - free_center) / free_sd
        w_row = (free_center - free_mean) / free_sd
        integral = _gamma_over_f(nuis.copula, a_row, beta_nodes, w_row, weights,
                                 free_sd, counter)
        pin_kernel = axis_profile(kernel, pin_center, m_obs)
        sign = 1.0 if z_val == 1 else -1.0
        contrib[idx] = sign * pin_kernel * integral * ratio / pi_z
        work += idx.size * n_nodes
    return float(np.mean(contrib * resid)), work


# ---------------------------------------------------------------------------
# Adaptive-mode integrals (per-row oracle quadrature).

def _adaptive_terms(data: Dataset, nuis: FittedNuisances, kernel: KernelConfig,
                    quad: QuadratureConfig, u_star: PrincipalPoint,
                    counter: ClampCounter):
    mean1, sd1, mean0, sd0 = _gaussian_ps_params(nuis.principal, data.x)
    a1, b1, a0, b0 = _affine_outcome(nuis.outcome, data.x)
    d_row = a1 - a0
    n = data.n
    spec = nuis.copula

    def mean_density(m1, m0, row_weight=None):
        m1 = np.asarray(m1, dtype=float)
        m0 = np.asarray(m0, dtype=float)
        shape = np.broadcast(m1, m0).shape
        out = np.zeros(shape)
        w_sum = np.zeros(shape)
        alpha = (m1[..., None] - mean1) / sd1
        beta = (m0[..., None] - mean0) / sd0
        f1 = _INV_SQRT_2PI / sd1 * np.exp(-0.5 * alpha * alpha)
        f0 = _INV_SQRT_2PI / sd0 * np.exp(-0.5 * beta * beta)
        c = copula_density(spec, clamp_cdf(ndtr(alpha), counter), clamp_cdf(ndtr(beta), counter))
        dens = c * f1 * f0
        if row_weight is None:
            return dens.mean(axis=-1)
        weight = d_row + b1 * m1[..., None] - b0 * m0[..., None]
        return (dens * weight).mean(axis=-1)

    denom = adaptive_oracle_2d(u_star, kernel, lambda s, t: mean_density(s, t), quad.adaptive_tol)
    term2 = adaptive_oracle_2d(u_star, kernel, lambda s, t: mean_density(s, t, row_weight=True),
                               quad.adaptive_tol)
    return denom, term2


def _adaptive_residual(data: Dataset, nuis: FittedNuisances, kernel: KernelConfig,
                       quad: QuadratureConfig, u_star: PrincipalPoint,
                       counter: ClampCounter, floor_mode: str) -> float:
    mean1, sd1, mean0, sd0 = _gaussian_ps_params(nuis.principal, data.x)
    p1 = np.asarray(nuis.treatment.prob1(data.x), dtype=float)
    p1c = np.clip(p1, PI_CLAMP, 1.0 - PI_CLAMP)
    counter.pi_clamps += int(np.count_nonzero(p1c != p1))
    mu_obs = np.asarray(nuis.outcome.mean(data.x, data.z.astype(float), data.m), dtype=float)
    resid = data.y - mu_obs
    spec = nuis.copula
    half = quad.half_width_1d(kernel.h)
    contrib = np.zeros(data.n)
    for i in range(data.n):
        z_val = int(data.z[i])
        m_obs = float(data.m[i])
        if z_val == 1:
            pin_center, pin_sd, pin_mean = u_star.m1, sd1, float(mean1[i])
            free_center, free_sd, free_mean = u_star.m0, sd0, float(mean0[i])
            pi_z = float(p1c[i])
        else:
            pin_center, pin_sd, pin_mean = u_star.m0, sd0, float(mean0[i])
            free_center, free_sd, free_mean = u_star.m1, sd1, float(mean1[i])
            pi_z = 1.0 - float(p1c[i])
        a_val = (m_obs - pin_mean) / pin_sd
        f_pin = _INV_SQRT_2PI / pin_sd * math.exp(-0.5 * a_val * a_val)
        ratio = 1.0
        if f_pin < DENSITY_FLOOR:
            if floor_mode == "error":
                raise EstimationError(
                    f"principal-score density underflow at row {i} (f = {f_pin:.3e})"
                )
            counter.density_floor_hits += 1
            ratio = f_pin / DENSITY_FLOOR
        u_pin = clamp_cdf(ndtr(a_val), counter)

        def integrand(t):
            t = np.asarray(t, dtype=float)
            beta = (t - free_mean) / free_sd
            f_free = _INV_SQRT_2PI / free_sd * np.exp(-0.5 * beta * beta)
            # For z = 1 the pinned coordinate is the copula's first
            # argument, for z = 0 the second; all shipped families are
            # symmetric, so one call covers both.
            c = copula_density(spec, np.full_like(t, u_pin), clamp_cdf(ndtr(beta), counter))
            k_free = axis_profile(kernel, free_center, t)
            return c * f_free * k_free

        integral = adaptive_oracle_1d(free_center, half, integrand, quad.adaptive_tol)
        pin_kernel = float(axis_profile(kernel, pin_center, np.asarray([m_obs]))[0])
        sign = 1.0 if z_val == 1 else -1.0
        contrib[i] = sign * pin_kernel * integral * ratio / pi_z
    return float(np.mean(contrib * resid))


# ---------------------------------------------------------------------------
# Public estimation entry points.

def estimate_point(data: Dataset, nuis: FittedNuisances, kernel: KernelConfig,
                   quad: QuadratureConfig, u_star: PrincipalPoint,
                   floor_mode: str = "error") -> PointEstimate:
    """Doubly robust estimate of the localized effect at stratum u*.

    Raises
    ------
    EstimationError
        If the smoothed stratum density P_n<<e_hat>> falls below 1e-10
        (the stratum carries no data) or a principal-score density
        underflows with floor_mode="error".
    """
    if floor_mode not in FLOOR_MODES:
        raise ConfigError(f"floor_mode must be one of {FLOOR_MODES}")
    u_star = PrincipalPoint(float(u_star[0]), float(u_star[1]))
    counter = ClampCounter()
    if quad.mode == MODE_ADAPTIVE:
        denom, term2 = _adaptive_terms(data, nuis, kernel, quad, u_star, counter)
        denom_bound = term2_bound = quad.adaptive_tol
        if denom <= DENOM_FLOOR:
            raise EstimationError(
                f"stratum {tuple(u_star)} has negligible estimated density "
                f"({denom:.3e}); widen h or move u*"
            )
        term1 = _adaptive_residual(data, nuis, kernel, quad, u_star, counter, floor_mode)
        work = 0
    else:
        denom, term2, denom_bound, term2_bound, work2 = _smoothed_grid_terms(
            data, nuis, kernel, quad, u_star, counter)
        if denom <= DENOM_FLOOR:
            raise EstimationError(
                f"stratum {tuple(u_star)} has negligible estimated density "
                f"({denom:.3e}); widen h or move u*"
            )
        term1, work1 = _residual_term(data, nuis, kernel, quad, u_star, counter, floor_mode)
        work = work1 + work2
    tau = (term1 + term2) / denom
    diagnostics = {
        "clamp_counts": counter.as_dict(),
        "quad_bound": {"denominator": denom_bound, "smoothed_term": term2_bound},
        "quad_mode": quad.mode,
        "grid_work": work,
    }
    return PointEstimate(u_star, float(tau), float(denom), kernel.h, data.n,
                         float(term1), float(term2), diagnostics)


def estimate_surface(data: Dataset, nuis: FittedNuisances, kernel: KernelConfig,
                     quad: QuadratureConfig, grid: GridSpec,
                     floor_mode: str = "error") -> SurfaceEstimate:
    """estimate_point at every grid node; failures become missing nodes."""
    nodes = []
    for u in grid.points():
        try:
            est = estimate_point(data, nuis, kernel, quad, u, floor_mode)
            nodes.append(SurfaceNode(u, est))
        except EstimationError as exc:
            nodes.append(SurfaceNode(u, None, reason=str(exc)))
    if all(node.estimate is None for node in nodes):
        raise EstimationError("every grid node failed; no estimable stratum in the grid")
    return SurfaceEstimate(grid, tuple(nodes))


# ---------------------------------------------------------------------------
# Pipeline + bootstrap.

@dataclass(frozen=True)
class Pipeline:
    """Everything needed to rerun estimation end to end on new data.

    `fit` maps a dataset to the (treatment, outcome, principal) triple;
    bandwidth is either fixed (`h`) or derived from a named rule at the
    observed sample size. The quadrature config is re-targeted to each
    dataset's n unless frozen.
    """

    copula: CopulaSpec
    h: Optional[float] = None
    bandwidth_rule: str = "optimal"
    bandwidth_scale: Optional[float] = None
    quad: Optional[QuadratureConfig] = None
    floor_mode: str = "error"
    fit: Callable = fit_parametric

    def kernel_for(self, n: int) -> KernelConfig:
        if self.h is not None:
            return KernelConfig(self.h)
        rule = BANDWIDTH_RULES.get(self.bandwidth_rule)
        if rule is None:
            raise ConfigError(f"unknown bandwidth rule {self.bandwidth_rule!r}")
        if self.bandwidth_scale is None:
            return KernelConfig(rule(n))
        return KernelConfig(rule(n, self.bandwidth_scale))

    def quad_for(self, n: int) -> QuadratureConfig:
        if self.quad is None:
            return QuadratureConfig(n=n)
        return self.quad

    def nuisances(self, data: Dataset) -> FittedNuisances:
        treatment, outcome, principal = self.fit(data)
        return FittedNuisances(treatment, outcome, principal, self.copula)

    def estimate(self, data: Dataset, u_star: PrincipalPoint) -> PointEstimate:
        return estimate_point(data, self.nuisances(data), self.kernel_for(data.n),
                              self.quad_for(data.n), u_star, self.floor_mode)


def _bootstrap_one(args):
    data, pipeline, u_star, seed_entropy = args
    rng = np.random.default_rng(seed_entropy)
    idx = rng.integers(0, data.n, size=data.n)
    resample = data.subset(idx)
    est = pipeline.estimate(resample, u_star)
    return est.tau_hat


def bootstrap(data: Dataset, pipeline: Pipeline, u_star: PrincipalPoint, B: int,
              alpha: float = 0.05, seed: int = 0, threads: int = 1,
              tau_hat: Optional[float] = None, method: str = "percentile") -> BootstrapResult:
    """Nonparametric bootstrap of the full pipeline.

    Rows are resampled with replacement B times; every replicate refits
    all three nuisance models before re-estimating, so the interval
    reflects nuisance-estimation variability. Replicate sub-seeds are
    spawned from the master seed independently of execution order, so
    results are identical for any worker count. Failing replicates are
    dropped and counted; more than 20% failures is an error.
    """
    if B < 2:
        raise ConfigError("bootstrap needs B >= 2")
    if not 0.0 < alpha < 1.0:
        raise ConfigError("alpha must lie in (0, 1)")
    if method not in ("percentile", "normal"):
        raise ConfigError("method must be 'percentile' or 'normal'")
    children = np.random.SeedSequence(seed).spawn(B)
    tasks = [(data, pipeline, u_star, child) for child in children]
    values: list[Optional[float]] = [None] * B
    failures: list[tuple[int, str]] = []
    if threads > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = pool.map(_bootstrap_safe, tasks, chunksize=max(1, B // (4 * threads)))
            for b, outcome in enumerate(results):
                if isinstance(outcome, str):
                    failures.append((b, outcome))
                else:
                    values[b] = outcome
    else:
        for b, task in enumerate(tasks):
            outcome = _bootstrap_safe(task)
            if isinstance(outcome, str):
                failures.append((b, outcome))
            else:
                values[b] = outcome
    good = np.array([v for v in values if v is not None], dtype=float)
    if len(failures) > 0.2 * B:
        breakdown = Counter(reason for _, reason in failures)
        raise EstimationError(
            f"{len(failures)}/{B} bootstrap replicates failed: {dict(breakdown)}"
        )
    se = float(np.std(good, ddof=1)) if good.size > 1 else 0.0
    if method == "normal":
        if tau_hat is None:
            raise ConfigError("normal-approximation CI needs the point estimate tau_hat")
        zcrit = float(-norm_ppf(alpha / 2.0))
        ci = (tau_hat - zcrit * se, tau_hat + zcrit * se)
    else:
        lo, hi = np.percentile(good, [100.0 * alpha / 2.0, 100.0 * (1.0 - alpha / 2.0)])
        ci = (float(lo), float(hi))
    return BootstrapResult(
        se=se, ci=ci, replicates=good, seed=seed, alpha=alpha,
        n_failed=len(failures),
        failure_reasons=dict(Counter(reason for _, reason in failures)),
        method=method,
    )


def _bootstrap_safe(task):
    try:
        return _bootstrap_one(task)
    except EstimationError as exc:
        return f"EstimationError: {exc}"
    except Exception as exc:  # nuisance fit failures etc.
        return f"{type(exc).__name__}: {exc}"


def integration_workload(data: Dataset, nuis: FittedNuisances, kernel: KernelConfig,
                         quad: QuadratureConfig, u_star: PrincipalPoint) -> dict:
    """Run only the per-dataset integrations and report cost.

    Used by the complexity benchmark: returns wall-clock seconds and the
    grid multiply-accumulate count for the 2-D and 1-D passes.
    """
    counter = ClampCounter()
    start = time.perf_counter()
    *_unused, work2 = _smoothed_grid_terms(data, nuis, kernel, quad, u_star, counter)
    _, work1 = _residual_term(data, nuis, kernel, quad, u_star, counter, "clamp")
    elapsed = time.perf_counter() - start
    return {"seconds": elapsed, "work": work1 + work2, "n": data.n,
            "grid_2d": quad.grid_points_2d(), "grid_1d": quad.grid_points_1d()}
