"""Parametric nuisance models and their fitting routines.

Three nuisance functions feed the estimator: the treatment probability
pi_z(x) (logistic regression of z on covariates), the outcome mean
mu_z(x, m) (linear regression of y on 1, x, z, m and x*z interactions),
and the principal score f_{zm}(x) (Gaussian linear regression of m on
1, x, z with homoscedastic residual variance).

Fitted models are immutable and shareable. Each model class also
defines the duck interface the estimator consumes, so alternative
(e.g. nonparametric) strategies can be plugged in later: a treatment
model needs ``prob1(X)``, an outcome model ``mean(X, z, m)`` and
``affine(X, z)``, a principal-score model ``conditional_mean(X, z)``
plus ``conditional_sd(z)`` (Gaussian family).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import qr
from scipy.special import expit, ndtr

from .data import Dataset
from .errors import FitError

IRLS_TOL = 1e-8
IRLS_MAX_ITER = 100
SEPARATION_NORM = 1e3

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _as_matrix(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x[None, :] if x.ndim == 1 else x


def design_treatment(x) -> np.ndarray:
    x = _as_matrix(x)
    return np.column_stack([np.ones(x.shape[0]), x])


def design_outcome(x, z, m) -> np.ndarray:
    x = _as_matrix(x)
    n = x.shape[0]
    z = np.broadcast_to(np.asarray(z, dtype=float), (n,))
    m = np.broadcast_to(np.asarray(m, dtype=float), (n,))
    return np.column_stack([np.ones(n), x, z, m, x * z[:, None]])


def design_principal(x, z) -> np.ndarray:
    x = _as_matrix(x)
    n = x.shape[0]
    z = np.broadcast_to(np.asarray(z, dtype=float), (n,))
    return np.column_stack([np.ones(n), x, z])


def outcome_column_names(p: int) -> list[str]:
    return (["intercept"] + [f"x{j}" for j in range(1, p + 1)] + ["z", "m"]
            + [f"x{j}:z" for j in range(1, p + 1)])


def principal_column_names(p: int) -> list[str]:
    return ["intercept"] + [f"x{j}" for j in range(1, p + 1)] + ["z"]


def _check_full_rank(design: np.ndarray, names: list[str], what: str) -> None:
    _, r, piv = qr(design, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = diag[0] * max(design.shape) * np.finfo(float).eps if diag[0] > 0 else 0.0
    rank = int(np.sum(diag > tol))
    if rank < design.shape[1]:
        bad = ", ".join(names[j] for j in sorted(piv[rank:]))
        raise FitError(f"{what} design matrix is rank deficient; collinear column(s): {bad}")


@dataclass(frozen=True)
class TreatmentModel:
    """Logistic model for P(Z=1 | X) on the basis (1, x)."""

    coefficients: np.ndarray
    iterations: int = 0
    grad_norm: float = 0.0

    def prob1(self, x) -> np.ndarray:
        return expit(design_treatment(x) @ self.coefficients)


@dataclass(frozen=True)
class OutcomeModel:
    """Linear model for E(Y | X, Z, M) on the basis (1, x, z, m, x*z)."""

    coefficients: np.ndarray

    def mean(self, x, z, m):
        return design_outcome(x, z, m) @ self.coefficients

    def affine(self, x, z) -> tuple[np.ndarray, np.ndarray]:
        """Decompose mu_z(x, m) = a(x, z) + b * m with b the m-slope."""
        x = _as_matrix(x)
        p = x.shape[1]
        c = self.coefficients
        a = c[0] + x @ c[1:p + 1] + z * (c[p + 1] + x @ c[p + 3:])
        b = np.full(x.shape[0], c[p + 2])
        return a, b


class GaussianPrincipalScore:
    """Base for conditional-Gaussian principal-score models.

    Subclasses provide ``conditional_mean(x, z)`` (vectorized over rows)
    and ``conditional_sd(z)``; density and CDF follow from normality.
    """

    def conditional_mean(self, x, z) -> np.ndarray:
        raise NotImplementedError

    def conditional_sd(self, z) -> float:
        raise NotImplementedError

    def density(self, x, z, m):
        sd = self.conditional_sd(z)
        t = (np.asarray(m, dtype=float) - self.conditional_mean(x, z)) / sd
        return _INV_SQRT_2PI * np.exp(-0.5 * t * t) / sd

    def cdf(self, x, z, m):
        sd = self.conditional_sd(z)
        return ndtr((np.asarray(m, dtype=float) - self.conditional_mean(x, z)) / sd)


@dataclass(frozen=True)
class PrincipalScoreModel(GaussianPrincipalScore):
    """Gaussian linear model f_{zm}(x) = N(ell^T (1, x, z), sigma2)."""

    ell: np.ndarray
    sigma2: float

    def __post_init__(self):
        if not (self.sigma2 > 0.0 and np.isfinite(self.sigma2)):
            raise FitError(f"principal score needs sigma2 > 0, got {self.sigma2}")

    def conditional_mean(self, x, z) -> np.ndarray:
        return design_principal(x, z) @ self.ell

    def conditional_sd(self, z) -> float:
        return math.sqrt(self.sigma2)


def _logistic_loglik(eta: np.ndarray, z: np.ndarray) -> float:
    return float(np.sum(z * eta - np.logaddexp(0.0, eta)))


def fit_treatment(data: Dataset) -> TreatmentModel:
    """Maximum-likelihood logistic regression of z on (1, x) via IRLS.

    Newton steps with step-halving on likelihood decrease; converges
    when the score norm drops below 1e-8. Diverging coefficients
    (norm > 1e3) are reported as likely perfect separation.
    """
    design = design_treatment(data.x)
    z = data.z.astype(float)
    w = np.zeros(design.shape[1])
    eta = design @ w
    loglik = _logistic_loglik(eta, z)
    for it in range(1, IRLS_MAX_ITER + 1):
        prob = expit(eta)
        grad = design.T @ (z - prob)
        grad_norm = float(np.linalg.norm(grad))
        if grad_norm <= IRLS_TOL:
            return TreatmentModel(w.copy(), iterations=it - 1, grad_norm=grad_norm)
        weights = np.clip(prob * (1.0 - prob), 1e-10, None)
        hess = design.T @ (weights[:, None] * design)
        try:
            delta = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError as exc:
            raise FitError(f"IRLS normal equations are singular: {exc}") from exc
        step = 1.0
        for _ in range(30):
            w_new = w + step * delta
            eta_new = design @ w_new
            ll_new = _logistic_loglik(eta_new, z)
            if ll_new >= loglik - 1e-12:
                break
            step *= 0.5
        w, eta, loglik = w_new, eta_new, ll_new
        if np.linalg.norm(w) > SEPARATION_NORM:
            raise FitError(
                "treatment fit diverged (coefficient norm > 1e3); data may be "
                "perfectly separated - consider a ridge-penalized fallback"
            )
    raise FitError(f"IRLS did not converge in {IRLS_MAX_ITER} iterations (|grad| = {grad_norm:.3e})")


def _ols(design: np.ndarray, response: np.ndarray, names: list[str], what: str) -> np.ndarray:
    _check_full_rank(design, names, what)
    coef, *_ = np.linalg.lstsq(design, response, rcond=None)
    return coef


def fit_outcome(data: Dataset) -> OutcomeModel:
    """Ordinary least squares of y on (1, x, z, m, x*z)."""
    design = design_outcome(data.x, data.z.astype(float), data.m)
    coef = _ols(design, data.y, outcome_column_names(data.p), "outcome")
    return OutcomeModel(coef)


def fit_principal_score(data: Dataset) -> PrincipalScoreModel:
    """Gaussian linear fit of m on (1, x, z); residual variance uses
    denominator n - p - 2 (degrees of freedom after the p + 2 coefficients)."""
    design = design_principal(data.x, data.z.astype(float))
    coef = _ols(design, data.m, principal_column_names(data.p), "principal score")
    resid = data.m - design @ coef
    dof = data.n - design.shape[1]
    if dof <= 0:
        raise FitError("not enough rows to estimate the residual variance")
    sigma2 = float(resid @ resid) / dof
    if sigma2 <= 1e-10 * max(1.0, float(np.var(data.m))):
        raise FitError(f"degenerate principal-score fit: residual variance {sigma2:.3e} is numerically zero")
    return PrincipalScoreModel(coef, sigma2)


# --- Spec-level prediction operations -------------------------------------

def predict_pi(model: TreatmentModel, x, z) -> float | np.ndarray:
    """P(Z = z | X = x); the two arms sum to one exactly."""
    p1 = model.prob1(x)
    out = p1 if z == 1 else 1.0 - p1
    return float(out[0]) if np.asarray(x).ndim == 1 else out


def predict_mu(model: OutcomeModel, x, z, m) -> float | np.ndarray:
    out = model.mean(x, z, m)
    return float(out[0]) if np.asarray(x).ndim == 1 else out


def ps_density(model: GaussianPrincipalScore, x, z, m) -> float | np.ndarray:
    out = model.density(_as_matrix(x), z, m)
    return float(out[0]) if np.asarray(x).ndim == 1 else out


def ps_cdf(model: GaussianPrincipalScore, x, z, m) -> float | np.ndarray:
    out = model.cdf(_as_matrix(x), z, m)
    return float(out[0]) if np.asarray(x).ndim == 1 else out


# --- Serialization ---------------------------------------------------------

def models_to_json(treatment: TreatmentModel, outcome: OutcomeModel,
                   principal: PrincipalScoreModel) -> str:
    doc = {
        "treatment": {"coefficients": [float(v) for v in treatment.coefficients]},
        "outcome": {"coefficients": [float(v) for v in outcome.coefficients]},
        "principal_score": {
            "ell": [float(v) for v in principal.ell],
            "sigma2": float(principal.sigma2),
        },
    }
    return json.dumps(doc, indent=2, sort_keys=True)


def models_from_json(text: str) -> tuple[TreatmentModel, OutcomeModel, PrincipalScoreModel]:
    doc = json.loads(text)
    return (
        TreatmentModel(np.asarray(doc["treatment"]["coefficients"], dtype=float)),
        OutcomeModel(np.asarray(doc["outcome"]["coefficients"], dtype=float)),
        PrincipalScoreModel(
            np.asarray(doc["principal_score"]["ell"], dtype=float),
            float(doc["principal_score"]["sigma2"]),
        ),
    )
