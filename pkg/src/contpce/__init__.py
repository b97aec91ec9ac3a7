"""Principal causal effects over continuous strata.

Estimates kernel-localized principal causal effects for a continuous
intermediate variable: the joint stratum density is identified through
a user-chosen copula over the two single-arm conditional distributions,
nuisance functions are fit parametrically, and the effect at a stratum
u* = (m1, m0) is estimated by a doubly robust plug-in with truncated-
grid numerical integration and nonparametric bootstrap inference.
"""

from .copula import ClampCounter, CopulaSpec, copula_density, joint_principal_density, norm_ppf
from .data import (
    ColumnTransform,
    Dataset,
    GridSpec,
    Observation,
    PrincipalPoint,
    StandardizationRecord,
    read_csv,
    standardize,
    write_csv,
)
from .errors import (
    ConfigError,
    ContpceError,
    DataError,
    EstimationError,
    FitError,
    QuadratureError,
)
from .estimator import (
    BootstrapResult,
    FittedNuisances,
    Pipeline,
    PointEstimate,
    SurfaceEstimate,
    SurfaceNode,
    bootstrap,
    estimate_point,
    estimate_surface,
    fit_parametric,
    gamma1,
    xi1,
)
from .kernel import (
    BANDWIDTH_RULES,
    KernelConfig,
    bandwidth_optimal,
    bandwidth_undersmooth,
    kernel_marginal,
    kernel_weight,
)
from .nuisance import (
    GaussianPrincipalScore,
    OutcomeModel,
    PrincipalScoreModel,
    TreatmentModel,
    fit_outcome,
    fit_principal_score,
    fit_treatment,
    models_from_json,
    models_to_json,
    predict_mu,
    predict_pi,
    ps_cdf,
    ps_density,
)
from .quadrature import (
    QuadratureConfig,
    SmoothResult,
    adaptive_oracle_2d,
    smooth1d,
    smooth2d,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
