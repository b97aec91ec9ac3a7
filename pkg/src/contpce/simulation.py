"""Data-generating processes, ground-truth oracles, and MC studies.

Two families of synthetic data ship here. The surrogate-evaluation
examples ("p1"/"p2") draw a bivariate covariate and bivariate latent
intermediates with cross-correlation 0.25; under p1 the true effect
surface is 0.75 * (m1 - m0), under p2 it is identically zero. The
benchmark family composes one of two treatment laws, one of two
intermediate laws, and one of two outcome laws over X ~ N(0, I_3),
indexed by a (tp, ps, om) triple with values in {1, 2}; variant 1 of
each is the one the parametric nuisance strategy specifies correctly.
The benchmark truth couples the two arms through a Gaussian copula
with rho = 0.5.

All sampling uses a counter-based Philox generator and inverse-CDF
normal draws, so every stochastic operation is a pure function of its
seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np
from scipy.special import expit, ndtri

from .copula import CopulaSpec, clamp_cdf, copula_density
from .data import Dataset, PrincipalPoint
from .errors import ConfigError, EstimationError
from .estimator import FittedNuisances, Pipeline, bootstrap, estimate_point
from .nuisance import GaussianPrincipalScore

SYNTHETIC_CORR = 0.25
BENCHMARK_RHO = 0.5
ORACLE_DEFAULT_MC = 1_000_000


def make_rng(seed) -> np.random.Generator:
    """Counter-based generator; accepts ints or spawned SeedSequences."""
    return np.random.Generator(np.random.Philox(seed))


def standard_normal(rng: np.random.Generator, size) -> np.ndarray:
    """Inverse-CDF normal draws from 53-bit uniforms strictly inside (0, 1)."""
    u = (rng.integers(0, 1 << 53, size=size, dtype=np.int64) + 0.5) * (2.0 ** -53)
    return ndtri(u)


# ---------------------------------------------------------------------------
# True nuisance functions (oracles for the estimator).

class TrueTreatment:
    def __init__(self, prob1_fn: Callable[[np.ndarray], np.ndarray]):
        self._prob1 = prob1_fn

    def prob1(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.asarray(self._prob1(x), dtype=float)


class TrueOutcome:
    """True outcome mean a(x, z) + slope * m with a given per arm."""

    def __init__(self, intercept_fn: Callable[[np.ndarray, int], np.ndarray], slope: float):
        self._intercept = intercept_fn
        self._slope = slope

    def affine(self, x, z: int):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        a = np.asarray(self._intercept(x, z), dtype=float)
        return a, np.full(x.shape[0], self._slope)

    def mean(self, x, z, m):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        z = np.broadcast_to(np.asarray(z, dtype=float), (x.shape[0],))
        m = np.broadcast_to(np.asarray(m, dtype=float), (x.shape[0],))
        a1, _ = self.affine(x, 1)
        a0, _ = self.affine(x, 0)
        return np.where(z == 1.0, a1, a0) + self._slope * m


class TrueGaussianPS(GaussianPrincipalScore):
    def __init__(self, mean_fn: Callable[[np.ndarray, int], np.ndarray], sd: float):
        self._mean = mean_fn
        self._sd = float(sd)

    def conditional_mean(self, x, z) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.asarray(self._mean(x, z), dtype=float)

    def conditional_sd(self, z) -> float:
        return self._sd


# ---------------------------------------------------------------------------
# Surrogate-evaluation synthetic examples.

SYNTHETIC_VARIANTS = ("p1", "p2")


class SyntheticDraw(NamedTuple):
    data: Dataset
    m1: np.ndarray
    m0: np.ndarray
    y1: np.ndarray
    y0: np.ndarray


def _corr_pair(rng: np.random.Generator, n: int, corr: float) -> tuple[np.ndarray, np.ndarray]:
    e1 = standard_normal(rng, n)
    e2 = standard_normal(rng, n)
    return e1, corr * e1 + math.sqrt(1.0 - corr * corr) * e2


def gen_synthetic(variant: str, n: int, seed) -> SyntheticDraw:
    """Draw the surrogate-evaluation example, keeping the latent arm values.

    Under "p1" the latent intermediates track the covariates and the
    outcome loads on m with slope 1/2, producing the linear effect
    surface 0.75 * (m1 - m0); under "p2" the intermediates are noise and
    the surface is zero.
    """
    if variant not in SYNTHETIC_VARIANTS:
        raise ConfigError(f"variant must be one of {SYNTHETIC_VARIANTS}")
    if n < 1:
        raise ConfigError("n must be positive")
    rng = make_rng(seed)
    x1, x0 = _corr_pair(rng, n, SYNTHETIC_CORR)
    z = (rng.integers(0, 2, size=n)).astype(np.int8)
    eps1, eps0 = _corr_pair(rng, n, SYNTHETIC_CORR)
    if variant == "p1":
        m1 = x1 + eps1
        m0 = x0 + eps0
        slope = 0.5
    else:
        m1 = eps1
        m0 = eps0
        slope = 0.0
    y1 = slope * m1 + x1 + 0.5 * x0 + standard_normal(rng, n)
    y0 = slope * m0 + x0 + 0.5 * x1 + standard_normal(rng, n)
    m = np.where(z == 1, m1, m0)
    y = np.where(z == 1, y1, y0)
    data = Dataset(np.column_stack([x1, x0]), z, m, y)
    return SyntheticDraw(data, m1, m0, y1, y0)


def synthetic_truth(variant: str) -> FittedNuisances:
    """True nuisances for the synthetic examples (oracle plug-ins)."""
    if variant not in SYNTHETIC_VARIANTS:
        raise ConfigError(f"variant must be one of {SYNTHETIC_VARIANTS}")
    slope = 0.5 if variant == "p1" else 0.0

    def intercept(x, z):
        own = x[:, 0] if z == 1 else x[:, 1]
        other = x[:, 1] if z == 1 else x[:, 0]
        return own + 0.5 * other

    if variant == "p1":
        def ps_mean(x, z):
            return x[:, 0] if z == 1 else x[:, 1]
    else:
        def ps_mean(x, z):
            return np.zeros(x.shape[0])

    return FittedNuisances(
        treatment=TrueTreatment(lambda x: np.full(x.shape[0], 0.5)),
        outcome=TrueOutcome(intercept, slope),
        principal=TrueGaussianPS(ps_mean, 1.0),
        copula=CopulaSpec("gaussian", SYNTHETIC_CORR),
    )


def synthetic_tau_star(variant: str, u: PrincipalPoint) -> float:
    """Closed-form effect surface of the synthetic examples."""
    if variant == "p1":
        return 0.75 * (float(u[0]) - float(u[1]))
    return 0.0


# ---------------------------------------------------------------------------
# Benchmark settings.

@dataclass(frozen=True)
class BenchmarkSetting:
    """One cell of the 2 x 2 x 2 benchmark family."""

    tp: int
    ps: int
    om: int
    n: int
    seed: int = 0

    def __post_init__(self):
        for name in ("tp", "ps", "om"):
            if getattr(self, name) not in (1, 2):
                raise ConfigError(f"{name} index must be 1 or 2")
        if self.n < 50:
            raise ConfigError("benchmark settings need n >= 50")

    @property
    def label(self) -> str:
        return f"{self.tp}{self.ps}{self.om}"

    @staticmethod
    def from_label(label: str, n: int, seed: int = 0) -> "BenchmarkSetting":
        if len(label) != 3 or any(ch not in "12" for ch in label):
            raise ConfigError(f"setting label must be three digits in {{1,2}}, got {label!r}")
        return BenchmarkSetting(int(label[0]), int(label[1]), int(label[2]), n, seed)


def _tp_prob(variant: int, x: np.ndarray) -> np.ndarray:
    if variant == 1:
        return expit(x[:, 1] + x[:, 2])
    return expit(0.5 * x[:, 0] ** 2 + 0.5 * x[:, 1] ** 3)


def _ps_mean(variant: int, x: np.ndarray, z) -> np.ndarray:
    z = np.broadcast_to(np.asarray(z, dtype=float), (x.shape[0],))
    if variant == 1:
        return 0.5 * (x[:, 0] + x[:, 1] + x[:, 2]) + z
    return x[:, 0] + z * (x[:, 0] ** 2 + 0.5 * x[:, 0] ** 3)


def _om_intercept(variant: int, x: np.ndarray, z) -> np.ndarray:
    z = np.broadcast_to(np.asarray(z, dtype=float), (x.shape[0],))
    if variant == 1:
        return x[:, 0] + x[:, 2] + z * (x[:, 0] + 1.0)
    return x[:, 1] + z * (x[:, 0] + x[:, 0] ** 2 + 0.2 * x[:, 0] ** 3)


NOISE_SD = 0.5


def gen_benchmark(setting: BenchmarkSetting) -> Dataset:
    """Draw X -> Z -> M -> Y sequentially from the chosen variants."""
    rng = make_rng(setting.seed)
    n = setting.n
    x = np.column_stack([standard_normal(rng, n) for _ in range(3)])
    z = (rng.random(n) < _tp_prob(setting.tp, x)).astype(np.int8)
    m = _ps_mean(setting.ps, x, z) + NOISE_SD * standard_normal(rng, n)
    y = _om_intercept(setting.om, x, z) + 0.5 * m + NOISE_SD * standard_normal(rng, n)
    return Dataset(x, z, m, y)


def benchmark_truth(setting: BenchmarkSetting,
                    copula: Optional[CopulaSpec] = None) -> FittedNuisances:
    """True nuisance functions for a benchmark cell."""
    tp, ps, om = setting.tp, setting.ps, setting.om
    return FittedNuisances(
        treatment=TrueTreatment(lambda x: _tp_prob(tp, x)),
        outcome=TrueOutcome(lambda x, z: _om_intercept(om, x, z), 0.5),
        principal=TrueGaussianPS(lambda x, z: _ps_mean(ps, x, z), NOISE_SD),
        copula=copula or CopulaSpec("gaussian", BENCHMARK_RHO),
    )


# ---------------------------------------------------------------------------
# Ground-truth oracle.

class OracleValue(NamedTuple):
    value: float
    mc_se: float
    n_mc: int


def oracle_tau_star(source, u: PrincipalPoint, copula: Optional[CopulaSpec] = None,
                    n_mc: int = ORACLE_DEFAULT_MC, seed: int = 2024_11) -> OracleValue:
    """Monte-Carlo ground truth at stratum u via the identification ratio.

    `source` is either a benchmark setting (or its "abc" label) or a
    synthetic variant name. Draws n_mc covariate vectors, evaluates the
    true outcome-mean contrast and the true copula-coupled stratum
    density, and returns the weighted ratio with its linearization MC
    standard error.
    """
    if n_mc < 10_000:
        raise ConfigError("oracle needs n_mc >= 10^4")
    rng = make_rng(seed)
    if isinstance(source, str) and source in SYNTHETIC_VARIANTS:
        truth = synthetic_truth(source)
        x1, x0 = _corr_pair(rng, n_mc, SYNTHETIC_CORR)
        x = np.column_stack([x1, x0])
    else:
        if isinstance(source, str):
            setting = BenchmarkSetting.from_label(source, n=50)
        else:
            setting = source
        truth = benchmark_truth(setting)
        x = np.column_stack([standard_normal(rng, n_mc) for _ in range(3)])
    if copula is not None:
        truth = FittedNuisances(truth.treatment, truth.outcome, truth.principal, copula)

    ps = truth.principal
    m1, m0 = float(u[0]), float(u[1])
    from .copula import clamp_cdf, copula_density  # local to avoid cycle at import

    f1 = ps.density(x, 1, m1)
    f0 = ps.density(x, 0, m0)
    dens = copula_density(truth.copula, clamp_cdf(ps.cdf(x, 1, m1)), clamp_cdf(ps.cdf(x, 0, m0))) * f1 * f0
    a1, b1 = truth.outcome.affine(x, 1)
    a0, b0 = truth.outcome.affine(x, 0)
    contrast = (a1 + b1 * m1) - (a0 + b0 * m0)
    denom = float(np.mean(dens))
    if denom <= 1e-300:
        raise EstimationError(f"oracle denominator underflow at u = {tuple(u)}")
    value = float(np.mean(contrast * dens)) / denom
    infl = (contrast - value) * dens / denom
    mc_se = float(np.std(infl, ddof=1) / math.sqrt(n_mc))
    return OracleValue(value, mc_se, n_mc)


# ---------------------------------------------------------------------------
# Monte-Carlo study driver.

@dataclass(frozen=True)
class PointSummary:
    u: PrincipalPoint
    oracle: float
    oracle_mc_se: float
    mean_bias: float
    rmse: float
    coverage: Optional[float]
    rounds_ok: int
    failures: int


@dataclass(frozen=True)
class StudyResult:
    setting: BenchmarkSetting
    rounds: int
    summaries: tuple[PointSummary, ...]
    records: tuple[dict, ...] = field(default=(), repr=False)


def _study_round(args):
    setting, points, pipeline, round_seed, round_index, do_coverage, B, alpha = args
    data = gen_benchmark(BenchmarkSetting(setting.tp, setting.ps, setting.om,
                                          setting.n, seed=round_seed))
    records = []
    try:
        nuis = pipeline.nuisances(data)
    except Exception as exc:
        return [{"round": round_index, "u_index": k, "status": f"fit-error: {exc}"}
                for k in range(len(points))]
    kernel = pipeline.kernel_for(data.n)
    quad = pipeline.quad_for(data.n)
    for k, u in enumerate(points):
        rec = {"round": round_index, "u_index": k, "m1": u[0], "m0": u[1]}
        try:
            est = estimate_point(data, nuis, kernel, quad, u, pipeline.floor_mode)
            rec["tau_hat"] = est.tau_hat
            rec["status"] = "ok"
            if do_coverage:
                boot = bootstrap(data, pipeline, u, B=B, alpha=alpha,
                                 seed=int(round_seed) if isinstance(round_seed, int) else round_index)
                rec["ci_lo"], rec["ci_hi"] = boot.ci
                rec["se"] = boot.se
        except EstimationError as exc:
            rec["status"] = f"estimation-error: {exc}"
        records.append(rec)
    return records


def run_mc_study(setting: BenchmarkSetting, points: Sequence[PrincipalPoint], rounds: int,
                 pipeline: Pipeline, seed: int = 0, coverage: bool = False,
                 B: int = 50, alpha: float = 0.05, oracle_n_mc: int = ORACLE_DEFAULT_MC,
                 threads: int = 1) -> StudyResult:
    """Bias / RMSE / coverage study of the estimator on a benchmark cell.

    Each round draws a fresh dataset with a sub-seed spawned from the
    master seed, fits the pipeline's nuisances, and estimates at every
    requested stratum. With coverage=True a full-pipeline bootstrap CI
    is computed per round and scored against the MC oracle truth.
    """
    if rounds < 1:
        raise ConfigError("rounds must be >= 1")
    points = [PrincipalPoint(float(u[0]), float(u[1])) for u in points]
    oracle_seed, *round_seeds = np.random.SeedSequence(seed).spawn(rounds + 1)
    oracles = [
        oracle_tau_star(setting, u, copula=pipeline.copula, n_mc=oracle_n_mc,
                        seed=oracle_seed)
        for u in points
    ]
    tasks = [
        (setting, points, pipeline, round_seeds[r], r, coverage, B, alpha)
        for r in range(rounds)
    ]
    if threads > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=threads) as pool:
            per_round = list(pool.map(_study_round, tasks, chunksize=1))
    else:
        per_round = [_study_round(task) for task in tasks]
    records = [rec for chunk in per_round for rec in chunk]

    summaries = []
    for k, u in enumerate(points):
        recs = [r for r in records if r["u_index"] == k]
        ok = [r for r in recs if r.get("status") == "ok"]
        failures = len(recs) - len(ok)
        if ok:
            taus = np.array([r["tau_hat"] for r in ok])
            bias = taus - oracles[k].value
            mean_bias = float(np.mean(bias))
            rmse = float(np.sqrt(np.mean(bias ** 2)))
            cov = None
            if coverage:
                hits = [r["ci_lo"] <= oracles[k].value <= r["ci_hi"] for r in ok if "ci_lo" in r]
                cov = float(np.mean(hits)) if hits else None
        else:
            mean_bias = float("nan")
            rmse = float("nan")
            cov = None
        summaries.append(PointSummary(u, oracles[k].value, oracles[k].mc_se,
                                      mean_bias, rmse, cov, len(ok), failures))
    return StudyResult(setting, rounds, tuple(summaries), tuple(records))
