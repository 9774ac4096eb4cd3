#!/usr/bin/env python3
"""
QHet - Null Distribution Approximations
=======================================
Approximations to the null distribution of Q:

- ChiSq: chi-square with K - 1 df for Q_IV
- 2M SSW: two-moment gamma fit to Q_F
- F SSW: Q_F as a weighted sum of chi-square(1) variables

The SSW approximations plug in estimated p_iT either directly from the
treatment arm (naive) or through h(p_C) + a fixed-weights mean effect
(model-based).
"""

import math
import logging
from enum import Enum
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import quad
from scipy.stats import chi2, gamma

from effects import Measure, Study, arm_transform, clamp_probability, link
from moments_core import ArmSpec, MomentSet, arm_moments, effect_moments
from qstat import WeightScheme, cochran_q, q_matrix, weights

logger = logging.getLogger(__name__)

EIGENVALUE_TOL = 1e-10
RUBEN_BETA_FACTOR = 0.90625
RUBEN_TOL = 1e-10
RUBEN_MAX_TERMS = 10000
RUBEN_BLOCK = 64


class PlugInMode(Enum):
    NAIVE = "naive"
    MODEL_BASED = "model"


class ApproxMethod(Enum):
    CHISQ = "ChiSq"
    TWO_MOMENT_NAIVE = "2M_SSW_naive"
    TWO_MOMENT_MODEL = "2M_SSW_model"
    FAREBROTHER_NAIVE = "F_SSW_naive"
    FAREBROTHER_MODEL = "F_SSW_model"

    @property
    def statistic(self) -> str:
        return "q_iv" if self is ApproxMethod.CHISQ else "q_f"

    @property
    def mode(self) -> Optional[PlugInMode]:
        if self is ApproxMethod.CHISQ:
            return None
        return PlugInMode.NAIVE if self.value.endswith("naive") else PlugInMode.MODEL_BASED

    @property
    def is_two_moment(self) -> bool:
        return self in (ApproxMethod.TWO_MOMENT_NAIVE, ApproxMethod.TWO_MOMENT_MODEL)

    @property
    def is_farebrother(self) -> bool:
        return self in (ApproxMethod.FAREBROTHER_NAIVE, ApproxMethod.FAREBROTHER_MODEL)


ALL_METHODS: Tuple[ApproxMethod, ...] = tuple(ApproxMethod)


class DegenerateMomentsError(ValueError):
    pass


class QuadraticFormError(ArithmeticError):
    pass


@dataclass(frozen=True)
class PlugInContext:
    p_hat_c: np.ndarray
    p_hat_t: np.ndarray
    mode: PlugInMode

    def __post_init__(self):
        for name in ("p_hat_c", "p_hat_t"):
            p = getattr(self, name)
            if np.any(p <= 0) or np.any(p >= 1):
                raise ValueError(f"{name} must lie strictly inside (0, 1): {p}")


@dataclass(frozen=True)
class QfMoments:
    mean: float
    variance: float

    @property
    def shape(self) -> float:
        return self.mean ** 2 / self.variance

    @property
    def scale(self) -> float:
        return self.variance / self.mean


@dataclass(frozen=True)
class ApproxResult:
    method: ApproxMethod
    p_value: float


def _clip_p(p: float) -> float:
    return float(min(1.0, max(0.0, p)))


# =============================================================================
# PLUG-IN PROBABILITIES AND MOMENTS
# =============================================================================

def plug_in_probs(studies: Sequence[Study], measure: Measure, mode: PlugInMode) -> PlugInContext:
    if len(studies) < 3:
        raise ValueError(f"plug-in estimation needs k >= 3 studies, got {len(studies)}")
    tables = [s.table for s in studies]
    x_c = np.array([t.x_c for t in tables])
    n_c = np.array([t.n_c for t in tables])
    x_t = np.array([t.x_t for t in tables])
    n_t = np.array([t.n_t for t in tables])

    tr = arm_transform(measure)
    p_c = clamp_probability(tr.estimate_p(x_c, n_c), n_c)
    if mode is PlugInMode.NAIVE:
        p_t = clamp_probability(tr.estimate_p(x_t, n_t), n_t)
    else:
        w = weights(studies, WeightScheme.EFFECTIVE_SAMPLE_SIZE)
        eta_bar = float(np.dot(w, [s.effect.estimate for s in studies]) / w.sum())
        lk = link(measure)
        p_t = lk.inverse(lk.h(p_c) + eta_bar, n_t)
    return PlugInContext(p_hat_c=np.asarray(p_c, dtype=float), p_hat_t=np.asarray(p_t, dtype=float), mode=mode)


def study_moments(ctx: PlugInContext, sizes: Sequence[Tuple[int, int]], measure: Measure) -> List[MomentSet]:
    """Effect moments per study; ``sizes`` holds (n_t, n_c) pairs."""
    tr = arm_transform(measure)
    out = []
    for (n_t, n_c), p_t, p_c in zip(sizes, ctx.p_hat_t, ctx.p_hat_c):
        treat = arm_moments(ArmSpec(int(n_t), float(p_t)), tr)
        ctrl = arm_moments(ArmSpec(int(n_c), float(p_c)), tr)
        out.append(effect_moments(treat, ctrl))
    return out


def quadratic_form_moments(A: np.ndarray, m2, m4) -> QfMoments:
    """Mean and variance of Theta^T A Theta for independent zero-mean Theta_i."""
    m2 = np.asarray(m2, dtype=float)
    m4 = np.asarray(m4, dtype=float)
    diag = np.diag(A)
    off = A ** 2
    np.fill_diagonal(off, 0.0)
    mean = float(np.dot(diag, m2))
    variance = float(np.dot(diag ** 2, m4 - m2 ** 2) + 2.0 * m2 @ off @ m2)
    if not (math.isfinite(mean) and math.isfinite(variance)) or mean <= 0 or variance <= 0:
        raise DegenerateMomentsError(f"degenerate Q_F moments: mean={mean}, variance={variance}")
    return QfMoments(mean=mean, variance=variance)


def qf_null_moments(ctx: PlugInContext, sizes: Sequence[Tuple[int, int]], measure: Measure, w) -> QfMoments:
    moments = study_moments(ctx, sizes, measure)
    return quadratic_form_moments(
        q_matrix(w),
        [m.m2 for m in moments],
        [m.m4 for m in moments],
    )


# =============================================================================
# P-VALUES
# =============================================================================

def p_value_chisq(q: float, k: int) -> ApproxResult:
    if k < 2:
        raise ValueError(f"chi-square approximation needs k >= 2, got {k}")
    return ApproxResult(ApproxMethod.CHISQ, _clip_p(chi2.sf(q, k - 1)) if q > 0 else 1.0)


def p_value_two_moment(q: float, moments: QfMoments,
                       method: ApproxMethod = ApproxMethod.TWO_MOMENT_NAIVE) -> ApproxResult:
    if moments.mean <= 0 or moments.variance <= 0:
        raise DegenerateMomentsError(f"gamma fit needs positive moments, got {moments}")
    if q <= 0:
        return ApproxResult(method, 1.0)
    return ApproxResult(method, _clip_p(gamma.sf(q, a=moments.shape, scale=moments.scale)))


def quadratic_form_eigenvalues(A: np.ndarray, var_hats) -> np.ndarray:
    """Eigenvalues of A diag(var_hats), via the symmetric S^1/2 A S^1/2."""
    var_hats = np.asarray(var_hats, dtype=float)
    if np.any(var_hats <= 0):
        raise ValueError("plug-in variances must be positive")
    s = np.sqrt(var_hats)
    b = s[:, None] * np.asarray(A, dtype=float) * s[None, :]
    b = 0.5 * (b + b.T)
    try:
        lam = np.linalg.eigvalsh(b)
    except np.linalg.LinAlgError as e:
        raise QuadraticFormError(f"eigen-decomposition failed: {e}") from e
    tol = EIGENVALUE_TOL * max(1.0, float(np.abs(lam).max()))
    if lam.min() < -tol:
        raise QuadraticFormError(f"matrix is not positive semidefinite: min eigenvalue {lam.min():.3e}")
    return np.where(lam < 0, 0.0, lam)


def _positive(lambdas) -> np.ndarray:
    lam = np.asarray(lambdas, dtype=float)
    if lam.size == 0:
        return lam
    return lam[lam > EIGENVALUE_TOL * max(1.0, lam.max())]


def weighted_chisq_sf_ruben(q: float, lambdas, tol: float = RUBEN_TOL,
                            max_terms: int = RUBEN_MAX_TERMS) -> Optional[float]:
    """
    P(sum lambda_j chi2_1 > q) by Ruben's mixture-of-chi-squares series.

    P(Q <= q) = sum_k a_k F_{m+2k}(q / beta) with beta < min lambda. Terms are
    added in blocks until (1 - sum a) * F_{m+2N+2}(q / beta) <= tol, which
    bounds the truncation error. Returns None when ``max_terms`` is reached
    without meeting the bound.
    """
    lam = _positive(lambdas)
    if lam.size == 0:
        return 0.0 if q >= 0 else 1.0
    if q <= 0:
        return 1.0

    m = lam.size
    beta = RUBEN_BETA_FACTOR * lam.min()
    gam = 1.0 - beta / lam
    x = q / beta

    a = np.zeros(max_terms + 1)
    g = np.zeros(max_terms + 1)
    a[0] = math.exp(0.5 * float(np.sum(np.log(beta / lam))))
    if a[0] == 0.0:
        return None
    powers = gam.copy()
    cdf = a[0] * chi2.cdf(x, m)
    mass = a[0]
    k = 0
    while k < max_terms:
        start = k + 1
        stop = min(k + RUBEN_BLOCK, max_terms)
        for j in range(start, stop + 1):
            g[j] = 0.5 * powers.sum()
            powers *= gam
            a[j] = np.dot(g[j:0:-1], a[:j]) / j
        dofs = m + 2 * np.arange(start, stop + 1)
        cdf += float(np.dot(a[start:stop + 1], chi2.cdf(x, dofs)))
        mass += float(a[start:stop + 1].sum())
        k = stop
        bound = max(0.0, 1.0 - mass) * chi2.cdf(x, m + 2 * (k + 1))
        if bound <= tol:
            return _clip_p(1.0 - cdf)
    return None


def weighted_chisq_sf_imhof(q: float, lambdas, epsabs: float = 1e-12, limit: int = 200) -> float:
    """P(sum lambda_j chi2_1 > q) by numerical inversion of the characteristic function.

    The integrand sin(phi(u) - q u / 2) / (u rho(u)) decays like u^(-1 - m/2),
    too slowly for a plain infinite-range quadrature when m is small. The first
    few periods are integrated directly; the tail is split into cosine and sine
    Fourier integrals of smooth envelopes and handed to QUADPACK's QAWF.
    """
    lam = _positive(lambdas)
    if lam.size == 0:
        return 0.0 if q >= 0 else 1.0
    if q <= 0:
        return 1.0
    omega = 0.5 * q

    def phase(u: float) -> float:
        return 0.5 * float(np.sum(np.arctan(lam * u)))

    def envelope(u: float) -> float:
        lu = lam * u
        return math.exp(-0.25 * float(np.sum(np.log1p(lu * lu))) - math.log(u))

    def integrand(u: float) -> float:
        return math.sin(phase(u) - omega * u) * envelope(u)

    split = 8.0 * math.pi / omega
    with np.errstate(over="ignore"):
        head, _ = quad(integrand, 0.0, split, limit=limit, epsabs=epsabs, epsrel=0.0)
        # sin(phi - w u) = sin(phi) cos(w u) - cos(phi) sin(w u)
        tail_cos, _ = quad(lambda u: math.sin(phase(u)) * envelope(u), split, np.inf,
                           weight="cos", wvar=omega, limlst=200, limit=limit, epsabs=epsabs)
        tail_sin, _ = quad(lambda u: math.cos(phase(u)) * envelope(u), split, np.inf,
                           weight="sin", wvar=omega, limlst=200, limit=limit, epsabs=epsabs)
    return _clip_p(0.5 + (head + tail_cos - tail_sin) / math.pi)


def weighted_chisq_sf(q: float, lambdas, tol: float = RUBEN_TOL) -> float:
    p = weighted_chisq_sf_ruben(q, lambdas, tol=tol)
    if p is None:
        logger.debug(f"[WARN] Ruben series hit {RUBEN_MAX_TERMS} terms; using inversion")
        p = weighted_chisq_sf_imhof(q, lambdas)
    return p


def p_value_farebrother(q: float, A: np.ndarray, var_hats,
                        method: ApproxMethod = ApproxMethod.FAREBROTHER_NAIVE) -> ApproxResult:
    lam = quadratic_form_eigenvalues(A, var_hats)
    return ApproxResult(method, weighted_chisq_sf(q, lam))


# =============================================================================
# ONE REPLICATION
# =============================================================================

def evaluate_methods(studies: Sequence[Study], measure: Measure, q_f: float,
                     q_iv: float = math.nan, k_iv: int = 0,
                     methods: Iterable[ApproxMethod] = ALL_METHODS) -> Dict[ApproxMethod, float]:
    """
    p-values of every requested method for one set of studies.

    ChiSq uses ``q_iv`` on ``k_iv`` studies and is NaN when fewer than 3
    studies entered Q_IV. The SSW methods share one moment computation per
    plug-in mode.
    """
    methods = tuple(methods)
    out: Dict[ApproxMethod, float] = {}

    if ApproxMethod.CHISQ in methods:
        usable = k_iv >= 3 and math.isfinite(q_iv)
        out[ApproxMethod.CHISQ] = p_value_chisq(q_iv, k_iv).p_value if usable else math.nan

    ssw = [m for m in methods if m is not ApproxMethod.CHISQ]
    if not ssw:
        return out

    sizes = [(s.table.n_t, s.table.n_c) for s in studies]
    A = q_matrix(weights(studies, WeightScheme.EFFECTIVE_SAMPLE_SIZE))
    for mode in PlugInMode:
        wanted = [m for m in ssw if m.mode is mode]
        if not wanted:
            continue
        ctx = plug_in_probs(studies, measure, mode)
        moments = study_moments(ctx, sizes, measure)
        m2 = np.array([ms.m2 for ms in moments])
        m4 = np.array([ms.m4 for ms in moments])
        for method in wanted:
            try:
                if method.is_two_moment:
                    res = p_value_two_moment(q_f, quadratic_form_moments(A, m2, m4), method)
                else:
                    res = p_value_farebrother(q_f, A, m2, method)
                out[method] = res.p_value
            except (DegenerateMomentsError, QuadraticFormError) as e:
                logger.warning(f"[WARN] {method.value} undefined for this replication: {e}")
                out[method] = math.nan
    return out


def q_f_statistic(studies: Sequence[Study]) -> float:
    w = weights(studies, WeightScheme.EFFECTIVE_SAMPLE_SIZE)
    return cochran_q([s.effect.estimate for s in studies], w).q
