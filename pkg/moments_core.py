#!/usr/bin/env python3
"""
QHet - Exact Binomial Moments
=============================
Exact conditional central moments of transformed binomial proportions and of
two-arm effect estimates, by enumeration over all binomial outcomes.
"""

import math
import logging
from enum import Enum
from dataclasses import dataclass
from functools import lru_cache
from typing import Tuple

import numpy as np
from scipy.stats import binom
from scipy.special import logit

logger = logging.getLogger(__name__)

# pmf normalization tolerance
NORMALIZATION_TOL = 1e-12


class ArmTransform(Enum):
    """h(p) paired with the measure-specific estimator of p from X."""
    LOGIT_CORRECTED = "logit"      # logit((X + 1/2) / (n + 1))
    LOG_CORRECTED = "log"          # log((X + 1/2) / (n + 1/2))
    IDENTITY_ML = "identity"       # X / n

    def estimate_p(self, x: np.ndarray, n: int) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self is ArmTransform.LOGIT_CORRECTED:
            return (x + 0.5) / (n + 1.0)
        if self is ArmTransform.LOG_CORRECTED:
            return (x + 0.5) / (n + 0.5)
        return x / n

    def h(self, p):
        if self is ArmTransform.LOGIT_CORRECTED:
            return logit(p)
        if self is ArmTransform.LOG_CORRECTED:
            return np.log(p)
        return np.asarray(p, dtype=float)


@dataclass(frozen=True)
class ArmSpec:
    """One arm: sample size and (true or plugged-in) event probability."""
    n: int
    p: float

    def __post_init__(self):
        self.validate()

    def validate(self) -> bool:
        if int(self.n) != self.n or self.n < 1:
            raise ValueError(f"arm size must be a positive integer, got n={self.n}")
        if not (0.0 < self.p < 1.0):
            raise ValueError(f"arm probability must lie in (0, 1), got p={self.p}")
        return True


@dataclass(frozen=True)
class MomentSet:
    """Mean and central moments of orders 2-4."""
    mean: float
    m2: float
    m3: float
    m4: float

    def __post_init__(self):
        values = (self.mean, self.m2, self.m3, self.m4)
        if not all(math.isfinite(v) for v in values):
            raise ValueError(f"moments must be finite, got {values}")
        if self.m2 < 0 or self.m4 < 0:
            raise ValueError(f"even moments must be nonnegative, got m2={self.m2}, m4={self.m4}")


def binomial_weights(n: int, p: float) -> np.ndarray:
    """Bin(n, p) pmf over X = 0..n, accumulated in log space."""
    x = np.arange(n + 1)
    weights = np.exp(binom.logpmf(x, n, p))
    total = weights.sum()
    if abs(total - 1.0) > NORMALIZATION_TOL:
        raise ArithmeticError(f"binomial pmf for n={n}, p={p} sums to {total!r}")
    return weights


@lru_cache(maxsize=65536)
def _enumerate(n: int, p: float, transform: ArmTransform, about_true: bool) -> Tuple[float, float, float, float]:
    weights = binomial_weights(n, p)
    values = transform.h(transform.estimate_p(np.arange(n + 1), n))
    mean = float(np.dot(weights, values))
    center = float(transform.h(p)) if about_true else mean
    d = values - center
    d2 = d * d
    return (
        mean,
        float(np.dot(weights, d2)),
        float(np.dot(weights, d2 * d)),
        float(np.dot(weights, d2 * d2)),
    )


def arm_moments(arm: ArmSpec, transform: ArmTransform, about_true: bool = False) -> MomentSet:
    """
    Exact moments of h(p_hat(X)) for X ~ Bin(n, p).

    Central moments are taken about the exact mean of the transformed
    estimate; with ``about_true=True`` they are taken about h(p) instead.
    For the identity transform X = 0 and X = n give finite values, for the
    corrected transforms the estimator never reaches 0 or 1.
    """
    arm.validate()
    mean, m2, m3, m4 = _enumerate(int(arm.n), float(arm.p), transform, about_true)
    return MomentSet(mean=mean, m2=m2, m3=m3, m4=m4)


def effect_moments(treat: MomentSet, ctrl: MomentSet) -> MomentSet:
    """Moments of h_T - h_C for independent arms."""
    return MomentSet(
        mean=treat.mean - ctrl.mean,
        m2=treat.m2 + ctrl.m2,
        m3=treat.m3 - ctrl.m3,
        m4=treat.m4 + ctrl.m4 + 6.0 * treat.m2 * ctrl.m2,
    )


if __name__ == "__main__":
    for tr in ArmTransform:
        print(tr.name, arm_moments(ArmSpec(20, 0.1), tr))
