#!/usr/bin/env python3
"""
QHet - Study-level Effect Estimation
====================================
Per-study estimates and estimated variances of the log-odds-ratio,
log-relative-risk and risk difference from 2x2 tables.
"""

import math
import logging
from enum import Enum
from dataclasses import dataclass
from typing import Callable, List, NamedTuple, Optional, Sequence

import numpy as np
from scipy.special import expit, logit

from moments_core import ArmTransform

logger = logging.getLogger(__name__)

# Clamp for probabilities that have no arm size attached
OPEN_INTERVAL_EPS = 1e-12


class Measure(Enum):
    LOR = "LOR"
    LRR = "LRR"
    RD = "RD"

    @classmethod
    def parse(cls, value: str) -> "Measure":
        try:
            return cls[value.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown effect measure: {value!r} (expected LOR, LRR or RD)")


@dataclass(frozen=True)
class StudyTable:
    """Event counts and arm sizes of one study."""
    x_t: int
    n_t: int
    x_c: int
    n_c: int

    def __post_init__(self):
        self.validate()

    def validate(self) -> bool:
        if self.n_t < 1 or self.n_c < 1:
            raise ValueError(f"arm sizes must be positive: n_t={self.n_t}, n_c={self.n_c}")
        if not (0 <= self.x_t <= self.n_t):
            raise ValueError(f"x_t={self.x_t} outside [0, {self.n_t}]")
        if not (0 <= self.x_c <= self.n_c):
            raise ValueError(f"x_c={self.x_c} outside [0, {self.n_c}]")
        return True

    @property
    def n(self) -> int:
        return self.n_t + self.n_c

    @property
    def effective_size(self) -> float:
        return self.n_c * self.n_t / self.n

    @property
    def double_zero(self) -> bool:
        return self.x_t == 0 and self.x_c == 0

    @property
    def double_n(self) -> bool:
        return self.x_t == self.n_t and self.x_c == self.n_c

    def swapped(self) -> "StudyTable":
        return StudyTable(x_t=self.x_c, n_t=self.n_c, x_c=self.x_t, n_c=self.n_t)


@dataclass(frozen=True)
class EffectEstimate:
    estimate: float
    var_hat: float
    measure: Measure

    def __post_init__(self):
        if not math.isfinite(self.estimate):
            raise ValueError(f"non-finite {self.measure.value} estimate: {self.estimate}")
        if not self.var_hat >= 0:
            raise ValueError(f"negative variance estimate: {self.var_hat}")


class Study(NamedTuple):
    table: StudyTable
    effect: EffectEstimate


class Link(NamedTuple):
    """Transform h and its inverse; ``inverse`` clamps into a valid probability."""
    h: Callable[[float], float]
    h_inv: Callable[[float], float]

    def inverse(self, value, n: Optional[int] = None):
        p = self.h_inv(value)
        if n is None:
            return np.clip(p, OPEN_INTERVAL_EPS, 1.0 - OPEN_INTERVAL_EPS)
        return clamp_probability(p, n)


def clamp_probability(p, n: int):
    """Clamp to [1/(2(n+1)), 1 - 1/(2(n+1))]."""
    lo = 1.0 / (2.0 * (n + 1))
    return np.clip(p, lo, 1.0 - lo)


def _identity(value):
    return value


_LINKS = {
    Measure.LOR: Link(logit, expit),
    Measure.LRR: Link(np.log, np.exp),
    Measure.RD: Link(_identity, _identity),
}

_TRANSFORMS = {
    Measure.LOR: ArmTransform.LOGIT_CORRECTED,
    Measure.LRR: ArmTransform.LOG_CORRECTED,
    Measure.RD: ArmTransform.IDENTITY_ML,
}


def link(m: Measure) -> Link:
    return _LINKS[m]


def arm_transform(m: Measure) -> ArmTransform:
    return _TRANSFORMS[m]


def estimate_effect(tbl: StudyTable, m: Measure) -> EffectEstimate:
    if m is Measure.LOR:
        p_t = (tbl.x_t + 0.5) / (tbl.n_t + 1)
        p_c = (tbl.x_c + 0.5) / (tbl.n_c + 1)
        estimate = float(logit(p_t) - logit(p_c))
        var_hat = 1.0 / ((tbl.n_t + 1) * p_t * (1 - p_t)) + 1.0 / ((tbl.n_c + 1) * p_c * (1 - p_c))
    elif m is Measure.LRR:
        p_t = (tbl.x_t + 0.5) / (tbl.n_t + 0.5)
        p_c = (tbl.x_c + 0.5) / (tbl.n_c + 0.5)
        estimate = math.log(p_t) - math.log(p_c)
        var_hat = (1.0 / (tbl.x_t + 0.5) - 1.0 / (tbl.n_t + 0.5)
                   + 1.0 / (tbl.x_c + 0.5) - 1.0 / (tbl.n_c + 0.5))
    else:
        p_t = tbl.x_t / tbl.n_t
        p_c = tbl.x_c / tbl.n_c
        estimate = p_t - p_c
        # ML plug-in; 0 when both arms are degenerate
        var_hat = p_t * (1 - p_t) / tbl.n_t + p_c * (1 - p_c) / tbl.n_c
    return EffectEstimate(estimate=estimate, var_hat=var_hat, measure=m)


def estimate_all(tables: Sequence[StudyTable], m: Measure) -> List[Study]:
    return [Study(t, estimate_effect(t, m)) for t in tables]
