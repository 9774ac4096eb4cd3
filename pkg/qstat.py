#!/usr/bin/env python3
"""
QHet - Cochran's Q
==================
Q under arbitrary positive weights, the inverse-variance and
effective-sample-size weight constructors, and the quadratic-form matrix.
"""

import logging
from enum import Enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from effects import Study

logger = logging.getLogger(__name__)


class WeightScheme(Enum):
    INVERSE_VARIANCE = "IV"
    EFFECTIVE_SAMPLE_SIZE = "SSW"


class DegenerateVarianceError(ValueError):
    """An inverse-variance weight was requested for a zero variance."""

    def __init__(self, study_index: int, message: str):
        super().__init__(message)
        self.study_index = study_index


@dataclass(frozen=True)
class QResult:
    q: float
    weights: np.ndarray
    weighted_mean: float
    k: int


def weights(studies: Sequence[Study], scheme: WeightScheme) -> np.ndarray:
    if len(studies) < 2:
        raise ValueError(f"at least 2 studies are needed, got {len(studies)}")
    if scheme is WeightScheme.EFFECTIVE_SAMPLE_SIZE:
        return np.array([s.table.effective_size for s in studies], dtype=float)

    out = np.empty(len(studies))
    for i, s in enumerate(studies):
        if s.effect.var_hat <= 0:
            raise DegenerateVarianceError(
                i, f"study {i} ({s.table}) has var_hat={s.effect.var_hat}; "
                   f"inverse-variance weight undefined")
        out[i] = 1.0 / s.effect.var_hat
    return out


def _check_inputs(estimates, w):
    estimates = np.asarray(estimates, dtype=float)
    w = np.asarray(w, dtype=float)
    if estimates.shape != w.shape or estimates.ndim != 1:
        raise ValueError(f"length mismatch: {estimates.shape} estimates vs {w.shape} weights")
    if len(w) < 2:
        raise ValueError(f"Q needs k >= 2 studies, got {len(w)}")
    if not np.all(np.isfinite(w)) or np.any(w <= 0):
        raise ValueError("weights must be positive and finite")
    return estimates, w


def cochran_q(estimates, w) -> QResult:
    """Q = sum w_i (theta_i - theta_w)^2, two-pass form."""
    estimates, w = _check_inputs(estimates, w)
    mean = float(np.dot(w, estimates) / w.sum())
    d = estimates - mean
    q = float(np.dot(w, d * d))
    return QResult(q=q, weights=w, weighted_mean=mean, k=len(w))


def cochran_q_expanded(estimates, w, center: float = 0.0) -> float:
    """Q = W [sum q_i(1-q_i) Theta_i^2 - sum_{i!=j} q_i q_j Theta_i Theta_j]."""
    estimates, w = _check_inputs(estimates, w)
    total = w.sum()
    q = w / total
    theta = estimates - center
    diag = np.sum(q * (1 - q) * theta ** 2)
    s = np.dot(q, theta)
    off = s * s - np.sum(q ** 2 * theta ** 2)
    return float(total * (diag - off))


def q_matrix(w) -> np.ndarray:
    """A = W (diag(q) - q q^T), so that Q = Theta^T A Theta; rank k - 1."""
    w = np.asarray(w, dtype=float)
    if len(w) < 2 or np.any(w <= 0):
        raise ValueError("q_matrix needs k >= 2 positive weights")
    total = w.sum()
    q = w / total
    return total * (np.diag(q) - np.outer(q, q))
