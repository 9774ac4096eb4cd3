#!/usr/bin/env python3
"""
QHet - Utility Functions
========================
Timing and Monte Carlo error helpers shared by the simulator and selftest.
"""

import math
import time
import logging
from typing import Optional

import numpy as np

logger = logging.getLogger(__name__)


# =============================================================================
# MONTE CARLO ERROR
# =============================================================================

def mean_standard_error(samples) -> float:
    """Standard error of the sample mean."""
    x = np.asarray(samples, dtype=float)
    return float(x.std(ddof=1) / math.sqrt(len(x)))


def variance_standard_error(samples) -> float:
    """
    Large-sample standard error of the sample variance.

    Uses Var(s^2) ~ (mu_4 - sigma^4) / n with the empirical fourth central
    moment.
    """
    x = np.asarray(samples, dtype=float)
    d = x - x.mean()
    m2 = np.mean(d ** 2)
    m4 = np.mean(d ** 4)
    return float(math.sqrt(max(m4 - m2 ** 2, 0.0) / len(x)))


def proportion_standard_error(p: float, n: int) -> float:
    return math.sqrt(max(p * (1 - p), 0.0) / n) if n > 0 else math.inf


# =============================================================================
# TIMING UTILITIES
# =============================================================================

class Timer:
    """Context manager for timing operations."""

    def __init__(self, name: str = "Operation"):
        self.name = name
        self.start_time: Optional[float] = None
        self.elapsed: float = 0

    def __enter__(self):
        self.start_time = time.time()
        return self

    def __exit__(self, *args):
        self.elapsed = time.time() - self.start_time
        logger.info(f"[TIME] {self.name} took {self.elapsed:.2f}s")
