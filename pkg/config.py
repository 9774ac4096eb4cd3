#!/usr/bin/env python3
"""
QHet - Configuration Management
===============================
Simulation cells as validated dataclasses, the design table they are drawn
from, the flat key=value config file loader, and system settings.
"""

import io
import os
import re
import math
import zlib
import logging
import itertools
from typing import List, Dict, Any, Optional, Tuple
from dataclasses import dataclass, field, replace
from pathlib import Path
from dotenv import load_dotenv
from dotenv.parser import parse_stream

from effects import Measure

# Load environment variables
load_dotenv()

logger = logging.getLogger(__name__)

# Project paths
BASE_DIR = Path(__file__).parent
LOG_DIR = BASE_DIR / "logs"
OUTPUT_DIR = BASE_DIR / "results"

DEFAULT_REPS = 2000
FULL_REPS = 10000
DEFAULT_SEED = 20220419


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending setting."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


# =============================================================================
# DESIGN TABLE
# =============================================================================

K_VALUES = (5, 10, 30)
EQUAL_SIZES = (20, 40, 100, 250)
UNEQUAL_SIZE_SETS: Dict[int, Tuple[int, ...]] = {
    30: (12, 16, 18, 20, 84),
    60: (24, 32, 36, 40, 168),
    100: (64, 72, 76, 80, 208),
    160: (124, 132, 136, 140, 268),
}
P_C_VALUES = (0.1, 0.2, 0.5)
CONTROL_FRACTION = 0.5

LOR_EFFECTS = (0.0, 0.1, 0.5, 1.0, 1.5, 2.0)
TAU2_GRID = tuple(round(0.1 * i, 10) for i in range(11))
LRR_EFFECTS: Dict[float, Tuple[float, ...]] = {
    0.1: (-0.5, 0.0, 0.5, 1.0, 1.5),
    0.2: (-0.5, 0.0, 0.5, 1.0, 1.5),
    0.5: (-1.5, -1.0, -0.5, 0.0, 0.5),
}
# Treatment-arm probabilities paired with each p_C; RD effects are exact differences
RD_TREATMENT_PROBS: Dict[float, Tuple[float, ...]] = {
    0.1: (0.06, 0.10, 0.16, 0.27, 0.44),
    0.2: (0.12, 0.20, 0.33, 0.54, 0.90),
    0.5: (0.12, 0.18, 0.30, 0.50, 0.82),
}


def design_effects(measure: Measure, p_c: float) -> Tuple[float, ...]:
    """Effects in the design table for one measure and control probability."""
    key = _grid_key(p_c, P_C_VALUES)
    if measure is Measure.LOR:
        return LOR_EFFECTS
    if key is None:
        return ()
    if measure is Measure.LRR:
        return LRR_EFFECTS[key]
    return tuple(round(p_t - key, 10) for p_t in RD_TREATMENT_PROBS[key])


def _grid_key(value: float, grid) -> Optional[float]:
    for g in grid:
        if math.isclose(value, g, abs_tol=1e-9):
            return g
    return None


# =============================================================================
# SIMULATION CELLS
# =============================================================================

@dataclass(frozen=True)
class SizeSpec:
    """Equal study sizes n, or an unequal base set with average n-bar."""
    kind: str   # "equal" or "unequal"
    value: int

    def __post_init__(self):
        if self.kind not in ("equal", "unequal"):
            raise ConfigError("sizes", f"kind must be 'equal' or 'unequal', got {self.kind!r}")
        if self.value < 2:
            raise ConfigError("sizes", f"study size must be at least 2, got {self.value}")

    @classmethod
    def parse(cls, text: str) -> "SizeSpec":
        m = re.fullmatch(r"\s*(equal|unequal)\s*:\s*(\d+)\s*", text)
        if not m:
            raise ConfigError("sizes", f"expected 'equal:<n>' or 'unequal:<nbar>', got {text!r}")
        return cls(m.group(1), int(m.group(2)))

    @property
    def label(self) -> str:
        return f"n{self.value}" if self.kind == "equal" else f"nbar{self.value}"

    def in_design(self) -> bool:
        if self.kind == "equal":
            return self.value in EQUAL_SIZES
        return self.value in UNEQUAL_SIZE_SETS

    def study_sizes(self, k: int) -> List[int]:
        """Total sizes of the k studies; unequal sets repeat to fill k."""
        if self.kind == "equal":
            return [self.value] * k
        if self.value not in UNEQUAL_SIZE_SETS:
            raise ConfigError("sizes", f"no unequal size set with average {self.value}")
        base = UNEQUAL_SIZE_SETS[self.value]
        if k % len(base):
            raise ConfigError("k", f"k={k} is not a multiple of the {len(base)}-study size set")
        return list(base) * (k // len(base))

    def __str__(self) -> str:
        return f"{self.kind}:{self.value}"


@dataclass(frozen=True)
class SimConfig:
    """One cell of the simulation grid."""
    measure: Measure
    k: int
    sizes: SizeSpec
    p_c: float
    effect: float
    tau2: float = 0.0
    reps: int = DEFAULT_REPS
    seed: int = DEFAULT_SEED
    f: float = CONTROL_FRACTION
    allow_off_grid: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> bool:
        if not isinstance(self.measure, Measure):
            raise ConfigError("measure", f"expected a Measure, got {self.measure!r}")
        if self.k < 3:
            raise ConfigError("k", f"need at least 3 studies, got {self.k}")
        if not (0.0 < self.p_c < 1.0):
            raise ConfigError("p_c", f"must lie in (0, 1), got {self.p_c}")
        if self.tau2 < 0:
            raise ConfigError("tau2", f"must be nonnegative, got {self.tau2}")
        if self.reps < 0:
            raise ConfigError("reps", f"must be nonnegative, got {self.reps}")
        if not (0 <= self.seed < 2 ** 64):
            raise ConfigError("seed", f"must be a 64-bit unsigned integer, got {self.seed}")
        if not math.isclose(self.f, CONTROL_FRACTION):
            raise ConfigError("f", f"only f = 1/2 is supported, got {self.f}")
        if self.measure is not Measure.LOR and self.tau2 != 0:
            raise ConfigError("tau2", f"{self.measure.value} cells are simulated under tau2 = 0 only")
        for n in self.sizes.study_sizes(self.k):
            if n < 2:
                raise ConfigError("sizes", f"study size {n} leaves an empty arm")

        if self.allow_off_grid:
            return True
        if self.k not in K_VALUES:
            raise ConfigError("k", f"{self.k} not in {K_VALUES}")
        if not self.sizes.in_design():
            raise ConfigError("sizes", f"{self.sizes} is not a design size")
        if _grid_key(self.p_c, P_C_VALUES) is None:
            raise ConfigError("p_c", f"{self.p_c} not in {P_C_VALUES}")
        if _grid_key(self.effect, design_effects(self.measure, self.p_c)) is None:
            raise ConfigError("effect", f"{self.effect} is not a design effect for "
                                        f"{self.measure.value} at p_c={self.p_c}")
        if _grid_key(self.tau2, TAU2_GRID) is None:
            raise ConfigError("tau2", f"{self.tau2} not on the 0(0.1)1 grid")
        return True

    @property
    def label(self) -> str:
        base = f"{self.measure.value}_{self.p_c:g}_{self.effect:g}_{self.k}_{self.sizes.label}"
        return base if self.tau2 == 0 else f"{base}_tau{self.tau2:g}"

    @property
    def cell_id(self) -> int:
        return zlib.crc32(self.label.encode("utf-8"))

    @property
    def file_name(self) -> str:
        return f"{self.label}.csv"

    def arm_sizes(self) -> List[Tuple[int, int]]:
        """(n_t, n_c) per study."""
        out = []
        for n in self.sizes.study_sizes(self.k):
            n_c = int(round(self.f * n))
            out.append((n - n_c, n_c))
        return out

    def with_overrides(self, **changes) -> "SimConfig":
        return replace(self, **{k: v for k, v in changes.items() if v is not None})

    def describe(self) -> Dict[str, Any]:
        return {
            "measure": self.measure.value,
            "k": self.k,
            "sizes": str(self.sizes),
            "p_c": self.p_c,
            "effect": self.effect,
            "tau2": self.tau2,
        }


# =============================================================================
# CONFIG FILE
# =============================================================================

KNOWN_KEYS = ("measure", "k", "sizes", "f", "p_c", "effect", "tau2", "reps", "seed", "allow_off_grid")
REQUIRED_KEYS = ("measure", "k", "sizes", "p_c", "effect")

_RANGE = re.compile(r"^\s*(-?[\d.]+)\s*\(\s*([\d.]+)\s*\)\s*(-?[\d.]+)\s*$")


def _expand_range(key: str, text: str) -> List[float]:
    m = _RANGE.match(text)
    start, step, stop = (float(g) for g in m.groups())
    if step <= 0:
        raise ConfigError(key, f"range step must be positive in {text!r}")
    count = int(round((stop - start) / step))
    return [round(start + i * step, 10) for i in range(count + 1)]


def _split_values(key: str, text: str) -> List[str]:
    if _RANGE.match(text):
        return [repr(v) for v in _expand_range(key, text)]
    parts = [p.strip() for p in text.split(",")]
    if not all(parts):
        raise ConfigError(key, f"empty value in {text!r}")
    return parts


def _parse_scalar(key: str, text: str):
    try:
        if key == "measure":
            return Measure.parse(text)
        if key == "sizes":
            return SizeSpec.parse(text)
        if key in ("k", "reps", "seed"):
            return int(text)
        if key == "allow_off_grid":
            if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"not a boolean: {text!r}")
            return text.lower() in ("true", "1", "yes")
        if key == "effect" and text.lower() == "table":
            return "table"
        return float(text)
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(key, str(e))


def parse_config_text(text: str) -> Dict[str, List[Any]]:
    """Parse key = value lines into per-key value lists.

    Line syntax (comments, quoting, blank lines) is dotenv's; list, range and
    ``table`` expansion and key checks happen here.
    """
    values: Dict[str, List[Any]] = {}
    for binding in parse_stream(io.StringIO(text)):
        if binding.key is None and not binding.error:
            continue
        if binding.error or binding.value is None:
            raw = binding.original.string
            # the span starts at any blank lines before the offending line
            lineno = binding.original.line + raw[:len(raw) - len(raw.lstrip())].count("\n")
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {raw.strip()!r}")
        key = binding.key
        if key not in KNOWN_KEYS:
            raise ConfigError(key, "unknown configuration key")
        if key in values:
            raise ConfigError(key, "key given more than once")
        values[key] = [_parse_scalar(key, v) for v in _split_values(key, binding.value.strip())]
    for key in REQUIRED_KEYS:
        if key not in values:
            raise ConfigError(key, "required key is missing")
    for key in ("reps", "seed", "f", "allow_off_grid"):
        if key in values and len(values[key]) != 1:
            raise ConfigError(key, "takes a single value")
    return values


def expand_grid(values: Dict[str, List[Any]]) -> List[SimConfig]:
    """Full factorial expansion of parsed config values."""
    scalar = {
        "reps": values.get("reps", [DEFAULT_REPS])[0],
        "seed": values.get("seed", [DEFAULT_SEED])[0],
        "f": values.get("f", [CONTROL_FRACTION])[0],
        "allow_off_grid": values.get("allow_off_grid", [False])[0],
    }
    tau2_values = values.get("tau2", [0.0])
    cells: List[SimConfig] = []
    skipped = 0
    for measure, k, sizes, p_c in itertools.product(values["measure"], values["k"], values["sizes"], values["p_c"]):
        effects: List[float] = []
        for e in values["effect"]:
            if e == "table":
                effects.extend(design_effects(measure, p_c))
            else:
                effects.append(e)
        for effect, tau2 in itertools.product(effects, tau2_values):
            if measure is not Measure.LOR and tau2 != 0:
                skipped += 1
                continue
            cells.append(SimConfig(measure=measure, k=k, sizes=sizes, p_c=p_c,
                                   effect=effect, tau2=tau2, **scalar))
    if skipped:
        logger.info(f"[INFO] Skipped {skipped} LRR/RD cells with tau2 > 0 (null only)")
    if not cells:
        raise ConfigError("effect", "configuration expands to no cells")
    return cells


def load_cells(filepath: str) -> List[SimConfig]:
    path = Path(filepath)
    if not path.exists():
        raise ConfigError("config", f"file not found: {filepath}")
    return expand_grid(parse_config_text(path.read_text(encoding="utf-8")))


# =============================================================================
# SYSTEM
# =============================================================================

def _env_int(name: str, default: int) -> int:
    value = os.getenv(name, "")
    if not value:
        return default
    try:
        return int(value)
    except ValueError:
        raise ConfigError(name, f"must be an integer, got {value!r}")


@dataclass
class SystemConfig:
    """System-wide configuration."""
    log_dir: Path = field(default_factory=lambda: Path(os.getenv("QHET_LOG_DIR", str(LOG_DIR))))
    out_dir: Path = field(default_factory=lambda: OUTPUT_DIR)

    log_level: str = field(default_factory=lambda: os.getenv("QHET_LOG_LEVEL", "INFO"))
    log_rotation_size: int = 10 * 1024 * 1024  # 10MB
    log_backup_count: int = 5

    threads: int = field(default_factory=lambda: _env_int("QHET_THREADS", 1))

    def validate(self) -> bool:
        if self.threads < 1:
            raise ConfigError("threads", f"must be at least 1, got {self.threads}")
        if self.log_level.upper() not in ("DEBUG", "INFO", "WARNING", "ERROR"):
            raise ConfigError("log_level", f"unknown level {self.log_level!r}")
        return True

    def ensure_directories(self):
        """Create necessary directories."""
        self.log_dir.mkdir(parents=True, exist_ok=True)
        (self.log_dir / "selftest_reports").mkdir(exist_ok=True)


class Config:
    """Main configuration - system settings plus the simulation cells."""

    def __init__(self, config_file: Optional[str] = None):
        self.system = SystemConfig()
        self.cells: List[SimConfig] = []

        if config_file:
            self.cells = load_cells(config_file)

    def apply_overrides(self, reps: Optional[int] = None, seed: Optional[int] = None,
                        threads: Optional[int] = None):
        self.cells = [c.with_overrides(reps=reps, seed=seed) for c in self.cells]
        if threads is not None:
            self.system.threads = threads
        self.system.validate()

    def get_summary(self) -> Dict[str, Any]:
        """Get configuration summary for logging."""
        return {
            "cells": len(self.cells),
            "measures": sorted({c.measure.value for c in self.cells}),
            "reps": sorted({c.reps for c in self.cells}),
            "threads": self.system.threads,
            "log_level": self.system.log_level,
        }
