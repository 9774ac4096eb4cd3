#!/usr/bin/env python3
"""
QHet - Report Tables
====================
Aggregates raw per-replication p-values into long-format tables:
flattened P-P error, empirical level at alpha, power versus tau2, and
Kolmogorov-Smirnov distance from uniformity.
"""

import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Type, Union

import numpy as np
import pandas as pd
from scipy.stats import kstest

from qdist import ALL_METHODS
from simulator import CELL_COLUMNS, RepOutcome, p_column, read_raw_csv

logger = logging.getLogger(__name__)

TAIL_GRID = (0.001, 0.0025, 0.005, 0.01, 0.025, 0.05, 0.1, 0.25, 0.5,
             0.75, 0.9, 0.95, 0.975, 0.99, 0.995, 0.9975, 0.999)
DEFAULT_ALPHA = 0.05


class EmptyCellError(ValueError):
    """A cell has no analyzed replications to aggregate."""


@dataclass(frozen=True)
class LevelRow:
    measure: str
    k: int
    sizes: str
    p_c: float
    effect: float
    tau2: float
    method: str
    nominal: float
    achieved: float
    error: float
    analyzed: int


@dataclass(frozen=True)
class UniformityRow:
    measure: str
    k: int
    sizes: str
    p_c: float
    effect: float
    tau2: float
    method: str
    ks_distance: float
    ks_pvalue: float
    analyzed: int


Outcomes = Union[pd.DataFrame, Iterable[RepOutcome]]


def validate_grid(grid: Sequence[float]) -> bool:
    g = np.asarray(grid, dtype=float)
    if g.size == 0 or np.any(g <= 0) or np.any(g >= 1):
        raise ValueError("tail grid probabilities must lie in (0, 1)")
    if np.any(np.diff(g) <= 0):
        raise ValueError("tail grid must be strictly increasing")
    if not np.allclose(g, 1 - g[::-1]):
        raise ValueError("tail grid must be symmetric under p <-> 1 - p")
    return True


def outcomes_frame(outcomes: Outcomes) -> pd.DataFrame:
    """Raw-CSV-shaped frame from a frame or from RepOutcome objects."""
    if isinstance(outcomes, pd.DataFrame):
        return outcomes
    rows = []
    for o in outcomes:
        row = {"rep_index": o.rep_index, "discarded": o.discarded}
        row.update({p_column(m): o.p_values.get(m, np.nan) for m in ALL_METHODS})
        rows.append(row)
    return pd.DataFrame(rows, columns=["rep_index", "discarded"] + [p_column(m) for m in ALL_METHODS])


def _cell_fields(df: pd.DataFrame, cell: Optional[Mapping]) -> Dict:
    if cell is not None:
        return {c: cell[c] for c in CELL_COLUMNS}
    if all(c in df.columns for c in CELL_COLUMNS) and len(df):
        first = df.iloc[0]
        return {
            "measure": str(first["measure"]),
            "k": int(first["k"]),
            "sizes": str(first["sizes"]),
            "p_c": float(first["p_c"]),
            "effect": float(first["effect"]),
            "tau2": float(first["tau2"]),
        }
    raise ValueError("cell identifiers are missing; pass cell=...")


def _method_p_values(outcomes: Outcomes):
    """(frame, {method name: sorted p-values over analyzed reps})."""
    df = outcomes_frame(outcomes)
    analyzed = df[~df["discarded"].astype(bool)]
    if analyzed.empty:
        raise EmptyCellError("cell has no analyzed replications")
    out = {}
    for m in ALL_METHODS:
        col = p_column(m)
        if col not in analyzed.columns:
            continue
        p = np.sort(analyzed[col].dropna().to_numpy(dtype=float))
        if p.size == 0:
            logger.warning(f"[WARN] no {m.value} p-values in this cell")
            continue
        out[m.value] = p
    return df, out


def pp_error_table(outcomes: Outcomes, grid: Sequence[float] = TAIL_GRID,
                   cell: Optional[Mapping] = None) -> List[LevelRow]:
    """Achieved level #(p < nominal) / M and its error for each method and grid point."""
    df, by_method = _method_p_values(outcomes)
    ids = _cell_fields(df, cell)
    nominal = np.asarray(grid, dtype=float)
    rows = []
    for method, p in by_method.items():
        achieved = np.searchsorted(p, nominal, side="left") / p.size
        for nom, ach in zip(nominal, achieved):
            rows.append(LevelRow(**ids, method=method, nominal=float(nom), achieved=float(ach),
                                 error=float(ach - nom), analyzed=int(p.size)))
    return rows


def level_at(outcomes: Outcomes, alpha: float = DEFAULT_ALPHA,
             cell: Optional[Mapping] = None) -> List[LevelRow]:
    return pp_error_table(outcomes, grid=(alpha,), cell=cell)


def power_curve(outcomes_by_tau2: Mapping[float, Outcomes], alpha: float = DEFAULT_ALPHA,
                cell: Optional[Mapping] = None) -> List[LevelRow]:
    """Empirical power at ``alpha`` for each tau2; tau2 = 0 gives the empirical level."""
    taus = sorted(outcomes_by_tau2)
    if len(taus) < 2 or not any(abs(t) < 1e-12 for t in taus):
        raise ValueError(f"power curve needs tau2 = 0 and at least one tau2 > 0, got {taus}")
    rows = []
    for tau2 in taus:
        ids = None if cell is None else {**cell, "tau2": tau2}
        rows.extend(level_at(outcomes_by_tau2[tau2], alpha=alpha, cell=ids))
    return rows


def uniformity_table(outcomes: Outcomes, cell: Optional[Mapping] = None) -> List[UniformityRow]:
    """KS distance of each method's p-values from U(0, 1)."""
    df, by_method = _method_p_values(outcomes)
    ids = _cell_fields(df, cell)
    rows = []
    for method, p in by_method.items():
        res = kstest(p, "uniform")
        rows.append(UniformityRow(**ids, method=method, ks_distance=float(res.statistic),
                                  ks_pvalue=float(res.pvalue), analyzed=int(p.size)))
    return rows


# =============================================================================
# CSV
# =============================================================================

def write_rows(rows: Sequence, path, row_type: Type = LevelRow) -> Path:
    columns = [f.name for f in fields(row_type)]
    df = pd.DataFrame([asdict(r) for r in rows], columns=columns)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False, float_format="%.6g")
    return path


def read_rows(path, row_type: Type = LevelRow) -> list:
    df = pd.read_csv(path, dtype={"measure": str, "sizes": str, "method": str})
    out = []
    for rec in df.to_dict(orient="records"):
        kwargs = {}
        for f in fields(row_type):
            value = rec[f.name]
            kwargs[f.name] = f.type(value) if f.type in (int, float, str) else value
        out.append(row_type(**kwargs))
    return out


# =============================================================================
# RAW DIRECTORY
# =============================================================================

def load_raw_dir(raw_dir) -> List[pd.DataFrame]:
    """Raw per-cell frames; header-only files are skipped."""
    frames = []
    for path in sorted(Path(raw_dir).glob("*.csv")):
        try:
            df = read_raw_csv(path)
        except ValueError as e:
            logger.debug(f"skipping {path.name}: {e}")
            continue
        if df.empty:
            logger.warning(f"[WARN] {path.name} has no replications; skipped")
            continue
        frames.append(df)
    if not frames:
        raise EmptyCellError(f"no raw simulation files with replications in {raw_dir}")
    return frames


def _safe_rows(fn, df: pd.DataFrame, **kwargs) -> list:
    try:
        return fn(df, **kwargs)
    except EmptyCellError as e:
        logger.warning(f"[WARN] {df['measure'].iloc[0]} cell skipped: {e}")
        return []


def pp_report(raw_dir, grid: Sequence[float] = TAIL_GRID) -> List[LevelRow]:
    rows = []
    for df in load_raw_dir(raw_dir):
        rows.extend(_safe_rows(pp_error_table, df, grid=grid))
    return rows


def level_report(raw_dir, alpha: float = DEFAULT_ALPHA) -> List[LevelRow]:
    rows = []
    for df in load_raw_dir(raw_dir):
        rows.extend(_safe_rows(level_at, df, alpha=alpha))
    return rows


def uniformity_report(raw_dir) -> List[UniformityRow]:
    rows = []
    for df in load_raw_dir(raw_dir):
        rows.extend(_safe_rows(uniformity_table, df))
    return rows


def power_report(raw_dir, alpha: float = DEFAULT_ALPHA) -> List[LevelRow]:
    """Power curves for every LOR cell family simulated on a tau2 grid."""
    groups: Dict[tuple, Dict[float, pd.DataFrame]] = {}
    for df in load_raw_dir(raw_dir):
        first = df.iloc[0]
        if str(first["measure"]) != "LOR":
            continue
        key = (int(first["k"]), str(first["sizes"]), float(first["p_c"]), float(first["effect"]))
        groups.setdefault(key, {})[float(first["tau2"])] = df
    rows = []
    for key in sorted(groups):
        try:
            rows.extend(power_curve(groups[key], alpha=alpha))
        except ValueError as e:
            k, sizes, p_c, effect = key
            logger.warning(f"[WARN] LOR k={k} {sizes} p_c={p_c} effect={effect} skipped: {e}")
    if not rows:
        raise ValueError(f"no LOR cell family in {raw_dir} has a tau2 grid with tau2 = 0")
    return rows

