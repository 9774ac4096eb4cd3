#!/usr/bin/env python3
"""
QHet - Monte Carlo Engine
=========================
Data generation, study filtering, and per-replication Q statistics and
p-values for one cell of the simulation grid.

Replication r of a cell draws from its own Philox substream keyed by
(seed, cell id, r), so output does not depend on the worker count.
"""

import math
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from itertools import repeat
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Tuple

import numpy as np
import pandas as pd

from config import SimConfig
from effects import StudyTable, clamp_probability, estimate_all, link
from qdist import ALL_METHODS, ApproxMethod, evaluate_methods, q_f_statistic
from qstat import WeightScheme, cochran_q, weights
from smart_cache import SmartCache
from utils import Timer

logger = logging.getLogger(__name__)

MIN_STUDIES = 3

CELL_COLUMNS = ["measure", "k", "sizes", "p_c", "effect", "tau2"]
OUTCOME_COLUMNS = ["rep_index", "realized_k", "realized_k_iv", "discarded", "q_iv", "q_f"]


def p_column(method: ApproxMethod) -> str:
    return f"p_{method.value}"


RAW_COLUMNS = CELL_COLUMNS + OUTCOME_COLUMNS + [p_column(m) for m in ALL_METHODS]


@dataclass
class RepOutcome:
    rep_index: int
    realized_k: int
    realized_k_iv: int = 0
    q_iv: float = math.nan
    q_f: float = math.nan
    p_values: Dict[ApproxMethod, float] = field(default_factory=dict)
    discarded: bool = False

    def as_row(self, cfg: SimConfig) -> Dict:
        row = cfg.describe()
        row.update({
            "rep_index": self.rep_index,
            "realized_k": self.realized_k,
            "realized_k_iv": self.realized_k_iv,
            "discarded": self.discarded,
            "q_iv": self.q_iv,
            "q_f": self.q_f,
        })
        for m in ALL_METHODS:
            row[p_column(m)] = self.p_values.get(m, math.nan)
        return row


@dataclass(frozen=True)
class Replication:
    tables: Tuple[StudyTable, ...]
    outcome: RepOutcome


@dataclass(frozen=True)
class CellSummary:
    label: str
    reps: int
    analyzed: int
    discarded: int
    iv_reduced: int
    path: Optional[str] = None


# =============================================================================
# DATA GENERATION
# =============================================================================

def rep_rng(cfg: SimConfig, rep_index: int) -> np.random.Generator:
    seq = np.random.SeedSequence([cfg.seed, cfg.cell_id, rep_index])
    return np.random.Generator(np.random.Philox(seq))


def treatment_probs(cfg: SimConfig, thetas: np.ndarray, n_t: np.ndarray) -> np.ndarray:
    """p_T = h^-1(h(p_C) + theta_i); values outside (0, 1) are clamped."""
    lk = link(cfg.measure)
    raw = np.asarray(lk.h_inv(lk.h(cfg.p_c) + thetas), dtype=float)
    outside = ~((raw > 0) & (raw < 1))
    if outside.any():
        logger.debug(f"[WARN] {cfg.label}: {int(outside.sum())} p_T values outside (0, 1) clamped")
    return np.where(outside, clamp_probability(np.nan_to_num(raw), n_t), raw)


def generate_replication(cfg: SimConfig, rep_index: int) -> Replication:
    rng = rep_rng(cfg, rep_index)
    sizes = np.array(cfg.arm_sizes())
    n_t, n_c = sizes[:, 0], sizes[:, 1]

    thetas = cfg.effect + math.sqrt(cfg.tau2) * rng.standard_normal(cfg.k)
    p_t = treatment_probs(cfg, thetas, n_t)
    x_c = rng.binomial(n_c, cfg.p_c)
    x_t = rng.binomial(n_t, p_t)

    tables = [StudyTable(int(xt), int(nt), int(xc), int(nc)) for xt, nt, xc, nc in zip(x_t, n_t, x_c, n_c)]
    kept = tuple(t for t in tables if not (t.double_zero or t.double_n))
    outcome = RepOutcome(rep_index=rep_index, realized_k=len(kept), discarded=len(kept) < MIN_STUDIES)
    return Replication(tables=kept, outcome=outcome)


# =============================================================================
# ANALYSIS
# =============================================================================

def analyze_replication(cfg: SimConfig, replication: Replication) -> RepOutcome:
    outcome = replication.outcome
    if outcome.discarded:
        return outcome

    studies = estimate_all(replication.tables, cfg.measure)
    q_f = q_f_statistic(studies)

    iv_studies = [s for s in studies if s.effect.var_hat > 0]
    k_iv = len(iv_studies)
    if k_iv < len(studies):
        logger.debug(f"[DROP] {cfg.label} rep {outcome.rep_index}: "
                     f"{len(studies) - k_iv} zero-variance studies left out of Q_IV")
    q_iv = math.nan
    if k_iv >= MIN_STUDIES:
        w = weights(iv_studies, WeightScheme.INVERSE_VARIANCE)
        q_iv = cochran_q([s.effect.estimate for s in iv_studies], w).q

    p_values = evaluate_methods(studies, cfg.measure, q_f, q_iv=q_iv, k_iv=k_iv)
    return replace(outcome, realized_k_iv=k_iv, q_iv=q_iv, q_f=q_f, p_values=p_values)


def simulate_rep(cfg: SimConfig, rep_index: int) -> RepOutcome:
    return analyze_replication(cfg, generate_replication(cfg, rep_index))


def run_cell(cfg: SimConfig, threads: int = 1) -> Iterator[RepOutcome]:
    """Outcomes of every replication of a cell, in rep order."""
    if cfg.reps == 0:
        return
    if threads <= 1:
        for r in range(cfg.reps):
            yield simulate_rep(cfg, r)
        return
    chunksize = max(1, cfg.reps // (threads * 8))
    with ProcessPoolExecutor(max_workers=threads) as executor:
        yield from executor.map(simulate_rep, repeat(cfg), range(cfg.reps), chunksize=chunksize)


def summarize_cell(cfg: SimConfig, outcomes: Iterable[RepOutcome], path: Optional[str] = None) -> CellSummary:
    outcomes = list(outcomes)
    discarded = sum(o.discarded for o in outcomes)
    iv_reduced = sum(1 for o in outcomes if not o.discarded and o.realized_k_iv < o.realized_k)
    if iv_reduced:
        logger.info(f"[DROP] {cfg.label}: {iv_reduced} replications had zero-variance studies left out of Q_IV")
    return CellSummary(label=cfg.label, reps=len(outcomes), analyzed=len(outcomes) - discarded,
                       discarded=discarded, iv_reduced=iv_reduced, path=path)


# =============================================================================
# RAW OUTPUT
# =============================================================================

def outcomes_to_frame(cfg: SimConfig, outcomes: Iterable[RepOutcome]) -> pd.DataFrame:
    return pd.DataFrame([o.as_row(cfg) for o in outcomes], columns=RAW_COLUMNS)


def write_raw_csv(cfg: SimConfig, outcomes: Iterable[RepOutcome], out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / cfg.file_name
    outcomes_to_frame(cfg, outcomes).to_csv(path, index=False, float_format="%.10g")
    return path


def read_raw_csv(path) -> pd.DataFrame:
    df = pd.read_csv(path)
    missing = [c for c in RAW_COLUMNS if c not in df.columns]
    if missing:
        raise ValueError(f"{path}: not a raw simulation file, missing columns {missing}")
    df["discarded"] = df["discarded"].astype(bool)
    return df


def cache_key(cfg: SimConfig) -> str:
    return f"{cfg.label}|reps={cfg.reps}|seed={cfg.seed}"


def simulate_grid(cells: List[SimConfig], out_dir, threads: int = 1,
                  cache: Optional[SmartCache] = None, force: bool = False) -> List[CellSummary]:
    """Run every cell, writing one raw CSV per cell."""
    summaries = []
    for i, cfg in enumerate(cells, 1):
        path = Path(out_dir) / cfg.file_name
        if cache is not None and force:
            cache.invalidate(cache_key(cfg))
        elif cache is not None:
            hit = cache.get(cache_key(cfg))
            if hit is not None and path.exists():
                summaries.append(CellSummary(**hit))
                continue

        logger.info(f"[SIM] ({i}/{len(cells)}) {cfg.label}: {cfg.reps} reps on {threads} worker(s)")
        with Timer(cfg.label):
            outcomes = list(run_cell(cfg, threads=threads))
        path = write_raw_csv(cfg, outcomes, out_dir)
        summary = summarize_cell(cfg, outcomes, path=str(path))
        logger.info(f"[OK] {cfg.label}: analyzed {summary.analyzed}, discarded {summary.discarded}")
        if cache is not None:
            cache.set(cache_key(cfg), summary.__dict__)
        summaries.append(summary)
    return summaries
