#!/usr/bin/env python3
"""
QHet - Simulation Controller
============================
Command-line entry point: runs simulation grids, builds report tables from
raw output, and runs the numerical selftest with per-component status.
"""

import sys
import json
import math
import time
import argparse
import logging
from pathlib import Path
from datetime import datetime
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple
from logging.handlers import RotatingFileHandler

import numpy as np
from scipy.stats import binom, chi2

# Project root setup
PROJECT_ROOT = Path(__file__).parent
sys.path.insert(0, str(PROJECT_ROOT))

from analytics import Analytics
from config import FULL_REPS, Config, ConfigError, SimConfig, SizeSpec
from effects import Measure
from moments_core import ArmSpec, ArmTransform, arm_moments, effect_moments
from qdist import (ApproxMethod, quadratic_form_moments, weighted_chisq_sf,
                   weighted_chisq_sf_imhof, weighted_chisq_sf_ruben)
from qstat import cochran_q, cochran_q_expanded, q_matrix
from report import (DEFAULT_ALPHA, LevelRow, UniformityRow, level_report, power_report,
                    pp_report, uniformity_report, write_rows, level_at)
from simulator import run_cell, simulate_grid, summarize_cell
from smart_cache import SmartCache
from utils import Timer, mean_standard_error, variance_standard_error, proportion_standard_error

logger = logging.getLogger("qhet")

LOG_FILE = "qhet.log"


def setup_logging(log_dir: str = "logs", level: str = "INFO",
                  max_bytes: int = 10 * 1024 * 1024, backups: int = 5) -> logging.Logger:
    """Setup logging with file rotation; library modules log through the root logger."""
    Path(log_dir).mkdir(parents=True, exist_ok=True)

    root = logging.getLogger()
    root.setLevel(logging.DEBUG)

    # Clear existing handlers
    root.handlers.clear()

    # File handler with rotation (10MB max, 5 backups)
    file_handler = RotatingFileHandler(
        str(Path(log_dir) / LOG_FILE),
        maxBytes=max_bytes,
        backupCount=backups,
        encoding='utf-8'
    )
    file_handler.setLevel(logging.DEBUG)

    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setLevel(getattr(logging, level.upper(), logging.INFO))

    formatter = logging.Formatter(
        '%(asctime)s | %(levelname)-8s | %(name)s | %(message)s'
    )
    file_handler.setFormatter(formatter)
    console_handler.setFormatter(formatter)

    root.addHandler(file_handler)
    root.addHandler(console_handler)

    return logger


# =============================================================================
# SELFTEST
# =============================================================================

def _brute_arm_moments(n: int, p: float, transform: ArmTransform) -> Tuple[float, float, float, float]:
    pmf = [math.comb(n, x) * p ** x * (1 - p) ** (n - x) for x in range(n + 1)]
    vals = [float(transform.h(transform.estimate_p(np.array([x]), n))[0]) for x in range(n + 1)]
    mean = sum(w * v for w, v in zip(pmf, vals))
    cm = [sum(w * (v - mean) ** r for w, v in zip(pmf, vals)) for r in (2, 3, 4)]
    return (mean, *cm)


class SelfTest:
    """Numerical checks of the estimators, moments and p-value approximations."""

    def __init__(self, log_dir: Path, full: bool = False, seed: int = 20220419):
        self.log_dir = Path(log_dir)
        self.full = full
        self.seed = seed

    def run(self) -> Dict[str, Any]:
        logger.info("=" * 60)
        logger.info("[>>] QHET SELFTEST" + (" (full)" if self.full else ""))
        logger.info("=" * 60)

        report: Dict[str, Any] = {
            "timestamp": datetime.now().isoformat(),
            "python_version": f"{sys.version_info.major}.{sys.version_info.minor}",
            "full": self.full,
            "components": {},
            "overall": True,
        }

        components: List[Tuple[str, Callable[[], Tuple[bool, str]]]] = [
            ("arm_moments", self._check_arm_moments),
            ("effect_moments", self._check_effect_moments),
            ("q_algebra", self._check_q_algebra),
            ("chisq_reduction", self._check_chisq_reduction),
            ("ruben_vs_inversion", self._check_ruben_vs_inversion),
            ("moment_matching", self._check_moment_matching),
            ("degenerate_tables", self._check_degenerate),
            ("determinism", self._check_determinism),
        ]
        if self.full:
            components.append(("null_calibration", self._check_null_calibration))
            components.append(("power_ordering", self._check_power_ordering))

        for name, check_func in components:
            try:
                with Timer(name):
                    status, message = check_func()
                report["components"][name] = {"status": bool(status), "message": message}
                log_func = logger.info if status else logger.warning
                log_func(f"[{'OK' if status else 'WARN'}] {name}: {message}")
            except Exception as e:
                report["components"][name] = {"status": False, "message": str(e)}
                logger.error(f"[ERR] {name}: {e}")

        report["overall"] = all(c["status"] for c in report["components"].values())

        logger.info("=" * 60)
        if report["overall"]:
            logger.info("[OK] ALL CHECKS PASSED")
        else:
            logger.warning("[WARN] SELFTEST HAS FAILURES - Review above")
        logger.info("=" * 60)

        self._save_report(report)
        return report

    def _check_arm_moments(self):
        worst = 0.0
        for transform in ArmTransform:
            for n in (1, 5, 12, 25):
                for p in (0.03, 0.2, 0.5, 0.91):
                    got = arm_moments(ArmSpec(n, p), transform)
                    want = _brute_arm_moments(n, p, transform)
                    diff = max(abs(a - b) for a, b in zip((got.mean, got.m2, got.m3, got.m4), want))
                    worst = max(worst, diff)
        return worst < 1e-10, f"max deviation from enumeration {worst:.2e}"

    def _check_effect_moments(self):
        worst = 0.0
        tr = ArmTransform.LOGIT_CORRECTED
        for (n_t, p_t, n_c, p_c) in ((6, 0.3, 8, 0.1), (10, 0.5, 10, 0.5), (4, 0.8, 7, 0.25)):
            got = effect_moments(arm_moments(ArmSpec(n_t, p_t), tr), arm_moments(ArmSpec(n_c, p_c), tr))
            vt = tr.h(tr.estimate_p(np.arange(n_t + 1), n_t))
            vc = tr.h(tr.estimate_p(np.arange(n_c + 1), n_c))
            joint = np.outer(binom.pmf(np.arange(n_t + 1), n_t, p_t), binom.pmf(np.arange(n_c + 1), n_c, p_c))
            d = vt[:, None] - vc[None, :]
            mean = float(np.sum(joint * d))
            cm = [float(np.sum(joint * (d - mean) ** r)) for r in (2, 3, 4)]
            diff = max(abs(a - b) for a, b in zip((got.mean, got.m2, got.m3, got.m4), (mean, *cm)))
            worst = max(worst, diff)
        return worst < 1e-10, f"max deviation from joint enumeration {worst:.2e}"

    def _check_q_algebra(self):
        rng = np.random.default_rng(self.seed)
        worst = 0.0
        for k in (3, 5, 10, 30):
            theta = rng.normal(size=k)
            w = rng.uniform(0.5, 50.0, size=k)
            q = cochran_q(theta, w).q
            scale = max(1.0, abs(q))
            worst = max(worst,
                        abs(q - cochran_q_expanded(theta, w)) / scale,
                        abs(q - cochran_q_expanded(theta + 3.0, w, center=3.0)) / scale,
                        abs(q - float(theta @ q_matrix(w) @ theta)) / scale)
        return worst < 1e-10, f"max relative disagreement {worst:.2e}"

    def _check_chisq_reduction(self):
        worst = 0.0
        for k in (3, 5, 10, 30):
            for q in (0.5, float(k - 1), 2.5 * k):
                worst = max(worst, abs(weighted_chisq_sf(q, np.ones(k - 1)) - chi2.sf(q, k - 1)))
        return worst < 1e-8, f"max deviation from chi2 sf {worst:.2e}"

    def _check_ruben_vs_inversion(self):
        rng = np.random.default_rng(self.seed + 1)
        worst = 0.0
        for _ in range(10):
            lam = rng.uniform(0.2, 3.0, size=rng.integers(2, 12))
            for q in np.quantile(lam.sum() * rng.chisquare(1, size=200), (0.1, 0.5, 0.9)):
                ruben = weighted_chisq_sf_ruben(float(q), lam)
                if ruben is None:
                    return False, f"series did not converge for {lam.size} eigenvalues at q={q:.4g}"
                worst = max(worst, abs(ruben - weighted_chisq_sf_imhof(float(q), lam)))
        return worst < 1e-6, f"max series/inversion difference {worst:.2e}"

    def _check_moment_matching(self):
        """Empirical mean and variance of null Q_F against the exact quadratic-form moments."""
        reps = 20000 if self.full else 4000
        rng = np.random.default_rng(self.seed + 2)
        n_arm, k, p = 20, 5, 0.2
        tr = ArmTransform.LOGIT_CORRECTED
        x_t = rng.binomial(n_arm, p, size=(reps, k))
        x_c = rng.binomial(n_arm, p, size=(reps, k))
        theta = tr.h(tr.estimate_p(x_t, n_arm)) - tr.h(tr.estimate_p(x_c, n_arm))
        w = np.full(k, n_arm / 2.0)
        qs = np.einsum("ri,ij,rj->r", theta, q_matrix(w), theta)

        ms = effect_moments(arm_moments(ArmSpec(n_arm, p), tr), arm_moments(ArmSpec(n_arm, p), tr))
        exact = quadratic_form_moments(q_matrix(w), [ms.m2] * k, [ms.m4] * k)
        z_mean = abs(qs.mean() - exact.mean) / mean_standard_error(qs)
        z_var = abs(qs.var(ddof=1) - exact.variance) / variance_standard_error(qs)
        ok = z_mean < 4.0 and z_var < 4.0
        return ok, (f"mean {qs.mean():.4f} vs {exact.mean:.4f} (z={z_mean:.2f}), "
                    f"var {qs.var(ddof=1):.4f} vs {exact.variance:.4f} (z={z_var:.2f})")

    def _check_degenerate(self):
        cfg = SimConfig(Measure.LOR, k=3, sizes=SizeSpec("equal", 4), p_c=0.02, effect=0.0,
                        reps=200, seed=self.seed, allow_off_grid=True)
        outcomes = list(run_cell(cfg))
        summary = summarize_cell(cfg, outcomes)
        leaked = [o.rep_index for o in outcomes if o.discarded and o.p_values]
        ok = summary.analyzed + summary.discarded == cfg.reps and summary.discarded > 0 and not leaked
        return ok, f"{summary.discarded} of {cfg.reps} replications discarded, {len(leaked)} with p-values"

    def _check_determinism(self):
        cfg = SimConfig(Measure.RD, k=5, sizes=SizeSpec("equal", 20), p_c=0.1, effect=0.0,
                        reps=40, seed=self.seed)
        serial = [o.as_row(cfg) for o in run_cell(cfg, threads=1)]
        parallel = [o.as_row(cfg) for o in run_cell(cfg, threads=2)]
        same = len(serial) == len(parallel) and all(
            all(a[c] == b[c] or (isinstance(a[c], float) and math.isnan(a[c]) and math.isnan(b[c]))
                for c in a)
            for a, b in zip(serial, parallel))
        return same, f"{len(serial)} replications identical on 1 and 2 workers" if same else "outputs differ"

    def _check_null_calibration(self):
        good = SimConfig(Measure.LOR, k=5, sizes=SizeSpec("equal", 250), p_c=0.2, effect=0.0,
                         reps=FULL_REPS, seed=self.seed)
        levels = {r.method: r.achieved for r in level_at(list(run_cell(good)), cell=good.describe())}
        naive = levels.get(ApproxMethod.FAREBROTHER_NAIVE.value, math.nan)

        sparse = SimConfig(Measure.LOR, k=30, sizes=SizeSpec("equal", 20), p_c=0.1, effect=0.0,
                           reps=2000, seed=self.seed)
        sparse_levels = {r.method: r.achieved for r in level_at(list(run_cell(sparse)), cell=sparse.describe())}
        chisq = sparse_levels.get(ApproxMethod.CHISQ.value, math.nan)

        ok = 0.035 <= naive <= 0.065 and chisq < DEFAULT_ALPHA
        return ok, f"F_SSW_naive level {naive:.4f} at n=250; ChiSq level {chisq:.4f} at n=20, K=30"

    def _check_power_ordering(self):
        """ChiSq should have the lowest power in a small-n heterogeneous LOR cell."""
        cfg = SimConfig(Measure.LOR, k=10, sizes=SizeSpec("equal", 20), p_c=0.1, effect=0.0,
                        tau2=1.0, reps=2000, seed=self.seed)
        rows = level_at(list(run_cell(cfg)), alpha=DEFAULT_ALPHA, cell=cfg.describe())
        power = {r.method: r for r in rows}
        chisq = power.get(ApproxMethod.CHISQ.value)
        if chisq is None or len(power) < 2:
            return False, "missing methods"
        runner_up = min((r for m, r in power.items() if m != chisq.method), key=lambda r: r.achieved)
        margin = runner_up.achieved - chisq.achieved
        se = proportion_standard_error(chisq.achieved, chisq.analyzed)
        return margin >= se, (f"ChiSq power {chisq.achieved:.4f}, next lowest {runner_up.method} "
                              f"{runner_up.achieved:.4f} (margin {margin:.4f}, se {se:.4f})")

    def _save_report(self, report: Dict[str, Any]):
        """Save selftest report to JSON file."""
        try:
            report_path = self.log_dir / "selftest_reports"
            report_path.mkdir(parents=True, exist_ok=True)

            filename = f"selftest_{datetime.now().strftime('%Y%m%d_%H%M%S')}.json"
            with open(report_path / filename, 'w', encoding='utf-8') as f:
                json.dump(report, f, indent=2)

            logger.debug(f"Selftest report saved: {filename}")
        except OSError as e:
            logger.error(f"Failed to save selftest report: {e}")


# =============================================================================
# COMMANDS
# =============================================================================

def cmd_simulate(args, config: Config) -> int:
    config.apply_overrides(reps=args.reps, seed=args.seed, threads=args.threads)
    if not config.cells:
        raise ConfigError("config", f"{args.config} defines no cells")
    out_dir = Path(args.out)
    config.system.out_dir = out_dir

    logger.info("=" * 60)
    logger.info(f"[>>] SIMULATING {len(config.cells)} cell(s) -> {out_dir}")
    logger.info(f"     {config.get_summary()}")
    logger.info("=" * 60)

    start = time.time()
    success = False
    summaries = []
    try:
        summaries = simulate_grid(config.cells, out_dir, threads=config.system.threads,
                                  cache=SmartCache(str(out_dir / "cache")), force=args.force)
        success = True
    finally:
        Analytics.log_run(out_dir, time.time() - start, success, cells=len(summaries),
                          analyzed=sum(s.analyzed for s in summaries),
                          discarded=sum(s.discarded for s in summaries))

    logger.info(f"[OK] {len(summaries)} cell(s) done in {time.time() - start:.1f}s")
    return 0


def _write_table(rows: Sequence, out, row_type) -> int:
    path = write_rows(rows, out, row_type=row_type)
    logger.info(f"[OK] {len(rows)} rows written to {path}")
    return 0


def cmd_pp_table(args, config: Config) -> int:
    return _write_table(pp_report(args.raw), args.out, LevelRow)


def cmd_level_table(args, config: Config) -> int:
    return _write_table(level_report(args.raw, alpha=args.alpha), args.out, LevelRow)


def cmd_power_table(args, config: Config) -> int:
    return _write_table(power_report(args.raw, alpha=args.alpha), args.out, LevelRow)


def cmd_ks_table(args, config: Config) -> int:
    return _write_table(uniformity_report(args.raw), args.out, UniformityRow)


def cmd_selftest(args, config: Config) -> int:
    report = SelfTest(config.system.log_dir, full=args.full).run()
    if args.json:
        print(json.dumps(report, indent=2))
    return 0 if report["overall"] else 1


# =============================================================================
# CLI INTERFACE
# =============================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="run_simulation.py",
        description='QHet - Cochran Q heterogeneity simulation',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python run_simulation.py simulate --config configs/smoke.cfg --out results/smoke
  python run_simulation.py level-table --raw results/smoke --out results/level.csv
  python run_simulation.py power-table --raw results/power --out results/power.csv
  python run_simulation.py selftest --json
        """
    )
    parser.add_argument('--log-dir', help='Log directory (default: logs/ or QHET_LOG_DIR)')
    parser.add_argument('--log-level', help='Console log level (default: QHET_LOG_LEVEL or INFO)')
    sub = parser.add_subparsers(dest='command', metavar='COMMAND')
    sub.required = True

    p = sub.add_parser('simulate', help='Run every cell of a config file')
    p.add_argument('--config', required=True, help='key = value config file')
    p.add_argument('--out', required=True, help='Directory for raw per-cell CSV files')
    p.add_argument('--reps', type=int, help='Replications per cell')
    p.add_argument('--seed', type=int, help='Master seed')
    p.add_argument('--threads', type=int, help='Worker processes (default: QHET_THREADS or 1)')
    p.add_argument('--force', action='store_true', help='Re-run cells already simulated')
    p.set_defaults(func=cmd_simulate)

    for name, func, help_text, has_alpha in (
        ('pp-table', cmd_pp_table, 'P-P error on the tail grid', False),
        ('level-table', cmd_level_table, 'Empirical level at alpha', True),
        ('power-table', cmd_power_table, 'Power versus tau2 for LOR cells', True),
        ('ks-table', cmd_ks_table, 'KS distance of p-values from uniform', False),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument('--raw', required=True, help='Directory of raw simulation CSV files')
        p.add_argument('--out', required=True, help='Output CSV file')
        if has_alpha:
            p.add_argument('--alpha', type=float, default=DEFAULT_ALPHA, help='Nominal level')
        p.set_defaults(func=func)

    p = sub.add_parser('selftest', help='Run numerical checks')
    p.add_argument('--json', action='store_true', help='Print the report as JSON')
    p.add_argument('--full', action='store_true', help='Larger Monte Carlo checks')
    p.set_defaults(func=cmd_selftest)
    return parser


def cli_main(argv: Optional[Sequence[str]] = None) -> int:
    """Parse arguments, dispatch a subcommand and return its exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    try:
        config = Config(getattr(args, 'config', None))
        if args.log_dir:
            config.system.log_dir = Path(args.log_dir)
        if args.log_level:
            config.system.log_level = args.log_level
        config.system.validate()
        config.system.ensure_directories()
        setup_logging(str(config.system.log_dir), config.system.log_level,
                      config.system.log_rotation_size, config.system.log_backup_count)
        return args.func(args, config)

    except KeyboardInterrupt:
        print("\n[STOP] Interrupted by user")
        return 130
    except ValueError as e:
        logger.error(f"[ERR] {e}")
        print(f"[ERR] {e}", file=sys.stderr)
        return 1


def main():
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
