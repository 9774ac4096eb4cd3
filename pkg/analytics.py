import json
import logging
from pathlib import Path
from datetime import datetime

logger = logging.getLogger(__name__)

STATS_FILE = "stats.json"


class Analytics:
    """Ledger of simulate runs, kept next to the raw output."""

    @staticmethod
    def load_stats(out_dir="."):
        path = Path(out_dir) / STATS_FILE
        if path.exists():
            try:
                return json.loads(path.read_text())
            except (OSError, ValueError):
                logger.warning(f"[WARN] Unreadable run ledger {path}; starting a new one")
        return {
            "total_runs": 0,
            "total_errors": 0,
            "total_reps": 0,
            "last_run": None,
            "history": []
        }

    @staticmethod
    def log_run(out_dir, duration_sec: float, success: bool, cells: int = 0,
                analyzed: int = 0, discarded: int = 0):
        stats = Analytics.load_stats(out_dir)
        stats["total_runs"] += 1
        if not success:
            stats["total_errors"] += 1
        stats["total_reps"] += analyzed + discarded

        stats["last_run"] = datetime.now().isoformat()

        # Add to history (keep last 50)
        entry = {
            "timestamp": datetime.now().isoformat(),
            "duration": round(duration_sec, 2),
            "success": success,
            "cells": cells,
            "analyzed": analyzed,
            "discarded": discarded
        }
        stats["history"].insert(0, entry)
        stats["history"] = stats["history"][:50]

        try:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            (Path(out_dir) / STATS_FILE).write_text(json.dumps(stats, indent=2))
        except OSError as e:
            logger.warning(f"[WARN] Failed to save run ledger: {e}")
        return stats
