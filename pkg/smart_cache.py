import hashlib
import json
import logging
from pathlib import Path
from datetime import datetime
from typing import Optional, Any

logger = logging.getLogger(__name__)


class SmartCache:
    """Manifest of completed simulation cells, so an interrupted grid can resume."""

    def __init__(self, cache_dir: str = "cache"):
        self.cache_dir = Path(cache_dir)
        self.cache_dir.mkdir(parents=True, exist_ok=True)

    def get(self, key: str) -> Optional[Any]:
        """Recorded summary of a completed cell, or None."""
        cache_file = self._get_path(key)

        if not cache_file.exists():
            return None

        try:
            data = json.loads(cache_file.read_text(encoding='utf-8'))
            if data.get('key') != key:
                return None
            logger.info(f"[CACHE] Cell already simulated: {key} (at {data['timestamp']})")
            return data['content']

        except (OSError, ValueError, KeyError) as e:
            logger.warning(f"[WARN] Cache read error: {e}")

        return None

    def set(self, key: str, content: Any):
        """Record a completed cell with timestamp."""
        cache_file = self._get_path(key)
        try:
            cache_file.write_text(json.dumps({
                'key': key,
                'timestamp': datetime.now().isoformat(),
                'content': content
            }, indent=2), encoding='utf-8')
        except (OSError, TypeError) as e:
            logger.warning(f"[WARN] Cache write error: {e}")

    def invalidate(self, key: str) -> bool:
        """Forget a cell so the next grid run simulates it again."""
        cache_file = self._get_path(key)
        if cache_file.exists():
            cache_file.unlink()
            return True
        return False

    def _hash(self, key: str) -> str:
        return hashlib.md5(key.encode()).hexdigest()

    def _get_path(self, key: str) -> Path:
        return self.cache_dir / f"{self._hash(key)}.json"
