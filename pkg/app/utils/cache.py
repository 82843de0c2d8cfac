import hashlib
import json
import threading
from collections import OrderedDict
from typing import Any, Dict, Optional, Sequence

import structlog

from app.core.config import get_settings

logger = structlog.get_logger(__name__)
settings = get_settings()


class LabelCache:
    """Bounded in-memory store for expensive oracle labels (least recently used out)."""

    def __init__(self, max_size: Optional[int] = None):
        self.memory_cache: "OrderedDict[str, Any]" = OrderedDict()
        self.max_size = max_size if max_size is not None else settings.label_cache_size
        self.hits = 0
        self.misses = 0
        self._lock = threading.Lock()

    def generate_key(self, data: Any, prefix: str = "label") -> str:
        if isinstance(data, str):
            content = data
        elif isinstance(data, dict):
            content = json.dumps(data, sort_keys=True)
        elif isinstance(data, (list, tuple)):
            # repr keeps every bit of a float
            content = json.dumps([repr(float(x)) for x in data])
        else:
            content = str(data)

        hash_obj = hashlib.sha256(content.encode())
        return f"{prefix}:{hash_obj.hexdigest()[:16]}"

    def parameter_key(self, problem: str, parameter: Sequence[float]) -> str:
        return self.generate_key(list(parameter), prefix=problem)

    def get(self, key: str) -> Optional[Any]:
        with self._lock:
            if key in self.memory_cache:
                self.memory_cache.move_to_end(key)
                self.hits += 1
                return self.memory_cache[key]
            self.misses += 1
            return None

    def set(self, key: str, value: Any) -> None:
        evicted = []
        with self._lock:
            self.memory_cache[key] = value
            self.memory_cache.move_to_end(key)
            while len(self.memory_cache) > self.max_size:
                evicted.append(self.memory_cache.popitem(last=False)[0])
        for old in evicted:
            logger.debug("Label cache eviction", key=old)

    def delete(self, key: str) -> bool:
        with self._lock:
            return self.memory_cache.pop(key, None) is not None

    def clear(self) -> None:
        with self._lock:
            self.memory_cache.clear()
            self.hits = self.misses = 0

    def get_stats(self) -> Dict[str, Any]:
        with self._lock:
            return {
                "memory_cache_size": len(self.memory_cache),
                "max_size": self.max_size,
                "hits": self.hits,
                "misses": self.misses,
            }


label_cache = LabelCache()
