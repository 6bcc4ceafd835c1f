from __future__ import annotations

import collections
import threading
import time
from typing import Callable


class ServerStats:
    """Thread-safe counters and gauges reported by ``GET /status``."""

    COUNTERS = (
        "requests_accepted",
        "requests_rejected",
        "documents_processed",
        "annotations_emitted",
        "results_delivered",
        "deliveries_failed",
        "partial_results",
    )

    def __init__(self, window: int = 1000, recent: int = 100):
        self._lock = threading.Lock()
        self._counters = dict.fromkeys(self.COUNTERS, 0)
        self._recent_sources: collections.deque = collections.deque(maxlen=recent)
        self._doc_seconds: collections.deque = collections.deque(maxlen=window)
        self._doc_seconds_sum = 0.0
        self.started = time.time()
        # gauges pulled at snapshot time
        self.queue_depths: Callable[[], dict] = dict
        self.expired_messages: Callable[[], int] = lambda: 0

    def incr(self, name: str, n: int = 1) -> None:
        if n < 0:
            raise ValueError("counters never decrease")
        with self._lock:
            self._counters[name] += n

    def __getitem__(self, name: str) -> int:
        with self._lock:
            return self._counters[name]

    def record_sources(self, sources) -> None:
        now = time.time()
        with self._lock:
            for s in sources:
                self._recent_sources.append((s, now))

    def record_doc_seconds(self, seconds: float, n: int = 1) -> None:
        with self._lock:
            for _ in range(n):
                if len(self._doc_seconds) == self._doc_seconds.maxlen:
                    self._doc_seconds_sum -= self._doc_seconds[0]
                self._doc_seconds.append(seconds)
                self._doc_seconds_sum += seconds

    def avg_doc_seconds(self, default: float = 1.0) -> float:
        with self._lock:
            if not self._doc_seconds:
                return default
            return self._doc_seconds_sum / len(self._doc_seconds)

    def snapshot(self) -> dict:
        with self._lock:
            counters = dict(self._counters)
            recent = [{"source": s, "timestamp": t} for s, t in self._recent_sources]
            samples = len(self._doc_seconds)
            avg = self._doc_seconds_sum / samples if samples else None
        return {
            **counters,
            "expired_messages": self.expired_messages(),
            "recent_sources": recent,
            "queue_depths": self.queue_depths(),
            "avg_doc_seconds": avg,
            "doc_seconds_samples": samples,
            "uptime_seconds": time.time() - self.started,
        }
