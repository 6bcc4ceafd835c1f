"""Result handlers consuming aggregated results from the output queue."""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from pathlib import Path
from typing import Callable

import httpx

from annoserv.broker import DEAD_LETTER_QUEUE, Broker, Delivery
from annoserv.corpus import BackoffPolicy, RecoverableError, RetriesExhausted, retry_call
from annoserv.messages import AggregatedResult
from annoserv.protocol import dumps
from annoserv.stats import ServerStats

logger = logging.getLogger(__name__)


def callback_body(result: AggregatedResult) -> dict:
    return {
        "communication_id": result.communication_id,
        "annotations": [a.to_dict() for a in result.annotations],
    }


class CallbackPoster:
    """POSTs each result to its callback URL, retrying on the corpus backoff schedule.

    Results that cannot be delivered end up on the dead-letter queue.
    """

    def __init__(self, broker: Broker, stats: ServerStats, policy: BackoffPolicy | None = None,
                 timeout: float = 30.0, default_url: str | None = None,
                 sleep: Callable[[float], None] = time.sleep):
        self.broker = broker
        self.stats = stats
        self.policy = policy or BackoffPolicy()
        self.default_url = default_url
        self.sleep = sleep
        self.client = httpx.Client(timeout=timeout)

    def post(self, result: AggregatedResult, url: str) -> httpx.Response:
        body = dumps(callback_body(result))

        def attempt():
            try:
                resp = self.client.post(url, content=body, headers={"Content-Type": "application/json"})
            except (httpx.TimeoutException, httpx.TransportError) as exc:
                raise RecoverableError(f"{type(exc).__name__}: {exc}") from exc
            if not resp.is_success:
                raise RecoverableError(f"callback {url} answered HTTP {resp.status_code}")
            return resp

        return retry_call(attempt, self.policy, sleep=self.sleep,
                          what=f"callback for communication {result.communication_id}")

    def __call__(self, delivery: Delivery) -> None:
        result: AggregatedResult = delivery.payload
        url = delivery.header.reply_to or self.default_url
        try:
            if url is None:
                raise ValueError("no callback URL")
            self.post(result, url)
        except (RetriesExhausted, ValueError) as exc:
            logger.error("giving up on result %s (communication %s): %s",
                         delivery.message.message_id, result.communication_id, exc)
            self.broker.publish(DEAD_LETTER_QUEUE, delivery.message)
            self.stats.incr("deliveries_failed")
            return
        self.stats.incr("results_delivered")

    def close(self) -> None:
        self.client.close()


class FileWriter:
    """Appends one JSON line per result; flushed before the message is acknowledged."""

    def __init__(self, path: str | Path, stats: ServerStats | None = None, fsync: bool = False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.stats = stats
        self.fsync = fsync
        self.written: set[int] = set()
        self._lock = threading.Lock()
        self._cond = threading.Condition(self._lock)

    def write(self, result: AggregatedResult) -> None:
        line = dumps(result.to_dict()) + b"\n"
        with self._lock:
            with open(self.path, "ab") as fh:
                fh.write(line)
                fh.flush()
                if self.fsync:
                    os.fsync(fh.fileno())
            self.written.add(result.communication_id)
            self._cond.notify_all()

    def __call__(self, delivery: Delivery) -> None:
        self.write(delivery.payload)
        if self.stats is not None:
            self.stats.incr("results_delivered")

    def wait_for(self, communication_ids: set[int], timeout: float | None = None) -> bool:
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            while not communication_ids <= self.written:
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    return False
                self._cond.wait(remaining)
            return True

    def close(self) -> None:
        pass


def read_results(path: str | Path) -> list[AggregatedResult]:
    with open(path, encoding="utf-8") as fh:
        return [AggregatedResult.from_dict(json.loads(line)) for line in fh if line.strip()]
