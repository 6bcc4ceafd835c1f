from __future__ import annotations

import collections
import errno
import logging
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from annoserv.broker.log import ACK, NACK, PUBLISH, RecordLog
from annoserv.messages import MAX_PRIORITY, Message

logger = logging.getLogger(__name__)

DEAD_LETTER_QUEUE = "dlq"
MAX_DELIVERIES = 10


class BrokerError(Exception):
    pass


class ConfigurationError(BrokerError):
    pass


class UnknownQueue(BrokerError):
    pass


class StorageFull(BrokerError):
    """Raised by publish() when the broker cannot take more data (backpressure)."""


class ProtocolError(BrokerError):
    pass


@dataclass(frozen=True)
class QueueDescriptor:
    name: str
    durable: bool = True
    max_priority: int = MAX_PRIORITY

    def __post_init__(self):
        if not self.name:
            raise ConfigurationError("queue name must not be empty")
        if self.max_priority != MAX_PRIORITY:
            raise ConfigurationError(f"max_priority is fixed at {MAX_PRIORITY}")


@dataclass(eq=False)
class _Entry:
    message: Message
    size: int
    delivery_count: int = 0


@dataclass
class Delivery:
    message: Message
    queue: str
    delivery_count: int

    @property
    def header(self):
        return self.message.header

    @property
    def payload(self):
        return self.message.payload


@dataclass(eq=False)
class _Queue:
    desc: QueueDescriptor
    log: RecordLog | None
    ready: list[collections.deque] = field(
        default_factory=lambda: [collections.deque() for _ in range(MAX_PRIORITY + 1)]
    )
    entries: dict[str, _Entry] = field(default_factory=dict)
    consumers: list["Consumer"] = field(default_factory=list)
    rr: int = 0
    recovered: bool = False

    def ready_count(self) -> int:
        return sum(len(d) for d in self.ready)


Handler = Callable[..., None]


class Consumer:
    """A pool of ``parallelism`` workers attached to one queue.

    The handler gets a :class:`Delivery` (or a list of them when
    ``batch_size > 1``). Returning acks, raising nacks.
    """

    def __init__(self, broker: "Broker", queue: str, handler: Handler, parallelism: int = 1,
                 batch_size: int = 1, batch_linger: float = 0.0, name: str | None = None):
        if parallelism < 1:
            raise ValueError("parallelism must be >= 1")
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.broker = broker
        self.queue = queue
        self.handler = handler
        self.parallelism = parallelism
        self.batch_size = batch_size
        self.batch_linger = batch_linger
        self.name = name or f"{queue}-consumer"
        self.capacity = parallelism * batch_size
        self.inflight = 0  # guarded by the broker lock
        self.delivered = 0
        self._inbox: collections.deque[_Entry] = collections.deque()
        self._cond = threading.Condition()
        self._stopped = False
        self._workers = [
            threading.Thread(target=self._run, name=f"{self.name}-{i}", daemon=True)
            for i in range(parallelism)
        ]

    def has_capacity(self) -> bool:
        return not self._stopped and self.inflight < self.capacity

    def _assign(self, entry: _Entry) -> None:
        self.inflight += 1
        with self._cond:
            self._inbox.append(entry)
            self._cond.notify()

    def _start(self) -> None:
        for w in self._workers:
            w.start()

    def _next_batch(self) -> list[_Entry] | None:
        with self._cond:
            while not self._inbox and not self._stopped:
                self._cond.wait()
            if self._stopped:
                return None
            batch = [self._inbox.popleft()]
            deadline = time.monotonic() + self.batch_linger
            while len(batch) < self.batch_size:
                if self._inbox:
                    batch.append(self._inbox.popleft())
                    continue
                remaining = deadline - time.monotonic()
                if remaining <= 0 or self._stopped:
                    break
                self._cond.wait(remaining)
            return batch

    def _run(self) -> None:
        while True:
            batch = self._next_batch()
            if batch is None:
                return
            deliveries = []
            for entry in batch:
                if self.broker._drop_if_expired(entry):
                    continue
                entry.delivery_count += 1
                deliveries.append(Delivery(entry.message, self.queue, entry.delivery_count))
            if not deliveries:
                continue
            self.delivered += len(deliveries)
            try:
                self.handler(deliveries if self.batch_size > 1 else deliveries[0])
            except Exception:
                logger.exception("handler on %s failed; message(s) will be redelivered", self.queue)
                for d in deliveries:
                    self.broker.nack(d.message.message_id)
            else:
                for d in deliveries:
                    self.broker.ack(d.message.message_id)

    def stop(self, wait: bool = True, timeout: float | None = None) -> None:
        """Stop taking messages; in-progress handlers finish, queued ones go back to the queue."""
        with self._cond:
            self._stopped = True
            leftovers = list(self._inbox)
            self._inbox.clear()
            self._cond.notify_all()
        self.broker._detach(self, leftovers)
        if wait:
            for w in self._workers:
                if w is not threading.current_thread():
                    w.join(timeout)


class Broker:
    """Embedded message bus: named 10-level priority queues with ack/nack,
    TTL expiry, dead-lettering and round-robin dispatch to competing consumers.

    Durable queues keep an append-only record log under ``data_dir/<queue>/``.
    Call :meth:`recover` once after declaring queues at startup.
    """

    def __init__(self, data_dir: str | Path | None, *, fsync: bool = False,
                 max_bytes: int | None = None, max_deliveries: int = MAX_DELIVERIES,
                 clock: Callable[[], float] = time.time):
        self.data_dir = Path(data_dir) if data_dir is not None else None
        self.fsync = fsync
        self.max_bytes = max_bytes
        self.max_deliveries = max_deliveries
        self.clock = clock
        self.expired = 0
        self.dead_lettered = 0
        self.live_bytes = 0
        self._lock = threading.RLock()
        self._idle = threading.Condition(self._lock)
        self._queues: dict[str, _Queue] = {}
        self._inflight: dict[str, tuple[_Queue, _Entry, Consumer]] = {}
        self._recovered = False
        self._closed = False
        self.declare_queue(QueueDescriptor(DEAD_LETTER_QUEUE, durable=self.data_dir is not None))

    # -- topology -------------------------------------------------------

    def declare_queue(self, desc: QueueDescriptor | str, durable: bool = True) -> str:
        if isinstance(desc, str):
            desc = QueueDescriptor(desc, durable=durable)
        with self._lock:
            existing = self._queues.get(desc.name)
            if existing is not None:
                if existing.desc != desc:
                    raise ConfigurationError(
                        f"queue {desc.name!r} already declared as {existing.desc}, not {desc}"
                    )
                return desc.name
            log = None
            if desc.durable:
                if self.data_dir is None:
                    raise ConfigurationError(f"durable queue {desc.name!r} needs a data directory")
                log = RecordLog(self.data_dir / desc.name / "queue.log", fsync=self.fsync)
            q = _Queue(desc, log)
            self._queues[desc.name] = q
            if self._recovered and log is not None:
                self._recover_queue(q)
            return desc.name

    def queues(self) -> list[str]:
        return list(self._queues)

    def _queue(self, name: str) -> _Queue:
        try:
            return self._queues[name]
        except KeyError:
            raise UnknownQueue(name) from None

    # -- publishing -----------------------------------------------------

    def publish(self, queue: str, msg: Message) -> str:
        """Record ``msg`` durably and make it available; returns its message id."""
        q = self._queue(queue)
        body = msg.encode()
        with self._lock:
            if self._closed:
                raise BrokerError("broker is closed")
            if msg.message_id in q.entries:
                raise ProtocolError(f"message {msg.message_id} already queued on {queue!r}")
            if msg.header.expired(self.clock()):
                self.expired += 1
                logger.info("dropping already expired message %s for %s", msg.message_id, queue)
                return msg.message_id
            if self.max_bytes is not None and self.live_bytes + len(body) > self.max_bytes:
                raise StorageFull(f"broker holds {self.live_bytes} bytes, limit {self.max_bytes}")
            if q.log is not None:
                try:
                    q.log.append(PUBLISH, body)
                except OSError as exc:
                    if exc.errno in (errno.ENOSPC, errno.EDQUOT):
                        raise StorageFull(str(exc)) from exc
                    raise
            entry = _Entry(msg, len(body))
            q.entries[msg.message_id] = entry
            self.live_bytes += entry.size
            q.ready[msg.header.priority].append(entry)
            self._dispatch(q)
        return msg.message_id

    # -- consuming ------------------------------------------------------

    def consume(self, queue: str, handler: Handler, parallelism: int = 1, *,
                batch_size: int = 1, batch_linger: float = 0.0, name: str | None = None) -> Consumer:
        q = self._queue(queue)
        consumer = Consumer(self, queue, handler, parallelism, batch_size, batch_linger, name)
        consumer._start()
        with self._lock:
            q.consumers.append(consumer)
            self._dispatch(q)
        return consumer

    def _pop_ready(self, q: _Queue) -> _Entry | None:
        now = self.clock()
        for prio in range(MAX_PRIORITY, -1, -1):
            bucket = q.ready[prio]
            while bucket:
                entry = bucket.popleft()
                if entry.message.header.expired(now):
                    self._discard(q, entry, expired=True)
                    continue
                return entry
        return None

    def _dispatch(self, q: _Queue) -> None:
        # caller holds the lock
        n = len(q.consumers)
        while n:
            for i in range(n):
                consumer = q.consumers[(q.rr + i) % n]
                if consumer.has_capacity():
                    break
            else:
                return
            entry = self._pop_ready(q)
            if entry is None:
                return
            q.rr = (q.rr + i + 1) % n
            self._inflight[entry.message.message_id] = (q, entry, consumer)
            consumer._assign(entry)

    def _discard(self, q: _Queue, entry: _Entry, expired: bool = False) -> None:
        # caller holds the lock; entry is not in a ready bucket
        mid = entry.message.message_id
        q.entries.pop(mid, None)
        self.live_bytes -= entry.size
        # after close() the log stays as a crash would leave it
        if q.log is not None and not self._closed:
            q.log.append(ACK, mid.encode())
        if expired:
            self.expired += 1
            logger.info("message %s on %s expired", mid, q.desc.name)
        self._idle.notify_all()

    def _drop_if_expired(self, entry: _Entry) -> bool:
        with self._lock:
            if not entry.message.header.expired(self.clock()):
                return False
            rec = self._inflight.pop(entry.message.message_id, None)
            if rec is None:
                return True
            q, _, consumer = rec
            consumer.inflight -= 1
            self._discard(q, entry, expired=True)
            self._dispatch(q)
            return True

    def _detach(self, consumer: Consumer, leftovers: list[_Entry]) -> None:
        with self._lock:
            q = self._queues[consumer.queue]
            if consumer in q.consumers:
                q.consumers.remove(consumer)
                q.rr = 0
            for entry in reversed(leftovers):
                self._inflight.pop(entry.message.message_id, None)
                consumer.inflight -= 1
                q.ready[entry.message.header.priority].appendleft(entry)
            self._dispatch(q)

    def ack(self, message_id: str) -> None:
        with self._lock:
            rec = self._inflight.pop(message_id, None)
            if rec is None:
                logger.warning("ack for unknown or not in-flight message %s", message_id)
                raise ProtocolError(f"message {message_id} is not in flight")
            q, entry, consumer = rec
            consumer.inflight -= 1
            self._discard(q, entry)
            self._dispatch(q)

    def nack(self, message_id: str) -> None:
        """Return an in-flight message to the front of its priority level.

        After ``max_deliveries`` deliveries the message moves to the dead-letter queue.
        """
        with self._lock:
            rec = self._inflight.pop(message_id, None)
            if rec is None:
                logger.warning("nack for unknown or not in-flight message %s", message_id)
                raise ProtocolError(f"message {message_id} is not in flight")
            q, entry, consumer = rec
            consumer.inflight -= 1
            if entry.delivery_count >= self.max_deliveries and q.desc.name != DEAD_LETTER_QUEUE:
                logger.error("message %s failed %d deliveries on %s; dead-lettering",
                             message_id, entry.delivery_count, q.desc.name)
                self._discard(q, entry)
                self.dead_lettered += 1
                if not self._closed:
                    self.publish(DEAD_LETTER_QUEUE, entry.message)
            else:
                if q.log is not None and not self._closed:
                    q.log.append(NACK, message_id.encode())
                q.ready[entry.message.header.priority].appendleft(entry)
            self._dispatch(q)

    # -- recovery -------------------------------------------------------

    def recover(self) -> int:
        """Replay the logs of every declared durable queue; returns messages restored."""
        with self._lock:
            restored = sum(self._recover_queue(q) for q in self._queues.values() if q.log is not None)
            self._recovered = True
            return restored

    def _recover_queue(self, q: _Queue) -> int:
        if q.recovered:
            return 0
        q.recovered = True
        records = q.log.read_all()
        pending: dict[str, tuple[bytes, Message]] = {}
        nacks: collections.Counter[str] = collections.Counter()
        for kind, body in records:
            if kind == PUBLISH:
                try:
                    msg = Message.decode(body)
                except (ValueError, KeyError, TypeError):
                    logger.exception("%s: undecodable publish record skipped", q.desc.name)
                    continue
                pending[msg.message_id] = (body, msg)
            elif kind == ACK:
                pending.pop(body.decode(), None)
            elif kind == NACK:
                nacks[body.decode()] += 1

        now = self.clock()
        restored: list[_Entry] = []
        for mid, (body, msg) in list(pending.items()):
            if mid in q.entries:
                continue  # published earlier in this process
            if msg.header.expired(now):
                self.expired += 1
                del pending[mid]
                continue
            restored.append(_Entry(msg, len(body), delivery_count=nacks[mid]))

        buckets: dict[int, list[_Entry]] = collections.defaultdict(list)
        for entry in restored:
            q.entries[entry.message.message_id] = entry
            self.live_bytes += entry.size
            buckets[entry.message.header.priority].append(entry)
        for prio, entries in buckets.items():
            q.ready[prio].extendleft(reversed(entries))

        compacted = []
        for mid, (body, _) in pending.items():
            compacted.append((PUBLISH, body))
            compacted.extend([(NACK, mid.encode())] * nacks[mid])
        q.log.rewrite(compacted)
        if restored:
            logger.info("%s: restored %d unacknowledged message(s)", q.desc.name, len(restored))
        self._dispatch(q)
        return len(restored)

    # -- introspection --------------------------------------------------

    def depth(self, queue: str) -> int:
        """Messages waiting for delivery (not counting in-flight ones)."""
        with self._lock:
            return self._queue(queue).ready_count()

    def unacked(self, queue: str) -> int:
        with self._lock:
            return len(self._queue(queue).entries)

    def queue_stats(self) -> dict[str, dict[str, int]]:
        with self._lock:
            return {
                name: {"ready": q.ready_count(), "unacked": len(q.entries), "consumers": len(q.consumers)}
                for name, q in self._queues.items()
            }

    def wait_empty(self, queues: list[str] | None = None, timeout: float | None = None) -> bool:
        """Block until the given queues (default: all but the dead-letter queue) hold nothing."""
        names = queues if queues is not None else [n for n in self._queues if n != DEAD_LETTER_QUEUE]
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._idle:
            while any(self._queues[n].entries for n in names):
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    return False
                self._idle.wait(remaining if remaining is None else min(remaining, 0.5))
            return True

    def close(self, timeout: float | None = 5.0) -> None:
        """Stop all consumers and close logs. Unacked messages stay in the logs.

        Handlers still running after ``timeout`` may finish, but their acks are
        no longer recorded, so the on-disk state matches a crash at this point.
        """
        with self._lock:
            self._closed = True
            consumers = [c for q in self._queues.values() for c in q.consumers]
        for c in consumers:
            c.stop(wait=True, timeout=timeout)
        with self._lock:
            for q in self._queues.values():
                if q.log is not None:
                    q.log.close()
