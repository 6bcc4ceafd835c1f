from __future__ import annotations

import logging
import threading
import time
from concurrent.futures import ProcessPoolExecutor

from annoserv.annotators import AnnotatorBinding, Mode, SafeAnnotator, binding_for, build_annotator
from annoserv.broker import Broker, Consumer, Delivery
from annoserv.config import AnnotatorConfig, Config
from annoserv.corpus import CorpusAdapter
from annoserv.messages import (
    AnnotationRequestPayload,
    AnnotatorPart,
    DocumentResult,
    FetchedDocument,
    Message,
    MessageHeader,
)
from annoserv.pipeline.stages import aggregate, gather, route_types, split
from annoserv.pipeline.store import CorrelationStore, GatherState, RequestState
from annoserv.protocol import Annotation
from annoserv.stats import ServerStats

logger = logging.getLogger(__name__)


# -- annotator execution ---------------------------------------------------

_worker_annotators: dict[str, SafeAnnotator] = {}
_worker_configs: dict[str, AnnotatorConfig] = {}


def _init_worker(configs: list[dict]) -> None:
    logging.basicConfig(level=logging.WARNING)
    for c in configs:
        cfg = AnnotatorConfig.model_validate(c)
        _worker_configs[cfg.name] = cfg


def _worker_annotate(name: str, doc: dict) -> list[dict]:
    annotator = _worker_annotators.get(name)
    if annotator is None:
        annotator = _worker_annotators[name] = build_annotator(_worker_configs[name])
    found = annotator.annotate(FetchedDocument.from_dict(doc))
    return [a.to_dict() for a in found]


class AnnotatorPool:
    """Runs embedded annotators in the calling thread or in worker processes.

    Process mode sidesteps the GIL for CPU-bound taggers; each worker builds
    its own annotator instances from the configuration.
    """

    def __init__(self, configs: list[AnnotatorConfig], executor: str = "thread", workers: int = 1):
        self.executor = executor
        self._local: dict[str, SafeAnnotator] = {}
        self._configs = {c.name: c for c in configs}
        self._lock = threading.Lock()
        self._procs = None
        if executor == "process":
            embedded = [c.model_dump(mode="json") for c in configs if c.kind != "external"]
            self._procs = ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(embedded,))

    def add(self, cfg: AnnotatorConfig) -> None:
        with self._lock:
            self._configs[cfg.name] = cfg
            self._local.pop(cfg.name, None)

    def get(self, name: str) -> SafeAnnotator:
        with self._lock:
            annotator = self._local.get(name)
            if annotator is None:
                annotator = self._local[name] = build_annotator(self._configs[name])
            return annotator

    def annotate(self, name: str, doc: FetchedDocument) -> set[Annotation]:
        if self._procs is not None and self._configs[name].kind != "external":
            found = self._procs.submit(_worker_annotate, name, doc.to_dict()).result()
            return {Annotation.from_dict(a) for a in found}
        return self.get(name).annotate(doc)

    def close(self) -> None:
        if self._procs is not None:
            self._procs.shutdown(wait=True, cancel_futures=True)


class BindingTable:
    """The live type-to-annotator mapping; swapped atomically on reload."""

    def __init__(self, bindings: list[AnnotatorBinding]):
        self._bindings = tuple(bindings)
        self._lock = threading.Lock()

    def snapshot(self) -> tuple[AnnotatorBinding, ...]:
        with self._lock:
            return self._bindings

    def replace(self, bindings: list[AnnotatorBinding]) -> None:
        with self._lock:
            self._bindings = tuple(bindings)


# -- the back end ----------------------------------------------------------


def _deadline(header: MessageHeader, margin: float, fraction: float) -> float:
    span = max(0.0, header.expiry - header.created)
    return header.expiry - min(margin, span * fraction)


class Backend:
    """split -> fetch -> scatter -> annotators -> gather -> aggregate -> output.

    Every stage is a broker consumer with ``config.parallelism`` workers. Several
    Backend instances may share one broker and store; they then compete for
    messages round-robin.
    """

    def __init__(self, broker: Broker, store: CorrelationStore, config: Config,
                 adapters: dict, stats: ServerStats | None = None,
                 pool: AnnotatorPool | None = None, name: str = "backend"):
        self.broker = broker
        self.store = store
        self.config = config
        self.q = config.queues
        self.adapters: dict = adapters
        self.stats = stats or ServerStats()
        self.name = name
        self.pool = pool or AnnotatorPool(config.annotators, config.executor, config.parallelism)
        self._own_pool = pool is None
        self.annotator_configs = {a.name: a for a in config.annotators}
        self.bindings = BindingTable([binding_for(a) for a in config.annotators])
        self._consumers: list[Consumer] = []
        self._annotator_consumers: dict[str, list[Consumer]] = {}
        self._stop = threading.Event()
        self._reaper: threading.Thread | None = None
        self.running = False
        self.declare()

    # -- lifecycle ------------------------------------------------------

    def declare(self) -> None:
        for name in (self.q.input, self.q.fetch, self.q.scatter, self.q.gather, self.q.aggregate, self.q.output):
            self._declare(name)
        for b in self.bindings.snapshot():
            self._declare(b.queue)

    def _declare(self, name: str) -> None:
        self.broker.declare_queue(name, durable=self.broker.data_dir is not None)

    def start(self) -> None:
        if self.running:
            return
        p = self.config.parallelism
        batch = max([a.batch_size for a in self.adapters.values()] or [1])
        consume = self.broker.consume
        self._consumers = [
            consume(self.q.input, self._on_request, p, name=f"{self.name}.split"),
            consume(self.q.fetch, self._on_fetch, p, batch_size=batch,
                    batch_linger=self.config.fetch_linger, name=f"{self.name}.fetch"),
            consume(self.q.scatter, self._on_scatter, p, name=f"{self.name}.scatter"),
            consume(self.q.gather, self._on_gather, p, name=f"{self.name}.gather"),
            consume(self.q.aggregate, self._on_aggregate, p, name=f"{self.name}.aggregate"),
        ]
        for b in self.bindings.snapshot():
            self._start_annotator(b)
        self._stop.clear()
        self._reaper = threading.Thread(target=self._reap_loop, name=f"{self.name}.reaper", daemon=True)
        self._reaper.start()
        self.running = True

    def _start_annotator(self, b: AnnotatorBinding) -> None:
        cfg = self.annotator_configs[b.name]
        p = self.config.parallelism
        consumers = []
        if b.mode is Mode.EXTERNAL:
            # one competing consumer per external instance: the broker spreads work round-robin
            for ep in cfg.endpoints:
                annotator = build_annotator(cfg, endpoint=ep)
                consumers.append(self.broker.consume(
                    b.queue, self._annotate_handler(b, annotator.annotate), p, name=f"{self.name}.{b.name}@{ep}"))
        else:
            consumers.append(self.broker.consume(
                b.queue, self._annotate_handler(b, lambda doc, n=b.name: self.pool.annotate(n, doc)), p,
                name=f"{self.name}.{b.name}"))
        self._annotator_consumers[b.name] = consumers

    def stop(self) -> None:
        self._stop.set()
        for c in self._consumers + [c for cs in self._annotator_consumers.values() for c in cs]:
            c.stop(wait=True, timeout=10)
        self._consumers = []
        self._annotator_consumers = {}
        if self._reaper is not None:
            self._reaper.join(5)
        self.running = False

    def close(self) -> None:
        self.stop()
        if self._own_pool:
            self.pool.close()

    def reload_annotators(self, configs: list[AnnotatorConfig]) -> None:
        """Swap the binding table at runtime: new annotators start, removed ones stop.

        Deactivated bindings keep their consumers so queued work drains, but
        receive no new documents.
        """
        new = {c.name: c for c in configs}
        for name in set(self._annotator_consumers) - set(new):
            for c in self._annotator_consumers.pop(name):
                c.stop(wait=False)
        for cfg in configs:
            old = self.annotator_configs.get(cfg.name)
            self.annotator_configs[cfg.name] = cfg
            self.pool.add(cfg)
            b = binding_for(cfg)
            self._declare(b.queue)
            if self.running and (old is None or old.model_copy(update={"active": cfg.active}) != cfg):
                for c in self._annotator_consumers.pop(cfg.name, []):
                    c.stop(wait=False)
                self._start_annotator(b)
        for name in set(self.annotator_configs) - set(new):
            del self.annotator_configs[name]
        self.bindings.replace([binding_for(c) for c in configs])
        logger.info("annotator bindings reloaded: %s",
                    [(b.name, b.entity_type.value, b.active) for b in self.bindings.snapshot()])

    # -- stage handlers -------------------------------------------------

    def _publish(self, queue: str, header: MessageHeader, payload) -> None:
        self.broker.publish(queue, Message(header, payload))

    def _on_request(self, d: Delivery) -> None:
        request = d.payload
        if not isinstance(request, AnnotationRequestPayload):
            raise TypeError(f"unexpected {type(request).__name__} on input queue")
        request = request.request
        request_id = d.header.request_id or d.message.message_id
        tasks = split(request)
        base = d.header.derive(request_id=request_id, expected_docs=len(tasks))
        created = self.store.open_request(
            request_id, request.communication_id, [t.document_ref.document_id for t in tasks],
            base.to_dict(), _deadline(base, self.config.aggregate_margin, 0.25),
        )
        if not created:
            state = self.store.request(request_id)
            if state is not None and state.done:
                logger.info("request %s already answered; ignoring redelivery", request_id)
                return
        for task in tasks:
            self._publish(self.q.fetch, base.derive(), task)

    def _on_fetch(self, batch: list[Delivery]) -> None:
        by_source: dict = {}
        for d in batch:
            by_source.setdefault(d.payload.document_ref.source, []).append(d)
        for source, deliveries in by_source.items():
            adapter: CorpusAdapter | None = self.adapters.get(source)
            ids = list(dict.fromkeys(d.payload.document_ref.document_id for d in deliveries))
            fetched: dict[str, FetchedDocument] = {}
            if adapter is None:
                logger.error("no corpus adapter for %s; documents %s unavailable", source.value, ids)
            else:
                for i in range(0, len(ids), adapter.batch_size):
                    for doc in adapter.load(ids[i:i + adapter.batch_size]):
                        fetched[doc.document_id] = doc
            self.stats.record_sources(source.value for _ in deliveries)
            for d in deliveries:
                ref = d.payload.document_ref
                doc = fetched.get(ref.document_id) or FetchedDocument.missing(ref)
                self._publish(self.q.scatter, d.header.derive(), doc)

    def _on_scatter(self, d: Delivery) -> None:
        doc: FetchedDocument = d.payload
        h = d.header
        if doc.unavailable:
            self._publish(self.q.aggregate, h.derive(),
                          DocumentResult(h.communication_id, doc.document_id, unavailable=True))
            return
        routes = route_types(h.requested_types, self.bindings.snapshot())
        if not routes:
            self._publish(self.q.aggregate, h.derive(), DocumentResult(h.communication_id, doc.document_id))
            return
        state = self.store.open_gather(
            h.request_id, doc.document_id, [r.binding for r in routes], h.to_dict(),
            _deadline(h, self.config.gather_margin, 0.5),
        )
        if state.done:
            logger.info("document %s of %s already gathered; skipping scatter", doc.document_id, h.request_id)
            return
        expected = set(state.expected)
        for r in routes:
            if r.binding in expected:
                self._publish(r.queue, h.derive(part_key=r.binding, expected_parts=len(state.expected)), doc)

    def _annotate_handler(self, binding: AnnotatorBinding, annotate):
        def handle(d: Delivery) -> None:
            doc: FetchedDocument = d.payload
            found = annotate(doc)
            part = AnnotatorPart(d.header.communication_id, doc.document_id, binding.name, frozenset(found))
            self._publish(self.q.gather, d.header.derive(part_key=binding.name), part)
        return handle

    def _on_gather(self, d: Delivery) -> None:
        part: AnnotatorPart = d.payload
        state = self.store.add_part(d.header.request_id, part.document_id, part.part_key, part.to_dict())
        if state is None or state.done:
            logger.info("late part %s for document %s of %s dropped",
                        part.part_key, part.document_id, d.header.request_id)
            return
        if state.complete:
            self._finish_gather(state)

    def _finish_gather(self, state: GatherState, partial: bool = False) -> None:
        header = MessageHeader.from_dict(state.header)
        parts = [AnnotatorPart.from_dict(p) for p in state.parts.values()]
        result = gather(header.communication_id, state.document_id, parts, state.expected)
        if result.missing_parts:
            logger.warning("document %s of %s: no answer from %s by the deadline",
                           state.document_id, state.request_id, sorted(result.missing_parts))
        self._publish(self.q.aggregate, header.derive(part_key=None, expected_parts=None), result)
        self.store.finish_gather(state.request_id, state.document_id)

    def _on_aggregate(self, d: Delivery) -> None:
        result: DocumentResult = d.payload
        state = self.store.add_doc_result(d.header.request_id, result.document_id, result.to_dict())
        if state is None or state.done:
            logger.info("late result for document %s of %s dropped", result.document_id, d.header.request_id)
            return
        if state.complete:
            self._finish_request(state)

    def _finish_request(self, state: RequestState, partial: bool = False) -> None:
        header = MessageHeader.from_dict(state.header)
        results = [DocumentResult.from_dict(r) for r in state.results.values()]
        agg = aggregate(state.communication_id, results, state.document_ids)
        if agg.missing_docs:
            logger.warning("request %s (communication %s): documents without text or results: %s",
                           state.request_id, state.communication_id, sorted(agg.missing_docs))
        self._publish(self.q.output, header.derive(expected_docs=None), agg)
        self.store.finish_request(state.request_id)
        n = len(state.results)
        self.stats.incr("documents_processed", n)
        self.stats.incr("annotations_emitted", len(agg.annotations))
        if partial or any(r.missing_parts for r in results):
            self.stats.incr("partial_results")
        if n:
            self.stats.record_doc_seconds(max(0.0, time.time() - header.created) / n, n)

    # -- deadlines ------------------------------------------------------

    def reap(self, now: float | None = None) -> int:
        """Emit partial results for correlation state past its deadline."""
        now = time.time() if now is None else now
        n = 0
        for g in self.store.due_gathers(now):
            if g.header["expiry"] <= now:
                self.store.finish_gather(g.request_id, g.document_id)  # TTL took the request
                continue
            self._finish_gather(g, partial=True)
            n += 1
        for r in self.store.due_requests(now):
            if r.header["expiry"] <= now:
                self.store.finish_request(r.request_id)
                continue
            self._finish_request(r, partial=True)
            n += 1
        self.store.purge(now - 3600)
        return n

    def _reap_loop(self) -> None:
        while not self._stop.wait(0.25):
            try:
                self.reap()
            except Exception:
                logger.exception("deadline sweep failed")
