"""Wiring: broker, correlation store, back end, front end and result handler."""

from __future__ import annotations

import logging
import os
import random
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

from annoserv.broker import Broker, Consumer
from annoserv.config import AdapterConfig, AnnotatorConfig, Config
from annoserv.corpus import (
    BackoffPolicy,
    CorpusAdapter,
    JsonServerAdapter,
    LocalAdapter,
    PMCAdapter,
    PubMedAdapter,
)
from annoserv.frontend import AnnotationFrontend
from annoserv.messages import AggregatedResult
from annoserv.pipeline import Backend, CorrelationStore
from annoserv.protocol import AnnotationRequest, DocumentRef, EntityType, Source, dumps
from annoserv.results import CallbackPoster, FileWriter, read_results
from annoserv.stats import ServerStats

logger = logging.getLogger(__name__)


def backoff_policy(config: Config) -> BackoffPolicy:
    b = config.backoff
    return BackoffPolicy(b.initial_wait, b.multiplier, b.max_wait, b.max_attempts)


def build_adapter(cfg: AdapterConfig, policy: BackoffPolicy) -> CorpusAdapter:
    kw = {"policy": policy, "batch_size": cfg.batch_size}
    if cfg.source is Source.LOCAL:
        return LocalAdapter(cfg.directory, **kw)
    http = {"timeout": cfg.timeout, **kw}
    if cfg.source is Source.PUBMED:
        return PubMedAdapter(cfg.base_url, **http) if cfg.base_url else PubMedAdapter(**http)
    if cfg.source is Source.PMC:
        return PMCAdapter(cfg.base_url, **http) if cfg.base_url else PMCAdapter(**http)
    return JsonServerAdapter(cfg.source, cfg.base_url, **http)


def build_adapters(config: Config) -> dict[Source, CorpusAdapter]:
    policy = backoff_policy(config)
    return {a.source: build_adapter(a, policy) for a in config.adapters}


class Runtime:
    """Everything one server process runs.

    With ``durable=False`` the broker and correlation store live in memory,
    which suits one-shot offline runs.
    """

    def __init__(self, config: Config, *, durable: bool = True, stats: ServerStats | None = None,
                 adapters: dict | None = None, result_handler=None):
        self.config = config
        self.stats = stats or ServerStats()
        data_dir = Path(config.data_dir)
        if durable:
            data_dir.mkdir(parents=True, exist_ok=True)
        self.broker = Broker(data_dir / "broker" if durable else None, fsync=config.fsync,
                             max_bytes=config.max_bytes)
        self.store = CorrelationStore(data_dir / "correlation.db" if durable else ":memory:")
        self.adapters = adapters if adapters is not None else build_adapters(config)
        self.backend = Backend(self.broker, self.store, config, self.adapters, self.stats)
        self.frontend = AnnotationFrontend(
            self.broker, self.stats,
            input_queue=config.queues.input,
            apikeys=config.apikeys,
            bucket_width=config.bucket_width,
            default_ttl=config.default_ttl,
            expiry_tolerance=config.expiry_tolerance,
            default_callback_url=config.default_callback_url,
        )
        if result_handler is None:
            if config.result_handler == "file":
                result_handler = FileWriter(config.output_file, self.stats, fsync=config.fsync)
            else:
                result_handler = CallbackPoster(self.broker, self.stats, backoff_policy(config),
                                                default_url=config.default_callback_url)
        self.result_handler = result_handler
        self._output: Consumer | None = None
        self.stats.queue_depths = lambda: {
            name: s["unacked"] for name, s in self.broker.queue_stats().items()
        }
        self.stats.expired_messages = lambda: self.broker.expired
        self.restored = self.broker.recover()
        if self.restored:
            logger.info("replaying %d unacknowledged messages", self.restored)

    def start_backend(self) -> None:
        self.backend.start()
        if self._output is None:
            self._output = self.broker.consume(self.config.queues.output, self.result_handler,
                                               self.config.parallelism, name="results")

    def stop_backend(self) -> None:
        self.backend.stop()
        if self._output is not None:
            self._output.stop(wait=True, timeout=10)
            self._output = None

    def close(self, timeout: float | None = 5.0) -> None:
        self.stop_backend()
        self.backend.close()
        self.broker.close(timeout)
        self.store.close()
        for a in self.adapters.values():
            a.close()
        close = getattr(self.result_handler, "close", None)
        if close is not None:
            close()


# -- offline mode and benchmark --------------------------------------------


@dataclass
class OfflineReport:
    documents: int
    requests: int
    annotations: int
    wall_seconds: float
    unavailable: int = 0

    @property
    def docs_per_second(self) -> float:
        return self.documents / self.wall_seconds if self.wall_seconds > 0 and self.documents else 0.0

    def __str__(self) -> str:
        return (f"{self.documents} documents in {self.requests} requests, {self.annotations} annotations, "
                f"{self.unavailable} unavailable, {self.wall_seconds:.2f}s wall, "
                f"{self.docs_per_second:.1f} docs/s")


def local_document_ids(input_dir: str | Path) -> list[str]:
    return sorted(p.stem for p in Path(input_dir).glob("*.txt"))


def finalize_output(path: Path) -> list[AggregatedResult]:
    """Rewrite the result file in communication-id order so reruns are byte-identical."""
    results = sorted(read_results(path), key=lambda r: r.communication_id)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        for r in results:
            fh.write(dumps(r.to_dict()) + b"\n")
    os.replace(tmp, path)
    return results


def run_offline(input_dir: str | Path, output_file: str | Path, parallelism: int = 1,
                types: list[EntityType] | None = None, *, annotators: list[AnnotatorConfig] | None = None,
                executor: str = "thread", request_size: int = 100, timeout: float | None = None) -> OfflineReport:
    """Annotate every ``*.txt`` document of ``input_dir`` through the full pipeline.

    Documents are grouped into requests of ``request_size``; each request
    becomes one line of ``output_file``.
    """
    output = Path(output_file)
    output.parent.mkdir(parents=True, exist_ok=True)
    output.write_bytes(b"")
    ids = local_document_ids(input_dir)
    kw = {"annotators": annotators} if annotators is not None else {}
    config = Config(
        parallelism=parallelism,
        executor=executor,
        adapters=[AdapterConfig(source=Source.LOCAL, directory=str(input_dir))],
        result_handler="file",
        output_file=str(output),
        **kw,
    )
    bound = {a.type for a in config.annotators if a.active}
    wanted = frozenset(types) if types else frozenset(bound) or frozenset(EntityType)

    start = time.perf_counter()
    runtime = Runtime(config, durable=False)
    try:
        runtime.start_backend()
        expiry = time.time() + 30 * 24 * 3600
        comm_ids = set()
        for n, i in enumerate(range(0, len(ids), request_size)):
            request = AnnotationRequest(
                communication_id=n,
                documents=tuple(DocumentRef(d, Source.LOCAL) for d in ids[i:i + request_size]),
                types=wanted,
                expiry=expiry,
            )
            runtime.frontend.enqueue(request, reply_to=None)
            comm_ids.add(n)
        if not runtime.result_handler.wait_for(comm_ids, timeout):
            raise TimeoutError(f"offline run did not finish within {timeout}s")
    finally:
        runtime.close()
    results = finalize_output(output)
    wall = time.perf_counter() - start
    return OfflineReport(
        documents=len(ids),
        requests=len(results),
        annotations=sum(len(r.annotations) for r in results),
        wall_seconds=wall,
        unavailable=sum(len(r.missing_docs) for r in results),
    )


WORDS = ("protein", "kinase", "tumour", "cells", "binding", "receptor", "expression", "patients",
         "mutation", "pathway", "signal", "response", "treatment", "gene", "levels", "analysis")


def synthetic_corpus(directory: str | Path, n_docs: int, seed: int = 0) -> list[str]:
    """Write ``n_docs`` LOCAL-format documents of random words."""
    rng = random.Random(seed)
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ids = []
    for i in range(n_docs):
        doc_id = f"doc{i:06d}"
        title = " ".join(rng.choice(WORDS) for _ in range(8)).capitalize()
        abstract = " ".join(rng.choice(WORDS) for _ in range(120))
        (directory / f"{doc_id}.txt").write_text(f"{title}\n{abstract}.\n", encoding="utf-8")
        ids.append(doc_id)
    return ids


@dataclass
class BenchRow:
    parallelism: int
    wall_seconds: float
    docs_per_second: float
    speedup: float


def bench(n_docs: int, parallelisms: list[int], cost_ms: float = 10.0,
          executor: str = "process") -> list[BenchRow]:
    """Run the offline pipeline over a synthetic corpus for each parallelism.

    The annotator burns ``cost_ms`` of CPU per section, so rows reflect pipeline
    scaling rather than tagger behaviour. Speedups are relative to the first
    parallelism in the list.
    """
    annotators = [AnnotatorConfig(name="synthetic", type=EntityType.GENE, kind="synthetic", cost_ms=cost_ms)]
    rows: list[BenchRow] = []
    with tempfile.TemporaryDirectory(prefix="annoserv-bench-") as tmp:
        corpus = Path(tmp) / "corpus"
        synthetic_corpus(corpus, n_docs)
        corpus.mkdir(exist_ok=True)
        base = None
        for p in parallelisms:
            report = run_offline(corpus, Path(tmp) / f"out-{p}.jsonl", p, [EntityType.GENE],
                                 annotators=annotators, executor=executor)
            wall = report.wall_seconds if n_docs else 0.0
            if base is None:
                base = wall
            speedup = base / wall if wall > 0 else 0.0
            rows.append(BenchRow(p, wall, report.docs_per_second, speedup))
            logger.info("bench parallelism %d: %s", p, report)
    return rows


def format_bench(rows: list[BenchRow]) -> str:
    lines = [f"{'parallelism':>11}  {'wall_s':>9}  {'docs/s':>9}  {'speedup':>7}"]
    for r in rows:
        lines.append(f"{r.parallelism:>11}  {r.wall_seconds:>9.2f}  {r.docs_per_second:>9.1f}  {r.speedup:>7.2f}")
    return "\n".join(lines)
