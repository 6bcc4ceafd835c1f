"""Corpus adapters: resolve document ids to section texts.

Remote adapters retry recoverable failures (timeouts, connection errors, 5xx,
429) on a capped exponential schedule; a document that still cannot be
fetched is returned as unavailable, which downstream treats as empty text.
"""

from __future__ import annotations

import logging
import time
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, TypeVar

import httpx

from annoserv.messages import FetchedDocument
from annoserv.protocol import DocumentRef, Source

logger = logging.getLogger(__name__)

T = TypeVar("T")

EUTILS_EFETCH = "https://eutils.ncbi.nlm.nih.gov/entrez/eutils/efetch.fcgi"


@dataclass(frozen=True)
class BackoffPolicy:
    initial_wait: float = 1.0
    multiplier: float = 2.0
    max_wait: float = 60.0
    max_attempts: int = 7

    def __post_init__(self):
        if self.initial_wait < 0 or self.multiplier < 1 or self.max_wait < 0 or self.max_attempts < 1:
            raise ValueError(f"invalid backoff policy {self}")

    def delay(self, attempt: int) -> float:
        """Wait after failed attempt ``attempt`` (1-based)."""
        if attempt < 1:
            raise ValueError("attempt numbers start at 1")
        return min(self.max_wait, self.initial_wait * self.multiplier ** (attempt - 1))


class RecoverableError(Exception):
    """Transient upstream failure worth retrying."""


class PermanentError(Exception):
    """Upstream failure that retrying cannot fix (e.g. 404)."""


class RetriesExhausted(Exception):
    def __init__(self, attempts: int, last: BaseException):
        super().__init__(f"gave up after {attempts} attempts: {last}")
        self.attempts = attempts
        self.last = last


def retry_call(fn: Callable[[], T], policy: BackoffPolicy, *,
               sleep: Callable[[float], None] = time.sleep, what: str = "call") -> T:
    """Run ``fn`` until it succeeds, sleeping ``policy.delay(n)`` after failure n.

    Only :class:`RecoverableError` is retried. Every failed attempt, the last
    one included, is followed by its scheduled wait, so exhausting a 7-attempt
    policy takes 1+2+4+8+16+32+60 seconds.
    """
    for attempt in range(1, policy.max_attempts + 1):
        try:
            return fn()
        except RecoverableError as exc:
            wait = policy.delay(attempt)
            logger.warning("%s failed (attempt %d/%d): %s; waiting %.1fs",
                           what, attempt, policy.max_attempts, exc, wait)
            sleep(wait)
            last = exc
    raise RetriesExhausted(policy.max_attempts, last)


def check_response(resp: httpx.Response) -> httpx.Response:
    code = resp.status_code
    if code >= 500 or code == 429:
        raise RecoverableError(f"HTTP {code} from {resp.request.url}")
    if code >= 400:
        raise PermanentError(f"HTTP {code} from {resp.request.url}")
    return resp


def http_call(fn: Callable[[], httpx.Response]) -> httpx.Response:
    """Run an httpx call, mapping transport problems onto the retry taxonomy."""
    try:
        return check_response(fn())
    except (httpx.TimeoutException, httpx.TransportError) as exc:
        raise RecoverableError(f"{type(exc).__name__}: {exc}") from exc


class CorpusAdapter:
    """Base adapter. Subclasses implement :meth:`fetch_batch` for one upstream call."""

    source: Source
    batch_size: int = 50
    bulk: bool = True

    def __init__(self, policy: BackoffPolicy | None = None, batch_size: int | None = None,
                 sleep: Callable[[float], None] = time.sleep):
        self.policy = policy or BackoffPolicy()
        if batch_size is not None:
            self.batch_size = batch_size
        self.sleep = sleep

    def fetch_batch(self, ids: list[str]) -> dict[str, dict[str, str]]:
        """Sections for the ids the upstream knows; unknown ids are simply absent."""
        raise NotImplementedError

    def load_one(self, document_id: str) -> FetchedDocument:
        return self.load([document_id])[0]

    def load(self, ids: list[str]) -> list[FetchedDocument]:
        if len(ids) > self.batch_size:
            raise ValueError(f"{len(ids)} ids exceed batch size {self.batch_size}")
        if not ids:
            return []
        groups = [ids] if self.bulk else [[i] for i in ids]
        found: dict[str, dict[str, str]] = {}
        for group in groups:
            try:
                found.update(retry_call(lambda: self.fetch_batch(group), self.policy,
                                        sleep=self.sleep, what=f"{self.source.value} fetch"))
            except (RetriesExhausted, PermanentError) as exc:
                logger.error("%s: documents %s unavailable: %s", self.source.value, group, exc)
        docs = []
        for doc_id in ids:
            ref = DocumentRef(doc_id, self.source)
            if doc_id in found:
                docs.append(FetchedDocument(ref, found[doc_id]))
            else:
                logger.warning("%s: document %s unavailable", self.source.value, doc_id)
                docs.append(FetchedDocument.missing(ref))
        return docs

    def close(self) -> None:
        pass


class LocalAdapter(CorpusAdapter):
    """``<dir>/<document_id>.txt``: first line title, the rest abstract."""

    source = Source.LOCAL
    bulk = False

    def __init__(self, directory: str | Path, **kw):
        super().__init__(**kw)
        self.directory = Path(directory)

    def fetch_batch(self, ids):
        out = {}
        for doc_id in ids:
            path = self.directory / f"{doc_id}.txt"
            if path.parent != self.directory:
                continue  # ids with path separators never resolve
            try:
                text = path.read_text(encoding="utf-8")
            except (OSError, UnicodeDecodeError) as exc:
                logger.warning("cannot read %s: %s", path, exc)
                continue
            title, _, abstract = text.partition("\n")
            out[doc_id] = {"T": title.rstrip("\r"), "A": abstract.rstrip("\n")}
        return out


def _text(elem: ET.Element | None) -> str:
    return " ".join("".join(elem.itertext()).split()) if elem is not None else ""


def parse_pubmed_xml(xml: bytes | str) -> dict[str, dict[str, str]]:
    root = ET.fromstring(xml)
    out = {}
    for art in root.iter("PubmedArticle"):
        pmid = art.findtext("MedlineCitation/PMID")
        if not pmid:
            continue
        title = _text(art.find("MedlineCitation/Article/ArticleTitle"))
        parts = [_text(a) for a in art.findall("MedlineCitation/Article/Abstract/AbstractText")]
        out[pmid.strip()] = {"T": title, "A": " ".join(p for p in parts if p)}
    return out


def parse_pmc_xml(xml: bytes | str) -> dict[str, dict[str, str]]:
    root = ET.fromstring(xml)
    out = {}
    for art in root.iter("article"):
        pmcid = None
        for aid in art.iter("article-id"):
            if aid.get("pub-id-type") in ("pmc", "pmcid"):
                pmcid = (aid.text or "").strip()
                break
        if not pmcid:
            continue
        meta = art.find("front/article-meta")
        title = _text(meta.find("title-group/article-title")) if meta is not None else ""
        abstract = _text(meta.find("abstract")) if meta is not None else ""
        sections = {"T": title, "A": abstract}
        body = art.find("body")
        if body is not None:
            sections["F"] = _text(body)
        out[pmcid.removeprefix("PMC")] = sections
    return out


class _HttpAdapter(CorpusAdapter):
    def __init__(self, base_url: str, timeout: float = 30.0, client: httpx.Client | None = None, **kw):
        super().__init__(**kw)
        self.base_url = base_url
        self.client = client or httpx.Client(timeout=timeout)

    def close(self):
        self.client.close()


class PubMedAdapter(_HttpAdapter):
    source = Source.PUBMED
    db = "pubmed"

    def __init__(self, base_url: str = EUTILS_EFETCH, **kw):
        super().__init__(base_url, **kw)

    def _query_ids(self, ids):
        return ids

    def fetch_batch(self, ids):
        resp = http_call(lambda: self.client.get(
            self.base_url, params={"db": self.db, "id": ",".join(self._query_ids(ids)), "retmode": "xml"}
        ))
        try:
            return self._parse(resp.content, ids)
        except ET.ParseError as exc:
            raise RecoverableError(f"unparseable {self.db} response: {exc}") from exc

    def _parse(self, content, ids):
        return parse_pubmed_xml(content)


class PMCAdapter(PubMedAdapter):
    source = Source.PMC
    db = "pmc"

    def _query_ids(self, ids):
        return [i.removeprefix("PMC") for i in ids]

    def _parse(self, content, ids):
        found = parse_pmc_xml(content)
        # answer under the id spelling the request used
        return {i: found[i.removeprefix("PMC")] for i in ids if i.removeprefix("PMC") in found}


class JsonServerAdapter(_HttpAdapter):
    """Document servers speaking plain JSON.

    ``POST base_url {"ids": [...]}`` answers a list of objects with an id
    (``document_id`` or ``externalId``), ``title`` and ``abstract`` (or ``text``).
    """

    def __init__(self, source: Source, base_url: str, **kw):
        super().__init__(base_url, **kw)
        self.source = source

    def fetch_batch(self, ids):
        resp = http_call(lambda: self.client.post(self.base_url, json={"ids": ids}))
        try:
            items = resp.json()
        except ValueError as exc:
            raise RecoverableError(f"invalid JSON from {self.base_url}") from exc
        out = {}
        for item in items if isinstance(items, list) else []:
            doc_id = item.get("document_id") or item.get("externalId")
            if doc_id is None:
                continue
            out[str(doc_id)] = {
                "T": item.get("title") or "",
                "A": item.get("abstract") or item.get("text") or "",
            }
        return out


def batched(items: list[T], size: int) -> Iterable[list[T]]:
    for i in range(0, len(items), size):
        yield items[i:i + size]
