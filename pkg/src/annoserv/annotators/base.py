from __future__ import annotations

import logging
import threading
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Protocol

from annoserv.messages import FetchedDocument
from annoserv.protocol import Annotation, EntityType

logger = logging.getLogger(__name__)


class Mode(str, Enum):
    EMBEDDED = "EMBEDDED"
    EXTERNAL = "EXTERNAL"


@dataclass(frozen=True)
class AnnotatorBinding:
    """Maps an entity type to the input queue of one annotator."""

    name: str
    entity_type: EntityType
    queue: str
    mode: Mode = Mode.EMBEDDED
    active: bool = True

    @staticmethod
    def queue_for(entity_type: EntityType, name: str | None = None) -> str:
        return f"annotator.{entity_type.value}" + (f".{name}" if name else "")


class Annotator(Protocol):
    entity_type: EntityType

    def annotate(self, doc: FetchedDocument) -> set[Annotation]: ...


class SpanAnnotator:
    """Annotator built from a span finder applied to each section independently."""

    entity_type: EntityType
    score = 1.0

    def find_spans(self, text: str) -> Iterable[tuple[int, int]]:
        """Yield ``(start, stop)`` half-open character ranges."""
        raise NotImplementedError

    def annotate(self, doc: FetchedDocument) -> set[Annotation]:
        found = set()
        for section, text in doc.sections.items():
            if not text:
                continue
            for start, stop in self.find_spans(text):
                found.add(Annotation(doc.document_id, section, start, stop - 1,
                                     self.score, self.entity_type, text[start:stop]))
        return found


def is_word_char(c: str) -> bool:
    return c.isalnum()


def at_boundary(text: str, start: int, stop: int) -> bool:
    """True if ``text[start:stop]`` neither starts nor ends inside a letter/digit run."""
    if start > 0 and is_word_char(text[start - 1]) and is_word_char(text[start]):
        return False
    if stop < len(text) and is_word_char(text[stop - 1]) and is_word_char(text[stop]):
        return False
    return True


def valid_span(a: Annotation, doc: FetchedDocument) -> bool:
    text = doc.sections.get(a.section)
    return (
        a.document_id == doc.document_id
        and text is not None
        and a.end < len(text)
        and text[a.init:a.end + 1] == a.annotated_text
    )


class SafeAnnotator:
    """Isolates the pipeline from a misbehaving annotator.

    Any exception becomes an empty result (logged); spans that do not match
    the document text are dropped. ``serial=True`` serializes calls for
    annotators that are not reentrant.
    """

    def __init__(self, inner: Annotator, name: str, serial: bool = False):
        self.inner = inner
        self.name = name
        self.entity_type = inner.entity_type
        self.failures = 0
        self._lock = threading.Lock() if serial else None

    def _call(self, doc):
        if self._lock is None:
            return self.inner.annotate(doc)
        with self._lock:
            return self.inner.annotate(doc)

    def annotate(self, doc: FetchedDocument) -> set[Annotation]:
        try:
            result = set(self._call(doc))
        except Exception:
            self.failures += 1
            logger.exception("annotator %s failed on document %s; returning no annotations",
                             self.name, doc.document_id)
            return set()
        good = {a for a in result if valid_span(a, doc)}
        if len(good) != len(result):
            logger.error("annotator %s produced %d span(s) not matching the text of %s; dropped",
                         self.name, len(result) - len(good), doc.document_id)
        return good
