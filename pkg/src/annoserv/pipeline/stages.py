"""Pure building blocks of the back-end flow: split, route, gather, aggregate."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable

from annoserv.annotators.base import AnnotatorBinding
from annoserv.messages import AggregatedResult, AnnotatorPart, DocumentResult, DocumentTask
from annoserv.protocol import Annotation, AnnotationRequest, EntityType, dedup, ordered

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Route:
    queue: str
    entity_type: EntityType
    binding: str


def split(request: AnnotationRequest) -> list[DocumentTask]:
    n = len(request.documents)
    types = tuple(sorted(request.types, key=lambda t: t.value))
    return [DocumentTask(request.communication_id, ref, types, n) for ref in request.documents]


def route_types(requested: Iterable[EntityType], bindings: Iterable[AnnotatorBinding]) -> list[Route]:
    """One route per active binding of each requested type, ordered by (type, binding name)."""
    requested = set(requested)
    routes = [
        Route(b.queue, b.entity_type, b.name)
        for b in bindings
        if b.active and b.entity_type in requested
    ]
    unbound = requested - {r.entity_type for r in routes}
    if unbound:
        logger.info("no active annotator for %s; they contribute no annotations",
                    sorted(t.value for t in unbound))
    return sorted(routes, key=lambda r: (r.entity_type.value, r.binding))


def merge(annotation_sets: Iterable[Iterable[Annotation]]) -> set[Annotation]:
    """Union of all sets. Overlapping spans are all kept; only exact duplicates collapse."""
    return dedup(a for s in annotation_sets for a in s)


def gather(communication_id: int, document_id: str, parts: Iterable[AnnotatorPart],
           expected: Iterable[str]) -> DocumentResult:
    """Combine annotator parts for one document; the first part per key counts."""
    by_key: dict[str, AnnotatorPart] = {}
    for p in parts:
        by_key.setdefault(p.part_key, p)
    missing = frozenset(set(expected) - set(by_key))
    return DocumentResult(
        communication_id,
        document_id,
        frozenset(merge(p.annotations for p in by_key.values())),
        missing,
    )


def aggregate(communication_id: int, results: Iterable[DocumentResult],
              document_ids: Iterable[str]) -> AggregatedResult:
    """Combine per-document results of one request; the first result per document counts.

    ``missing_docs`` lists documents that were unavailable or never arrived.
    """
    by_doc: dict[str, DocumentResult] = {}
    for r in results:
        by_doc.setdefault(r.document_id, r)
    missing = {d for d in document_ids if d not in by_doc or by_doc[d].unavailable}
    annotations = ordered(a for r in by_doc.values() for a in r.annotations)
    return AggregatedResult(communication_id, tuple(annotations), frozenset(missing))
