"""Wire payloads: annotation requests in, annotation lists out.

Requests look like::

    {"documents": [{"document_id": "BC1403854C", "source": "PUBMED"}],
     "types": ["DISEASE", "MUTATION", "MIRNA"],
     "communication_id": 1581}

with optional ``expiry`` (epoch seconds or ISO-8601), ``callback_url`` and
``apikey`` fields. Annotation records carry end-inclusive character offsets.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from enum import Enum
from typing import Any, Iterable
from urllib.parse import urlparse


class EntityType(str, Enum):
    CHEMICAL = "CHEMICAL"
    DISEASE = "DISEASE"
    GENE = "GENE"
    MIRNA = "MIRNA"
    MUTATION = "MUTATION"
    ORGANISM = "ORGANISM"


class Source(str, Enum):
    PUBMED = "PUBMED"
    PMC = "PMC"
    PATENT_SERVER = "PATENT_SERVER"
    ABSTRACT_SERVER = "ABSTRACT_SERVER"
    LOCAL = "LOCAL"


# T title, A abstract, F full text (extension for PMC bodies)
SECTIONS = ("T", "A", "F")

DEFAULT_TTL = 3600.0
EXPIRY_TOLERANCE = 5.0


class ValidationError(ValueError):
    """A request that cannot be accepted; ``code`` is stable, ``detail`` is for humans."""

    def __init__(self, code: str, detail: str):
        super().__init__(f"{code}: {detail}")
        self.code = code
        self.detail = detail

    def to_dict(self) -> dict[str, str]:
        return {"code": self.code, "detail": self.detail}


@dataclass(frozen=True)
class DocumentRef:
    document_id: str
    source: Source

    def to_dict(self) -> dict[str, str]:
        return {"document_id": self.document_id, "source": self.source.value}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "DocumentRef":
        return cls(data["document_id"], Source(data["source"]))


@dataclass(frozen=True)
class AnnotationRequest:
    communication_id: int
    documents: tuple[DocumentRef, ...]
    types: frozenset[EntityType]
    expiry: float
    callback_url: str | None = None
    apikey: str | None = None

    def to_dict(self) -> dict[str, Any]:
        data: dict[str, Any] = {
            "communication_id": self.communication_id,
            "documents": [d.to_dict() for d in self.documents],
            "types": sorted(t.value for t in self.types),
            "expiry": self.expiry,
        }
        if self.callback_url is not None:
            data["callback_url"] = self.callback_url
        if self.apikey is not None:
            data["apikey"] = self.apikey
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "AnnotationRequest":
        # trusted input (our own serialization); use parse_request for client data
        return cls(
            communication_id=data["communication_id"],
            documents=tuple(DocumentRef.from_dict(d) for d in data["documents"]),
            types=frozenset(EntityType(t) for t in data["types"]),
            expiry=data["expiry"],
            callback_url=data.get("callback_url"),
            apikey=data.get("apikey"),
        )


@dataclass(frozen=True)
class Annotation:
    document_id: str
    section: str
    init: int
    end: int
    score: float
    type: EntityType
    annotated_text: str

    def __post_init__(self):
        if self.section not in SECTIONS:
            raise ValueError(f"unknown section code {self.section!r}")
        if not 0 <= self.init <= self.end:
            raise ValueError(f"bad span [{self.init}, {self.end}]")
        if self.end - self.init + 1 != len(self.annotated_text):
            raise ValueError(
                f"span [{self.init}, {self.end}] does not fit {self.annotated_text!r}"
            )
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")

    @property
    def key(self) -> tuple:
        """Identity used when collapsing duplicates; score is not part of it."""
        return (self.document_id, self.section, self.init, self.end, self.type.value, self.annotated_text)

    def to_dict(self) -> dict[str, Any]:
        return {
            "document_id": self.document_id,
            "section": self.section,
            "init": self.init,
            "end": self.end,
            "score": float(self.score),
            "type": self.type.value,
            "annotated_text": self.annotated_text,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Annotation":
        return cls(
            document_id=data["document_id"],
            section=data["section"],
            init=int(data["init"]),
            end=int(data["end"]),
            score=float(data["score"]),
            type=EntityType(data["type"]),
            annotated_text=data["annotated_text"],
        )


def sort_key(a: Annotation) -> tuple:
    return (a.document_id, a.section, a.init, a.end, a.type.value, a.annotated_text, a.score)


def ordered(annotations: Iterable[Annotation]) -> list[Annotation]:
    return sorted(annotations, key=sort_key)


def dedup(annotations: Iterable[Annotation]) -> set[Annotation]:
    """Collapse exact duplicates, keeping the highest score for each span."""
    best: dict[tuple, Annotation] = {}
    for a in annotations:
        cur = best.get(a.key)
        if cur is None or a.score > cur.score:
            best[a.key] = a
    return set(best.values())


def dumps(obj: Any) -> bytes:
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":")).encode("utf-8")


def serialize_annotations(annotations: Iterable[Annotation]) -> bytes:
    return dumps([a.to_dict() for a in ordered(annotations)])


def parse_annotations(raw: bytes | str) -> list[Annotation]:
    return [Annotation.from_dict(d) for d in json.loads(raw)]


def serialize_request(request: AnnotationRequest) -> bytes:
    return dumps(request.to_dict())


def _parse_expiry(value: Any) -> float:
    if isinstance(value, bool):
        raise ValidationError("INVALID_FIELD", "expiry must be a timestamp")
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        try:
            dt = datetime.fromisoformat(value.replace("Z", "+00:00"))
        except ValueError:
            raise ValidationError("INVALID_FIELD", f"expiry {value!r} is not ISO-8601") from None
        if dt.tzinfo is None:
            dt = dt.replace(tzinfo=timezone.utc)
        return dt.timestamp()
    raise ValidationError("INVALID_FIELD", "expiry must be epoch seconds or an ISO-8601 string")


def parse_request(
    raw: bytes | str,
    *,
    now: float | None = None,
    default_ttl: float = DEFAULT_TTL,
    expiry_tolerance: float = EXPIRY_TOLERANCE,
) -> AnnotationRequest:
    """Validate a client request body.

    Unknown fields are ignored. A missing ``expiry`` defaults to ``now +
    default_ttl``. Expiries up to ``expiry_tolerance`` seconds in the past are
    accepted (clock skew); the message TTL then drops them downstream.
    """
    now = time.time() if now is None else now
    try:
        data = json.loads(raw)
    except (ValueError, UnicodeDecodeError) as exc:
        raise ValidationError("MALFORMED_JSON", str(exc)) from None
    if not isinstance(data, dict):
        raise ValidationError("MALFORMED_REQUEST", "request body must be a JSON object")

    for name in ("communication_id", "documents", "types"):
        if name not in data:
            raise ValidationError("MISSING_FIELD", f"required field {name!r} is missing")

    comm_id = data["communication_id"]
    if isinstance(comm_id, bool) or not isinstance(comm_id, int):
        raise ValidationError("INVALID_FIELD", "communication_id must be an integer")

    docs = data["documents"]
    if not isinstance(docs, list):
        raise ValidationError("INVALID_FIELD", "documents must be a list")
    if not docs:
        raise ValidationError("EMPTY_DOCUMENTS", "documents must not be empty")
    refs = []
    seen: set[str] = set()
    for i, d in enumerate(docs):
        if not isinstance(d, dict):
            raise ValidationError("INVALID_FIELD", f"documents[{i}] must be an object")
        doc_id = d.get("document_id")
        if not isinstance(doc_id, str) or not doc_id:
            raise ValidationError("INVALID_FIELD", f"documents[{i}].document_id must be a non-empty string")
        src = d.get("source")
        try:
            source = Source(src)
        except ValueError:
            raise ValidationError(
                "UNKNOWN_SOURCE",
                f"documents[{i}].source {src!r} is not one of {[s.value for s in Source]}",
            ) from None
        if doc_id in seen:
            raise ValidationError("DUPLICATE_DOCUMENT", f"document {doc_id!r} listed more than once")
        seen.add(doc_id)
        refs.append(DocumentRef(doc_id, source))

    types = data["types"]
    if not isinstance(types, list):
        raise ValidationError("INVALID_FIELD", "types must be a list")
    if not types:
        raise ValidationError("EMPTY_TYPES", "types must not be empty")
    parsed_types = set()
    for t in types:
        try:
            parsed_types.add(EntityType(t))
        except ValueError:
            raise ValidationError(
                "UNKNOWN_TYPE", f"type {t!r} is not one of {[e.value for e in EntityType]}"
            ) from None

    if data.get("expiry") is None:
        expiry = now + default_ttl
    else:
        expiry = _parse_expiry(data["expiry"])
        if expiry < now - expiry_tolerance:
            raise ValidationError("EXPIRED", f"expiry lies {now - expiry:.1f}s in the past")

    callback = data.get("callback_url")
    if callback is not None:
        parts = urlparse(callback) if isinstance(callback, str) else None
        if parts is None or parts.scheme not in ("http", "https") or not parts.netloc:
            raise ValidationError("INVALID_FIELD", f"callback_url {callback!r} is not an http(s) URL")

    apikey = data.get("apikey")
    if apikey is not None and not isinstance(apikey, str):
        raise ValidationError("INVALID_FIELD", "apikey must be a string")

    return AnnotationRequest(
        communication_id=comm_id,
        documents=tuple(refs),
        types=frozenset(parsed_types),
        expiry=expiry,
        callback_url=callback,
        apikey=apikey,
    )
