"""Broker envelopes: a routing header plus one typed payload."""

from __future__ import annotations

import json
import time
import uuid
from dataclasses import dataclass, field, replace
from typing import Any, ClassVar

from annoserv.protocol import (
    Annotation,
    AnnotationRequest,
    DocumentRef,
    EntityType,
    ordered,
)

MAX_PRIORITY = 9


def new_id() -> str:
    return uuid.uuid4().hex


@dataclass(frozen=True)
class MessageHeader:
    communication_id: int
    priority: int
    expiry: float
    requested_types: tuple[EntityType, ...] = ()
    message_id: str = field(default_factory=new_id)
    part_key: str | None = None
    expected_parts: int | None = None
    expected_docs: int | None = None
    # correlation id shared by every message derived from one accepted request
    request_id: str | None = None
    reply_to: str | None = None
    created: float = field(default_factory=time.time)

    def __post_init__(self):
        if not 0 <= self.priority <= MAX_PRIORITY:
            raise ValueError(f"priority {self.priority} outside 0..{MAX_PRIORITY}")
        for name in ("expected_parts", "expected_docs"):
            value = getattr(self, name)
            if value is not None and value < 1:
                raise ValueError(f"{name} must be >= 1, got {value}")
        if not self.message_id:
            raise ValueError("message_id must not be empty")

    def derive(self, **changes) -> "MessageHeader":
        """Header for a downstream message: fresh id, same correlation and deadline."""
        changes.setdefault("message_id", new_id())
        return replace(self, **changes)

    def expired(self, now: float | None = None) -> bool:
        return self.expiry <= (time.time() if now is None else now)

    def to_dict(self) -> dict[str, Any]:
        return {
            "message_id": self.message_id,
            "communication_id": self.communication_id,
            "priority": self.priority,
            "expiry": self.expiry,
            "requested_types": [t.value for t in self.requested_types],
            "part_key": self.part_key,
            "expected_parts": self.expected_parts,
            "expected_docs": self.expected_docs,
            "request_id": self.request_id,
            "reply_to": self.reply_to,
            "created": self.created,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "MessageHeader":
        return cls(
            message_id=data["message_id"],
            communication_id=data["communication_id"],
            priority=data["priority"],
            expiry=data["expiry"],
            requested_types=tuple(EntityType(t) for t in data["requested_types"]),
            part_key=data.get("part_key"),
            expected_parts=data.get("expected_parts"),
            expected_docs=data.get("expected_docs"),
            request_id=data.get("request_id"),
            reply_to=data.get("reply_to"),
            created=data["created"],
        )


def _annotations_to_list(annotations) -> list[dict]:
    return [a.to_dict() for a in ordered(annotations)]


def _annotations_from_list(items) -> frozenset[Annotation]:
    return frozenset(Annotation.from_dict(d) for d in items)


@dataclass(frozen=True)
class AnnotationRequestPayload:
    kind: ClassVar[str] = "request"
    request: AnnotationRequest

    def to_dict(self):
        return self.request.to_dict()

    @classmethod
    def from_dict(cls, data):
        return cls(AnnotationRequest.from_dict(data))


@dataclass(frozen=True)
class DocumentTask:
    kind: ClassVar[str] = "task"
    communication_id: int
    document_ref: DocumentRef
    requested_types: tuple[EntityType, ...]
    expected_docs: int

    def to_dict(self):
        return {
            "communication_id": self.communication_id,
            "document_ref": self.document_ref.to_dict(),
            "requested_types": [t.value for t in self.requested_types],
            "expected_docs": self.expected_docs,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            data["communication_id"],
            DocumentRef.from_dict(data["document_ref"]),
            tuple(EntityType(t) for t in data["requested_types"]),
            data["expected_docs"],
        )


@dataclass(frozen=True)
class FetchedDocument:
    """Section texts of one document, keyed by section code (T, A, F)."""

    kind: ClassVar[str] = "document"
    document_ref: DocumentRef
    sections: dict[str, str] = field(default_factory=dict)
    unavailable: bool = False

    def __post_init__(self):
        if self.unavailable and any(self.sections.values()):
            raise ValueError("an unavailable document carries no text")

    @property
    def document_id(self) -> str:
        return self.document_ref.document_id

    @classmethod
    def missing(cls, ref: DocumentRef) -> "FetchedDocument":
        return cls(ref, {}, unavailable=True)

    def to_dict(self):
        return {
            "document_ref": self.document_ref.to_dict(),
            "sections": dict(self.sections),
            "unavailable": self.unavailable,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(DocumentRef.from_dict(data["document_ref"]), dict(data["sections"]), data["unavailable"])


@dataclass(frozen=True)
class AnnotatorPart:
    kind: ClassVar[str] = "part"
    communication_id: int
    document_id: str
    part_key: str
    annotations: frozenset[Annotation] = frozenset()

    def __post_init__(self):
        for a in self.annotations:
            if a.document_id != self.document_id:
                raise ValueError(f"annotation for {a.document_id!r} in part of {self.document_id!r}")

    def to_dict(self):
        return {
            "communication_id": self.communication_id,
            "document_id": self.document_id,
            "part_key": self.part_key,
            "annotations": _annotations_to_list(self.annotations),
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            data["communication_id"],
            data["document_id"],
            data["part_key"],
            _annotations_from_list(data["annotations"]),
        )


@dataclass(frozen=True)
class DocumentResult:
    kind: ClassVar[str] = "doc_result"
    communication_id: int
    document_id: str
    annotations: frozenset[Annotation] = frozenset()
    missing_parts: frozenset[str] = frozenset()
    unavailable: bool = False

    def to_dict(self):
        return {
            "communication_id": self.communication_id,
            "document_id": self.document_id,
            "annotations": _annotations_to_list(self.annotations),
            "missing_parts": sorted(self.missing_parts),
            "unavailable": self.unavailable,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            data["communication_id"],
            data["document_id"],
            _annotations_from_list(data["annotations"]),
            frozenset(data["missing_parts"]),
            data["unavailable"],
        )


@dataclass(frozen=True)
class AggregatedResult:
    kind: ClassVar[str] = "result"
    communication_id: int
    annotations: tuple[Annotation, ...] = ()
    missing_docs: frozenset[str] = frozenset()

    def to_dict(self):
        return {
            "communication_id": self.communication_id,
            "annotations": [a.to_dict() for a in self.annotations],
            "missing_docs": sorted(self.missing_docs),
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            data["communication_id"],
            tuple(Annotation.from_dict(d) for d in data["annotations"]),
            frozenset(data.get("missing_docs", ())),
        )


PAYLOAD_TYPES = {
    cls.kind: cls
    for cls in (
        AnnotationRequestPayload,
        DocumentTask,
        FetchedDocument,
        AnnotatorPart,
        DocumentResult,
        AggregatedResult,
    )
}

Payload = (
    AnnotationRequestPayload | DocumentTask | FetchedDocument | AnnotatorPart | DocumentResult | AggregatedResult
)


@dataclass(frozen=True)
class Message:
    header: MessageHeader
    payload: Payload

    def __post_init__(self):
        if isinstance(self.payload, AnnotatorPart) and self.header.part_key is None:
            raise ValueError("annotator parts need a part_key in the header")
        if isinstance(self.payload, DocumentTask) and self.header.expected_docs is None:
            raise ValueError("document tasks need expected_docs in the header")

    @property
    def message_id(self) -> str:
        return self.header.message_id

    def to_dict(self) -> dict[str, Any]:
        return {"header": self.header.to_dict(), "kind": self.payload.kind, "payload": self.payload.to_dict()}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Message":
        payload_cls = PAYLOAD_TYPES[data["kind"]]
        return cls(MessageHeader.from_dict(data["header"]), payload_cls.from_dict(data["payload"]))

    def encode(self) -> bytes:
        return json.dumps(self.to_dict(), ensure_ascii=False, separators=(",", ":")).encode("utf-8")

    @classmethod
    def decode(cls, raw: bytes) -> "Message":
        return cls.from_dict(json.loads(raw))
