"""Request intake: validate, authorize, prioritize, hand over to the input queue."""

from __future__ import annotations

import hmac
import logging
import math
import time
from dataclasses import dataclass

from annoserv.broker import Broker, StorageFull
from annoserv.messages import MAX_PRIORITY, AnnotationRequestPayload, Message, MessageHeader
from annoserv.protocol import AnnotationRequest, ValidationError, parse_request
from annoserv.stats import ServerStats

logger = logging.getLogger(__name__)


def compute_priority(expiry: float, n_docs: int, avg_doc_seconds: float = 1.0,
                     bucket_width: float = 60.0, now: float | None = None) -> int:
    """Map deadline slack to 0..9; less slack means higher priority."""
    now = time.time() if now is None else now
    slack = (expiry - now) - n_docs * avg_doc_seconds
    return MAX_PRIORITY - min(MAX_PRIORITY, math.floor(max(0.0, slack) / bucket_width))


@dataclass
class Reply:
    status: int
    body: dict


class AnnotationFrontend:
    def __init__(self, broker: Broker, stats: ServerStats, *, input_queue: str = "input",
                 apikeys: list[str] | None = None, bucket_width: float = 60.0,
                 default_ttl: float = 3600.0, expiry_tolerance: float = 5.0,
                 default_callback_url: str | None = None):
        self.broker = broker
        self.stats = stats
        self.input_queue = input_queue
        self.apikeys = [k.encode() for k in apikeys or []]
        self.bucket_width = bucket_width
        self.default_ttl = default_ttl
        self.expiry_tolerance = expiry_tolerance
        self.default_callback_url = default_callback_url

    def authorized(self, key: str | None) -> bool:
        if not self.apikeys:
            return True
        if key is None:
            return False
        given = key.encode()
        # compare against every key so timing does not reveal which one matched
        ok = False
        for k in self.apikeys:
            ok |= hmac.compare_digest(given, k)
        return ok

    def _reject(self, status: int, code: str, detail: str) -> Reply:
        self.stats.incr("requests_rejected")
        return Reply(status, {"error": code, "detail": detail})

    def handle(self, raw: bytes, header_apikey: str | None = None) -> Reply:
        now = time.time()
        try:
            request = parse_request(raw, now=now, default_ttl=self.default_ttl,
                                    expiry_tolerance=self.expiry_tolerance)
        except ValidationError as exc:
            return self._reject(400, exc.code, exc.detail)
        if not self.authorized(request.apikey or header_apikey):
            return self._reject(401, "UNAUTHORIZED", "missing or unknown apikey")
        reply_to = request.callback_url or self.default_callback_url
        if reply_to is None:
            return self._reject(400, "MISSING_FIELD", "callback_url is required (no default configured)")

        try:
            priority = self.enqueue(request, reply_to, now)
        except StorageFull as exc:
            logger.warning("rejecting communication %s: %s", request.communication_id, exc)
            return self._reject(503, "STORAGE_FULL", "server is out of buffer space; retry later")
        self.stats.incr("requests_accepted")
        logger.debug("accepted communication %s (%d docs, priority %d)",
                     request.communication_id, len(request.documents), priority)
        return Reply(200, {"communication_id": request.communication_id, "status": "accepted"})

    def enqueue(self, request: AnnotationRequest, reply_to: str | None, now: float | None = None) -> int:
        """Publish a validated request on the input queue; returns its priority."""
        now = time.time() if now is None else now
        priority = compute_priority(request.expiry, len(request.documents),
                                    self.stats.avg_doc_seconds(), self.bucket_width, now)
        header = MessageHeader(
            communication_id=request.communication_id,
            priority=priority,
            expiry=request.expiry,
            requested_types=tuple(sorted(request.types, key=lambda t: t.value)),
            reply_to=reply_to,
            created=now,
        )
        header = header.derive(request_id=header.message_id, message_id=header.message_id)
        self.broker.publish(self.input_queue, Message(header, AnnotationRequestPayload(request)))
        return priority

    def status(self) -> dict:
        return self.stats.snapshot()
