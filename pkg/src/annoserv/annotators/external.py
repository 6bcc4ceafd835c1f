"""Bridge to annotators hosted in another process.

Frames are a 4-byte big-endian length followed by UTF-8 JSON. The request is
``{"document_id", "sections": {"T": ..., "A": ...}, "type"}``; the reply is
``{"annotations": [{"section", "init", "end", "score", "type", "annotated_text"}]}``.
One connection may carry any number of request/reply pairs.
"""

from __future__ import annotations

import json
import logging
import socket
import socketserver
import struct
import threading

from annoserv.annotators.base import Annotator
from annoserv.messages import FetchedDocument
from annoserv.protocol import Annotation, DocumentRef, EntityType, Source

logger = logging.getLogger(__name__)

_LEN = struct.Struct(">I")
MAX_FRAME = 64 * 1024 * 1024


class BridgeError(Exception):
    pass


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise BridgeError("connection closed mid-frame" if buf else "connection closed")
        buf += chunk
    return bytes(buf)


def send_frame(sock: socket.socket, obj) -> None:
    body = json.dumps(obj, ensure_ascii=False).encode("utf-8")
    sock.sendall(_LEN.pack(len(body)) + body)


def recv_frame(sock: socket.socket):
    (length,) = _LEN.unpack(_recv_exact(sock, _LEN.size))
    if length > MAX_FRAME:
        raise BridgeError(f"frame of {length} bytes exceeds limit")
    return json.loads(_recv_exact(sock, length))


class ExternalAnnotator:
    """Client side: forwards each document to ``host:port`` and parses the reply."""

    def __init__(self, host: str, port: int, entity_type: EntityType, timeout: float = 30.0):
        self.host = host
        self.port = port
        self.entity_type = entity_type
        self.timeout = timeout

    def annotate(self, doc: FetchedDocument) -> set[Annotation]:
        request = {
            "document_id": doc.document_id,
            "sections": dict(doc.sections),
            "type": self.entity_type.value,
        }
        with socket.create_connection((self.host, self.port), timeout=self.timeout) as sock:
            sock.settimeout(self.timeout)
            send_frame(sock, request)
            reply = recv_frame(sock)
        if "error" in reply:
            raise BridgeError(f"external annotator error: {reply['error']}")
        return {
            Annotation.from_dict({"document_id": doc.document_id, "score": 1.0, "type": self.entity_type.value, **a})
            for a in reply.get("annotations", [])
        }


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        annotator: Annotator = self.server.annotator
        while True:
            try:
                req = recv_frame(self.request)
            except (BridgeError, OSError, ValueError):
                return
            self.server.requests += 1
            try:
                doc = FetchedDocument(DocumentRef(req["document_id"], Source.LOCAL), req.get("sections", {}))
                found = annotator.annotate(doc)
                reply = {"annotations": [
                    {k: v for k, v in a.to_dict().items() if k != "document_id"} for a in found
                ]}
            except Exception as exc:
                logger.exception("external annotator failed")
                reply = {"error": str(exc)}
            try:
                send_frame(self.request, reply)
            except OSError:
                return


class ExternalAnnotatorServer(socketserver.ThreadingTCPServer):
    """Hosts any annotator behind the bridge protocol, e.g. in a separate process."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, annotator: Annotator, host: str = "127.0.0.1", port: int = 0):
        super().__init__((host, port), _Handler)
        self.annotator = annotator
        self.requests = 0
        self._thread: threading.Thread | None = None

    @property
    def port(self) -> int:
        return self.server_address[1]

    def start(self) -> "ExternalAnnotatorServer":
        self._thread = threading.Thread(target=self.serve_forever, daemon=True, name="external-annotator")
        self._thread.start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()
