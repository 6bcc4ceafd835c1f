"""HTTP surface: POST /annotate, GET /status, POST /admin/reload."""

from __future__ import annotations

import logging
import socket
import threading
import time
from typing import Any

import uvicorn

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from annoserv.config import AnnotatorConfig
from annoserv.runtime import Runtime

logger = logging.getLogger(__name__)


class Accepted(BaseModel):
    communication_id: int
    status: str


class ErrorBody(BaseModel):
    error: str
    detail: str


class RecentSource(BaseModel):
    source: str
    timestamp: float


class StatusBody(BaseModel):
    requests_accepted: int
    requests_rejected: int
    documents_processed: int
    annotations_emitted: int
    results_delivered: int
    deliveries_failed: int
    partial_results: int
    expired_messages: int
    recent_sources: list[RecentSource]
    queue_depths: dict[str, int]
    avg_doc_seconds: float | None
    doc_seconds_samples: int
    uptime_seconds: float
    backend_running: bool


class ReloadBody(BaseModel):
    annotators: list[AnnotatorConfig]


class BindingInfo(BaseModel):
    name: str
    type: str
    queue: str
    mode: str
    active: bool


_ERRORS: dict[int | str, dict[str, Any]] = {
    400: {"model": ErrorBody}, 401: {"model": ErrorBody}, 503: {"model": ErrorBody},
}


def create_app(runtime: Runtime) -> FastAPI:
    app = FastAPI(title="annoserv", version="0.1.0")
    app.state.runtime = runtime

    @app.post("/annotate", response_model=Accepted, responses=_ERRORS)
    async def annotate(request: Request):
        # validated by hand so error codes follow the request protocol, not FastAPI's 422
        raw = await request.body()
        reply = runtime.frontend.handle(raw, request.headers.get("x-api-key"))
        return JSONResponse(reply.body, status_code=reply.status)

    @app.get("/status", response_model=StatusBody)
    def status():
        return {**runtime.frontend.status(), "backend_running": runtime.backend.running}

    @app.post("/admin/reload", response_model=list[BindingInfo], responses={401: {"model": ErrorBody}})
    def reload(body: ReloadBody, request: Request):
        if not runtime.frontend.authorized(request.headers.get("x-api-key")):
            return JSONResponse({"error": "UNAUTHORIZED", "detail": "missing or unknown apikey"}, 401)
        runtime.backend.reload_annotators(body.annotators)
        return [
            BindingInfo(name=b.name, type=b.entity_type.value, queue=b.queue, mode=b.mode.value, active=b.active)
            for b in runtime.backend.bindings.snapshot()
        ]

    return app


def bind_socket(host: str, port: int) -> socket.socket:
    """Bind the listening socket up front so a busy port fails before anything starts."""
    # an explicit IPPROTO_TCP lets asyncio enable TCP_NODELAY on accepted
    # connections; without it every response waits out the peer's delayed ACK
    family = socket.AF_INET6 if ":" in host else socket.AF_INET
    sock = socket.socket(family, socket.SOCK_STREAM, socket.IPPROTO_TCP)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    try:
        sock.bind((host, port))
    except OSError:
        sock.close()
        raise
    sock.listen(128)
    return sock


class ServerThread:
    """Runs the app under uvicorn on a background thread (tests, embedding)."""

    def __init__(self, app: FastAPI, host: str = "127.0.0.1", port: int = 0):
        self.sock = bind_socket(host, port)
        self.host, self.port = self.sock.getsockname()[:2]
        self.server = uvicorn.Server(uvicorn.Config(app, log_level="warning", lifespan="off"))
        self.thread = threading.Thread(target=self.server.run, kwargs={"sockets": [self.sock]}, daemon=True)

    @property
    def url(self) -> str:
        return f"http://{self.host}:{self.port}"

    def start(self, timeout: float = 10.0) -> "ServerThread":
        self.thread.start()
        deadline = time.monotonic() + timeout
        while not self.server.started:
            if time.monotonic() > deadline or not self.thread.is_alive():
                raise RuntimeError("HTTP server did not start")
            time.sleep(0.01)
        return self

    def stop(self) -> None:
        self.server.should_exit = True
        self.thread.join(10)
        self.sock.close()
