"""Command line: run the server, offline annotation, the benchmark, and a small client."""

from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
import threading
from pathlib import Path

import httpx

from annoserv.config import AnnotatorConfig, ConfigError, load_config
from annoserv.protocol import EntityType

logger = logging.getLogger("annoserv")


def _types(value: str) -> list[EntityType]:
    try:
        return [EntityType(t.strip().upper()) for t in value.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"{exc}; choose from {[t.value for t in EntityType]}") from None


def _parallelism_list(value: str) -> list[int]:
    try:
        out = [int(v) for v in value.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"{value!r} is not a comma-separated list of integers") from None
    if any(p < 1 for p in out):
        raise argparse.ArgumentTypeError("parallelism must be >= 1")
    return out


def cmd_serve(args) -> int:
    import uvicorn

    from annoserv.runtime import Runtime
    from annoserv.service import bind_socket, create_app

    try:
        config = load_config(args.config)
    except ConfigError as exc:
        print(f"annoserv: {exc}", file=sys.stderr)
        return 2
    try:
        sock = bind_socket(config.host, config.port)
    except OSError as exc:
        print(f"annoserv: cannot listen on {config.listen}: {exc}", file=sys.stderr)
        return 3
    try:
        runtime = Runtime(config)
    except Exception as exc:
        sock.close()
        print(f"annoserv: startup failed: {exc}", file=sys.stderr)
        return 2
    if not args.no_backend:
        runtime.start_backend()
    server = uvicorn.Server(uvicorn.Config(create_app(runtime), log_level=args.log_level.lower(), lifespan="off"))
    logger.info("listening on %s (data in %s, %d messages replayed)",
                config.listen, config.data_dir, runtime.restored)
    # uvicorn handles SIGINT/SIGTERM itself, then re-raises them once it has
    # stopped; a quiet handler lets the cleanup below run afterwards
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda signum, frame: logger.info("shutting down (signal %d)", signum))
    try:
        server.run(sockets=[sock])
    finally:
        runtime.close()
        sock.close()
    return 0


def cmd_offline(args) -> int:
    from annoserv.runtime import run_offline

    if not Path(args.input).is_dir():
        print(f"annoserv: {args.input} is not a directory", file=sys.stderr)
        return 2
    annotators = None
    if args.config:
        annotators = load_config(args.config).annotators
    report = run_offline(args.input, args.output, args.parallelism, args.types,
                         annotators=annotators, executor=args.executor, request_size=args.request_size)
    print(report)
    return 0


def cmd_bench(args) -> int:
    from annoserv.runtime import bench, format_bench

    rows = bench(args.docs, args.parallelism, args.cost_ms, executor=args.executor)
    print(format_bench(rows))
    return 0


def _client_headers(args) -> dict:
    return {"X-API-Key": args.apikey} if args.apikey else {}


def cmd_submit(args) -> int:
    body = sys.stdin.buffer.read() if args.request == "-" else Path(args.request).read_bytes()
    resp = httpx.post(f"{args.url.rstrip('/')}/annotate", content=body,
                      headers={"Content-Type": "application/json", **_client_headers(args)}, timeout=30)
    print(json.dumps(resp.json(), indent=2))
    return 0 if resp.is_success else 1


def cmd_status(args) -> int:
    resp = httpx.get(f"{args.url.rstrip('/')}/status", timeout=30)
    print(json.dumps(resp.json(), indent=2))
    return 0 if resp.is_success else 1


def cmd_external(args) -> int:
    """Serve one embedded annotator over the socket bridge, as an external tagger would."""
    from annoserv.annotators import ExternalAnnotatorServer, build_annotator

    cfg = AnnotatorConfig(name=args.kind, type=args.type, kind=args.kind, dictionary=args.dictionary)
    server = ExternalAnnotatorServer(build_annotator(cfg), args.host, args.port).start()
    print(f"{args.kind} annotator on {args.host}:{server.port}", flush=True)
    stop = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    try:
        stop.wait()
    except KeyboardInterrupt:
        pass
    server.stop()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="annoserv", description="Asynchronous biomedical annotation server")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="run the annotation server")
    p.add_argument("--config", help="JSON configuration file (defaults apply when omitted)")
    p.add_argument("--no-backend", action="store_true", help="accept and buffer requests without processing")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("offline", help="annotate a directory of local documents into a file")
    p.add_argument("--input", required=True, help="directory of <id>.txt documents")
    p.add_argument("--output", required=True, help="line-delimited JSON results")
    p.add_argument("--parallelism", type=int, default=1)
    p.add_argument("--types", type=_types, default=None, help="comma-separated entity types (default: all bound)")
    p.add_argument("--config", help="take annotator bindings from this configuration file")
    p.add_argument("--executor", choices=["thread", "process"], default="thread")
    p.add_argument("--request-size", type=int, default=100, help="documents per request (one output line each)")
    p.set_defaults(func=cmd_offline)

    p = sub.add_parser("bench", help="throughput over a synthetic corpus for a parallelism sweep")
    p.add_argument("--docs", type=int, default=5000)
    p.add_argument("--parallelism", type=_parallelism_list, default=[1, 2, 3, 4, 5],
                   help="one value or a comma-separated sweep; speedups are relative to the first")
    p.add_argument("--cost-ms", type=float, default=10.0, help="CPU milliseconds per document")
    p.add_argument("--executor", choices=["thread", "process"], default="process")
    p.set_defaults(func=cmd_bench)

    for name, func, text in (("submit", cmd_submit, "POST a request file to a running server"),
                             ("status", cmd_status, "print a running server's statistics")):
        p = sub.add_parser(name, help=text)
        if name == "submit":
            p.add_argument("request", help="request JSON file, or - for stdin")
            p.add_argument("--apikey")
        p.add_argument("--url", default="http://127.0.0.1:8080")
        p.set_defaults(func=func)

    p = sub.add_parser("external", help="expose a built-in annotator over the socket bridge")
    p.add_argument("--kind", choices=["mutation", "mirna", "dictionary"], required=True)
    p.add_argument("--type", type=lambda v: EntityType(v.upper()), required=True)
    p.add_argument("--dictionary")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=0)
    p.set_defaults(func=cmd_external)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
