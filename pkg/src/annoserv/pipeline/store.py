"""Correlation state for gather and aggregate, persisted in SQLite.

Rows survive restarts so a replayed message finds the state its first
delivery left behind. Completed rows are kept (``done = 1``) until purged,
which is how late duplicates are recognised and dropped.
"""

from __future__ import annotations

import json
import sqlite3
import threading
from dataclasses import dataclass
from pathlib import Path

SCHEMA = """
CREATE TABLE IF NOT EXISTS requests (
    request_id TEXT PRIMARY KEY,
    communication_id INTEGER NOT NULL,
    document_ids TEXT NOT NULL,
    header TEXT NOT NULL,
    deadline REAL NOT NULL,
    expiry REAL NOT NULL,
    done INTEGER NOT NULL DEFAULT 0
);
CREATE TABLE IF NOT EXISTS doc_results (
    request_id TEXT NOT NULL,
    document_id TEXT NOT NULL,
    body TEXT NOT NULL,
    PRIMARY KEY (request_id, document_id)
);
CREATE TABLE IF NOT EXISTS gathers (
    request_id TEXT NOT NULL,
    document_id TEXT NOT NULL,
    expected TEXT NOT NULL,
    header TEXT NOT NULL,
    deadline REAL NOT NULL,
    expiry REAL NOT NULL,
    done INTEGER NOT NULL DEFAULT 0,
    PRIMARY KEY (request_id, document_id)
);
CREATE TABLE IF NOT EXISTS parts (
    request_id TEXT NOT NULL,
    document_id TEXT NOT NULL,
    part_key TEXT NOT NULL,
    body TEXT NOT NULL,
    PRIMARY KEY (request_id, document_id, part_key)
);
CREATE INDEX IF NOT EXISTS requests_open ON requests (done, deadline);
CREATE INDEX IF NOT EXISTS gathers_open ON gathers (done, deadline);
"""


@dataclass
class GatherState:
    request_id: str
    document_id: str
    expected: list[str]
    header: dict
    parts: dict[str, dict]
    done: bool

    @property
    def complete(self) -> bool:
        return set(self.expected) <= set(self.parts)


@dataclass
class RequestState:
    request_id: str
    communication_id: int
    document_ids: list[str]
    header: dict
    results: dict[str, dict]
    done: bool

    @property
    def complete(self) -> bool:
        return set(self.document_ids) <= set(self.results)


class CorrelationStore:
    def __init__(self, path: str | Path = ":memory:"):
        self.path = str(path)
        self._lock = threading.Lock()
        self._db = sqlite3.connect(self.path, check_same_thread=False, isolation_level=None)
        if self.path != ":memory:":
            self._db.execute("PRAGMA journal_mode=WAL")
            self._db.execute("PRAGMA synchronous=NORMAL")
        self._db.executescript(SCHEMA)

    def close(self) -> None:
        with self._lock:
            self._db.close()

    def _tx(self):
        return _Tx(self._db, self._lock)

    # -- requests -------------------------------------------------------

    def open_request(self, request_id: str, communication_id: int, document_ids: list[str],
                     header: dict, deadline: float) -> bool:
        """Create aggregation state; returns False if it already existed."""
        with self._tx() as db:
            cur = db.execute(
                "INSERT OR IGNORE INTO requests VALUES (?, ?, ?, ?, ?, ?, 0)",
                (request_id, communication_id, json.dumps(document_ids), json.dumps(header),
                 deadline, header["expiry"]),
            )
            return cur.rowcount == 1

    def _request(self, db, request_id: str) -> RequestState | None:
        row = db.execute(
            "SELECT communication_id, document_ids, header, done FROM requests WHERE request_id = ?",
            (request_id,),
        ).fetchone()
        if row is None:
            return None
        results = {
            doc: json.loads(body)
            for doc, body in db.execute(
                "SELECT document_id, body FROM doc_results WHERE request_id = ?", (request_id,)
            )
        }
        return RequestState(request_id, row[0], json.loads(row[1]), json.loads(row[2]), results, bool(row[3]))

    def request(self, request_id: str) -> RequestState | None:
        with self._tx() as db:
            return self._request(db, request_id)

    def add_doc_result(self, request_id: str, document_id: str, body: dict) -> RequestState | None:
        """Record one document's result (first one wins). None if the request is unknown."""
        with self._tx() as db:
            state = self._request(db, request_id)
            if state is None or state.done:
                return state
            if document_id not in state.results:
                db.execute("INSERT OR IGNORE INTO doc_results VALUES (?, ?, ?)",
                           (request_id, document_id, json.dumps(body)))
                state.results[document_id] = body
            return state

    def finish_request(self, request_id: str) -> None:
        with self._tx() as db:
            db.execute("UPDATE requests SET done = 1 WHERE request_id = ?", (request_id,))
            db.execute("DELETE FROM doc_results WHERE request_id = ?", (request_id,))

    def due_requests(self, now: float) -> list[RequestState]:
        with self._tx() as db:
            ids = [r[0] for r in db.execute(
                "SELECT request_id FROM requests WHERE done = 0 AND deadline <= ?", (now,))]
            return [self._request(db, i) for i in ids]

    # -- gathers --------------------------------------------------------

    def open_gather(self, request_id: str, document_id: str, expected: list[str],
                    header: dict, deadline: float) -> GatherState:
        """Create gather state if absent and return the current state."""
        with self._tx() as db:
            db.execute(
                "INSERT OR IGNORE INTO gathers VALUES (?, ?, ?, ?, ?, ?, 0)",
                (request_id, document_id, json.dumps(expected), json.dumps(header), deadline, header["expiry"]),
            )
            return self._gather(db, request_id, document_id)

    def _gather(self, db, request_id: str, document_id: str) -> GatherState | None:
        row = db.execute(
            "SELECT expected, header, done FROM gathers WHERE request_id = ? AND document_id = ?",
            (request_id, document_id),
        ).fetchone()
        if row is None:
            return None
        parts = {
            key: json.loads(body)
            for key, body in db.execute(
                "SELECT part_key, body FROM parts WHERE request_id = ? AND document_id = ?",
                (request_id, document_id),
            )
        }
        return GatherState(request_id, document_id, json.loads(row[0]), json.loads(row[1]), parts, bool(row[2]))

    def add_part(self, request_id: str, document_id: str, part_key: str, body: dict) -> GatherState | None:
        with self._tx() as db:
            state = self._gather(db, request_id, document_id)
            if state is None or state.done:
                return state
            if part_key not in state.parts:
                db.execute("INSERT OR IGNORE INTO parts VALUES (?, ?, ?, ?)",
                           (request_id, document_id, part_key, json.dumps(body)))
                state.parts[part_key] = body
            return state

    def finish_gather(self, request_id: str, document_id: str) -> None:
        with self._tx() as db:
            db.execute("UPDATE gathers SET done = 1 WHERE request_id = ? AND document_id = ?",
                       (request_id, document_id))
            db.execute("DELETE FROM parts WHERE request_id = ? AND document_id = ?",
                       (request_id, document_id))

    def due_gathers(self, now: float) -> list[GatherState]:
        with self._tx() as db:
            keys = db.execute(
                "SELECT request_id, document_id FROM gathers WHERE done = 0 AND deadline <= ?", (now,)
            ).fetchall()
            return [self._gather(db, r, d) for r, d in keys]

    # -- housekeeping ---------------------------------------------------

    def purge(self, before: float) -> int:
        """Forget every correlation row whose request expired before ``before``."""
        with self._tx() as db:
            n = 0
            for table, children in (("requests", ("doc_results",)), ("gathers", ("parts",))):
                for child in children:
                    db.execute(
                        f"DELETE FROM {child} WHERE request_id IN "
                        f"(SELECT request_id FROM {table} WHERE expiry < ?)", (before,))
                n += db.execute(f"DELETE FROM {table} WHERE expiry < ?", (before,)).rowcount
            return n

    def counts(self) -> dict[str, int]:
        with self._tx() as db:
            return {
                "open_requests": db.execute("SELECT COUNT(*) FROM requests WHERE done = 0").fetchone()[0],
                "open_gathers": db.execute("SELECT COUNT(*) FROM gathers WHERE done = 0").fetchone()[0],
            }


class _Tx:
    def __init__(self, db: sqlite3.Connection, lock: threading.Lock):
        self.db = db
        self.lock = lock

    def __enter__(self):
        self.lock.acquire()
        self.db.execute("BEGIN IMMEDIATE")
        return self.db

    def __exit__(self, exc_type, exc, tb):
        try:
            self.db.execute("ROLLBACK" if exc_type else "COMMIT")
        finally:
            self.lock.release()
        return False
