"""Shared test helpers."""

import time

from annoserv.messages import DocumentTask, Message, MessageHeader
from annoserv.protocol import DocumentRef, EntityType, Source


def make_message(priority=5, ttl=3600.0, comm=1, doc="d1", expiry=None, **header):
    expiry = time.time() + ttl if expiry is None else expiry
    hdr = MessageHeader(
        communication_id=comm,
        priority=priority,
        expiry=expiry,
        requested_types=(EntityType.MUTATION,),
        expected_docs=1,
        **header,
    )
    task = DocumentTask(comm, DocumentRef(doc, Source.LOCAL), (EntityType.MUTATION,), 1)
    return Message(hdr, task)


def wait_for(predicate, timeout=10.0, interval=0.01):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return True
        time.sleep(interval)
    return predicate()


class CallbackReceiver:
    """A local HTTP endpoint recording every POSTed JSON body with its arrival time.

    ``fail_first`` makes the first N requests answer 500.
    """

    def __init__(self, fail_first=0, status=200):
        import http.server
        import json
        import threading

        self.posts = []  # (monotonic time, body)
        self.attempts = []
        self.fail_first = fail_first
        self.status = status
        self._cond = threading.Condition()
        receiver = self

        class Handler(http.server.BaseHTTPRequestHandler):
            def do_POST(self):
                body = self.rfile.read(int(self.headers.get("Content-Length", 0)))
                with receiver._cond:
                    receiver.attempts.append(time.monotonic())
                    failing = len(receiver.attempts) <= receiver.fail_first or receiver.status >= 300
                    if not failing:
                        receiver.posts.append((time.monotonic(), json.loads(body)))
                    receiver._cond.notify_all()
                self.send_response(500 if failing and receiver.status < 300 else receiver.status)
                self.send_header("Content-Length", "0")
                self.end_headers()

            def log_message(self, *args):
                pass

        self.server = http.server.ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.server.daemon_threads = True
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self.thread.start()

    @property
    def url(self):
        host, port = self.server.server_address[:2]
        return f"http://{host}:{port}/callback"

    def bodies(self):
        with self._cond:
            return [b for _, b in self.posts]

    def by_comm(self):
        return {b["communication_id"]: b for b in self.bodies()}

    def wait_for_comms(self, comm_ids, timeout=30.0):
        deadline = time.monotonic() + timeout
        with self._cond:
            while not set(comm_ids) <= {b["communication_id"] for _, b in self.posts}:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return False
                self._cond.wait(remaining)
            return True

    def close(self):
        self.server.shutdown()
        self.server.server_close()


SAMPLE_DOCS = {
    "d1": "Patients with diabetes mellitus respond\n"
          "The BRCA1 c.123A>G mutation and hsa-miR-21-5p were studied in Homo sapiens given aspirin.",
    "d2": "Breast cancer in mice\nTP53 p.Arg175His and let-7a are linked to lung cancer and asthma.",
    "d3": "Nothing of note\nplain words only here.",
}


def write_corpus(directory, docs=None):
    directory.mkdir(parents=True, exist_ok=True)
    for doc_id, text in (docs or SAMPLE_DOCS).items():
        (directory / f"{doc_id}.txt").write_text(text + "\n", encoding="utf-8")
    return directory


def multiset(annotations):
    """Order-insensitive view of a list of annotation dicts."""
    import collections
    import json

    return collections.Counter(json.dumps(a, sort_keys=True) for a in annotations)


ACCEPTANCE_LINES = []


def verdict(number, title, ok, detail):
    """Record and print one acceptance line, then fail the test if ``ok`` is false."""
    line = f"criterion {number:>2} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line
