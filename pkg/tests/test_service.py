import json
import time

import httpx
import pytest
from hypothesis import given
from hypothesis import strategies as st

from annoserv.broker import StorageFull
from annoserv.config import AdapterConfig, Config
from annoserv.frontend import compute_priority
from annoserv.messages import AggregatedResult, Message, MessageHeader
from annoserv.protocol import Annotation, EntityType, Source
from annoserv.results import CallbackPoster
from annoserv.runtime import Runtime
from annoserv.service import ServerThread, create_app
from annoserv.stats import ServerStats

from helpers import CallbackReceiver, write_corpus

LISTING_REQUEST = {
    "documents": [{"document_id": "BC1403854C", "source": "PUBMED"}],
    "types": ["DISEASE", "MUTATION", "MIRNA"],
    "communication_id": 1581,
}


# -- priority -----------------------------------------------------------------


def test_priority_examples():
    now = 1000.0
    assert compute_priority(now + 600, 100, 1.0, 60, now) == 1
    assert compute_priority(now + 30, 100, 1.0, 60, now) == 9
    assert compute_priority(now + 36000, 1, 1.0, 60, now) == 0
    assert compute_priority(now + 600, 100, 2.0, 60, now) == 3


@given(st.floats(0, 1e6), st.floats(0, 1e6), st.integers(0, 1000), st.floats(0, 100))
def test_priority_monotone_in_expiry(a, b, n_docs, avg):
    early, late = sorted((a, b))
    p_early = compute_priority(early, n_docs, avg, 60, 0.0)
    p_late = compute_priority(late, n_docs, avg, 60, 0.0)
    assert 0 <= p_late <= p_early <= 9


# -- HTTP surface ---------------------------------------------------------------


@pytest.fixture
def runtime(tmp_path):
    config = Config(data_dir=str(tmp_path / "data"), apikeys=["secret"],
                    default_callback_url="http://127.0.0.1:9/none",
                    adapters=[AdapterConfig(source=Source.LOCAL, directory=str(write_corpus(tmp_path / "c")))])
    rt = Runtime(config)
    yield rt
    rt.close(timeout=1)


@pytest.fixture
def client(runtime):
    server = ServerThread(create_app(runtime)).start()
    with httpx.Client(base_url=server.url, timeout=10) as c:
        yield c
    server.stop()


def post(client, body, key="secret"):
    headers = {"X-API-Key": key} if key else {}
    return client.post("/annotate", content=json.dumps(body), headers=headers)


def test_fresh_status_is_zero(client):
    status = client.get("/status").json()
    for name in ("requests_accepted", "requests_rejected", "documents_processed", "annotations_emitted",
                 "expired_messages"):
        assert status[name] == 0
    assert status["backend_running"] is False


def test_accept_buffers_without_processing(client, runtime):
    resp = post(client, LISTING_REQUEST)
    assert resp.status_code == 200
    assert resp.json() == {"communication_id": 1581, "status": "accepted"}
    assert runtime.broker.depth("input") == 1
    status = client.get("/status").json()
    assert status["requests_accepted"] == 1
    assert status["queue_depths"]["input"] == 1
    assert status["documents_processed"] == 0


def test_apikey_in_body_or_header(client):
    assert post(client, {**LISTING_REQUEST, "apikey": "secret"}, key=None).status_code == 200
    assert post(client, LISTING_REQUEST, key="wrong").status_code == 401
    assert post(client, LISTING_REQUEST, key=None).status_code == 401
    assert client.get("/status").json()["requests_rejected"] == 2


def test_invalid_requests_are_400_and_not_enqueued(client, runtime):
    bad = {**LISTING_REQUEST, "documents": [{"document_id": "x", "source": "ARXIV"}]}
    resp = post(client, bad)
    assert resp.status_code == 400 and resp.json()["error"] == "UNKNOWN_SOURCE"
    resp = client.post("/annotate", content=b"{", headers={"X-API-Key": "secret"})
    assert resp.status_code == 400 and resp.json()["error"] == "MALFORMED_JSON"
    assert runtime.broker.depth("input") == 0


def test_storage_full_is_503(client, runtime, monkeypatch):
    def full(*a, **k):
        raise StorageFull("no room")

    monkeypatch.setattr(runtime.broker, "publish", full)
    resp = post(client, LISTING_REQUEST)
    assert resp.status_code == 503
    assert client.get("/status").json()["requests_rejected"] == 1


def test_priority_recorded_on_message(client, runtime):
    post(client, {**LISTING_REQUEST, "expiry": time.time() + 20})
    post(client, {**LISTING_REQUEST, "communication_id": 2, "expiry": time.time() + 86400})
    prios = sorted(e.message.header.priority for q in [runtime.broker._queues["input"]]
                   for e in q.entries.values())
    assert prios == [0, 9]


def test_reload_endpoint(client, runtime):
    body = {"annotators": [{"name": "mutation", "type": "MUTATION", "kind": "mutation", "active": False}]}
    assert client.post("/admin/reload", json=body).status_code == 401
    resp = client.post("/admin/reload", json=body, headers={"X-API-Key": "secret"})
    assert resp.status_code == 200
    assert resp.json() == [{"name": "mutation", "type": "MUTATION", "queue": "annotator.MUTATION.mutation",
                            "mode": "EMBEDDED", "active": False}]


def test_request_completes_via_callback(tmp_path, runtime, client):
    receiver = CallbackReceiver()
    try:
        runtime.start_backend()
        body = {"communication_id": 3, "types": ["DISEASE", "MUTATION"], "callback_url": receiver.url,
                "documents": [{"document_id": d, "source": "LOCAL"} for d in ("d1", "d2", "d3")]}
        assert post(client, body).status_code == 200
        assert receiver.wait_for_comms({3}, timeout=20)
        assert (lambda: client.get("/status").json()["documents_processed"])() == 3
    finally:
        receiver.close()
    [cb] = receiver.bodies()
    assert list(cb) == ["communication_id", "annotations"]
    assert {"document_id": "d1", "section": "T", "init": 14, "end": 30, "score": 1.0, "type": "DISEASE",
            "annotated_text": "diabetes mellitus"} in cb["annotations"]


# -- callback poster --------------------------------------------------------------


def result_delivery(runtime, url):
    from annoserv.broker import Delivery

    header = MessageHeader(1, 0, time.time() + 60, reply_to=url)
    result = AggregatedResult(1, (Annotation("d", "A", 410, 419, 1.0, EntityType.DISEASE, "periosteum"),))
    return Delivery(Message(header, result), "output", 1)


def test_callback_retries_then_succeeds(runtime):
    receiver = CallbackReceiver(fail_first=1)
    waits = []
    poster = CallbackPoster(runtime.broker, runtime.stats, sleep=waits.append)
    try:
        poster(result_delivery(runtime, receiver.url))
    finally:
        receiver.close()
    assert len(receiver.attempts) == 2 and waits == [1]
    assert receiver.bodies()[0]["annotations"][0]["annotated_text"] == "periosteum"
    assert runtime.stats["results_delivered"] == 1


def test_callback_exhausted_goes_to_dead_letter(runtime):
    receiver = CallbackReceiver(status=500)
    waits = []
    poster = CallbackPoster(runtime.broker, runtime.stats, sleep=waits.append)
    try:
        poster(result_delivery(runtime, receiver.url))
    finally:
        receiver.close()
    assert len(receiver.attempts) == 7
    assert waits == [1, 2, 4, 8, 16, 32, 60]
    assert runtime.broker.depth("dlq") == 1
    assert runtime.stats["deliveries_failed"] == 1


def test_stats_counters_never_decrease():
    stats = ServerStats()
    with pytest.raises(ValueError):
        stats.incr("requests_accepted", -1)
    for s in range(1500):
        stats.record_doc_seconds(float(s))
    assert stats.snapshot()["doc_seconds_samples"] == 1000
    assert stats.avg_doc_seconds() == pytest.approx(sum(range(500, 1500)) / 1000)
