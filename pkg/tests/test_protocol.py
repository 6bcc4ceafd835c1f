import json
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from annoserv.protocol import (
    Annotation,
    AnnotationRequest,
    DocumentRef,
    EntityType,
    Source,
    ValidationError,
    dedup,
    dumps,
    ordered,
    parse_annotations,
    parse_request,
    serialize_annotations,
    serialize_request,
)

NOW = 1_700_000_000.0

LISTING_REQUEST = b"""{"documents":
   [{"document_id": "BC1403854C", "source":"PUBMED"}],
 "types": ["DISEASE", "MUTATION", "MIRNA"],
 "communication_id": 1581}"""

LISTING_RESPONSE = (
    b'[{"document_id":"BC1403855C","section":"A","init":410,"end":419,"score":1.0,'
    b'"type":"DISEASE","annotated_text":"periosteum"}]'
)


def parse(body, **kw):
    if not isinstance(body, (bytes, str)):
        body = json.dumps(body)
    return parse_request(body, now=NOW, **kw)


def valid(**changes):
    body = {
        "communication_id": 7,
        "documents": [{"document_id": "d1", "source": "PUBMED"}],
        "types": ["DISEASE"],
    }
    body.update(changes)
    return body


def test_parse_request_example():
    req = parse(LISTING_REQUEST)
    assert req.communication_id == 1581
    assert req.documents == (DocumentRef("BC1403854C", Source.PUBMED),)
    assert req.types == {EntityType.DISEASE, EntityType.MUTATION, EntityType.MIRNA}
    assert req.expiry == NOW + 3600
    assert req.callback_url is None


def test_response_record_fields_in_order():
    [a] = parse_annotations(LISTING_RESPONSE)
    assert a == Annotation("BC1403855C", "A", 410, 419, 1.0, EntityType.DISEASE, "periosteum")
    assert list(a.to_dict()) == ["document_id", "section", "init", "end", "score", "type", "annotated_text"]
    assert serialize_annotations([a]) == LISTING_RESPONSE


def test_inclusive_end_enforced():
    with pytest.raises(ValueError):
        Annotation("d", "A", 410, 420, 1.0, EntityType.DISEASE, "periosteum")
    with pytest.raises(ValueError):
        Annotation("d", "X", 0, 0, 1.0, EntityType.DISEASE, "p")
    with pytest.raises(ValueError):
        Annotation("d", "A", 0, 0, 1.5, EntityType.DISEASE, "p")


@pytest.mark.parametrize("body,code", [
    (b"{not json", "MALFORMED_JSON"),
    (b"[1, 2]", "MALFORMED_REQUEST"),
    ({"documents": [], "types": ["DISEASE"]}, "MISSING_FIELD"),
    (valid(communication_id="7"), "INVALID_FIELD"),
    (valid(communication_id=True), "INVALID_FIELD"),
    (valid(documents=[]), "EMPTY_DOCUMENTS"),
    (valid(documents=[{"document_id": "d1", "source": "ARXIV"}]), "UNKNOWN_SOURCE"),
    (valid(documents=[{"document_id": "", "source": "PUBMED"}]), "INVALID_FIELD"),
    (valid(documents=[{"document_id": "d1", "source": "PUBMED"},
                      {"document_id": "d1", "source": "PMC"}]), "DUPLICATE_DOCUMENT"),
    (valid(types=[]), "EMPTY_TYPES"),
    (valid(types=["DISEASE", "PROTEIN"]), "UNKNOWN_TYPE"),
    (valid(expiry=NOW - 60), "EXPIRED"),
    (valid(expiry="yesterday"), "INVALID_FIELD"),
    (valid(callback_url="ftp://x/y"), "INVALID_FIELD"),
    (valid(apikey=5), "INVALID_FIELD"),
])
def test_validation_errors(body, code):
    with pytest.raises(ValidationError) as info:
        parse(body)
    assert info.value.code == code
    assert info.value.to_dict()["code"] == code


def test_expiry_formats_and_tolerance():
    assert parse(valid(expiry=NOW + 10)).expiry == NOW + 10
    iso = parse(valid(expiry="2023-11-14T22:13:20Z")).expiry
    assert iso == NOW
    # slightly past deadlines are accepted; the message TTL drops them later
    assert parse(valid(expiry=NOW - 1)).expiry == NOW - 1


def test_unknown_fields_ignored_and_optional_fields_kept():
    req = parse(valid(extra={"x": 1}, callback_url="http://h/cb", apikey="k"))
    assert req.callback_url == "http://h/cb"
    assert req.apikey == "k"


def test_ordering_is_total_and_dedup_keeps_best_score():
    a = Annotation("d", "A", 0, 2, 0.5, EntityType.GENE, "abc")
    b = Annotation("d", "A", 0, 2, 0.9, EntityType.GENE, "abc")
    c = Annotation("d", "T", 0, 2, 0.9, EntityType.GENE, "abc")
    assert dedup([a, b, c]) == {b, c}
    assert ordered([c, b, a]) == [a, b, c]


def test_non_ascii_written_verbatim():
    a = Annotation("d", "T", 0, 3, 1.0, EntityType.CHEMICAL, "β-Al")
    raw = serialize_annotations([a])
    assert "β-Al".encode() in raw
    assert parse_annotations(raw) == [a]


# -- property round trips --------------------------------------------------

ids = st.text(st.characters(blacklist_categories=("Cs",)), min_size=1, max_size=12)


@st.composite
def requests(draw):
    doc_ids = draw(st.lists(ids, min_size=1, max_size=8, unique=True))
    return AnnotationRequest(
        communication_id=draw(st.integers(-2**53, 2**53)),
        documents=tuple(DocumentRef(d, draw(st.sampled_from(Source))) for d in doc_ids),
        types=frozenset(draw(st.sets(st.sampled_from(EntityType), min_size=1))),
        expiry=NOW + draw(st.floats(0, 1e6, allow_nan=False)),
        callback_url=draw(st.none() | st.just("https://example.org/cb")),
        apikey=draw(st.none() | ids),
    )


@st.composite
def annotations(draw):
    text = draw(st.text(st.characters(blacklist_categories=("Cs",)), min_size=1, max_size=20))
    init = draw(st.integers(0, 10_000))
    return Annotation(
        document_id=draw(ids),
        section=draw(st.sampled_from("TAF")),
        init=init,
        end=init + len(text) - 1,
        score=draw(st.floats(0, 1, allow_nan=False)),
        type=draw(st.sampled_from(EntityType)),
        annotated_text=text,
    )


@settings(max_examples=1000, deadline=None)
@given(requests())
def test_request_round_trip(req):
    raw = serialize_request(req)
    back = parse_request(raw, now=NOW)
    assert back == req
    assert serialize_request(back) == raw


@settings(max_examples=1000, deadline=None)
@given(st.lists(annotations(), max_size=10))
def test_annotation_round_trip(items):
    raw = serialize_annotations(items)
    back = parse_annotations(raw)
    assert back == ordered(items)
    assert serialize_annotations(back) == raw
    assert dumps(json.loads(raw)) == raw
