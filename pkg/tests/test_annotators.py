import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from annoserv.annotators import (
    DictionaryAnnotator,
    DictionaryError,
    ExternalAnnotatorServer,
    MirnaAnnotator,
    MutationAnnotator,
    SafeAnnotator,
    build_annotator,
    dictionary_path,
    load_terms,
)
from annoserv.annotators.dictionary import Automaton
from annoserv.annotators.external import ExternalAnnotator
from annoserv.config import AnnotatorConfig
from annoserv.messages import FetchedDocument
from annoserv.pipeline.stages import merge
from annoserv.protocol import Annotation, DocumentRef, EntityType, Source


def doc(text, section="A", doc_id="d1"):
    return FetchedDocument(DocumentRef(doc_id, Source.LOCAL), {section: text})


def spans(annotator, text):
    return sorted((a.init, a.end) for a in annotator.annotate(doc(text)))


# -- dictionary: brute-force oracle ----------------------------------------


def _word(c):
    return c.isalnum()


def _lower(c):
    low = c.lower()
    return low if len(low) == 1 else c


def oracle_dictionary(text, terms):
    """Scan left to right; at each position take the longest term that matches
    case-insensitively on token boundaries, then jump past it."""
    low = "".join(_lower(c) for c in text)
    folded = sorted({"".join(_lower(c) for c in t) for t in terms}, key=len, reverse=True)
    out, i = [], 0
    while i < len(text):
        hit = None
        for t in folded:
            j = i + len(t)
            if low[i:j] != t:
                continue
            if i > 0 and _word(text[i - 1]) and _word(text[i]):
                continue
            if j < len(text) and _word(text[j - 1]) and _word(text[j]):
                continue
            hit = j
            break
        if hit is None:
            i += 1
        else:
            out.append((i, hit - 1))
            i = hit
    return out


def test_dictionary_example_offsets():
    ann = DictionaryAnnotator(["diabetes mellitus", "diabetes"], EntityType.DISEASE)
    [a] = ann.annotate(doc("Patients with diabetes mellitus respond", section="T"))
    assert (a.section, a.init, a.end, a.annotated_text) == ("T", 14, 30, "diabetes mellitus")


def test_dictionary_longest_and_boundaries():
    ann = DictionaryAnnotator(["cancer", "breast cancer", "can"], EntityType.DISEASE)
    assert spans(ann, "Breast cancer and cancers, CANCER.") == [(0, 12), (27, 32)]
    assert spans(ann, "precancerous") == []


def test_automaton_reports_all_overlaps():
    auto = Automaton(["he", "she", "hers", "his"])
    assert sorted(auto.iter_matches("ushers")) == [(1, 4), (2, 4), (2, 6)]


def test_builtin_dictionaries_load():
    for name in ("disease", "gene", "chemical", "organism"):
        assert len(load_terms(dictionary_path(f"builtin:{name}"))) > 5


def test_load_terms_rejects_bad_files(tmp_path):
    p = tmp_path / "d.txt"
    p.write_bytes(b"\xff\xfe")
    with pytest.raises(DictionaryError):
        load_terms(p)
    p.write_text("# only comments\n\n")
    with pytest.raises(DictionaryError):
        load_terms(p)
    p.write_text("ok\nbad\x01term\n")
    with pytest.raises(DictionaryError):
        load_terms(p)
    with pytest.raises(DictionaryError):
        load_terms(tmp_path / "missing.txt")


ALPHABET = "abcAB -,.é1İ"
TERMS = ["ab", "abc", "b a", "A", "cab", "é1", "aba", "İa"]


@settings(max_examples=2000, deadline=None)
@given(st.text(ALPHABET, max_size=40))
def test_dictionary_matches_oracle(text):
    ann = DictionaryAnnotator(TERMS, EntityType.DISEASE)
    assert spans(ann, text) == oracle_dictionary(text, TERMS)
    for a in ann.annotate(doc(text)):
        assert text[a.init:a.end + 1] == a.annotated_text


# -- regexes: curated sets and a procedural oracle ---------------------------

MUTATION_POSITIVE = ["c.123A>G", "c.7T>C", "p.V600E", "p.Val600Glu", "p.R175H", "p.Arg175His"]
MUTATION_NEGATIVE = ["c.123A>", "c.A>G", "c.123X>G", "p.600E", "p.Xaa12Glu", "p.V600", "xc.123A>G",
                     "c.123A>Gx", "p.B12C", "V600E"]


@pytest.mark.parametrize("token", MUTATION_POSITIVE)
def test_mutation_positive(token):
    text = f"carriers of {token} were"
    assert spans(MutationAnnotator(), text) == [(12, 12 + len(token) - 1)]


@pytest.mark.parametrize("token", MUTATION_NEGATIVE)
def test_mutation_negative(token):
    assert spans(MutationAnnotator(), f"carriers of {token} were") == []


MIRNA_POSITIVE = ["miR-21", "hsa-miR-21-5p", "mir-155", "let-7a", "hsa-let-7a-1", "mmu-miR-196b-3p",
                  "miR-34c", "hsa-mir-125a-2"]
MIRNA_NEGATIVE = ["miR21", "miR-", "mir-abc", "let-", "hsa-miR-21-4p", "HSA-miR-21", "xmiR-21",
                  "miR-21q2", "lets-7"]


def is_mirna(token):
    """Independent hand-written check of the nomenclature."""
    parts = token.split("-")
    if len(parts[0]) == 3 and parts[0].isalpha() and parts[0].islower() and parts[0] not in ("miR", "mir", "let"):
        parts = parts[1:]
    if len(parts) < 2 or parts[0] not in ("miR", "mir", "let"):
        return False
    core = parts[1]
    digits = core.rstrip("abcdefghijklmnopqrstuvwxyz")
    if not digits.isdigit() or len(core) - len(digits) > 1:
        return False
    rest = parts[2:]
    if rest and rest[0].isdigit():
        rest = rest[1:]
    if rest and rest[0] in ("3p", "5p"):
        rest = rest[1:]
    return not rest


@pytest.mark.parametrize("token", MIRNA_POSITIVE)
def test_mirna_positive(token):
    assert is_mirna(token)
    assert spans(MirnaAnnotator(), f"levels of {token} rose") == [(10, 10 + len(token) - 1)]


@pytest.mark.parametrize("token", MIRNA_NEGATIVE)
def test_mirna_negative(token):
    assert not is_mirna(token)
    assert spans(MirnaAnnotator(), f"levels of {token} rose") == []


@settings(max_examples=500, deadline=None)
@given(st.lists(st.sampled_from(["hsa", "mmu", "miR", "mir", "let", "21", "7", "a", "b", "3p", "5p", "x"]),
                min_size=1, max_size=6))
def test_mirna_regex_agrees_with_oracle(pieces):
    token = "-".join(pieces)
    found = spans(MirnaAnnotator(), f"see {token} here")
    assert (found == [(4, 4 + len(token) - 1)]) == is_mirna(token)


# -- isolation and merging ---------------------------------------------------


class Exploding:
    entity_type = EntityType.GENE

    def annotate(self, doc):
        raise RuntimeError("boom")


class Lying:
    entity_type = EntityType.GENE

    def annotate(self, doc):
        return {Annotation(doc.document_id, "A", 0, 2, 1.0, EntityType.GENE, "xyz"),
                Annotation(doc.document_id, "A", 0, 2, 1.0, EntityType.GENE, "abc")}


def test_failing_annotator_returns_nothing():
    safe = SafeAnnotator(Exploding(), "exploding")
    assert safe.annotate(doc("abc")) == set()
    assert safe.failures == 1


def test_spans_not_matching_text_are_dropped():
    safe = SafeAnnotator(Lying(), "lying")
    assert [a.annotated_text for a in safe.annotate(doc("abc def"))] == ["abc"]


def test_overlapping_annotations_from_two_annotators_are_kept():
    text = "history of breast cancer"
    broad = DictionaryAnnotator(["cancer"], EntityType.DISEASE).annotate(doc(text))
    narrow = DictionaryAnnotator(["breast cancer"], EntityType.DISEASE).annotate(doc(text))
    merged = merge([broad, narrow])
    assert sorted((a.init, a.end) for a in merged) == [(11, 23), (18, 23)]


def test_build_annotator_kinds():
    for cfg in (AnnotatorConfig(name="m", type=EntityType.MUTATION, kind="mutation"),
                AnnotatorConfig(name="r", type=EntityType.MIRNA, kind="mirna"),
                AnnotatorConfig(name="g", type=EntityType.GENE, kind="dictionary", dictionary="builtin:gene"),
                AnnotatorConfig(name="s", type=EntityType.GENE, kind="synthetic", cost_ms=0)):
        assert isinstance(build_annotator(cfg), SafeAnnotator)


# -- external bridge ---------------------------------------------------------


@pytest.fixture
def mutation_server():
    server = ExternalAnnotatorServer(MutationAnnotator()).start()
    yield server
    server.stop()


def test_external_matches_embedded(mutation_server):
    text = "The c.123A>G change and p.V600E."
    remote = ExternalAnnotator("127.0.0.1", mutation_server.port, EntityType.MUTATION)
    assert remote.annotate(doc(text)) == MutationAnnotator().annotate(doc(text))
    assert mutation_server.requests == 1


def test_external_down_yields_empty_set(mutation_server):
    port = mutation_server.port
    mutation_server.stop()
    safe = SafeAnnotator(ExternalAnnotator("127.0.0.1", port, EntityType.MUTATION, timeout=1), "ext")
    assert safe.annotate(doc("c.123A>G")) == set()
    assert safe.failures == 1


def test_external_error_reply_is_isolated():
    server = ExternalAnnotatorServer(Exploding()).start()
    try:
        safe = SafeAnnotator(ExternalAnnotator("127.0.0.1", server.port, EntityType.GENE), "ext")
        assert safe.annotate(doc("abc")) == set()
        assert safe.failures == 1
    finally:
        server.stop()


def test_dictionary_fuzz_slices():
    rng = random.Random(1)
    terms = load_terms(dictionary_path("builtin:disease"))
    ann = DictionaryAnnotator(terms, EntityType.DISEASE)
    pool = terms + ["the", "and", "of", ",", ".", "-", "(", ")", "ß", "İ", "x"]
    for _ in range(500):
        text = " ".join(rng.choice(pool) for _ in range(rng.randint(0, 20)))
        text = "".join(c.upper() if rng.random() < 0.1 else c for c in text)
        for a in ann.annotate(doc(text)):
            assert text[a.init:a.end + 1] == a.annotated_text
