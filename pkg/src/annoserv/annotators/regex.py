"""Pattern-based taggers for mutation and micro-RNA mentions."""

from __future__ import annotations

import re

from annoserv.annotators.base import SpanAnnotator
from annoserv.protocol import EntityType

# not preceded / followed by a letter or digit
_START = r"(?<![^\W_])"
_END = r"(?![^\W_])"

_AA1 = "ACDEFGHIKLMNPQRSTVWY"
_AA3 = "Ala|Arg|Asn|Asp|Cys|Gln|Glu|Gly|His|Ile|Leu|Lys|Met|Phe|Pro|Ser|Thr|Trp|Tyr|Val"

MUTATION_RE = re.compile(
    _START
    + "(?:"
    + r"c\.\d+[ACGT]>[ACGT]"
    + rf"|p\.(?:{_AA3})\d+(?:{_AA3})"
    + rf"|p\.[{_AA1}]\d+[{_AA1}]"
    + ")"
    + _END
)

# a hyphen joins tokens in miRNA names, so a mention must not continue one
_HYPHEN_START = r"(?<![^\W_]-)"
_HYPHEN_END = r"(?!-[^\W_])"

MIRNA_RE = re.compile(
    _START
    + _HYPHEN_START
    + r"(?:(?!mir-|let-)[a-z]{3}-)?"  # species, e.g. hsa-
    + r"(?:miR|mir|let)-\d+"  # core and number
    + r"[a-z]?"               # paralog letter
    + r"(?:-\d+)?"            # genomic locus
    + r"(?:-[35]p)?"          # arm
    + _END
    + _HYPHEN_END
)


class RegexAnnotator(SpanAnnotator):
    def __init__(self, pattern: re.Pattern, entity_type: EntityType):
        self.pattern = pattern
        self.entity_type = entity_type

    def find_spans(self, text):
        for m in self.pattern.finditer(text):
            yield m.start(), m.end()


class MutationAnnotator(RegexAnnotator):
    """DNA substitutions (c.123A>G) and protein substitutions (p.V600E, p.Val600Glu)."""

    def __init__(self):
        super().__init__(MUTATION_RE, EntityType.MUTATION)


class MirnaAnnotator(RegexAnnotator):
    def __init__(self):
        super().__init__(MIRNA_RE, EntityType.MIRNA)


def mutation_regex(text: str) -> list[tuple[int, int]]:
    return list(MutationAnnotator().find_spans(text))


def mirna_regex(text: str) -> list[tuple[int, int]]:
    return list(MirnaAnnotator().find_spans(text))
