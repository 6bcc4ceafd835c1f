"""Dictionary tagger on an Aho-Corasick automaton.

Matching is case-insensitive and constrained to token boundaries; when hits
overlap, the leftmost one wins, and among those starting at the same position
the longest.
"""

from __future__ import annotations

import collections
from pathlib import Path
from typing import Iterable, Iterator

from annoserv.annotators.base import SpanAnnotator, at_boundary
from annoserv.protocol import EntityType


class DictionaryError(ValueError):
    pass


def fold_char(c: str) -> str:
    low = c.lower()
    # characters whose lowercase form has a different length stay as they are,
    # so offsets in the folded text equal offsets in the original
    return low if len(low) == 1 else c


def fold(text: str) -> str:
    return "".join(fold_char(c) for c in text)


class Automaton:
    def __init__(self, terms: Iterable[str] = ()):
        self._goto: list[dict[str, int]] = [{}]
        self._fail: list[int] = [0]
        self._out: list[tuple[int, ...]] = [()]
        self._size = 0
        self._built = False
        for t in terms:
            self.add(t)
        self.build()

    def __len__(self) -> int:
        return self._size

    def add(self, term: str) -> None:
        if self._built:
            raise RuntimeError("automaton already built")
        if not term:
            return
        state = 0
        for c in term:
            nxt = self._goto[state].get(c)
            if nxt is None:
                nxt = len(self._goto)
                self._goto.append({})
                self._fail.append(0)
                self._out.append(())
                self._goto[state][c] = nxt
            state = nxt
        if len(term) not in self._out[state]:
            self._out[state] = self._out[state] + (len(term),)
            self._size += 1

    def build(self) -> None:
        queue = collections.deque(self._goto[0].values())
        while queue:
            state = queue.popleft()
            for c, nxt in self._goto[state].items():
                queue.append(nxt)
                f = self._fail[state]
                while f and c not in self._goto[f]:
                    f = self._fail[f]
                target = self._goto[f].get(c, 0)
                self._fail[nxt] = target if target != nxt else 0
                self._out[nxt] = self._out[nxt] + self._out[self._fail[nxt]]
        self._built = True

    def iter_matches(self, text: str) -> Iterator[tuple[int, int]]:
        """Every occurrence of every term as ``(start, stop)``, overlaps included."""
        goto, fail, out = self._goto, self._fail, self._out
        state = 0
        for i, c in enumerate(text):
            while state and c not in goto[state]:
                state = fail[state]
            state = goto[state].get(c, 0)
            for length in out[state]:
                yield i + 1 - length, i + 1


def leftmost_longest(spans: Iterable[tuple[int, int]]) -> list[tuple[int, int]]:
    chosen = []
    last_stop = 0
    for start, stop in sorted(spans, key=lambda s: (s[0], -s[1])):
        if start >= last_stop:
            chosen.append((start, stop))
            last_stop = stop
    return chosen


def load_terms(path: str | Path) -> list[str]:
    """One term per line, UTF-8; blank lines and ``#`` comments are skipped."""
    try:
        raw = Path(path).read_bytes().decode("utf-8")
    except OSError as exc:
        raise DictionaryError(f"cannot read dictionary {path}: {exc}") from exc
    except UnicodeDecodeError as exc:
        raise DictionaryError(f"dictionary {path} is not UTF-8: {exc}") from exc
    terms = []
    for lineno, line in enumerate(raw.splitlines(), 1):
        term = line.strip()
        if not term or term.startswith("#"):
            continue
        if any(ord(c) < 32 for c in term):
            raise DictionaryError(f"{path}:{lineno}: control character in term {term!r}")
        terms.append(term)
    if not terms:
        raise DictionaryError(f"dictionary {path} contains no terms")
    return terms


class DictionaryAnnotator(SpanAnnotator):
    def __init__(self, terms: Iterable[str], entity_type: EntityType):
        self.entity_type = entity_type
        self.automaton = Automaton(fold(t) for t in terms)

    @classmethod
    def from_file(cls, path: str | Path, entity_type: EntityType) -> "DictionaryAnnotator":
        return cls(load_terms(path), entity_type)

    def find_spans(self, text):
        folded = fold(text)
        hits = (s for s in self.automaton.iter_matches(folded) if at_boundary(text, *s))
        return leftmost_longest(hits)


def dictionary_annotate(text: str, annotator: DictionaryAnnotator) -> list[tuple[int, int]]:
    return annotator.find_spans(text)
