from __future__ import annotations

import re
import time

from annoserv.annotators.base import SpanAnnotator
from annoserv.protocol import EntityType

_WORD = re.compile(r"[^\W_]+")


def burn_cpu(seconds: float) -> int:
    """Spin for ``seconds`` of this thread's CPU time (not wall time)."""
    end = time.thread_time() + seconds
    n = 0
    while time.thread_time() < end:
        for _ in range(200):
            n += 1
    return n


class SyntheticAnnotator(SpanAnnotator):
    """Costs ``cost_ms`` of CPU per document and tags the first word of each section.

    Used for throughput measurements, where the pipeline rather than the
    tagger should dominate variance.
    """

    def __init__(self, entity_type: EntityType = EntityType.GENE, cost_ms: float = 10.0):
        self.entity_type = entity_type
        self.cost_ms = cost_ms

    def annotate(self, doc):
        if self.cost_ms > 0:
            burn_cpu(self.cost_ms / 1000.0)
        return super().annotate(doc)

    def find_spans(self, text):
        m = _WORD.search(text)
        return [(m.start(), m.end())] if m else []
