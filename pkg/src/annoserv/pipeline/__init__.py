"""The back end: document-level split, fetch, scatter-gather annotation, aggregation."""

from annoserv.pipeline.backend import AnnotatorPool, Backend, BindingTable
from annoserv.pipeline.stages import Route, aggregate, gather, merge, route_types, split
from annoserv.pipeline.store import CorrelationStore

__all__ = [
    "AnnotatorPool",
    "Backend",
    "BindingTable",
    "CorrelationStore",
    "Route",
    "aggregate",
    "gather",
    "merge",
    "route_types",
    "split",
]
