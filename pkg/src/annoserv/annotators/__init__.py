"""Named-entity annotators and the binding table that routes types to them."""

from __future__ import annotations

from importlib import resources
from pathlib import Path

from annoserv.annotators.base import (
    Annotator,
    AnnotatorBinding,
    Mode,
    SafeAnnotator,
    SpanAnnotator,
    at_boundary,
)
from annoserv.annotators.dictionary import DictionaryAnnotator, DictionaryError, load_terms
from annoserv.annotators.external import ExternalAnnotator, ExternalAnnotatorServer
from annoserv.annotators.regex import MirnaAnnotator, MutationAnnotator
from annoserv.annotators.synthetic import SyntheticAnnotator
from annoserv.config import AnnotatorConfig

__all__ = [
    "Annotator",
    "AnnotatorBinding",
    "DictionaryAnnotator",
    "DictionaryError",
    "ExternalAnnotator",
    "ExternalAnnotatorServer",
    "MirnaAnnotator",
    "Mode",
    "MutationAnnotator",
    "SafeAnnotator",
    "SpanAnnotator",
    "SyntheticAnnotator",
    "at_boundary",
    "binding_for",
    "build_annotator",
    "dictionary_path",
    "load_terms",
]


def dictionary_path(spec: str) -> Path:
    if spec.startswith("builtin:"):
        return Path(str(resources.files("annoserv.annotators") / "data" / f"{spec[8:]}.txt"))
    return Path(spec)


def binding_for(cfg: AnnotatorConfig) -> AnnotatorBinding:
    return AnnotatorBinding(
        name=cfg.name,
        entity_type=cfg.type,
        queue=cfg.queue or AnnotatorBinding.queue_for(cfg.type, cfg.name),
        mode=Mode.EXTERNAL if cfg.kind == "external" else Mode.EMBEDDED,
        active=cfg.active,
    )


def build_annotator(cfg: AnnotatorConfig, endpoint: str | None = None) -> SafeAnnotator:
    """Instantiate the annotator described by ``cfg``, wrapped for error isolation.

    External annotators need ``endpoint`` (one of ``cfg.endpoints``).
    """
    if cfg.kind == "mutation":
        inner = MutationAnnotator()
    elif cfg.kind == "mirna":
        inner = MirnaAnnotator()
    elif cfg.kind == "dictionary":
        inner = DictionaryAnnotator.from_file(dictionary_path(cfg.dictionary), cfg.type)
    elif cfg.kind == "synthetic":
        inner = SyntheticAnnotator(cfg.type, cfg.cost_ms)
    elif cfg.kind == "external":
        host, _, port = (endpoint or cfg.endpoints[0]).rpartition(":")
        inner = ExternalAnnotator(host, int(port), cfg.type, timeout=cfg.timeout)
    else:
        raise ValueError(f"unknown annotator kind {cfg.kind!r}")
    return SafeAnnotator(inner, cfg.name, serial=cfg.serial)
