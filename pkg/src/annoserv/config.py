"""Server configuration: one JSON document, validated at startup."""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from annoserv.protocol import EntityType, Source

ENV_LISTEN = "ANNOSERV_LISTEN"
ENV_DATA_DIR = "ANNOSERV_DATA_DIR"


class ConfigError(Exception):
    pass


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid")


class BackoffConfig(_Model):
    initial_wait: float = Field(1.0, ge=0)
    multiplier: float = Field(2.0, ge=1)
    max_wait: float = Field(60.0, ge=0)
    max_attempts: int = Field(7, ge=1)


class AdapterConfig(_Model):
    source: Source
    base_url: str | None = None
    directory: str | None = None
    batch_size: int = Field(50, ge=1)
    timeout: float = Field(30.0, gt=0)

    @model_validator(mode="after")
    def _needs_location(self):
        if self.source is Source.LOCAL and not self.directory:
            raise ValueError("LOCAL adapter needs 'directory'")
        if self.source in (Source.PATENT_SERVER, Source.ABSTRACT_SERVER) and not self.base_url:
            raise ValueError(f"{self.source.value} adapter needs 'base_url'")
        return self


class AnnotatorConfig(_Model):
    name: str = Field(min_length=1)
    type: EntityType
    kind: Literal["mutation", "mirna", "dictionary", "synthetic", "external"]
    active: bool = True
    queue: str | None = None
    # "builtin:<name>" selects a packaged sample dictionary
    dictionary: str | None = None
    endpoints: list[str] = Field(default_factory=list)
    timeout: float = Field(30.0, gt=0)
    cost_ms: float = Field(10.0, ge=0)
    serial: bool = False

    @model_validator(mode="after")
    def _kind_fields(self):
        if self.kind == "dictionary" and not self.dictionary:
            raise ValueError(f"dictionary annotator {self.name!r} needs 'dictionary'")
        if self.kind == "external":
            if not self.endpoints:
                raise ValueError(f"external annotator {self.name!r} needs 'endpoints'")
            for ep in self.endpoints:
                host, _, port = ep.rpartition(":")
                if not host or not port.isdigit():
                    raise ValueError(f"endpoint {ep!r} is not host:port")
        return self


class QueueNames(_Model):
    input: str = "input"
    fetch: str = "q.fetch"
    scatter: str = "q.scatter"
    gather: str = "q.gather"
    aggregate: str = "q.aggregate"
    output: str = "output"


def default_annotators() -> list[AnnotatorConfig]:
    return [
        AnnotatorConfig(name="mutation", type=EntityType.MUTATION, kind="mutation"),
        AnnotatorConfig(name="mirna", type=EntityType.MIRNA, kind="mirna"),
        AnnotatorConfig(name="disease", type=EntityType.DISEASE, kind="dictionary", dictionary="builtin:disease"),
        AnnotatorConfig(name="gene", type=EntityType.GENE, kind="dictionary", dictionary="builtin:gene"),
        AnnotatorConfig(name="chemical", type=EntityType.CHEMICAL, kind="dictionary", dictionary="builtin:chemical"),
        AnnotatorConfig(name="organism", type=EntityType.ORGANISM, kind="dictionary", dictionary="builtin:organism"),
    ]


def default_adapters() -> list[AdapterConfig]:
    return [AdapterConfig(source=Source.PUBMED), AdapterConfig(source=Source.PMC)]


class Config(_Model):
    listen: str = "127.0.0.1:8080"
    data_dir: str = "./data"
    fsync: bool = False
    max_bytes: int | None = Field(None, gt=0)
    apikeys: list[str] = Field(default_factory=list)
    bucket_width: float = Field(60.0, gt=0)
    default_ttl: float = Field(3600.0, gt=0)
    expiry_tolerance: float = Field(5.0, ge=0)
    default_callback_url: str | None = None
    parallelism: int = Field(1, ge=1)
    executor: Literal["thread", "process"] = "thread"
    fetch_linger: float = Field(0.02, ge=0)
    gather_margin: float = Field(10.0, ge=0)
    aggregate_margin: float = Field(5.0, ge=0)
    result_handler: Literal["callback", "file"] = "callback"
    output_file: str | None = None
    queues: QueueNames = Field(default_factory=QueueNames)
    adapters: list[AdapterConfig] = Field(default_factory=default_adapters)
    annotators: list[AnnotatorConfig] = Field(default_factory=default_annotators)
    backoff: BackoffConfig = Field(default_factory=BackoffConfig)

    @model_validator(mode="after")
    def _consistency(self):
        names = [a.name for a in self.annotators]
        dupes = {n for n in names if names.count(n) > 1}
        if dupes:
            raise ValueError(f"duplicate annotator names: {sorted(dupes)}")
        sources = [a.source for a in self.adapters]
        if len(set(sources)) != len(sources):
            raise ValueError("at most one adapter per source")
        if self.result_handler == "file" and not self.output_file:
            raise ValueError("file result handler needs 'output_file'")
        host, _, port = self.listen.rpartition(":")
        if not host or not port.isdigit():
            raise ValueError(f"listen address {self.listen!r} is not host:port")
        return self

    @property
    def host(self) -> str:
        return self.listen.rpartition(":")[0]

    @property
    def port(self) -> int:
        return int(self.listen.rpartition(":")[2])


def load_config(path: str | Path | None = None, env: dict[str, str] | None = None) -> Config:
    """Read a JSON config file (or defaults) and apply environment overrides."""
    env = os.environ if env is None else env
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except ValueError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must be a JSON object")
    if env.get(ENV_LISTEN):
        data["listen"] = env[ENV_LISTEN]
    if env.get(ENV_DATA_DIR):
        data["data_dir"] = env[ENV_DATA_DIR]
    try:
        return Config.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc
