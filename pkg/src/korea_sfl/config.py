"""Run configuration: a YAML document validated in full before any work starts.

Top-level blocks are ``dataset``, ``partition``, ``model``, ``protocol`` and
``output``; unknown keys are rejected everywhere.
"""

from __future__ import annotations

import math
import struct
from pathlib import Path
from typing import Annotated, Literal, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

__all__ = ["Config", "ConfigError", "load_config", "dump_config", "set_knob", "ValidationError"]


class ConfigError(ValueError):
    pass


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid")


class BlobsData(_Block):
    kind: Literal["blobs"] = "blobs"
    num_classes: int = Field(10, ge=2)
    dim: int = Field(32, ge=1)
    samples_per_class: int = Field(500, ge=1)
    spread: float = Field(1.0, ge=0)
    separation: float = Field(4.0, gt=0)
    test_fraction: float = Field(0.2, gt=0, lt=1)
    seed: int = Field(0, ge=0)

    @property
    def input_dim(self) -> int:
        return self.dim


class IdxData(_Block):
    kind: Literal["idx"]
    train_images: str
    train_labels: str
    test_images: str
    test_labels: str
    num_classes: int = Field(10, ge=2)

    @model_validator(mode="after")
    def _files_exist(self):
        for name in ("train_images", "train_labels", "test_images", "test_labels"):
            if not Path(getattr(self, name)).is_file():
                raise ValueError(f"{name}: no such file {getattr(self, name)!r}")
        return self

    @property
    def input_dim(self) -> int:
        head = Path(self.train_images).read_bytes()[:16]
        if len(head) < 16:
            raise ValueError(f"train_images: {self.train_images!r} is truncated")
        _, _, rows, cols = struct.unpack(">IIII", head)
        return rows * cols


class PartitionBlock(_Block):
    num_clients: int = Field(100, ge=2)
    dirichlet_beta: float | None = Field(0.1, gt=0)
    iid: bool = False
    seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _beta_or_iid(self):
        if not self.iid and self.dirichlet_beta is None:
            raise ValueError("dirichlet_beta is required unless iid is true")
        return self


class ModelBlock(_Block):
    dims: list[int] = Field(default_factory=lambda: [32, 64, 10], min_length=3)
    split_at: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _shape(self):
        if any(d < 1 for d in self.dims):
            raise ValueError("dims must be positive")
        if self.split_at > len(self.dims) - 2:
            raise ValueError(f"split_at must lie in [1, {len(self.dims) - 2}] for {len(self.dims) - 1} layers")
        return self


class ProtocolBlock(_Block):
    algorithm: Literal["korea", "sfl", "fedavg"] = "korea"
    n: int = Field(10, ge=1)
    E: int = Field(5, ge=1)
    R: int = Field(200, ge=0)
    batch_size: int = Field(50, ge=1)
    eta: float = Field(0.05, gt=0)
    alpha_mix: float = Field(1.0, ge=0)
    decay_beta: float = Field(0.5, gt=0, le=1)
    p0: float = Field(0.01, ge=0)
    p_min: float = Field(0.002, ge=0)
    p_max: float = Field(0.5, ge=0, le=1)
    p_schedule: Literal["adaptive", "fixed", "literal"] = "adaptive"
    max_assistants: int = Field(5, ge=0)
    bytes_per_element: int = Field(4, ge=1)
    seed: int = Field(0, ge=0)
    workers: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _ranges(self):
        if not self.p_min <= self.p0 <= self.p_max:
            raise ValueError(f"need p_min <= p0 <= p_max, got {self.p_min}, {self.p0}, {self.p_max}")
        if math.isnan(self.alpha_mix):
            raise ValueError("alpha_mix must not be NaN")
        return self


class OutputBlock(_Block):
    dir: str = "runs/default"
    save_interval: int = Field(0, ge=0)


class Config(_Block):
    dataset: Annotated[Union[BlobsData, IdxData], Field(discriminator="kind")] = Field(default_factory=BlobsData)
    partition: PartitionBlock = Field(default_factory=PartitionBlock)
    model: ModelBlock = Field(default_factory=ModelBlock)
    protocol: ProtocolBlock = Field(default_factory=ProtocolBlock)
    output: OutputBlock = Field(default_factory=OutputBlock)

    @model_validator(mode="before")
    @classmethod
    def _default_kind(cls, data):
        if isinstance(data, dict) and isinstance(data.get("dataset"), dict) and "kind" not in data["dataset"]:
            data = {**data, "dataset": {**data["dataset"], "kind": "blobs"}}
        return data

    @model_validator(mode="after")
    def _cross_block(self):
        if self.model.dims[0] != self.dataset.input_dim:
            raise ValueError(f"model.dims[0]={self.model.dims[0]} != dataset input dim {self.dataset.input_dim}")
        if self.model.dims[-1] != self.dataset.num_classes:
            raise ValueError(f"model.dims[-1]={self.model.dims[-1]} != dataset.num_classes {self.dataset.num_classes}")
        if self.protocol.n > self.partition.num_clients:
            raise ValueError(f"protocol.n={self.protocol.n} exceeds partition.num_clients={self.partition.num_clients}")
        if isinstance(self.dataset, BlobsData):
            train_rows = self.dataset.num_classes * self.dataset.samples_per_class
            train_rows -= self.dataset.num_classes * math.floor(
                self.dataset.samples_per_class * self.dataset.test_fraction + 0.5)
            if train_rows < self.partition.num_clients:
                raise ValueError(f"{train_rows} training rows cannot cover {self.partition.num_clients} clients")
        return self


def _format_error(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{loc}: {e['msg']}")
    return "; ".join(lines)


def parse_config(data: dict) -> Config:
    try:
        return Config.model_validate(data or {})
    except ValidationError as err:
        raise ConfigError(_format_error(err)) from None


def load_config(path) -> Config:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as err:
        raise ConfigError(f"{path}: not valid YAML ({err})") from None
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return parse_config(data)


def dump_config(config: Config) -> str:
    return yaml.safe_dump(config.model_dump(mode="python"), sort_keys=False)


def set_knob(config: Config, knob: str, value) -> Config:
    """Return a re-validated copy of ``config`` with the dotted path ``knob`` set to ``value``."""
    data = config.model_dump(mode="python")
    parts = knob.split(".")
    node = data
    for p in parts[:-1]:
        if not isinstance(node, dict) or p not in node:
            raise ConfigError(f"unknown knob {knob!r}")
        node = node[p]
    if not isinstance(node, dict) or parts[-1] not in node:
        raise ConfigError(f"unknown knob {knob!r}")
    node[parts[-1]] = value
    return parse_config(data)
