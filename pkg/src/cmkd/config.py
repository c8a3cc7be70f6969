"""Strict JSON run configuration.

One document with four optional sections; every omitted field takes its
default and unknown keys are rejected with their dotted path::

    {
      "data":    {"format": "idx", "train_limit": 10000, "test_limit": 2000},
      "model":   {"kind": "mlp", "layer_dims": [784, 32, 10]},
      "train":   {"epochs": 30, "lr": 0.05, "seed": 0},
      "distill": {"method": "cmkd", "T": 4.0, "beta": 4.0}
    }

Relative data paths resolve against ``data.root``, which defaults to the
``CMKD_DATA_DIR`` environment variable (or ``./data``).
"""

from __future__ import annotations

import dataclasses
import json
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

from .data import load_cifar10_bin, load_idx
from .errors import CMKDError, ConfigError
from .losses import DistillConfig
from .models import ModelSpec
from .trainer import TrainConfig

DATA_ENV = "CMKD_DATA_DIR"


@dataclass
class DataConfig:
    format: str = "idx"
    name: str = "mnist"
    root: Optional[str] = None
    train_images: str = "train-images-idx3-ubyte"
    train_labels: str = "train-labels-idx1-ubyte"
    test_images: str = "t10k-images-idx3-ubyte"
    test_labels: str = "t10k-labels-idx1-ubyte"
    train_files: List[str] = field(default_factory=lambda: [f"data_batch_{i}.bin" for i in range(1, 6)])
    test_files: List[str] = field(default_factory=lambda: ["test_batch.bin"])
    train_limit: Optional[int] = 10000
    test_limit: Optional[int] = 2000

    def resolved_root(self) -> Path:
        return Path(self.root or os.environ.get(DATA_ENV, "data"))

    def paths(self) -> dict:
        root = self.resolved_root()
        if self.format == "idx":
            names = dict(train_images=self.train_images, train_labels=self.train_labels,
                         test_images=self.test_images, test_labels=self.test_labels)
            return {k: root / v for k, v in names.items()}
        return {"train_files": [root / f for f in self.train_files],
                "test_files": [root / f for f in self.test_files]}

    def input_files(self) -> List[Path]:
        out = []
        for v in self.paths().values():
            out.extend(v if isinstance(v, list) else [v])
        return out

    def load(self):
        """Return ``(train, test)`` datasets. Missing files raise FileNotFoundError."""
        for p in self.input_files():
            if not p.exists():
                raise FileNotFoundError(f"dataset file not found: {p}")
        p = self.paths()
        if self.format == "idx":
            train = load_idx(p["train_images"], p["train_labels"], self.train_limit, self.name, "train")
            test = load_idx(p["test_images"], p["test_labels"], self.test_limit, self.name, "test")
        else:
            train = load_cifar10_bin(p["train_files"], self.train_limit, self.name, "train")
            test = load_cifar10_bin(p["test_files"], self.test_limit, self.name, "test")
        return train, test


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)

    @property
    def distill(self) -> DistillConfig:
        return self.train.distill

    def to_dict(self) -> dict:
        d = {"data": dataclasses.asdict(self.data), "model": self.model.to_dict(),
             "train": dataclasses.asdict(self.train)}
        d["distill"] = d["train"].pop("distill")
        return d


_ALLOWED = {"data": DataConfig, "model": ModelSpec, "train": TrainConfig, "distill": DistillConfig}
_CHOICES = {("data", "format"): ("idx", "cifar10")}


def _check_type(value, hint, path):
    origin = typing.get_origin(hint)
    if origin is typing.Union:
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if value is None:
            return value
        return _check_type(value, args[0], path)
    if origin in (list, List):
        if not isinstance(value, list):
            raise ConfigError(f"expected a list, got {type(value).__name__}", path)
        (inner,) = typing.get_args(hint) or (object,)
        return [_check_type(v, inner, f"{path}[{i}]") for i, v in enumerate(value)]
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"expected true/false, got {value!r}", path)
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", path)
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", path)
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", path)
        return value
    return value


def _section(cls, raw, path, skip=()):
    if not isinstance(raw, dict):
        raise ConfigError("expected an object", path)
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)} - set(skip)
    kwargs = {}
    for key, value in raw.items():
        if key not in names:
            raise ConfigError(f"unknown key (valid: {', '.join(sorted(names))})", f"{path}.{key}")
        value = _check_type(value, hints[key], f"{path}.{key}")
        choices = _CHOICES.get((path, key))
        if choices and value not in choices:
            raise ConfigError(f"must be one of {choices}, got {value!r}", f"{path}.{key}")
        kwargs[key] = value
    return kwargs


def parse_config(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    for key in doc:
        if key not in _ALLOWED:
            raise ConfigError(f"unknown section (valid: {', '.join(_ALLOWED)})", key)
    section = "distill"
    try:
        distill = DistillConfig(**_section(DistillConfig, doc.get("distill", {}), "distill"))
        section = "train"
        train = TrainConfig(distill=distill, **_section(TrainConfig, doc.get("train", {}), "train", skip=("distill",)))
        section = "model"
        model = ModelSpec(**_section(ModelSpec, doc.get("model", {}), "model"))
        model.validate()
        section = "data"
        data = DataConfig(**_section(DataConfig, doc.get("data", {}), "data"))
    except ConfigError:
        raise
    except CMKDError as e:
        raise ConfigError(str(e), section) from None
    return RunConfig(data=data, model=model, train=train)


def load_config(path) -> RunConfig:
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON ({e})", str(path)) from None
    return parse_config(doc)

