"""Run configuration: one JSON document covering every stage of the pipeline.

::

    {
      "schema_version": 1,
      "scenario":  {... ScenarioConfig fields ...},
      "hierarchy": {"levels": 8, "width": 32, "k": 12, "hidden": 32, ...},
      "train":     {... TrainConfig fields ...},
      "match":     {"identity": true, "tau": 0.5, "average": "macro", "ks": [20, 50, 100]},
      "sampling_rate": 1,
      "split": null
    }

Every section is optional; unknown keys anywhere are rejected.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigError
from .evaluation import DEFAULT_KS, MatchCriteria
from .graph import DEFAULT_CONFIDENCE, DEFAULT_K, HierarchyConfig, Nonlinearity, WeightSharing
from .synthgen import ScenarioConfig
from .training import TrainConfig

CONFIG_VERSION = 1


@dataclass
class HierarchySection:
    """Model shape.  ``dims`` wins over ``width``; otherwise ``D_0`` comes from the data."""

    levels: int = 8
    width: int = 32
    dims: list[int] | None = None
    k: int = DEFAULT_K
    hidden: int | None = None  # None means one hidden layer as wide as D_L; 0 disables it
    weight_sharing: str = WeightSharing.PER_LEVEL.value
    confidence_threshold: float = DEFAULT_CONFIDENCE
    nonlinearity: str = Nonlinearity.RELU.value
    seed: int = 0

    def build(self, input_dim: int) -> HierarchyConfig:
        dims = tuple(self.dims) if self.dims is not None else (input_dim,) + (self.width,) * self.levels
        if dims[0] != input_dim:
            raise ConfigError(f"dims[0]={dims[0]} but the data has feature width {input_dim}")
        try:
            return HierarchyConfig(levels=self.levels, dims=dims, k=self.k, weight_sharing=self.weight_sharing,
                                   confidence_threshold=self.confidence_threshold, nonlinearity=self.nonlinearity)
        except ValueError as exc:
            raise ConfigError(f"hierarchy: {exc}") from exc

    def hidden_width(self, config: HierarchyConfig) -> int | None:
        if self.hidden is None:
            return config.dims[-1]
        return self.hidden or None


@dataclass
class MatchSection:
    identity: bool = True
    tau: float = 0.5
    average: str = "macro"
    ks: list[int] = field(default_factory=lambda: list(DEFAULT_KS))

    def criteria(self) -> MatchCriteria:
        try:
            return MatchCriteria(self.identity, self.tau, self.average)
        except ValueError as exc:
            raise ConfigError(f"match: {exc}") from exc


@dataclass
class RunConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    hierarchy: HierarchySection = field(default_factory=HierarchySection)
    train: TrainConfig = field(default_factory=TrainConfig)
    match: MatchSection = field(default_factory=MatchSection)
    sampling_rate: int = 1
    split: str | None = None

    def to_json(self) -> dict:
        return {
            "schema_version": CONFIG_VERSION,
            "scenario": self.scenario.to_json(),
            "hierarchy": asdict(self.hierarchy),
            "train": asdict(self.train),
            "match": asdict(self.match),
            "sampling_rate": self.sampling_rate,
            "split": self.split,
        }


def _section(cls, data: Any, name: str):
    if not isinstance(data, Mapping):
        raise ConfigError(f"{name} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown keys in {name}: {unknown}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def parse_config(doc: Any) -> RunConfig:
    if not isinstance(doc, Mapping):
        raise ConfigError("config must be a JSON object")
    allowed = {"schema_version", "scenario", "hierarchy", "train", "match", "sampling_rate", "split"}
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {unknown}")
    version = doc.get("schema_version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config schema_version {version!r}")
    cfg = RunConfig(
        scenario=_section(ScenarioConfig, doc.get("scenario", {}), "scenario"),
        hierarchy=_section(HierarchySection, doc.get("hierarchy", {}), "hierarchy"),
        train=_section(TrainConfig, doc.get("train", {}), "train"),
        match=_section(MatchSection, doc.get("match", {}), "match"),
        sampling_rate=doc.get("sampling_rate", 1),
        split=doc.get("split"),
    )
    if not isinstance(cfg.sampling_rate, int) or cfg.sampling_rate < 1:
        raise ConfigError("sampling_rate must be a positive integer")
    if cfg.split not in (None, "train", "val"):
        raise ConfigError("split must be null, 'train' or 'val'")
    if not cfg.match.ks or min(cfg.match.ks) < 1:
        raise ConfigError("match.ks needs at least one positive K")
    cfg.match.criteria()
    return cfg


def load_config(path: Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text("utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON at line {exc.lineno}: {exc.msg}") from exc
    return parse_config(doc)
