"""
Run configuration: one JSON object per section, mapped onto frozen dataclasses.

CLI flags override file values, file values override the dataclass defaults.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional

from byol import ByolConfig
from encoder import EncoderConfig, TokenizerConfig
from errors import ConfigError

logger = logging.getLogger(__name__)

DEFAULT_SEED = 7
MODES = ("staged", "joint")

# JSON keys that are Python keywords
_ALIASES = {"lambda": "lam"}
_REVERSE_ALIASES = {v: k for k, v in _ALIASES.items()}


@dataclass(frozen=True)
class PipelineConfig:
    stage1_epochs: int = 3
    stage3_epochs: int = 10
    stage1_learning_rate: float = 0.5
    stage3_learning_rate: float = 1.0
    joint_epochs: int = 15
    joint_learning_rate: float = 0.1
    batch_size: int = 64
    lam: float = 1.0
    momentum: float = 0.0
    head_hidden: int = 64
    head_activation: str = "tanh"
    seed: int = DEFAULT_SEED
    mode: str = "staged"

    def __post_init__(self) -> None:
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be at least 2, got {self.batch_size}")
        for name in ("stage1_epochs", "stage3_epochs", "joint_epochs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1, got {getattr(self, name)}")
        for name in ("stage1_learning_rate", "stage3_learning_rate", "joint_learning_rate"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be non-negative, got {self.lam}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}, expected one of {MODES}")


@dataclass(frozen=True)
class DataConfig:
    train_path: Optional[str] = None
    label_table_path: Optional[str] = None
    synthetic: bool = False
    classes: int = 8
    per_class: int = 200
    vocab_per_class: int = 20
    overlap: float = 0.3

    def __post_init__(self) -> None:
        if self.classes < 2:
            raise ConfigError(f"synthetic data needs at least 2 classes, got {self.classes}")
        if self.per_class < 2:
            raise ConfigError(f"synthetic data needs at least 2 samples per class, got {self.per_class}")
        if not 0.0 <= self.overlap <= 1.0:
            raise ConfigError(f"overlap must lie in [0, 1], got {self.overlap}")


_SECTIONS = {
    "tokenizer": TokenizerConfig,
    "encoder": EncoderConfig,
    "byol": ByolConfig,
    "pipeline": PipelineConfig,
    "data": DataConfig,
}


@dataclass(frozen=True)
class RunConfig:
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    byol: ByolConfig = field(default_factory=ByolConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    data: DataConfig = field(default_factory=DataConfig)
    output_dir: str = "runs/latest"

    @property
    def seed(self) -> int:
        return self.pipeline.seed

    @property
    def stage2_epochs(self) -> int:
        return self.byol.epochs

    @property
    def delta(self) -> float:
        return self.byol.delta

    @classmethod
    def from_dict(cls, values: Mapping[str, Any]) -> "RunConfig":
        unknown = set(values) - set(_SECTIONS) - {"output_dir"}
        if unknown:
            raise ConfigError(f"unknown configuration sections: {', '.join(sorted(unknown))}")
        sections = {}
        for section, section_cls in _SECTIONS.items():
            raw = {_ALIASES.get(k, k): v for k, v in values.get(section, {}).items()}
            known = {f.name for f in dataclasses.fields(section_cls)}
            extra = set(raw) - known
            if extra:
                raise ConfigError(f"unknown keys in [{section}]: {', '.join(sorted(extra))}")
            try:
                sections[section] = section_cls(**raw)
            except TypeError as exc:
                raise ConfigError(f"invalid [{section}] section: {exc}") from exc
        return cls(output_dir=values.get("output_dir", "runs/latest"), **sections)

    @classmethod
    def from_json(cls, path: Path | str) -> "RunConfig":
        try:
            with open(path, encoding="utf-8") as file:
                values = json.load(file)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(values)

    def to_dict(self) -> dict[str, Any]:
        values: dict[str, Any] = {"output_dir": self.output_dir}
        for section in _SECTIONS:
            raw = dataclasses.asdict(getattr(self, section))
            values[section] = {_REVERSE_ALIASES.get(k, k): v for k, v in raw.items()}
        return values

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def with_overrides(self, overrides: Mapping[str, Any]) -> "RunConfig":
        """Apply ``{"section.key": value}`` overrides; ``None`` values are ignored."""
        values = self.to_dict()
        for dotted, value in overrides.items():
            if value is None:
                continue
            if dotted == "output_dir":
                values["output_dir"] = value
                continue
            section, _, key = dotted.partition(".")
            if section not in _SECTIONS or not key:
                raise ConfigError(f"cannot override unknown setting {dotted!r}")
            values[section][key] = value
        return self.from_dict(values)

    def validate(self) -> None:
        """Check that every referenced path resolves."""
        if not self.data.synthetic and self.data.train_path is None:
            raise ConfigError("no data path given and synthetic data not requested")
        for label, path in (("data", self.data.train_path), ("label table", self.data.label_table_path)):
            if path is not None and not Path(path).is_file():
                raise ConfigError(f"{label} file not found: {path}")
