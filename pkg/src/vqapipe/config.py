"""Run configuration: a validated YAML/JSON document plus ``key=value`` overrides.

The default config path can be set with the ``VQAPIPE_CONFIG`` environment
variable.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .datagen.operators import DEFAULT_OPERATORS
from .errors import ConfigurationError

ENV_VAR = "VQAPIPE_CONFIG"


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class Paths(_Strict):
    sources: str | None = None
    corpus: str = "corpus"
    manifest: str = "groups.jsonl"
    runs: str = "runs"
    stage1_checkpoint: str | None = None
    stage2_data: str | None = None
    reports: str = "reports"


class DataSettings(_Strict):
    synthetic_sources: int = Field(20, ge=0)
    width: int = Field(512, ge=256)
    height: int = Field(256, ge=256)
    frames: int = Field(24, ge=12)
    scales: list[float] = [1.0]
    operators: list[str] = list(DEFAULT_OPERATORS)
    operator_overrides: dict[str, dict[str, Any]] = {}
    severities: int = Field(4, ge=1)
    groups: int = Field(2048, ge=1)
    ss_fraction: float = Field(0.3, ge=0.0, le=1.0)
    threshold_ss: float = Field(6.0, ge=0.0)
    threshold_ds: float = Field(15.0, ge=0.0)
    metric: str = "msssim"
    metric_command: str | None = None


class TrainSettings(_Strict):
    epochs: int = Field(60, ge=1)
    batch_size: int = Field(4, ge=1)
    lr: float = Field(1e-4, gt=0)
    betas: tuple[float, float] = (0.9, 0.999)
    decay_factor: float = Field(0.1, gt=0)
    decay_every: int = Field(20, ge=1)
    decay: Literal["lr", "l2"] = "lr"
    precision: Literal["float32", "bfloat16", "float64"] = "float32"
    compile: bool = False
    pair_budget: int = Field(16000, ge=1)
    squared: bool = False
    save_every: int = Field(50, ge=1)


class RunConfig(_Strict):
    mode: Literal["FR", "NR"] = "FR"
    profile: Literal["tiny", "full"] = "tiny"
    seed: int = 0
    threads: int = Field(1, ge=1)
    paths: Paths = Paths()
    data: DataSettings = DataSettings()
    train: TrainSettings = TrainSettings()
    stage2: TrainSettings = TrainSettings(pair_budget=500)
    base_dir: str = "."

    @field_validator("mode", mode="before")
    @classmethod
    def _upper(cls, v):
        return v.upper() if isinstance(v, str) else v

    def resolve(self, p: str | None) -> Path | None:
        if p is None:
            return None
        path = Path(p)
        return path if path.is_absolute() else Path(self.base_dir) / path

    def require(self, *names: str) -> None:
        """Check that the named input paths are set and exist."""
        for name in names:
            value = getattr(self.paths, name)
            if value is None:
                raise ConfigurationError(f"paths.{name} is not set")
            if not self.resolve(value).exists():
                raise ConfigurationError(f"paths.{name}: {self.resolve(value)} does not exist")

    def train_config(self, stage: int = 1):
        from .ranking import TrainConfig

        s = self.train if stage == 1 else self.stage2
        return TrainConfig(seed=self.seed, threads=self.threads, **s.model_dump())


def _parse_value(text: str):
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    """Apply dotted ``key=value`` overrides; values are parsed as YAML scalars or lists."""
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigurationError(f"override {item!r} is not key=value")
        node = doc
        parts = key.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigurationError(f"override {item!r}: {part} is not a section")
        node[parts[-1]] = _parse_value(value)
    return doc


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    path = path or os.environ.get(ENV_VAR)
    doc: dict = {}
    if path:
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"config file {path} does not exist")
        try:
            doc = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"{path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigurationError(f"{path}: top level must be a mapping")
        doc.setdefault("base_dir", str(path.parent))
    apply_overrides(doc, overrides or [])
    try:
        return RunConfig.model_validate(doc)
    except ValidationError as exc:
        raise ConfigurationError(f"invalid configuration:\n{exc}") from exc


def dump_config(cfg: RunConfig) -> str:
    return json.dumps(cfg.model_dump(mode="json"), indent=1, sort_keys=True) + "\n"
