"""Run configuration: a YAML file with four sections and two scalars.

Example::

    seed: 0
    out: runs/toy
    model:       {M: 2, D: 2, B: 1, K: 3, growth: 8, channels: 16, task: sr, scale: 2}
    degradation: {kind: BI, scale: 2}
    optimizer:   {lr: 1.0e-3, steps: 5000, decay_every: 2000}
    data:        {synthetic: 8, synthetic_size: 64, patch_size: 16, batch_size: 8}

Unknown keys are rejected with the line they appear on.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .data import DegradationSpec
from .model import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass
class OptimizerConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    steps: int = 1000
    decay_every: int = 2000
    decay_factor: float = 0.5
    checkpoint_every: int = 1000

    def lr_at(self, step: int) -> float:
        """Step-decayed learning rate for 0-based `step`."""
        if self.decay_every <= 0:
            return self.lr
        return self.lr * self.decay_factor ** (step // self.decay_every)


@dataclass
class DataConfig:
    train_dir: str | None = None
    eval_dir: str | None = None
    synthetic: int = 0
    synthetic_size: int = 64
    patch_size: int = 48
    batch_size: int = 8
    augment: bool = True


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    degradation: DegradationSpec | None = None
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    out: str = "runs/default"

    def validate(self, require_data: bool = True) -> None:
        o, d = self.optimizer, self.data
        if o.steps < 0 or o.lr < 0 or o.checkpoint_every < 1:
            raise ConfigError("optimizer: steps and lr must be >= 0, checkpoint_every >= 1")
        if d.patch_size < 1 or d.batch_size < 1:
            raise ConfigError("data: patch_size and batch_size must be >= 1")
        if d.synthetic < 0:
            raise ConfigError("data: synthetic must be >= 0")
        if require_data and d.train_dir is None and d.synthetic == 0:
            raise ConfigError("data: set train_dir or synthetic > 0")
        if self.degradation is not None and self.model.task == "sr" and self.degradation.scale != self.model.scale:
            raise ConfigError(
                f"degradation.scale {self.degradation.scale} differs from model.scale {self.model.scale}"
            )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _key_lines(node, prefix=()) -> dict[tuple, int]:
    lines = {}
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            path = prefix + (k.value,)
            lines[path] = k.start_mark.line + 1
            lines.update(_key_lines(v, path))
    return lines


def _build(cls, raw, section: str, lines: dict):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"section '{section}' must be a mapping (line {lines.get((section,), '?')})")
    names = {f.name for f in fields(cls)}
    for key in raw:
        if key not in names:
            line = lines.get((section, key), "?")
            raise ConfigError(f"unknown key '{section}.{key}' at line {line}")
    try:
        if hasattr(cls, "from_dict"):
            return cls.from_dict(raw)
        return cls(**raw)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"invalid '{section}' section (line {lines.get((section,), '?')}): {exc}") from exc


def parse_config(text: str, require_data: bool = True) -> RunConfig:
    """Parse and validate a run config. `require_data=False` skips only the
    check that a training source is configured (for params/flops/eval)."""
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ConfigError(f"malformed config{where}: {getattr(exc, 'problem', exc)}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    lines = _key_lines(root)
    top = {"model", "degradation", "optimizer", "data", "seed", "out"}
    for key in raw:
        if key not in top:
            raise ConfigError(f"unknown key '{key}' at line {lines.get((key,), '?')}")
    cfg = RunConfig(
        model=_build(ModelConfig, raw.get("model"), "model", lines),
        degradation=_build(DegradationSpec, raw["degradation"], "degradation", lines) if raw.get("degradation") else None,
        optimizer=_build(OptimizerConfig, raw.get("optimizer"), "optimizer", lines),
        data=_build(DataConfig, raw.get("data"), "data", lines),
        seed=int(raw.get("seed", 0)),
        out=str(raw.get("out", "runs/default")),
    )
    if "DIN_OUT" in os.environ:
        cfg.out = os.environ["DIN_OUT"]
    cfg.validate(require_data)
    return cfg


def load_config(path: str | Path, require_data: bool = True) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(), require_data)
