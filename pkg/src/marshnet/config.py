"""Flat ``key = value`` pipeline configuration with validation."""
from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """A configuration value is missing, unknown, or out of range."""


@dataclass(frozen=True)
class PipelineConfig:
    # tiling
    patch_size: int = 500
    overlap: float = 0.5
    # stain
    stain_lambda: float = 0.1
    stain_beta: float = 0.15
    stain_iters: int = 200
    # filter
    embed_dim: int = 64
    ae_epochs: int = 10
    ae_lr: float = 1e-3
    # classifier
    input_size: int = 64
    stem_channels: int = 16
    stages: tuple[int, ...] = (16, 32, 64)
    blocks_per_stage: int = 2
    head_width: int = 128
    dropout: float = 0.5
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    # randomness
    seed: int = 0

    def __post_init__(self):
        checks = [
            (self.patch_size >= 1, "patch_size must be >= 1"),
            (0.0 <= self.overlap < 1.0, "overlap must lie in [0, 1)"),
            (self.stain_lambda >= 0, "stain_lambda must be >= 0"),
            (self.stain_beta > 0, "stain_beta must be > 0"),
            (self.stain_iters >= 1, "stain_iters must be >= 1"),
            (self.embed_dim >= 1, "embed_dim must be >= 1"),
            (self.ae_epochs >= 1, "ae_epochs must be >= 1"),
            (self.ae_lr > 0, "ae_lr must be > 0"),
            (self.input_size >= 1, "input_size must be >= 1"),
            (self.stem_channels >= 1, "stem_channels must be >= 1"),
            (len(self.stages) >= 1 and min(self.stages) >= 1, "stages must be positive channel counts"),
            (self.blocks_per_stage >= 1, "blocks_per_stage must be >= 1"),
            (self.head_width >= 1, "head_width must be >= 1"),
            (0.0 <= self.dropout < 1.0, "dropout must lie in [0, 1)"),
            (self.epochs >= 1, "epochs must be >= 1"),
            (self.batch_size >= 2, "batch_size must be >= 2"),
            (self.lr >= 0, "lr must be >= 0"),
            (self.seed >= 0, "seed must be >= 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        if self.input_size % (2 ** len(self.stages)):
            raise ConfigError(f"input_size {self.input_size} must be divisible by 2^{len(self.stages)}")

    def model_config(self):
        from .model import ModelConfig
        return ModelConfig(self.input_size, self.stem_channels, self.stages, self.blocks_per_stage,
                           self.head_width, self.dropout)

    def to_text(self) -> str:
        lines = []
        for k, v in asdict(self).items():
            lines.append(f"{k} = {','.join(map(str, v)) if isinstance(v, tuple) else v}")
        return "\n".join(lines) + "\n"


_FIELDS = {f.name: f for f in fields(PipelineConfig)}


def _coerce(key: str, raw: Any) -> Any:
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key: {key}")
    default = getattr(PipelineConfig, key)
    try:
        if isinstance(default, tuple):
            if isinstance(raw, (tuple, list)):
                return tuple(int(v) for v in raw)
            return tuple(int(v) for v in str(raw).replace(" ", "").split(",") if v)
        if isinstance(default, bool):
            return str(raw).lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            value = float(raw)
            if value != int(value):
                raise ValueError
            return int(value)
        return float(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_text(text: str) -> dict[str, Any]:
    """Parse ``key = value`` lines; ``#``/``;`` comments and an optional section header are allowed."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    if not any(line.strip().startswith("[") for line in text.splitlines()):
        text = "[pipeline]\n" + text
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unparseable config: {exc}") from None
    values: dict[str, Any] = {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            values[key] = _coerce(key, raw)
    return values


def load(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> PipelineConfig:
    """Defaults, then the file (if any), then ``overrides`` (``None`` values ignored)."""
    values: dict[str, Any] = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"file not found: {p}")
        values.update(parse_text(p.read_text()))
    for k, v in (overrides or {}).items():
        if v is not None:
            values[k] = _coerce(k, v)
    return PipelineConfig(**values)
