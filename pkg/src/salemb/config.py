"""Run configuration: defaults, config files, and flag overrides.

Config files are flat UTF-8 text, one ``dotted.key = value`` per line,
``#`` comments allowed. Unknown keys are rejected. Values from a file
override the defaults; values from flags override the file.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .datagen import DataConfig
from .losses import LossConfig
from .model import ModelConfig
from .saliency import PipelineConfig
from .sdr import SdrConfig

TRAIN_MODES = ("baseline", "sga", "sdr", "full")


def sga_active(mode: str) -> bool:
    """Whether the attention-alignment loss participates in this mode."""
    return mode in ("sga", "full")


def sdr_active(mode: str) -> bool:
    """Whether feature regeneration and fusion participate in this mode."""
    return mode in ("sdr", "full")


@dataclass(frozen=True)
class TrainSettings:
    steps: int = 1500
    batch_size: int = 32
    lr: float = 1e-4
    seed: int = 0
    mode: str = "full"

    def validate(self) -> None:
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 for contrastive training")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.mode not in TRAIN_MODES:
            raise ValueError(f"mode must be one of {TRAIN_MODES}")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    loss: LossConfig
    sdr: SdrConfig
    saliency: PipelineConfig
    train: TrainSettings
    data: DataConfig

    def validate(self) -> None:
        self.model.validate()
        self.loss.validate()
        self.sdr.validate()
        self.saliency.validate()
        self.train.validate()
        self.data.validate()
        if self.saliency.patch_size != self.model.patch_size:
            raise ValueError("saliency.patch_size must equal model.patch_size")
        if self.data.image_size != self.model.image_size:
            raise ValueError("data.image_size must equal model.image_size")


def default_config() -> RunConfig:
    return RunConfig(
        model=ModelConfig(),
        loss=LossConfig(),
        sdr=SdrConfig(),
        saliency=PipelineConfig(),
        train=TrainSettings(),
        data=DataConfig(),
    )


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    raise ValueError(f"expected true/false, got {text!r}")


def _parse_top_k(text: str):
    return text if text == "all" else int(text)


_SECTIONS = ("model", "loss", "sdr", "saliency", "train", "data")

# key -> parser; everything the file format accepts, one entry per field
_PARSERS = {
    "model.image_size": int, "model.patch_size": int, "model.n_layers": int,
    "model.d_model": int, "model.n_heads": int, "model.vocab_size": int,
    "model.max_seq_len": int,
    "loss.alpha": float, "loss.beta": float, "loss.tau_con": float,
    "loss.alignment_layers": str,
    "sdr.tau_sdr": float, "sdr.fusion_mode": str, "sdr.top_k": _parse_top_k,
    "sdr.apply_to": str,
    "saliency.sigma": float, "saliency.delta": float,
    "saliency.filtering": _parse_bool, "saliency.patch_size": int,
    "saliency.prompt": str,
    "train.steps": int, "train.batch_size": int, "train.lr": float,
    "train.seed": int, "train.mode": str,
    "data.n_train": int, "data.n_eval": int, "data.pool_size": int,
    "data.image_size": int, "data.t2i_fraction": float,
    "data.bank_per_class": int, "data.min_objects": int,
    "data.max_objects": int, "data.noise": int, "data.seed": int,
}


def parse_config_text(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines into a string map; duplicates rejected."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key in values:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        values[key] = value.strip()
    return values


def apply_values(config: RunConfig, values: dict[str, str]) -> RunConfig:
    """Override config fields from a flat string map; unknown keys rejected."""
    sections = {name: getattr(config, name) for name in _SECTIONS}
    for key, raw in values.items():
        if key not in _PARSERS:
            raise ValueError(f"unknown config key {key!r}")
        section, _, field_name = key.partition(".")
        try:
            value = _PARSERS[key](raw)
        except ValueError as exc:
            raise ValueError(f"bad value for {key}: {exc}") from exc
        sections[section] = replace(sections[section], **{field_name: value})
    return RunConfig(**sections)


def load_config(path: str | Path | None, overrides: dict[str, str] | None = None) -> RunConfig:
    """defaults <- config file <- flag overrides, then validate."""
    config = default_config()
    if path is not None:
        config = apply_values(config, parse_config_text(Path(path).read_text()))
    if overrides:
        config = apply_values(config, overrides)
    config.validate()
    return config


def flatten_config(config: RunConfig) -> dict:
    """Resolved config as a flat JSON-friendly dict of dotted keys."""
    out = {}
    for section in _SECTIONS:
        obj = getattr(config, section)
        for f in fields(obj):
            out[f"{section}.{f.name}"] = getattr(obj, f.name)
    return out


def serialize_config(config: RunConfig) -> str:
    """The file-format rendering of a resolved config."""
    lines = []
    for key, value in flatten_config(config).items():
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
