"""Flat ``key = value`` run configuration."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional, get_type_hints

from .model import ModelConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # data
    train_manifest: str = ""
    valid_manifest: str = ""
    vocab: str = ""                 # empty: built-in synthetic vocabulary
    synth_train: int = 0            # >0 and no train_manifest: generate this many samples
    synth_valid: int = 0            # 0: validate on the training set
    synth_seed: int = 0
    synth_tier: int = 1
    max_side: int = 256
    output_dir: str = "runs/default"
    # model
    preset: str = "full"            # full | tiny
    branch_depth: str = ""          # empty: preset default; "off": single-scale
    growth_rate: Optional[int] = None
    block_depth: Optional[int] = None
    initial_channels: Optional[int] = None
    compression: Optional[float] = None
    embed_dim: Optional[int] = None
    hidden_dim: Optional[int] = None
    attn_dim: Optional[int] = None
    coverage_channels: Optional[int] = None
    coverage_kernel_low: Optional[int] = None
    coverage_kernel_high: Optional[int] = None
    dropout: float = 0.2
    # optimisation
    batch_size: int = 8
    max_epochs: int = 100
    adadelta_rho: float = 0.95
    adadelta_eps: float = 1e-6
    clip: float = 100.0
    weight_decay: float = 1e-4
    seed: int = 0
    valid_every: int = 1
    valid_max_len: int = 64
    stop_at_wer: Optional[float] = None
    # decoding
    beam: int = 10
    max_len: int = 200
    ensemble: str = ""              # comma-separated checkpoint paths

    def model_config(self) -> ModelConfig:
        if self.preset not in ("full", "tiny"):
            raise ConfigError(f"preset must be 'full' or 'tiny', got {self.preset!r}")
        base = ModelConfig.tiny() if self.preset == "tiny" else ModelConfig.full()
        over = {k: getattr(self, k) for k in (
            "growth_rate", "block_depth", "initial_channels", "compression", "embed_dim",
            "hidden_dim", "attn_dim", "coverage_channels", "coverage_kernel_low",
            "coverage_kernel_high") if getattr(self, k) is not None}
        if self.branch_depth:
            over["branch_depth"] = parse_branch_depth(self.branch_depth)
        over["dropout"] = self.dropout
        try:
            return base.with_overrides(**over)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        try:
            return TrainConfig(**{k: getattr(self, k) for k in names})
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


def parse_branch_depth(text: str) -> Optional[int]:
    if text.strip().lower() in ("off", "none", "disabled"):
        return None
    try:
        return int(text)
    except ValueError:
        raise ConfigError(f"branch_depth must be an even integer or 'off', got {text!r}") from None


def field_types() -> dict:
    return get_type_hints(RunConfig)


def convert(name: str, raw: str):
    typ = field_types()[name]
    optional = getattr(typ, "__origin__", None) is not None and type(None) in typ.__args__
    if optional:
        if raw.strip().lower() in ("", "none"):
            return None
        typ = next(t for t in typ.__args__ if t is not type(None))
    try:
        if typ is bool:
            return raw.strip().lower() in ("1", "true", "yes", "on")
        return typ(raw.strip())
    except ValueError:
        raise ConfigError(f"{name}: cannot read {raw.strip()!r} as {typ.__name__}") from None


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    known = field_types()
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        key, sep, raw = body.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
        if key not in known:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            values[key] = convert(key, raw)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return RunConfig(**values)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"), str(path))


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {'' if v is None else v}")
    return "\n".join(lines) + "\n"


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    return dataclasses.replace(cfg, **overrides)
