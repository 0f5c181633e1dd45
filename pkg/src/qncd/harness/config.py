"""Experiment configuration: a TOML file with fixed sections and no unknown keys."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import tomli
import tomli_w


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    weights: list[float] = field(default_factory=lambda: [0.5, 0.5])
    means: list[list[float]] = field(default_factory=lambda: [[-2.0, 0.0], [2.0, 0.0]])
    stds: list[float] = field(default_factory=lambda: [0.3, 0.3])


@dataclass
class ScheduleConfig:
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    variance: str = "fixed_small"


@dataclass
class ModelConfig:
    hidden: int = 64
    emb_dim: int = 32
    n_blocks: int = 3
    styles: list[str] = field(default_factory=lambda: ["scale_shift"] * 3)
    groups: int = 4
    init_seed: int = 0
    # load weights from this container instead of training (empty: train)
    weights_path: str = ""
    inject_factor: float = 8.0
    inject_channels: int = 4
    inject_seed: int = 0


@dataclass
class TrainConfig:
    lr: float = 0.02
    batch_size: int = 256
    iterations: int = 4000
    seed: int = 0


@dataclass
class QuantConfig:
    bits: str = "W8A8"
    calib_samples: int = 512
    grid_size: int = 100
    exempt_emb_out: bool = False


@dataclass
class IntraConfig:
    enabled: bool = True


@dataclass
class InterConfig:
    num_stages: int = 4
    mode: str = "mean_only"


@dataclass
class SamplerConfig:
    kind: str = "ddpm"


@dataclass
class RunConfig:
    batch_size: int = 2048
    n_samples: int = 2048
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    swd_projections: int = 128
    probe_size: int = 256
    out_dir: str = "out"


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    quant: QuantConfig = field(default_factory=QuantConfig)
    intra: IntraConfig = field(default_factory=IntraConfig)
    inter: InterConfig = field(default_factory=InterConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def hash(self) -> str:
        """Digest of everything except the output location."""
        d = self.to_dict()
        d["run"].pop("out_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]

    def model_hash(self) -> str:
        d = {k: self.to_dict()[k] for k in ("data", "schedule", "model", "train")}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]

    def replace(self, **sections) -> "ExperimentConfig":
        """Copy with per-section overrides, e.g. ``replace(quant={"bits": "W4A6"})``."""
        d = self.to_dict()
        for sec, vals in sections.items():
            if sec not in d:
                raise ConfigError(f"unknown section [{sec}]")
            d[sec].update(vals)
        return from_dict(d)


def _coerce(name: str, value: Any, default: Any) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{name}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{name}: expected a list, got {value!r}")
        return value
    return value


def from_dict(d: dict) -> ExperimentConfig:
    sections = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(d) - set(sections)
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")
    defaults = ExperimentConfig()
    built = {}
    for sec in sections:
        default_sec = getattr(defaults, sec)
        vals = d.get(sec, {})
        if not isinstance(vals, dict):
            raise ConfigError(f"[{sec}] must be a table")
        known = {f.name for f in dataclasses.fields(default_sec)}
        bad = set(vals) - known
        if bad:
            raise ConfigError(f"unknown key(s) in [{sec}]: {', '.join(sorted(bad))}")
        kw = {k: _coerce(f"{sec}.{k}", v, getattr(default_sec, k)) for k, v in vals.items()}
        built[sec] = dataclasses.replace(default_sec, **kw)
    cfg = ExperimentConfig(**built)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    from ..inter import CorrectionMode
    from ..quantizer import BitConfig

    try:
        BitConfig.parse(cfg.quant.bits)
        CorrectionMode(cfg.inter.mode)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    if cfg.sampler.kind != "ddpm" and not cfg.sampler.kind.startswith("ddim:"):
        raise ConfigError(f"sampler.kind must be 'ddpm' or 'ddim:k', got {cfg.sampler.kind!r}")
    if len(cfg.model.styles) != cfg.model.n_blocks:
        raise ConfigError("model.styles needs one entry per block")
    if cfg.run.n_samples % cfg.run.batch_size:
        raise ConfigError("run.n_samples must be a multiple of run.batch_size")
    if not cfg.run.seeds:
        raise ConfigError("run.seeds is empty")
    if cfg.quant.calib_samples < 1:
        raise ConfigError("quant.calib_samples must be >= 1")


def loads(text: str) -> ExperimentConfig:
    try:
        d = tomli.loads(text)
    except tomli.TOMLDecodeError as e:
        raise ConfigError(f"config parse error: {e}") from e
    return from_dict(d)


def load(path: str | Path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return loads(p.read_text(encoding="utf-8"))
