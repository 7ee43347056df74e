"""Experiment configuration.

All settings live in nested dataclasses that round-trip through a YAML file.
The file carries a ``version`` key; loading a file with a different version
is an error.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    image_size: int = 64
    crop_margin: float = 0.15
    n_max: int = 16


@dataclass
class CodecConfig:
    latent_channels: int = 4
    hidden: int = 64
    steps: int = 2000
    batch_size: int = 16
    lr: float = 2e-3
    # procedurally generated images mixed into codec training on top of the dataset
    extra_samples: int = 1024
    seed: int = 0


@dataclass
class UNetConfig:
    channels: int = 48
    text_dim: int = 64
    time_dim: int = 128
    groups: int = 8
    # which 4x4 cross-attention layer feeds the attention record: "down" or "up"
    attn_layer: str = "up"


@dataclass
class DiffusionConfig:
    T: int = 100
    beta_min: float = 1e-4
    beta_max: float = 0.02


@dataclass
class TasConfig:
    enabled: bool = True
    gaussian_kernel_size: int = 3
    gaussian_sigma: float = 0.5
    alpha_start: float = 20.0
    alpha_end: float = 10.0
    max_grad_norm: float = 1.0
    apply_at_inference: bool = False
    # "hand": max over hand-related tokens only; "all": max over every unmasked token
    loss_tokens: str = "hand"

    def validate(self) -> None:
        if self.gaussian_kernel_size < 1 or self.gaussian_kernel_size % 2 == 0:
            raise ConfigError(f"gaussian_kernel_size must be odd, got {self.gaussian_kernel_size}")
        if self.gaussian_sigma < 0:
            raise ConfigError("gaussian_sigma must be >= 0")
        if not self.alpha_start >= self.alpha_end > 0:
            raise ConfigError("need alpha_start >= alpha_end > 0")
        if self.max_grad_norm <= 0:
            raise ConfigError("max_grad_norm must be positive")
        if self.loss_tokens not in ("hand", "all"):
            raise ConfigError(f"loss_tokens must be 'hand' or 'all', got {self.loss_tokens!r}")


@dataclass
class TrainConfig:
    seed: int = 0
    batch_size: int = 16
    # text-conditioned pretraining of the frozen denoiser before guidance training
    base_steps: int = 3000
    base_lr: float = 1e-3
    steps: int = 5000
    lr: float = 1e-4
    lambda_g: float = 1.0
    lambda_l: float = 1.0
    checkpoint_every: int = 1000
    log_every: int = 10

    def validate(self) -> None:
        if self.lambda_g < 0 or self.lambda_l < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.lambda_g == 0 and self.lambda_l == 0:
            raise ConfigError("lambda_g and lambda_l cannot both be zero")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


@dataclass
class ExperimentConfig:
    data_dir: str = "dataset"
    out_dir: str = "runs/default"
    codec_ckpt: str = ""
    data: DataConfig = field(default_factory=DataConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    unet: UNetConfig = field(default_factory=UNetConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    tas: TasConfig = field(default_factory=TasConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> None:
        if self.data.image_size % 8:
            raise ConfigError("image_size must be divisible by 8")
        if self.unet.attn_layer not in ("down", "up"):
            raise ConfigError(f"attn_layer must be 'down' or 'up', got {self.unet.attn_layer!r}")
        self.tas.validate()
        self.train.validate()

    def to_dict(self) -> dict[str, Any]:
        return {"version": CONFIG_VERSION, **dataclasses.asdict(self)}

    def model_hash(self) -> str:
        """Hash of everything that shapes the model and its training trajectory.

        Run length, logging cadence and paths are excluded so that a run can be
        resumed with a larger step budget.
        """
        d = dataclasses.asdict(self)
        for k in ("data_dir", "out_dir", "codec_ckpt", "codec"):
            d.pop(k)
        for k in ("steps", "checkpoint_every", "log_every"):
            d["train"].pop(k)
        d["tas"].pop("apply_at_inference")
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def codec_hash(self) -> str:
        d = {"data": dataclasses.asdict(self.data), "codec": dataclasses.asdict(self.codec)}
        d["codec"].pop("steps")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _build(cls, raw: dict[str, Any], where: str):
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(raw) - set(known)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    kwargs = {}
    for name, value in raw.items():
        sub = _SECTIONS.get(name) if cls is ExperimentConfig else None
        if sub is not None:
            if not isinstance(value, dict):
                raise ConfigError(f"section {name!r} must be a mapping")
            kwargs[name] = _build(sub, value, name)
        else:
            kwargs[name] = value
    return cls(**kwargs)


_SECTIONS = {
    "data": DataConfig,
    "codec": CodecConfig,
    "unet": UNetConfig,
    "diffusion": DiffusionConfig,
    "tas": TasConfig,
    "train": TrainConfig,
}


def config_from_dict(raw: dict[str, Any]) -> ExperimentConfig:
    raw = dict(raw)
    version = raw.pop("version", None)
    if version != CONFIG_VERSION:
        raise ConfigError(f"config version mismatch: expected {CONFIG_VERSION}, found {version}")
    cfg = _build(ExperimentConfig, raw, "config")
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} is not a mapping")
    cfg = config_from_dict(raw)
    # relative paths in the file are taken relative to the file itself
    base = path.parent
    for attr in ("data_dir", "out_dir", "codec_ckpt"):
        value = getattr(cfg, attr)
        if value and not Path(value).is_absolute():
            setattr(cfg, attr, str(base / value))
    return cfg


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
