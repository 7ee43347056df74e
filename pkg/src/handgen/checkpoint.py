"""Checkpoint container: named tensors plus JSON metadata in one safetensors file."""
from __future__ import annotations

import json
import struct
from pathlib import Path

import torch
from safetensors import safe_open
from safetensors.torch import save_file

from .codec import ImageCodec
from .config import ExperimentConfig, config_from_dict

FORMAT_VERSION = "1"


class CheckpointError(RuntimeError):
    pass


def _flatten(prefix: str, state: dict) -> dict[str, torch.Tensor]:
    return {f"{prefix}.{k}": v.detach().contiguous().clone() for k, v in state.items()}


def _section(tensors: dict[str, torch.Tensor], prefix: str) -> dict[str, torch.Tensor]:
    p = prefix + "."
    return {k[len(p):]: v for k, v in tensors.items() if k.startswith(p)}


def optimizer_tensors(opt: torch.optim.Optimizer) -> tuple[dict[str, torch.Tensor], list]:
    sd = opt.state_dict()
    tensors = {}
    for idx, st in sd["state"].items():
        for key, value in st.items():
            tensors[f"optim.{idx}.{key}"] = torch.as_tensor(value).detach().clone()
    return tensors, sd["param_groups"]


def restore_optimizer(opt: torch.optim.Optimizer, tensors: dict[str, torch.Tensor], groups: list) -> None:
    state: dict[int, dict] = {}
    for name, value in _section(tensors, "optim").items():
        idx, key = name.split(".", 1)
        state.setdefault(int(idx), {})[key] = value.clone()
    opt.load_state_dict({"state": state, "param_groups": groups})


def _canonicalize_header(path: Path) -> None:
    """Rewrite the JSON header with sorted keys.

    The safetensors writer emits the metadata map in hash order, which varies
    between processes; sorting makes identical content byte-identical. The
    header keeps its length, so the data offsets are unaffected.
    """
    with open(path, "r+b") as f:
        (n,) = struct.unpack("<Q", f.read(8))
        raw = f.read(n)
        header = json.loads(raw)
        canon = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode()
        if len(canon) > n:
            raise CheckpointError(f"cannot canonicalize header of {path}")
        f.seek(8)
        f.write(canon + b" " * (n - len(canon)))


def write(path: str | Path, tensors: dict[str, torch.Tensor], meta: dict) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        header = {k: v if isinstance(v, str) else json.dumps(v, sort_keys=True) for k, v in meta.items()}
        header["format_version"] = FORMAT_VERSION
        save_file(tensors, str(path), metadata=header)
        _canonicalize_header(path)
    except OSError as e:
        raise CheckpointError(f"cannot write checkpoint {path}: {e}") from e
    return path


def read(path: str | Path, kind: str | None = None) -> tuple[dict[str, torch.Tensor], dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with safe_open(str(path), framework="pt") as f:
            meta = dict(f.metadata() or {})
            tensors = {k: f.get_tensor(k) for k in f.keys()}
    except Exception as e:  # safetensors raises its own error types for corrupt files
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    found = meta.get("format_version")
    if found != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version mismatch: expected {FORMAT_VERSION}, found {found}")
    if kind is not None and meta.get("kind") != kind:
        raise CheckpointError(f"expected a {kind} checkpoint, found {meta.get('kind')!r} in {path}")
    return tensors, meta


def meta_config(meta: dict) -> ExperimentConfig:
    return config_from_dict(json.loads(meta["config"]))


def save_codec(path: str | Path, codec: ImageCodec, cfg: ExperimentConfig, extra: dict | None = None) -> Path:
    meta = {"kind": "codec", "config": cfg.to_dict(), "codec_hash": cfg.codec_hash(), **(extra or {})}
    return write(path, _flatten("codec", codec.state_dict()), meta)


def load_codec(path: str | Path, cfg: ExperimentConfig | None = None) -> ImageCodec:
    tensors, meta = read(path, kind="codec")
    saved = meta_config(meta)
    if cfg is not None and saved.codec_hash() != cfg.codec_hash():
        raise CheckpointError(
            f"codec config hash mismatch: expected {cfg.codec_hash()}, found {saved.codec_hash()} in {path}"
        )
    codec = ImageCodec(saved.codec.latent_channels, saved.codec.hidden)
    codec.load_state_dict(_section(tensors, "codec"))
    codec.eval()
    return codec
