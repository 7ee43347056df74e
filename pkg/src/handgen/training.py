"""Training: codec fitting, base denoiser pretraining and joint guided training.

The guided phase follows the pipeline order: encode, noise, text-attention
update, residual noise, guided prediction for both branches, weighted sum of
the two branch losses, and an optimizer step on the guidance module only.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import checkpoint as ckpt
from .codec import ImageCodec, TextEmbedding, TextEncoder, TrainingDiverged, train_codec
from .config import ExperimentConfig
from .data.dataset import Sample, load_dataset, make_sample, synth_record
from .diffusion import q_sample
from .model import HandDiffusion
from .tas import residual_noise, tas_objective, update_latents
from .unet import UNet
from .vas import GuidancePair, checksum

log = logging.getLogger(__name__)

LOG_FIELDS = ["step", "L_g", "L_l", "L_total", "L_tas"]


class FrozenWeightsMutated(AssertionError):
    pass


# ---------------------------------------------------------------- codec


def codec_images(samples: list[Sample], cfg: ExperimentConfig) -> torch.Tensor:
    """Global and local RGB images of the dataset plus procedurally drawn extras."""
    imgs = [im for s in samples for im in (s.rgb_global, s.rgb_local)]
    for i in range(cfg.codec.extra_samples):
        rec, rgb, mesh = synth_record(i, 1_000_003 + cfg.codec.seed, cfg.data.image_size)
        s = make_sample(rec, rgb, mesh, cfg.data.crop_margin)
        imgs += [s.rgb_global, s.rgb_local]
    return torch.from_numpy(np.stack(imgs)).float()


def run_codec_training(cfg: ExperimentConfig, out_path: str | Path | None = None) -> tuple[ImageCodec, Path]:
    samples = load_dataset(cfg.data_dir, cfg.data.crop_margin)
    codec, result = train_codec(codec_images(samples, cfg), cfg.codec)
    out = Path(out_path or cfg.codec_ckpt or Path(cfg.out_dir) / "codec.safetensors")
    ckpt.save_codec(
        out, codec, cfg, {"steps": cfg.codec.steps, "initial_loss": result.initial_loss, "final_loss": result.final_loss}
    )
    log.info("codec loss %.5f -> %.5f, saved %s", result.initial_loss, result.final_loss, out)
    return codec, out


# ---------------------------------------------------------------- data


@dataclass
class TrainingData:
    """Dataset tensors prepared once: latents, condition images, tokenized prompts."""

    x0_g: torch.Tensor
    x0_l: torch.Tensor
    mesh_g: torch.Tensor
    mesh_l: torch.Tensor
    prompts: list

    def __len__(self) -> int:
        return len(self.x0_g)


def prepare_data(model: HandDiffusion, samples: list[Sample]) -> TrainingData:
    def stack(attr):
        return torch.from_numpy(np.stack([getattr(s, attr) for s in samples])).float()

    with torch.no_grad():
        x0_g = model.codec.encode(stack("rgb_global"))
        x0_l = model.codec.encode(stack("rgb_local"))
    return TrainingData(x0_g, x0_l, stack("mesh_global"), stack("mesh_local"), model.tokenize([s.prompt for s in samples]))


@dataclass
class Batch:
    x0: tuple[torch.Tensor, torch.Tensor]
    mesh: tuple[torch.Tensor, torch.Tensor]
    text: TextEmbedding
    t: torch.Tensor
    eps: tuple[torch.Tensor, torch.Tensor]


def draw_batch(data: TrainingData, text: TextEncoder | TextEmbedding, batch_size: int, T: int, gen: torch.Generator) -> Batch:
    """Sample indices, timesteps and noise, all from ``gen`` in a fixed order."""
    idx = torch.randint(len(data), (batch_size,), generator=gen)
    t = torch.randint(T, (batch_size,), generator=gen)
    eps_g = torch.randn(data.x0_g[idx].shape, generator=gen)
    eps_l = torch.randn(data.x0_l[idx].shape, generator=gen)
    emb = text.select(idx) if isinstance(text, TextEmbedding) else text([data.prompts[i] for i in idx.tolist()])
    return Batch((data.x0_g[idx], data.x0_l[idx]), (data.mesh_g[idx], data.mesh_l[idx]), emb, t, (eps_g, eps_l))


# ---------------------------------------------------------------- steps


def base_step(model: HandDiffusion, batch: Batch, opt: torch.optim.Optimizer) -> dict[str, float]:
    """Plain text-conditioned noise-prediction step on the base denoiser (both branches)."""
    cfg = model.cfg.train
    xt = tuple(q_sample(x, batch.t, e, model.schedule) for x, e in zip(batch.x0, batch.eps))
    x = torch.cat(xt)
    pred = model.base(x, torch.cat([batch.t, batch.t]), batch.text.repeat(2)).eps_pred
    n = batch.t.shape[0]
    l_g = F.mse_loss(pred[:n], batch.eps[0])
    l_l = F.mse_loss(pred[n:], batch.eps[1])
    loss = cfg.lambda_g * l_g + cfg.lambda_l * l_l
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"base loss became {loss.item()}")
    opt.zero_grad()
    loss.backward()
    opt.step()
    return {"L_g": l_g.item(), "L_l": l_l.item(), "L_total": loss.item(), "L_tas": 0.0}


@dataclass
class StepOutputs:
    losses: dict[str, float]
    x_hat: tuple[torch.Tensor, torch.Tensor]
    eps_hat: tuple[torch.Tensor, torch.Tensor]


def training_step(
    model: HandDiffusion, batch: Batch, opt: torch.optim.Optimizer | None, measure_tas: bool = True
) -> StepOutputs:
    """One guided step. With ``opt=None`` the losses are computed but nothing is updated.

    With TAS disabled, L_tas is still measured (no gradient) for the log unless
    ``measure_tas`` is False, in which case it is reported as NaN.
    """
    cfg = model.cfg
    sched = model.schedule
    x_t = tuple(q_sample(x, batch.t, e, sched) for x, e in zip(batch.x0, batch.eps))

    if cfg.tas.enabled:
        res = update_latents(x_t, batch.text, batch.t, model.base, cfg.tas, sched.T)
        x_hat = res.x_hat
        eps_hat = tuple(
            residual_noise(x0, xh, batch.t, sched, xt, e) for x0, xh, xt, e in zip(batch.x0, x_hat, x_t, batch.eps)
        )
        l_tas = res.loss.mean().item()
    else:
        x_hat, eps_hat = x_t, batch.eps
        l_tas = float("nan")
    if not cfg.tas.enabled and measure_tas:
        with torch.no_grad():
            t2 = torch.cat([batch.t, batch.t])
            l_tas = tas_objective(model.base, torch.cat(x_t), t2, batch.text.repeat(2), cfg.tas).mean().item()

    pred_g, pred_l = model.pair(x_hat, batch.mesh, batch.text, batch.t)
    l_g = F.mse_loss(pred_g, eps_hat[0])
    l_l = F.mse_loss(pred_l, eps_hat[1])
    loss = cfg.train.lambda_g * l_g + cfg.train.lambda_l * l_l
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"guided loss became {loss.item()}")
    if opt is not None:
        opt.zero_grad()
        loss.backward()
        opt.step()
    losses = {"L_g": l_g.item(), "L_l": l_l.item(), "L_total": loss.item(), "L_tas": l_tas}
    return StepOutputs(losses, x_hat, eps_hat)


# ---------------------------------------------------------------- state


@dataclass
class TrainState:
    model: HandDiffusion
    opt: torch.optim.Optimizer | None
    gen: torch.Generator
    phase: str  # "base" or "guidance"
    step: int
    base_checksum: str = ""


def guidance_optimizer(pair: GuidancePair, lr: float) -> torch.optim.Optimizer:
    return torch.optim.Adam(pair.trainable_parameters(), lr=lr)


def base_hash(cfg: ExperimentConfig) -> str:
    """Hash of the settings that shape the pretrained base denoiser."""
    import hashlib

    d = {
        "data": cfg.data.__dict__,
        "unet": cfg.unet.__dict__,
        "diffusion": cfg.diffusion.__dict__,
        "train": {k: getattr(cfg.train, k) for k in ("seed", "batch_size", "base_steps", "base_lr", "lambda_g", "lambda_l")},
    }
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def save_checkpoint(path: str | Path, state: TrainState) -> Path:
    m = state.model
    tensors = {}
    tensors.update(ckpt._flatten("codec", m.codec.state_dict()))
    tensors.update(ckpt._flatten("text", m.text.state_dict()))
    tensors.update(ckpt._flatten("theta_d", m.pair.theta_d.state_dict()))
    groups = []
    if state.phase == "guidance":
        tensors.update(ckpt._flatten("theta_g", m.pair.theta_g.state_dict()))
        opt_t, groups = ckpt.optimizer_tensors(state.opt)
        tensors.update(opt_t)
    tensors["rng.train"] = state.gen.get_state().clone()
    meta = {
        "kind": "model",
        "config": m.cfg.to_dict(),
        "config_hash": m.cfg.model_hash(),
        "base_hash": base_hash(m.cfg),
        "phase": state.phase,
        "step": str(state.step),
        "optim_groups": groups,
        "base_checksum": state.base_checksum,
        "betas": m.schedule.betas.tolist(),
    }
    return ckpt.write(path, tensors, meta)


def load_checkpoint(path: str | Path, cfg: ExperimentConfig | None = None) -> TrainState:
    """Rebuild the full training state. ``cfg`` (if given) must hash-match the checkpoint."""
    tensors, meta = ckpt.read(path, kind="model")
    saved = ckpt.meta_config(meta)
    phase = meta["phase"]
    if cfg is not None:
        if phase == "guidance" and cfg.model_hash() != meta["config_hash"]:
            raise ckpt.CheckpointError(
                f"config hash mismatch: expected {cfg.model_hash()}, found {meta['config_hash']} in {path}"
            )
        if phase == "base" and base_hash(cfg) != meta["base_hash"]:
            raise ckpt.CheckpointError(
                f"base config hash mismatch: expected {base_hash(cfg)}, found {meta['base_hash']} in {path}"
            )
    use = cfg or saved
    codec = ImageCodec(saved.codec.latent_channels, saved.codec.hidden)
    codec.load_state_dict(ckpt._section(tensors, "codec"))
    codec.eval()
    model = HandDiffusion.create(use, codec)
    model.text.load_state_dict(ckpt._section(tensors, "text"))
    model.pair.theta_d.load_state_dict(ckpt._section(tensors, "theta_d"))
    model.text.requires_grad_(False)
    model.rebuild_guidance()
    if json.loads(meta["betas"]) != model.schedule.betas.tolist():
        raise ckpt.CheckpointError("noise schedule in checkpoint differs from the configured one")
    gen = torch.Generator()
    gen.set_state(tensors["rng.train"])
    state = TrainState(model, None, gen, phase, int(meta["step"]), meta.get("base_checksum", ""))
    if phase == "guidance":
        model.pair.theta_g.load_state_dict(ckpt._section(tensors, "theta_g"))
        state.opt = guidance_optimizer(model.pair, use.train.lr)
        ckpt.restore_optimizer(state.opt, tensors, json.loads(meta["optim_groups"]))
    return state


# ---------------------------------------------------------------- loops


class LossLog:
    def __init__(self, path: Path | None, append: bool = False):
        self.rows: list[dict] = []
        self.path = path
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            keep = []
            if append and path.exists():
                keep = path.read_text().splitlines()
            with open(path, "w", newline="") as f:
                if keep:
                    f.write("\n".join(keep) + "\n")
                else:
                    csv.writer(f).writerow(LOG_FIELDS)

    def truncate_after(self, step: int) -> None:
        """Drop rows logged after ``step`` (used when resuming from an earlier checkpoint)."""
        if self.path is None or not self.path.exists():
            return
        lines = self.path.read_text().splitlines()
        kept = [lines[0]] + [ln for ln in lines[1:] if int(ln.split(",")[0]) <= step]
        self.path.write_text("\n".join(kept) + "\n")

    def add(self, step: int, losses: dict[str, float]) -> None:
        row = {"step": step, **losses}
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a", newline="") as f:
                csv.writer(f).writerow([step] + [f"{losses[k]:.8g}" for k in LOG_FIELDS[1:]])


def pretrain_base(model: HandDiffusion, data: TrainingData, gen: torch.Generator, log_path: Path | None = None) -> list[dict]:
    cfg = model.cfg.train
    params = list(model.base.parameters()) + list(model.text.parameters())
    for p in params:
        p.requires_grad_(True)
    opt = torch.optim.Adam(params, lr=cfg.base_lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(cfg.base_steps, 1), eta_min=cfg.base_lr * 0.05)
    losslog = LossLog(log_path)
    for step in range(1, cfg.base_steps + 1):
        batch = draw_batch(data, model.text, cfg.batch_size, model.schedule.T, gen)
        losses = base_step(model, batch, opt)
        sched.step()
        if step % cfg.log_every == 0 or step == cfg.base_steps:
            losslog.add(step, losses)
        if step % 500 == 0:
            log.info("base step %d loss %.4f", step, losses["L_total"])
    for p in params:
        p.requires_grad_(False)
    return losslog.rows


def train(
    cfg: ExperimentConfig,
    samples: list[Sample] | None = None,
    resume: str | Path | None = None,
    codec: ImageCodec | None = None,
    stop_at: int | None = None,
) -> TrainState:
    """Full training run into ``cfg.out_dir``.

    Phase 1 pretrains the base denoiser and text table (skipped when resuming);
    phase 2 freezes them and trains the guidance module for ``cfg.train.steps``.
    ``stop_at`` ends phase 2 early at that step (checkpoint written).
    """
    out = Path(cfg.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ckpt.CheckpointError(f"cannot create output directory {out}: {e}") from e
    samples = samples if samples is not None else load_dataset(cfg.data_dir, cfg.data.crop_margin)

    if resume is not None:
        state = load_checkpoint(resume, cfg)
        model = state.model
        data = prepare_data(model, samples)
    else:
        if codec is None:
            if not cfg.codec_ckpt:
                raise ckpt.CheckpointError("no codec checkpoint configured (codec_ckpt)")
            codec = ckpt.load_codec(cfg.codec_ckpt, cfg)
        model = HandDiffusion.create(cfg, codec)
        data = prepare_data(model, samples)
        gen = torch.Generator().manual_seed(cfg.train.seed)
        pretrain_base(model, data, gen, out / "base_loss.csv")
        model.rebuild_guidance()
        state = TrainState(model, None, gen, "base", cfg.train.base_steps)
        save_checkpoint(out / "base.safetensors", state)

    if state.phase == "base":
        state.phase = "guidance"
        state.step = 0
        state.opt = guidance_optimizer(model.pair, cfg.train.lr)
        state.base_checksum = checksum(model.base)
        losslog = LossLog(out / "loss.csv")
    else:
        losslog = LossLog(out / "loss.csv", append=True)
        losslog.truncate_after(state.step)
    if not state.base_checksum:
        state.base_checksum = checksum(model.base)
    if checksum(model.base) != state.base_checksum:
        raise FrozenWeightsMutated("base denoiser weights differ from the recorded checksum")

    with torch.no_grad():
        text_cache = model.text([*data.prompts])
    last = cfg.train.steps if stop_at is None else min(stop_at, cfg.train.steps)
    while state.step < last:
        batch = draw_batch(data, text_cache, cfg.train.batch_size, model.schedule.T, state.gen)
        logged = (state.step + 1) % cfg.train.log_every == 0 or state.step + 1 == last
        losses = training_step(model, batch, state.opt, measure_tas=logged).losses
        state.step += 1
        if logged:
            losslog.add(state.step, losses)
        if state.step % 500 == 0:
            log.info("step %d L=%.4f L_tas=%.4f", state.step, losses["L_total"], losses["L_tas"])
        if state.step % cfg.train.checkpoint_every == 0 or state.step == last:
            if checksum(model.base) != state.base_checksum:
                raise FrozenWeightsMutated(f"base denoiser weights changed by step {state.step}")
            save_checkpoint(out / f"step_{state.step:06d}.safetensors", state)
    save_checkpoint(out / "last.safetensors", state)
    return state
