"""Ancestral DDPM sampling through the guided denoiser."""
from __future__ import annotations

import math

import numpy as np
import torch

from .data.crop import BBox, crop_local
from .diffusion import NoiseSchedule, ScheduleError
from .model import HandDiffusion
from .tas import RefinedAttention, refine_attention, update_latents


def ddpm_step(x_t: torch.Tensor, eps_pred: torch.Tensor, t: int, schedule: NoiseSchedule, rng: torch.Generator | None) -> torch.Tensor:
    """One reverse step from ``x_t`` (after ``t`` noising steps, ``1 <= t <= T``) to ``x_{t-1}``.

    Posterior mean from the noise prediction plus ``sigma_t * z``; no noise is
    added at ``t == 1`` or when ``rng`` is None.
    """
    if not 1 <= t <= schedule.T:
        raise ScheduleError(f"reverse step needs 1 <= t <= {schedule.T}, got {t}")
    i = t - 1
    beta = schedule.betas[i].item()
    alpha = schedule.alphas[i].item()
    ab = schedule.alpha_bar[i].item()
    ab_prev = schedule.alpha_bar[i - 1].item() if i > 0 else 1.0
    mean = (x_t - beta / math.sqrt(1.0 - ab) * eps_pred) / math.sqrt(alpha)
    if t == 1 or rng is None:
        return mean
    var = beta * (1.0 - ab_prev) / (1.0 - ab)
    z = torch.randn(x_t.shape, generator=rng, dtype=x_t.dtype)
    return mean + math.sqrt(var) * z


def _conditions(model: HandDiffusion, mesh_global: np.ndarray, bbox: BBox):
    size = model.cfg.data.image_size
    mesh_global = np.asarray(mesh_global, dtype=np.float32)
    if mesh_global.shape != (3, size, size):
        raise ValueError(f"mesh image must be 3x{size}x{size}, got {mesh_global.shape}")
    mesh_local, _ = crop_local(mesh_global, bbox, size, model.cfg.data.crop_margin)
    return torch.from_numpy(mesh_global)[None], torch.from_numpy(mesh_local)[None]


def sample_latents(
    model: HandDiffusion,
    mesh_global: np.ndarray,
    bbox: BBox,
    prompt: str,
    steps: int,
    seed: int,
    tas: bool = False,
    zero_guidance: bool = False,
    stop_at: int | None = None,
):
    """Run the reverse chain; returns ``(x_global, x_local, text, last_net_t)``.

    With ``stop_at`` the chain halts once the network timestep drops to it,
    returning the latents that were fed to the network at that step.
    """
    sched = model.schedule.respace(steps)
    mesh = _conditions(model, mesh_global, bbox)
    gen = torch.Generator().manual_seed(seed)
    lat = model.cfg.data.image_size // 8
    shape = (1, model.codec.latent_channels, lat, lat)
    xg = torch.randn(shape, generator=gen)
    xl = torch.randn(shape, generator=gen)
    with torch.no_grad():
        text = model.embed([prompt])
    t_net = None
    for i in reversed(range(steps)):
        t_net = sched.timesteps[i].reshape(1)
        if stop_at is not None and t_net.item() <= stop_at:
            break
        if tas and text.hand_token_indices[0]:
            xg, xl = update_latents((xg, xl), text, t_net, model.base, model.cfg.tas, model.schedule.T).x_hat
        with torch.no_grad():
            if zero_guidance:
                eps_g, eps_l = model.pair.base_forward((xg, xl), text, t_net)
            else:
                eps_g, eps_l = model.pair((xg, xl), mesh, text, t_net)
        xg = ddpm_step(xg, eps_g, i + 1, sched, gen)
        xl = ddpm_step(xl, eps_l, i + 1, sched, gen)
    return xg, xl, text, t_net


def generate(
    model: HandDiffusion,
    mesh_global: np.ndarray,
    bbox: BBox,
    prompt: str,
    steps: int | None = None,
    seed: int = 0,
    tas: bool | None = None,
    zero_guidance: bool = False,
) -> np.ndarray:
    """3xSxS image in [0, 1] conditioned on the mesh image, its hand box and a prompt.

    The global branch is decoded; the local branch runs alongside on the crop.
    """
    steps = model.schedule.T if steps is None else steps
    if steps > model.schedule.T:
        raise ScheduleError(f"steps={steps} exceeds T={model.schedule.T}")
    tas = model.cfg.tas.apply_at_inference if tas is None else tas
    xg, _, _, _ = sample_latents(model, mesh_global, bbox, prompt, steps, seed, tas, zero_guidance)
    with torch.no_grad():
        return model.codec.decode(xg)[0].numpy()


def attention_at(
    model: HandDiffusion,
    mesh_global: np.ndarray,
    bbox: BBox,
    prompt: str,
    t0: int,
    seed: int = 0,
    steps: int | None = None,
) -> tuple[RefinedAttention, list[str]]:
    """Refined cross-attention of the global latent once sampling reaches timestep ``t0``."""
    steps = model.schedule.T if steps is None else steps
    if not 0 <= t0 < model.schedule.T:
        raise ScheduleError(f"t0 must be in [0, {model.schedule.T}), got {t0}")
    xg, _, text, t_net = sample_latents(model, mesh_global, bbox, prompt, steps, seed, stop_at=t0)
    with torch.no_grad():
        out = model.base(xg, t_net, text, capture_attention=True)
    refined = refine_attention(out.attention[0], text.hand_token_indices, model.cfg.tas, text.mask, strict=False)
    return refined, model.tokenize([prompt])[0].tokens
