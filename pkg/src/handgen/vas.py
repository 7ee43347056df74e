"""Visual-attention stage: a trainable, zero-gated copy of the frozen denoiser.

The guidance module sees the noisy latent plus an encoded mesh image. Its
output taps each pass through a zero-initialized 1x1 convolution and are summed
into a latent-shaped guidance feature, which is added to the frozen denoiser's
prediction. Global and local branches run through the same weights as two
halves of one batch.
"""
from __future__ import annotations

import copy
import hashlib

import torch
import torch.nn as nn
import torch.nn.functional as F

from .codec import TextEmbedding
from .unet import UNet


class ZeroConv(nn.Conv2d):
    """1x1 convolution whose weight and bias start at exactly zero."""

    def __init__(self, cin: int, cout: int):
        super().__init__(cin, cout, 1)
        nn.init.zeros_(self.weight)
        nn.init.zeros_(self.bias)


class ConditionEncoder(nn.Module):
    """Strided conv stack from a 3xSxS mesh image to C x S/8 x S/8 features."""

    def __init__(self, out_channels: int, hidden: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, hidden // 2, 4, 2, 1), nn.SiLU(),
            nn.Conv2d(hidden // 2, hidden, 4, 2, 1), nn.SiLU(),
            nn.Conv2d(hidden, hidden, 4, 2, 1), nn.SiLU(),
            nn.Conv2d(hidden, hidden, 3, padding=1), nn.SiLU(),
        )
        self.zero = ZeroConv(hidden, out_channels)

    def forward(self, mesh: torch.Tensor) -> torch.Tensor:
        return self.zero(self.net(mesh * 2.0 - 1.0))


class GuidanceModule(nn.Module):
    def __init__(self, base: UNet):
        super().__init__()
        self.body = copy.deepcopy(base)
        for p in self.body.parameters():
            p.requires_grad_(True)
        self.cond = ConditionEncoder(base.cfg.channels)
        self.taps = nn.ModuleList(ZeroConv(c, base.conv_out.out_channels) for c in base.tap_channels())

    def zero_convs(self) -> list[ZeroConv]:
        return [m for m in self.modules() if isinstance(m, ZeroConv)]

    def forward(self, x: torch.Tensor, mesh: torch.Tensor, t, text: TextEmbedding) -> torch.Tensor:
        cond = self.cond(mesh)
        if cond.shape[-2:] != x.shape[-2:]:
            raise ValueError(
                f"mesh condition encodes to {tuple(cond.shape[-2:])}, latent is {tuple(x.shape[-2:])}"
            )
        out = self.body(x, t, text, entry_residual=cond, return_taps=True)
        size = x.shape[-2:]
        y = torch.zeros_like(x)
        for zero, tap in zip(self.taps, out.taps):
            g = zero(tap)
            if g.shape[-2:] != size:
                g = F.interpolate(g, size=size, mode="nearest")
            y = y + g
        return y


class GuidancePair(nn.Module):
    """Frozen denoiser ``theta_d`` plus trainable guidance module ``theta_g``."""

    def __init__(self, base: UNet):
        super().__init__()
        self.theta_d = base
        for p in self.theta_d.parameters():
            p.requires_grad_(False)
        self.theta_g = GuidanceModule(base)

    def trainable_parameters(self):
        return [p for p in self.theta_g.parameters() if p.requires_grad]

    def guidance_forward(self, x_hat, mesh, text: TextEmbedding, t) -> tuple[torch.Tensor, torch.Tensor]:
        """(Y_g^G, Y_g^L) from (global, local) latents and mesh images, shared weights."""
        x, m, tt, tx, n = _stack_pair(x_hat, mesh, t, text)
        y = self.theta_g(x, m, tt, tx)
        return y[:n], y[n:]

    def base_forward(self, x_hat, text: TextEmbedding, t) -> tuple[torch.Tensor, torch.Tensor]:
        x, _, tt, tx, n = _stack_pair(x_hat, None, t, text)
        y = self.theta_d(x, tt, tx).eps_pred
        return y[:n], y[n:]

    def diffusion_forward(self, x_hat, text: TextEmbedding, t, y_g) -> tuple[torch.Tensor, torch.Tensor]:
        """Frozen denoiser output plus the guidance feature, per branch."""
        base = self.base_forward(x_hat, text, t)
        for b, g in zip(base, y_g):
            if b.shape != g.shape:
                raise ValueError(f"guidance shape {tuple(g.shape)} != denoiser output {tuple(b.shape)}")
        return base[0] + y_g[0], base[1] + y_g[1]

    def forward(self, x_hat, mesh, text: TextEmbedding, t) -> tuple[torch.Tensor, torch.Tensor]:
        return self.diffusion_forward(x_hat, text, t, self.guidance_forward(x_hat, mesh, text, t))


def _stack_pair(x_pair, mesh_pair, t, text: TextEmbedding):
    xg, xl = x_pair
    if xg.shape != xl.shape:
        raise ValueError(f"global latent {tuple(xg.shape)} and local latent {tuple(xl.shape)} differ")
    n = xg.shape[0]
    t = torch.as_tensor(t).reshape(-1).expand(n)
    mesh = None if mesh_pair is None else torch.cat(list(mesh_pair))
    return torch.cat([xg, xl]), mesh, torch.cat([t, t]), text.repeat(2), n


def build_guidance(theta_d: UNet) -> GuidancePair:
    return GuidancePair(theta_d)


def checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().contiguous().numpy().tobytes())
    return h.hexdigest()
