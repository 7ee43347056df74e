"""Small text-conditioned U-Net denoiser.

Three resolutions (latent size S/8, then /2, /4); cross-attention to the text
tokens only at the middle resolution, on the way down and on the way up.
Either of those two layers can be read out as an ``AttentionRecord`` holding
the raw logits ``Q K^T / sqrt(d)`` with padding tokens set to ``-inf``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .codec import TextEmbedding, sinusoidal_embedding
from .config import UNetConfig


@dataclass
class AttentionRecord:
    """Raw cross-attention logits, BxHxWxN, from one layer at one timestep."""

    A: torch.Tensor
    layer_id: str
    t: torch.Tensor

    def probabilities(self) -> torch.Tensor:
        return torch.softmax(self.A, dim=-1)


@dataclass
class DenoiserOutput:
    eps_pred: torch.Tensor
    attention: list[AttentionRecord] = field(default_factory=list)
    taps: list[torch.Tensor] = field(default_factory=list)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, time_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.time = nn.Linear(time_dim, cout)
        self.norm2 = nn.GroupNorm(groups, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class CrossAttention(nn.Module):
    """Single-head cross-attention from spatial features to text tokens."""

    def __init__(self, channels: int, text_dim: int, groups: int):
        super().__init__()
        self.norm = nn.GroupNorm(groups, channels)
        self.q = nn.Linear(channels, channels, bias=False)
        self.k = nn.Linear(text_dim, channels, bias=False)
        self.v = nn.Linear(text_dim, channels, bias=False)
        self.out = nn.Linear(channels, channels)
        self.scale = 1.0 / math.sqrt(channels)

    def forward(self, x: torch.Tensor, text: TextEmbedding) -> tuple[torch.Tensor, torch.Tensor]:
        b, c, h, w = x.shape
        q = self.q(self.norm(x).flatten(2).transpose(1, 2))  # B x HW x C
        k = self.k(text.K)
        v = self.v(text.K)
        logits = torch.einsum("bqc,bnc->bqn", q, k) * self.scale
        logits = logits.masked_fill(~text.mask[:, None, :], float("-inf"))
        attn = torch.softmax(logits, dim=-1)
        out = self.out(torch.einsum("bqn,bnc->bqc", attn, v))
        return x + out.transpose(1, 2).reshape(b, c, h, w), logits.reshape(b, h, w, -1)


class UNet(nn.Module):
    def __init__(self, cfg: UNetConfig, latent_channels: int = 4):
        super().__init__()
        c, td, g = cfg.channels, cfg.time_dim, cfg.groups
        self.cfg = cfg
        self.time_mlp = nn.Sequential(nn.Linear(td, td), nn.SiLU(), nn.Linear(td, td))
        self.conv_in = nn.Conv2d(latent_channels, c, 3, padding=1)
        self.down0 = ResBlock(c, c, td, g)
        self.ds0 = nn.Conv2d(c, c, 3, stride=2, padding=1)
        self.down1 = ResBlock(c, 2 * c, td, g)
        self.attn_down = CrossAttention(2 * c, cfg.text_dim, g)
        self.ds1 = nn.Conv2d(2 * c, 2 * c, 3, stride=2, padding=1)
        self.mid1 = ResBlock(2 * c, 2 * c, td, g)
        self.mid2 = ResBlock(2 * c, 2 * c, td, g)
        self.us1 = nn.Conv2d(2 * c, 2 * c, 3, padding=1)
        self.up1 = ResBlock(4 * c, 2 * c, td, g)
        self.attn_up = CrossAttention(2 * c, cfg.text_dim, g)
        self.us0 = nn.Conv2d(2 * c, c, 3, padding=1)
        self.up0 = ResBlock(2 * c, c, td, g)
        self.norm_out = nn.GroupNorm(g, c)
        self.conv_out = nn.Conv2d(c, latent_channels, 3, padding=1)

    def time_embedding(self, t: torch.Tensor, batch: int) -> torch.Tensor:
        t = torch.as_tensor(t).reshape(-1)
        if t.numel() == 1:
            t = t.expand(batch)
        emb = sinusoidal_embedding(t, self.cfg.time_dim).to(self.conv_in.weight.dtype)
        return self.time_mlp(emb)

    def forward(
        self,
        x: torch.Tensor,
        t,
        text: TextEmbedding,
        capture_attention: bool = False,
        entry_residual: torch.Tensor | None = None,
        return_taps: bool = False,
    ) -> DenoiserOutput:
        if x.ndim != 4 or x.shape[2] % 4 or x.shape[2] != x.shape[3]:
            raise ValueError(f"latent must be BxCxHxW with H=W divisible by 4, got {tuple(x.shape)}")
        if text.K.shape[0] != x.shape[0]:
            raise ValueError(f"text batch {text.K.shape[0]} != latent batch {x.shape[0]}")
        temb = self.time_embedding(t, x.shape[0])
        h0 = self.conv_in(x)
        if entry_residual is not None:
            h0 = h0 + entry_residual
        s0 = self.down0(h0, temb)
        h = self.down1(self.ds0(s0), temb)
        s1, logits_down = self.attn_down(h, text)
        h = self.mid2(self.mid1(self.ds1(s1), temb), temb)
        mid = h
        h = self.us1(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.up1(torch.cat([h, s1], dim=1), temb)
        h, logits_up = self.attn_up(h, text)
        up1 = h
        h = self.us0(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.up0(torch.cat([h, s0], dim=1), temb)
        eps = self.conv_out(F.silu(self.norm_out(h)))

        out = DenoiserOutput(eps)
        if capture_attention:
            logits = logits_down if self.cfg.attn_layer == "down" else logits_up
            tt = torch.as_tensor(t).reshape(-1).expand(x.shape[0]) if torch.as_tensor(t).numel() == 1 else torch.as_tensor(t)
            out.attention.append(AttentionRecord(logits, self.cfg.attn_layer, tt))
        if return_taps:
            out.taps = [mid, up1, eps]
        return out

    def tap_channels(self) -> list[int]:
        c = self.cfg.channels
        return [2 * c, 2 * c, self.conv_out.out_channels]
