"""Image latent codec and toy text encoder.

The codec is a plain convolutional autoencoder with an exact 8x spatial
reduction to 4 latent channels. Latents are rescaled by a data-derived factor
so that diffusion operates on roughly unit-variance inputs.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import CodecConfig
from .data.tagging import TokenizedPrompt

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


class ImageCodec(nn.Module):
    def __init__(self, latent_channels: int = 4, hidden: int = 64):
        super().__init__()
        c1, c2, c3 = hidden // 4, hidden // 2, hidden
        self.latent_channels = latent_channels
        self.encoder = nn.Sequential(
            nn.Conv2d(3, c1, 3, padding=1), nn.SiLU(),
            nn.Conv2d(c1, c2, 4, 2, 1), nn.SiLU(),
            nn.Conv2d(c2, c2, 3, padding=1), nn.SiLU(),
            nn.Conv2d(c2, c3, 4, 2, 1), nn.SiLU(),
            nn.Conv2d(c3, c3, 3, padding=1), nn.SiLU(),
            nn.Conv2d(c3, c3, 4, 2, 1), nn.SiLU(),
            nn.Conv2d(c3, latent_channels, 3, padding=1),
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(latent_channels, c3, 3, padding=1), nn.SiLU(),
            nn.Conv2d(c3, c3, 3, padding=1), nn.SiLU(),
            nn.Upsample(scale_factor=2), nn.Conv2d(c3, c2, 3, padding=1), nn.SiLU(),
            nn.Upsample(scale_factor=2), nn.Conv2d(c2, c1, 3, padding=1), nn.SiLU(),
            nn.Upsample(scale_factor=2), nn.Conv2d(c1, c1, 3, padding=1), nn.SiLU(),
            nn.Conv2d(c1, 3, 3, padding=1),
        )
        self.register_buffer("latent_scale", torch.ones(()))

    def _check(self, x: torch.Tensor, channels: int, what: str) -> None:
        ok = x.ndim == 4 and x.shape[1] == channels and x.shape[2] == x.shape[3]
        if what == "image":
            ok = ok and x.shape[2] % 8 == 0
        if not ok:
            raise ValueError(f"bad {what} shape {tuple(x.shape)}")

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        """Bx3xSxS images in [0, 1] to scaled Bx4x(S/8)x(S/8) latents."""
        self._check(image, 3, "image")
        return self.encoder(image * 2.0 - 1.0) * self.latent_scale

    def decode_raw(self, z: torch.Tensor) -> torch.Tensor:
        self._check(z, self.latent_channels, "latent")
        return (self.decoder(z / self.latent_scale) + 1.0) / 2.0

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.decode_raw(z).clamp(0.0, 1.0)


def encode_image(codec: ImageCodec, image) -> torch.Tensor:
    """Single 3xSxS image (array or tensor) to a 4x(S/8)x(S/8) latent."""
    x = torch.as_tensor(np.asarray(image), dtype=torch.float32)
    if x.ndim != 3:
        raise ValueError(f"expected a 3xSxS image, got shape {tuple(x.shape)}")
    with torch.no_grad():
        return codec.encode(x[None])[0]


def decode_latent(codec: ImageCodec, z: torch.Tensor) -> torch.Tensor:
    if z.ndim != 3:
        raise ValueError(f"expected a CxHxW latent, got shape {tuple(z.shape)}")
    if not torch.isfinite(z).all():
        raise ValueError("latent has non-finite values")
    with torch.no_grad():
        return codec.decode(z[None])[0]


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    mse = F.mse_loss(a, b).item()
    return float("inf") if mse == 0 else 10.0 * math.log10(1.0 / mse)


@dataclass
class CodecTrainResult:
    losses: list[float]
    initial_loss: float
    final_loss: float


def train_codec(images: torch.Tensor, cfg: CodecConfig, log_every: int = 100) -> tuple[ImageCodec, CodecTrainResult]:
    """Fit the autoencoder to ``images`` (Nx3xSxS in [0, 1]) by pixel MSE."""
    if len(images) == 0:
        raise ValueError("codec training set is empty")
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    codec = ImageCodec(cfg.latent_channels, cfg.hidden)
    opt = torch.optim.Adam(codec.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(cfg.steps, 1), eta_min=cfg.lr * 0.05)
    losses = []
    with torch.no_grad():
        initial = F.mse_loss(codec.decode_raw(codec.encode(images[:64])), images[:64]).item()
    for step in range(cfg.steps):
        idx = torch.randint(len(images), (cfg.batch_size,), generator=gen)
        x = images[idx]
        flip = torch.rand(cfg.batch_size, generator=gen) < 0.5
        x = torch.where(flip[:, None, None, None], x.flip(-1), x)
        loss = F.mse_loss(codec.decode_raw(codec.encode(x)), x)
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"codec loss became {loss.item()} at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        losses.append(loss.item())
        if log_every and step % log_every == 0:
            log.info("codec step %d loss %.5f", step, loss.item())
    with torch.no_grad():
        z = torch.cat([codec.encoder(images[i : i + 64] * 2.0 - 1.0) for i in range(0, len(images), 64)])
        codec.latent_scale.fill_(1.0 / z.std().item())
        final = F.mse_loss(codec.decode_raw(codec.encode(images[:64])), images[:64]).item()
    return codec, CodecTrainResult(losses, initial, final)


def sinusoidal_embedding(positions: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = positions.float()[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


@dataclass
class TextEmbedding:
    """Batched token embeddings ``K`` (BxNxd) with padding mask and hand tokens."""

    K: torch.Tensor
    mask: torch.Tensor
    hand_token_indices: list[list[int]]

    @property
    def n_k(self) -> list[int]:
        return [len(h) for h in self.hand_token_indices]

    @property
    def n_l(self) -> list[int]:
        return [int(m.sum()) - len(h) for m, h in zip(self.mask, self.hand_token_indices)]

    def hand_mask(self) -> torch.Tensor:
        out = torch.zeros_like(self.mask)
        for b, idx in enumerate(self.hand_token_indices):
            out[b, idx] = True
        return out

    def select(self, index) -> "TextEmbedding":
        index = torch.as_tensor(index)
        return TextEmbedding(self.K[index], self.mask[index], [self.hand_token_indices[i] for i in index.tolist()])

    def repeat(self, times: int) -> "TextEmbedding":
        return TextEmbedding(self.K.repeat(times, 1, 1), self.mask.repeat(times, 1), self.hand_token_indices * times)


class TextEncoder(nn.Module):
    """Learned token table plus a fixed sinusoidal position term."""

    def __init__(self, vocab_size: int, n_max: int = 16, dim: int = 64):
        super().__init__()
        self.vocab_size = vocab_size
        self.n_max = n_max
        self.table = nn.Embedding(vocab_size, dim, padding_idx=0)
        nn.init.normal_(self.table.weight, std=1.0)
        with torch.no_grad():
            self.table.weight[0].zero_()
        self.register_buffer("positions", sinusoidal_embedding(torch.arange(n_max), dim) * 0.5)

    def forward(self, prompts: list[TokenizedPrompt]) -> TextEmbedding:
        ids = torch.zeros(len(prompts), self.n_max, dtype=torch.long)
        mask = torch.zeros(len(prompts), self.n_max, dtype=torch.bool)
        for b, p in enumerate(prompts):
            if not p.ids:
                raise ValueError("empty prompt: at least one token is needed for cross-attention")
            if len(p.ids) > self.n_max:
                raise ValueError(f"prompt has {len(p.ids)} tokens, more than n_max={self.n_max}")
            bad = [i for i in p.ids if not 0 <= i < self.vocab_size]
            if bad:
                raise ValueError(f"unknown token ids {bad} (vocab size {self.vocab_size})")
            ids[b, : len(p.ids)] = torch.tensor(p.ids, dtype=torch.long)
            mask[b, : len(p.ids)] = True
        K = (self.table(ids) + self.positions[None]) * mask[..., None]
        return TextEmbedding(K, mask, [list(p.hand_token_indices) for p in prompts])


def encode_text(encoder: TextEncoder, prompt: TokenizedPrompt) -> TextEmbedding:
    with torch.no_grad():
        return encoder([prompt])
