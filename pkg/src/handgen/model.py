"""Bundle of everything needed to train or sample: codec, text encoder, denoisers."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .codec import ImageCodec, TextEmbedding, TextEncoder
from .config import ExperimentConfig
from .data.prompts import default_vocabulary
from .data.tagging import TokenizedPrompt, Vocabulary
from .diffusion import NoiseSchedule, make_schedule
from .unet import UNet
from .vas import GuidancePair, build_guidance


@dataclass
class HandDiffusion:
    cfg: ExperimentConfig
    codec: ImageCodec
    text: TextEncoder
    pair: GuidancePair
    schedule: NoiseSchedule
    vocab: Vocabulary

    @classmethod
    def create(cls, cfg: ExperimentConfig, codec: ImageCodec, seed: int | None = None) -> "HandDiffusion":
        """Fresh text encoder and denoiser; the guidance module copies the denoiser."""
        torch.manual_seed(cfg.train.seed if seed is None else seed)
        vocab = default_vocabulary()
        text = TextEncoder(len(vocab), cfg.data.n_max, cfg.unet.text_dim)
        base = UNet(cfg.unet, codec.latent_channels)
        pair = build_guidance(base)
        codec.requires_grad_(False)
        sched = make_schedule(cfg.diffusion.T, cfg.diffusion.beta_min, cfg.diffusion.beta_max)
        return cls(cfg, codec, text, pair, sched, vocab)

    @property
    def base(self) -> UNet:
        return self.pair.theta_d

    def tokenize(self, prompts: list[str]) -> list[TokenizedPrompt]:
        return [self.vocab.tokenize(p, self.cfg.data.n_max) for p in prompts]

    def embed(self, prompts: list[str]) -> TextEmbedding:
        return self.text(self.tokenize(prompts))

    def rebuild_guidance(self) -> None:
        """Fresh guidance module copied from the current (trained) base denoiser."""
        self.pair = build_guidance(self.pair.theta_d)
