"""Text-attention stage: sharpen hand-token attention and nudge the noisy latents.

For each hand-related token the cross-attention logits are turned into a
spatial distribution (softmax over positions) and smoothed with a fixed
normalized Gaussian. The loss is the worst token's ``1 - max`` of its refined
map; one clipped gradient step on the latents lowers it, and the residual noise
is recomputed so the forward-noising relation holds at the updated latents.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .codec import TextEmbedding
from .config import TasConfig
from .diffusion import NoiseSchedule, ScheduleError, _coef
from .unet import AttentionRecord, UNet


class TasError(RuntimeError):
    pass


@dataclass
class RefinedAttention:
    """``A_hat`` is BxHxWxN: refined hand columns, untouched raw logits elsewhere.

    ``s`` (BxN) holds each token's spatial maximum: of the refined map for
    hand tokens, of the plain spatial softmax for other unmasked tokens, and 0
    for padding.
    """

    A_hat: torch.Tensor
    hand_token_indices: list[list[int]]
    s: torch.Tensor
    hand_mask: torch.Tensor
    token_mask: torch.Tensor


def gaussian_kernel(size: int, sigma: float, dtype=torch.float64) -> torch.Tensor:
    """Normalized 2D Gaussian; ``sigma == 0`` gives the delta kernel."""
    if size < 1 or size % 2 == 0:
        raise ValueError(f"kernel size must be a positive odd number, got {size}")
    r = size // 2
    x = torch.arange(-r, r + 1, dtype=torch.float64)
    if sigma <= 0:
        g = (x == 0).to(torch.float64)
    else:
        g = torch.exp(-(x**2) / (2.0 * sigma**2))
    k = torch.outer(g, g)
    return (k / k.sum()).to(dtype)


def symmetric_pad(x: torch.Tensor, r: int) -> torch.Tensor:
    """Half-sample symmetric padding of the last two axes (``d c b a | a b c d | d c b a``).

    With a symmetric normalized kernel this boundary rule conserves total mass.
    """
    if r == 0:
        return x
    h, w = x.shape[-2:]

    def idx(n):
        i = torch.arange(-r, n + r) % (2 * n)
        return torch.where(i < n, i, 2 * n - 1 - i)

    return x[..., idx(h)[:, None], idx(w)[None, :]]


def smooth(maps: torch.Tensor, kernel: torch.Tensor) -> torch.Tensor:
    """Convolve each map of a ...xHxW stack with ``kernel`` (symmetric padding)."""
    shape = maps.shape
    x = maps.reshape(-1, 1, *shape[-2:])
    x = symmetric_pad(x, kernel.shape[-1] // 2)
    return F.conv2d(x, kernel.to(x.dtype)[None, None]).reshape(shape)


def refine_attention(
    A: AttentionRecord | torch.Tensor,
    hand_idx: list[list[int]],
    cfg: TasConfig,
    token_mask: torch.Tensor | None = None,
    strict: bool = True,
) -> RefinedAttention:
    logits = A.A if isinstance(A, AttentionRecord) else A
    b, h, w, n = logits.shape
    if len(hand_idx) != b:
        raise TasError(f"got {len(hand_idx)} hand-index lists for a batch of {b}")
    if token_mask is None:
        token_mask = torch.isfinite(logits).all(dim=(1, 2))
    hand_mask = torch.zeros(b, n, dtype=torch.bool)
    for i, idx in enumerate(hand_idx):
        if not idx and strict:
            raise TasError(f"item {i} has no hand-related tokens")
        for k in idx:
            if not 0 <= k < n:
                raise TasError(f"hand token index {k} outside [0, {n})")
            if not token_mask[i, k]:
                raise TasError(f"hand token index {k} of item {i} is a padding position")
        hand_mask[i, idx] = True

    # padded columns hold -inf; swap in zeros so no NaN reaches the backward pass
    safe = torch.where(token_mask[:, None, None, :], logits, torch.zeros_like(logits))
    spatial = torch.softmax(safe.reshape(b, h * w, n), dim=1).reshape(b, h, w, n)
    kernel = gaussian_kernel(cfg.gaussian_kernel_size, cfg.gaussian_sigma, logits.dtype)
    smoothed = smooth(spatial.permute(0, 3, 1, 2), kernel).permute(0, 2, 3, 1)

    A_hat = torch.where(hand_mask[:, None, None, :], smoothed, logits)
    s = torch.where(hand_mask, smoothed.amax(dim=(1, 2)), spatial.amax(dim=(1, 2)))
    s = torch.where(token_mask, s, torch.zeros_like(s))
    return RefinedAttention(A_hat, [list(i) for i in hand_idx], s, hand_mask, token_mask)


def tas_loss(refined: RefinedAttention, tokens: str = "hand") -> torch.Tensor:
    """Per-item ``max_n (1 - s_n)`` over the attended token set (shape B).

    Items with an empty attended set get loss 0.
    """
    sel = refined.hand_mask if tokens == "hand" else refined.token_mask
    gap = torch.where(sel, 1.0 - refined.s, torch.full_like(refined.s, float("-inf")))
    loss = gap.amax(dim=1)
    return torch.where(sel.any(dim=1), loss, torch.zeros_like(loss))


def alpha_schedule(t, T: int, cfg: TasConfig) -> torch.Tensor:
    """Step size falling linearly from ``alpha_start`` at t = T-1 to ``alpha_end`` at t = 0."""
    t = torch.as_tensor(t, dtype=torch.float64)
    if (t < 0).any() or (t >= T).any():
        raise ScheduleError(f"timestep out of range [0, {T}): {t.tolist()}")
    frac = t / (T - 1) if T > 1 else torch.zeros_like(t)
    return cfg.alpha_end + (cfg.alpha_start - cfg.alpha_end) * frac


def gradient_step(x: torch.Tensor, grad: torch.Tensor, alpha, max_grad_norm: float | None) -> torch.Tensor:
    """``x - alpha * clip(grad)`` with per-item Euclidean norm clipping."""
    if max_grad_norm is not None:
        norms = grad.reshape(grad.shape[0], -1).norm(dim=1)
        factor = torch.clamp(max_grad_norm / (norms + 1e-12), max=1.0)
        grad = grad * factor.reshape(-1, *([1] * (grad.ndim - 1)))
    alpha = torch.as_tensor(alpha, dtype=x.dtype)
    if alpha.ndim == 1:
        alpha = alpha.reshape(-1, *([1] * (x.ndim - 1)))
    return x - alpha * grad


@dataclass
class TasResult:
    x_hat: tuple[torch.Tensor, torch.Tensor]
    loss: torch.Tensor  # per item, global rows then local rows
    grad_norm: torch.Tensor


def tas_objective(unet: UNet, x: torch.Tensor, t, text: TextEmbedding, cfg: TasConfig) -> torch.Tensor:
    out = unet(x, t, text, capture_attention=True)
    refined = refine_attention(out.attention[0], text.hand_token_indices, cfg, text.mask, strict=False)
    return tas_loss(refined, cfg.loss_tokens)


def update_latents(
    x_t: tuple[torch.Tensor, torch.Tensor],
    text: TextEmbedding,
    t: torch.Tensor,
    unet: UNet,
    cfg: TasConfig,
    T: int,
    alpha=None,
) -> TasResult:
    """One TAS step on the (global, local) latents, both branches in one batch.

    ``text`` and ``t`` describe one branch; they are shared by the other.
    ``alpha`` overrides the timestep schedule when given.
    """
    xg, xl = x_t
    bsz = xg.shape[0]
    t = torch.as_tensor(t).reshape(-1).expand(bsz)
    x = torch.cat([xg, xl]).detach().requires_grad_(True)
    t2 = torch.cat([t, t])
    text2 = text.repeat(2)
    with torch.enable_grad():
        losses = tas_objective(unet, x, t2, text2, cfg)
        (grad,) = torch.autograd.grad(losses.sum(), x)
    if not torch.isfinite(grad).all():
        raise TasError("non-finite gradient in text-attention update")
    step = alpha_schedule(t2, T, cfg) if alpha is None else alpha
    x_hat = gradient_step(x.detach(), grad, step, cfg.max_grad_norm)
    norms = grad.reshape(2 * bsz, -1).norm(dim=1)
    return TasResult((x_hat[:bsz], x_hat[bsz:]), losses.detach(), norms)


def residual_noise(
    x0: torch.Tensor,
    x_hat: torch.Tensor,
    t,
    schedule: NoiseSchedule,
    x_t: torch.Tensor | None = None,
    eps: torch.Tensor | None = None,
) -> torch.Tensor:
    """Noise that makes ``q_sample(x0, t, eps) == x_hat`` hold exactly.

    When the pre-update latent ``x_t`` and its noise ``eps`` are known, the
    equivalent form ``eps + (x_hat - x_t) / sqrt(1 - alpha_bar)`` is used: it
    returns ``eps`` bit-exactly for a zero step and avoids the float32
    cancellation of the direct form at small t.
    """
    t = schedule.check_t(t)
    ab = _coef(schedule.alpha_bar, t, x0)
    if (ab >= 1.0).any():
        raise ScheduleError("alpha_bar[t] == 1: residual noise is undefined")
    if (x_t is None) != (eps is None):
        raise ValueError("x_t and eps must be given together")
    if x_t is not None:
        return eps + (x_hat - x_t) / (1.0 - ab).sqrt()
    return (x_hat - ab.sqrt() * x0) / (1.0 - ab).sqrt()
