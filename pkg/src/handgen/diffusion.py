"""Linear-beta DDPM noise schedule and forward noising.

Timestep convention: ``t`` in ``[0, T)`` indexes the schedule arrays, so
``alpha_bar[t]`` is the signal fraction after ``t + 1`` noising steps.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch


class ScheduleError(ValueError):
    pass


@dataclass
class NoiseSchedule:
    betas: torch.Tensor
    # original timestep index of each entry; differs from arange(T) after respacing
    timesteps: torch.Tensor | None = None

    def __post_init__(self):
        self.betas = self.betas.to(torch.float64)
        if not ((self.betas > 0) & (self.betas < 1)).all():
            raise ScheduleError("betas must lie in (0, 1)")
        self.alphas = 1.0 - self.betas
        self.alpha_bar = torch.cumprod(self.alphas, dim=0)
        if self.timesteps is None:
            self.timesteps = torch.arange(len(self.betas))

    @property
    def T(self) -> int:
        return len(self.betas)

    def check_t(self, t) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=torch.long)
        if (t < 0).any() or (t >= self.T).any():
            raise ScheduleError(f"timestep out of range [0, {self.T}): {t.tolist()}")
        return t

    def respace(self, steps: int) -> "NoiseSchedule":
        """Schedule over ``steps`` evenly spaced timesteps with matching alpha_bar."""
        if not 1 <= steps <= self.T:
            raise ScheduleError(f"steps must be in [1, {self.T}], got {steps}")
        keep = torch.linspace(0, self.T - 1, steps).round().long()
        ab = self.alpha_bar[keep]
        prev = torch.cat([torch.ones(1, dtype=ab.dtype), ab[:-1]])
        return NoiseSchedule(1.0 - ab / prev, timesteps=self.timesteps[keep])


def make_schedule(T: int = 100, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ScheduleError(f"T must be >= 1, got {T}")
    if not 0 < beta_min <= beta_max < 1:
        raise ScheduleError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    return NoiseSchedule(torch.linspace(beta_min, beta_max, T, dtype=torch.float64))


def _coef(values: torch.Tensor, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    out = values[t].to(like.dtype)
    return out.reshape(out.shape + (1,) * (like.ndim - out.ndim))


def q_sample(x0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * eps.

    ``t`` is a scalar or one timestep per leading-axis item. The global and
    local branches are simply separate items (or separate calls).
    """
    if eps.shape != x0.shape:
        raise ScheduleError(f"noise shape {tuple(eps.shape)} != latent shape {tuple(x0.shape)}")
    t = schedule.check_t(t)
    ab = _coef(schedule.alpha_bar, t, x0)
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps


def q_sample_pair(x0: tuple, t, eps: tuple, schedule: NoiseSchedule) -> tuple:
    return tuple(q_sample(a, t, e, schedule) for a, e in zip(x0, eps))
