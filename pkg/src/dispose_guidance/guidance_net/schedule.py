"""Variance-preserving forward diffusion with a linear beta schedule."""

from dataclasses import dataclass
from typing import Optional, Union

import torch

from ..exceptions import ParameterError, ShapeError, TimestepError

DEFAULT_STEPS = 1000
BETA_START = 1e-4
BETA_END = 0.02

Timestep = Union[int, torch.Tensor]


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Per-step noise rates for t = 1..T, stored at index t - 1 (float64)."""
    betas: torch.Tensor
    alpha_bar: torch.Tensor

    @property
    def steps(self) -> int:
        return self.betas.shape[0]

    @classmethod
    def linear(cls, steps: int = DEFAULT_STEPS, beta_start: float = BETA_START,
               beta_end: float = BETA_END) -> "NoiseSchedule":
        if steps < 1:
            raise ParameterError(f"schedule needs at least one step, got {steps}")
        if not 0 < beta_start <= beta_end < 1:
            raise ParameterError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
        betas = torch.linspace(beta_start, beta_end, steps, dtype=torch.float64)
        return cls(betas, torch.cumprod(1.0 - betas, dim=0))

    @classmethod
    def from_alpha_bar(cls, alpha_bar: torch.Tensor) -> "NoiseSchedule":
        """Schedule with prescribed cumulative products (strictly decreasing, in (0, 1])."""
        alpha_bar = torch.as_tensor(alpha_bar, dtype=torch.float64).reshape(-1)
        previous = torch.cat([torch.ones(1, dtype=torch.float64), alpha_bar[:-1]])
        return cls(1.0 - alpha_bar / previous, alpha_bar)

    def _index(self, t: Timestep) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=torch.long)
        if t.numel() and (int(t.min()) < 1 or int(t.max()) > self.steps):
            bad = int(t.min()) if int(t.min()) < 1 else int(t.max())
            raise TimestepError(bad, self.steps)
        return t - 1

    def alpha_bar_at(self, t: Timestep) -> torch.Tensor:
        return self.alpha_bar[self._index(t)]

    def sample_timesteps(self, count: int, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        return torch.randint(1, self.steps + 1, (count,), generator=generator)


def forward_diffuse(z0: torch.Tensor, t: Timestep, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps; a tensor ``t`` holds one step per batch item."""
    z0 = torch.as_tensor(z0)
    eps = torch.as_tensor(eps, dtype=z0.dtype)
    if eps.shape != z0.shape:
        raise ShapeError(f"noise shape {tuple(eps.shape)} does not match latent {tuple(z0.shape)}")

    alpha_bar = schedule.alpha_bar_at(t)
    if alpha_bar.ndim == 1 and z0.ndim > 1:
        if alpha_bar.shape[0] != z0.shape[0]:
            raise ShapeError(f"{alpha_bar.shape[0]} timesteps for a batch of {z0.shape[0]}")
        alpha_bar = alpha_bar.reshape(-1, *([1] * (z0.ndim - 1)))
    alpha_bar = alpha_bar.to(z0.dtype)
    return alpha_bar.sqrt() * z0 + (1.0 - alpha_bar).sqrt() * eps
