"""Noise schedules and the forward/inverse diffusion algebra.

Timesteps are 1-based everywhere: t ranges over 1..T and alpha_bar_at(t)
reads entry t-1 of the table. The forward process is
x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps, and predict_x0 inverts it
given a noise estimate.
"""

from dataclasses import dataclass

import torch

from ..errors import ConfigError, NumericalError


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    alpha_bar: torch.Tensor  # (T,), entry t-1 holds abar_t

    def __post_init__(self):
        if self.T < 1:
            raise ConfigError(f"schedule needs T >= 1, got {self.T}")
        ab = self.alpha_bar
        if ab.shape != (self.T,):
            raise ConfigError(
                f"alpha_bar has shape {tuple(ab.shape)}, expected ({self.T},)"
            )
        if not torch.isfinite(ab).all():
            raise ConfigError("alpha_bar contains non-finite values")
        if ab[0] > 1.0 or ab[-1] <= 0.0:
            raise ConfigError("alpha_bar must satisfy 0 < abar_T and abar_1 <= 1")
        if self.T > 1 and not (ab[1:] < ab[:-1]).all():
            raise ConfigError("alpha_bar must be strictly decreasing")

    def alpha_bar_at(self, t: int | torch.Tensor) -> torch.Tensor:
        """abar_t for 1-based t; raises IndexError on out-of-range t."""
        t = torch.as_tensor(t, dtype=torch.int64)
        if (t < 1).any() or (t > self.T).any():
            raise IndexError(f"timestep out of range 1..{self.T}")
        return self.alpha_bar[t - 1]


def make_schedule(T: int, kind: str = "linear") -> NoiseSchedule:
    if T < 1:
        raise ConfigError(f"schedule needs T >= 1, got {T}")
    if kind != "linear":
        raise ConfigError(f"unknown schedule family {kind!r}")
    betas = torch.linspace(1e-4, 0.02, T, dtype=torch.float64)
    alpha_bar = torch.cumprod(1.0 - betas, dim=0).to(torch.float32)
    return NoiseSchedule(T=T, alpha_bar=alpha_bar)


def _per_sample(values: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    """Reshape per-sample scalars to broadcast over image dimensions."""
    return values.to(like.dtype).view(-1, *([1] * (like.dim() - 1)))


def _expand_t(t: int | torch.Tensor, batch: int) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=torch.int64)
    if t.dim() == 0:
        t = t.expand(batch)
    return t


def q_sample(
    schedule: NoiseSchedule,
    x0: torch.Tensor,
    t: int | torch.Tensor,
    eps: torch.Tensor,
) -> torch.Tensor:
    """Forward-diffuse x0 to timestep t with the given noise."""
    if eps.shape != x0.shape:
        raise NumericalError(
            f"noise shape {tuple(eps.shape)} does not match x0 {tuple(x0.shape)}"
        )
    t = _expand_t(t, x0.shape[0])
    ab = _per_sample(schedule.alpha_bar_at(t), x0)
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps


def predict_x0(
    schedule: NoiseSchedule,
    x_t: torch.Tensor,
    eps_pred: torch.Tensor,
    t: int | torch.Tensor,
) -> torch.Tensor:
    """Invert the forward process using a noise estimate."""
    t = _expand_t(t, x_t.shape[0])
    ab = schedule.alpha_bar_at(t)
    if (ab <= 0).any():
        raise NumericalError("predict_x0 undefined where abar_t = 0")
    ab = _per_sample(ab, x_t)
    return (x_t - (1.0 - ab).sqrt() * eps_pred) / ab.sqrt()
