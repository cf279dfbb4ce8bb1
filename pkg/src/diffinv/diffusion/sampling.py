"""Classifier-free guidance and the fast deterministic sampler.

The sampler walks S uniformly spaced timesteps from T downward. At each
step it predicts x0 from the guided noise estimate, records that estimate
in the trace, and jumps to the next timestep by re-noising the clamped x0
with the same predicted noise (the deterministic eta=0 update). The trace
keeps the raw, unclamped x0 so gradients flow to every step.
"""

import torch

from ..errors import ConfigError
from .schedule import NoiseSchedule, predict_x0
from .unet import ConditionalDenoiser


def guided_noise(
    model: ConditionalDenoiser,
    x_t: torch.Tensor,
    y: int | torch.Tensor,
    t: int | torch.Tensor,
    s: float,
) -> torch.Tensor:
    """eps_u + s * (eps_c - eps_u); endpoints s=0 and s=1 skip the blend."""
    if s < 0:
        raise ConfigError(f"guidance scale must be >= 0, got {s}")
    b = x_t.shape[0]
    y = torch.as_tensor(y, dtype=torch.int64)
    if y.dim() == 0:
        y = y.expand(b)
    if s == 0.0:
        return model(x_t, torch.full_like(y, -1), t)
    if s == 1.0:
        return model(x_t, y, t)
    t = torch.as_tensor(t, dtype=torch.int64)
    if t.dim() == 0:
        t = t.expand(b)
    both = model(
        torch.cat([x_t, x_t]),
        torch.cat([torch.full_like(y, -1), y]),
        torch.cat([t, t]),
    )
    eps_u, eps_c = both[:b], both[b:]
    return eps_u + s * (eps_c - eps_u)


def sampler_times(T: int, steps: int) -> list[int]:
    """S timesteps uniformly spaced from T down toward 1, duplicates removed."""
    if steps < 1:
        raise ConfigError(f"sampler needs steps >= 1, got {steps}")
    raw = torch.linspace(T, 1, steps).round().to(torch.int64).tolist()
    times = []
    for t in raw:
        if not times or t < times[-1]:
            times.append(t)
    return times


def sample(
    model: ConditionalDenoiser,
    schedule: NoiseSchedule,
    y: int | torch.Tensor,
    s: float,
    steps: int,
    x_init: torch.Tensor | None = None,
    generator: torch.Generator | None = None,
    batch: int = 1,
) -> tuple[torch.Tensor, list[torch.Tensor]]:
    """Generate images for labels y. Returns (clamped output, x0 trace).

    Deterministic given x_init; when x_init is omitted it is drawn from the
    supplied generator. The trace holds one raw x0 estimate per step.
    """
    y = torch.as_tensor(y, dtype=torch.int64)
    if y.dim() == 0:
        y = y.expand(batch)
    b = y.shape[0]
    size = model.image_size
    if x_init is None:
        x = torch.randn(b, 3, size, size, generator=generator)
    else:
        x = x_init
        if x.shape[0] != b:
            raise ConfigError(
                f"x_init batch {x.shape[0]} does not match {b} labels"
            )
    times = sampler_times(schedule.T, steps)
    trace: list[torch.Tensor] = []
    x0 = x
    for i, t in enumerate(times):
        eps = guided_noise(model, x, y, t, s)
        x0 = predict_x0(schedule, x, eps, t)
        trace.append(x0)
        if i + 1 < len(times):
            ab_next = schedule.alpha_bar_at(times[i + 1])
            x = ab_next.sqrt() * x0.clamp(-1.0, 1.0) + (1.0 - ab_next).sqrt() * eps
    return x0.clamp(-1.0, 1.0), trace
