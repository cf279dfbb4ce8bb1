"""Denoiser pretraining on the pseudo-labeled public set.

The objective is E ||eps - eps_theta(x_t, y, t)||^2 with t uniform over
1..T, where the per-sample norm is summed over pixels and averaged over the
batch (so a zero predictor scores about the data dimensionality). Labels
are dropped to null with a fixed probability each step, which trains the
unconditional branch needed for classifier-free guidance. An EMA copy of
the weights is maintained and frozen when pretraining ends.
"""

import copy
import logging
from pathlib import Path

import torch

from ..checkpoints import load_checkpoint, save_checkpoint
from ..config import PretrainConfig
from ..determinism import generator
from ..errors import TrainingError
from ..pseudo_label import PseudoLabeledDataset
from .schedule import NoiseSchedule, make_schedule, q_sample
from .unet import ConditionalDenoiser, middle_layer_names

log = logging.getLogger(__name__)


def denoising_loss(
    model: ConditionalDenoiser,
    schedule: NoiseSchedule,
    x0: torch.Tensor,
    y: torch.Tensor,
    t: torch.Tensor,
    eps: torch.Tensor,
) -> torch.Tensor:
    """Per-sample sum of squared noise error, averaged over the batch."""
    x_t = q_sample(schedule, x0, t, eps)
    pred = model(x_t, y, t)
    return ((eps - pred) ** 2).flatten(1).sum(dim=1).mean()


class EMA:
    """Exponential moving average of model parameters.

    With warmup the effective rate ramps as min(rate, (1+n)/(10+n)) so early
    steps are not dominated by the random initialization.
    """

    def __init__(self, model: torch.nn.Module, rate: float, warmup: bool = True):
        self.rate = rate
        self.warmup = warmup
        self.updates = 0
        self.shadow = {
            name: p.detach().clone() for name, p in model.named_parameters()
        }

    def update(self, model: torch.nn.Module) -> None:
        self.updates += 1
        rate = self.rate
        if self.warmup:
            rate = min(rate, (1 + self.updates) / (10 + self.updates))
        with torch.no_grad():
            for name, p in model.named_parameters():
                self.shadow[name].mul_(rate).add_(p.detach(), alpha=1 - rate)

    def state_dict(self) -> dict[str, torch.Tensor]:
        return {name: t.clone() for name, t in self.shadow.items()}


def load_ema_weights(
    model: ConditionalDenoiser, ema_state: dict[str, torch.Tensor]
) -> ConditionalDenoiser:
    """Return a copy of the model carrying the EMA weights."""
    averaged = copy.deepcopy(model)
    with torch.no_grad():
        for name, p in averaged.named_parameters():
            p.copy_(ema_state[name])
    averaged.eval()
    return averaged


def pretrain(
    model: ConditionalDenoiser,
    schedule: NoiseSchedule,
    data: PseudoLabeledDataset,
    config: PretrainConfig,
    seed: int,
) -> tuple[ConditionalDenoiser, dict[str, torch.Tensor], dict]:
    """Train the denoiser in place; returns (model, ema weights, history)."""
    if len(data) == 0:
        raise TrainingError("pretraining dataset is empty")
    n = len(data)
    batch = min(config.batch_size, n)
    gen = generator(seed, "pretrain")
    val_gen = generator(seed, "pretrain-val")

    # Fixed validation tuples so the loss trend is comparable across steps.
    val_count = min(batch, n)
    val_x0 = data.images[:val_count]
    val_y = data.labels[:val_count]
    val_t = torch.linspace(1, schedule.T, val_count).round().to(torch.int64)
    val_eps = torch.randn(val_x0.shape, generator=val_gen)

    def val_loss() -> float:
        with torch.no_grad():
            return denoising_loss(model, schedule, val_x0, val_y, val_t, val_eps).item()

    opt = torch.optim.AdamW(
        model.parameters(), lr=config.lr, betas=(0.9, 0.999), weight_decay=0.0
    )
    ema = EMA(model, config.ema_rate, warmup=config.ema_warmup)
    history: dict = {
        "train": [],
        "val": [{"step": 0, "loss": val_loss()}],
        "steps": config.steps,
    }
    null_count, label_count = 0, 0

    model.train()
    for step in range(1, config.steps + 1):
        idx = torch.randint(0, n, (batch,), generator=gen)
        x0 = data.images[idx]
        y = data.labels[idx].clone()
        drop = torch.rand(batch, generator=gen) < config.label_dropout
        y[drop] = -1
        null_count += int(drop.sum())
        label_count += batch
        t = torch.randint(1, schedule.T + 1, (batch,), generator=gen)
        eps = torch.randn(x0.shape, generator=gen)

        loss = denoising_loss(model, schedule, x0, y, t, eps)
        if not torch.isfinite(loss):
            raise TrainingError(f"pretraining loss non-finite at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        ema.update(model)

        if step % config.log_every == 0 or step == config.steps:
            history["train"].append({"step": step, "loss": loss.item()})
            log.info("pretrain step %d/%d loss %.2f", step, config.steps, loss.item())
        if step % config.val_every == 0 or step == config.steps:
            history["val"].append({"step": step, "loss": val_loss()})

    history["null_fraction"] = null_count / label_count if label_count else 0.0
    history["label_count"] = label_count
    model.eval()
    return model, ema.state_dict(), history


def save_diffusion(
    path: str | Path,
    model: ConditionalDenoiser,
    ema_state: dict[str, torch.Tensor],
    schedule: NoiseSchedule,
    extra_meta: dict | None = None,
) -> None:
    meta = {
        "num_classes": model.num_classes,
        "image_size": model.image_size,
        "base_width": model.base_width,
        "T": schedule.T,
        "schedule_kind": "linear",
        "middle_layers": middle_layer_names(),
    }
    if extra_meta:
        meta.update(extra_meta)
    save_checkpoint(
        path,
        "diffusion",
        {"state_dict": model.state_dict(), "ema_state": ema_state},
        meta,
    )


def load_diffusion(
    path: str | Path,
) -> tuple[ConditionalDenoiser, dict[str, torch.Tensor], NoiseSchedule, dict]:
    payload, meta = load_checkpoint(path, "diffusion")
    model = ConditionalDenoiser(
        meta["num_classes"], meta["image_size"], base_width=meta["base_width"]
    )
    model.load_state_dict(payload["state_dict"])
    model.eval()
    schedule = make_schedule(meta["T"], meta["schedule_kind"])
    return model, payload["ema_state"], schedule, meta
