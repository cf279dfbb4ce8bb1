"""Diffusion prior: noise schedule, conditional denoiser, sampler, pretraining."""

from .schedule import NoiseSchedule, make_schedule, predict_x0, q_sample
from .unet import ConditionalDenoiser, MIDDLE_LAYER_COUNT, middle_layer_names
from .sampling import guided_noise, sample, sampler_times
from .pretrain import (
    EMA,
    denoising_loss,
    load_diffusion,
    pretrain,
    save_diffusion,
)

__all__ = [
    "NoiseSchedule",
    "make_schedule",
    "q_sample",
    "predict_x0",
    "ConditionalDenoiser",
    "MIDDLE_LAYER_COUNT",
    "middle_layer_names",
    "guided_noise",
    "sample",
    "sampler_times",
    "EMA",
    "denoising_loss",
    "pretrain",
    "save_diffusion",
    "load_diffusion",
]
