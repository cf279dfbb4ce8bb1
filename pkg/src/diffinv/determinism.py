"""Seeding helpers and deterministic-math setup.

Every stage derives its random streams from (config seed, stage name) so that
re-running one stage reproduces its outputs without replaying earlier stages.
"""

import random
import zlib

import numpy as np
import torch


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def enable_deterministic() -> None:
    """Force deterministic torch kernels (bit-exact reruns on one machine)."""
    torch.use_deterministic_algorithms(True)


def stage_seed(seed: int, stage: str) -> int:
    # crc32 keeps the offset stable across processes (unlike hash())
    return (seed * 1_000_003 + zlib.crc32(stage.encode())) % 2**31


def generator(seed: int, stage: str = "") -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(stage_seed(seed, stage) if stage else seed)
    return g
