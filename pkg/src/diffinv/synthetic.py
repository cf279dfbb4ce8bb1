"""Synthetic image corpus for desk-scale experiments.

Classes sit on a circular parameter continuum: class c controls a hue, a
blob position on a ring, and a stripe orientation, all moving together.
Taking every other class as private leaves each private class flanked by
two visually adjacent public classes, so pseudo-label selection has
genuinely informative material to work with.
"""

import colorsys
from pathlib import Path

import numpy as np
from PIL import Image


def default_private_classes(num_classes: int) -> list[int]:
    """Every other class: 1, 3, 5, ..."""
    return list(range(1, num_classes + 1, 2))


def render_sample(u: float, rng: np.random.Generator, size: int) -> np.ndarray:
    """One HWC uint8 image for continuum position u in [0, 1)."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / (size - 1)

    angle = 2 * np.pi * (u + rng.normal(0.0, 0.01))
    cx = 0.5 + 0.3 * np.cos(angle)
    cy = 0.5 + 0.3 * np.sin(angle)
    sigma = 0.13 * (1.0 + rng.normal(0.0, 0.08))
    blob = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma ** 2))

    phi = np.pi * u
    phase = rng.uniform(0, 2 * np.pi)
    stripes = 0.5 + 0.5 * np.sin(
        2 * np.pi * 3.0 * (xx * np.cos(phi) + yy * np.sin(phi)) + phase
    )

    rgb = np.array(colorsys.hsv_to_rgb(u % 1.0, 0.9, 1.0))
    brightness = rng.uniform(0.9, 1.1)
    img = 0.15 + 0.2 * stripes[..., None] + 0.65 * blob[..., None] * rgb[None, None, :]
    img = img * brightness + rng.normal(0.0, 0.02, size=(size, size, 3))
    return (np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8)


def generate_corpus(
    root: str | Path,
    num_classes: int = 20,
    per_class: int = 60,
    image_size: int = 32,
    seed: int = 0,
) -> Path:
    """Write root/<class>/<index>.png for classes 1..num_classes."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    for c in range(1, num_classes + 1):
        sub = root / str(c)
        sub.mkdir(parents=True, exist_ok=True)
        u = (c - 1) / num_classes
        for i in range(per_class):
            arr = render_sample(u, rng, image_size)
            Image.fromarray(arr).save(sub / f"{i:04d}.png", format="PNG")
    return root
