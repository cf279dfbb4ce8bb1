"""Diffusion-prior model inversion: train a conditional diffusion model on
public data, then reconstruct class-representative private images by
optimizing them against the prior and a target classifier."""

__version__ = "0.1.0"
