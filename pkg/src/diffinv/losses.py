"""Classification losses used to steer reconstruction.

Every loss takes logits of shape (C,) or (B, C) with labels of matching
batch shape and returns per-sample values (0-dim for a single vector).
Callers that need a scalar objective take the mean. Losses are
differentiable; ties in max/top-k resolve by class index through stable
sorting, which also fixes the subgradient at tie points.
"""

import logging
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .classifiers import ClassifierHandle
from .errors import ConfigError
from .pseudo_label import PseudoLabeledDataset

log = logging.getLogger(__name__)

LOSS_FAMILIES = ("ce", "poincare", "max_margin", "top_k", "combined")


@dataclass
class LossConfig:
    family: str = "combined"
    k: int = 20
    alpha: float = 1.0
    aggregate: str = "mean"  # mean | sum over the k largest non-target logits

    def __post_init__(self):
        if self.family not in LOSS_FAMILIES:
            raise ConfigError(
                f"unknown loss family {self.family!r}; choose from {LOSS_FAMILIES}"
            )
        if self.k < 1:
            raise ConfigError(f"top-k width must be >= 1, got {self.k}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.aggregate not in ("mean", "sum"):
            raise ConfigError(f"aggregate must be mean or sum, got {self.aggregate!r}")


@dataclass
class CentroidTable:
    """Per-class penultimate-feature centroids (row c = 0-based class c)."""

    centroids: torch.Tensor  # (C, D)
    counts: torch.Tensor  # (C,)

    def __post_init__(self):
        if not torch.isfinite(self.centroids).all():
            raise ConfigError("centroid table contains non-finite entries")
        if (self.counts < 1).any():
            raise ConfigError("centroid table has a class with no samples")

    def lookup(self, y: torch.Tensor) -> torch.Tensor:
        if (y < 0).any() or (y >= self.centroids.shape[0]).any():
            raise ConfigError(
                f"label outside centroid table of {self.centroids.shape[0]} classes"
            )
        return self.centroids[y]


def _batched(
    logits: torch.Tensor, y: int | torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor, bool]:
    single = logits.dim() == 1
    if single:
        logits = logits.unsqueeze(0)
    y = torch.as_tensor(y, dtype=torch.int64)
    if y.dim() == 0:
        y = y.expand(logits.shape[0])
    return logits, y, single


def _finish(values: torch.Tensor, single: bool) -> torch.Tensor:
    return values.squeeze(0) if single else values


def top_k_loss(
    logits: torch.Tensor, y: int | torch.Tensor, k: int, aggregate: str = "mean"
) -> torch.Tensor:
    """-l_y plus the mean (or sum) of the k largest non-target logits."""
    logits, y, single = _batched(logits, y)
    c = logits.shape[1]
    if not 1 <= k <= c - 1:
        raise ConfigError(f"top-k width must lie in 1..{c - 1}, got {k}")
    target = logits.gather(1, y[:, None]).squeeze(1)
    masked = logits.clone()
    masked.scatter_(1, y[:, None], float("-inf"))
    ranked = torch.sort(masked, dim=1, descending=True, stable=True).values[:, :k]
    agg = ranked.mean(dim=1) if aggregate == "mean" else ranked.sum(dim=1)
    return _finish(-target + agg, single)


def max_margin(logits: torch.Tensor, y: int | torch.Tensor) -> torch.Tensor:
    """-l_y + max over non-target logits (the k=1 margin)."""
    return top_k_loss(logits, y, 1)


def cross_entropy(logits: torch.Tensor, y: int | torch.Tensor) -> torch.Tensor:
    logits, y, single = _batched(logits, y)
    return _finish(F.cross_entropy(logits, y, reduction="none"), single)


def poincare_loss(logits: torch.Tensor, y: int | torch.Tensor) -> torch.Tensor:
    """Hyperbolic distance between l1-normalized logits and the near-onehot target.

    Computed in float64: near the ball boundary the quantities 1 - ||u||^2
    underflow badly in float32.
    """
    out_dtype = logits.dtype
    logits, y, single = _batched(logits, y)
    logits = logits.double()
    xi = 1e-4
    norm1 = logits.abs().sum(dim=1, keepdim=True).clamp_min(1e-12)
    u = logits / norm1
    u_sq = (u ** 2).sum(dim=1)
    over = u_sq >= 1.0
    if over.any():
        log.warning("poincare_loss: clamping %d logit vectors to the unit ball", int(over.sum()))
        scale = torch.where(over, (1.0 - 1e-6) / u_sq.clamp_min(1e-12).sqrt(), torch.ones_like(u_sq))
        u = u * scale[:, None]
        u_sq = (u ** 2).sum(dim=1)
    v = (F.one_hot(y, logits.shape[1]).to(logits.dtype) - xi).clamp_min(0.0)
    v_sq = (v ** 2).sum(dim=1)
    diff_sq = ((u - v) ** 2).sum(dim=1)
    arg = 1.0 + 2.0 * diff_sq / ((1.0 - u_sq) * (1.0 - v_sq))
    return _finish(torch.acosh(arg.clamp_min(1.0)).to(out_dtype), single)


def p_reg(
    features: torch.Tensor, y: int | torch.Tensor, table: CentroidTable
) -> torch.Tensor:
    """Squared l2 distance from the class feature centroid."""
    features, y, single = _batched(features, y)
    if features.shape[1] != table.centroids.shape[1]:
        raise ConfigError(
            f"feature width {features.shape[1]} does not match centroid width "
            f"{table.centroids.shape[1]}"
        )
    return _finish(((features - table.lookup(y)) ** 2).sum(dim=1), single)


def combined_cls(
    logits: torch.Tensor,
    features: torch.Tensor,
    y: int | torch.Tensor,
    table: CentroidTable,
    config: LossConfig,
) -> torch.Tensor:
    """top-k margin plus alpha times the centroid regularizer."""
    margin = top_k_loss(logits, y, config.k, config.aggregate)
    if config.alpha == 0:
        return margin
    return margin + config.alpha * p_reg(features, y, table)


def estimate_centroids(
    classifier: ClassifierHandle, data: PseudoLabeledDataset, batch_size: int = 64
) -> CentroidTable:
    """Mean penultimate feature per class over its pseudo-labeled images."""
    classifier.model.eval()
    feats = []
    with torch.no_grad():
        for start in range(0, len(data.images), batch_size):
            feats.append(classifier.features(data.images[start : start + batch_size]))
    feats = torch.cat(feats)
    c = classifier.num_classes
    centroids = torch.zeros(c, feats.shape[1])
    counts = torch.zeros(c, dtype=torch.int64)
    for cls in range(c):
        mask = data.labels == cls
        counts[cls] = int(mask.sum())
        if counts[cls] == 0:
            raise ConfigError(f"class {cls + 1} has no pseudo-labeled images")
        centroids[cls] = feats[mask].mean(dim=0)
    return CentroidTable(centroids=centroids, counts=counts)


def classification_loss(
    logits: torch.Tensor,
    features: torch.Tensor | None,
    y: int | torch.Tensor,
    table: CentroidTable | None,
    config: LossConfig,
) -> torch.Tensor:
    """Dispatch on the configured family; per-sample values."""
    if config.family == "ce":
        return cross_entropy(logits, y)
    if config.family == "poincare":
        return poincare_loss(logits, y)
    if config.family == "max_margin":
        return max_margin(logits, y)
    if config.family == "top_k":
        return top_k_loss(logits, y, config.k, config.aggregate)
    if table is None or features is None:
        raise ConfigError("combined loss needs features and a centroid table")
    return combined_cls(logits, features, y, table, config)


def rescaled(values: list[float]) -> list[float]:
    """Min-max rescale a curve to [0, 1] for cross-loss trend comparison."""
    lo, hi = min(values), max(values)
    if hi == lo:
        return [0.0 for _ in values]
    return [(v - lo) / (hi - lo) for v in values]
