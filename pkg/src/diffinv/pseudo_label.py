"""Pseudo-label selection: build the diffusion training set from public data.

For every private class, the target classifier scores each public image by
its raw logit for that class and the top n images are kept under that class
label. One public image may serve several classes. Ordering is deterministic:
stable sort on logit descending, ties resolved by public index.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .classifiers import ClassifierHandle
from .data import LabeledImages
from .errors import ConfigError

log = logging.getLogger(__name__)


@dataclass
class PseudoLabeledDataset:
    """Selected public images with their assigned pseudo labels (0-based)."""

    images: torch.Tensor  # (C*n, 3, H, W)
    labels: torch.Tensor  # (C*n,) int64
    source_indices: torch.Tensor  # (C*n,) index into the public pool
    per_class: dict[int, list[int]]  # 0-based class -> ranked public indices
    scores: torch.Tensor = None  # (C*n,) selection logit per entry
    source_paths: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)

    def distinct_sources(self) -> int:
        return len(set(self.source_indices.tolist()))


def auto_top_n(pool_size: int) -> int:
    """Scale the selection width with the public pool the way the reference
    density (30 per class out of 30000 images) would."""
    return max(1, math.ceil(30 * pool_size / 30000))


def score_public(
    handle: ClassifierHandle, public: LabeledImages, batch_size: int = 64
) -> torch.Tensor:
    """Raw logits of the target classifier over the public pool, (N, C)."""
    handle.model.eval()
    chunks = []
    with torch.no_grad():
        for start in range(0, len(public.images), batch_size):
            chunks.append(handle.logits(public.images[start : start + batch_size]))
    return torch.cat(chunks)


def select_top_n(
    handle: ClassifierHandle,
    public: LabeledImages,
    n: int,
    batch_size: int = 64,
) -> PseudoLabeledDataset:
    if n < 1:
        raise ConfigError(f"top-n selection needs n >= 1, got {n}")
    pool = len(public.images)
    if pool == 0:
        raise ConfigError("public pool is empty; nothing to pseudo-label")
    if n > pool:
        log.warning(
            "top-n %d exceeds public pool size %d; using the whole pool per class",
            n, pool,
        )
        n = pool

    logits = score_public(handle, public, batch_size=batch_size)
    per_class: dict[int, list[int]] = {}
    images, labels, sources, scores = [], [], [], []
    for c in range(handle.num_classes):
        order = torch.sort(logits[:, c], descending=True, stable=True).indices
        chosen = order[:n].tolist()
        per_class[c] = chosen
        for idx in chosen:
            images.append(public.images[idx])
            labels.append(c)
            sources.append(idx)
            scores.append(logits[idx, c].item())
    dataset = PseudoLabeledDataset(
        images=torch.stack(images),
        labels=torch.tensor(labels, dtype=torch.int64),
        source_indices=torch.tensor(sources, dtype=torch.int64),
        per_class=per_class,
        scores=torch.tensor(scores),
        source_paths=list(public.paths),
    )
    log.info(
        "pseudo-labeled %d entries (%d distinct public images) for %d classes",
        len(dataset), dataset.distinct_sources(), handle.num_classes,
    )
    return dataset


def write_selection_manifest(dataset: PseudoLabeledDataset, path: str | Path) -> None:
    """Audit record: per class, the chosen public files and their scores."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    by_class: dict[str, list[dict]] = {}
    cursor = 0
    for c in sorted(dataset.per_class):
        entries = []
        for idx in dataset.per_class[c]:
            entries.append(
                {
                    "path": dataset.source_paths[idx] if dataset.source_paths else str(idx),
                    "public_index": idx,
                    "score": float(dataset.scores[cursor]),
                }
            )
            cursor += 1
        by_class[str(c + 1)] = entries
    path.write_text(json.dumps({"classes": by_class}, indent=2) + "\n")
