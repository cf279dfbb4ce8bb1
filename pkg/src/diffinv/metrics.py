"""Attack evaluation: accuracy, FID, KNN distance, PSNR/SSIM, PRDC.

Feature-space metrics run through a pluggable embedder whose desk default
is the evaluation classifier's penultimate layer, so FID and friends are
comparable only between runs of this package using the same embedder;
every report header restates this.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from skimage.metrics import structural_similarity

from .classifiers import ClassifierHandle
from .data import LabeledImages
from .errors import ConfigError, NumericalError

log = logging.getLogger(__name__)


@dataclass
class EmbedderHandle:
    """Deterministic image-to-vector map used by all feature-space metrics."""

    fn: Callable[[torch.Tensor], torch.Tensor]
    name: str
    width: int

    def __call__(self, images: torch.Tensor, batch_size: int = 64) -> torch.Tensor:
        chunks = []
        with torch.no_grad():
            for start in range(0, len(images), batch_size):
                chunks.append(self.fn(images[start : start + batch_size]))
        return torch.cat(chunks)


def classifier_embedder(handle: ClassifierHandle, name: str = "eval-penultimate") -> EmbedderHandle:
    handle.model.eval()
    return EmbedderHandle(fn=handle.features, name=name, width=handle.feature_dim)


def attack_accuracy(
    eval_model: ClassifierHandle, images: torch.Tensor, labels: torch.Tensor
) -> tuple[float, float, torch.Tensor]:
    """Top-1/top-5 hit rates plus the per-image top-1 hit mask."""
    eval_model.model.eval()
    with torch.no_grad():
        logits = eval_model.logits(images)
    k = min(5, logits.shape[1])
    topk = logits.topk(k, dim=1).indices
    hits1 = topk[:, 0] == labels
    hits5 = (topk == labels[:, None]).any(dim=1)
    return hits1.float().mean().item(), hits5.float().mean().item(), hits1


def _sqrt_eigvals(matrix: np.ndarray, what: str, tol: float = -1e-8) -> np.ndarray:
    sym = (matrix + matrix.T) / 2.0
    vals, vecs = np.linalg.eigh(sym)
    worst = float(vals.min()) if len(vals) else 0.0
    if worst < tol * max(1.0, float(np.abs(vals).max())):
        raise NumericalError(
            f"{what} is not positive semidefinite: min eigenvalue {worst:.3e}"
        )
    return np.clip(vals, 0.0, None), vecs


def fid(real_feats: torch.Tensor, fake_feats: torch.Tensor) -> float:
    """Frechet distance between Gaussian fits of two feature sets."""
    real = np.asarray(real_feats.detach().cpu(), dtype=np.float64)
    fake = np.asarray(fake_feats.detach().cpu(), dtype=np.float64)
    if real.ndim != 2 or fake.ndim != 2 or real.shape[1] != fake.shape[1]:
        raise ConfigError("feature sets must be 2-D with equal widths")
    if real.shape[0] < 2 or fake.shape[0] < 2:
        raise ConfigError("FID needs at least 2 samples per side")
    mu_r, mu_f = real.mean(axis=0), fake.mean(axis=0)
    cov_r = np.cov(real, rowvar=False)
    cov_f = np.cov(fake, rowvar=False)
    cov_r = np.atleast_2d(cov_r)
    cov_f = np.atleast_2d(cov_f)

    vals_r, vecs_r = _sqrt_eigvals(cov_r, "real covariance")
    root_r = (vecs_r * np.sqrt(vals_r)) @ vecs_r.T
    product = root_r @ cov_f @ root_r
    vals_p, _ = _sqrt_eigvals(product, "covariance product")
    trace_sqrt = float(np.sqrt(vals_p).sum())

    diff = mu_r - mu_f
    value = float(diff @ diff + np.trace(cov_r) + np.trace(cov_f) - 2.0 * trace_sqrt)
    return max(value, 0.0)


def knn_dist(
    embedder: EmbedderHandle,
    recon: LabeledImages,
    hits: torch.Tensor,
    private: LabeledImages,
) -> float | None:
    """Mean feature distance from recognized reconstructions to their class.

    Only reconstructions with a true hit mask participate; with none the
    metric is absent (None), never zero.
    """
    if not hits.any():
        log.warning("no reconstruction was recognized; KNN distance is absent")
        return None
    recon_feats = embedder(recon.images)
    private_feats = embedder(private.images)
    dists = []
    for i in torch.nonzero(hits, as_tuple=True)[0].tolist():
        same = private_feats[private.labels == recon.labels[i]]
        if len(same) == 0:
            raise ConfigError(
                f"private side has no images for attacked class {int(recon.labels[i]) + 1}"
            )
        dists.append(torch.cdist(recon_feats[i : i + 1], same).min().item())
    return float(sum(dists) / len(dists))


def image_quality(recon: torch.Tensor, reference: torch.Tensor) -> tuple[float, float]:
    """(PSNR, SSIM) for one image pair in [-1, 1]; identical pairs give inf PSNR."""
    if recon.shape != reference.shape:
        raise ConfigError("image pair must share geometry")
    a = np.asarray(recon.detach().cpu(), dtype=np.float64)
    b = np.asarray(reference.detach().cpu(), dtype=np.float64)
    mse = float(np.mean((a - b) ** 2))
    psnr = float("inf") if mse == 0.0 else 10.0 * math.log10(4.0 / mse)
    ssim = float(
        structural_similarity(a, b, data_range=2.0, channel_axis=0)
    )
    return psnr, ssim


def best_pair_quality(
    recon: LabeledImages, private: LabeledImages
) -> list[tuple[int, float, float]]:
    """Per reconstruction: (best private index, PSNR, SSIM).

    The reference is the same-class private image with the lowest pixel MSE.
    """
    out = []
    for i in range(len(recon.images)):
        candidates = torch.nonzero(
            private.labels == recon.labels[i], as_tuple=True
        )[0]
        if len(candidates) == 0:
            raise ConfigError(
                f"private side has no images for class {int(recon.labels[i]) + 1}"
            )
        mses = (
            (private.images[candidates] - recon.images[i]) ** 2
        ).flatten(1).mean(dim=1)
        j = candidates[mses.argmin()].item()
        psnr, ssim = image_quality(recon.images[i], private.images[j])
        out.append((j, psnr, ssim))
    return out


def _prdc_one(real: np.ndarray, fake: np.ndarray, k: int) -> dict[str, float]:
    d_rr = np.sqrt(((real[:, None, :] - real[None, :, :]) ** 2).sum(axis=-1))
    d_ff = np.sqrt(((fake[:, None, :] - fake[None, :, :]) ** 2).sum(axis=-1))
    d_fr = np.sqrt(((fake[:, None, :] - real[None, :, :]) ** 2).sum(axis=-1))
    radii_r = np.sort(d_rr, axis=1)[:, k]
    radii_f = np.sort(d_ff, axis=1)[:, k]
    inside = d_fr <= radii_r[None, :]
    precision = float(inside.any(axis=1).mean())
    recall = float((d_fr.T <= radii_f[None, :]).any(axis=1).mean())
    density = float(inside.sum(axis=1).mean() / k)
    coverage = float((d_fr.min(axis=0) <= radii_r).mean())
    return {
        "precision": precision,
        "recall": recall,
        "density": density,
        "coverage": coverage,
    }


def prdc(
    real_by_class: dict[int, torch.Tensor],
    fake_by_class: dict[int, torch.Tensor],
    k_nn: int,
) -> dict:
    """Class-wise improved precision/recall/density/coverage, then averaged.

    Classes where either side has <= k_nn samples are skipped with a warning
    (the k-th neighbor radius would be undefined).
    """
    if k_nn < 1:
        raise ConfigError(f"prdc needs k_nn >= 1, got {k_nn}")
    per_class: dict[int, dict[str, float]] = {}
    for cls in sorted(real_by_class):
        if cls not in fake_by_class:
            log.warning("prdc: class %d has no reconstructions; skipped", cls + 1)
            continue
        real = np.asarray(real_by_class[cls].detach().cpu(), dtype=np.float64)
        fake = np.asarray(fake_by_class[cls].detach().cpu(), dtype=np.float64)
        if real.shape[0] <= k_nn or fake.shape[0] <= k_nn:
            log.warning(
                "prdc: class %d undersized (%d real, %d fake, k=%d); skipped",
                cls + 1, real.shape[0], fake.shape[0], k_nn,
            )
            continue
        per_class[cls] = _prdc_one(real, fake, k_nn)
    if not per_class:
        return {"per_class": {}, "mean": None}
    mean = {
        key: float(np.mean([v[key] for v in per_class.values()]))
        for key in ("precision", "recall", "density", "coverage")
    }
    return {"per_class": per_class, "mean": mean}


@dataclass
class MetricsReport:
    acc1: float
    acc5: float
    fid: float
    knn_dist: float | None
    psnr_mean: float
    ssim_mean: float
    prdc_mean: dict | None
    embedder: str
    counts: dict
    per_pair: list = field(default_factory=list)
    prdc_per_class: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "note": (
                "feature metrics use embedder "
                f"{self.embedder!r}; FID/KNN/PRDC are comparable only across "
                "runs sharing this embedder"
            ),
            "acc1": self.acc1,
            "acc5": self.acc5,
            "fid": self.fid,
            "knn_dist": self.knn_dist,
            "psnr_mean": self.psnr_mean,
            "ssim_mean": self.ssim_mean,
            "prdc": {
                "mean": self.prdc_mean,
                "per_class": {str(k + 1): v for k, v in self.prdc_per_class.items()},
            },
            "counts": self.counts,
            "pairs": self.per_pair,
        }

    def format_table(self) -> str:
        lines = [
            f"# embedder: {self.embedder} (feature metrics internally comparable only)",
            f"{'Acc1':>8} {'Acc5':>8} {'FID':>10} {'KNN':>10} {'PSNR':>8} {'SSIM':>8}"
            f" {'Prec':>6} {'Rec':>6} {'Dens':>6} {'Cov':>6}",
        ]
        knn = "absent" if self.knn_dist is None else f"{self.knn_dist:.4f}"
        if self.prdc_mean is None:
            p = r = d = c = "  -"
        else:
            p = f"{self.prdc_mean['precision']:.3f}"
            r = f"{self.prdc_mean['recall']:.3f}"
            d = f"{self.prdc_mean['density']:.3f}"
            c = f"{self.prdc_mean['coverage']:.3f}"
        psnr = "inf" if math.isinf(self.psnr_mean) else f"{self.psnr_mean:.3f}"
        lines.append(
            f"{self.acc1:>8.4f} {self.acc5:>8.4f} {self.fid:>10.4f} {knn:>10}"
            f" {psnr:>8} {self.ssim_mean:>8.4f} {p:>6} {r:>6} {d:>6} {c:>6}"
        )
        return "\n".join(lines)


def evaluate_attack(
    recon: LabeledImages,
    private: LabeledImages,
    eval_model: ClassifierHandle,
    embedder: EmbedderHandle | None = None,
    prdc_k: int = 3,
) -> MetricsReport:
    """Full evaluation of a reconstruction set against the private data."""
    if embedder is None:
        embedder = classifier_embedder(eval_model)
    acc1, acc5, hits = attack_accuracy(eval_model, recon.images, recon.labels)

    recon_feats = embedder(recon.images)
    private_feats = embedder(private.images)
    fid_value = fid(private_feats, recon_feats)
    knn = knn_dist(embedder, recon, hits, private)

    pairs = best_pair_quality(recon, private)
    finite_psnr = [p for _, p, _ in pairs if math.isfinite(p)]
    psnr_mean = (
        float("inf")
        if len(finite_psnr) < len(pairs)
        else float(np.mean(finite_psnr)) if finite_psnr else float("nan")
    )
    ssim_mean = float(np.mean([s for _, _, s in pairs]))

    real_by_class = {
        int(c): private_feats[private.labels == c]
        for c in torch.unique(private.labels, sorted=True)
    }
    fake_by_class = {
        int(c): recon_feats[recon.labels == c]
        for c in torch.unique(recon.labels, sorted=True)
    }
    prdc_result = prdc(real_by_class, fake_by_class, prdc_k)

    return MetricsReport(
        acc1=acc1,
        acc5=acc5,
        fid=fid_value,
        knn_dist=knn,
        psnr_mean=psnr_mean,
        ssim_mean=ssim_mean,
        prdc_mean=prdc_result["mean"],
        embedder=embedder.name,
        counts={
            "reconstructions": len(recon.images),
            "private": len(private.images),
            "recognized": int(hits.sum()),
        },
        per_pair=[
            {"index": i, "reference": j, "psnr": p, "ssim": s}
            for i, (j, p, s) in enumerate(pairs)
        ],
        prdc_per_class=prdc_result["per_class"],
    )


def _sanitize(obj):
    """Replace non-finite floats with strings so the JSON stays portable."""
    if isinstance(obj, float) and not math.isfinite(obj):
        return "inf" if obj > 0 else ("-inf" if obj < 0 else "nan")
    if isinstance(obj, dict):
        return {k: _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sanitize(v) for v in obj]
    return obj


def write_report(report: MetricsReport, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_sanitize(report.to_json()), indent=2) + "\n")
