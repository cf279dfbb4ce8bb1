"""Target and evaluation classifiers.

Both architectures expose a shared contract through `ClassifierHandle`:
differentiable `logits(x)` on [-1, 1] images, a penultimate `features(x)`
embedding, and a linear `head` such that head(features(x)) reproduces
logits(x) exactly. GroupNorm is used throughout so inference does not depend
on batch composition.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoints import load_checkpoint, require_meta, save_checkpoint
from .config import ClassifierConfig
from .data import LabeledImages, random_flip
from .determinism import generator
from .errors import ConfigError, TrainingError

log = logging.getLogger(__name__)


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, channels), channels)


class TargetConvNet(nn.Module):
    """Plain convolutional stack: three conv/pool stages, one hidden FC."""

    def __init__(self, num_classes: int, width: int = 32):
        super().__init__()
        w = width
        self.stem = nn.Sequential(
            nn.Conv2d(3, w, 3, padding=1), _norm(w), nn.ReLU(),
            nn.Conv2d(w, w, 3, padding=1), _norm(w), nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(w, 2 * w, 3, padding=1), _norm(2 * w), nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(2 * w, 4 * w, 3, padding=1), _norm(4 * w), nn.ReLU(),
            nn.AdaptiveAvgPool2d(1),
        )
        self.fc = nn.Linear(4 * w, 8 * w)
        self.head = nn.Linear(8 * w, num_classes)
        self.feature_dim = 8 * w

    def features(self, x: torch.Tensor) -> torch.Tensor:
        h = self.stem(x).flatten(1)
        return F.relu(self.fc(h))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


class _ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1)
        self.norm1 = _norm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.norm2 = _norm(cout)
        if stride != 1 or cin != cout:
            self.skip = nn.Conv2d(cin, cout, 1, stride=stride)
        else:
            self.skip = nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.relu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return F.relu(h + self.skip(x))


class EvalResNet(nn.Module):
    """Small residual network used as the held-out evaluation model."""

    def __init__(self, num_classes: int, width: int = 32):
        super().__init__()
        w = width
        self.stem = nn.Sequential(nn.Conv2d(3, w, 3, padding=1), _norm(w), nn.ReLU())
        self.stage1 = nn.Sequential(_ResBlock(w, w), _ResBlock(w, w))
        self.stage2 = nn.Sequential(_ResBlock(w, 2 * w, stride=2), _ResBlock(2 * w, 2 * w))
        self.stage3 = nn.Sequential(_ResBlock(2 * w, 4 * w, stride=2), _ResBlock(4 * w, 4 * w))
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(4 * w, num_classes)
        self.feature_dim = 4 * w

    def features(self, x: torch.Tensor) -> torch.Tensor:
        h = self.stem(x)
        h = self.stage3(self.stage2(self.stage1(h)))
        return self.pool(h).flatten(1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


ARCHS = {"convnet": TargetConvNet, "resnet": EvalResNet}


def build_classifier(arch: str, num_classes: int, width: int = 32) -> nn.Module:
    if arch not in ARCHS:
        raise ConfigError(f"unknown classifier arch {arch!r}; choose from {sorted(ARCHS)}")
    return ARCHS[arch](num_classes, width=width)


@dataclass
class ClassifierHandle:
    """Uniform classifier interface over [-1, 1] images.

    `input_transform` adapts attack-space images to whatever range the
    wrapped network was trained on: "identity" passes [-1, 1] through,
    "unit" rescales to [0, 1].
    """

    model: nn.Module
    arch: str
    num_classes: int
    input_transform: str = "identity"
    meta: dict = field(default_factory=dict)

    def _adapt(self, x: torch.Tensor) -> torch.Tensor:
        if self.input_transform == "unit":
            return (x + 1.0) / 2.0
        return x

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        return self.model.head(self.model.features(self._adapt(x)))

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.model.features(self._adapt(x))

    @property
    def head(self) -> nn.Linear:
        return self.model.head

    @property
    def feature_dim(self) -> int:
        return self.model.feature_dim

    def predict(self, x: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.logits(x).argmax(dim=1)

    def eval_mode(self) -> "ClassifierHandle":
        self.model.eval()
        return self


def stratified_split(
    labels: torch.Tensor, val_fraction: float, gen: torch.Generator
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-class shuffle, then peel off the validation fraction of each class."""
    train_idx, val_idx = [], []
    for c in torch.unique(labels, sorted=True):
        idx = (labels == c).nonzero(as_tuple=True)[0]
        perm = idx[torch.randperm(len(idx), generator=gen)]
        n_val = int(round(val_fraction * len(idx))) if len(idx) >= 2 else 0
        n_val = min(n_val, len(idx) - 1)
        val_idx.append(perm[:n_val])
        train_idx.append(perm[n_val:])
    return torch.cat(train_idx), torch.cat(val_idx)


def accuracy(handle: ClassifierHandle, images: torch.Tensor, labels: torch.Tensor) -> float:
    handle.model.eval()
    with torch.no_grad():
        pred = handle.logits(images).argmax(dim=1)
    return (pred == labels).float().mean().item()


def train_classifier(
    data: LabeledImages,
    arch: str,
    num_classes: int,
    config: ClassifierConfig,
    seed: int,
    width: int = 32,
) -> tuple[ClassifierHandle, dict]:
    """SGD training with a stratified 90/10 split and random horizontal flips.

    Returns the trained handle plus a report with per-epoch loss/accuracy.
    """
    gen = generator(seed, f"classifier-{arch}")
    torch.manual_seed(int(torch.randint(0, 2**31 - 1, (1,), generator=gen)))
    model = build_classifier(arch, num_classes, width=width)
    handle = ClassifierHandle(model, arch, num_classes, config.input_transform)

    train_idx, val_idx = stratified_split(data.labels, 0.1, gen)
    x_train, y_train = data.images[train_idx], data.labels[train_idx]
    x_val, y_val = data.images[val_idx], data.labels[val_idx]
    if len(x_train) == 0:
        raise TrainingError("classifier training set is empty")

    opt = torch.optim.SGD(
        model.parameters(),
        lr=config.lr,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )
    report = {"arch": arch, "epochs": []}
    n = len(x_train)
    for epoch in range(config.epochs):
        model.train()
        perm = torch.randperm(n, generator=gen)
        total_loss, total_hit = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            xb = random_flip(x_train[idx], gen)
            yb = y_train[idx]
            logits = handle.logits(xb)
            loss = F.cross_entropy(logits, yb)
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"classifier loss became non-finite at epoch {epoch}"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            total_loss += loss.item() * len(idx)
            total_hit += (logits.argmax(dim=1) == yb).sum().item()
        val_acc = accuracy(handle, x_val, y_val) if len(x_val) else float("nan")
        entry = {
            "epoch": epoch + 1,
            "train_loss": total_loss / n,
            "train_acc": total_hit / n,
            "val_acc": val_acc,
        }
        report["epochs"].append(entry)
        log.info(
            "classifier %s epoch %d loss %.4f train_acc %.3f val_acc %.3f",
            arch, epoch + 1, entry["train_loss"], entry["train_acc"], val_acc,
        )
    model.eval()
    report["final_train_acc"] = report["epochs"][-1]["train_acc"] if report["epochs"] else 0.0
    report["final_val_acc"] = report["epochs"][-1]["val_acc"] if report["epochs"] else float("nan")
    chance = 1.0 / num_classes
    if report["final_val_acc"] <= chance:
        report["warning"] = (
            f"validation accuracy {report['final_val_acc']:.3f} is at or below "
            f"chance {chance:.3f} after the full schedule"
        )
        log.warning("%s", report["warning"])
    handle.meta = {"width": width}
    return handle, report


def save_classifier(handle: ClassifierHandle, path: str | Path) -> None:
    save_checkpoint(
        path,
        "classifier",
        {"state_dict": handle.model.state_dict()},
        {
            "arch": handle.arch,
            "num_classes": handle.num_classes,
            "input_transform": handle.input_transform,
            "width": handle.meta.get("width", 32),
        },
    )


def load_classifier(path: str | Path, expect_arch: str | None = None) -> ClassifierHandle:
    payload, meta = load_checkpoint(path, "classifier")
    if expect_arch is not None:
        require_meta(meta, path, arch=expect_arch)
    model = build_classifier(meta["arch"], meta["num_classes"], width=meta.get("width", 32))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return ClassifierHandle(
        model, meta["arch"], meta["num_classes"], meta["input_transform"], dict(meta)
    )
