"""Dataset ingestion, preprocessing, and the private/public split.

A source corpus is a directory of class subdirectories holding image files.
`split_dataset` partitions it into a labeled private side (the classes under
attack, relabeled 1..C) and an unlabeled public side (every other identity),
and records the partition in a deterministic JSON manifest keyed by content
digest so disjointness can be audited later.

External label convention is 1-based (manifests, class directories, CLI);
tensors handed to models are 0-based. The conversion happens here and in the
CLI only.
"""

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .config import ExperimentConfig
from .errors import ConfigError, IngestionError, SplitIntegrityError

log = logging.getLogger(__name__)

MANIFEST_FORMAT = "diffinv-split-v1"
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".ppm")


def file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def scan_corpus(source_dir: str | Path) -> dict[int, list[Path]]:
    """Map source class label -> sorted image paths.

    Class subdirectory names must parse as integers; that integer is the
    source label referenced by ``data.private_classes``.
    """
    source_dir = Path(source_dir)
    if not source_dir.is_dir():
        raise IngestionError(f"source corpus not found: {source_dir}")
    classes: dict[int, list[Path]] = {}
    for sub in sorted(p for p in source_dir.iterdir() if p.is_dir()):
        try:
            label = int(sub.name)
        except ValueError:
            raise IngestionError(
                f"class directory name is not an integer label: {sub.name!r}"
            )
        files = sorted(
            p for p in sub.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES
        )
        if files:
            classes[label] = files
    if not classes:
        raise IngestionError(f"no class directories with images under {source_dir}")
    return classes


def preprocess(path: str | Path, image_size: int) -> torch.Tensor:
    """Load one image: center-crop to square, resize, scale to [-1, 1].

    Returns a float32 CHW tensor. Horizontal flipping is applied by training
    loops, never here.
    """
    try:
        with Image.open(path) as img:
            img = img.convert("RGB")
            w, h = img.size
            side = min(w, h)
            left = (w - side) // 2
            top = (h - side) // 2
            img = img.crop((left, top, left + side, top + side))
            if side != image_size:
                img = img.resize((image_size, image_size), Image.BILINEAR)
            arr = np.asarray(img, dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError) as e:
        raise IngestionError(f"cannot decode image {path}: {e}") from e
    tensor = torch.from_numpy(arr).permute(2, 0, 1)
    return tensor * 2.0 - 1.0


@dataclass
class DatasetSplit:
    """Private/public partition plus the manifest describing its origin."""

    source_dir: Path
    # source class label -> private label (1-based)
    label_map: dict[int, int]
    # (relative path, digest, private label 1-based)
    private: list[tuple[str, str, int]]
    # (relative path, digest)
    public: list[tuple[str, str]]
    seed: int
    image_size: int

    @property
    def num_classes(self) -> int:
        return len(self.label_map)

    def private_paths(self) -> list[Path]:
        return [self.source_dir / rel for rel, _, _ in self.private]

    def public_paths(self) -> list[Path]:
        return [self.source_dir / rel for rel, _ in self.public]

    def manifest_dict(self) -> dict:
        return {
            "format": MANIFEST_FORMAT,
            "seed": self.seed,
            "image_size": self.image_size,
            "source_dir": str(self.source_dir),
            "label_map": {str(k): v for k, v in sorted(self.label_map.items())},
            "private": [
                {"path": rel, "digest": dig, "label": lab}
                for rel, dig, lab in self.private
            ],
            "public": [{"path": rel, "digest": dig} for rel, dig in self.public],
        }


def split_dataset(
    source_dir: str | Path, private_classes: list[int], config: ExperimentConfig
) -> DatasetSplit:
    classes = scan_corpus(source_dir)
    if not private_classes:
        raise ConfigError("private_classes must not be empty")
    missing = sorted(set(private_classes) - set(classes))
    if missing:
        raise ConfigError(f"private classes absent from corpus: {missing}")
    public_classes = sorted(set(classes) - set(private_classes))
    if not public_classes:
        raise ConfigError(
            "splitting with every corpus class private leaves no public data"
        )
    if len(private_classes) != config.num_classes:
        raise ConfigError(
            f"config.num_classes={config.num_classes} but "
            f"{len(private_classes)} private classes were requested"
        )

    source_dir = Path(source_dir)
    label_map = {src: i + 1 for i, src in enumerate(sorted(set(private_classes)))}

    private: list[tuple[str, str, int]] = []
    private_digests: dict[str, str] = {}
    for src in sorted(label_map):
        for path in classes[src]:
            rel = str(path.relative_to(source_dir))
            dig = file_digest(path)
            private.append((rel, dig, label_map[src]))
            private_digests[dig] = rel

    public: list[tuple[str, str]] = []
    for src in public_classes:
        for path in classes[src]:
            rel = str(path.relative_to(source_dir))
            dig = file_digest(path)
            if dig in private_digests:
                raise SplitIntegrityError(
                    f"identical content in private and public sides: "
                    f"{private_digests[dig]} vs {rel}"
                )
            public.append((rel, dig))

    private.sort(key=lambda e: (e[2], e[0]))
    public.sort(key=lambda e: e[0])
    return DatasetSplit(
        source_dir=source_dir,
        label_map=label_map,
        private=private,
        public=public,
        seed=config.seed,
        image_size=config.image_size,
    )


def write_manifest(split: DatasetSplit, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(split.manifest_dict(), indent=2, sort_keys=False) + "\n"
    path.write_text(text)


def load_manifest(path: str | Path, verify_digests: bool = True) -> DatasetSplit:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise IngestionError(f"cannot read split manifest {path}: {e}") from e
    if raw.get("format") != MANIFEST_FORMAT:
        raise IngestionError(
            f"unrecognized split manifest format: {raw.get('format')!r}"
        )
    split = DatasetSplit(
        source_dir=Path(raw["source_dir"]),
        label_map={int(k): v for k, v in raw["label_map"].items()},
        private=[(e["path"], e["digest"], e["label"]) for e in raw["private"]],
        public=[(e["path"], e["digest"]) for e in raw["public"]],
        seed=raw["seed"],
        image_size=raw["image_size"],
    )
    check_split_integrity(split, verify_digests=verify_digests)
    return split


def check_split_integrity(split: DatasetSplit, verify_digests: bool = False) -> None:
    private_digests = {dig for _, dig, _ in split.private}
    public_digests = {dig for _, dig in split.public}
    if private_digests & public_digests:
        raise SplitIntegrityError("private and public sides share image content")
    labels = {lab for _, _, lab in split.private}
    expected = set(range(1, split.num_classes + 1))
    if labels != expected:
        raise SplitIntegrityError(
            f"private labels {sorted(labels)} do not cover 1..{split.num_classes}"
        )
    if verify_digests:
        for rel, dig, _ in split.private:
            actual = file_digest(split.source_dir / rel)
            if actual != dig:
                raise SplitIntegrityError(f"digest mismatch for {rel}")
        for rel, dig in split.public:
            actual = file_digest(split.source_dir / rel)
            if actual != dig:
                raise SplitIntegrityError(f"digest mismatch for {rel}")


@dataclass
class LabeledImages:
    """In-memory batch of preprocessed images with 0-based labels."""

    images: torch.Tensor  # (N, 3, H, W) in [-1, 1]
    labels: torch.Tensor  # (N,) int64, 0-based; -1 when unlabeled
    paths: list[str]


def load_private_images(split: DatasetSplit, image_size: int) -> LabeledImages:
    images = torch.stack(
        [preprocess(split.source_dir / rel, image_size) for rel, _, _ in split.private]
    )
    labels = torch.tensor([lab - 1 for _, _, lab in split.private], dtype=torch.int64)
    return LabeledImages(images, labels, [rel for rel, _, _ in split.private])


def load_public_images(split: DatasetSplit, image_size: int) -> LabeledImages:
    images = torch.stack(
        [preprocess(split.source_dir / rel, image_size) for rel, _ in split.public]
    )
    labels = torch.full((len(split.public),), -1, dtype=torch.int64)
    return LabeledImages(images, labels, [rel for rel, _ in split.public])


def random_flip(
    images: torch.Tensor, generator: torch.Generator, p: float = 0.5
) -> torch.Tensor:
    """Horizontally flip each image with probability p (training loops only)."""
    mask = torch.rand(images.shape[0], generator=generator) < p
    out = images.clone()
    out[mask] = torch.flip(out[mask], dims=[-1])
    return out


def save_image(tensor: torch.Tensor, path: str | Path) -> None:
    """Write one CHW [-1,1] tensor as a lossless PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = ((tensor.clamp(-1, 1) + 1.0) * 127.5).round().to(torch.uint8)
    arr = arr.permute(1, 2, 0).cpu().numpy()
    Image.fromarray(arr).save(path, format="PNG")


def load_image_dir(root: str | Path, image_size: int) -> LabeledImages:
    """Read reconstruction output layout <root>/<class_id>/<index>.png."""
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"reconstruction directory not found: {root}")
    entries = []
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        try:
            label = int(sub.name)
        except ValueError:
            raise IngestionError(f"non-numeric class directory: {sub.name!r}")
        for f in sorted(sub.glob("*.png")):
            entries.append((f, label))
    if not entries:
        raise IngestionError(f"no reconstructions under {root}")
    images = torch.stack([preprocess(f, image_size) for f, _ in entries])
    labels = torch.tensor([lab - 1 for _, lab in entries], dtype=torch.int64)
    return LabeledImages(images, labels, [str(f) for f, _ in entries])
