"""Stage orchestration over a shared output directory.

Each stage reads its inputs from earlier stages' artifacts under `out`,
runs deterministically from (config, seed), and writes immutable outputs:

    split.json                  private/public partition manifest
    classifier_target.pt        attacked model
    classifier_eval.pt          held-out evaluation model
    selection.json / .pt        pseudo-label audit manifest + indices
    pretrain.pt                 denoiser (raw + EMA weights)
    finetune.pt                 fine-tuned denoiser + change-rate report
    recon/<class>/<i>.png       reconstructions, plus traces.csv
    report.json / report.txt    evaluation metrics
"""

import json
import logging
from pathlib import Path

from .checkpoints import load_checkpoint, require_meta, save_checkpoint
from .classifiers import (
    ClassifierHandle,
    load_classifier,
    save_classifier,
    train_classifier,
)
from .config import ExperimentConfig
from .data import (
    DatasetSplit,
    LabeledImages,
    load_image_dir,
    load_manifest,
    load_private_images,
    load_public_images,
    save_image,
    split_dataset,
    write_manifest,
)
from .determinism import enable_deterministic, seed_everything
from .diffusion import (
    ConditionalDenoiser,
    NoiseSchedule,
    load_diffusion,
    make_schedule,
    pretrain,
    save_diffusion,
)
from .diffusion.pretrain import load_ema_weights
from .errors import ConfigError, PersistenceError
from .finetune import finetune, write_change_report
from .losses import estimate_centroids
from .metrics import classifier_embedder, evaluate_attack, write_report
from .pseudo_label import (
    PseudoLabeledDataset,
    auto_top_n,
    select_top_n,
    write_selection_manifest,
)
from .reconstruct import reconstruct_classes, write_trace_csv

log = logging.getLogger(__name__)


def _prepare(cfg: ExperimentConfig) -> None:
    seed_everything(cfg.seed)
    if cfg.deterministic:
        enable_deterministic()


def _load_split(cfg: ExperimentConfig, out: Path) -> DatasetSplit:
    path = out / "split.json"
    if not path.is_file():
        raise PersistenceError(f"split manifest missing; run `split` first ({path})")
    split = load_manifest(path, verify_digests=False)
    if split.image_size != cfg.image_size:
        raise PersistenceError(
            f"split was made for image_size {split.image_size}, config says {cfg.image_size}"
        )
    return split


def stage_split(cfg: ExperimentConfig, out: Path) -> Path:
    _prepare(cfg)
    split = split_dataset(cfg.data.source_dir, cfg.data.private_classes, cfg)
    path = out / "split.json"
    write_manifest(split, path)
    log.info(
        "split: %d private images over %d classes, %d public images",
        len(split.private), split.num_classes, len(split.public),
    )
    return path


def stage_train_classifier(
    cfg: ExperimentConfig, out: Path, which: str = "both", report: bool = False
) -> list[Path]:
    _prepare(cfg)
    split = _load_split(cfg, out)
    private = load_private_images(split, cfg.image_size)
    jobs = []
    if which in ("target", "both"):
        jobs.append(("target", cfg.classifier.target_arch))
    if which in ("eval", "both"):
        jobs.append(("eval", cfg.classifier.eval_arch))
    if not jobs:
        raise ConfigError(f"unknown classifier role {which!r}; use target, eval, or both")
    if cfg.classifier.target_arch == cfg.classifier.eval_arch:
        raise ConfigError(
            "target and evaluation classifiers must differ in architecture"
        )
    paths = []
    for role, arch in jobs:
        handle, rep = train_classifier(
            private, arch, cfg.num_classes, cfg.classifier,
            seed=cfg.seed + (0 if role == "target" else 1),
        )
        path = out / f"classifier_{role}.pt"
        save_classifier(handle, path)
        paths.append(path)
        log.info(
            "%s classifier (%s): final val acc %.3f", role, arch, rep["final_val_acc"]
        )
        if report:
            rpath = out / f"classifier_{role}_report.json"
            rpath.write_text(json.dumps(rep, indent=2) + "\n")
            paths.append(rpath)
    return paths


def _load_role_classifier(cfg: ExperimentConfig, out: Path, role: str) -> ClassifierHandle:
    path = out / f"classifier_{role}.pt"
    if not path.is_file():
        raise PersistenceError(
            f"{role} classifier missing; run `train-classifier` first ({path})"
        )
    arch = cfg.classifier.target_arch if role == "target" else cfg.classifier.eval_arch
    handle = load_classifier(path, expect_arch=arch)
    if handle.num_classes != cfg.num_classes:
        raise PersistenceError(
            f"{role} classifier has {handle.num_classes} classes, config says {cfg.num_classes}"
        )
    return handle


def stage_select(cfg: ExperimentConfig, out: Path) -> Path:
    _prepare(cfg)
    split = _load_split(cfg, out)
    target = _load_role_classifier(cfg, out, "target")
    public = load_public_images(split, cfg.image_size)
    n = cfg.select.top_n if cfg.select.top_n > 0 else auto_top_n(len(public.images))
    dataset = select_top_n(target, public, n)
    write_selection_manifest(dataset, out / "selection.json")
    save_checkpoint(
        out / "selection.pt",
        "selection",
        {
            "source_indices": dataset.source_indices,
            "labels": dataset.labels,
            "scores": dataset.scores,
            "per_class": dataset.per_class,
        },
        {"top_n": n, "num_classes": cfg.num_classes, "image_size": cfg.image_size},
    )
    return out / "selection.pt"


def _load_selection(cfg: ExperimentConfig, out: Path) -> PseudoLabeledDataset:
    path = out / "selection.pt"
    if not path.is_file():
        raise PersistenceError(f"selection missing; run `select` first ({path})")
    payload, meta = load_checkpoint(path, "selection")
    require_meta(meta, path, num_classes=cfg.num_classes, image_size=cfg.image_size)
    split = _load_split(cfg, out)
    public = load_public_images(split, cfg.image_size)
    idx = payload["source_indices"]
    return PseudoLabeledDataset(
        images=public.images[idx],
        labels=payload["labels"],
        source_indices=idx,
        per_class=payload["per_class"],
        scores=payload["scores"],
        source_paths=list(public.paths),
    )


def stage_pretrain(cfg: ExperimentConfig, out: Path) -> Path:
    _prepare(cfg)
    data = _load_selection(cfg, out)
    schedule = make_schedule(cfg.pretrain.timesteps, cfg.pretrain.schedule)
    model = ConditionalDenoiser(
        cfg.num_classes, cfg.image_size, base_width=cfg.pretrain.base_width
    )
    model, ema_state, history = pretrain(model, schedule, data, cfg.pretrain, cfg.seed)
    path = out / "pretrain.pt"
    save_diffusion(path, model, ema_state, schedule, {"stage": "pretrain"})
    (out / "pretrain_history.json").write_text(json.dumps(history, indent=2) + "\n")
    return path


def _load_prior(
    cfg: ExperimentConfig, out: Path, prefer: str = "auto"
) -> tuple[ConditionalDenoiser, NoiseSchedule]:
    """Load the attack prior: fine-tuned raw weights, or pretrain EMA weights."""
    finetune_path = out / "finetune.pt"
    pretrain_path = out / "pretrain.pt"
    if prefer not in ("auto", "finetune", "pretrain"):
        raise ConfigError(f"unknown prior choice {prefer!r}")
    use_finetune = prefer == "finetune" or (prefer == "auto" and finetune_path.is_file())
    if use_finetune:
        if not finetune_path.is_file():
            raise PersistenceError(f"fine-tuned prior missing ({finetune_path})")
        model, _, schedule, meta = load_diffusion(finetune_path)
        require_meta(meta, finetune_path, image_size=cfg.image_size, num_classes=cfg.num_classes)
        log.info("using fine-tuned prior %s", finetune_path)
        return model, schedule
    if not pretrain_path.is_file():
        raise PersistenceError(f"pretrained prior missing; run `pretrain` ({pretrain_path})")
    model, ema_state, schedule, meta = load_diffusion(pretrain_path)
    require_meta(meta, pretrain_path, image_size=cfg.image_size, num_classes=cfg.num_classes)
    log.info("using pretrained prior (EMA weights) %s", pretrain_path)
    return load_ema_weights(model, ema_state), schedule


def stage_finetune(cfg: ExperimentConfig, out: Path) -> Path:
    _prepare(cfg)
    pretrain_path = out / "pretrain.pt"
    if not pretrain_path.is_file():
        raise PersistenceError(f"pretrained prior missing; run `pretrain` ({pretrain_path})")
    model, ema_state, schedule, meta = load_diffusion(pretrain_path)
    require_meta(meta, pretrain_path, image_size=cfg.image_size, num_classes=cfg.num_classes)
    target = _load_role_classifier(cfg, out, "target")
    targets = list(range(cfg.num_classes))
    model, report, history = finetune(
        model, schedule, target, targets, cfg.finetune, cfg.seed
    )
    path = out / "finetune.pt"
    # EMA snapshot is carried through untouched so the pretrain weights stay recoverable.
    save_diffusion(path, model, ema_state, schedule, {"stage": "finetune"})
    write_change_report(report, out / "change_report.json")
    (out / "finetune_history.json").write_text(json.dumps(history, indent=2) + "\n")
    return path


def stage_attack(
    cfg: ExperimentConfig,
    out: Path,
    prior: str = "auto",
    use_pgd: bool = True,
    use_denoise: bool = True,
    recon_dir: Path | None = None,
) -> Path:
    _prepare(cfg)
    model, schedule = _load_prior(cfg, out, prefer=prior)
    target = _load_role_classifier(cfg, out, "target")
    table = None
    if cfg.attack.loss == "combined":
        table = estimate_centroids(target, _load_selection(cfg, out))
    targets = list(range(cfg.num_classes))
    results = reconstruct_classes(
        model, schedule, target, targets, cfg.attack, table, cfg.seed,
        use_pgd=use_pgd, use_denoise=use_denoise,
    )
    recon_dir = recon_dir if recon_dir is not None else out / "recon"
    for res in results:
        for i in range(res.images.shape[0]):
            save_image(res.images[i], recon_dir / str(res.label + 1) / f"{i:03d}.png")
    write_trace_csv(results, recon_dir / "traces.csv")
    return recon_dir


def stage_evaluate(
    cfg: ExperimentConfig, out: Path, recon_dir: Path | None = None
) -> Path:
    _prepare(cfg)
    split = _load_split(cfg, out)
    private = load_private_images(split, cfg.image_size)
    eval_model = _load_role_classifier(cfg, out, "eval")
    recon_dir = recon_dir if recon_dir is not None else out / "recon"
    recon = load_image_dir(recon_dir, cfg.image_size)
    report = evaluate_attack(
        recon, private, eval_model,
        embedder=classifier_embedder(eval_model),
        prdc_k=cfg.evaluate.prdc_k,
    )
    write_report(report, out / "report.json")
    (out / "report.txt").write_text(report.format_table() + "\n")
    log.info("\n%s", report.format_table())
    return out / "report.json"


def evaluate_tensors(
    cfg: ExperimentConfig,
    recon: LabeledImages,
    private: LabeledImages,
    eval_model: ClassifierHandle,
):
    """In-memory evaluation used by ablation harnesses and tests."""
    return evaluate_attack(
        recon, private, eval_model,
        embedder=classifier_embedder(eval_model),
        prdc_k=cfg.evaluate.prdc_k,
    )
