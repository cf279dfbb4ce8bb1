"""Command-line entry point.

Stages run in order: split, train-classifier, select, pretrain, finetune,
attack, evaluate. Every stage is deterministic given (--config, --seed) and
reads earlier artifacts from --out. Errors exit nonzero with a category
prefix; exit codes distinguish configuration, ingestion, split-integrity,
persistence, training, and numerical failures.
"""

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import ExperimentConfig, load_config, validate_config
from .errors import ConfigError, DiffInvError
from .synthetic import default_private_classes, generate_corpus

log = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diffinv",
        description="Diffusion-prior model-inversion attack pipeline",
    )
    parser.add_argument("--config", help="experiment config file (YAML)")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument(
        "--out", default="out", help="artifact directory shared by all stages"
    )
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("split", help="partition the corpus into private/public")

    p = sub.add_parser("train-classifier", help="train target and eval classifiers")
    p.add_argument(
        "--which", default="both", choices=["target", "eval", "both"],
        help="which classifier role to train",
    )
    p.add_argument(
        "--report", action="store_true", help="also write accuracy report JSON"
    )

    sub.add_parser("select", help="pseudo-label top-n public images per class")
    sub.add_parser("pretrain", help="train the conditional diffusion prior")
    sub.add_parser("finetune", help="probe, rank, and fine-tune selected layers")

    p = sub.add_parser("attack", help="reconstruct private-class images")
    p.add_argument("--iterations", type=int, help="reconstruction iterations N")
    p.add_argument("--guidance-scale", type=float, help="guidance scale s")
    p.add_argument("--top-k", type=int, help="top-k width of the margin loss")
    p.add_argument("--alpha", type=float, help="centroid regularizer weight")
    p.add_argument("--loss", help="loss family (cross_entropy|max_margin|top_k|poincare|combined)")
    p.add_argument("--t-hi", type=int, help="annealing start timestep")
    p.add_argument("--t-lo", type=int, help="annealing end timestep")
    p.add_argument("--t-jitter", type=int, help="timestep perturbation half-width")
    p.add_argument("--images-per-class", type=int, help="reconstructions per class")
    p.add_argument("--pgd-step", type=float, help="PGD step size")
    p.add_argument("--pgd-eps", type=float, help="PGD l2 radius")
    p.add_argument("--pgd-iters", type=int, help="PGD iterations")
    p.add_argument("--no-pgd", action="store_true", help="skip PGD refinement")
    p.add_argument("--no-denoise", action="store_true", help="skip post-denoising")
    p.add_argument(
        "--prior", default="auto", choices=["auto", "pretrain", "finetune"],
        help="which diffusion prior to attack with",
    )
    p.add_argument("--recon-dir", help="override the reconstruction directory")

    p = sub.add_parser("evaluate", help="score reconstructions against private data")
    p.add_argument("--recon-dir", help="reconstruction directory to evaluate")

    p = sub.add_parser("synth-data", help="generate the synthetic corpus")
    p.add_argument("--root", required=True, help="corpus output directory")
    p.add_argument("--classes", type=int, default=20)
    p.add_argument("--per-class", type=int, default=60)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--data-seed", type=int, default=0)
    return parser


def _require_config(args) -> ExperimentConfig:
    if not args.config:
        raise ConfigError(f"--config is required for `{args.command}`")
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _apply_attack_overrides(cfg: ExperimentConfig, args) -> None:
    mapping = {
        "iterations": "iterations",
        "guidance_scale": "guidance_scale",
        "top_k": "top_k",
        "alpha": "alpha",
        "loss": "loss",
        "t_hi": "t_hi",
        "t_lo": "t_lo",
        "t_jitter": "t_jitter",
        "images_per_class": "images_per_class",
    }
    for arg_name, field in mapping.items():
        value = getattr(args, arg_name)
        if value is not None:
            setattr(cfg.attack, field, value)
    if args.pgd_step is not None:
        cfg.attack.pgd.step_size = args.pgd_step
    if args.pgd_eps is not None:
        cfg.attack.pgd.epsilon = args.pgd_eps
    if args.pgd_iters is not None:
        cfg.attack.pgd.iterations = args.pgd_iters


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.command == "synth-data":
        generate_corpus(
            args.root,
            num_classes=args.classes,
            per_class=args.per_class,
            image_size=args.image_size,
            seed=args.data_seed,
        )
        private = default_private_classes(args.classes)
        print(f"corpus written to {args.root}")
        print(f"suggested private classes: {private}")
        return 0

    cfg = _require_config(args)
    if args.command == "split":
        pipeline.stage_split(cfg, out)
    elif args.command == "train-classifier":
        pipeline.stage_train_classifier(cfg, out, which=args.which, report=args.report)
    elif args.command == "select":
        pipeline.stage_select(cfg, out)
    elif args.command == "pretrain":
        pipeline.stage_pretrain(cfg, out)
    elif args.command == "finetune":
        pipeline.stage_finetune(cfg, out)
    elif args.command == "attack":
        _apply_attack_overrides(cfg, args)
        validate_config(cfg)
        pipeline.stage_attack(
            cfg, out,
            prior=args.prior,
            use_pgd=not args.no_pgd,
            use_denoise=not args.no_denoise,
            recon_dir=Path(args.recon_dir) if args.recon_dir else None,
        )
    elif args.command == "evaluate":
        pipeline.stage_evaluate(
            cfg, out, recon_dir=Path(args.recon_dir) if args.recon_dir else None
        )
    return 0


def main() -> None:
    try:
        sys.exit(run())
    except DiffInvError as err:
        print(f"error [{err.category}]: {err}", file=sys.stderr)
        sys.exit(err.exit_code)


if __name__ == "__main__":
    main()
