"""Experiment configuration: one declarative YAML file with a section per stage.

Unknown keys are rejected (fail fast rather than silently ignoring a typo).
Labels in the config file are 1-based, matching manifests and the CLI; all
in-memory tensors use 0-based labels.
"""

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError


@dataclass
class DataConfig:
    source_dir: str = ""
    # source-corpus class labels that form the private side; everything else is public
    private_classes: list[int] = field(default_factory=list)


@dataclass
class ClassifierConfig:
    target_arch: str = "convnet"
    eval_arch: str = "resnet"
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 1e-4
    # pixel transform applied on top of the [-1,1] diffusion range before the
    # classifier forward pass: "identity" consumes [-1,1] directly, "unit"
    # rescales to [0,1]
    input_transform: str = "identity"


@dataclass
class SelectConfig:
    top_n: int = 30


@dataclass
class PretrainConfig:
    timesteps: int = 1000
    schedule: str = "linear"
    steps: int = 50_000
    batch_size: int = 150
    lr: float = 1e-4
    ema_rate: float = 0.9999
    ema_warmup: bool = True
    label_dropout: float = 0.1
    base_width: int = 32
    val_every: int = 200
    log_every: int = 100


@dataclass
class FinetuneConfig:
    layers_to_keep: int = 5
    probe_epochs: int = 1
    scheme: str = "fixed_epochs"  # or "accuracy_threshold"
    epochs: int = 20
    accuracy_threshold: float = 0.99
    max_epochs: int = 100
    augmentations: int = 2
    sampler_steps: int = 10
    guidance_scale: float = 3.0
    batch_size: int = 4
    lr: float = 2e-4
    multi_timestep: bool = True


@dataclass
class PgdConfig:
    step_size: float = 0.1
    epsilon: float = 0.5
    iterations: int = 10


@dataclass
class AttackConfig:
    iterations: int = 30
    guidance_scale: float = 3.0
    lr: float = 1.0
    t_hi: int = 1000
    t_lo: int = 200
    t_jitter: int = 50
    images_per_class: int = 5
    loss: str = "combined"  # cross_entropy | max_margin | top_k | poincare | combined
    top_k: int = 20
    alpha: float = 1.0
    top_k_aggregate: str = "mean"
    prior_weight: float = 1.0
    cls_weight: float = 1.0
    denoise_t: int = 150
    denoise_guidance_scale: float = 1.0
    sampler_steps: int = 10
    pgd: PgdConfig = field(default_factory=PgdConfig)


@dataclass
class EvaluateConfig:
    prdc_k: int = 3


@dataclass
class ExperimentConfig:
    seed: int = 0
    image_size: int = 32
    num_classes: int = 10
    deterministic: bool = True
    data: DataConfig = field(default_factory=DataConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    select: SelectConfig = field(default_factory=SelectConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    evaluate: EvaluateConfig = field(default_factory=EvaluateConfig)


def _coerce(value, target_type, where: str):
    if target_type is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if target_type is int and isinstance(value, bool):
        raise ConfigError(f"{where}: expected int, got bool")
    if not isinstance(value, target_type):
        raise ConfigError(
            f"{where}: expected {target_type.__name__}, got {type(value).__name__}"
        )
    return value


def _build(cls, mapping, where: str):
    if mapping is None:
        mapping = {}
    if not isinstance(mapping, dict):
        raise ConfigError(f"{where}: expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(mapping) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for name, f in fields.items():
        if name not in mapping:
            continue
        value = mapping[name]
        if dataclasses.is_dataclass(f.type) or (
            isinstance(f.type, type) and dataclasses.is_dataclass(f.type)
        ):
            kwargs[name] = _build(f.type, value, f"{where}.{name}")
        elif f.type in (int, float, str, bool):
            kwargs[name] = _coerce(value, f.type, f"{where}.{name}")
        elif f.type == list[int]:
            if not isinstance(value, list) or not all(
                isinstance(v, int) and not isinstance(v, bool) for v in value
            ):
                raise ConfigError(f"{where}.{name}: expected a list of ints")
            kwargs[name] = list(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def validate_config(cfg: ExperimentConfig) -> None:
    if cfg.num_classes < 2:
        raise ConfigError(f"num_classes must be >= 2, got {cfg.num_classes}")
    if cfg.image_size < 8 or cfg.image_size % 2 != 0:
        raise ConfigError(f"image_size must be even and >= 8, got {cfg.image_size}")
    if cfg.data.source_dir and not Path(cfg.data.source_dir).is_dir():
        raise ConfigError(f"data.source_dir does not exist: {cfg.data.source_dir}")
    if cfg.classifier.input_transform not in ("identity", "unit"):
        raise ConfigError(
            f"classifier.input_transform must be identity|unit, "
            f"got {cfg.classifier.input_transform!r}"
        )
    if cfg.finetune.scheme not in ("fixed_epochs", "accuracy_threshold"):
        raise ConfigError(f"finetune.scheme unknown: {cfg.finetune.scheme!r}")
    if not (0.0 < cfg.finetune.accuracy_threshold <= 1.0):
        raise ConfigError("finetune.accuracy_threshold must be in (0, 1]")
    if not (1 <= cfg.finetune.layers_to_keep <= 13):
        raise ConfigError("finetune.layers_to_keep must be in 1..13")
    if cfg.attack.pgd.step_size <= 0 or cfg.attack.pgd.epsilon <= 0:
        raise ConfigError("attack.pgd step_size and epsilon must be > 0")
    if cfg.attack.pgd.iterations < 0:
        raise ConfigError("attack.pgd.iterations must be >= 0")
    T = cfg.pretrain.timesteps
    if not (1 <= cfg.attack.t_lo <= cfg.attack.t_hi <= T):
        raise ConfigError(
            f"attack time range must satisfy 1 <= t_lo <= t_hi <= {T}, "
            f"got [{cfg.attack.t_lo}, {cfg.attack.t_hi}]"
        )
    if cfg.attack.t_jitter < 0:
        raise ConfigError("attack.t_jitter must be >= 0")
    if not (1 <= cfg.attack.denoise_t <= T):
        raise ConfigError("attack.denoise_t must be in 1..timesteps")


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"config is not valid YAML: {e}") from e
    cfg = _build(ExperimentConfig, raw, "config")
    validate_config(cfg)
    return cfg
