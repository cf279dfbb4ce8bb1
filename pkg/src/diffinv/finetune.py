"""Target-specific fine-tuning of the pretrained denoiser.

Phase A (probe): briefly fine-tune the label embedding plus the whole
middle block, measure each middle layer's relative parameter change
rate, pick the top-L layers, then restore the pretrained weights exactly.
Phase B: re-train only the selected layers (plus the label embedding) by
sampling images per target label, scoring every sampler step's predicted
x0 with the classifier under random crop/flip augmentations, and
minimizing the mean loss. Stops after a fixed number of epochs or once
generated images reach a prediction-accuracy threshold.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .classifiers import ClassifierHandle
from .config import FinetuneConfig
from .determinism import generator
from .diffusion.sampling import sample
from .diffusion.schedule import NoiseSchedule
from .diffusion.unet import ConditionalDenoiser, middle_layer_kinds, middle_layer_names
from .errors import ConfigError, TrainingError
from .losses import cross_entropy

log = logging.getLogger(__name__)


@dataclass
class ChangeRateReport:
    """Relative parameter drift per candidate layer, ranked descending."""

    deltas: dict[str, float]
    ranking: list[str]
    excluded: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        kinds = middle_layer_kinds()
        return {
            "layers": [
                {"name": name, "delta": self.deltas[name], "kind": kinds.get(name, "other")}
                for name in self.deltas
            ],
            "ranking": self.ranking,
            "excluded": self.excluded,
        }


def write_change_report(report: ChangeRateReport, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.to_json(), indent=2) + "\n")


def change_rates(
    before: dict[str, torch.Tensor],
    after: dict[str, torch.Tensor],
    groups: dict[str, list[str]],
) -> ChangeRateReport:
    """Frobenius-relative drift per layer: ||after - before|| / ||before||.

    `groups` maps layer name to its parameter names, in candidate order;
    ties in the ranking keep that order. Layers whose original norm is
    zero are excluded with a warning.
    """
    deltas: dict[str, float] = {}
    excluded: list[str] = []
    for layer, names in groups.items():
        sq_base, sq_diff = 0.0, 0.0
        for name in names:
            if name not in before or name not in after:
                raise ConfigError(f"parameter {name} missing from a snapshot")
            b, a = before[name], after[name]
            if b.shape != a.shape:
                raise ConfigError(f"parameter {name} changed shape across snapshots")
            sq_base += float((b.double() ** 2).sum())
            sq_diff += float(((a.double() - b.double()) ** 2).sum())
        if sq_base == 0.0:
            log.warning("layer %s has zero original norm; excluded from ranking", layer)
            excluded.append(layer)
            continue
        deltas[layer] = (sq_diff ** 0.5) / (sq_base ** 0.5)
    order = list(deltas)
    ranking = sorted(order, key=lambda l: (-deltas[l], order.index(l)))
    return ChangeRateReport(deltas=deltas, ranking=ranking, excluded=excluded)


def select_layers(report: ChangeRateReport, L: int) -> list[str]:
    """Top-L layers by change rate, always joined by the label embedding."""
    if L > len(report.ranking):
        raise ConfigError(
            f"cannot keep {L} layers; only {len(report.ranking)} ranked"
        )
    return report.ranking[:L] + ["label_embedding"]


def random_augment(x: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    """Differentiable random resized crop plus horizontal flip, per sample."""
    size = x.shape[-1]
    out = []
    for i in range(x.shape[0]):
        scale = 0.8 + 0.2 * torch.rand((), generator=gen).item()
        crop = max(4, round(scale * size))
        crop = min(crop, size)
        top = int(torch.randint(0, size - crop + 1, (), generator=gen))
        left = int(torch.randint(0, size - crop + 1, (), generator=gen))
        patch = x[i : i + 1, :, top : top + crop, left : left + crop]
        patch = torch.nn.functional.interpolate(
            patch, size=(size, size), mode="bilinear", align_corners=False
        )
        if torch.rand((), generator=gen) < 0.5:
            patch = torch.flip(patch, dims=[-1])
        out.append(patch)
    return torch.cat(out)


def generation_loss(
    model: ConditionalDenoiser,
    schedule: NoiseSchedule,
    classifier: ClassifierHandle,
    y: torch.Tensor,
    recipe: FinetuneConfig,
    gen: torch.Generator,
    step_mask: list[float] | None = None,
) -> torch.Tensor:
    """Mean classifier loss over sampler steps and augmentations for labels y.

    `step_mask` weights individual sampler steps; it exists so gradient
    flow through each step can be probed independently.
    """
    if recipe.augmentations < 1:
        raise ConfigError("finetuning needs at least 1 augmentation per step")
    size = model.image_size
    x_init = torch.randn(len(y), 3, size, size, generator=gen)
    _, trace = sample(
        model, schedule, y, recipe.guidance_scale, recipe.sampler_steps, x_init=x_init
    )
    steps = trace if recipe.multi_timestep else trace[-1:]
    total = x_init.new_zeros(())
    count = 0
    for i, x0 in enumerate(steps):
        weight = 1.0 if step_mask is None else step_mask[i]
        for _ in range(recipe.augmentations):
            augmented = random_augment(x0, gen)
            total = total + weight * cross_entropy(classifier.logits(augmented), y).mean()
            count += 1
    return total / count


def generated_accuracy(
    model: ConditionalDenoiser,
    schedule: NoiseSchedule,
    classifier: ClassifierHandle,
    targets: torch.Tensor,
    recipe: FinetuneConfig,
    gen: torch.Generator,
) -> float:
    """Fraction of freshly sampled images the classifier assigns their label."""
    with torch.no_grad():
        x_init = torch.randn(
            len(targets), 3, model.image_size, model.image_size, generator=gen
        )
        images, _ = sample(
            model, schedule, targets, recipe.guidance_scale, recipe.sampler_steps,
            x_init=x_init,
        )
        pred = classifier.logits(images).argmax(dim=1)
    return (pred == targets).float().mean().item()


def _snapshot(model: torch.nn.Module, names: set[str] | None = None) -> dict[str, torch.Tensor]:
    return {
        name: p.detach().clone()
        for name, p in model.named_parameters()
        if names is None or name in names
    }


def _restore(model: torch.nn.Module, snap: dict[str, torch.Tensor]) -> None:
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name in snap:
                p.copy_(snap[name])


def finetune(
    model: ConditionalDenoiser,
    schedule: NoiseSchedule,
    classifier: ClassifierHandle,
    targets: list[int],
    recipe: FinetuneConfig,
    seed: int,
) -> tuple[ConditionalDenoiser, ChangeRateReport, dict]:
    """Two-phase fine-tuning in place; returns (model, probe report, history)."""
    if not targets:
        raise ConfigError("finetune needs at least one target label")
    gen = generator(seed, "finetune")
    eval_gen = generator(seed, "finetune-eval")
    groups = model.parameter_groups()
    middle_groups = {name: groups[name] for name in middle_layer_names()}
    candidate_names = set(groups["label_embedding"])
    for names in middle_groups.values():
        candidate_names.update(names)

    y_all = torch.tensor(targets, dtype=torch.int64)
    pristine = _snapshot(model)

    # Phase A: probe the full candidate set, rank drift, restore.
    probe_params = [p for n, p in model.named_parameters() if n in candidate_names]
    opt = torch.optim.AdamW(probe_params, lr=recipe.lr, weight_decay=0.0)
    model.train()
    for _ in range(recipe.probe_epochs):
        for start in range(0, len(y_all), recipe.batch_size):
            y = y_all[start : start + recipe.batch_size]
            loss = generation_loss(model, schedule, classifier, y, recipe, gen)
            if not torch.isfinite(loss):
                _restore(model, pristine)
                raise TrainingError("probe fine-tuning loss became non-finite")
            opt.zero_grad()
            loss.backward()
            opt.step()
    report = change_rates(pristine, _snapshot(model), middle_groups)
    _restore(model, pristine)

    selection = select_layers(report, recipe.layers_to_keep)
    selected_names: set[str] = set()
    for layer in selection:
        selected_names.update(groups[layer])
    log.info("finetuning layers: %s", ", ".join(selection))

    # Phase B: optimize only the selected layers.
    params = [p for n, p in model.named_parameters() if n in selected_names]
    opt = torch.optim.AdamW(params, lr=recipe.lr, weight_decay=0.0)
    epoch_cap = recipe.epochs if recipe.scheme == "fixed_epochs" else recipe.max_epochs
    history: dict = {"selection": selection, "epochs": []}
    last_good = _snapshot(model, selected_names)
    for epoch in range(1, epoch_cap + 1):
        model.train()
        epoch_loss, batches = 0.0, 0
        for start in range(0, len(y_all), recipe.batch_size):
            y = y_all[start : start + recipe.batch_size]
            loss = generation_loss(model, schedule, classifier, y, recipe, gen)
            if not torch.isfinite(loss):
                _restore(model, last_good)
                raise TrainingError(
                    f"fine-tuning loss became non-finite in epoch {epoch}; "
                    "restored last completed epoch"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += loss.item()
            batches += 1
        last_good = _snapshot(model, selected_names)
        entry = {"epoch": epoch, "loss": epoch_loss / batches}
        if recipe.scheme == "accuracy_threshold":
            model.eval()
            acc = generated_accuracy(model, schedule, classifier, y_all, recipe, eval_gen)
            entry["generated_acc"] = acc
            history["epochs"].append(entry)
            log.info("finetune epoch %d loss %.4f generated_acc %.3f", epoch, entry["loss"], acc)
            if acc >= recipe.accuracy_threshold:
                break
        else:
            history["epochs"].append(entry)
            log.info("finetune epoch %d loss %.4f", epoch, entry["loss"])
    else:
        if recipe.scheme == "accuracy_threshold":
            log.warning(
                "accuracy threshold %.2f not reached within %d epochs",
                recipe.accuracy_threshold, epoch_cap,
            )
    model.eval()
    return model, report, history
