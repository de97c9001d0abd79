"""Nonlinear transforms and the two defenses.

The mitigation loop accumulates transformed copies of the poisoned set (one
new transform per iteration, drawn without replacement) and retrains a fresh
victim on the accumulation until clean-set accuracy reaches the target.
PGD adversarial training is provided as the comparison baseline.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from . import modelkit as mk
from .datasets import LabeledDataset
from .imageops import clamp_valid, hsv_to_rgb, project_linf, rgb_to_hsv

GRAYSCALE = "grayscale"
COLOR_JITTER = "color_jitter"
RANDOM_INVERT = "random_invert"
TRANSFORM_KINDS = (GRAYSCALE, COLOR_JITTER, RANDOM_INVERT)

# ITU-R BT.601 luminance weights, summed in float64 so a second application
# reproduces the first bit-for-bit.
_LUMA = torch.tensor([0.299, 0.587, 0.114], dtype=torch.float64)


def grayscale(image: torch.Tensor) -> torch.Tensor:
    """Replicate BT.601 luminance into all three channels."""
    y = (image.to(torch.float64) * _LUMA.view(3, 1, 1)).sum(dim=0)
    return y.expand(3, -1, -1).to(image.dtype)


def color_jitter(image: torch.Tensor, rng: np.random.Generator,
                 brightness_delta: float = 0.5, hue_delta: float = 0.3) -> torch.Tensor:
    """Random brightness scale then random hue rotation.

    b ~ U[1 - brightness_delta, 1 + brightness_delta], h ~ U[-hue_delta,
    +hue_delta] (fraction of a full turn).  Factors of exactly b = 1 / h = 0
    are skipped so the identity case is exact.
    """
    b = rng.uniform(1.0 - brightness_delta, 1.0 + brightness_delta)
    h = rng.uniform(-hue_delta, hue_delta)
    out = image
    if b != 1.0:
        out = clamp_valid(out * b)
    if h != 0.0:
        hsv = rgb_to_hsv(out)
        hsv[0] = (hsv[0] + h) % 1.0
        out = clamp_valid(hsv_to_rgb(hsv))
    return out


def random_invert(image: torch.Tensor, rng: np.random.Generator, probability: float = 1.0) -> torch.Tensor:
    """With the given probability map every component x to 1 - x."""
    if probability > 0 and (probability >= 1.0 or rng.uniform() < probability):
        return 1.0 - image
    return image.clone()


@dataclass
class Transform:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in TRANSFORM_KINDS:
            raise ValueError(f"unknown transform kind: {self.kind!r}")

    def apply(self, image: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
        if self.kind == GRAYSCALE:
            return grayscale(image)
        if self.kind == COLOR_JITTER:
            return color_jitter(image, rng,
                                self.params.get("brightness_delta", 0.5),
                                self.params.get("hue_delta", 0.3))
        return random_invert(image, rng, self.params.get("probability", 1.0))


def transform_dataset(dataset: LabeledDataset, transform: Transform, seed: int) -> LabeledDataset:
    """Apply ``transform`` per image with an rng stream keyed by (seed, index)."""
    images = torch.empty_like(dataset.images)
    for i in range(len(dataset)):
        rng = np.random.default_rng([seed, i])
        images[i] = transform.apply(dataset.images[i], rng)
    return LabeledDataset(images, dataset.labels.clone(), dataset.num_classes,
                          name=f"{dataset.name}-{transform.kind}")


def _concat(parts: list[LabeledDataset]) -> LabeledDataset:
    return LabeledDataset(
        torch.cat([p.images for p in parts]),
        torch.cat([p.labels for p in parts]),
        parts[0].num_classes,
        name=parts[0].name,
    )


@dataclass
class MitigationConfig:
    transforms: tuple[str, ...] = TRANSFORM_KINDS
    target_accuracy: float = 0.95  # absolute; callers typically pass 0.95 x clean baseline
    victim_arch: str = "small_cnn"
    epochs_per_iteration: int = 20
    batch_size: int = 128
    learning_rate: float = 0.01
    momentum: float = 0.9
    seed: int = 42

    def __post_init__(self):
        if not self.transforms:
            raise ValueError("transform set must be nonempty")
        if not 0 < self.target_accuracy <= 1:
            raise ValueError("target_accuracy must be in (0, 1]")


@dataclass
class MitigationResult:
    model: torch.nn.Module
    log: mk.MetricsLog
    transforms_used: list[str]
    accuracy: float
    reached_target: bool
    per_iteration: list[dict]


def mitigate(poisoned: LabeledDataset, clean_eval: LabeledDataset, cfg: MitigationConfig) -> MitigationResult:
    """Transform-accumulation retraining loop.

    Starts from an empty accumulation, draws an unused transform uniformly,
    appends the transformed poisoned set, trains a fresh victim for the
    configured epochs, and stops once clean-set accuracy reaches the target
    or the transform set is exhausted (flagged, not an exception).  The raw
    poisoned set itself is never trained on untransformed.
    """
    if len(clean_eval) == 0:
        raise ValueError("clean_eval is empty")
    rng = np.random.default_rng(cfg.seed)
    remaining = list(cfg.transforms)
    side = poisoned.image_shape[1]

    accumulated: list[LabeledDataset] = []
    used: list[str] = []
    per_iteration: list[dict] = []
    best: tuple[float, torch.nn.Module | None] = (-1.0, None)
    full_log = mk.MetricsLog()
    accuracy = 0.0
    reached = False

    for iteration in range(1, len(cfg.transforms) + 1):
        kind = remaining.pop(int(rng.integers(len(remaining))))
        used.append(kind)
        accumulated.append(transform_dataset(poisoned, Transform(kind), seed=cfg.seed + iteration))
        train_set = _concat(accumulated)
        victim = mk.build_model(cfg.victim_arch, poisoned.num_classes, cfg.seed, side)
        opt = mk.OptimizerConfig(kind="sgd", learning_rate=cfg.learning_rate, momentum=cfg.momentum,
                                 epochs=cfg.epochs_per_iteration, batch_size=cfg.batch_size, seed=cfg.seed)
        victim, log = mk.train(victim, train_set, opt, eval_set=clean_eval)
        full_log.records.extend(log.records)
        accuracy = mk.evaluate(victim, clean_eval)
        per_iteration.append({"iteration": iteration, "transform": kind,
                              "train_size": len(train_set), "prediction_accuracy": accuracy})
        if accuracy > best[0]:
            best = (accuracy, victim)
        if accuracy >= cfg.target_accuracy:
            reached = True
            break

    return MitigationResult(model=best[1], log=full_log, transforms_used=used,
                            accuracy=best[0], reached_target=reached, per_iteration=per_iteration)


@dataclass
class ATConfig:
    radius: float = 8 / 255
    step_size: float = 0.8 / 255
    pgd_steps: int = 10
    epochs: int = 20
    batch_size: int = 128
    learning_rate: float = 0.01
    momentum: float = 0.9
    seed: int = 42

    def __post_init__(self):
        if self.step_size > self.radius:
            raise ValueError("step_size must not exceed radius")
        if self.pgd_steps < 1:
            raise ValueError("pgd_steps must be >= 1")


def craft_pgd_batch(model, images: torch.Tensor, labels: torch.Tensor, at: ATConfig) -> torch.Tensor:
    """Loss-maximizing perturbed batch: sign-ascent PGD from zero init."""
    delta = torch.zeros_like(images)
    for _ in range(at.pgd_steps):
        d = delta.detach().clone().requires_grad_(True)
        loss = F.cross_entropy(model(torch.clamp(images + d, 0.0, 1.0)), labels, reduction="sum")
        (grad,) = torch.autograd.grad(loss, d)
        delta = project_linf(delta + at.step_size * grad.sign(), at.radius)
    return torch.clamp(images + delta, 0.0, 1.0)


def adversarial_train(poisoned: LabeledDataset, clean_eval: LabeledDataset, at: ATConfig,
                      victim: torch.nn.Module) -> tuple[torch.nn.Module, mk.MetricsLog]:
    """Standard PGD adversarial training on the (poisoned) training set."""
    opt = torch.optim.SGD(victim.parameters(), lr=at.learning_rate, momentum=at.momentum)
    gen = torch.Generator().manual_seed(at.seed)
    log = mk.MetricsLog()
    for epoch in range(1, at.epochs + 1):
        t0 = time.time()
        total_loss, correct = 0.0, 0
        for b, idx in enumerate(mk.iter_batches(len(poisoned), at.batch_size, gen)):
            x, y = poisoned.images[idx], poisoned.labels[idx]
            victim.eval()
            x_adv = craft_pgd_batch(victim, x, y, at)
            victim.train()
            opt.zero_grad()
            logits = victim(x_adv)
            loss = mk.cross_entropy(logits, y)
            if not torch.isfinite(loss):
                raise mk.TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            loss.backward()
            opt.step()
            total_loss += loss.item() * len(idx)
            correct += int((logits.argmax(dim=1) == y).sum())
        log.append(mk.EpochRecord(
            epoch=epoch,
            train_loss=total_loss / len(poisoned),
            train_acc=correct / len(poisoned),
            predict_acc=mk.evaluate(victim, clean_eval),
            seconds=time.time() - t0,
        ))
    return victim, log
