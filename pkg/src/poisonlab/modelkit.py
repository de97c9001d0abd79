"""Classifier architectures, losses, training and evaluation.

Two architectures are provided: ``small_cnn`` (desk-scale, trains in minutes
on CPU) and ``residual18`` (standard 18-layer residual net for full-scale
runs).  All randomness is driven by explicit integer seeds so that repeated
runs on one platform are bit-identical.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


class TrainingError(Exception):
    """Raised when training diverges (NaN loss)."""


class CheckpointError(Exception):
    """Raised on checkpoint shape/architecture mismatches."""


@dataclass
class OptimizerConfig:
    kind: str = "sgd"  # "sgd" | "adam"
    learning_rate: float = 0.01
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    epochs: int = 20
    batch_size: int = 128
    seed: int = 42

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    predict_acc: float
    seconds: float


@dataclass
class MetricsLog:
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, rec: EpochRecord) -> None:
        self.records.append(rec)

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("epoch,train_loss,train_acc,predict_acc,seconds\n")
            for r in self.records:
                fh.write(f"{r.epoch},{r.train_loss:.8f},{r.train_acc:.8f},{r.predict_acc:.8f},{r.seconds:.3f}\n")

    @property
    def final_predict_acc(self) -> float:
        return self.records[-1].predict_acc if self.records else float("nan")


class SmallCnn(nn.Module):
    """Three 3x3 convs (32/64/64), two 2x2 pools, fc 128 -> num_classes."""

    def __init__(self, num_classes: int, input_side: int = 32):
        super().__init__()
        if input_side % 4 != 0:
            raise ValueError("input side must be divisible by 4")
        self.features = nn.Sequential(
            nn.Conv2d(3, 32, 3, padding=1), nn.ReLU(),
            nn.Conv2d(32, 64, 3, padding=1), nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(64, 64, 3, padding=1), nn.ReLU(),
            nn.MaxPool2d(2),
        )
        side = input_side // 4
        self.classifier = nn.Sequential(
            nn.Flatten(),
            nn.Linear(64 * side * side, 128), nn.ReLU(),
            nn.Linear(128, num_classes),
        )

    def forward(self, x):
        return self.classifier(self.features(x))


ARCHITECTURES = ("small_cnn", "residual18")


def build_model(architecture: str, num_classes: int, seed: int, input_side: int = 32) -> nn.Module:
    """Deterministically initialized classifier; tags the module with
    ``arch``, ``num_classes``, ``seed`` and ``input_shape`` attributes."""
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        if architecture == "small_cnn":
            model = SmallCnn(num_classes, input_side)
        elif architecture == "residual18":
            from torchvision.models import resnet18
            model = resnet18(num_classes=num_classes)
        else:
            raise ValueError(f"unknown architecture: {architecture!r} (choose from {ARCHITECTURES})")
    model.arch = architecture
    model.num_classes = num_classes
    model.seed = seed
    model.input_shape = (3, input_side, input_side)
    return model


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean -log softmax(logits)[label] over the batch."""
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= logits.shape[-1]):
        raise ValueError(f"label out of range for {logits.shape[-1]} classes")
    return F.cross_entropy(logits, labels)


BCE_FLOOR = 1e-7


def binary_cross_entropy(probability: torch.Tensor, label01: torch.Tensor) -> torch.Tensor:
    """Mean BCE with probabilities floored into [1e-7, 1 - 1e-7]."""
    p = probability.clamp(BCE_FLOOR, 1.0 - BCE_FLOOR)
    y = label01.to(p.dtype)
    return -(y * p.log() + (1.0 - y) * (1.0 - p).log()).mean()


# ---------------------------------------------------------------------------
# Training / evaluation
# ---------------------------------------------------------------------------

def make_optimizer(model: nn.Module, cfg: OptimizerConfig) -> torch.optim.Optimizer:
    if cfg.kind == "sgd":
        return torch.optim.SGD(model.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum)
    if cfg.kind == "adam":
        return torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=cfg.betas)
    raise ValueError(f"unknown optimizer kind: {cfg.kind!r}")


def iter_batches(n: int, batch_size: int, generator: torch.Generator | None):
    """Yield index tensors; shuffled when a generator is given."""
    order = torch.randperm(n, generator=generator) if generator is not None else torch.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def train(model: nn.Module, dataset, cfg: OptimizerConfig, eval_set=None) -> tuple[nn.Module, MetricsLog]:
    """Mini-batch training with per-epoch seeded reshuffling.

    Raises TrainingError naming the epoch/batch if the loss goes NaN.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    opt = make_optimizer(model, cfg)
    gen = torch.Generator().manual_seed(cfg.seed)
    log = MetricsLog()
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.time()
        model.train()
        total_loss, correct = 0.0, 0
        for b, idx in enumerate(iter_batches(len(dataset), cfg.batch_size, gen)):
            x, y = dataset.images[idx], dataset.labels[idx]
            opt.zero_grad()
            logits = model(x)
            loss = cross_entropy(logits, y)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            loss.backward()
            opt.step()
            total_loss += loss.item() * len(idx)
            correct += int((logits.argmax(dim=1) == y).sum())
        predict_acc = evaluate(model, eval_set) if eval_set is not None else float("nan")
        log.append(EpochRecord(
            epoch=epoch,
            train_loss=total_loss / len(dataset),
            train_acc=correct / len(dataset),
            predict_acc=predict_acc,
            seconds=time.time() - t0,
        ))
    return model, log


@torch.no_grad()
def evaluate(model: nn.Module, dataset, batch_size: int = 512) -> float:
    """Fraction of argmax(logits) == label; pure, no parameter updates."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    model.eval()
    correct = 0
    for idx in iter_batches(len(dataset), batch_size, None):
        logits = model(dataset.images[idx])
        correct += int((logits.argmax(dim=1) == dataset.labels[idx]).sum())
    return correct / len(dataset)


def grad_wrt_input(model: nn.Module, images: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Per-sample input gradient of the cross-entropy loss.

    The loss is summed over the batch, so each sample's gradient slice is
    the gradient of its own loss; parameters are left untouched.
    """
    model.eval()
    x = images.detach().clone().requires_grad_(True)
    loss = F.cross_entropy(model(x), labels, reduction="sum")
    (grad,) = torch.autograd.grad(loss, x)
    return grad


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_DTYPES = {"float32": "<f4", "int64": "<i8"}


def save_checkpoint(model: nn.Module, path) -> None:
    """Single-file checkpoint: length-prefixed JSON manifest + raw blobs."""
    entries, blobs = [], []
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().numpy()
        dtype = "int64" if arr.dtype.kind in "iu" else "float32"
        arr = arr.astype(_DTYPES[dtype])
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype})
        blobs.append(arr.tobytes())
    header = json.dumps({
        "arch": getattr(model, "arch", "unknown"),
        "num_classes": getattr(model, "num_classes", None),
        "seed": getattr(model, "seed", None),
        "input_shape": list(getattr(model, "input_shape", (3, 32, 32))),
        "tensors": entries,
    }).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path, builder=build_model) -> nn.Module:
    """Rebuild a model from a checkpoint; rejects shape mismatches."""
    with open(path, "rb") as fh:
        (hlen,) = struct.unpack("<q", fh.read(8))
        header = json.loads(fh.read(hlen))
        model = builder(header["arch"], header["num_classes"], header["seed"], header["input_shape"][1])
        state = model.state_dict()
        new_state = {}
        for entry in header["tensors"]:
            name, shape, dtype = entry["name"], tuple(entry["shape"]), entry["dtype"]
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(count * np.dtype(_DTYPES[dtype]).itemsize), dtype=_DTYPES[dtype])
            if name not in state or tuple(state[name].shape) != shape:
                raise CheckpointError(f"tensor {name!r} with shape {shape} does not fit architecture {header['arch']!r}")
            new_state[name] = torch.from_numpy(data.reshape(shape).copy()).to(state[name].dtype)
    model.load_state_dict(new_state)
    return model
