"""Binary poison detector: a small sigmoid-headed CNN plus batch scanning."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import torch
import torch.nn as nn

from . import modelkit as mk
from .datasets import LabeledDataset

DETECTOR_CONV1 = 16
DETECTOR_CONV2 = 32
DETECTOR_FC = 128


class Detector(nn.Module):
    """conv3x3(3->16), conv3x3(16->32), one 2x2 pool, fc 128, sigmoid head."""

    def __init__(self, input_side: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, DETECTOR_CONV1, 3, padding=1), nn.ReLU(),
            nn.Conv2d(DETECTOR_CONV1, DETECTOR_CONV2, 3, padding=1), nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Flatten(),
            nn.Linear(DETECTOR_CONV2 * (input_side // 2) ** 2, DETECTOR_FC), nn.ReLU(),
            nn.Linear(DETECTOR_FC, 1),
        )

    def forward(self, x):
        # probability that the image is poisoned
        return torch.sigmoid(self.net(x)).squeeze(-1)


def build_detector(input_shape: tuple[int, int, int], seed: int) -> Detector:
    c, h, w = input_shape
    if c != 3 or h < 8 or w < 8 or h != w:
        raise ValueError(f"detector needs a (3, S, S) input with S >= 8, got {input_shape}")
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = Detector(h)
    model.arch = "detector"
    model.num_classes = 2
    model.seed = seed
    model.input_shape = (c, h, w)
    return model


@dataclass
class DetectorEpoch:
    epoch: int
    train_bce: float
    train_acc: float
    val_bce: float
    val_acc: float
    seconds: float


@dataclass
class DetectorLog:
    records: list[DetectorEpoch] = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("epoch,train_bce,train_acc,val_bce,val_acc,seconds\n")
            for r in self.records:
                fh.write(f"{r.epoch},{r.train_bce:.8f},{r.train_acc:.8f},"
                         f"{r.val_bce:.8f},{r.val_acc:.8f},{r.seconds:.3f}\n")


def _binary_corpus(clean: LabeledDataset, poisoned: LabeledDataset) -> tuple[torch.Tensor, torch.Tensor]:
    """Union with binary labels: clean = 0, poisoned = 1 (class labels dropped)."""
    x = torch.cat([clean.images, poisoned.images])
    y = torch.cat([torch.zeros(len(clean)), torch.ones(len(poisoned))])
    return x, y


@torch.no_grad()
def _bce_and_acc(detector, x, y, threshold: float = 0.5, batch_size: int = 512) -> tuple[float, float]:
    detector.eval()
    total, correct = 0.0, 0
    for idx in mk.iter_batches(len(x), batch_size, None):
        p = detector(x[idx])
        total += mk.binary_cross_entropy(p, y[idx]).item() * len(idx)
        correct += int(((p >= threshold).float() == y[idx]).sum())
    return total / len(x), correct / len(x)


def train_detector(clean: LabeledDataset, poisoned: LabeledDataset,
                   cfg: mk.OptimizerConfig | None = None,
                   val_clean: LabeledDataset | None = None,
                   val_poisoned: LabeledDataset | None = None) -> tuple[Detector, DetectorLog]:
    """Train on the clean/poisoned union with BCE + Adam.

    Validation BCE/accuracy are logged per epoch when a held-out pair is
    supplied, which gives the loss curves the reports plot.
    """
    if len(clean) == 0 or len(poisoned) == 0:
        raise ValueError("both corpora must be nonempty")
    cfg = cfg or mk.OptimizerConfig(kind="adam", learning_rate=1e-3, epochs=10, seed=42)
    x, y = _binary_corpus(clean, poisoned)
    val = _binary_corpus(val_clean, val_poisoned) if val_clean is not None else None

    detector = build_detector(tuple(clean.images.shape[1:]), cfg.seed)
    opt = mk.make_optimizer(detector, cfg)
    gen = torch.Generator().manual_seed(cfg.seed)
    log = DetectorLog()
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.time()
        detector.train()
        total, correct = 0.0, 0
        for b, idx in enumerate(mk.iter_batches(len(x), cfg.batch_size, gen)):
            opt.zero_grad()
            p = detector(x[idx])
            loss = mk.binary_cross_entropy(p, y[idx])
            if not torch.isfinite(loss):
                raise mk.TrainingError(f"non-finite detector loss at epoch {epoch}, batch {b}")
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            correct += int(((p >= 0.5).float() == y[idx]).sum())
        val_bce, val_acc = _bce_and_acc(detector, *val) if val is not None else (float("nan"), float("nan"))
        log.records.append(DetectorEpoch(
            epoch=epoch,
            train_bce=total / len(x),
            train_acc=correct / len(x),
            val_bce=val_bce,
            val_acc=val_acc,
            seconds=time.time() - t0,
        ))
    return detector, log


@dataclass
class ScanEntry:
    index: int
    probability: float
    verdict: str  # "poisoned" | "clean"
    truth: str | None = None


@dataclass
class ScanReport:
    entries: list[ScanEntry]
    threshold: float
    success_rate: float | None = None

    def to_csv(self, path) -> None:
        with_truth = any(e.truth is not None for e in self.entries)
        with open(path, "w") as fh:
            fh.write("index,probability,verdict,truth\n" if with_truth else "index,probability,verdict\n")
            for e in self.entries:
                row = f"{e.index},{e.probability:.8f},{e.verdict}"
                fh.write(row + (f",{e.truth}\n" if with_truth else "\n"))

    def summary_json(self, **extra) -> str:
        return json.dumps({"threshold": self.threshold, "success_rate": self.success_rate,
                           "count": len(self.entries), **extra}, indent=2)


@torch.no_grad()
def scan(detector: Detector, images: torch.Tensor, threshold: float = 0.5,
         ground_truth: torch.Tensor | None = None, batch_size: int = 512) -> ScanReport:
    """Pure batch inference; verdict is 'poisoned' iff probability >= threshold."""
    detector.eval()
    probs = torch.cat([detector(images[idx]) for idx in mk.iter_batches(len(images), batch_size, None)])
    verdicts = probs >= threshold
    entries = []
    for i in range(len(images)):
        truth = None
        if ground_truth is not None:
            truth = "poisoned" if bool(ground_truth[i]) else "clean"
        entries.append(ScanEntry(i, probs[i].item(), "poisoned" if verdicts[i] else "clean", truth))
    success = None
    if ground_truth is not None:
        success = float((verdicts == ground_truth.bool()).float().mean())
    return ScanReport(entries=entries, threshold=threshold, success_rate=success)
