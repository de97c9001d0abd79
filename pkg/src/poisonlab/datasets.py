"""Dataset ingestion, synthetic sign generation, poison mixing and persistence.

Directory layout for real data (GTSRB-style, CTSRD uses the same layout):

    <root>/<split>/<class_id>/<image files>

with zero-padded integer class directories, plus an optional ``index.csv``
(columns ``relative_path,label``) under the split root.  Poisoned datasets are
written as float32 TIFFs so the save/load round-trip is bit-exact.
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from dataclasses import dataclass, asdict
from pathlib import Path

import cv2
import numpy as np
import torch

from .imageops import clamp_valid


class DatasetError(Exception):
    """Raised when a dataset cannot be loaded or constructed."""


class IntegrityError(DatasetError):
    """Raised when a persisted dataset disagrees with its manifest."""


@dataclass
class LabeledDataset:
    """Images (N, 3, H, W) in [0,1] with integer class labels (N,)."""

    images: torch.Tensor
    labels: torch.Tensor
    num_classes: int
    name: str = "dataset"

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise DatasetError(f"images must be (N, 3, H, W), got {tuple(self.images.shape)}")
        if len(self.images) != len(self.labels):
            raise DatasetError(f"{len(self.images)} images vs {len(self.labels)} labels")
        if len(self.labels) and int(self.labels.max()) >= self.num_classes:
            raise DatasetError(f"label {int(self.labels.max())} out of range for {self.num_classes} classes")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def pixel_hash(self) -> str:
        """SHA-256 over pixel and label bytes; stable across processes."""
        h = hashlib.sha256()
        h.update(self.images.contiguous().numpy().tobytes())
        h.update(self.labels.to(torch.int64).contiguous().numpy().tobytes())
        return h.hexdigest()


@dataclass
class PoisonManifest:
    source_dataset_id: str
    perturbation_ref: str
    mode: str  # "classwise" | "samplewise"
    epsilon: float
    poison_proportion: float
    seed: int
    poisoned_indices: list[int]
    pixel_hash: str = ""
    num_samples: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "PoisonManifest":
        return cls(**json.loads(text))


# ---------------------------------------------------------------------------
# Synthetic traffic-sign generator
# ---------------------------------------------------------------------------

_COLORS = {
    "red": (0.85, 0.10, 0.10),
    "blue": (0.10, 0.20, 0.85),
    "yellow": (0.90, 0.80, 0.10),
    "green": (0.10, 0.65, 0.20),
    "white": (0.95, 0.95, 0.95),
    "orange": (0.90, 0.50, 0.05),
    "purple": (0.55, 0.10, 0.70),
    "cyan": (0.05, 0.75, 0.80),
    "pink": (0.95, 0.45, 0.65),
}

# (shape, fill color, glyph) per class. All classes share one fill color on
# purpose: constant color patches are linearly separable and a classifier
# learns them almost instantly, which makes clean accuracy trivially high and
# leaves bounded additive noise no chance to compete as the easier feature.
# Identity carried by shape outline + inner glyph keeps the corpus learnable
# yet slow enough that poisoning dynamics resemble real photographic data.
_TEMPLATES = [
    ("circle", "red", "bar"),
    ("octagon", "red", "bar"),
    ("square", "red", "bar"),
    ("triangle", "red", "bar"),
    ("diamond", "red", "bar"),
    ("circle", "red", "cross"),
    ("octagon", "red", "cross"),
    ("square", "red", "cross"),
    ("triangle", "red", "cross"),
    ("diamond", "red", "cross"),
    ("circle", "red", "dot"),
    ("octagon", "red", "dot"),
    ("square", "red", "dot"),
    ("triangle", "red", "dot"),
    ("diamond", "red", "dot"),
]

_SHAPE_RADIUS = {"circle": 0.40, "octagon": 0.42, "square": 0.45, "triangle": 0.38, "diamond": 0.38}

_BACKGROUND = 0.45


@dataclass
class SyntheticSignSpec:
    """Desk-scale stand-in for a real traffic-sign corpus."""

    num_classes: int = 10
    image_size: int = 32
    train_per_class: int = 100
    eval_per_class: int = 50
    seed: int = 42
    rotation_deg: float = 15.0
    translation_px: float = 3.0
    brightness_range: tuple[float, float] = (0.6, 1.4)
    noise_amplitude: float = 0.08


def _shape_points(shape: str, c: float, r: float) -> np.ndarray:
    if shape == "triangle":
        ang = np.deg2rad([90, 210, 330])
    elif shape == "square":
        ang = np.deg2rad([45, 135, 225, 315])
    elif shape == "diamond":
        ang = np.deg2rad([0, 90, 180, 270])
    elif shape == "octagon":
        ang = np.deg2rad(np.arange(8) * 45.0 + 22.5)
    else:
        raise ValueError(shape)
    pts = np.stack([c + r * np.cos(ang), c - r * np.sin(ang)], axis=1)
    return pts.astype(np.int32)


def _render_template(class_id: int, size: int) -> np.ndarray:
    """Canonical sign for a class: HWC float32 RGB on plain background."""
    shape, color_name, glyph = _TEMPLATES[class_id]
    color = _COLORS[color_name]
    img = np.full((size, size, 3), _BACKGROUND, dtype=np.float32)
    c = size // 2
    r = int(size * _SHAPE_RADIUS[shape])
    if shape == "circle":
        cv2.circle(img, (c, c), r, color, -1)
    else:
        cv2.fillPoly(img, [_shape_points(shape, c, r)], color)

    dark = (0.08, 0.08, 0.08)
    g = max(3, size // 7)
    if glyph == "bar":
        cv2.rectangle(img, (c - r // 2, c - g // 2), (c + r // 2, c + g // 2), dark, -1)
    elif glyph == "cross":
        cv2.rectangle(img, (c - r // 2, c - g // 2), (c + r // 2, c + g // 2), dark, -1)
        cv2.rectangle(img, (c - g // 2, c - r // 2), (c + g // 2, c + r // 2), dark, -1)
    elif glyph == "dot":
        cv2.circle(img, (c, c), g, dark, -1)
    elif glyph == "ring":
        cv2.circle(img, (c, c), r // 2, dark, max(1, g // 2))
    return img


def _render_sample(template: np.ndarray, spec: SyntheticSignSpec, rng: np.random.Generator) -> np.ndarray:
    size = spec.image_size
    angle = rng.uniform(-spec.rotation_deg, spec.rotation_deg)
    tx = rng.uniform(-spec.translation_px, spec.translation_px)
    ty = rng.uniform(-spec.translation_px, spec.translation_px)
    bright = rng.uniform(*spec.brightness_range)

    m = cv2.getRotationMatrix2D((size / 2, size / 2), angle, 1.0)
    m[0, 2] += tx
    m[1, 2] += ty
    img = cv2.warpAffine(
        template, m, (size, size),
        flags=cv2.INTER_LINEAR,
        borderMode=cv2.BORDER_CONSTANT,
        borderValue=(_BACKGROUND,) * 3,
    )
    img = img * bright
    img = img + rng.uniform(-spec.noise_amplitude, spec.noise_amplitude, size=img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0)


def _render_split(spec: SyntheticSignSpec, per_class: int, stream: int, name: str) -> LabeledDataset:
    templates = [_render_template(k, spec.image_size) for k in range(spec.num_classes)]
    images = np.empty((spec.num_classes * per_class, 3, spec.image_size, spec.image_size), dtype=np.float32)
    labels = np.empty(spec.num_classes * per_class, dtype=np.int64)
    i = 0
    for k in range(spec.num_classes):
        # one child stream per (split, class): train/eval never share draws
        rng = np.random.default_rng([spec.seed, stream, k])
        for _ in range(per_class):
            sample = _render_sample(templates[k], spec, rng)
            images[i] = sample.transpose(2, 0, 1)
            labels[i] = k
            i += 1
    return LabeledDataset(torch.from_numpy(images), torch.from_numpy(labels), spec.num_classes, name=name)


def generate_synthetic_signs(spec: SyntheticSignSpec) -> tuple[LabeledDataset, LabeledDataset]:
    """Deterministic synthetic train/predict splits for desk-scale runs."""
    if spec.num_classes > len(_TEMPLATES):
        raise ValueError(f"at most {len(_TEMPLATES)} distinct sign templates available, asked for {spec.num_classes}")
    if spec.num_classes < 1:
        raise ValueError("num_classes must be positive")
    train = _render_split(spec, spec.train_per_class, stream=0, name="synthetic-train")
    predict = _render_split(spec, spec.eval_per_class, stream=1, name="synthetic-predict")
    return train, predict


# ---------------------------------------------------------------------------
# Directory ingestion
# ---------------------------------------------------------------------------

_IMAGE_SUFFIXES = {".png", ".ppm", ".bmp", ".jpg", ".jpeg", ".tiff", ".tif"}


def _read_image(path: Path, side: int) -> np.ndarray:
    raw = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if raw is None:
        raise DatasetError(f"cannot decode image: {path}")
    raw = cv2.cvtColor(raw, cv2.COLOR_BGR2RGB)
    if raw.shape[:2] != (side, side):
        raw = cv2.resize(raw, (side, side), interpolation=cv2.INTER_AREA)
    return (raw.astype(np.float32) / 255.0).transpose(2, 0, 1)


def load_directory_dataset(root: str | Path, split: str, image_size: int = 32) -> LabeledDataset:
    """Load ``<root>/<split>/<class_id>/*`` resized to ``image_size`` square.

    If ``index.csv`` exists under the split root it takes precedence, giving
    explicit (relative_path, label) rows.  Files are always consumed in
    sorted-path order.
    """
    split_root = Path(root) / split
    if not split_root.is_dir():
        raise DatasetError(f"missing split directory: {split_root}")

    entries: list[tuple[Path, int]] = []
    index = split_root / "index.csv"
    if index.is_file():
        with open(index, newline="") as fh:
            rows = [(split_root / rel, int(lab)) for rel, lab in csv.reader(fh)]
        entries = sorted(rows, key=lambda e: str(e[0]))
    else:
        class_dirs = sorted(d for d in split_root.iterdir() if d.is_dir())
        if not class_dirs:
            raise DatasetError(f"no class directories under {split_root}")
        for d in class_dirs:
            try:
                label = int(d.name)
            except ValueError:
                raise DatasetError(f"class directory name is not an integer: {d}")
            files = sorted(p for p in d.iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES)
            if not files:
                raise DatasetError(f"empty class directory: {d}")
            entries.extend((p, label) for p in files)

    images = torch.stack([torch.from_numpy(_read_image(p, image_size)) for p, _ in entries])
    labels = torch.tensor([lab for _, lab in entries], dtype=torch.int64)
    return LabeledDataset(images, labels, num_classes=int(labels.max()) + 1, name=f"{Path(root).name}-{split}")


# ---------------------------------------------------------------------------
# Poison mixing
# ---------------------------------------------------------------------------

def poison_indices(n: int, proportion: float, seed: int) -> list[int]:
    """round(p*n) indices chosen uniformly without replacement; sorted."""
    count = int(round(proportion * n))
    rng = np.random.default_rng(seed)
    return sorted(rng.choice(n, size=count, replace=False).tolist())


def mix_poison(clean: LabeledDataset, perturbation, proportion: float, seed: int) -> tuple[LabeledDataset, PoisonManifest]:
    """Replace a seeded uniform subset of samples with clamp(x + delta).

    ``perturbation`` is any object with ``mode``, ``epsilon`` and
    ``delta_for(index, label) -> Tensor`` (see attack.PerturbationSet).
    Labels are never modified; untouched samples are copied verbatim.
    """
    if not 0.0 <= proportion <= 1.0:
        raise ValueError(f"proportion must be in [0,1], got {proportion}")
    chosen = poison_indices(len(clean), proportion, seed)
    images = clean.images.clone()
    for i in chosen:
        delta = perturbation.delta_for(i, int(clean.labels[i]))
        if delta.shape != clean.images[i].shape:
            raise ValueError(f"delta shape {tuple(delta.shape)} does not match image shape {tuple(clean.images[i].shape)}")
        images[i] = clamp_valid(clean.images[i] + delta)
    poisoned = LabeledDataset(images, clean.labels.clone(), clean.num_classes, name=f"{clean.name}-poisoned")
    manifest = PoisonManifest(
        source_dataset_id=clean.name,
        perturbation_ref="",
        mode=perturbation.mode,
        epsilon=float(perturbation.epsilon),
        poison_proportion=proportion,
        seed=seed,
        poisoned_indices=chosen,
        pixel_hash=poisoned.pixel_hash(),
        num_samples=len(poisoned),
    )
    return poisoned, manifest


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def write_delta(path: str | Path, tensor: torch.Tensor) -> None:
    """Raw little-endian float32 with a 3 x int32 (C, H, W) shape header."""
    arr = tensor.detach().to(torch.float32).contiguous().numpy()
    if arr.ndim != 3:
        raise ValueError(f"expected a (C, H, W) tensor, got shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<3i", *arr.shape))
        fh.write(arr.astype("<f4").tobytes())


def read_delta(path: str | Path) -> torch.Tensor:
    with open(path, "rb") as fh:
        c, h, w = struct.unpack("<3i", fh.read(12))
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != c * h * w:
        raise IntegrityError(f"{path}: payload size {data.size} does not match header {(c, h, w)}")
    return torch.from_numpy(data.reshape(c, h, w).copy())


def save_poisoned(dataset: LabeledDataset, manifest: PoisonManifest, root: str | Path) -> Path:
    """Persist a poisoned dataset losslessly (float32 TIFF per image)."""
    root = Path(root)
    img_dir = root / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(dataset.images):
        hwc = img.numpy().transpose(1, 2, 0)
        if not cv2.imwrite(str(img_dir / f"{i:06d}.tiff"), hwc):
            raise DatasetError(f"failed to write {img_dir / f'{i:06d}.tiff'}")
    with open(root / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "label"])
        for i, lab in enumerate(dataset.labels.tolist()):
            writer.writerow([i, lab])
    meta = {"name": dataset.name, "num_classes": dataset.num_classes}
    (root / "dataset.json").write_text(json.dumps(meta, indent=2))
    (root / "manifest.json").write_text(manifest.to_json())
    return root


def load_poisoned(root: str | Path) -> tuple[LabeledDataset, PoisonManifest]:
    """Inverse of :func:`save_poisoned`; verifies counts and pixel hash."""
    root = Path(root)
    manifest = PoisonManifest.from_json((root / "manifest.json").read_text())
    meta = json.loads((root / "dataset.json").read_text())
    with open(root / "labels.csv", newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        labels = torch.tensor([int(lab) for _, lab in reader], dtype=torch.int64)
    files = sorted((root / "images").glob("*.tiff"))
    if len(files) != len(labels):
        raise IntegrityError(f"{root}: {len(files)} images vs {len(labels)} labels")
    imgs = []
    for p in files:
        raw = cv2.imread(str(p), cv2.IMREAD_UNCHANGED)
        if raw is None:
            raise DatasetError(f"cannot decode image: {p}")
        imgs.append(torch.from_numpy(raw.transpose(2, 0, 1)))
    dataset = LabeledDataset(torch.stack(imgs), labels, meta["num_classes"], name=meta["name"])

    if manifest.num_samples != len(dataset):
        raise IntegrityError(f"{root}: manifest says {manifest.num_samples} samples, found {len(dataset)}")
    expected = int(round(manifest.poison_proportion * len(dataset)))
    if len(manifest.poisoned_indices) != expected:
        raise IntegrityError(f"{root}: index list length {len(manifest.poisoned_indices)} != round(p*N) = {expected}")
    if manifest.pixel_hash and dataset.pixel_hash() != manifest.pixel_hash:
        raise IntegrityError(f"{root}: pixel hash mismatch")
    return dataset, manifest
