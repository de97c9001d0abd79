"""Experiment orchestration: configs, seeded pipelines, CSV artifacts, plots.

Every run writes a self-contained artifact directory holding a config
snapshot (INI), a run_info.json with the config hash and seed, per-epoch
metrics CSVs, a results CSV, checkpoints and (via ``emit_report``) plots.
Re-running the same config reproduces the CSV numbers exactly.
"""

from __future__ import annotations

import configparser
import hashlib
import io
import json
import os
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch

from . import __version__
from . import attack as atk
from . import datasets as ds
from . import defense as dfn
from . import detection as det
from . import modelkit as mk

OUTPUT_ROOT_ENV = "POISONLAB_OUT"

KINDS = ("baseline", "attack", "sweep", "proportion_sweep", "detect", "mitigate", "advtrain")

# exit statuses mirrored by the CLI
OK = 0
VALIDATION_ERROR = 1
RUNTIME_ERROR = 2
BELOW_TARGET = 3


class ConfigError(Exception):
    """Invalid experiment configuration (caught before any compute)."""


@dataclass
class ExperimentConfig:
    kind: str = "baseline"
    out_dir: str = "runs/run"
    seed: int = 42

    # dataset: a GTSRB-style directory, or the synthetic generator when unset
    dataset_root: str = ""
    num_classes: int = 10
    image_size: int = 32
    train_per_class: int = 100
    eval_per_class: int = 50

    # victim training
    arch: str = "small_cnn"
    epochs: int = 20
    batch_size: int = 128
    learning_rate: float = 0.01
    momentum: float = 0.9

    # attack
    epsilon: float = 16 / 255
    mode: str = "classwise"
    lambda_stop: float = 0.99
    inner_pgd_steps: int = 1
    pgd_step_size: float = 0.8 / 255
    model_steps_per_round: int = 10
    max_rounds: int = 5000
    poison_proportion: float = 1.0
    epsilons: tuple[float, ...] = (16 / 255, 8 / 255, 4 / 255)
    proportions: tuple[float, ...] = (1.0, 0.95, 0.9, 0.75, 0.5)
    save_poisoned_data: bool = False

    # detection
    detector_epochs: int = 10
    detector_lr: float = 1e-3
    threshold: float = 0.5

    # mitigation / adversarial training
    transforms: tuple[str, ...] = dfn.TRANSFORM_KINDS
    target_fraction: float = 0.95
    at_radius: float = 8 / 255
    at_step_size: float = 0.8 / 255
    at_steps: int = 10
    at_epochs: int = 20

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"unknown experiment kind: {self.kind!r}")
        if self.dataset_root and not Path(self.dataset_root).is_dir():
            raise ConfigError(f"dataset_root does not exist: {self.dataset_root}")
        if not 0 <= self.poison_proportion <= 1:
            raise ConfigError("poison_proportion must be in [0, 1]")
        for t in self.transforms:
            if t not in dfn.TRANSFORM_KINDS:
                raise ConfigError(f"unknown transform: {t!r}")

    # -- flat INI round-trip ------------------------------------------------

    _SECTIONS = {
        "experiment": ("kind", "out_dir", "seed"),
        "dataset": ("dataset_root", "num_classes", "image_size", "train_per_class", "eval_per_class"),
        "train": ("arch", "epochs", "batch_size", "learning_rate", "momentum"),
        "attack": ("epsilon", "mode", "lambda_stop", "inner_pgd_steps", "pgd_step_size",
                   "model_steps_per_round", "max_rounds", "poison_proportion", "epsilons",
                   "proportions", "save_poisoned_data"),
        "detect": ("detector_epochs", "detector_lr", "threshold"),
        "defense": ("transforms", "target_fraction", "at_radius", "at_step_size", "at_steps", "at_epochs"),
    }

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        values = asdict(self)
        for section, keys in self._SECTIONS.items():
            cp[section] = {}
            for key in keys:
                v = values[key]
                if isinstance(v, (tuple, list)):
                    v = ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
                cp[section][key] = str(v)
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str) -> "ExperimentConfig":
        cp = configparser.ConfigParser()
        cp.read_string(text)
        kwargs = {}
        defaults = cls()
        for section, keys in cls._SECTIONS.items():
            if section not in cp:
                continue
            for key in keys:
                if key not in cp[section]:
                    continue
                raw = cp[section][key]
                ref = getattr(defaults, key)
                if isinstance(ref, bool):
                    kwargs[key] = raw.strip().lower() in ("1", "true", "yes")
                elif isinstance(ref, int):
                    kwargs[key] = int(raw)
                elif isinstance(ref, float):
                    kwargs[key] = float(raw)
                elif isinstance(ref, tuple):
                    items = [s.strip() for s in raw.split(",") if s.strip()]
                    kwargs[key] = tuple(float(s) for s in items) if key in ("epsilons", "proportions") else tuple(items)
                else:
                    kwargs[key] = raw
        return cls(**kwargs)

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_ini().encode()).hexdigest()


# ---------------------------------------------------------------------------
# Pipeline pieces
# ---------------------------------------------------------------------------

def load_splits(cfg: ExperimentConfig) -> tuple[ds.LabeledDataset, ds.LabeledDataset]:
    if cfg.dataset_root:
        return (ds.load_directory_dataset(cfg.dataset_root, "train", cfg.image_size),
                ds.load_directory_dataset(cfg.dataset_root, "predict", cfg.image_size))
    spec = ds.SyntheticSignSpec(num_classes=cfg.num_classes, image_size=cfg.image_size,
                                train_per_class=cfg.train_per_class, eval_per_class=cfg.eval_per_class,
                                seed=cfg.seed)
    return ds.generate_synthetic_signs(spec)


def _opt(cfg: ExperimentConfig, seed: int | None = None) -> mk.OptimizerConfig:
    return mk.OptimizerConfig(kind="sgd", learning_rate=cfg.learning_rate, momentum=cfg.momentum,
                              epochs=cfg.epochs, batch_size=cfg.batch_size,
                              seed=cfg.seed if seed is None else seed)


def _attack_cfg(cfg: ExperimentConfig, epsilon: float | None = None) -> atk.AttackConfig:
    return atk.AttackConfig(epsilon=cfg.epsilon if epsilon is None else epsilon, mode=cfg.mode,
                            lambda_stop=cfg.lambda_stop, inner_pgd_steps=cfg.inner_pgd_steps,
                            pgd_step_size=cfg.pgd_step_size, model_steps_per_round=cfg.model_steps_per_round,
                            max_rounds=cfg.max_rounds, seed=cfg.seed)


def _train_victim(cfg: ExperimentConfig, train_set, eval_set, seed: int | None = None):
    side = train_set.image_shape[1]
    model = mk.build_model(cfg.arch, train_set.num_classes, cfg.seed if seed is None else seed, side)
    return mk.train(model, train_set, _opt(cfg, seed), eval_set=eval_set)


def _write_results(path: Path, rows: list[dict]) -> None:
    cols = ("dataset", "epsilon", "no_attack_acc", "attack_acc", "mitigation_acc", "advtrain_acc")
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for row in rows:
            fh.write(",".join("" if row.get(c) is None else
                              (f"{row[c]:.8f}" if isinstance(row[c], float) else str(row[c]))
                              for c in cols) + "\n")


def _generate_pset(cfg: ExperimentConfig, train_set, epsilon: float | None = None) -> atk.PerturbationSet:
    side = train_set.image_shape[1]
    surrogate = mk.build_model(cfg.arch, train_set.num_classes, cfg.seed, side)
    return atk.generate(train_set, surrogate, _attack_cfg(cfg, epsilon))


# ---------------------------------------------------------------------------
# run()
# ---------------------------------------------------------------------------

def resolve_out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out_dir)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not out.is_absolute():
        out = Path(root) / out
    return out


def run(cfg: ExperimentConfig) -> tuple[Path, int]:
    """Execute one experiment end-to-end; returns (artifact_dir, status)."""
    cfg.validate()
    out = resolve_out_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.to_ini())
    (out / "run_info.json").write_text(json.dumps({
        "config_hash": cfg.config_hash(), "seed": cfg.seed, "version": __version__}, indent=2))
    try:
        status = _dispatch(cfg, out)
    except Exception as exc:
        (out / "error.txt").write_text(f"{type(exc).__name__}: {exc}\n")
        raise
    return out, status


def _dispatch(cfg: ExperimentConfig, out: Path) -> int:
    train_set, predict_set = load_splits(cfg)
    dataset_name = Path(cfg.dataset_root).name if cfg.dataset_root else "synthetic"

    if cfg.kind == "baseline":
        model, log = _train_victim(cfg, train_set, predict_set)
        log.to_csv(out / "metrics_clean.csv")
        mk.save_checkpoint(model, out / "baseline.ckpt")
        _write_results(out / "results.csv", [{
            "dataset": dataset_name, "epsilon": 0.0, "no_attack_acc": mk.evaluate(model, predict_set)}])
        return OK

    if cfg.kind == "attack":
        pset = _generate_pset(cfg, train_set)
        atk.save_perturbations(pset, out / "perturbations")
        poisoned, manifest = ds.mix_poison(train_set, pset, cfg.poison_proportion, cfg.seed)
        manifest.perturbation_ref = str(out / "perturbations" / "deltas")
        if cfg.save_poisoned_data:
            ds.save_poisoned(poisoned, manifest, out / "poisoned")
        else:
            (out / "manifest.json").write_text(manifest.to_json())
        victim, log = _train_victim(cfg, poisoned, predict_set)
        log.to_csv(out / "metrics_poisoned.csv")
        mk.save_checkpoint(victim, out / "victim.ckpt")
        _write_results(out / "results.csv", [{
            "dataset": dataset_name, "epsilon": cfg.epsilon,
            "attack_acc": mk.evaluate(victim, predict_set)}])
        return OK

    if cfg.kind == "sweep":
        baseline, base_log = _train_victim(cfg, train_set, predict_set)
        base_log.to_csv(out / "metrics_clean.csv")
        base_acc = mk.evaluate(baseline, predict_set)
        rows = atk.strength_sweep(train_set, predict_set, list(cfg.epsilons),
                                  base_cfg=_attack_cfg(cfg), victim_arch=cfg.arch, victim_opt=_opt(cfg))
        _write_results(out / "results.csv", [{
            "dataset": dataset_name, "epsilon": r["epsilon"],
            "no_attack_acc": base_acc, "attack_acc": r["prediction_accuracy"]} for r in rows])
        return OK

    if cfg.kind == "proportion_sweep":
        pset = _generate_pset(cfg, train_set)
        atk.save_perturbations(pset, out / "perturbations")
        with open(out / "proportions.csv", "w") as fh:
            fh.write("proportion,prediction_accuracy\n")
            for p in sorted(cfg.proportions, reverse=True):
                poisoned, _ = ds.mix_poison(train_set, pset, p, cfg.seed)
                victim, _ = _train_victim(cfg, poisoned, None)
                fh.write(f"{p},{mk.evaluate(victim, predict_set):.8f}\n")
        return OK

    if cfg.kind == "detect":
        pset = _generate_pset(cfg, train_set)
        half_train = _half_poison(train_set, pset, cfg.seed)
        half_val = _half_poison(predict_set, pset, cfg.seed + 1)
        det_cfg = mk.OptimizerConfig(kind="adam", learning_rate=cfg.detector_lr,
                                     epochs=cfg.detector_epochs, batch_size=cfg.batch_size, seed=cfg.seed)
        detector, dlog = det.train_detector(half_train["clean"], half_train["poisoned"], det_cfg,
                                            val_clean=half_val["clean"], val_poisoned=half_val["poisoned"])
        dlog.to_csv(out / "detector_metrics.csv")
        images = torch.cat([half_val["clean"].images, half_val["poisoned"].images])
        truth = torch.cat([torch.zeros(len(half_val["clean"])), torch.ones(len(half_val["poisoned"]))])
        report = det.scan(detector, images, threshold=cfg.threshold, ground_truth=truth)
        report.to_csv(out / "scan.csv")
        (out / "scan_summary.json").write_text(report.summary_json(epsilon=cfg.epsilon, seed=cfg.seed))
        mk.save_checkpoint(detector, out / "detector.ckpt")
        return OK

    if cfg.kind == "mitigate":
        baseline, base_log = _train_victim(cfg, train_set, predict_set)
        base_log.to_csv(out / "metrics_clean.csv")
        base_acc = mk.evaluate(baseline, predict_set)
        pset = _generate_pset(cfg, train_set)
        poisoned = atk.apply(train_set, pset)
        poisoned_victim, plog = _train_victim(cfg, poisoned, predict_set)
        plog.to_csv(out / "metrics_poisoned.csv")
        mcfg = dfn.MitigationConfig(transforms=tuple(cfg.transforms),
                                    target_accuracy=cfg.target_fraction * base_acc,
                                    victim_arch=cfg.arch, epochs_per_iteration=cfg.epochs,
                                    batch_size=cfg.batch_size, learning_rate=cfg.learning_rate,
                                    momentum=cfg.momentum, seed=cfg.seed)
        result = dfn.mitigate(poisoned, predict_set, mcfg)
        result.log.to_csv(out / "metrics_mitigated.csv")
        with open(out / "mitigation.csv", "w") as fh:
            fh.write("iteration,transform,train_size,prediction_accuracy\n")
            for row in result.per_iteration:
                fh.write(f"{row['iteration']},{row['transform']},{row['train_size']},{row['prediction_accuracy']:.8f}\n")
        mk.save_checkpoint(result.model, out / "mitigated.ckpt")
        _write_results(out / "results.csv", [{
            "dataset": dataset_name, "epsilon": cfg.epsilon, "no_attack_acc": base_acc,
            "attack_acc": mk.evaluate(poisoned_victim, predict_set),
            "mitigation_acc": result.accuracy}])
        return OK if result.reached_target else BELOW_TARGET

    if cfg.kind == "advtrain":
        pset = _generate_pset(cfg, train_set)
        poisoned = atk.apply(train_set, pset)
        side = train_set.image_shape[1]
        victim = mk.build_model(cfg.arch, train_set.num_classes, cfg.seed, side)
        at = dfn.ATConfig(radius=cfg.at_radius, step_size=cfg.at_step_size, pgd_steps=cfg.at_steps,
                          epochs=cfg.at_epochs, batch_size=cfg.batch_size,
                          learning_rate=cfg.learning_rate, momentum=cfg.momentum, seed=cfg.seed)
        victim, log = dfn.adversarial_train(poisoned, predict_set, at, victim)
        log.to_csv(out / "metrics_advtrain.csv")
        mk.save_checkpoint(victim, out / "advtrain.ckpt")
        _write_results(out / "results.csv", [{
            "dataset": dataset_name, "epsilon": cfg.epsilon,
            "advtrain_acc": mk.evaluate(victim, predict_set)}])
        return OK

    raise ConfigError(f"unknown experiment kind: {cfg.kind!r}")


def _half_poison(dataset, pset, seed: int) -> dict:
    """Split 50/50 by seeded permutation; poison one half (full application)."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(dataset))
    half = len(dataset) // 2

    def subset(idx, name):
        idx = torch.as_tensor(sorted(idx.tolist()))
        return ds.LabeledDataset(dataset.images[idx], dataset.labels[idx], dataset.num_classes, name=name)
    clean = subset(order[:half], f"{dataset.name}-cleanhalf")
    to_poison = subset(order[half:], f"{dataset.name}-poisonhalf")
    poisoned = atk.apply(to_poison, pset)
    return {"clean": clean, "poisoned": poisoned}


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def _read_csv(path: Path) -> dict[str, list[float]]:
    if not path.is_file():
        raise FileNotFoundError(f"missing CSV required for report: {path}")
    import csv as _csv
    with open(path, newline="") as fh:
        reader = _csv.DictReader(fh)
        cols: dict[str, list] = {name: [] for name in reader.fieldnames}
        for row in reader:
            for k, v in row.items():
                try:
                    cols[k].append(float(v))
                except (TypeError, ValueError):
                    cols[k].append(v)
    return cols


def emit_report(artifact_dir) -> list[Path]:
    """Render plots from the CSVs in an artifact directory.

    Emits an accuracy-vs-epoch plot when any training curves are present
    (clean / poisoned / mitigated drawn together), a detector loss-curve
    plot, and a poison-proportion curve; each only from its CSV.
    """
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(artifact_dir)
    written: list[Path] = []

    curves = [("metrics_clean.csv", "clean", "tab:blue"),
              ("metrics_poisoned.csv", "poisoned", "tab:red"),
              ("metrics_mitigated.csv", "mitigated", "tab:green"),
              ("metrics_advtrain.csv", "adversarial training", "tab:orange")]
    present = [(out / f, label, color) for f, label, color in curves if (out / f).is_file()]
    if present:
        fig, ax = plt.subplots(figsize=(6, 4))
        for path, label, color in present:
            cols = _read_csv(path)
            ax.plot(range(1, len(cols["predict_acc"]) + 1), cols["predict_acc"], label=label, color=color)
        ax.set_xlabel("epoch")
        ax.set_ylabel("prediction accuracy")
        ax.set_ylim(0.0, 1.0)
        ax.legend()
        fig.tight_layout()
        path = out / "accuracy_curves.png"
        fig.savefig(path)
        plt.close(fig)
        written.append(path)

    if (out / "detector_metrics.csv").is_file():
        cols = _read_csv(out / "detector_metrics.csv")
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(cols["epoch"], cols["train_bce"], label="training loss")
        ax.plot(cols["epoch"], cols["val_bce"], label="validation loss")
        ax.set_xlabel("epoch")
        ax.set_ylabel("binary cross-entropy")
        ax.legend()
        fig.tight_layout()
        path = out / "detector_loss.png"
        fig.savefig(path)
        plt.close(fig)
        written.append(path)

    if (out / "proportions.csv").is_file():
        cols = _read_csv(out / "proportions.csv")
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(cols["proportion"], cols["prediction_accuracy"], marker="o")
        ax.set_xlabel("poison proportion")
        ax.set_ylabel("prediction accuracy")
        ax.set_ylim(0.0, 1.0)
        fig.tight_layout()
        path = out / "proportion_curve.png"
        fig.savefig(path)
        plt.close(fig)
        written.append(path)

    if not written:
        raise FileNotFoundError(f"no plottable CSVs found under {out}")
    return written
