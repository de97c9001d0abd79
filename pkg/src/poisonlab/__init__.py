"""Error-minimizing data poisoning on image classifiers: attack, detection,
and augmentation-based mitigation, with a reproducible experiment harness."""

__version__ = "0.1.0"

from .datasets import (  # noqa: F401
    LabeledDataset,
    PoisonManifest,
    SyntheticSignSpec,
    generate_synthetic_signs,
    load_directory_dataset,
    load_poisoned,
    mix_poison,
    save_poisoned,
)
from .modelkit import OptimizerConfig, build_model, evaluate, train  # noqa: F401
from .attack import AttackConfig, PerturbationSet, generate, strength_sweep  # noqa: F401
from .defense import ATConfig, MitigationConfig, adversarial_train, mitigate  # noqa: F401
from .detection import build_detector, scan, train_detector  # noqa: F401
from .harness import ExperimentConfig, emit_report, run  # noqa: F401
