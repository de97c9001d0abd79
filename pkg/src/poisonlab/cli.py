"""Command-line entry point.

Subcommands mirror the experiment kinds; flags override values taken from an
optional ``--config`` INI file.  Exit codes: 0 success, 1 validation error,
2 runtime failure, 3 completed below the mitigation target.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from pathlib import Path

from . import harness
from .harness import ConfigError, ExperimentConfig


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI config file; flags override it")
    p.add_argument("--out", dest="out_dir", help="artifact directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--dataset-root", dest="dataset_root", help="GTSRB-style directory; synthetic data when omitted")
    p.add_argument("--arch", choices=("small_cnn", "residual18"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--train-per-class", dest="train_per_class", type=int)
    p.add_argument("--eval-per-class", dest="eval_per_class", type=int)
    p.add_argument("--num-classes", dest="num_classes", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="poisonlab",
                                     description="Error-minimizing data poisoning: attack, detect, mitigate.")
    sub = parser.add_subparsers(dest="command", required=True)

    for name in ("baseline", "attack", "sweep", "proportion-sweep", "detect", "mitigate", "advtrain"):
        p = sub.add_parser(name)
        _add_common(p)
        if name in ("attack", "detect", "mitigate", "advtrain", "proportion-sweep"):
            p.add_argument("--epsilon", type=float)
            p.add_argument("--mode", choices=("classwise", "samplewise"))
            p.add_argument("--lambda", dest="lambda_stop", type=float)
        if name == "attack":
            p.add_argument("--proportion", dest="poison_proportion", type=float)
            p.add_argument("--save-poisoned", dest="save_poisoned_data", action="store_true", default=None)
        if name == "sweep":
            p.add_argument("--epsilons", help="comma-separated list, e.g. 0.0627,0.0314,0.0157")
        if name == "proportion-sweep":
            p.add_argument("--proportions", help="comma-separated list, e.g. 1.0,0.95,0.9")
        if name == "detect":
            p.add_argument("--detector-epochs", dest="detector_epochs", type=int)
            p.add_argument("--threshold", type=float)
        if name == "mitigate":
            p.add_argument("--transforms", help="comma-separated subset of grayscale,color_jitter,random_invert")
            p.add_argument("--alpha", dest="target_fraction", type=float,
                           help="target as a fraction of the clean baseline")
        if name == "advtrain":
            p.add_argument("--radius", dest="at_radius", type=float)
            p.add_argument("--step", dest="at_step_size", type=float)
            p.add_argument("--steps", dest="at_steps", type=int)

    rep = sub.add_parser("report")
    rep.add_argument("artifact_dir")
    return parser


def _config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        cfg = ExperimentConfig.from_ini(path.read_text())
    else:
        cfg = ExperimentConfig()
    cfg.kind = args.command.replace("-", "_")
    names = {f.name for f in fields(ExperimentConfig)}
    for key, value in vars(args).items():
        if value is None or key not in names:
            continue
        if key in ("epsilons", "proportions"):
            value = tuple(float(s) for s in str(value).split(",") if s.strip())
        elif key == "transforms":
            value = tuple(s.strip() for s in str(value).split(",") if s.strip())
        setattr(cfg, key, value)
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            written = harness.emit_report(args.artifact_dir)
            for path in written:
                print(path)
            return harness.OK
        cfg = _config_from_args(args)
        out, status = harness.run(cfg)
        print(out)
        return status
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return harness.VALIDATION_ERROR
    except Exception as exc:  # noqa: BLE001
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return harness.RUNTIME_ERROR


if __name__ == "__main__":
    raise SystemExit(main())
