"""Error-minimizing perturbation generation.

Alternating bi-level optimization: M mini-batch surrogate updates with the
noise frozen, then one (configurable) projected *descent* step on the noise
with the surrogate frozen — this attack minimizes training loss, unlike an
adversarial-example attack.  Generation stops once training accuracy on the
perturbed set reaches the lambda threshold.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F

from . import datasets as ds
from . import modelkit as mk
from .imageops import clamp_valid, linf_norm, project_linf

CLASSWISE = "classwise"
SAMPLEWISE = "samplewise"


@dataclass
class AttackConfig:
    epsilon: float = 16 / 255
    mode: str = CLASSWISE
    lambda_stop: float = 0.99
    inner_pgd_steps: int = 1
    pgd_step_size: float = 0.8 / 255
    model_steps_per_round: int = 10
    max_rounds: int = 5000
    seed: int = 42

    def __post_init__(self):
        if not 0 <= self.epsilon <= 1:
            raise ValueError("epsilon must be in [0, 1]")
        if not 0 < self.lambda_stop <= 1:
            raise ValueError("lambda_stop must be in (0, 1]")
        if self.inner_pgd_steps < 1:
            raise ValueError("inner_pgd_steps must be >= 1")
        if self.mode not in (CLASSWISE, SAMPLEWISE):
            raise ValueError(f"unknown mode: {self.mode!r}")


@dataclass
class PerturbationSet:
    """Bounded noise keyed by class id (classwise) or sample index."""

    mode: str
    epsilon: float
    deltas: dict[int, torch.Tensor]
    provenance: dict = field(default_factory=dict)

    def delta_for(self, index: int, label: int) -> torch.Tensor:
        key = label if self.mode == CLASSWISE else index
        if key not in self.deltas:
            raise ValueError(f"no perturbation for {self.mode} key {key}")
        return self.deltas[key]

    def max_linf(self) -> float:
        return max((linf_norm(d) for d in self.deltas.values()), default=0.0)

    @property
    def converged(self) -> bool:
        return bool(self.provenance.get("converged", True))


def _delta_grads(model, images, deltas, labels):
    """d/d(delta) of summed CE loss through the pixel-validity clamp."""
    d = deltas.detach().clone().requires_grad_(True)
    loss = F.cross_entropy(model(torch.clamp(images + d, 0.0, 1.0)), labels, reduction="sum")
    (grad,) = torch.autograd.grad(loss, d)
    return grad


class _BatchStream:
    """Endless stream of shuffled mini-batch index tensors."""

    def __init__(self, n: int, batch_size: int, seed: int):
        self.n, self.batch_size = n, batch_size
        self.gen = torch.Generator().manual_seed(seed)
        self._order = torch.randperm(n, generator=self.gen)
        self._pos = 0

    def next(self) -> torch.Tensor:
        if self._pos >= self.n:
            self._order = torch.randperm(self.n, generator=self.gen)
            self._pos = 0
        idx = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return idx


def _stack_deltas(pset_mode: str, dataset, deltas: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    if pset_mode == CLASSWISE:
        return deltas[dataset.labels[idx]]
    return deltas[idx]


def generate(dataset, surrogate, cfg: AttackConfig,
             surrogate_opt: mk.OptimizerConfig | None = None) -> PerturbationSet:
    """Craft an error-minimizing PerturbationSet for ``dataset``.

    The surrogate is trained in place; callers wanting a fresh surrogate per
    call should build one (the usual pattern, and what strength_sweep does).
    """
    n = len(dataset)
    shape = dataset.image_shape
    opt_cfg = surrogate_opt or mk.OptimizerConfig(seed=cfg.seed)
    opt = mk.make_optimizer(surrogate, opt_cfg)
    stream = _BatchStream(n, opt_cfg.batch_size, cfg.seed)

    if cfg.mode == CLASSWISE:
        deltas = torch.zeros((dataset.num_classes,) + shape)
    else:
        deltas = torch.zeros((n,) + shape)

    rounds = 0
    acc = 0.0
    converged = False
    while rounds < cfg.max_rounds:
        rounds += 1
        # outer: M surrogate updates on x + delta, delta frozen
        surrogate.train()
        for _ in range(cfg.model_steps_per_round):
            idx = stream.next()
            x = torch.clamp(dataset.images[idx] + _stack_deltas(cfg.mode, dataset, deltas, idx), 0.0, 1.0)
            opt.zero_grad()
            loss = mk.cross_entropy(surrogate(x), dataset.labels[idx])
            if not torch.isfinite(loss):
                raise mk.TrainingError(f"non-finite surrogate loss at round {rounds}")
            loss.backward()
            opt.step()

        # inner: projected descent step(s) on delta, surrogate frozen
        surrogate.eval()
        for _ in range(cfg.inner_pgd_steps):
            if cfg.mode == CLASSWISE:
                grad_sum = torch.zeros_like(deltas)
                counts = torch.zeros(dataset.num_classes)
                for idx in mk.iter_batches(n, opt_cfg.batch_size, None):
                    g = _delta_grads(surrogate, dataset.images[idx], deltas[dataset.labels[idx]], dataset.labels[idx])
                    grad_sum.index_add_(0, dataset.labels[idx], g)
                    counts.index_add_(0, dataset.labels[idx], torch.ones(len(idx)))
                grad = grad_sum / counts.clamp(min=1).view(-1, 1, 1, 1)
            else:
                grad = torch.zeros_like(deltas)
                for idx in mk.iter_batches(n, opt_cfg.batch_size, None):
                    grad[idx] = _delta_grads(surrogate, dataset.images[idx], deltas[idx], dataset.labels[idx])
            deltas = project_linf(deltas - cfg.pgd_step_size * grad.sign(), cfg.epsilon)

        # stop rule: full training-set accuracy on the perturbed data
        acc = _poisoned_train_accuracy(surrogate, dataset, deltas, cfg.mode)
        if acc >= cfg.lambda_stop:
            converged = True
            break

    keys = range(dataset.num_classes) if cfg.mode == CLASSWISE else range(n)
    return PerturbationSet(
        mode=cfg.mode,
        epsilon=cfg.epsilon,
        deltas={k: deltas[k].clone() for k in keys},
        provenance={
            "surrogate_arch": getattr(surrogate, "arch", "unknown"),
            "seed": cfg.seed,
            "rounds_used": rounds,
            "final_train_accuracy": acc,
            "converged": converged,
            "epsilon": cfg.epsilon,
            "mode": cfg.mode,
        },
    )


@torch.no_grad()
def _poisoned_train_accuracy(model, dataset, deltas, mode, batch_size: int = 512) -> float:
    model.eval()
    correct = 0
    for idx in mk.iter_batches(len(dataset), batch_size, None):
        x = torch.clamp(dataset.images[idx] + _stack_deltas(mode, dataset, deltas, idx), 0.0, 1.0)
        correct += int((model(x).argmax(dim=1) == dataset.labels[idx]).sum())
    return correct / len(dataset)


def apply(dataset, pset: PerturbationSet):
    """clamp(x + delta) for every sample; additive, so never double-apply."""
    images = torch.empty_like(dataset.images)
    for i in range(len(dataset)):
        images[i] = clamp_valid(dataset.images[i] + pset.delta_for(i, int(dataset.labels[i])))
    return ds.LabeledDataset(images, dataset.labels.clone(), dataset.num_classes, name=f"{dataset.name}-perturbed")


def strength_sweep(train_set, predict_set, epsilons: list[float],
                   base_cfg: AttackConfig | None = None,
                   victim_arch: str = "small_cnn",
                   victim_opt: mk.OptimizerConfig | None = None) -> list[dict]:
    """Full generate -> apply -> train -> evaluate cycle per epsilon.

    A fresh surrogate and a fresh victim are built per epsilon with shared
    seeds; rows come back sorted by epsilon descending.
    """
    if not epsilons:
        raise ValueError("epsilons must be nonempty")
    base = base_cfg or AttackConfig()
    victim_opt = victim_opt or mk.OptimizerConfig(seed=base.seed)
    side = train_set.image_shape[1]
    rows = []
    for eps in sorted(epsilons, reverse=True):
        cfg = AttackConfig(epsilon=eps, mode=base.mode, lambda_stop=base.lambda_stop,
                           inner_pgd_steps=base.inner_pgd_steps, pgd_step_size=base.pgd_step_size,
                           model_steps_per_round=base.model_steps_per_round,
                           max_rounds=base.max_rounds, seed=base.seed)
        surrogate = mk.build_model(victim_arch, train_set.num_classes, cfg.seed, side)
        pset = generate(train_set, surrogate, cfg)
        poisoned = apply(train_set, pset)
        victim = mk.build_model(victim_arch, train_set.num_classes, victim_opt.seed, side)
        victim, _ = mk.train(victim, poisoned, victim_opt, eval_set=predict_set)
        rows.append({
            "epsilon": eps,
            "prediction_accuracy": mk.evaluate(victim, predict_set),
            "surrogate_rounds": pset.provenance["rounds_used"],
            "converged": pset.converged,
        })
    return rows


# ---------------------------------------------------------------------------
# Persistence (deltas/ + provenance.json)
# ---------------------------------------------------------------------------

def save_perturbations(pset: PerturbationSet, root) -> Path:
    root = Path(root)
    delta_dir = root / "deltas"
    delta_dir.mkdir(parents=True, exist_ok=True)
    prefix = "class" if pset.mode == CLASSWISE else "sample"
    for key, delta in pset.deltas.items():
        ds.write_delta(delta_dir / f"{prefix}_{key:06d}.bin", delta)
    (root / "provenance.json").write_text(json.dumps(
        {"mode": pset.mode, "epsilon": pset.epsilon, "provenance": pset.provenance}, indent=2))
    return root


def load_perturbations(root) -> PerturbationSet:
    root = Path(root)
    meta = json.loads((root / "provenance.json").read_text())
    mode, epsilon = meta["mode"], meta["epsilon"]
    prov = meta.get("provenance", {})
    deltas = {}
    for path in sorted((root / "deltas").glob("*.bin")):
        key = int(path.stem.split("_")[-1])
        deltas[key] = ds.read_delta(path)
    if not deltas:
        raise ds.IntegrityError(f"no delta files under {root / 'deltas'}")
    return PerturbationSet(mode=mode, epsilon=epsilon, deltas=deltas, provenance=prov)
