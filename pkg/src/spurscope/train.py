"""Mini-batch SGD training, group-wise evaluation and the minority-ratio sweep."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .data import Dataset, SpuriousDatasetSpec, build_balanced_testset, generate_dataset
from .models import Model, build_model
from .tensor import ContractError, Tape

log = logging.getLogger(__name__)

GROUP_NAMES = ("y0_s0", "y0_s1", "y1_s0", "y1_s1")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    lr: float = 0.001
    weight_decay: float = 1e-4
    batch_size: int = 32
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1:
            raise ContractError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if not self.lr > 0 or self.weight_decay < 0:
            raise ContractError("lr must be > 0 and weight_decay >= 0")


@dataclass
class GroupMetrics:
    per_group_acc: list[float | None]
    group_sizes: list[int]
    avg: float
    wga: float

    @property
    def gap(self) -> float:
        return self.avg - self.wga

    def to_json(self) -> dict:
        return {
            "per_group_acc": self.per_group_acc,
            "group_sizes": self.group_sizes,
            "avg": self.avg,
            "wga": self.wga,
            "gap": self.gap,
        }


def group_metrics(pred, y, g, n_groups: int = 4) -> GroupMetrics:
    pred, y, g = (np.asarray(a) for a in (pred, y, g))
    if len(y) == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    correct = pred == y
    sizes, accs = [], []
    for gi in range(n_groups):
        sel = g == gi
        sizes.append(int(sel.sum()))
        accs.append(float(correct[sel].mean()) if sel.any() else None)
    wga = min(a for a in accs if a is not None)
    return GroupMetrics(accs, sizes, float(correct.mean()), float(wga))


def evaluate_groups(model: Model, dataset: Dataset) -> GroupMetrics:
    return group_metrics(model.predict(dataset.images), dataset.y, dataset.g)


@dataclass
class TrainLog:
    loss: list[float] = field(default_factory=list)
    accuracy: list[float] = field(default_factory=list)
    val: list[GroupMetrics] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"loss": self.loss, "accuracy": self.accuracy, "val": [m.to_json() for m in self.val]}

    def to_csv(self) -> str:
        lines = ["epoch,loss,accuracy" + (",val_avg,val_wga" if self.val else "")]
        for i, (l, a) in enumerate(zip(self.loss, self.accuracy)):
            row = f"{i + 1},{l!r},{a!r}"
            if self.val:
                row += f",{self.val[i].avg!r},{self.val[i].wga!r}"
            lines.append(row)
        return "\n".join(lines) + "\n"


def train(
    model: Model,
    dataset: Dataset,
    config: TrainConfig,
    val: Dataset | None = None,
    params: list[str] | None = None,
    grad_masks: dict[str, np.ndarray] | None = None,
) -> tuple[Model, TrainLog]:
    """Plain SGD with weight decay, in place.

    ``params`` restricts which parameters move (default: all); ``grad_masks``
    zeroes selected gradient entries so pruned weights stay pruned.
    """
    config.validate()
    if len(dataset) == 0:
        raise ContractError("cannot train on an empty dataset")
    names = list(params) if params is not None else list(model.params)
    trainable = [model.params[k] for k in names]
    frozen = [p for k, p in model.params.items() if k not in set(names)]
    for p in frozen:
        p.requires_grad = False
    rng = np.random.default_rng(config.seed)
    log_ = TrainLog()
    n = len(dataset)
    try:
        for epoch in range(config.epochs):
            order = rng.permutation(n)
            total_loss, total_correct = 0.0, 0
            for b, start in enumerate(range(0, n, config.batch_size)):
                idx = order[start : start + config.batch_size]
                for p in trainable:
                    p.grad = None
                with Tape() as tape:
                    logits, _ = model.forward_with_trace(dataset.images[idx])
                    loss = T.softmax_cross_entropy(logits, dataset.y[idx])
                if not np.isfinite(loss.data):
                    raise TrainingError(f"non-finite loss at epoch {epoch + 1}, batch {b} (lr={config.lr})")
                tape.backward(loss)
                grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in trainable]
                if grad_masks:
                    grads = [g * grad_masks[k] if k in grad_masks else g for k, g in zip(names, grads)]
                T.sgd_step(trainable, grads, config.lr, config.weight_decay)
                total_loss += loss.item() * len(idx)
                total_correct += int((logits.data.argmax(axis=1) == dataset.y[idx]).sum())
            log_.loss.append(total_loss / n)
            log_.accuracy.append(total_correct / n)
            if val is not None:
                log_.val.append(evaluate_groups(model, val))
            log.debug("epoch %d loss %.4f acc %.3f", epoch + 1, log_.loss[-1], log_.accuracy[-1])
    finally:
        for p in model.params.values():
            p.grad = None
            p.requires_grad = True
    return model, log_


def train_accuracy(model: Model, dataset: Dataset) -> float:
    return float((model.predict(dataset.images) == dataset.y).mean())


@dataclass
class SweepRow:
    rho: float
    seed: int
    train_accuracy: float
    metrics: GroupMetrics

    def minority_acc(self) -> float:
        # groups 1 and 2 are the minority groups of the symmetric construction
        a = [self.metrics.per_group_acc[1], self.metrics.per_group_acc[2]]
        return float(np.mean(a))

    def majority_acc(self) -> float:
        a = [self.metrics.per_group_acc[0], self.metrics.per_group_acc[3]]
        return float(np.mean(a))

    def to_json(self) -> dict:
        return {
            "rho": self.rho,
            "seed": self.seed,
            "train_accuracy": self.train_accuracy,
            "minority_acc": self.minority_acc(),
            "majority_acc": self.majority_acc(),
            **self.metrics.to_json(),
        }


def sweep_entry(base_spec: SpuriousDatasetSpec, rho: float, seed: int, config: TrainConfig, model_config, test: Dataset):
    """Train one (rho, seed) cell from scratch. Returns (row, model, train set)."""
    spec = replace(base_spec, rho=rho, seed=base_spec.seed + 1000 * seed)
    ds = generate_dataset(spec)
    model = build_model(model_config, seed=seed)
    train(model, ds, replace(config, seed=seed))
    return SweepRow(rho, seed, train_accuracy(model, ds), evaluate_groups(model, test)), model, ds


def sweep_testset(base_spec: SpuriousDatasetSpec, n_per_group: int = 100, test_seed: int = 12345) -> Dataset:
    return build_balanced_testset(replace(base_spec, seed=test_seed), n_per_group)


def minority_ratio_sweep(
    base_spec: SpuriousDatasetSpec,
    rhos,
    config: TrainConfig,
    model_config,
    seeds=(0,),
    n_test_per_group: int = 100,
    test_seed: int = 12345,
) -> list[SweepRow]:
    """Retrain from scratch for every (rho, seed); one shared balanced test set."""
    rhos = list(rhos)
    if not rhos:
        raise ContractError("rho list is empty")
    for r in rhos:
        if not 0.5 <= r <= 1.0:
            raise ContractError(f"sweep rho must lie in [0.5, 1.0], got {r}")
    test = sweep_testset(base_spec, n_test_per_group, test_seed)
    return [sweep_entry(base_spec, rho, seed, config, model_config, test)[0] for rho in rhos for seed in seeds]


def seed_average(rows: list[SweepRow]) -> list[dict]:
    """Per-rho means of minority and majority accuracy, in rho order."""
    out = []
    for rho in sorted({r.rho for r in rows}):
        sel = [r for r in rows if r.rho == rho]
        out.append(
            {
                "rho": rho,
                "minority_acc": float(np.mean([r.minority_acc() for r in sel])),
                "majority_acc": float(np.mean([r.majority_acc() for r in sel])),
                "gap": float(np.mean([r.metrics.gap for r in sel])),
                "seeds": len(sel),
            }
        )
    return out


def config_to_json(config: TrainConfig) -> dict:
    return asdict(config)
