"""Post-hoc edits of trained models.

Classifier pruning by s-score, group-balanced head fine-tuning, sparse
last-layer re-weighting (ISTA-trained l1 logistic regression), and binary
weight masks trained on frozen weights.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .attribution import SScoreReport, sscore_report
from .data import Dataset
from .models import ConfigError, Model, encode
from .tensor import ContractError, Tape, Tensor
from .train import GroupMetrics, TrainConfig, evaluate_groups, group_metrics, train

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


# ------------------------------------------------------------------ classifier


@dataclass
class ClassifierEdit:
    zeroed: list[int]
    head_weight: np.ndarray  # d×|Y|; row i carries neuron i
    head_bias: np.ndarray
    provenance: dict = field(default_factory=dict)

    def apply(self, model: Model) -> Model:
        out = model.copy()
        out.params["head.weight"].data = self.head_weight.astype(np.float32).copy()
        out.params["head.bias"].data = self.head_bias.astype(np.float32).copy()
        out.provenance.append(self.provenance)
        return out


def prune_classifier_by_sscore(model: Model, report: SScoreReport, tau: float = 0.7) -> tuple[ClassifierEdit, Model]:
    """Zero the head weights of every neuron whose s-score exceeds ``tau``. No retraining."""
    if len(report.scores) != model.dim:
        raise ContractError(f"report covers {len(report.scores)} neurons, model has d={model.dim}")
    zeroed = [i for i, s in enumerate(report.scores) if s > tau]
    W = model.params["head.weight"].data.copy()
    b = model.params["head.bias"].data.copy()
    if not zeroed:
        log.warning("no neuron has s-score > %s; classifier left unchanged", tau)
    W[zeroed, :] = 0.0
    edit = ClassifierEdit(zeroed, W, b, {"method": "prune_sscore", "tau": tau, "alpha": report.alpha, "n": report.n})
    return edit, edit.apply(model)


def _check_balanced(ds: Dataset) -> None:
    counts = [c for c in ds.census() if c > 0]
    if len(counts) < 2 or len(set(counts)) != 1:
        raise ContractError(f"set is not group-balanced: census {ds.census()}")


def finetune_classifier_balanced(
    model: Model, balanced: Dataset, config: TrainConfig, zeroed=()
) -> tuple[ClassifierEdit, Model]:
    """SGD on the head only; rows listed in ``zeroed`` are held at exactly zero."""
    _check_balanced(balanced)
    out = model.copy()
    zeroed = sorted(set(int(i) for i in zeroed))
    gm = np.ones_like(out.params["head.weight"].data)
    gm[zeroed, :] = 0.0
    out.params["head.weight"].data[zeroed, :] = 0.0
    train(out, balanced, config, params=["head.weight", "head.bias"], grad_masks={"head.weight": gm})
    prov = {"method": "finetune_balanced", "epochs": config.epochs, "lr": config.lr, "seed": config.seed, "zeroed": zeroed}
    out.provenance.append(prov)
    edit = ClassifierEdit(zeroed, out.params["head.weight"].data.copy(), out.params["head.bias"].data.copy(), prov)
    return edit, out


# ------------------------------------------------------- l1 logistic regression


def _softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _ce(X, Y, W, b) -> float:
    z = X @ W + b
    zmax = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=1)) + zmax[:, 0]
    return float((lse - (z * Y).sum(axis=1)).mean())


def soft_threshold(x: np.ndarray, t: float) -> np.ndarray:
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def lambda_max(X: np.ndarray, y: np.ndarray, num_classes: int = 2) -> float:
    """Smallest l1 strength for which W = 0 is optimal."""
    X = np.asarray(X, np.float64)
    Y = np.eye(num_classes)[np.asarray(y)]
    prior = Y.mean(axis=0)
    b = np.log(np.clip(prior, 1e-12, None))
    P = _softmax(np.broadcast_to(b, Y.shape))
    return float(np.abs(X.T @ (P - Y) / len(X)).max())


@dataclass
class L1Fit:
    weight: np.ndarray
    bias: np.ndarray
    objective: list[float]
    step: float


def l1_logistic_regression(
    X, y, lam: float, iterations: int = 2000, num_classes: int = 2, tol: float = 1e-12
) -> L1Fit:
    """Proximal gradient (ISTA) on mean cross-entropy + lam * ||W||_1.

    Starts from zero, leaves the bias unpenalised, and uses the step 1/L with
    L = ||[X, 1]||_2^2 / (2N), a Lipschitz bound for the softmax loss.
    """
    if lam < 0:
        raise ContractError("lam must be >= 0")
    X = np.asarray(X, np.float64)
    y = np.asarray(y)
    N, d = X.shape
    Y = np.eye(num_classes)[y]
    Xt = np.hstack([X, np.ones((N, 1))])
    L = np.linalg.norm(Xt, 2) ** 2 / (2 * N)
    step = 1.0 / max(L, 1e-12)
    W = np.zeros((d, num_classes))
    b = np.zeros(num_classes)

    def objective(W, b):
        return _ce(X, Y, W, b) + lam * np.abs(W).sum()

    hist = [objective(W, b)]
    rising, halvings = 0, 0
    for _ in range(iterations):
        G = (_softmax(X @ W + b) - Y) / N
        W_new = soft_threshold(W - step * (X.T @ G), step * lam)
        b_new = b - step * G.sum(axis=0)
        f = objective(W_new, b_new)
        rising = rising + 1 if f > hist[-1] else 0
        if rising >= 10:
            halvings += 1
            if halvings > 5:
                raise DivergenceError(f"ISTA diverged after {halvings - 1} step halvings (lam={lam})")
            step /= 2
            rising = 0
        W, b = W_new, b_new
        hist.append(f)
        if abs(hist[-2] - f) <= tol * max(1.0, abs(f)):
            break
    return L1Fit(W, b, hist, step)


def prune_ratio(W: np.ndarray) -> float:
    """Fraction of head weights that are exactly zero (bias excluded)."""
    W = np.asarray(W)
    return float((W == 0).sum() / W.size)


@dataclass
class DfrResult:
    head_weight: np.ndarray
    head_bias: np.ndarray
    lam: float
    prune_h: float
    before: GroupMetrics
    after: GroupMetrics
    sscore_before: float
    sscore_after: float
    connected_sscore_before: float
    connected_sscore_after: float
    grid: list[dict]
    model: Model | None = None

    def to_json(self) -> dict:
        return {
            "schema": 1,
            "lambda": self.lam,
            "prune_h": self.prune_h,
            "before": self.before.to_json(),
            "after": self.after.to_json(),
            "sscore_before": self.sscore_before,
            "sscore_after": self.sscore_after,
            "connected_sscore_before": self.connected_sscore_before,
            "connected_sscore_after": self.connected_sscore_after,
            "grid": self.grid,
        }


def _row_hashes(ds: Dataset) -> set[str]:
    return {hashlib.sha1(img.tobytes()).hexdigest() for img in ds.images}


DEFAULT_LAMBDAS = (0.0, 1e-3, 3e-3, 1e-2, 3e-2, 0.1)


def connected_neurons(W: np.ndarray) -> np.ndarray:
    """Neurons whose head row has at least one nonzero weight."""
    return np.flatnonzero(np.asarray(W).any(axis=1))


def dfr_retrain(
    model: Model,
    fit_set: Dataset,
    tune_set: Dataset,
    lambdas=DEFAULT_LAMBDAS,
    eval_set: Dataset | None = None,
    iterations: int = 2000,
    sscore_data: Dataset | None = None,
    sscore_n: int = 50,
    alpha: float = 0.5,
    seed: int = 0,
) -> DfrResult:
    """Refit the head on a balanced set; pick lambda by tune-set WGA.

    Embeddings are standardised with fit-set statistics for the solver and
    the scaling is folded back into the returned head. Ties go to the larger
    lambda. s-score reports are computed on the original and on the edited
    model; the connected means cover only neurons the head still reads.
    """
    _check_balanced(fit_set)
    _check_balanced(tune_set)
    if _row_hashes(fit_set) & _row_hashes(tune_set):
        raise ContractError("fit and tune sets overlap")
    lambdas = sorted(set(float(l) for l in lambdas))
    if not lambdas:
        raise ContractError("empty lambda grid")
    Zf = encode(model, fit_set.images).astype(np.float64)
    Zt = encode(model, tune_set.images).astype(np.float64)
    mu = Zf.mean(axis=0)
    sd = Zf.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    grid, best = [], None
    for lam in lambdas:
        fit = l1_logistic_regression((Zf - mu) / sd, fit_set.y, lam, iterations)
        W = fit.weight / sd[:, None]
        b = fit.bias - (mu / sd) @ fit.weight
        pred = (Zt @ W + b).argmax(axis=1)
        m = group_metrics(pred, tune_set.y, tune_set.g)
        grid.append({"lambda": lam, "tune_wga": m.wga, "tune_avg": m.avg, "prune_h": prune_ratio(W)})
        if best is None or m.wga >= best[0]:
            best = (m.wga, lam, W, b)
    _, lam, W, b = best
    edit = ClassifierEdit(
        np.flatnonzero(~W.any(axis=1)).tolist(), W, b, {"method": "dfr", "lambda": lam, "iterations": iterations}
    )
    edited = edit.apply(model)
    ev = eval_set if eval_set is not None else tune_set
    before, after = evaluate_groups(model, ev), evaluate_groups(edited, ev)
    sdata = sscore_data if sscore_data is not None else fit_set
    rep_b = sscore_report(model, sdata, sscore_n, alpha, seed)
    rep_a = sscore_report(edited, sdata, sscore_n, alpha, seed)
    return DfrResult(
        W,
        b,
        lam,
        prune_ratio(W),
        before,
        after,
        rep_b.mean,
        rep_a.mean,
        rep_b.mean_over(connected_neurons(model.params["head.weight"].data)),
        rep_a.mean_over(connected_neurons(W)),
        grid,
        edited,
    )


# ----------------------------------------------------------------- weight mask


@dataclass(frozen=True)
class MaskConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 0.05  # Adam on mask logits
    init_logit: float = 2.0
    sparsity: float = 1.0  # initial weight of the mean-sigmoid penalty
    adapt: float = 1.02  # multiplicative penalty adaptation towards the keep fraction
    seed: int = 0


@dataclass
class WeightMask:
    masks: dict[str, np.ndarray]
    keep: float

    @property
    def counts(self) -> dict[str, int]:
        return {k: int(m.sum()) for k, m in self.masks.items()}

    @property
    def kept_fraction(self) -> float:
        total = sum(m.size for m in self.masks.values())
        return sum(self.counts.values()) / total

    def to_json(self) -> dict:
        sizes = {k: int(m.size) for k, m in self.masks.items()}
        return {"keep": self.keep, "kept_fraction": self.kept_fraction, "kept": self.counts, "sizes": sizes}


def maskable_params(model: Model) -> list[str]:
    return [k for k, p in model.params.items() if k.endswith(".weight") and p.ndim >= 2]


def layer_floor(size: int) -> int:
    return max(1, int(np.ceil(0.01 * size)))


def project_top_k(scores: dict[str, np.ndarray], keep: float) -> dict[str, np.ndarray]:
    """Keep the globally highest ``keep`` fraction, with a per-layer floor of
    max(1, 1% of the layer). Ties resolve by layer order, then flat index."""
    if not 0.0 < keep <= 1.0:
        raise ConfigError(f"keep fraction must lie in (0, 1], got {keep}")
    names = list(scores)
    sizes = [scores[k].size for k in names]
    total = sum(sizes)
    budget = int(round(keep * total))
    floors = [layer_floor(s) for s in sizes]
    if sum(floors) > budget:
        raise ConfigError(f"keep={keep} leaves {budget} weights, below the per-layer floors ({sum(floors)})")
    flat = [scores[k].reshape(-1).astype(np.float64) for k in names]
    chosen = [np.zeros(s, bool) for s in sizes]
    for li, (f, fl) in enumerate(zip(flat, floors)):
        chosen[li][np.argsort(-f, kind="stable")[:fl]] = True
    remaining = budget - sum(floors)
    cand_scores = np.concatenate([np.where(c, -np.inf, f) for c, f in zip(chosen, flat)])
    order = np.argsort(-cand_scores, kind="stable")[:remaining]
    offsets = np.cumsum([0] + sizes)
    for idx in order:
        li = int(np.searchsorted(offsets, idx, side="right") - 1)
        chosen[li][idx - offsets[li]] = True
    return {k: c.reshape(scores[k].shape) for k, c in zip(names, chosen)}


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _ste_mask(logits: Tensor, u: np.ndarray) -> Tensor:
    """Bernoulli(sigmoid(logit)) sample forward; sigmoid derivative backward."""
    sig = _sigmoid(logits.data)
    hard = (u < sig).astype(logits.data.dtype)
    return T.custom_op("ste_mask", (logits,), hard, lambda g: (g * sig * (1 - sig),))


def train_weight_mask(
    model: Model, subpop: Dataset, keep: float = 0.8, config: MaskConfig = MaskConfig(), names=None
) -> tuple[WeightMask, Model]:
    """Learn a binary mask over the frozen weights on ``subpop``, then project to
    the top ``keep`` fraction. Returns the mask and the masked model."""
    names = list(names) if names is not None else maskable_params(model)
    sizes = {k: model.params[k].size for k in names}
    total = sum(sizes.values())
    # validate the projection before spending time on training
    project_top_k({k: np.zeros(model.params[k].shape) for k in names}, keep)
    if keep == 1.0:
        masks = {k: np.ones(model.params[k].shape, np.float32) for k in names}
        out = model.copy()
        out.masks = masks
        return WeightMask(masks, keep), out

    rng = np.random.default_rng(config.seed)
    logits = {k: Tensor(np.full(model.params[k].shape, config.init_logit, np.float32), requires_grad=True, name=k) for k in names}
    frozen = {k: Tensor(model.params[k].data, requires_grad=False, name=k) for k in model.params}
    m1 = {k: np.zeros_like(v.data) for k, v in logits.items()}
    m2 = {k: np.zeros_like(v.data) for k, v in logits.items()}
    b1, b2, eps = 0.9, 0.999, 1e-8
    beta = config.sparsity
    step = 0
    n = len(subpop)
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            u = {k: rng.random(logits[k].shape) for k in names}
            for v in logits.values():
                v.grad = None
            with Tape() as tape:
                overrides = dict(frozen)
                for k in names:
                    overrides[k] = T.mul(frozen[k], _ste_mask(logits[k], u[k]))
                out, _ = model.forward_with_trace(subpop.images[idx], overrides=overrides)
                loss = T.softmax_cross_entropy(out, subpop.y[idx])
            tape.backward(loss)
            step += 1
            density = 0.0
            for k in names:
                sig = _sigmoid(logits[k].data)
                density += float(sig.sum())
                g = logits[k].grad if logits[k].grad is not None else np.zeros_like(sig)
                g = g + beta * sig * (1 - sig) / total
                m1[k] = b1 * m1[k] + (1 - b1) * g
                m2[k] = b2 * m2[k] + (1 - b2) * g * g
                mh = m1[k] / (1 - b1**step)
                vh = m2[k] / (1 - b2**step)
                logits[k].data -= (config.lr * mh / (np.sqrt(vh) + eps)).astype(np.float32)
            density /= total
            beta = beta * config.adapt if density > keep else beta / config.adapt
    chosen = project_top_k({k: v.data for k, v in logits.items()}, keep)
    masks = {k: c.astype(np.float32) for k, c in chosen.items()}
    out = model.copy()
    out.masks = masks
    out.provenance.append({"method": "weight_mask", "keep": keep, **{f"mask_{k}": v for k, v in vars(config).items()}})
    return WeightMask(masks, keep), out


@dataclass
class AblationResult:
    group: int
    before: GroupMetrics
    after: GroupMetrics
    mask: WeightMask

    @property
    def delta(self) -> list[float | None]:
        return [None if a is None or b is None else b - a for a, b in zip(self.before.per_group_acc, self.after.per_group_acc)]

    def to_json(self) -> dict:
        return {
            "schema": 1,
            "ablated_group": self.group,
            "before": self.before.to_json(),
            "after": self.after.to_json(),
            "delta": {str(g): d for g, d in enumerate(self.delta)},
            "mask": self.mask.to_json(),
        }


def group_ablation_experiment(
    model: Model, train_set: Dataset, group: int, test_set: Dataset, keep: float = 0.8, config: MaskConfig = MaskConfig()
) -> AblationResult:
    """Mask-train on ``train_set`` minus one group and compare group accuracies."""
    if train_set.census()[group] == 0:
        raise ContractError(f"group {group} is empty in the training set")
    mask, masked = train_weight_mask(model, train_set.without_group(group), keep, config)
    return AblationResult(group, evaluate_groups(model, test_set), evaluate_groups(masked, test_set), mask)


def with_seed(config: MaskConfig, seed: int) -> MaskConfig:
    return replace(config, seed=seed)
