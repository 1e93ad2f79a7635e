"""Per-neuron GradCAM, binarisation, the s-score, and ViT attention-row maps."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import Dataset
from .models import FamilyError, Model
from .tensor import ContractError, Tape, Tensor

LOW, HIGH = 0.2, 0.7
OUT = 32


@dataclass
class Heatmap:
    values: np.ndarray  # 32×32 in [0, 1]
    neuron: int
    sample: int | None = None


@dataclass
class BinaryMap:
    values: np.ndarray  # 32×32 bool
    alpha: float


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Rows interpolate ``n_in`` samples onto ``n_out`` output pixels.

    Sample k sits at output pixel k * n_out / n_in. With 'same' padding and
    stride s a feature cell k is centred on input pixel s*k, so this places
    the map where its receptive fields are (half-pixel centres would shift
    it by (s - 1) / 2 pixels). Beyond the last sample the value is held.
    """
    U = np.zeros((n_out, n_in), dtype=np.float64)
    ratio = n_in / n_out
    for o in range(n_out):
        src = min(o * ratio, n_in - 1)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        f = src - i0
        U[o, i0] += 1 - f
        U[o, i1] += f
    return U


def max_normalize(cams: np.ndarray) -> np.ndarray:
    """Scale each trailing 2-D map to max 1; all-zero maps stay zero."""
    peak = cams.max(axis=(-2, -1), keepdims=True)
    safe = np.where(peak > 0, peak, 1.0)
    return np.where(peak > 0, cams / safe, 0.0)


def _check_neurons(model: Model, neurons) -> list[int]:
    neurons = list(range(model.dim)) if neurons is None else [int(i) for i in neurons]
    for i in neurons:
        if not 0 <= i < model.dim:
            raise IndexError(f"neuron {i} out of range for d={model.dim}")
    return neurons


def cnn_gradcam(model: Model, images: np.ndarray, neurons=None) -> np.ndarray:
    """GradCAM of penultimate neurons at the last conv block.

    Returns an N×len(neurons)×32×32 array of max-normalised heatmaps.
    """
    if model.family != "cnn":
        raise FamilyError("cnn_gradcam needs a CNN model")
    neurons = _check_neurons(model, neurons)
    images = np.asarray(images, np.float32)
    x = Tensor(images, requires_grad=True)
    with Tape() as tape:
        _, trace = model.forward_with_trace(x)
        fmap = trace.feature_maps
        z = trace.z
        roots = [T.sum(T.take(z, i, axis=1)) for i in neurons]
    a = fmap.data.astype(np.float64)
    h, w = a.shape[2:]
    Uh, Uw = bilinear_matrix(h, OUT), bilinear_matrix(w, OUT)
    out = np.empty((len(images), len(neurons), OUT, OUT))
    for k, root in enumerate(roots):
        (g,) = tape.grad(root, [fmap])
        weights = g.astype(np.float64).mean(axis=(2, 3))
        cam = np.maximum(np.einsum("nc,nchw->nhw", weights, a), 0.0)
        out[:, k] = Uh @ cam @ Uw.T
    return max_normalize(out)


def vit_gradcam(model: Model, images: np.ndarray, neurons=None, layer: int | None = None) -> np.ndarray:
    """Token-level GradCAM for a ViT: per patch token, relu(gradient · activation)
    at the input of ``layer`` (default: last), nearest-upsampled to 32×32."""
    if model.family != "vit":
        raise FamilyError("vit_gradcam needs a ViT model")
    c = model.config
    layer = c.layers - 1 if layer is None else layer
    if not 0 <= layer < c.layers:
        raise IndexError(f"layer {layer} out of range for {c.layers} layers")
    neurons = _check_neurons(model, neurons)
    images = np.asarray(images, np.float32)
    x = Tensor(images, requires_grad=True)
    with Tape() as tape:
        _, trace = model.forward_with_trace(x)
        tok = trace.tokens[layer]
        roots = [T.sum(T.take(trace.z, i, axis=1)) for i in neurons]
    a = tok.data[:, 1:].astype(np.float64)
    g_, s = c.grid, c.patch_size
    out = np.empty((len(images), len(neurons), OUT, OUT))
    for k, root in enumerate(roots):
        (g,) = tape.grad(root, [tok])
        cam = np.maximum((g[:, 1:].astype(np.float64) * a).sum(axis=-1), 0.0).reshape(-1, g_, g_)
        out[:, k] = np.repeat(np.repeat(cam, s, axis=1), s, axis=2)
    return max_normalize(out)


def gradcam(model: Model, images: np.ndarray, neurons=None, layer: int | None = None) -> np.ndarray:
    if model.family == "cnn":
        return cnn_gradcam(model, images, neurons)
    return vit_gradcam(model, images, neurons, layer)


def gradcam_neuron_cnn(model: Model, x: np.ndarray, i: int) -> Heatmap:
    return Heatmap(cnn_gradcam(model, np.asarray(x)[None], [i])[0, 0], i)


def gradcam_neuron_vit(model: Model, x: np.ndarray, i: int, layer: int | None = None) -> Heatmap:
    return Heatmap(vit_gradcam(model, np.asarray(x)[None], [i], layer)[0, 0], i)


def binarize(hm, alpha: float = 0.5):
    """``hm >= alpha`` pointwise. Accepts a Heatmap or a raw array."""
    if not 0.0 < alpha <= 1.0:
        raise ContractError(f"alpha must lie in (0, 1], got {alpha}")
    if isinstance(hm, Heatmap):
        return BinaryMap(hm.values >= alpha, alpha)
    return np.asarray(hm) >= alpha


def _ordered_mean(values) -> float:
    total = 0.0
    for v in values:
        total += float(v)
    return total / len(values)


def overlap_terms(binary: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """Per-sample |b ∧ m| / |b|, 0 where b is empty. Shapes N×H×W."""
    binary = np.asarray(binary, bool)
    masks = np.asarray(masks, bool)
    inside = (binary & masks).sum(axis=(-2, -1))
    active = binary.sum(axis=(-2, -1))
    return np.where(active > 0, inside / np.maximum(active, 1), 0.0)


def sscore_from_maps(binary: np.ndarray, masks: np.ndarray) -> float:
    if len(binary) == 0:
        raise ContractError("s-score needs at least one sample")
    return _ordered_mean(overlap_terms(binary, masks))


def neuron_sscore(model: Model, images: np.ndarray, masks: np.ndarray, i: int, alpha: float = 0.5, layer=None) -> float:
    if len(images) == 0:
        raise ContractError("s-score needs at least one sample")
    cams = gradcam(model, images, [i], layer)[:, 0]
    return sscore_from_maps(binarize(cams, alpha), masks)


@dataclass
class SScoreReport:
    scores: list[float]
    alpha: float
    n: int
    sample_ids: list[int]
    buckets: dict[str, list[int]] = field(default_factory=dict)

    @property
    def mean(self) -> float:
        return _ordered_mean(self.scores)

    def mean_over(self, neurons) -> float:
        neurons = list(neurons)
        return _ordered_mean([self.scores[i] for i in neurons]) if neurons else 0.0

    def to_json(self) -> dict:
        return {
            "schema": 1,
            "alpha": self.alpha,
            "n": self.n,
            "sample_ids": self.sample_ids,
            "scores": self.scores,
            "buckets": self.buckets,
            "mean": self.mean,
        }

    @classmethod
    def from_json(cls, d: dict) -> SScoreReport:
        return cls(list(d["scores"]), d["alpha"], d["n"], list(d["sample_ids"]), dict(d["buckets"]))


def bucketize(scores) -> dict[str, list[int]]:
    b = {"low": [], "mid": [], "high": []}
    for i, s in enumerate(scores):
        b["low" if s < LOW else "high" if s > HIGH else "mid"].append(i)
    return b


def eligible_samples(dataset: Dataset) -> np.ndarray:
    return np.flatnonzero(dataset.masks.reshape(len(dataset), -1).any(axis=1))


def sscore_report(model: Model, dataset: Dataset, n: int = 50, alpha: float = 0.5, seed: int = 0, layer=None) -> SScoreReport:
    """s-scores of every penultimate neuron over ``n`` seeded spurious-carrying samples."""
    if n < 1:
        raise ContractError("n must be >= 1")
    pool = eligible_samples(dataset)
    if len(pool) < n:
        raise ContractError(f"only {len(pool)} samples carry a spurious mask, need {n}")
    ids = np.sort(np.random.default_rng(seed).choice(pool, size=n, replace=False))
    cams = gradcam(model, dataset.images[ids], None, layer)
    masks = dataset.masks[ids]
    b = binarize(cams, alpha)
    scores = [sscore_from_maps(b[:, i], masks) for i in range(model.dim)]
    return SScoreReport(scores, alpha, n, [int(i) for i in ids], bucketize(scores))


@dataclass
class AttentionRowMap:
    grid: np.ndarray  # grid×grid patch entries of the row, raw probabilities
    row: np.ndarray  # full row including the class-token column
    layer: int
    head: int | str
    target: int

    @property
    def cls_weight(self) -> float:
        return float(self.row[0])


def attention_row_map(model: Model, x: np.ndarray, layer: int, head: int | str = "mean", target: int = 0) -> AttentionRowMap:
    """Row ``target`` of the layer's attention (one head or the head mean).

    Token 0 is the class token; token ``1 + r*grid + c`` is patch (r, c).
    """
    if model.family != "vit":
        raise FamilyError("attention maps need a ViT model")
    c = model.config
    if not 0 <= layer < c.layers:
        raise IndexError(f"layer {layer} out of range for {c.layers} layers")
    if not 0 <= target < c.num_patches + 1:
        raise IndexError(f"target token {target} out of range")
    _, trace = model.forward_with_trace(np.asarray(x, np.float32)[None] if np.ndim(x) == 3 else x)
    A = trace.attention[layer].data[0].astype(np.float64)  # heads×T×T
    if head == "mean":
        row = A[:, target, :].mean(axis=0)
    else:
        if not 0 <= int(head) < c.heads:
            raise IndexError(f"head {head} out of range for {c.heads} heads")
        row = A[int(head), target, :]
    return AttentionRowMap(row[1:].reshape(c.grid, c.grid), row, layer, head, target)
