"""Embedding export, exact t-SNE, cluster alignment and PGM heatmap output."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from sklearn.metrics import silhouette_score

from .attribution import AttentionRowMap, BinaryMap, Heatmap
from .data import Dataset
from .models import Model, encode
from .tensor import ContractError

MAX_TSNE_POINTS = 2000


@dataclass
class EmbeddingSet:
    matrix: np.ndarray  # N×d
    y: np.ndarray
    s: np.ndarray
    g: np.ndarray
    model_id: str = ""

    def __post_init__(self):
        n = len(self.matrix)
        if not (len(self.y) == len(self.s) == len(self.g) == n):
            raise ContractError("embedding rows and annotations differ in length")

    def __len__(self) -> int:
        return len(self.matrix)

    def to_csv(self) -> str:
        d = self.matrix.shape[1]
        lines = ["y,s,g," + ",".join(f"z{i}" for i in range(d))]
        for row, y, s, g in zip(self.matrix, self.y, self.s, self.g):
            lines.append(f"{y},{s},{g}," + ",".join(repr(float(v)) for v in row))
        return "\n".join(lines) + "\n"


def export_embeddings(model: Model, dataset: Dataset) -> EmbeddingSet:
    if len(dataset) == 0:
        raise ContractError("cannot export embeddings of an empty dataset")
    z = encode(model, dataset.images)
    return EmbeddingSet(z, dataset.y.copy(), dataset.s.copy(), dataset.g.copy(), model.encoder_checksum())


# ----------------------------------------------------------------------- t-SNE


@dataclass
class Projection2D:
    coords: np.ndarray
    kl: float
    kl_history: list[float]
    params: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "schema": 1,
            "kl": self.kl,
            "params": self.params,
            "coords": self.coords.tolist(),
        }


def _sq_distances(X: np.ndarray) -> np.ndarray:
    # explicit differences row by row: identical rows get bitwise identical distance rows
    D = np.empty((len(X), len(X)))
    for i in range(len(X)):
        diff = X - X[i]
        D[i] = (diff * diff).sum(axis=1)
    return D


def conditional_probabilities(D: np.ndarray, perplexity: float, tol: float = 1e-5, max_iter: int = 100) -> np.ndarray:
    """Row-wise Gaussian affinities whose entropy matches log(perplexity)."""
    n = len(D)
    target = np.log(perplexity)
    P = np.zeros((n, n))
    for i in range(n):
        d = np.delete(D[i], i)
        beta, lo, hi = 1.0, 0.0, np.inf
        for _ in range(max_iter):
            e = np.exp(-(d - d.min()) * beta)
            # sorted sums make the result independent of where the row's own entry sat
            tot = np.sort(e).sum()
            p = e / tot
            H = np.log(tot) + beta * np.sort(p * (d - d.min())).sum()
            if abs(H - target) < tol:
                break
            if H > target:
                lo = beta
                beta = beta * 2 if hi == np.inf else (beta + hi) / 2
            else:
                hi = beta
                beta = (beta + lo) / 2
        P[i, np.arange(n) != i] = p
    return P


def joint_probabilities(X: np.ndarray, perplexity: float) -> np.ndarray:
    P = conditional_probabilities(_sq_distances(X), perplexity)
    P = (P + P.T) / (2.0 * len(X))
    return np.maximum(P, 1e-12)


def _q(Y: np.ndarray):
    num = 1.0 / (1.0 + _sq_distances(Y))
    np.fill_diagonal(num, 0.0)
    return num, np.maximum(num / num.sum(), 1e-12)


def kl_divergence(P: np.ndarray, Y: np.ndarray) -> float:
    _, Q = _q(Y)
    mask = ~np.eye(len(P), dtype=bool)
    return float((P[mask] * np.log(P[mask] / Q[mask])).sum())


def _gradient(P: np.ndarray, Y: np.ndarray) -> np.ndarray:
    num, Q = _q(Y)
    W = (P - Q) * num
    return 4.0 * (W[:, :, None] * (Y[:, None, :] - Y[None, :, :])).sum(axis=1)


def tsne_project(
    emb,
    perplexity: float = 30.0,
    iters: int = 500,
    seed: int = 0,
    learning_rate: float = 200.0,
    exaggeration: float = 12.0,
    exaggeration_iters: int = 100,
    momentum_switch: int = 250,
) -> Projection2D:
    """Exact t-SNE.

    Gradient descent with momentum 0.5, then 0.8 from ``momentum_switch``.
    After the exaggeration phase each step is accepted only if it does not
    increase KL; otherwise the step is halved and momentum dropped. Identical
    input rows share their initial position, so they stay together.
    """
    X = np.asarray(emb.matrix if isinstance(emb, EmbeddingSet) else emb, np.float64)
    n = len(X)
    if n > MAX_TSNE_POINTS:
        raise ContractError(f"exact t-SNE is limited to {MAX_TSNE_POINTS} points, got {n}")
    if perplexity <= 0 or n < 3 * perplexity:
        raise ContractError(f"perplexity {perplexity} infeasible for N={n} (need N >= 3*perplexity)")
    P = joint_probabilities(X, perplexity)
    _, first, inverse = np.unique(X, axis=0, return_index=True, return_inverse=True)
    rng = np.random.default_rng(seed)
    Y = (1e-4 * rng.standard_normal((len(first), 2)))[np.asarray(inverse).reshape(-1)]
    vel = np.zeros_like(Y)
    lr = learning_rate
    history = []
    kl = None
    for it in range(iters):
        mom = 0.5 if it < momentum_switch else 0.8
        if it < exaggeration_iters:
            vel = mom * vel - lr * _gradient(P * exaggeration, Y)
            Y = Y + vel
            continue
        if kl is None:
            kl = kl_divergence(P, Y)
            history.append(kl)
        grad = _gradient(P, Y)
        step = mom * vel - lr * grad
        for _ in range(30):
            cand = Y + step
            kl_c = kl_divergence(P, cand)
            if kl_c <= kl:
                break
            lr /= 2.0
            step = -lr * grad
        else:
            cand, kl_c, step = Y, kl, np.zeros_like(Y)
        Y, kl, vel = cand, kl_c, step
        history.append(kl)
    if kl is None:
        kl = kl_divergence(P, Y)
        history.append(kl)
    params = {
        "perplexity": perplexity,
        "iters": iters,
        "seed": seed,
        "learning_rate": learning_rate,
        "exaggeration": exaggeration,
        "exaggeration_iters": exaggeration_iters,
        "momentum": [0.5, 0.8],
        "momentum_switch": momentum_switch,
    }
    return Projection2D(Y, kl, history, params)


# ------------------------------------------------------------------ clustering


def cluster_alignment(emb, by: str = "s") -> float:
    """Mean Euclidean silhouette of the rows partitioned by ``y`` or ``s``."""
    if by not in ("y", "s", "g"):
        raise ContractError(f"partition must be 'y', 's' or 'g', got {by!r}")
    if isinstance(emb, Projection2D):
        raise ContractError("pass the embedding set; projections carry no labels")
    labels = np.asarray(getattr(emb, by))
    if len(np.unique(labels)) < 2:
        raise ContractError(f"partition by {by} has a single cluster")
    return float(silhouette_score(np.asarray(emb.matrix, np.float64), labels, metric="euclidean"))


def silhouette_labels(X: np.ndarray, labels) -> float:
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise ContractError("silhouette needs at least two clusters")
    return float(silhouette_score(np.asarray(X, np.float64), labels, metric="euclidean"))


# ------------------------------------------------------------------------- PGM


def to_bytes(values: np.ndarray) -> np.ndarray:
    v = np.clip(np.asarray(values, np.float64), 0.0, 1.0)
    return np.floor(255.0 * v + 0.5).astype(np.uint8)


def write_pgm(path, values: np.ndarray) -> None:
    pix = to_bytes(values)
    if pix.ndim != 2:
        raise ContractError("PGM payload must be 2-D")
    h, w = pix.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(pix.tobytes())


def read_pgm(path) -> np.ndarray:
    """Parse a binary PGM written by :func:`write_pgm`; returns values in [0, 1]."""
    with open(path, "rb") as f:
        raw = f.read()
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = (int(t) for t in parts[1].split())
    data = np.frombuffer(parts[3], np.uint8)
    if data.size != w * h:
        raise ValueError(f"{path}: payload has {data.size} bytes, expected {w * h}")
    return data.reshape(h, w).astype(np.float64) / 255.0


def _map_values(hm) -> np.ndarray:
    if isinstance(hm, (Heatmap, BinaryMap)):
        return np.asarray(hm.values, np.float64)
    if isinstance(hm, AttentionRowMap):
        g = hm.grid
        return g / g.max() if g.max() > 0 else g
    return np.asarray(hm, np.float64)


def render_heatmap(hm, path, overlay: np.ndarray | None = None, mask: np.ndarray | None = None) -> str:
    """Write a PGM. With ``overlay`` (C×H×W image) the output is the side-by-side
    strip [gray image | mask | heatmap]; attention grids are nearest-upsampled."""
    v = _map_values(hm)
    if overlay is not None:
        img = np.asarray(overlay, np.float64)
        gray = img.mean(axis=0) if img.ndim == 3 else img
        h, w = gray.shape
        if v.shape != (h, w):
            v = np.repeat(np.repeat(v, h // v.shape[0], axis=0), w // v.shape[1], axis=1)
        panels = [gray]
        if mask is not None:
            panels.append(np.asarray(mask, np.float64))
        panels.append(v)
        v = np.concatenate(panels, axis=1)
    path = os.fspath(path)
    write_pgm(path, v)
    return path
