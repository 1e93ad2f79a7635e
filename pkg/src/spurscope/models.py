"""Small CNN and ViT classifiers split into a feature extractor and a linear head."""

from __future__ import annotations

import copy
import hashlib
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from . import tensor as T
from .checkpoint import ArchitectureError, read_checkpoint, write_checkpoint
from .tensor import DimensionError, Tensor


class ConfigError(ValueError):
    pass


class FamilyError(TypeError):
    """Operation requested on the wrong model family."""


@dataclass(frozen=True)
class SmallCnnConfig:
    image_size: int = 32
    in_channels: int = 3
    # (out_channels, kernel, stride) per conv block
    blocks: tuple[tuple[int, int, int], ...] = ((16, 3, 1), (32, 3, 2), (64, 3, 2))
    num_classes: int = 2
    # fixed input standardisation (x - mean) / std, not trained
    input_mean: float = 0.4
    input_std: float = 0.25

    family = "cnn"

    @property
    def dim(self) -> int:
        return self.blocks[-1][0]

    def validate(self) -> None:
        if not self.blocks or self.dim <= 0:
            raise ConfigError("CNN needs at least one block with positive channels")
        size = self.image_size
        for ch, k, s in self.blocks:
            if ch <= 0 or k <= 0 or s <= 0:
                raise ConfigError(f"invalid conv block {(ch, k, s)}")
            size = (size + 2 * (k // 2) - k) // s + 1
            if size < 1:
                raise ConfigError("conv stack shrinks the image below one pixel")
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")

    def descriptor(self) -> dict:
        d = asdict(self)
        d["blocks"] = [list(b) for b in self.blocks]
        d["family"] = self.family
        return d


@dataclass(frozen=True)
class SmallVitConfig:
    image_size: int = 32
    in_channels: int = 3
    patch_size: int = 4
    dim: int = 64
    heads: int = 4
    layers: int = 4
    mlp_dim: int = 128
    num_classes: int = 2
    input_mean: float = 0.4
    input_std: float = 0.25

    family = "vit"

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid**2

    def validate(self) -> None:
        if self.image_size % self.patch_size:
            raise ConfigError(f"image size {self.image_size} not divisible by patch size {self.patch_size}")
        if self.heads <= 0 or self.dim % self.heads:
            raise ConfigError(f"embed dim {self.dim} not divisible by {self.heads} heads")
        if self.layers < 1 or self.mlp_dim < 1:
            raise ConfigError("need at least one layer and a positive MLP width")
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")

    def descriptor(self) -> dict:
        d = asdict(self)
        d["family"] = self.family
        return d


def config_from_descriptor(desc: Mapping):
    desc = dict(desc)
    family = desc.pop("family", None)
    if family == "cnn":
        desc["blocks"] = tuple(tuple(b) for b in desc["blocks"])
        return SmallCnnConfig(**desc)
    if family == "vit":
        return SmallVitConfig(**desc)
    raise ArchitectureError(f"unknown model family {family!r}")


@dataclass
class ActivationTrace:
    """Intermediate tensors of one (batched) forward pass.

    ``tokens[l]`` is the token matrix entering transformer layer ``l``;
    ``attention[l]`` holds the post-softmax weights, shape N×heads×T×T.
    """

    z: Tensor
    feature_maps: Tensor | None = None
    tokens: list[Tensor] = field(default_factory=list)
    attention: list[Tensor] = field(default_factory=list)


class Model:
    """Parameters plus the forward pass for one configuration.

    ``masks`` (name -> 0/1 array) are multiplied into the matching weights on
    every forward pass; they come from subnetwork extraction.
    """

    def __init__(self, config, params: dict[str, Tensor], masks: dict[str, np.ndarray] | None = None):
        self.config = config
        self.params = params
        self.masks = masks or {}
        self.provenance: list[dict] = []

    @property
    def family(self) -> str:
        return self.config.family

    @property
    def dim(self) -> int:
        return self.config.dim

    def copy(self) -> Model:
        m = Model(self.config, {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k) for k, v in self.params.items()})
        m.masks = {k: v.copy() for k, v in self.masks.items()}
        m.provenance = copy.deepcopy(self.provenance)
        return m

    def head_names(self) -> tuple[str, str]:
        return "head.weight", "head.bias"

    def encoder_names(self) -> list[str]:
        return [k for k in self.params if not k.startswith("head.")]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def encoder_checksum(self) -> str:
        h = hashlib.sha256()
        for k in self.encoder_names():
            h.update(k.encode())
            h.update(self.params[k].data.tobytes())
        return h.hexdigest()

    def _weights(self, overrides: Mapping[str, Tensor] | None) -> dict[str, Tensor]:
        w = dict(self.params)
        for name, mask in self.masks.items():
            w[name] = Tensor(self.params[name].data * mask, requires_grad=False, name=name)
        if overrides:
            w.update(overrides)
        return w

    # ---------------------------------------------------------------- forward

    def forward_with_trace(self, x, overrides: Mapping[str, Tensor] | None = None) -> tuple[Tensor, ActivationTrace]:
        """Logits and trace. ``x`` is C×H×W or N×C×H×W (array or Tensor).

        For a single image the logits and ``trace.z`` are unbatched; everything
        else in the trace keeps a leading batch axis of one.
        """
        xt = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
        single = xt.ndim == 3
        if single:
            xt = T.reshape(xt, (1,) + xt.shape)
        c = self.config
        expect = (c.in_channels, c.image_size, c.image_size)
        if xt.ndim != 4 or xt.shape[1:] != expect:
            raise DimensionError(f"input shape {x.shape} does not match configured {expect}")
        w = self._weights(overrides)
        shift = Tensor(np.full(xt.shape, -c.input_mean, dtype=xt.data.dtype))
        xt = T.scale(T.add(xt, shift), 1.0 / c.input_std)
        if self.family == "cnn":
            z, trace = self._cnn_encode(xt, w)
        else:
            z, trace = self._vit_encode(xt, w)
        logits = T.add_bias(T.matmul(z, w["head.weight"]), w["head.bias"])
        if single:
            logits = T.reshape(logits, (logits.shape[1],))
            trace.z = T.reshape(z, (z.shape[1],))
        return logits, trace

    def _cnn_encode(self, x: Tensor, w) -> tuple[Tensor, ActivationTrace]:
        h = x
        for i, (_, k, s) in enumerate(self.config.blocks):
            h = T.conv2d(h, w[f"conv{i}.weight"], stride=s, padding=k // 2)
            h = T.relu(T.add_bias(h, w[f"conv{i}.bias"], axis=1))
        z = T.mean(h, axis=(2, 3))
        return z, ActivationTrace(z=z, feature_maps=h)

    def _vit_encode(self, x: Tensor, w) -> tuple[Tensor, ActivationTrace]:
        c = self.config
        N = x.shape[0]
        g, p, d, H = c.grid, c.patch_size, c.dim, c.heads
        dh = d // H
        P = c.num_patches
        patches = T.reshape(x, (N, c.in_channels, g, p, g, p))
        patches = T.transpose(patches, (0, 2, 4, 1, 3, 5))
        patches = T.reshape(patches, (N, P, c.in_channels * p * p))
        tok = T.add_bias(T.matmul(patches, w["patch.weight"]), w["patch.bias"])
        cls = T.embedding(w["cls_token"], np.zeros((N, 1), dtype=np.int64))
        tok = T.concat([cls, tok], axis=1)
        tok = T.add(tok, T.embedding(w["pos_embed"], np.tile(np.arange(P + 1), (N, 1))))
        trace = ActivationTrace(z=tok)
        Tn = P + 1
        for layer in range(c.layers):
            pre = f"block{layer}."
            trace.tokens.append(tok)
            h = T.layer_norm(tok, w[pre + "ln1.weight"], w[pre + "ln1.bias"])

            def heads(name):
                t = T.add_bias(T.matmul(h, w[pre + name + ".weight"]), w[pre + name + ".bias"])
                return T.transpose(T.reshape(t, (N, Tn, H, dh)), (0, 2, 1, 3))

            q, k, v = heads("q"), heads("k"), heads("v")
            scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
            attn = T.softmax(scores)
            trace.attention.append(attn)
            o = T.reshape(T.transpose(T.matmul(attn, v), (0, 2, 1, 3)), (N, Tn, d))
            o = T.add_bias(T.matmul(o, w[pre + "proj.weight"]), w[pre + "proj.bias"])
            tok = T.add(tok, o)
            h = T.layer_norm(tok, w[pre + "ln2.weight"], w[pre + "ln2.bias"])
            h = T.gelu(T.add_bias(T.matmul(h, w[pre + "fc1.weight"]), w[pre + "fc1.bias"]))
            h = T.add_bias(T.matmul(h, w[pre + "fc2.weight"]), w[pre + "fc2.bias"])
            tok = T.add(tok, h)
        tok = T.layer_norm(tok, w["norm.weight"], w["norm.bias"])
        z = T.take(tok, 0, axis=1)
        trace.z = z
        return z, trace

    # ------------------------------------------------------------ inference

    def predict_logits(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        out = [self.forward_with_trace(images[i : i + batch_size])[0].data for i in range(0, len(images), batch_size)]
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.config.num_classes), np.float32)

    def predict(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        return self.predict_logits(images, batch_size).argmax(axis=1)


def _he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def build_model(config, seed: int = 0) -> Model:
    """Deterministically initialised model: He-uniform weights, zero biases,
    N(0, 0.02²) ViT embeddings."""
    config.validate()
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    zeros = lambda n: np.zeros(n, np.float32)  # noqa: E731
    ones = lambda n: np.ones(n, np.float32)  # noqa: E731
    if config.family == "cnn":
        cin = config.in_channels
        for i, (ch, k, _) in enumerate(config.blocks):
            params[f"conv{i}.weight"] = _he_uniform(rng, (ch, cin, k, k), cin * k * k)
            params[f"conv{i}.bias"] = zeros(ch)
            cin = ch
    else:
        c = config
        d = c.dim
        pd = c.in_channels * c.patch_size**2
        params["patch.weight"] = _he_uniform(rng, (pd, d), pd)
        params["patch.bias"] = zeros(d)
        params["cls_token"] = (0.02 * rng.standard_normal((1, d))).astype(np.float32)
        params["pos_embed"] = (0.02 * rng.standard_normal((c.num_patches + 1, d))).astype(np.float32)
        for layer in range(c.layers):
            pre = f"block{layer}."
            params[pre + "ln1.weight"], params[pre + "ln1.bias"] = ones(d), zeros(d)
            for name in ("q", "k", "v", "proj"):
                params[pre + name + ".weight"] = _he_uniform(rng, (d, d), d)
                params[pre + name + ".bias"] = zeros(d)
            params[pre + "ln2.weight"], params[pre + "ln2.bias"] = ones(d), zeros(d)
            params[pre + "fc1.weight"] = _he_uniform(rng, (d, c.mlp_dim), d)
            params[pre + "fc1.bias"] = zeros(c.mlp_dim)
            params[pre + "fc2.weight"] = _he_uniform(rng, (c.mlp_dim, d), c.mlp_dim)
            params[pre + "fc2.bias"] = zeros(d)
        params["norm.weight"], params["norm.bias"] = ones(d), zeros(d)
    params["head.weight"] = _he_uniform(rng, (config.dim, config.num_classes), config.dim)
    params["head.bias"] = zeros(config.num_classes)
    return Model(config, {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()})


def forward_with_trace(model: Model, x) -> tuple[Tensor, ActivationTrace]:
    return model.forward_with_trace(x)


def encode(model: Model, x) -> np.ndarray:
    """Penultimate representation z (d, or N×d for a batch)."""
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 3:
        return model.forward_with_trace(x)[1].z.data
    parts = [model.forward_with_trace(x[i : i + 256])[1].z.data for i in range(0, len(x), 256)]
    return np.concatenate(parts, axis=0)


def save_model(model: Model, path) -> None:
    arrays = {k: v.data for k, v in model.params.items()}
    arrays.update({f"mask/{k}": m.astype(np.float32) for k, m in model.masks.items()})
    header = {"arch": model.config.descriptor(), "provenance": model.provenance}
    write_checkpoint(path, header, arrays)


def load_model(path, expect=None) -> Model:
    """Load a checkpoint; ``expect`` (a config) enforces the architecture."""
    header, arrays = read_checkpoint(path)
    if "arch" not in header:
        raise ArchitectureError("checkpoint header lacks an architecture descriptor")
    config = config_from_descriptor(header["arch"])
    if expect is not None and expect.descriptor() != config.descriptor():
        raise ArchitectureError(f"checkpoint holds a {config.family} model {config.descriptor()}, expected {expect.descriptor()}")
    ref = build_model(config, seed=0)
    params, masks = {}, {}
    for name, arr in arrays.items():
        if name.startswith("mask/"):
            masks[name[5:]] = arr
        else:
            params[name] = arr
    if set(params) != set(ref.params):
        raise ArchitectureError("checkpoint parameter names do not match the architecture")
    for k, v in params.items():
        if v.shape != ref.params[k].shape:
            raise ArchitectureError(f"parameter {k}: shape {v.shape} != {ref.params[k].shape}")
    model = Model(config, {k: Tensor(params[k], requires_grad=True, name=k) for k in ref.params}, masks)
    model.provenance = list(header.get("provenance", []))
    return model


def checkpoint_io(model: Model | None, path, mode: str, expect=None) -> Model | None:
    if mode == "save":
        save_model(model, path)
        return None
    if mode == "load":
        return load_model(path, expect=expect if expect is not None else (model.config if model else None))
    raise ValueError(f"mode must be 'save' or 'load', got {mode!r}")
