"""Synthetic two-class image datasets with an injected spurious feature.

Class 0 draws a filled disk, class 1 a plus-shaped cross, both inside the
central 16×16 region. The spurious attribute ``s`` is either a solid 6×6 patch
in one of the corner regions (``style="patch"``) or a tinted background
(``style="background"``). Groups are ``g = 2*y + s``.
"""

from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .checkpoint import FormatError, canonical_json

SIZE = 32
CORE_LO, CORE_HI = 8, 24  # core bounding boxes live in [CORE_LO, CORE_HI)
CORNER = 8  # patches live in the four CORNER×CORNER corner squares

LAND = np.array([0.45, 0.40, 0.25], np.float32)
WATER = np.array([0.20, 0.35, 0.60], np.float32)
NEUTRAL = np.array([0.35, 0.35, 0.35], np.float32)
CORE_HUE = np.array([0.0, 1.0, 1.0], np.float32)  # shapes brighten green and blue only

STYLES = ("patch", "background")


class SpecError(ValueError):
    pass


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class SpuriousDatasetSpec:
    """Recipe for a dataset.

    ``rho`` is the fraction of each class whose spurious attribute agrees with
    the class (symmetric: s == y). With ``one_sided`` only class 0 ever gets a
    patch and ``rho`` is the patched fraction of class 0.
    """

    style: str = "patch"
    n_per_class: int = 100
    rho: float = 0.95
    one_sided: bool = False
    patch_size: int = 6
    patch_color: tuple[float, float, float] = (0.95, 0.10, 0.10)
    patch_jitter: int = 2
    radius_range: tuple[int, int] = (3, 6)
    core_contrast: float = 0.5
    noise: float = 0.1
    seed: int = 0
    test_balanced: bool = False

    def validate(self) -> None:
        if self.style not in STYLES:
            raise SpecError(f"style must be one of {STYLES}, got {self.style!r}")
        if not 0.0 <= self.rho <= 1.0:
            raise SpecError(f"rho must lie in [0, 1], got {self.rho}")
        if self.n_per_class < 1:
            raise SpecError("n_per_class must be >= 1")
        if self.rho not in (0.0, 1.0) and self.n_per_class < 4:
            raise SpecError(f"n_per_class={self.n_per_class} too small to realise rho={self.rho}")
        if self.one_sided and self.style != "patch":
            raise SpecError("one-sided injection is only defined for the patch style")
        if self.patch_size + self.patch_jitter > CORNER:
            raise SpecError("patch plus jitter must fit in the corner region")
        lo, hi = self.radius_range
        if not 1 <= lo <= hi or 2 * hi + 1 > CORE_HI - CORE_LO:
            raise SpecError(f"radius range {self.radius_range} does not fit the core region")
        majority = aligned_count(self.n_per_class, self.rho)
        if 0.0 < self.rho < 1.0 and majority in (0, self.n_per_class):
            raise SpecError(f"n_per_class={self.n_per_class} too small to realise rho={self.rho}")

    def census(self) -> tuple[int, int, int, int]:
        n = self.n_per_class
        a = aligned_count(n, self.rho)
        if self.one_sided:
            return (n - a, a, n, 0)
        return (a, n - a, n - a, a)

    def to_json(self) -> dict:
        d = asdict(self)
        d["patch_color"] = list(self.patch_color)
        d["radius_range"] = list(self.radius_range)
        return d

    @classmethod
    def from_json(cls, d: dict) -> SpuriousDatasetSpec:
        d = dict(d)
        d["patch_color"] = tuple(d["patch_color"])
        d["radius_range"] = tuple(d["radius_range"])
        return cls(**d)


def aligned_count(n: int, rho: float) -> int:
    # round half up; keeps the realised correlation within 1/(2n) of rho
    return int(np.floor(rho * n + 0.5 + 1e-9))


@dataclass
class LabeledSample:
    image: np.ndarray
    y: int
    s: int
    g: int
    mask: np.ndarray


@dataclass
class Dataset:
    images: np.ndarray  # N×3×32×32 float32 in [0, 1]
    y: np.ndarray
    s: np.ndarray
    masks: np.ndarray  # N×32×32 bool
    meta: dict

    @property
    def g(self) -> np.ndarray:
        return 2 * self.y + self.s

    def __len__(self) -> int:
        return len(self.y)

    def __getitem__(self, j: int) -> LabeledSample:
        return LabeledSample(self.images[j], int(self.y[j]), int(self.s[j]), int(self.g[j]), self.masks[j])

    def census(self) -> tuple[int, int, int, int]:
        return tuple(int(c) for c in np.bincount(self.g, minlength=4)[:4])

    def subset(self, idx) -> Dataset:
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.y[idx], self.s[idx], self.masks[idx], dict(self.meta))

    def without_group(self, g: int) -> Dataset:
        return self.subset(np.flatnonzero(self.g != g))

    def census_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["group", "count"])
        for gi, c in enumerate(self.census()):
            w.writerow([gi, c])
        return buf.getvalue()


# ------------------------------------------------------------------ rendering


def _sample_rng(seed: int, stream: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream, index]))


def shape_mask(y: int, cx: int, cy: int, r: int) -> np.ndarray:
    yy, xx = np.mgrid[0:SIZE, 0:SIZE]
    if y == 0:
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    t = max(1, r // 3)
    horiz = (np.abs(yy - cy) <= t) & (np.abs(xx - cx) <= r)
    vert = (np.abs(xx - cx) <= t) & (np.abs(yy - cy) <= r)
    return horiz | vert


def render(spec: SpuriousDatasetSpec, y: int, s: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, dict]:
    """One image, its spurious mask, and the core placement used."""
    lo, hi = spec.radius_range
    r = int(rng.integers(lo, hi + 1))
    cx = int(rng.integers(CORE_LO + r, CORE_HI - r))
    cy = int(rng.integers(CORE_LO + r, CORE_HI - r))
    contrast = spec.core_contrast * float(rng.uniform(0.8, 1.2))
    corner = int(rng.integers(4))
    jx, jy = (int(v) for v in rng.integers(0, spec.patch_jitter + 1, size=2))
    noise = rng.uniform(-spec.noise, spec.noise, size=(3, SIZE, SIZE)).astype(np.float32)

    if spec.style == "background":
        base = WATER if s else LAND
    else:
        base = NEUTRAL
    img = np.broadcast_to(base[:, None, None], (3, SIZE, SIZE)).copy()
    core = shape_mask(y, cx, cy, r)
    img[:, core] += (contrast * CORE_HUE)[:, None]
    img = np.clip(img + noise, 0.0, 1.0).astype(np.float32)

    mask = np.zeros((SIZE, SIZE), dtype=bool)
    if s:
        if spec.style == "patch":
            p = spec.patch_size
            x0 = jx if corner in (0, 2) else SIZE - p - jx
            y0 = jy if corner in (0, 1) else SIZE - p - jy
            mask[y0 : y0 + p, x0 : x0 + p] = True
            img[:, mask] = np.asarray(spec.patch_color, np.float32)[:, None]
        else:
            mask[:] = True
            mask[cy - r : cy + r + 1, cx - r : cx + r + 1] = False
    return img, mask, {"cx": cx, "cy": cy, "r": r}


def _build(spec: SpuriousDatasetSpec, labels: list[tuple[int, int]], stream: int, kind: str) -> Dataset:
    n = len(labels)
    order = np.random.default_rng(np.random.SeedSequence([spec.seed, stream, 2**31])).permutation(n)
    ys = np.array([labels[i][0] for i in order], dtype=np.int64)
    ss = np.array([labels[i][1] for i in order], dtype=np.int64)
    images = np.empty((n, 3, SIZE, SIZE), np.float32)
    masks = np.empty((n, SIZE, SIZE), bool)
    for j in range(n):
        images[j], masks[j], _ = render(spec, int(ys[j]), int(ss[j]), _sample_rng(spec.seed, stream, j))
    return Dataset(images, ys, ss, masks, {"spec": spec.to_json(), "kind": kind})


def _labels_from_census(census) -> list[tuple[int, int]]:
    out = []
    for gi, c in enumerate(census):
        out += [(gi // 2, gi % 2)] * int(c)
    return out


def generate_dataset(spec: SpuriousDatasetSpec) -> Dataset:
    """Training-style dataset whose group census follows ``spec.census()``.

    With ``spec.test_balanced`` the result is instead the balanced test set
    with ``n_per_class // 2`` samples per group.
    """
    spec.validate()
    if spec.test_balanced:
        return build_balanced_testset(replace(spec, test_balanced=False), max(1, spec.n_per_class // 2))
    return _build(spec, _labels_from_census(spec.census()), stream=0, kind="train")


def build_balanced_testset(spec: SpuriousDatasetSpec, n_per_group: int, stream: int = 1) -> Dataset:
    """Equal-sized groups; the spurious attribute is drawn independently of the class.

    ``stream`` selects an independent sample stream so several disjoint
    balanced sets can come from one spec (1 is the canonical test set).
    """
    if n_per_group < 1:
        raise SpecError("n_per_group must be >= 1")
    spec.validate()
    return _build(spec, _labels_from_census([n_per_group] * 4), stream=stream, kind="balanced")


def balanced_split(dataset: Dataset, per_group: int, seed: int, groups=None) -> tuple[Dataset, Dataset]:
    """Draw exactly ``per_group`` samples from every requested group.

    ``groups`` defaults to the nonempty groups. Returns (subset, remainder).
    """
    census = dataset.census()
    if groups is None:
        groups = [gi for gi, c in enumerate(census) if c > 0]
    short = [gi for gi in groups if census[gi] < per_group]
    if short:
        detail = ", ".join(f"group {gi} has {census[gi]}" for gi in short)
        raise SplitError(f"cannot draw {per_group} per group: {detail}")
    rng = np.random.default_rng(seed)
    g = dataset.g
    picked = []
    for gi in groups:
        idx = np.flatnonzero(g == gi)
        picked.append(np.sort(rng.choice(idx, size=per_group, replace=False)))
    chosen = np.sort(np.concatenate(picked)) if picked else np.zeros(0, np.int64)
    rest = np.setdiff1d(np.arange(len(dataset)), chosen)
    return dataset.subset(chosen), dataset.subset(rest)


# ------------------------------------------------------------------- file I/O

DS_MAGIC = b"SPDS"
DS_VERSION = 1


def rle_encode(mask: np.ndarray) -> list[int]:
    """Alternating run lengths over the flattened mask, starting with a zero-run."""
    flat = np.asarray(mask, dtype=bool).reshape(-1)
    runs = []
    cur, count = False, 0
    for v in flat:
        if v == cur:
            count += 1
        else:
            runs.append(count)
            cur, count = v, 1
    runs.append(count)
    return runs


def rle_decode(runs, shape) -> np.ndarray:
    flat = np.zeros(int(np.prod(shape)), dtype=bool)
    pos, val = 0, False
    for r in runs:
        flat[pos : pos + r] = val
        pos += r
        val = not val
    if pos != flat.size:
        raise FormatError(f"mask runs cover {pos} pixels, expected {flat.size}")
    return flat.reshape(shape)


def save_dataset(ds: Dataset, path) -> None:
    meta = canonical_json(ds.meta).encode("utf-8")
    n, c, h, w = ds.images.shape
    parts = [DS_MAGIC, struct.pack("<IIIIII", DS_VERSION, len(meta), n, c, h, w), meta]
    for j in range(n):
        parts.append(np.ascontiguousarray(ds.images[j], dtype="<f4").tobytes())
        parts.append(struct.pack("<BBB", int(ds.y[j]), int(ds.s[j]), int(ds.g[j])))
        runs = rle_encode(ds.masks[j])
        parts.append(struct.pack(f"<I{len(runs)}I", len(runs), *runs))
    Path(path).write_bytes(b"".join(parts))


def load_dataset(path) -> Dataset:
    buf = Path(path).read_bytes()
    pos = 0

    def take(k):
        nonlocal pos
        if pos + k > len(buf):
            raise FormatError("truncated dataset file")
        out = buf[pos : pos + k]
        pos += k
        return out

    if take(4) != DS_MAGIC:
        raise FormatError("bad magic: not a dataset file")
    version, mlen, n, c, h, w = struct.unpack("<IIIIII", take(24))
    if version != DS_VERSION:
        raise FormatError(f"incompatible dataset version {version} (this build reads {DS_VERSION})")
    try:
        meta = json.loads(take(mlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"corrupt dataset header: {e}") from None
    images = np.empty((n, c, h, w), np.float32)
    y = np.empty(n, np.int64)
    s = np.empty(n, np.int64)
    masks = np.empty((n, h, w), bool)
    for j in range(n):
        images[j] = np.frombuffer(take(4 * c * h * w), dtype="<f4").reshape(c, h, w)
        y[j], s[j], g = struct.unpack("<BBB", take(3))
        if g != 2 * y[j] + s[j]:
            raise FormatError(f"record {j}: group {g} inconsistent with (y={y[j]}, s={s[j]})")
        (nr,) = struct.unpack("<I", take(4))
        masks[j] = rle_decode(struct.unpack(f"<{nr}I", take(4 * nr)), (h, w))
    if pos != len(buf):
        raise FormatError("trailing bytes in dataset file")
    return Dataset(images, y, s, masks, meta)


def dataset_io(dataset: Dataset | None, path, mode: str) -> Dataset | None:
    if mode == "save":
        save_dataset(dataset, path)
        return None
    if mode == "load":
        return load_dataset(path)
    raise ValueError(f"mode must be 'save' or 'load', got {mode!r}")
