"""Biased dataset construction with a controllable spurious correlation.

Two sources are supported. The synthetic "color points" generator needs no
downloads: the target class is drawn on interleaved spiral arcs (hard,
nonlinear), while the bias class is a constant offset on a dedicated
coordinate (easy, linear). The color-MNIST builder tints raw IDX digit
images with a class-indexed palette. Both let the caller dial the fraction
of samples whose bias agrees with the spuriously associated class.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

# Tint palette for color-MNIST. Every color has a channel equal to 1 so the
# grayscale digit can be recovered exactly as the per-pixel channel maximum,
# which is what lets a test set be re-tinted with fresh random colors.
CMNIST_PALETTE = (
    (1.0, 0.0, 0.0),
    (0.0, 1.0, 0.0),
    (0.0, 0.0, 1.0),
    (1.0, 1.0, 0.0),
    (1.0, 0.0, 1.0),
    (0.0, 1.0, 1.0),
    (1.0, 0.5, 0.0),
    (0.5, 0.0, 1.0),
    (0.0, 1.0, 0.5),
    (1.0, 1.0, 1.0),
)


def spurious_map(y):
    """Bias value spuriously associated with each target class (identity)."""
    return np.asarray(y)


@dataclass
class BiasedDataset:
    """Inputs with target label y, bias label b, and per-sample alignment flag."""

    inputs: np.ndarray
    y: np.ndarray
    b: np.ndarray
    aligned: np.ndarray
    bias_ratio: float
    num_classes: int
    num_bias_classes: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64).ravel()
        self.b = np.asarray(self.b, dtype=np.int64).ravel()
        self.aligned = np.asarray(self.aligned, dtype=bool).ravel()
        n = self.inputs.shape[0]
        if not (self.y.shape[0] == self.b.shape[0] == self.aligned.shape[0] == n):
            raise ValueError("inputs, y, b and aligned must have the same length")
        if not np.array_equal(self.aligned, self.b == spurious_map(self.y)):
            raise ValueError("aligned flags inconsistent with (y, b) and the spurious map")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    def group_counts(self) -> np.ndarray:
        """(num_classes, num_bias_classes) table of sample counts per (y, b) group."""
        counts = np.zeros((self.num_classes, self.num_bias_classes), dtype=np.int64)
        np.add.at(counts, (self.y, self.b), 1)
        return counts

    def take(self, indices) -> "BiasedDataset":
        """Subset by index, recomputing the empirical aligned fraction."""
        idx = np.asarray(indices, dtype=np.int64)
        aligned = self.aligned[idx]
        ratio = float(aligned.mean()) if idx.size else 0.0
        return BiasedDataset(self.inputs[idx], self.y[idx], self.b[idx], aligned,
                             ratio, self.num_classes, self.num_bias_classes,
                             dict(self.meta))

    def save(self, directory) -> None:
        """Persist as inputs.csv, labels.csv (y, b, aligned), meta.json."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        np.savetxt(directory / "inputs.csv", self.inputs, delimiter=",", fmt="%.17e")
        labels = np.column_stack([self.y, self.b, self.aligned.astype(np.int64)])
        np.savetxt(directory / "labels.csv", labels, delimiter=",", fmt="%d",
                   header="y,b,aligned", comments="")
        meta = dict(self.meta)
        meta.update({
            "bias_ratio": self.bias_ratio,
            "num_classes": self.num_classes,
            "num_bias_classes": self.num_bias_classes,
            "n": len(self),
            "input_dim": self.input_dim,
        })
        with open(directory / "meta.json", "w") as f:
            json.dump(meta, f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, directory) -> "BiasedDataset":
        directory = Path(directory)
        inputs = np.loadtxt(directory / "inputs.csv", delimiter=",", ndmin=2)
        labels = np.loadtxt(directory / "labels.csv", delimiter=",", skiprows=1,
                            dtype=np.int64, ndmin=2)
        meta = json.loads((directory / "meta.json").read_text())
        return cls(inputs, labels[:, 0], labels[:, 1], labels[:, 2].astype(bool),
                   meta.pop("bias_ratio"), meta.pop("num_classes"),
                   meta.pop("num_bias_classes"), meta)


@dataclass
class GenConfig:
    """Knobs for the synthetic color-points generator."""

    n: int
    classes: int = 10
    bias_ratio: float = 0.99
    noise: float = 0.05
    input_dim: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.classes < 2:
            raise ValueError("need at least 2 classes")
        if not 0.0 < self.bias_ratio <= 1.0:
            raise ValueError(f"bias_ratio must be in (0, 1], got {self.bias_ratio}")
        if self.input_dim < 2 + self.classes:
            raise ValueError(
                f"input_dim must cover 2 arc coords + {self.classes} bias coords"
            )


# Geometry and scale constants for the color-points generator. The arc
# block interleaves one spiral arm per class; adjacent arms sit
# ARC_SPAN / (classes * ARC_TURNS) apart radially, so the default noise
# leaves the task learnable by an MLP but not linearly separable. The bias
# offset is made large so a linear probe (and an optimizer's early
# dynamics) find it first.
ARC_TURNS = 0.5
ARC_R0 = 0.8
ARC_SPAN = 2.0
BIAS_OFFSET = 2.0
BIAS_NOISE = 0.1
BIAS_SHARPNESS = 3.0
DISTRACTOR_SCALE = 0.5


def _balanced_labels(n: int, classes: int) -> np.ndarray:
    counts = np.full(classes, n // classes)
    counts[: n % classes] += 1
    return np.repeat(np.arange(classes), counts)


def _assign_bias(y: np.ndarray, bias_ratio: float, classes: int,
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Exactly round(r * n) aligned samples; conflicts get a uniformly
    random other class."""
    n = y.shape[0]
    k_aligned = int(round(bias_ratio * n))
    order = rng.permutation(n)
    aligned = np.zeros(n, dtype=bool)
    aligned[order[:k_aligned]] = True
    b = y.copy()
    conflict = ~aligned
    b[conflict] = (y[conflict] + rng.integers(1, classes, conflict.sum())) % classes
    return b, aligned


def _warn_empty_groups(ds: BiasedDataset) -> None:
    empty = int((ds.group_counts() == 0).sum())
    if empty:
        warnings.warn(
            f"{empty} of {ds.num_classes * ds.num_bias_classes} (y, b) groups are empty",
            stacklevel=3,
        )


def _bias_block(b: np.ndarray, classes: int) -> np.ndarray:
    """Noiseless bias pattern: a smooth circular bump peaking at coordinate b.

    The bump keeps the block trivially decodable (the peak value
    BIAS_OFFSET sits exactly at coordinate b) while concentrating the
    pattern family in a few directions instead of the full one-hot basis,
    so a model that encodes only the bias stays genuinely low-rank.
    """
    coords = np.arange(classes)
    phase = 2.0 * np.pi * (coords[None, :] - b[:, None]) / classes
    return BIAS_OFFSET * np.exp(BIAS_SHARPNESS * (np.cos(phase) - 1.0))


def gen_colorpoints(cfg: GenConfig) -> BiasedDataset:
    """Generate the synthetic biased dataset.

    Input layout: coords [0, 2) hold the arc point encoding y, coords
    [2, 2 + classes) hold the bias offset block encoding b, and any
    remaining coords are pure-noise distractors.
    """
    rng = np.random.default_rng(cfg.seed)
    n, C = cfg.n, cfg.classes
    y = _balanced_labels(n, C)
    rng.shuffle(y)
    b, aligned = _assign_bias(y, cfg.bias_ratio, C, rng)

    t = rng.uniform(0.0, 1.0, n)
    angle = 2.0 * np.pi * (ARC_TURNS * t + y / C)
    radius = ARC_R0 + ARC_SPAN * t
    arc = np.column_stack([radius * np.cos(angle), radius * np.sin(angle)])
    arc += cfg.noise * rng.standard_normal(arc.shape)

    simple = _bias_block(b, C) + BIAS_NOISE * rng.standard_normal((n, C))

    n_extra = cfg.input_dim - 2 - C
    distract = DISTRACTOR_SCALE * rng.standard_normal((n, n_extra))

    inputs = np.concatenate([arc, simple, distract], axis=1)
    meta = {
        "generator": "colorpoints",
        "seed": cfg.seed,
        "noise": cfg.noise,
        "arc_turns": ARC_TURNS,
        "arc_r0": ARC_R0,
        "arc_span": ARC_SPAN,
        "bias_offset": BIAS_OFFSET,
        "bias_noise": BIAS_NOISE,
        "bias_sharpness": BIAS_SHARPNESS,
        "distractor_scale": DISTRACTOR_SCALE,
        "complex_block": [0, 2],
        "simple_block": [2, 2 + C],
    }
    ds = BiasedDataset(inputs, y, b, aligned, cfg.bias_ratio, C, C, meta)
    _warn_empty_groups(ds)
    return ds


def read_idx_images(path) -> np.ndarray:
    """Read a big-endian IDX image file into a uint8 (n, rows, cols) array."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 16:
        raise ValueError(f"{path}: truncated IDX image header")
    magic, n, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise ValueError(f"{path}: bad magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
    expected = 16 + n * rows * cols
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for {n} images, got {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(n, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    """Read a big-endian IDX label file into a uint8 (n,) array."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 8:
        raise ValueError(f"{path}: truncated IDX label header")
    magic, n = struct.unpack(">II", raw[:8])
    if magic != IDX_LABELS_MAGIC:
        raise ValueError(f"{path}: bad magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
    if len(raw) != 8 + n:
        raise ValueError(f"{path}: expected {8 + n} bytes for {n} labels, got {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8, offset=8)


def write_idx_images(path, images: np.ndarray) -> None:
    """Inverse of read_idx_images, mainly for building test fixtures."""
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        f.write(labels.tobytes())


def _tint(gray: np.ndarray, color_idx: np.ndarray) -> np.ndarray:
    """Multiplicative colorization: scale foreground intensity by the palette
    RGB, flattened channel-major (R plane, G plane, B plane)."""
    palette = np.asarray(CMNIST_PALETTE)
    n = gray.shape[0]
    flat = gray.reshape(n, -1)
    rgb = palette[color_idx]  # (n, 3)
    return (rgb[:, :, None] * flat[:, None, :]).reshape(n, -1)


def cmnist_from_idx(images_path, labels_path, bias_ratio: float, seed: int = 0) -> BiasedDataset:
    """Build color-MNIST from raw IDX files.

    Aligned samples are tinted with their digit's palette color, the rest
    with a uniformly random other class color. Pixels are scaled to [0, 1]
    and each image is flattened to 3 * rows * cols values.
    """
    if not 0.0 < bias_ratio <= 1.0:
        raise ValueError(f"bias_ratio must be in (0, 1], got {bias_ratio}")
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise ValueError(
            f"{images.shape[0]} images but {labels.shape[0]} labels"
        )
    y = labels.astype(np.int64)
    rng = np.random.default_rng(seed)
    b, aligned = _assign_bias(y, bias_ratio, 10, rng)
    gray = images.astype(np.float64) / 255.0
    inputs = _tint(gray, b)
    meta = {
        "generator": "cmnist",
        "seed": seed,
        "palette": [list(c) for c in CMNIST_PALETTE],
        "image_shape": [3, int(images.shape[1]), int(images.shape[2])],
    }
    ds = BiasedDataset(inputs, y, b, aligned, bias_ratio, 10, 10, meta)
    _warn_empty_groups(ds)
    return ds


def make_unbiased_testset(source: BiasedDataset, seed: int = 0) -> BiasedDataset:
    """Reassign bias labels uniformly at random, independent of y, and
    re-render the bias features accordingly."""
    rng = np.random.default_rng(seed)
    n = len(source)
    new_b = rng.integers(0, source.num_bias_classes, n)
    inputs = source.inputs.copy()
    gen = source.meta.get("generator")
    if gen == "colorpoints":
        lo, hi = source.meta["simple_block"]
        noise = source.meta["bias_noise"] * rng.standard_normal((n, hi - lo))
        inputs[:, lo:hi] = _bias_block(new_b, hi - lo) + noise
    elif gen == "cmnist":
        c, h, w = source.meta["image_shape"]
        gray = inputs.reshape(n, c, h * w).max(axis=1)
        inputs = _tint(gray, new_b)
    else:
        raise ValueError(f"cannot re-render bias features for generator {gen!r}")
    aligned = new_b == spurious_map(source.y)
    return BiasedDataset(inputs, source.y.copy(), new_b, aligned,
                         float(aligned.mean()), source.num_classes,
                         source.num_bias_classes, dict(source.meta))


def subsample_aligned(ds: BiasedDataset, fraction: float, seed: int = 0) -> BiasedDataset:
    """Drop a uniformly random fraction of the bias-aligned samples.

    Conflicting samples are untouched, so the conflict-to-align ratio
    strictly increases for any fraction > 0.
    """
    if not 0.0 <= fraction < 1.0:
        raise ValueError(f"fraction must be in [0, 1), got {fraction}")
    rng = np.random.default_rng(seed)
    aligned_idx = np.flatnonzero(ds.aligned)
    k_drop = int(round(fraction * aligned_idx.size))
    dropped = rng.permutation(aligned_idx)[:k_drop]
    keep = np.setdiff1d(np.arange(len(ds)), dropped)
    return ds.take(keep)


def split(ds: BiasedDataset, fractions, seed: int = 0) -> tuple[BiasedDataset, ...]:
    """Disjoint splits stratified by (y, b) group.

    Within each group the per-part counts follow cumulative rounding, so
    fractions summing to 1 cover the group exactly. Groups too small to
    land in some part trigger a warning, not an error.
    """
    fractions = [float(f) for f in fractions]
    if any(f < 0 for f in fractions) or sum(fractions) > 1.0 + 1e-9:
        raise ValueError(f"fractions must be >= 0 and sum to <= 1, got {fractions}")
    rng = np.random.default_rng(seed)
    parts: list[list[np.ndarray]] = [[] for _ in fractions]
    for yv in range(ds.num_classes):
        for bv in range(ds.num_bias_classes):
            idx = np.flatnonzero((ds.y == yv) & (ds.b == bv))
            if idx.size == 0:
                continue
            idx = rng.permutation(idx)
            cum = np.cumsum(fractions)
            edges = np.rint(cum * idx.size).astype(int)
            start = 0
            for part, edge in zip(parts, edges):
                part.append(idx[start:edge])
                start = edge
    out = []
    for i, chunks in enumerate(parts):
        sel = np.sort(np.concatenate(chunks)) if chunks else np.empty(0, dtype=np.int64)
        if sel.size == 0:
            warnings.warn(f"split part {i} is empty", stacklevel=2)
        out.append(ds.take(sel))
    return tuple(out)


def label_fraction_split(ds: BiasedDataset, fraction: float, seed: int = 0
                         ) -> tuple[BiasedDataset, BiasedDataset]:
    """Stratified (labeled, unlabeled) split for semi-supervised runs."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    if fraction == 1.0:
        return ds.take(np.arange(len(ds))), ds.take(np.empty(0, dtype=np.int64))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        labeled, unlabeled = split(ds, (fraction, 1.0 - fraction), seed)
    empty_after = int(((labeled.group_counts() == 0) & (ds.group_counts() > 0)).sum())
    if empty_after:
        warnings.warn(
            f"{empty_after} nonempty (y, b) groups lost all samples in the labeled split",
            stacklevel=2,
        )
    return labeled, unlabeled


@dataclass
class VectorAugmentConfig:
    """Stochastic view parameters for vector inputs. noise_scale multiplies
    the per-feature standard deviation."""

    noise_scale: float = 0.1
    dropout_p: float = 0.1
    scale_low: float = 0.8
    scale_high: float = 1.25


@dataclass
class ImageAugmentConfig:
    """Stochastic view parameters for color-MNIST images."""

    crop_scale_min: float = 0.2
    flip_p: float = 0.5
    jitter_p: float = 0.8
    jitter_strength: float = 0.4
    grayscale_p: float = 0.2


def augment_vector_batch(X, rng: np.random.Generator, feature_std,
                         config: VectorAugmentConfig | None = None) -> np.ndarray:
    """One stochastic view of each row: additive Gaussian noise scaled by the
    per-feature std, random coordinate dropout, then a random global scaling.

    Always draws the same number of random values, so configs that disable a
    transform keep every other draw (and the degenerate config returns the
    input unchanged).
    """
    cfg = config or VectorAugmentConfig()
    X = np.asarray(X, dtype=np.float64)
    std = np.broadcast_to(np.asarray(feature_std, dtype=np.float64), X.shape[1:])
    noise = rng.standard_normal(X.shape) * (cfg.noise_scale * std)
    keep = rng.random(X.shape) >= cfg.dropout_p
    scale = rng.uniform(cfg.scale_low, cfg.scale_high, (X.shape[0], 1))
    return (X + noise) * keep * scale


def _bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize a (c, h, w) image with separable bilinear interpolation."""
    c, h, w = img.shape

    def _axis_coords(size, out_size):
        src = (np.arange(out_size) + 0.5) * (size / out_size) - 0.5
        src = np.clip(src, 0.0, size - 1.0)
        i0 = np.floor(src).astype(int)
        i1 = np.minimum(i0 + 1, size - 1)
        frac = src - i0
        return i0, i1, frac

    r0, r1, rf = _axis_coords(h, out_h)
    c0, c1, cf = _axis_coords(w, out_w)
    rows = img[:, r0, :] * (1.0 - rf)[None, :, None] + img[:, r1, :] * rf[None, :, None]
    return rows[:, :, c0] * (1.0 - cf) + rows[:, :, c1] * cf


def _augment_image(img: np.ndarray, rng: np.random.Generator,
                   cfg: ImageAugmentConfig) -> np.ndarray:
    """One stochastic view of a (c, h, w) image in [0, 1]. All random values
    are drawn regardless of which branches fire."""
    c, h, w = img.shape
    area = rng.uniform(cfg.crop_scale_min, 1.0)
    side_h = max(1, int(round(h * np.sqrt(area))))
    side_w = max(1, int(round(w * np.sqrt(area))))
    top = int(rng.integers(0, h - side_h + 1))
    left = int(rng.integers(0, w - side_w + 1))
    out = _bilinear_resize(img[:, top:top + side_h, left:left + side_w], h, w)

    do_flip = rng.random() < cfg.flip_p
    do_jitter = rng.random() < cfg.jitter_p
    s = cfg.jitter_strength
    brightness = rng.uniform(1.0 - s, 1.0 + s, c)
    contrast = rng.uniform(1.0 - s, 1.0 + s, c)
    do_gray = rng.random() < cfg.grayscale_p

    if do_flip:
        out = out[:, :, ::-1]
    if do_jitter:
        out = out * brightness[:, None, None]
        mean = out.mean(axis=(1, 2), keepdims=True)
        out = mean + contrast[:, None, None] * (out - mean)
    if do_gray:
        out = np.broadcast_to(out.mean(axis=0, keepdims=True), out.shape)
    return np.clip(out, 0.0, 1.0)


def augment_image_batch(X, rng: np.random.Generator, image_shape,
                        config: ImageAugmentConfig | None = None) -> np.ndarray:
    cfg = config or ImageAugmentConfig()
    X = np.asarray(X, dtype=np.float64)
    c, h, w = image_shape
    out = np.empty_like(X)
    for i in range(X.shape[0]):
        out[i] = _augment_image(X[i].reshape(c, h, w), rng, cfg).reshape(-1)
    return out


def augment_views(x, modality: str, seed: int, *, feature_std=None,
                  image_shape=(3, 28, 28), config=None) -> tuple[np.ndarray, np.ndarray]:
    """Two independent stochastic views of one input, deterministic per seed.

    modality is "vector" (feature_std defaults to all ones) or
    "cmnist-image" (x is a flattened channel-major image).
    """
    rng = np.random.default_rng(seed)
    x = np.asarray(x, dtype=np.float64)
    if modality == "vector":
        std = np.ones(x.shape[0]) if feature_std is None else feature_std
        v1 = augment_vector_batch(x[None, :], rng, std, config)[0]
        v2 = augment_vector_batch(x[None, :], rng, std, config)[0]
    elif modality == "cmnist-image":
        v1 = augment_image_batch(x[None, :], rng, image_shape, config)[0]
        v2 = augment_image_batch(x[None, :], rng, image_shape, config)[0]
    else:
        raise ValueError(f"unknown modality {modality!r}")
    return v1, v2
