"""Procedural shape-classification data, domain shifts and the mCE metric.

Every sample is rendered from its own generator seeded with
``(dataset seed, split, index)``. The class is the shape's geometry; colour
palette, background texture, illumination gradient, position and size are
nuisance parameters drawn per sample.

Shift families and their severity schedules (severity 1..5):

==============  ==========================================================
noise           additive Gaussian, sigma 0.02 0.05 0.08 0.12 0.18
blur            Gaussian blur, sigma (px) 0.5 0.75 1.0 1.35 1.8
contrast        pull towards the image mean, factor 0.75 0.6 0.45 0.32 0.2
brightness      add 0.08 0.16 0.24 0.32 0.42
saturate        blend towards grey, keep 0.65 0.45 0.25 0.1 0.0
hue_rotate      rotate about the grey axis by (0.12 .. 0.85) pi
pixelate        block average, block 2 3 4 5 6 px
style_affine    per-channel slope/intercept, spread 0.15 .. 0.8
texture         band-limited additive pattern, amplitude 0.04 .. 0.24
==============  ==========================================================

``style_affine`` and ``texture`` stand in for stylization; the others are
the corruption suite.
"""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

GENERATOR_VERSION = 1
MAX_CLASSES = 10

SHAPES = (
    "disk",
    "square",
    "triangle",
    "plus",
    "ring",
    "hbar",
    "vbar",
    "diamond",
    "cross",
    "tee",
)


class Family(str, enum.Enum):
    NOISE = "noise"
    BLUR = "blur"
    CONTRAST = "contrast"
    BRIGHTNESS = "brightness"
    SATURATE = "saturate"
    HUE_ROTATE = "hue_rotate"
    PIXELATE = "pixelate"
    STYLE_AFFINE = "style_affine"
    TEXTURE = "texture"


CORRUPTIONS = (
    Family.NOISE,
    Family.BLUR,
    Family.CONTRAST,
    Family.BRIGHTNESS,
    Family.SATURATE,
    Family.HUE_ROTATE,
    Family.PIXELATE,
)
STYLE_FAMILIES = (Family.STYLE_AFFINE, Family.TEXTURE)
ALL_FAMILIES = CORRUPTIONS + STYLE_FAMILIES

SCHEDULES: dict[Family, tuple[float, ...]] = {
    Family.NOISE: (0.02, 0.05, 0.08, 0.12, 0.18),
    Family.BLUR: (0.5, 0.75, 1.0, 1.35, 1.8),
    Family.CONTRAST: (0.75, 0.6, 0.45, 0.32, 0.2),
    Family.BRIGHTNESS: (0.08, 0.16, 0.24, 0.32, 0.42),
    Family.SATURATE: (0.65, 0.45, 0.25, 0.1, 0.0),
    Family.HUE_ROTATE: tuple(a * np.pi for a in (0.12, 0.25, 0.4, 0.6, 0.85)),
    Family.PIXELATE: (2, 3, 4, 5, 6),
    Family.STYLE_AFFINE: (0.15, 0.3, 0.45, 0.6, 0.8),
    Family.TEXTURE: (0.04, 0.08, 0.12, 0.17, 0.24),
}

_SPLIT_CODE = {"train": 0, "test": 1}

@dataclass(frozen=True)
class ShiftSpec:
    family: str
    severity: int
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family).value)
        if not 1 <= int(self.severity) <= 5:
            raise ValueError(f"severity must be in 1..5, got {self.severity}")


@dataclass
class Dataset:
    images: np.ndarray  # (N, 3, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    name: str = "clean"

    def __len__(self) -> int:
        return len(self.labels)

    def batches(self, batch_size: int, order: np.ndarray | None = None):
        idx = np.arange(len(self)) if order is None else order
        for start in range(0, len(idx), batch_size):
            sel = idx[start : start + batch_size]
            yield self.images[sel], self.labels[sel]


@dataclass(frozen=True)
class DatasetManifest:
    seed: int
    n_classes: int
    n_train: int
    n_test: int
    size: int = 32
    generator_version: int = GENERATOR_VERSION

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        d = json.loads(text)
        if d.get("generator_version") != GENERATOR_VERSION:
            raise ValueError(
                f"dataset generator version {d.get('generator_version')} != {GENERATOR_VERSION}"
            )
        return cls(**d)


# ---------------------------------------------------------------- rendering


def _shape_mask(kind: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    au, av = np.abs(u), np.abs(v)
    r = np.sqrt(u * u + v * v)
    if kind == 0:
        return r <= 1.0
    if kind == 1:
        return np.maximum(au, av) <= 0.8
    if kind == 2:
        return (v <= 0.7) & (au <= 0.9 * (v + 0.9) / 1.6)
    if kind == 3:
        return ((au <= 0.3) & (av <= 0.95)) | ((av <= 0.3) & (au <= 0.95))
    if kind == 4:
        return (r >= 0.55) & (r <= 1.0)
    if kind == 5:
        return (au <= 1.0) & (av <= 0.32)
    if kind == 6:
        return (au <= 0.32) & (av <= 1.0)
    if kind == 7:
        return au + av <= 1.05
    if kind == 8:
        return ((np.abs(u - v) <= 0.45) | (np.abs(u + v) <= 0.45)) & (np.maximum(au, av) <= 0.85)
    if kind == 9:
        return ((np.abs(v + 0.65) <= 0.3) & (au <= 0.95)) | ((au <= 0.3) & (v >= -0.65) & (v <= 0.95))
    raise ValueError(f"unknown shape {kind}")


def _smooth_field(rng: np.random.Generator, size: int, coarse: int) -> np.ndarray:
    """Unit-std low-frequency pattern of shape (size, size)."""
    g = rng.standard_normal((coarse, coarse))
    f = ndimage.zoom(g, size / coarse, order=1, mode="nearest")[:size, :size]
    f = ndimage.gaussian_filter(f, sigma=size / (2 * coarse), mode="reflect")
    f = f - f.mean()
    return f / (f.std() + 1e-12)


def render_sample(label: int, rng: np.random.Generator, size: int) -> np.ndarray:
    """One (3, size, size) image of shape ``label`` with random nuisances."""
    ss = 2  # supersampling for anti-aliased edges
    n = size * ss
    coords = (np.arange(n) + 0.5) / ss
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    radius = size * rng.uniform(0.28, 0.38)
    cx = size / 2 + size * rng.uniform(-0.1, 0.1)
    cy = size / 2 + size * rng.uniform(-0.1, 0.1)
    theta = rng.uniform(-0.17, 0.17)
    dx, dy = (xx - cx) / radius, (yy - cy) / radius
    u = np.cos(theta) * dx + np.sin(theta) * dy
    v = -np.sin(theta) * dx + np.cos(theta) * dy
    mask = _shape_mask(label, u, v).astype(np.float64)
    mask = mask.reshape(size, ss, size, ss).mean(axis=(1, 3))

    bg = rng.uniform(0.1, 0.4, 3)
    fg = rng.uniform(0.55, 0.95, 3)
    tex = 0.05 * _smooth_field(rng, size, 4)
    ang = rng.uniform(0, 2 * np.pi)
    lin = (np.arange(size) - (size - 1) / 2) / size
    illum = 0.1 * rng.uniform(-1, 1) * (np.cos(ang) * lin[None, :] + np.sin(ang) * lin[:, None])

    img = mask[None] * fg[:, None, None] + (1 - mask[None]) * (bg[:, None, None] + tex[None])
    img = img + illum[None] + 0.01 * rng.standard_normal((3, size, size))
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def sample(seed: int, split: str, index: int, n_classes: int, size: int = 32) -> tuple[np.ndarray, int]:
    label = index % n_classes
    rng = np.random.default_rng([seed, _SPLIT_CODE[split], index])
    return render_sample(label, rng, size), label


def _render_split(seed, split, n, n_classes, size) -> Dataset:
    images = np.empty((n, 3, size, size), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        images[i], labels[i] = sample(seed, split, i, n_classes, size)
    return Dataset(images, labels, name=split)


def generate_dataset(seed: int, n_classes: int, n_train: int, n_test: int, size: int = 32) -> tuple[Dataset, Dataset]:
    """Train and test splits, a pure function of the arguments."""
    if not 2 <= n_classes <= MAX_CLASSES:
        raise ValueError(f"n_classes must be in 2..{MAX_CLASSES}, got {n_classes}")
    if n_train < 1 or n_test < 1 or size < 8:
        raise ValueError(f"invalid sizes n_train={n_train} n_test={n_test} size={size}")
    return (
        _render_split(seed, "train", n_train, n_classes, size),
        _render_split(seed, "test", n_test, n_classes, size),
    )


def from_manifest(m: DatasetManifest) -> tuple[Dataset, Dataset]:
    return generate_dataset(m.seed, m.n_classes, m.n_train, m.n_test, m.size)


# ---------------------------------------------------------------- shifts


def _grey(img: np.ndarray) -> np.ndarray:
    return (0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2])[None]


def _hue_matrix(angle: float) -> np.ndarray:
    k = np.ones(3) / np.sqrt(3.0)
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * kx + (1 - np.cos(angle)) * (kx @ kx)


def hue_rotate(img: np.ndarray, angle: float) -> np.ndarray:
    """Rotate colours about the grey axis (no clipping)."""
    m = _hue_matrix(angle)
    return np.einsum("ij,jhw->ihw", m, img.astype(np.float64))


def _pixelate(img: np.ndarray, b: int) -> np.ndarray:
    c, h, w = img.shape
    hb, wb = -(-h // b), -(-w // b)
    padded = np.pad(img, ((0, 0), (0, hb * b - h), (0, wb * b - w)), mode="edge")
    blocks = padded.reshape(c, hb, b, wb, b).mean(axis=(2, 4))
    return np.repeat(np.repeat(blocks, b, axis=1), b, axis=2)[:, :h, :w]


def apply_shift(image: np.ndarray, spec: ShiftSpec) -> np.ndarray:
    """Shifted copy of a (3, H, W) image in [0, 1]; deterministic in ``spec``."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got {img.shape}")
    if img.min() < 0 or img.max() > 1:
        raise ValueError("image values must lie in [0, 1]")
    fam = Family(spec.family)
    level = SCHEDULES[fam][spec.severity - 1]
    rng = np.random.default_rng([spec.seed, list(Family).index(fam), spec.severity])

    if fam is Family.NOISE:
        out = img + level * rng.standard_normal(img.shape)
    elif fam is Family.BLUR:
        out = ndimage.gaussian_filter(img, sigma=(0, level, level), mode="reflect")
    elif fam is Family.CONTRAST:
        m = img.mean()
        out = m + level * (img - m)
    elif fam is Family.BRIGHTNESS:
        out = img + level
    elif fam is Family.SATURATE:
        g = _grey(img)
        out = g + level * (img - g)
    elif fam is Family.HUE_ROTATE:
        out = hue_rotate(img, level)
    elif fam is Family.PIXELATE:
        out = _pixelate(img, int(level))
    elif fam is Family.STYLE_AFFINE:
        # draws do not depend on severity, only their spread does
        draw = np.random.default_rng([spec.seed, list(Family).index(fam)])
        slope = 1 + level * draw.uniform(-1, 1, 3)
        shift = 0.5 * level * draw.uniform(-1, 1, 3)
        m = img.mean(axis=(1, 2), keepdims=True)
        out = slope[:, None, None] * (img - m) + m + shift[:, None, None]
    elif fam is Family.TEXTURE:
        draw = np.random.default_rng([spec.seed, list(Family).index(fam)])
        size = img.shape[1]
        pattern = np.stack([_smooth_field(draw, size, max(2, size // 4)) for _ in range(3)])
        out = img + level * pattern
    else:  # pragma: no cover - Family() already rejected it
        raise ValueError(f"unknown family {spec.family}")
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def shift_seed(seed: int, index: int) -> int:
    return int(np.random.default_rng([seed, index]).integers(2**31))


def shift_dataset(ds: Dataset, family, severity: int, seed: int = 0) -> Dataset:
    """Apply one family/severity to every image with per-image seeds; labels kept."""
    images = np.stack(
        [apply_shift(img, ShiftSpec(family, severity, shift_seed(seed, i))) for i, img in enumerate(ds.images)]
    )
    return Dataset(images, ds.labels.copy(), name=f"{Family(family).value}-{severity}")


# ---------------------------------------------------------------- augmentation


def augment_batch(images: np.ndarray, rng: np.random.Generator, pad: int = 2) -> np.ndarray:
    """Fixed augmentation: random crop after zero padding, horizontal flip,
    mild brightness/contrast jitter."""
    n, c, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(images)
    oy = rng.integers(0, 2 * pad + 1, n)
    ox = rng.integers(0, 2 * pad + 1, n)
    flip = rng.random(n) < 0.5
    bright = rng.uniform(-0.05, 0.05, n)
    contrast = rng.uniform(0.9, 1.1, n)
    for i in range(n):
        crop = padded[i, :, oy[i] : oy[i] + h, ox[i] : ox[i] + w]
        if flip[i]:
            crop = crop[:, :, ::-1]
        m = crop.mean()
        out[i] = (crop - m) * contrast[i] + m + bright[i]
    return np.clip(out, 0.0, 1.0).astype(images.dtype)


# ---------------------------------------------------------------- mCE


def compute_mce(model_err, baseline_err) -> tuple[float, np.ndarray]:
    """Corruption error per family normalized by a baseline; mean x 100.

    ``CE_f = sum_s E[f, s] / sum_s E_base[f, s]`` and ``mCE = 100 * mean_f CE_f``.
    Returns ``(mce, ce_per_family)``.
    """
    e = np.asarray(model_err, dtype=np.float64)
    b = np.asarray(baseline_err, dtype=np.float64)
    if e.shape != b.shape or e.ndim != 2:
        raise ValueError(f"error matrices must share a 2-D shape, got {e.shape} and {b.shape}")
    denom = b.sum(axis=1)
    if np.any(denom <= 0):
        raise ZeroDivisionError("baseline error is zero for some family")
    ce = e.sum(axis=1) / denom
    return float(100.0 * ce.mean()), ce
