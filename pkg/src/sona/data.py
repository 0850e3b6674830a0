"""Synthetic shape images with a known semantic/nuisance split.

The semantic factor is the shape drawn in the foreground; the nuisance factor
is a striped background (base colour, stripe frequency, phase, orientation,
amplitude) plus the foreground colour and position. Every image carries the
exact binary support of its shape so evaluation can separate the two.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from sona.archive import load_archive, save_archive
from sona.substrate import ConfigError

# Shape predicates over normalised coordinates (u right, v up), unit "radius".
ShapeFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


def _polygon(n: int, rot: float = 0.0, r: float = 1.0) -> ShapeFn:
    # Regular n-gon as intersection of half-planes.
    def fn(u, v):
        inside = np.ones_like(u, dtype=bool)
        apothem = r * math.cos(math.pi / n)
        for k in range(n):
            a = rot + 2 * math.pi * (k + 0.5) / n
            inside &= u * math.cos(a) + v * math.sin(a) <= apothem
        return inside

    return fn


def _star(u, v):
    theta = np.arctan2(v, u) - math.pi / 2
    rad = np.hypot(u, v)
    return rad <= 0.5 + 0.5 * np.abs(np.cos(2.5 * theta)) ** 2


SHAPES: dict[str, ShapeFn] = {
    "circle": lambda u, v: u * u + v * v <= 1.0,
    "square": lambda u, v: np.maximum(np.abs(u), np.abs(v)) <= 0.8,
    "triangle": _polygon(3, rot=-math.pi / 2 + math.pi / 3, r=1.05),
    "cross": lambda u, v: (np.minimum(np.abs(u - v), np.abs(u + v)) <= 0.45) & (np.maximum(np.abs(u), np.abs(v)) <= 0.85),
    "ring": lambda u, v: (u * u + v * v <= 1.0) & (u * u + v * v >= 0.36),
    "star": _star,
    "diamond": lambda u, v: np.abs(u) + np.abs(v) <= 1.0,
    "plus": lambda u, v: (np.minimum(np.abs(u), np.abs(v)) <= 0.32) & (np.maximum(np.abs(u), np.abs(v)) <= 1.0),
    "crescent": lambda u, v: (u * u + v * v <= 1.0) & ((u - 0.55) ** 2 + v * v > 0.6),
    "bar": lambda u, v: (np.abs(u) <= 1.0) & (np.abs(v) <= 0.35),
    "tee": lambda u, v: ((np.abs(u) <= 1.0) & (v <= 0.9) & (v >= 0.45)) | ((np.abs(u) <= 0.28) & (v >= -1.0) & (v <= 0.9)),
    "hexagon": _polygon(6),
    "frame": lambda u, v: (np.maximum(np.abs(u), np.abs(v)) <= 0.85) & (np.maximum(np.abs(u), np.abs(v)) >= 0.45),
    "ell": lambda u, v: ((u >= -0.8) & (u <= -0.2) & (np.abs(v) <= 0.9)) | ((v >= 0.3) & (v <= 0.9) & (np.abs(u) <= 0.8)),
    "aitch": lambda u, v: ((np.abs(np.abs(u) - 0.6) <= 0.25) & (np.abs(v) <= 0.9)) | ((np.abs(u) <= 0.6) & (np.abs(v) <= 0.2)),
    "chevron": lambda u, v: (np.abs(v - 0.9 * np.abs(u) + 0.3) <= 0.3) & (np.abs(u) <= 0.9),
    "dots": lambda u, v: ((u - 0.5) ** 2 + v * v <= 0.16) | ((u + 0.5) ** 2 + v * v <= 0.16),
}


@dataclass
class FactorSpec:
    image_size: int = 16
    id_classes: tuple[str, ...] = ("circle", "square", "triangle", "cross")
    near_classes: tuple[str, ...] = ("ring", "diamond")
    far_classes: tuple[str, ...] = ("star", "frame")
    prompt_classes: tuple[str, ...] = ("crescent", "bar", "tee", "ell", "aitch", "chevron", "dots")
    # Relative shape radius and centre jitter, as fractions of the side length.
    radius: tuple[float, float] = (0.30, 0.38)
    jitter: float = 0.12
    # ID nuisance family.
    base_color: tuple[float, float] = (0.15, 0.85)
    stripe_freq: tuple[float, float] = (0.5, 2.0)
    stripe_amp: tuple[float, float] = (0.05, 0.2)
    min_contrast: float = 0.35
    # Far-OOD nuisance family: high-frequency stripes plus per-pixel noise.
    far_stripe_freq: tuple[float, float] = (4.0, 6.0)
    far_noise: float = 0.15

    @property
    def classes(self) -> tuple[str, ...]:
        """Global class index -> shape name."""
        return self.id_classes + self.near_classes + self.far_classes + self.prompt_classes

    def class_id(self, name: str) -> int:
        return self.classes.index(name)

    def validate(self) -> None:
        groups = [self.id_classes, self.near_classes, self.far_classes, self.prompt_classes]
        names = [c for g in groups for c in g]
        unknown = [c for c in names if c not in SHAPES]
        if unknown:
            raise ConfigError(f"unknown shape classes {unknown}; available: {sorted(SHAPES)}")
        if len(set(names)) != len(names):
            raise ConfigError("ID, near, far and prompt class sets must be disjoint")
        if len(self.id_classes) < 2 or not self.near_classes or not self.far_classes or not self.prompt_classes:
            raise ConfigError("class budget too small: need >=2 ID classes and >=1 near/far/prompt class each")
        if self.image_size < 8:
            raise ConfigError("image_size must be >= 8")


@dataclass
class SplitCounts:
    id_train: int = 1024
    id_test: int = 256
    near_ood: int = 256
    far_ood: int = 256
    prompt_train: int = 1024


@dataclass
class LabeledImage:
    pixels: np.ndarray  # [3, H, W] in [0, 1]
    label: int
    gt_foreground_mask: np.ndarray | None  # [H, W] in {0, 1}


# nuisance vector layout
NUISANCE_FIELDS = ("base_r", "base_g", "base_b", "freq", "phase", "orient", "amp", "fg_r", "fg_g", "fg_b", "cx", "cy", "radius", "noise")


@dataclass
class ImageSet:
    images: np.ndarray  # [N, 3, H, W] float32
    labels: np.ndarray  # [N] int64, global class ids
    masks: np.ndarray  # [N, H, W] float32 in {0, 1}
    nuisance: np.ndarray  # [N, len(NUISANCE_FIELDS)] float32

    def __len__(self) -> int:
        return len(self.labels)

    def item(self, i: int) -> LabeledImage:
        return LabeledImage(self.images[i], int(self.labels[i]), self.masks[i])

    def subset(self, idx) -> "ImageSet":
        return ImageSet(self.images[idx], self.labels[idx], self.masks[idx], self.nuisance[idx])


SPLITS = ("id_train", "id_test", "near_ood", "far_ood", "prompt_train")


@dataclass
class BenchmarkSplits:
    spec: FactorSpec
    id_train: ImageSet
    id_test: ImageSet
    near_ood: ImageSet
    far_ood: ImageSet
    prompt_train: ImageSet  # prompt-class images, seen only by the diffusion model
    meta: dict = field(default_factory=dict)

    @property
    def id_labels(self) -> list[int]:
        return [self.spec.class_id(c) for c in self.spec.id_classes]

    @property
    def ood_prompt_labels(self) -> list[int]:
        return [self.spec.class_id(c) for c in self.spec.prompt_classes]

    def split(self, name: str) -> ImageSet:
        return getattr(self, name)


def render(
    shape: str,
    size: int,
    center: tuple[float, float],
    radius: float,
    fg: np.ndarray,
    background: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``shape`` over ``background`` ([3,H,W]); returns (pixels, mask).

    Pixel (row i, col j) is foreground iff its centre satisfies the shape
    predicate; no anti-aliasing, so the mask is the exact support.
    """
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    u = (xs - center[0]) / radius
    v = -(ys - center[1]) / radius
    mask = SHAPES[shape](u, v)
    pixels = np.where(mask[None], np.asarray(fg, dtype=np.float64)[:, None, None], background)
    return pixels.astype(np.float32), mask.astype(np.float32)


def striped_background(size: int, base, freq: float, phase: float, orient: float, amp: float) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    proj = (xs * math.cos(orient) + ys * math.sin(orient)) / size
    wave = amp * np.sin(2 * math.pi * freq * proj + phase)
    return np.clip(np.asarray(base, dtype=np.float64)[:, None, None] + wave[None], 0.0, 1.0)


def _sample_image(spec: FactorSpec, shape: str, far: bool, rng: np.random.Generator):
    S = spec.image_size
    base = rng.uniform(*spec.base_color, size=3)
    freq = rng.uniform(*(spec.far_stripe_freq if far else spec.stripe_freq))
    phase = rng.uniform(0, 2 * math.pi)
    orient = rng.uniform(0, math.pi)
    amp = rng.uniform(*spec.stripe_amp)
    bg = striped_background(S, base, freq, phase, orient, amp)
    noise = 0.0
    if far:
        noise = spec.far_noise
        bg = np.clip(bg + rng.uniform(-noise, noise, size=bg.shape), 0.0, 1.0)
    for _ in range(100):
        fg = rng.uniform(0.0, 1.0, size=3)
        if np.abs(fg - base).mean() >= spec.min_contrast:
            break
    else:
        fg = np.where(base > 0.5, 0.0, 1.0)
    radius = rng.uniform(*spec.radius) * S
    cx = S / 2 + rng.uniform(-spec.jitter, spec.jitter) * S
    cy = S / 2 + rng.uniform(-spec.jitter, spec.jitter) * S
    pixels, mask = render(shape, S, (cx, cy), radius, fg, bg)
    nuis = np.concatenate([base, [freq, phase, orient, amp], fg, [cx, cy, radius, noise]])
    return pixels, mask, nuis.astype(np.float32)


def _make_set(spec: FactorSpec, classes: tuple[str, ...], n: int, far: bool, seed: int, split_code: int) -> ImageSet:
    S = spec.image_size
    order = np.random.default_rng([seed, split_code, 0xC1A55]).permutation(n)
    names = [classes[i % len(classes)] for i in range(n)]
    names = [names[i] for i in order]
    images = np.zeros((n, 3, S, S), np.float32)
    masks = np.zeros((n, S, S), np.float32)
    nuis = np.zeros((n, len(NUISANCE_FIELDS)), np.float32)
    labels = np.array([spec.class_id(c) for c in names], dtype=np.int64)
    for i, name in enumerate(names):
        rng = np.random.default_rng([seed, split_code, i])
        images[i], masks[i], nuis[i] = _sample_image(spec, name, far, rng)
    return ImageSet(images, labels, masks, nuis)


def generate_benchmark(spec: FactorSpec, counts: SplitCounts, seed: int) -> BenchmarkSplits:
    """Deterministic ID / near-OOD / far-OOD splits; each image seeded by (seed, split, index)."""
    spec.validate()
    sets = {
        "id_train": _make_set(spec, spec.id_classes, counts.id_train, False, seed, 0),
        "id_test": _make_set(spec, spec.id_classes, counts.id_test, False, seed, 1),
        "near_ood": _make_set(spec, spec.near_classes, counts.near_ood, False, seed, 2),
        "far_ood": _make_set(spec, spec.far_classes, counts.far_ood, True, seed, 3),
        "prompt_train": _make_set(spec, spec.prompt_classes, counts.prompt_train, False, seed, 4),
    }
    return BenchmarkSplits(spec=spec, meta={"seed": seed, "counts": asdict(counts)}, **sets)


def spec_to_json(spec: FactorSpec) -> str:
    return json.dumps(asdict(spec), sort_keys=True)


def spec_from_json(text: str) -> FactorSpec:
    raw = json.loads(text)
    return FactorSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()})


def save_benchmark(splits: BenchmarkSplits, path: str | Path, meta: dict | None = None) -> None:
    entries: dict[str, np.ndarray | str] = {}
    for name in SPLITS:
        s = splits.split(name)
        entries[f"{name}/images"] = s.images
        entries[f"{name}/labels"] = s.labels.astype(np.float32)
        entries[f"{name}/masks"] = s.masks
        entries[f"{name}/nuisance"] = s.nuisance
    entries["spec"] = spec_to_json(splits.spec)
    entries["meta"] = json.dumps({**splits.meta, **(meta or {})}, sort_keys=True)
    save_archive(entries, path)


def load_benchmark(path: str | Path) -> BenchmarkSplits:
    e = load_archive(path)
    if "spec" not in e:
        raise ConfigError(f"{path} is not a benchmark archive (no 'spec' entry)")
    sets = {}
    for name in SPLITS:
        sets[name] = ImageSet(
            e[f"{name}/images"],
            e[f"{name}/labels"].astype(np.int64),
            e[f"{name}/masks"],
            e[f"{name}/nuisance"],
        )
    return BenchmarkSplits(spec=spec_from_json(e["spec"]), meta=json.loads(e["meta"]), **sets)
