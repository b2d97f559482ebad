"""Procedural 16x16 grayscale toy classification data with hidden sub-modes.

Classes (default order): horizontal stripes, vertical stripes, checkerboard,
disk. The class lives in a faint texture laid over a brighter Gaussian blob.
Sub-modes move the blob along the main diagonal and change the texture
period (or disk size and placement), so each class is multi-modal in latent
space while the dominant pixel energy is shared across classes.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rng import substream

__all__ = ["CLASS_NAMES", "ToyDatasetSpec", "Split", "ToyDataset", "generate_toy_dataset"]

CLASS_NAMES = ("stripes-h", "stripes-v", "checker", "disk")

# texture period per (first, last) sub-mode; further modes interpolate
_PERIODS = {"stripes-h": (8.0, 5.0), "stripes-v": (8.0, 5.0), "checker": (10.0, 6.0)}
_BLOB_CENTRES = (4.5, 11.5)
_DISK_RADII = (2.5, 3.5)
_DISK_CENTRES = ((11.0, 5.0), (5.0, 11.0))


@dataclass(frozen=True)
class ToyDatasetSpec:
    n_classes: int = 4
    modes_per_class: int = 2
    train_per_class: int = 200
    test_per_class: int = 100
    noise: float = 0.08
    texture_amp: tuple = (0.05, 0.10)
    blob_amp: float = 0.3
    image_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.n_classes <= len(CLASS_NAMES):
            raise ValueError(f"n_classes must be in [1, {len(CLASS_NAMES)}]")
        if self.modes_per_class < 1:
            raise ValueError("modes_per_class must be >= 1")
        if self.train_per_class < 1 or self.test_per_class < 1:
            raise ValueError("need at least one sample per class in each split")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        object.__setattr__(self, "texture_amp", tuple(self.texture_amp))

    @property
    def class_names(self) -> tuple:
        return CLASS_NAMES[: self.n_classes]


@dataclass
class Split:
    images: np.ndarray  # (N, H, W) in [0, 1]
    labels: np.ndarray  # (N,) int
    modes: np.ndarray  # (N,) hidden sub-mode id
    attrs: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class ToyDataset:
    spec: ToyDatasetSpec
    train: Split
    test: Split

    @property
    def class_names(self) -> tuple:
        return self.spec.class_names


def _lerp(pair, mode: int, n_modes: int):
    a = 0.0 if n_modes == 1 else mode / (n_modes - 1)
    return np.asarray(pair[0], dtype=np.float64) * (1 - a) + np.asarray(pair[1], dtype=np.float64) * a


def _render(name: str, mode: int, spec: ToyDatasetSpec, rng: np.random.Generator):
    n_modes, size = spec.modes_per_class, spec.image_size
    scale = size / 16.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    background = rng.uniform(0.3, 0.5)
    c = float(_lerp(_BLOB_CENTRES, mode, n_modes)) * scale
    cy = c + rng.uniform(-1.5, 1.5)
    cx = c + rng.uniform(-1.5, 1.5)
    sigma = 3.5 * scale
    blob = spec.blob_amp * rng.uniform(0.7, 1.0) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
    amp = rng.uniform(*spec.texture_amp)
    if name != "disk":
        period = float(_lerp(_PERIODS[name], mode, n_modes)) * scale
        phase = rng.uniform(-0.6, 0.6, size=2)
        wy = np.sin(2 * np.pi * yy / period + phase[0])
        wx = np.sin(2 * np.pi * xx / period + phase[1])
        pattern = {"stripes-h": wy, "stripes-v": wx, "checker": 1.4 * wy * wx}[name]
    else:
        radius = float(_lerp(_DISK_RADII, mode, n_modes)) * scale
        dy, dx = _lerp(_DISK_CENTRES, mode, n_modes) * scale
        dy += rng.uniform(-1, 1)
        dx += rng.uniform(-1, 1)
        dist = np.hypot(yy - dy, xx - dx)
        pattern = 2.0 / (1.0 + np.exp(2.0 * (dist - radius)))
    img = background + blob + amp * pattern + spec.noise * rng.standard_normal((size, size))
    return np.clip(img, 0.0, 1.0), background, amp


def _split(spec: ToyDatasetSpec, per_class: int, stream: str) -> Split:
    rng = substream(spec.seed, "dataset", stream)
    images, labels, modes, bgs, amps = [], [], [], [], []
    for c, name in enumerate(spec.class_names):
        for i in range(per_class):
            mode = i % spec.modes_per_class
            img, bg, amp = _render(name, mode, spec, rng)
            images.append(img)
            labels.append(c)
            modes.append(mode)
            bgs.append(bg)
            amps.append(amp)
    return Split(
        images=np.stack(images),
        labels=np.asarray(labels, dtype=np.int64),
        modes=np.asarray(modes, dtype=np.int64),
        attrs={"background": np.asarray(bgs), "texture_amp": np.asarray(amps)},
    )


def generate_toy_dataset(spec: ToyDatasetSpec | None = None) -> ToyDataset:
    """Deterministic train/test splits for ``spec``."""
    spec = spec or ToyDatasetSpec()
    return ToyDataset(spec, _split(spec, spec.train_per_class, "train"), _split(spec, spec.test_per_class, "test"))
