"""Dataset specs, the synthetic texture task, and IDX import."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from .formats import load_idx

SOURCES = ("synthetic", "idx_files")


@dataclass
class DatasetSpec:
    source: str = "synthetic"
    classes: int = 10
    samples_per_class: int = 64
    image_size: int = 32
    channels: int = 3
    texture_freq_range: tuple[float, float] = (1.0, 4.0)
    amplitude: float = 0.4
    phase_jitter: float = 0.5
    noise_std: float = 0.1
    train_fraction: float = 0.8
    images_path: str | None = None
    labels_path: str | None = None

    def __post_init__(self):
        self.texture_freq_range = tuple(float(v) for v in self.texture_freq_range)
        if self.source not in SOURCES:
            raise ValueError(f"source must be one of {SOURCES}, got {self.source!r}")
        if self.source == "synthetic" and self.classes < 2:
            raise ValueError("synthetic data needs at least 2 classes")
        if not 0 < self.train_fraction <= 1:
            raise ValueError("train_fraction must be in (0, 1]")

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (self.channels, self.image_size, self.image_size)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["texture_freq_range"] = list(self.texture_freq_range)
        return d


class Dataset(NamedTuple):
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray


def class_prototypes(spec: DatasetSpec, seed: int):
    """Per-class (frequency, orientation, phase, colour weights)."""
    rng = np.random.default_rng([seed, 0])
    lo, hi = spec.texture_freq_range
    k = np.arange(spec.classes)
    freqs = lo + (hi - lo) * ((k * 0.618034) % 1.0)
    angles = np.pi * k / spec.classes
    phases = rng.uniform(0, 2 * np.pi, size=spec.classes)
    colours = rng.uniform(0.8, 1.0, size=(spec.classes, spec.channels)) * rng.choice([-1.0, 1.0], size=(spec.classes, spec.channels))
    return freqs, angles, phases, colours


def synth_images(spec: DatasetSpec, labels: np.ndarray, seed: int) -> np.ndarray:
    freqs, angles, phases, colours = class_prototypes(spec, seed)
    rng = np.random.default_rng([seed, 1])
    s = spec.image_size
    u, v = np.meshgrid(np.arange(s) / s, np.arange(s) / s, indexing="ij")
    n = len(labels)
    jitter = rng.uniform(-spec.phase_jitter, spec.phase_jitter, size=n)
    f, a = freqs[labels], angles[labels]
    arg = 2 * np.pi * f[:, None, None] * (u * np.cos(a)[:, None, None] + v * np.sin(a)[:, None, None])
    wave = np.sin(arg + (phases[labels] + jitter)[:, None, None])
    img = 0.5 + spec.amplitude * colours[labels][:, :, None, None] * wave[:, None]
    img += rng.normal(0.0, spec.noise_std, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def synth_dataset(spec: DatasetSpec, seed: int = 0) -> Dataset:
    """Balanced class-conditional sinusoid textures with Gaussian pixel noise, clipped to [0, 1].

    Each class owns a spatial frequency, orientation, phase and colour mix;
    samples jitter the phase and add i.i.d. noise.  The split is stratified.
    """
    labels = np.repeat(np.arange(spec.classes), spec.samples_per_class)
    x = synth_images(spec, labels, seed)
    rng = np.random.default_rng([seed, 2])
    n_train = int(round(spec.train_fraction * spec.samples_per_class))
    train_idx, test_idx = [], []
    for c in range(spec.classes):
        idx = rng.permutation(np.nonzero(labels == c)[0])
        train_idx.append(idx[:n_train])
        test_idx.append(idx[n_train:])
    train_idx = rng.permutation(np.concatenate(train_idx))
    test_idx = rng.permutation(np.concatenate(test_idx))
    return Dataset(x[train_idx], labels[train_idx], x[test_idx], labels[test_idx])


def load_dataset(spec: DatasetSpec, seed: int = 0) -> Dataset:
    if spec.source == "synthetic":
        return synth_dataset(spec, seed)
    x, y = load_idx(spec.images_path, spec.labels_path)
    perm = np.random.default_rng([seed, 2]).permutation(len(x))
    n_train = int(round(spec.train_fraction * len(x)))
    tr, te = perm[:n_train], perm[n_train:]
    return Dataset(x[tr], y[tr], x[te], y[te])
