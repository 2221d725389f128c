"""Synthetic image classification data: noisy class-specific gratings."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    classes: int = 4
    train_per_class: int = 2000
    test_per_class: int = 400
    image_shape: tuple = (1, 16, 16)
    noise: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.classes < 2:
            raise ValueError("need at least 2 classes")
        if self.train_per_class < 1 or self.test_per_class < 1:
            raise ValueError("samples per class must be >= 1")
        if len(self.image_shape) != 3 or min(self.image_shape) < 1:
            raise ValueError("image_shape must be (C, H, W)")


def class_frequencies(classes: int, size: int, seed: int) -> np.ndarray:
    """Per-class (channel, fy, fx) spatial frequencies in cycles per image."""
    rng = np.random.default_rng([seed, 1])
    angles = np.pi * (np.arange(classes) + 0.25 * rng.random(classes)) / classes
    radius = size / 6.0 * (1.0 + 0.3 * rng.random(classes))
    return np.stack([radius * np.sin(angles), radius * np.cos(angles)], axis=1)


def _draw(spec: SyntheticDatasetSpec, per_class: int, stream: int):
    c, h, w = spec.image_shape
    freqs = class_frequencies(spec.classes, max(h, w), spec.seed)
    rng = np.random.default_rng([spec.seed, stream])
    n = spec.classes * per_class
    labels = np.repeat(np.arange(spec.classes), per_class)
    rng.shuffle(labels)
    yy, xx = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    f = freqs[labels]
    phase = rng.uniform(0, 2 * np.pi, size=(n, c))
    amp = rng.normal(1.0, 0.2, size=(n, c))
    arg = 2 * np.pi * (f[:, None, 0, None, None] * yy + f[:, None, 1, None, None] * xx) + phase[..., None, None]
    x = amp[..., None, None] * np.cos(arg) + spec.noise * rng.standard_normal((n, c, h, w))
    return x.astype(np.float32), labels.astype(np.int64)


def make_synthetic(spec: SyntheticDatasetSpec = SyntheticDatasetSpec()):
    """Returns ``(x_train, y_train, x_test, y_test)``; deterministic in ``spec.seed``."""
    xtr, ytr = _draw(spec, spec.train_per_class, 2)
    xte, yte = _draw(spec, spec.test_per_class, 3)
    return xtr, ytr, xte, yte
