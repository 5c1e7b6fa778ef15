from __future__ import annotations
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from utils.errors import ConfigError

DATASETS = ('eight_gaussians',)


def mixture_centers(n_modes: int = 8, radius: float = 4.0) -> np.ndarray:
    angles = 2.0 * np.pi * np.arange(n_modes) / n_modes
    return radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def make_eight_gaussians(n: int, seed: int = 0, *, radius: float = 4.0, std: float = 0.3,
                         n_modes: int = 8) -> Tuple[np.ndarray, np.ndarray]:
    """Equal-weight Gaussian mixture on a circle. Returns (points, centers)."""
    rng = np.random.default_rng(seed)
    centers = mixture_centers(n_modes, radius)
    which = rng.integers(0, n_modes, size=n)
    points = centers[which] + std * rng.standard_normal((n, 2))
    return points, centers


def make_dataset(kind: str, n: int, seed: int, **kwargs) -> Tuple[np.ndarray, np.ndarray]:
    if kind == 'eight_gaussians':
        return make_eight_gaussians(n, seed, **kwargs)
    raise ConfigError(f"unknown dataset kind '{kind}'", field='data.kind')


@dataclass
class MinibatchStream:
    """Epoch-wise sampling without replacement over a fixed training set."""
    data: np.ndarray
    batch_size: int
    seed: int = 0

    def __post_init__(self):
        self._rng = np.random.default_rng(self.seed)
        self._order = self._rng.permutation(len(self.data))
        self._pos = 0

    def next(self) -> np.ndarray:
        if self.batch_size > len(self.data):
            return self.data[self._rng.integers(0, len(self.data), size=self.batch_size)]
        if self._pos + self.batch_size > len(self._order):
            self._order = self._rng.permutation(len(self.data))
            self._pos = 0
        idx = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return self.data[idx]
