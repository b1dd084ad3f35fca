"""Synthetic 2-D source and target densities.

The source is always a (box-truncated) standard Gaussian; targets are the
usual toy shapes.  Every shipped dataset lives inside the [-4, 4]^2 box at
default scales, so flows never need to leave a bounded workspace.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .rng import Rng

DATASET_NAMES = ("gaussian", "two_moons", "eight_gaussians", "checkerboard", "spiral")
SUPPORT_BOX = 4.0

# centers of the eight-mode mixture, fixed on the radius-2 circle
_EIGHT_CENTERS = 2.0 * np.stack(
    [np.cos(np.arange(8) * np.pi / 4.0), np.sin(np.arange(8) * np.pi / 4.0)], axis=1
)


class DatasetConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    noise_scale: float = 1.0
    sample_count: int = 1000
    shift: tuple = (0.0, 0.0)

    def __post_init__(self):
        if self.name not in DATASET_NAMES:
            raise DatasetConfigError(
                f"unknown dataset {self.name!r}; known: {', '.join(DATASET_NAMES)}")
        if self.noise_scale < 0:
            raise DatasetConfigError("noise_scale must be >= 0")
        if self.sample_count < 1:
            raise DatasetConfigError("sample_count must be >= 1")


def _truncated_normal(rng: Rng, n: int, scale: float,
                      center: np.ndarray) -> np.ndarray:
    """I.i.d. N(center, scale^2 I) conditioned on the support box (rejection)."""
    out = np.empty((n, 2))
    filled = 0
    while filled < n:
        draw = center + scale * rng.normal((n - filled, 2))
        keep = draw[np.all(np.abs(draw) <= SUPPORT_BOX, axis=1)]
        out[filled:filled + len(keep)] = keep
        filled += len(keep)
    return out


def two_moons_labeled(rng: Rng, n: int, noise_scale: float) -> tuple[np.ndarray, np.ndarray]:
    """Two interleaved half-circles; returns (points, moon labels)."""
    labels = rng.integers(0, 2, n)
    theta = rng.uniform(0.0, np.pi, n)
    x = np.where(labels == 0, np.cos(theta), 1.0 - np.cos(theta))
    y = np.where(labels == 0, np.sin(theta), 0.5 - np.sin(theta))
    pts = 2.0 * np.stack([x - 0.5, y - 0.25], axis=1)
    pts = pts + 0.1 * noise_scale * rng.normal((n, 2))
    return pts, labels


def sample(spec: DatasetSpec, rng: Rng) -> np.ndarray:
    """Draw `spec.sample_count` i.i.d. points, deterministic given the rng seed."""
    n = spec.sample_count
    s = spec.noise_scale
    shift = np.asarray(spec.shift, dtype=np.float64)
    if spec.name == "gaussian":
        return _truncated_normal(rng, n, s, shift)
    if spec.name == "two_moons":
        pts = two_moons_labeled(rng, n, s)[0]
    elif spec.name == "eight_gaussians":
        idx = rng.integers(0, 8, n)
        pts = _EIGHT_CENTERS[idx] + 0.2 * s * rng.normal((n, 2))
    elif spec.name == "checkerboard":
        x = rng.uniform(-2.0, 2.0, n)
        parity = rng.integers(0, 2, n)
        y = rng.uniform(0.0, 1.0, n) + np.floor(x) % 2 + 2 * parity - 2.0
        pts = 1.8 * np.stack([x, y], axis=1)
    elif spec.name == "spiral":
        t = np.sqrt(rng.uniform(0.0, 1.0, n)) * 3.0 * np.pi
        r = 0.35 * t
        pts = np.stack([r * np.cos(t), r * np.sin(t)], axis=1)
        pts = pts + 0.1 * s * rng.normal((n, 2))
    else:
        raise DatasetConfigError(spec.name)
    # noise tails are clipped so the support-box invariant holds unconditionally
    return np.clip(pts + shift, -SUPPORT_BOX, SUPPORT_BOX)


def write_csv(path, batch: np.ndarray) -> None:
    """Export a 2-D batch as CSV with header `x,y`."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y"])
        for row in np.asarray(batch):
            writer.writerow([repr(float(row[0])), repr(float(row[1]))])
