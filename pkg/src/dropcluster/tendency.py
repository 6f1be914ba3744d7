"""Cluster-tendency statistics: Hopkins and its image-aware Spatial Hopkins variant."""

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .core import FeatureMapBatch, InvalidArgument, as_random_source

# diagnostic cut-off only; unstructured channels are decided by ReNA
UNSTRUCTURED_THRESHOLD = 0.3

NEIGHBOR_OFFSETS = np.array(
    [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]
)


class InsufficientData(ValueError):
    pass


def _ratio(num, other):
    total = num + other
    if total == 0:
        return 0.5
    return float(num / total)


def hopkins(points, m_samples, rng):
    """Hopkins statistic of an ``(n, d)`` point cloud (near 1: clustered, 0.5: uniform)."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    n, d = points.shape
    if d < 1:
        raise InvalidArgument("points need at least one feature")
    if n < 20:
        raise InsufficientData(f"Hopkins needs at least 20 points, got {n}")
    if not 1 <= m_samples <= n // 10:
        raise InvalidArgument(f"m_samples must lie in [1, {n // 10}] for n={n}, got {m_samples}")
    rng = as_random_source(rng)

    lo, hi = points.min(axis=0), points.max(axis=0)
    artificial = lo + (hi - lo) * rng.random((m_samples, d))
    picked = rng.choice(n, size=m_samples, replace=False)

    tree = cKDTree(points)
    u, _ = tree.query(artificial, k=1)
    # second neighbor skips the sampled point itself
    w, _ = tree.query(points[picked], k=2)
    return _ratio(u.sum(), w[:, 1].sum())


def sample_interior(shape, m_samples, rng):
    """``m_samples`` pixel coordinates drawn with replacement, 1-pixel border excluded."""
    X, Y = shape
    rng = as_random_source(rng)
    xs = rng.integers(1, X - 1, size=m_samples)
    ys = rng.integers(1, Y - 1, size=m_samples)
    return np.stack([xs, ys], axis=1)


def spatial_hopkins_at(image, centers, others):
    """Spatial Hopkins for fixed sample locations.

    ``w`` compares each center pixel with its own 8 neighbors; ``z`` compares
    a second, random pixel with those same neighbors of the center.
    """
    image = np.asarray(image, dtype=np.float64)
    centers = np.asarray(centers)
    others = np.asarray(others)
    nx = centers[:, 0:1] + NEIGHBOR_OFFSETS[:, 0]
    ny = centers[:, 1:2] + NEIGHBOR_OFFSETS[:, 1]
    neighbors = image[nx, ny]
    w = np.abs(image[centers[:, 0], centers[:, 1]][:, None] - neighbors)
    z = np.abs(image[others[:, 0], others[:, 1]][:, None] - neighbors)
    # the 1/8 neighbor average cancels in the ratio; fsum makes the totals
    # independent of summation order
    return _ratio(math.fsum(z.ravel().tolist()), math.fsum(w.ravel().tolist()))


def spatial_hopkins(image, m_samples, rng):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or min(image.shape) < 3:
        raise InvalidArgument(f"spatial Hopkins needs an image of at least 3x3, got {image.shape}")
    interior = (image.shape[0] - 2) * (image.shape[1] - 2)
    if not 1 <= m_samples <= interior:
        raise InvalidArgument(f"m_samples must lie in [1, {interior}], got {m_samples}")
    rng = as_random_source(rng)
    centers = sample_interior(image.shape, m_samples, rng)
    others = sample_interior(image.shape, m_samples, rng)
    return spatial_hopkins_at(image, centers, others)


@dataclass(frozen=True)
class TendencyReport:
    per_channel_mean: np.ndarray
    m_samples: int
    seed: int

    def unstructured(self, threshold=UNSTRUCTURED_THRESHOLD):
        return np.flatnonzero(self.per_channel_mean < threshold)

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["channel", "spatial_hopkins"])
            for i, s in enumerate(self.per_channel_mean.tolist()):
                writer.writerow([i, f"{s:.6f}"])


def channel_tendency_report(batch, m_samples, rng):
    """Mean Spatial Hopkins over the mini-batch, one value per channel.

    Channel ``i`` uses child stream ``i`` of ``rng``.
    """
    if not isinstance(batch, FeatureMapBatch):
        batch = FeatureMapBatch(batch)
    if batch.w < 3 or batch.h < 3:
        raise InvalidArgument(f"feature maps of {batch.w}x{batch.h} are smaller than 3x3")
    rng = as_random_source(rng)
    means = np.empty(batch.t)
    for c in range(batch.t):
        stream = rng.child(c)
        means[c] = np.mean([spatial_hopkins(img, m_samples, stream) for img in batch.values[:, c]])
    return TendencyReport(means, m_samples, rng.seed)


def tendency_histogram(values, bins):
    """Counts over ``bins`` equal-width bins on [0, 1]; 1.0 falls in the last bin."""
    values = np.asarray(values, dtype=np.float64)
    if bins < 1:
        raise InvalidArgument(f"bins must be >= 1, got {bins}")
    if np.any((values < 0) | (values > 1)) or not np.all(np.isfinite(values)):
        raise InvalidArgument("tendency values must lie in [0, 1]")
    counts, edges = np.histogram(values, bins=bins, range=(0.0, 1.0))
    return counts, edges
