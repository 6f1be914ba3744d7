"""Dataset ingestion, synthetic data, training augmentation and test-time corruptions."""

import os
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import FeatureMapBatch, InvalidArgument, as_random_source

CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)


class FormatError(ValueError):
    pass


@dataclass
class LabeledImageSet:
    images: np.ndarray  # (n, 3, 32, 32) in [0, 1]
    labels: np.ndarray  # (n,)
    class_count: int = 10

    def __len__(self):
        return int(self.labels.shape[0])

    def subset(self, index):
        return LabeledImageSet(self.images[index], self.labels[index], self.class_count)


# -- CIFAR-10 binary -----------------------------------------------------------

def load_cifar10_binary(path):
    """Parse one CIFAR-10 binary batch file (or several, given a list)."""
    if isinstance(path, (list, tuple)):
        parts = [load_cifar10_binary(p) for p in path]
        return LabeledImageSet(
            np.concatenate([p.images for p in parts]),
            np.concatenate([p.labels for p in parts]),
        )
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD:
        raise FormatError(f"{path}: size {raw.size} is not a multiple of {CIFAR_RECORD}")
    records = raw.reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise FormatError(f"{path}: label {labels.max()} out of range")
    images = records[:, 1:].reshape(-1, *CIFAR_SHAPE).astype(np.float32) / np.float32(255)
    return LabeledImageSet(images, labels, 10)


def write_cifar10_binary(path, images, labels):
    images = np.asarray(images)
    labels = np.asarray(labels)
    if images.shape[1:] != CIFAR_SHAPE:
        raise InvalidArgument(f"expected images of shape (n, 3, 32, 32), got {images.shape}")
    if labels.min() < 0 or labels.max() > 9:
        raise InvalidArgument("CIFAR-10 labels must be in [0, 9]")
    pixels = np.clip(np.rint(images * 255), 0, 255).astype(np.uint8).reshape(len(labels), -1)
    records = np.concatenate([labels.astype(np.uint8)[:, None], pixels], axis=1)
    with open(path, "wb") as f:
        f.write(records.tobytes())


def find_cifar10_files(directory):
    train = [os.path.join(directory, f"data_batch_{i}.bin") for i in range(1, 6)]
    test = os.path.join(directory, "test_batch.bin")
    return [p for p in train if os.path.exists(p)], test


def stratified_subset(labels, fraction, rng):
    """Indices of a class-stratified ``fraction`` of the samples, sorted."""
    if not 0 < fraction <= 1:
        raise InvalidArgument(f"train fraction must be in (0, 1], got {fraction}")
    rng = as_random_source(rng)
    labels = np.asarray(labels)
    if fraction == 1:
        return np.arange(labels.size)
    keep = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        count = int(round(fraction * idx.size))
        keep.append(rng.permutation(idx)[:count])
    return np.sort(np.concatenate(keep))


# -- synthetic data ------------------------------------------------------------

def random_connected_partition(width, height, k, rng):
    """Grow ``k`` regions from random seeds; every region is 4-connected."""
    if not 1 <= k <= width * height:
        raise InvalidArgument(f"cannot split {width}x{height} pixels into {k} regions")
    rng = as_random_source(rng)
    labels = np.full(width * height, -1, dtype=np.int64)
    seeds = rng.choice(width * height, size=k, replace=False)
    labels[seeds] = np.arange(k)
    frontier = list(seeds.tolist())
    while frontier:
        i = int(rng.integers(len(frontier)))
        node = frontier[i]
        x, y = divmod(node, height)
        free = [
            nx * height + ny
            for nx, ny in ((x - 1, y), (x + 1, y), (x, y - 1), (x, y + 1))
            if 0 <= nx < width and 0 <= ny < height and labels[nx * height + ny] < 0
        ]
        if not free:
            frontier[i] = frontier[-1]
            frontier.pop()
            continue
        grow = free[int(rng.integers(len(free)))]
        labels[grow] = labels[node]
        frontier.append(grow)
    return labels


def halves_partition(width, height):
    """Two blocks split along the first spatial axis."""
    if width < 2:
        raise InvalidArgument("need width >= 2 to split into halves")
    return (np.arange(width * height) // height >= width // 2).astype(np.int64)


def synthetic_planted(batch, t, w, h, k_blocks, noise_sigma, rng, partition=None):
    """Feature maps with a planted block structure per channel.

    Each block draws one random level per sample; every pixel of the block
    takes that level plus ``N(0, noise_sigma**2)``. Returns the batch and the
    ground-truth labels, shape ``(t, w*h)``.
    """
    rng = as_random_source(rng)
    if partition is not None:
        partition = np.asarray(partition, dtype=np.int64)
        if partition.shape != (w * h,) or np.unique(partition).size != k_blocks:
            raise InvalidArgument("partition does not match the requested shape/block count")
    values = np.empty((batch, t, w * h))
    truth = np.empty((t, w * h), dtype=np.int64)
    for c in range(t):
        labels = partition if partition is not None else random_connected_partition(w, h, k_blocks, rng)
        levels = rng.normal(size=(batch, k_blocks))
        values[:, c] = levels[:, labels] + noise_sigma * rng.normal(size=(batch, w * h))
        truth[c] = labels
    return FeatureMapBatch(values.reshape(batch, t, w, h)), truth


def _shape_image(cls, rng, size=32):
    """One 3 x size x size image whose spatial layout is set by ``cls``."""
    x, y = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    kind = cls % 5
    if kind < 3:
        period = rng.uniform(6.0, 12.0)
        phase = rng.uniform(0, 2 * np.pi)
        coord = (x, y, (x + y) / np.sqrt(2))[kind]
        field = 0.5 + 0.5 * np.sin(2 * np.pi * coord / period + phase)
    else:
        cx, cy = rng.uniform(10, 22, size=2)
        r = rng.uniform(6, 10)
        if kind == 3:
            field = ((x - cx) ** 2 + (y - cy) ** 2 <= r**2).astype(float)
        else:
            field = ((np.abs(x - cx) <= r * 0.85) & (np.abs(y - cy) <= r * 0.85)).astype(float)
        field = ndimage.uniform_filter(field, 3, mode="nearest")
    fg = rng.uniform(0.45, 1.0, size=3)
    bg = rng.uniform(0.0, 0.55, size=3)
    return bg[:, None, None] + (fg - bg)[:, None, None] * field[None]


def synthetic_shapes(n, class_count, rng, noise=0.12):
    """Labeled RGB images of gratings and filled shapes, balanced over classes."""
    if not 1 <= class_count <= 5:
        raise InvalidArgument("synthetic_shapes supports 1 to 5 classes")
    rng = as_random_source(rng)
    labels = np.arange(n) % class_count
    labels = rng.permutation(labels)
    images = np.empty((n, *CIFAR_SHAPE), dtype=np.float32)
    for i, c in enumerate(labels.tolist()):
        img = _shape_image(c, rng) + noise * rng.normal(size=CIFAR_SHAPE)
        images[i] = np.clip(img, 0.0, 1.0)
    return LabeledImageSet(images, labels.astype(np.int64), class_count)


# -- augmentation ---------------------------------------------------------------

@dataclass(frozen=True)
class AugmentParams:
    flip: bool = False
    angle: float = 0.0
    offset: tuple = (4, 4)


def channel_stats(images):
    images = np.asarray(images, dtype=np.float64)
    return images.mean(axis=(0, 2, 3)), images.std(axis=(0, 2, 3))


def normalize(images, mean, std):
    shape = (-1, 1, 1) if np.ndim(images) == 3 else (1, -1, 1, 1)
    return ((images - np.reshape(mean, shape)) / np.reshape(std, shape)).astype(images.dtype)


def sample_augment(rng, pad=4, max_angle=15.0):
    rng = as_random_source(rng)
    flip = bool(rng.random() < 0.5)
    angle = float(rng.uniform(-max_angle, max_angle))
    offset = (int(rng.integers(0, 2 * pad + 1)), int(rng.integers(0, 2 * pad + 1)))
    return AugmentParams(flip, angle, offset)


def apply_augment(image, params, pad=4):
    """Flip, rotate (nearest neighbor) and crop from a zero-padded copy."""
    out = np.asarray(image)
    if params.flip:
        out = out[:, :, ::-1]
    if params.angle:
        out = ndimage.rotate(out, params.angle, axes=(1, 2), reshape=False, order=0, mode="constant")
    _, w, h = out.shape
    padded = np.pad(out, ((0, 0), (pad, pad), (pad, pad)))
    ox, oy = params.offset
    return np.ascontiguousarray(padded[:, ox:ox + w, oy:oy + h])


def augment(image, rng, mean=None, std=None):
    out = apply_augment(image, sample_augment(rng))
    if mean is not None:
        out = normalize(out, mean, std)
    return out


# -- corruptions ----------------------------------------------------------------

SEVERITY_LADDERS = {
    "gaussian": (0.04, 0.06, 0.08, 0.09, 0.10),
    "shot": (500, 250, 100, 75, 50),
    "impulse": (0.01, 0.02, 0.03, 0.05, 0.07),
    "defocus": (1, 2, 3, 4, 6),
}
CORRUPTIONS = tuple(SEVERITY_LADDERS)


def disk_kernel(radius):
    r = int(np.ceil(radius))
    x, y = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1), indexing="ij")
    kernel = (x**2 + y**2 <= radius**2).astype(np.float64)
    return kernel / kernel.sum()


def corrupt(image, kind, severity, rng, ladders=None):
    """Corrupt a ``[0, 1]`` image (``(c, w, h)`` or ``(w, h)``); severity 0 is a no-op."""
    ladders = SEVERITY_LADDERS if ladders is None else ladders
    if kind not in ladders:
        raise InvalidArgument(f"unknown corruption {kind!r}; expected one of {sorted(ladders)}")
    if severity not in range(0, len(ladders[kind]) + 1):
        raise InvalidArgument(f"severity must be in 0..{len(ladders[kind])}, got {severity}")
    image = np.asarray(image)
    if severity == 0:
        return image.copy()
    rng = as_random_source(rng)
    level = ladders[kind][severity - 1]
    x = image.astype(np.float64)
    if kind == "gaussian":
        out = x + rng.normal(scale=level, size=x.shape)
    elif kind == "shot":
        out = rng.poisson(x * level) / level
    elif kind == "impulse":
        hit = rng.random(x.shape) < level
        salt = rng.random(x.shape) < 0.5
        out = np.where(hit, salt.astype(np.float64), x)
    else:
        kernel = disk_kernel(level)
        if x.ndim == 3:
            out = np.stack([ndimage.convolve(ch, kernel, mode="reflect") for ch in x])
        else:
            out = ndimage.convolve(x, kernel, mode="reflect")
    return np.clip(out, 0.0, 1.0).astype(image.dtype)
