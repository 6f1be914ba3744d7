"""Shared containers: feature-map batches, the pixel lattice and seeded randomness.

Pixels are numbered row-major everywhere: pixel ``(x, y)`` of a ``w x h`` map
is node ``x * h + y``, matching ``numpy.reshape`` on the last two axes.
"""

import io
import zipfile
from dataclasses import dataclass, field

import numpy as np


class InvalidArgument(ValueError):
    pass


class StateError(RuntimeError):
    pass


@dataclass(frozen=True)
class FeatureMapBatch:
    """Activations indexed ``[sample, channel, x, y]``."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 4:
            raise InvalidArgument(f"expected a 4-axis array, got shape {values.shape}")
        if min(values.shape) < 1:
            raise InvalidArgument(f"every dimension must be >= 1, got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise InvalidArgument("feature maps must be finite")
        values = values.view()
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @property
    def shape(self):
        return self.values.shape

    @property
    def b(self):
        return self.values.shape[0]

    @property
    def t(self):
        return self.values.shape[1]

    @property
    def w(self):
        return self.values.shape[2]

    @property
    def h(self):
        return self.values.shape[3]


@dataclass(frozen=True)
class LatticeGraph:
    """4-connectivity grid graph stored as an edge list plus CSR neighbor index."""

    width: int
    height: int
    edges: np.ndarray  # (E, 2), u < v
    indptr: np.ndarray = field(repr=False)
    indices: np.ndarray = field(repr=False)

    @property
    def node_count(self):
        return self.width * self.height

    def neighbors(self, node):
        return self.indices[self.indptr[node]:self.indptr[node + 1]]

    def degree(self, node):
        return int(self.indptr[node + 1] - self.indptr[node])


def build_lattice_graph(width, height):
    if width < 1 or height < 1:
        raise InvalidArgument(f"lattice dimensions must be >= 1, got {width}x{height}")
    ids = np.arange(width * height).reshape(width, height)
    # neighbors along y (same x) then along x
    along_y = np.stack([ids[:, :-1].ravel(), ids[:, 1:].ravel()], axis=1)
    along_x = np.stack([ids[:-1, :].ravel(), ids[1:, :].ravel()], axis=1)
    edges = np.concatenate([along_y, along_x]).astype(np.int64)
    order = np.lexsort((edges[:, 1], edges[:, 0]))
    edges = edges[order]

    src = np.concatenate([edges[:, 0], edges[:, 1]])
    dst = np.concatenate([edges[:, 1], edges[:, 0]])
    order = np.lexsort((dst, src))
    src, dst = src[order], dst[order]
    indptr = np.zeros(width * height + 1, dtype=np.int64)
    np.add.at(indptr, src + 1, 1)
    indptr = np.cumsum(indptr)

    for arr in (edges, indptr, dst):
        arr.flags.writeable = False
    return LatticeGraph(width, height, edges, indptr, dst)


def flatten_channel(batch, channel):
    """Return channel ``channel`` as a ``(b, w*h)`` matrix, one sample per row."""
    values = batch.values if isinstance(batch, FeatureMapBatch) else np.asarray(batch)
    if not 0 <= channel < values.shape[1]:
        raise IndexError(f"channel {channel} out of range for {values.shape[1]} channels")
    b, _, w, h = values.shape
    return values[:, channel].reshape(b, w * h).copy()


def unflatten_channel(matrix, width, height):
    matrix = np.asarray(matrix)
    if matrix.ndim != 2 or matrix.shape[1] != width * height:
        raise InvalidArgument(f"cannot reshape {matrix.shape} to {width}x{height} maps")
    return matrix.reshape(matrix.shape[0], width, height)


class RandomSource:
    """Seeded PCG64 stream identified by ``(seed, stream)``.

    Child streams are derived from the parent's identity, never from its
    state, so handing one to a subtask does not perturb the parent.
    """

    def __init__(self, seed, stream=0):
        self.seed = int(seed)
        self.stream = stream if isinstance(stream, tuple) else (int(stream),)
        seq = np.random.SeedSequence(self.seed & (2**64 - 1), spawn_key=self.stream)
        self.generator = np.random.Generator(np.random.PCG64(seq))

    def child(self, stream):
        return RandomSource(self.seed, self.stream + (int(stream),))

    def __repr__(self):
        return f"RandomSource(seed={self.seed}, stream={self.stream})"

    # thin delegation keeps call sites short
    def random(self, size=None):
        return self.generator.random(size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size=size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def choice(self, a, size=None, replace=True):
        return self.generator.choice(a, size=size, replace=replace)

    def permutation(self, x):
        return self.generator.permutation(x)

    def poisson(self, lam, size=None):
        return self.generator.poisson(lam, size)


def as_random_source(rng):
    if isinstance(rng, RandomSource):
        return rng
    if rng is None:
        return RandomSource(0)
    return RandomSource(int(rng))


def npz_bytes(arrays):
    """An ``.npz`` archive with fixed entry timestamps, so equal arrays give equal bytes."""
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        for name, value in arrays.items():
            entry = io.BytesIO()
            np.lib.format.write_array(entry, np.asanyarray(value), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0)), entry.getvalue())
    return buf.getvalue()
