"""DropCluster and the baseline structured-dropout masks.

All masks are ``(t, w, h)`` arrays shared by every sample of a mini-batch and
carry the renormalization factor ``count(M) / count_ones(M)``.
"""

import io
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction

import numpy as np

from .core import (
    FeatureMapBatch,
    InvalidArgument,
    StateError,
    as_random_source,
    build_lattice_graph,
    flatten_channel,
    npz_bytes,
)
from .rena import rena_fit


class DegenerateMask(ValueError):
    pass


class Mode(str, Enum):
    TRAINING = "training"
    INFERENCE = "inference"


@dataclass
class ClusterState:
    """Cluster membership ``T[channel, cluster, x, y]`` plus unstructured channels."""

    T: np.ndarray
    unstructured: frozenset
    n_clusters: int
    epoch_computed: int = 0

    @property
    def shape(self):
        return self.T.shape

    @property
    def t(self):
        return self.T.shape[0]

    def labels(self, channel):
        """Cluster id per pixel as a ``(w, h)`` map, ``-1`` for unstructured channels."""
        if channel in self.unstructured:
            return np.full(self.T.shape[2:], -1, dtype=np.int64)
        return np.argmax(self.T[channel], axis=0)

    def check(self):
        for i in range(self.t):
            cover = self.T[i].sum(axis=0)
            if i in self.unstructured:
                if cover.any():
                    raise StateError(f"unstructured channel {i} has cluster members")
            elif not np.all(cover == 1):
                raise StateError(f"channel {i} clusters do not partition the map")

    def to_bytes(self):
        return npz_bytes({
            "header": np.array([*self.T.shape[:1], self.n_clusters, *self.T.shape[2:], self.epoch_computed]),
            "T": self.T.astype(np.uint8),
            "unstructured": np.array(sorted(self.unstructured), dtype=np.int64),
        })

    @classmethod
    def from_arrays(cls, header, T, unstructured):
        t, n, w, h, epoch = (int(v) for v in header)
        T = np.asarray(T, dtype=np.uint8)
        if T.shape != (t, n, w, h):
            raise StateError(f"cluster tensor {T.shape} does not match header {(t, n, w, h)}")
        return cls(T, frozenset(int(i) for i in unstructured), n, epoch)

    @classmethod
    def from_bytes(cls, data):
        with np.load(io.BytesIO(data)) as z:
            return cls.from_arrays(z["header"], z["T"], z["unstructured"])

    def save(self, path):
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


@dataclass(frozen=True)
class DropMask:
    """Binary mask ``M`` (t, w, h) and its renormalization.

    ``ratio`` is the exact rational ``count / count_ones``; ``scale`` is its
    correctly rounded float, the value actually multiplied in.
    """

    M: np.ndarray
    scale: float
    ratio: Fraction = None

    def __post_init__(self):
        if self.ratio is None:
            object.__setattr__(self, "ratio", Fraction(self.scale))

    @classmethod
    def from_mask(cls, M, allow_empty=True):
        ones = int(np.count_nonzero(M))
        if ones == 0:
            if not allow_empty:
                raise DegenerateMask("mask has no surviving elements")
            return cls(M, 1.0)
        ratio = Fraction(M.size, ones)
        return cls(M, float(ratio), ratio)


@dataclass(frozen=True)
class RegularizerConfig:
    p: float = 0.1
    n: int = 15
    s: int = 50
    mode: Mode = Mode.TRAINING
    normalize_inference: bool = True
    max_iter: int = 1000

    def __post_init__(self):
        if not 0 <= self.p < 1:
            raise InvalidArgument(f"p must be in [0, 1), got {self.p}")
        if self.n < 1 or self.s < 1:
            raise InvalidArgument("n and s must be >= 1")


def compute_clusters(A, n, max_iter=1000, epoch=0, halving=True):
    """Fit ReNA per channel; channels that cannot reach ``n`` clusters go to the unstructured set.

    With ``halving`` every lattice channel needs the same number of rounds, so
    ``max_iter`` sends either all channels or none to the unstructured set.
    """
    if not isinstance(A, FeatureMapBatch):
        A = FeatureMapBatch(A)
    if not 1 <= n <= A.w * A.h:
        raise InvalidArgument(f"n must lie in [1, {A.w * A.h}], got {n}")
    graph = build_lattice_graph(A.w, A.h)
    T = np.zeros((A.t, n, A.w, A.h), dtype=np.uint8)
    unstructured = set()
    for i in range(A.t):
        outcome = rena_fit(flatten_channel(A, i), graph, n, max_iter=max_iter, halving=halving)
        if not outcome.converged:
            unstructured.add(i)
            continue
        labels = outcome.assignment.labels.reshape(A.w, A.h)
        T[i] = labels[None] == np.arange(n)[:, None, None]
    return ClusterState(T, frozenset(unstructured), n, epoch)


def build_mask(state, cfg, rng):
    if cfg.n != state.n_clusters:
        raise InvalidArgument(f"config n={cfg.n} but clusters were computed with n={state.n_clusters}")
    rng = as_random_source(rng)
    t, n, w, h = state.T.shape
    M = np.ones((t, w, h), dtype=np.uint8)
    n_drop = int(np.floor(cfg.p * n))
    for i in range(t):
        if i in state.unstructured:
            M[i] = 0
        elif cfg.mode == Mode.TRAINING and n_drop:
            dropped = rng.choice(n, size=n_drop, replace=False)
            M[i] *= 1 - state.T[i, dropped].max(axis=0)
    mask = DropMask.from_mask(M, allow_empty=False)
    if cfg.mode == Mode.INFERENCE and not cfg.normalize_inference:
        return DropMask(M, 1.0)
    return mask


def _check_shape(A, mask):
    values = A.values if isinstance(A, FeatureMapBatch) else np.asarray(A)
    if values.ndim != 4 or values.shape[1:] != mask.M.shape:
        raise InvalidArgument(f"mask {mask.M.shape} does not fit activations {values.shape}")
    return values


def apply_mask(A, mask):
    values = _check_shape(A, mask)
    out = values * (mask.M * mask.scale).astype(values.dtype)[None]
    return FeatureMapBatch(out) if isinstance(A, FeatureMapBatch) else out


def mask_gradient(upstream, mask):
    # the mask is a constant, so the backward pass is the same linear map
    return apply_mask(upstream, mask)


def schedule_should_recompute(epoch, s):
    if epoch < 0:
        raise InvalidArgument(f"epoch must be >= 0, got {epoch}")
    return epoch >= s and epoch % s == 0


# -- baselines ----------------------------------------------------------------

def _check_p(p):
    if not 0 <= p < 1:
        raise InvalidArgument(f"p must be in [0, 1), got {p}")


def dropout_mask(shape, p, rng):
    _check_p(p)
    rng = as_random_source(rng)
    M = (rng.random(shape) >= p).astype(np.uint8)
    return DropMask.from_mask(M)


def spatial_dropout_mask(shape, p, rng):
    """Whole-channel dropout; ``shape`` is ``(t, w, h)`` or just ``t``."""
    _check_p(p)
    rng = as_random_source(rng)
    shape = (shape, 1, 1) if np.ndim(shape) == 0 else tuple(shape)
    keep = (rng.random(shape[0]) >= p).astype(np.uint8)
    M = np.broadcast_to(keep[:, None, None], shape).copy()
    return DropMask.from_mask(M)


def dropblock_gamma(p, w, h, block_size):
    return p * (w * h) / (block_size**2 * (w - block_size + 1) * (h - block_size + 1))


def dropblock_mask(shape, p, block_size, rng):
    """Zero ``block_size``-square regions around Bernoulli seeds in the valid interior."""
    _check_p(p)
    t, w, h = shape
    if block_size < 1 or block_size % 2 == 0:
        raise InvalidArgument(f"block_size must be odd and positive, got {block_size}")
    if block_size > min(w, h):
        raise InvalidArgument(f"block_size {block_size} exceeds the {w}x{h} feature map")
    rng = as_random_source(rng)
    gamma = dropblock_gamma(p, w, h, block_size)
    valid = (t, w - block_size + 1, h - block_size + 1)
    seeds = rng.random(valid) < gamma
    dropped = np.zeros((t, w, h), dtype=bool)
    # a seed at valid position (i, j) covers rows i..i+b-1, cols j..j+b-1
    for di in range(block_size):
        for dj in range(block_size):
            dropped[:, di:di + valid[1], dj:dj + valid[2]] |= seeds
    return DropMask.from_mask((~dropped).astype(np.uint8))


# -- layer-facing regularizers -------------------------------------------------

class Regularizer:
    """Produces the mask for one mini-batch, or ``None`` when inactive."""

    kind = "none"

    def mask(self, shape, mode, epoch):
        return None


@dataclass
class DropoutRegularizer(Regularizer):
    p: float
    rng: object
    kind = "dropout"

    def mask(self, shape, mode, epoch):
        if mode != Mode.TRAINING or self.p == 0:
            return None
        return dropout_mask(shape, self.p, self.rng)


@dataclass
class SpatialDropoutRegularizer(Regularizer):
    p: float
    rng: object
    kind = "spatialdropout"

    def mask(self, shape, mode, epoch):
        if mode != Mode.TRAINING or self.p == 0:
            return None
        return spatial_dropout_mask(shape, self.p, self.rng)


@dataclass
class DropBlockRegularizer(Regularizer):
    p: float
    block_size: int
    rng: object
    kind = "dropblock"

    def mask(self, shape, mode, epoch):
        if mode != Mode.TRAINING or self.p == 0:
            return None
        return dropblock_mask(shape, self.p, self.block_size, self.rng)


@dataclass
class DropClusterRegularizer(Regularizer):
    cfg: RegularizerConfig
    rng: object
    state: ClusterState = field(default=None)
    kind = "dropcluster"

    def mask(self, shape, mode, epoch):
        if epoch < self.cfg.s:
            return None
        if self.state is None:
            raise StateError(f"DropCluster needs cluster state from epoch {self.cfg.s} on (epoch {epoch})")
        if self.state.T.shape[2:] != tuple(shape[1:]) or self.state.t != shape[0]:
            raise InvalidArgument(f"cluster state {self.state.T.shape} does not fit maps {shape}")
        cfg = RegularizerConfig(
            self.cfg.p, self.cfg.n, self.cfg.s, Mode(mode), self.cfg.normalize_inference, self.cfg.max_iter
        )
        return build_mask(self.state, cfg, self.rng)

    def update(self, activations, epoch):
        self.state = compute_clusters(activations, self.cfg.n, self.cfg.max_iter, epoch)
        return self.state
