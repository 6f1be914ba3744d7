"""DropCluster: data-driven structured dropout for convolutional feature maps."""

from .core import (
    FeatureMapBatch,
    InvalidArgument,
    LatticeGraph,
    RandomSource,
    StateError,
    build_lattice_graph,
    flatten_channel,
    unflatten_channel,
)
from .regularizers import (
    ClusterState,
    DropMask,
    Mode,
    RegularizerConfig,
    apply_mask,
    build_mask,
    compute_clusters,
    dropblock_mask,
    dropout_mask,
    mask_gradient,
    schedule_should_recompute,
    spatial_dropout_mask,
)
from .rena import grouping_matrix, rena_fit
from .tendency import channel_tendency_report, hopkins, spatial_hopkins

__version__ = "0.1.0"
