"""rankwarp: block-ranked sparse correspondence with differentiable top-k retrieval.

Feature grids are partitioned into blocks; each query block retrieves its
top-k exemplar blocks through an entropy-regularized transport solver with
exact unrolled gradients, dense attention runs inside the retrieved blocks
only, and the resulting row-stochastic correspondence warps the exemplar.
Semantic position encoding, confidence-weighted fusion, alignment metrics,
and a memory benchmark round out the pipeline.
"""

from .correspondence import (
    BlockFeatures,
    BlockPartition,
    BlockRanking,
    SparseCorrespondence,
    block_attention,
    dense_correspondence_baseline,
    entry_count,
    partition_blocks,
    rank_blocks,
    warp,
)
from .fusion import (
    ConfidenceMap,
    MultiChannelMap,
    confidence_map,
    fuse,
    fuse_multichannel,
)
from .metrics import BenchRecord, consistency_loss, cycle_loss, render_csv, run_bench
from .posenc import PositionChannels, append_position, semantic_pe, vanilla_pe
from .tensors import (
    FeatureGrid,
    LabelMask,
    TensorFormatError,
    ValidationError,
    l2_normalize_features,
    read_tensor,
    write_tensor,
)
from .topk import (
    SinkhornTape,
    SoftSelection,
    TopKProblem,
    TransportPlan,
    build_cost,
    finite_difference_gradient,
    hard_topk_oracle,
    sinkhorn_gamma_batch,
    sinkhorn_solve,
    soft_topk,
    soft_topk_backward,
)

__version__ = "0.1.0"
