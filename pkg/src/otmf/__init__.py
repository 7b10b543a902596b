"""Continual model merging with optimal-transport-trained task-vector masks."""

__version__ = "0.1.0"

from .baselines import (
    BaselineConfig,
    continual_swa,
    continual_task_arithmetic,
    continual_ties,
)
from .fusion import (
    FusionConfig,
    MergeState,
    ResidencyTracker,
    continual_merge,
    head_finetune,
    masked_fuse,
    reconstruct,
)
from .io import (
    load_batch,
    load_checkpoint,
    load_matrix,
    load_report,
    save_batch,
    save_checkpoint,
    save_features,
    save_matrix,
    save_report,
)
from .metrics import (
    AccuracyMatrix,
    ShiftReport,
    accuracy,
    bwt,
    l1_shift,
    sinkhorn_shift,
    total_shift,
)
from .models import Batch, ModelSpec, ToyModel, forward_features, forward_logits
from .params import MaskVector, ParamVector, pv_add, pv_hadamard, pv_scale, pv_sub
from .sinkhorn import (
    CostMatrix,
    Marginals,
    SinkhornConfig,
    TransportPlan,
    exact_ot_oracle,
    pairwise_cost,
    sinkhorn_distance,
    sinkhorn_grad_features,
    sinkhorn_plan,
)
from .taskgen import TaskStreamSpec, generate_stream, subsample_labeled
