"""Linear-complexity token mixing with row-stochastic normalization.

The package centers on one replacement for quadratic self-attention:
Y = f'(X) g'(X)^T X evaluated left to right, with feature maps kept strictly
positive so the implicit mixing matrix can be normalized to unit row sums.
Around it sit the causal scan ancestors it generalizes, brute-force dense
oracles for every claimed equivalence, a toy distillation harness that
transfers a trained quadratic mixer into the linear one, a sharded evaluator
whose exchange payload is independent of token count, and a scaling
benchmark.
"""

from .exceptions import (
    ConfigError,
    DegenerateFeatureError,
    DegenerateGateError,
    EmptyShardError,
    FormatError,
    LinmixError,
    ShapeError,
    StepError,
    TapError,
    TrainingError,
)
from .ssm import (
    GateSet,
    GateProjection,
    bidirectional_scan,
    causal_scan,
    init_gate_projection,
    make_gates,
    normalized_causal_scan,
)
from .linattn import (
    LinearAttentionBlockParams,
    block_from_teacher,
    dense_effective_mask,
    featuremap_forward,
    init_block_params,
    linear_attention,
    linear_attention_block,
    normalized_linear_attention,
)
from .oracle import (
    cumprod_causal_mask,
    masked_gated_attention_dense,
    softmax_attention,
    vector_gated_attention_dense,
)
from .shard import (
    ShardSummary,
    decode_summary,
    encode_summary,
    merge_summaries,
    partial_aggregate,
    payload_size,
    sharded_block_forward,
)
from .serialization import load_arrays, save_arrays
from .layers import DenoiserNet, student_from_teacher, teacher_denoiser
from .distill import (
    NoiseSchedule,
    composite_loss,
    cross_resolution_drift,
    finite_difference_check,
    lift_tokens,
    make_toy_dataset,
    train_distill,
    train_teacher,
)
from .bench import allocation_bytes, bench_run
from .estimators import (
    BidirectionalSSM,
    CausalSSM,
    DenoisingDistiller,
    GeneralizedLinearAttention,
    SoftmaxAttention,
)

__version__ = "0.1.0"

__all__ = [
    "BidirectionalSSM",
    "CausalSSM",
    "ConfigError",
    "DegenerateFeatureError",
    "DegenerateGateError",
    "DenoiserNet",
    "DenoisingDistiller",
    "EmptyShardError",
    "FormatError",
    "GateProjection",
    "GateSet",
    "GeneralizedLinearAttention",
    "LinearAttentionBlockParams",
    "LinmixError",
    "NoiseSchedule",
    "ShapeError",
    "ShardSummary",
    "SoftmaxAttention",
    "StepError",
    "TapError",
    "TrainingError",
    "allocation_bytes",
    "bench_run",
    "bidirectional_scan",
    "block_from_teacher",
    "causal_scan",
    "composite_loss",
    "cross_resolution_drift",
    "cumprod_causal_mask",
    "decode_summary",
    "dense_effective_mask",
    "encode_summary",
    "featuremap_forward",
    "finite_difference_check",
    "init_block_params",
    "init_gate_projection",
    "lift_tokens",
    "linear_attention",
    "linear_attention_block",
    "load_arrays",
    "make_gates",
    "make_toy_dataset",
    "masked_gated_attention_dense",
    "merge_summaries",
    "normalized_causal_scan",
    "normalized_linear_attention",
    "partial_aggregate",
    "payload_size",
    "save_arrays",
    "sharded_block_forward",
    "softmax_attention",
    "student_from_teacher",
    "teacher_denoiser",
    "train_distill",
    "train_teacher",
    "vector_gated_attention_dense",
]
