"""Augmented linear attention in numpy.

Three branches share one set of Q/K/V projections: softmax attention inside
fixed-size groups, linear attention over all earlier groups through a running
KV state, and a causal depthwise convolution over the values. The package
also covers streaming decode, tree-shaped speculative decoding, and a small
trainable transformer.
"""

from .augmented import (
    augmented_attention_backward,
    augmented_attention_forward,
    grouped_global_la_backward,
    grouped_global_la_forward,
    local_group_attention_backward,
    local_group_attention_forward,
    masked_dwconv_backward,
    masked_dwconv_forward,
    multi_head_augmented,
    multi_head_augmented_backward,
    multi_head_augmented_forward,
)
from .decode import DecodeState, decode_step, fold_group, init_state, prefill
from .errors import (
    ConfigError,
    ConsistencyError,
    ContractError,
    DimensionError,
    InputError,
    NonFiniteError,
    StructureError,
    TrainingError,
)
from .features import feature_map, feature_map_grad
from .model import (
    ModelConfig,
    ToyModel,
    generate_greedy,
    generate_recompute,
    generate_speculative,
    init_model,
    model_prefill,
    parse_config_text,
)
from .reference import AttnConfig, causal_linear_attention_ref, softmax_attention_ref
from .specdecode import (
    SpecTree,
    VerifyResult,
    commit_path,
    decode_paths_independently,
    draft_stub,
    parse_tree_spec,
    reference_tree_64,
    tree_attention_forward,
    tree_mask,
    unfold_conv_rows,
    verify_greedy,
)
from .train import make_task, train_synthetic

__version__ = "0.1.0"
