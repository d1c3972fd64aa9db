"""Prompt-enhanced view aggregation for multi-view shape recognition."""

from ._core import (
    DEFAULT_LOGIT_SCALE,
    DataError,
    DegenerateInputError,
    DimensionError,
    FormatError,
    NumericError,
    aggregate_average,
    aggregate_peva,
    aggregation_weights,
    discriminative_scores,
    encode,
    evaluate,
    gradient_suite,
    load_dataset,
    predict,
    read_container,
    run_cli,
    similarity_matrix,
    write_prompts,
    write_synth,
    write_views,
    zero_shot_logits,
)

__all__ = [
    "DEFAULT_LOGIT_SCALE",
    "DataError",
    "DegenerateInputError",
    "DimensionError",
    "FormatError",
    "NumericError",
    "aggregate_average",
    "aggregate_peva",
    "aggregation_weights",
    "discriminative_scores",
    "encode",
    "evaluate",
    "gradient_suite",
    "load_dataset",
    "predict",
    "read_container",
    "run_cli",
    "similarity_matrix",
    "write_prompts",
    "write_synth",
    "write_views",
    "zero_shot_logits",
]
