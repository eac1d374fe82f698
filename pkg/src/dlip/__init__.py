"""Desk-scale dual-encoder contrastive training on multi-granularity captions.

Pure NumPy: forward passes, analytic gradients, optimizer and evaluation are
all hand-rolled and finite-difference checked. See the CLI (`dlip --help`)
for the end-to-end workflow.
"""

from .captions import (
    CaptionRecord,
    SubCaptionBatch,
    SubCaptionSet,
    build_batch,
    build_subcaption_set,
    load_dataset,
    sample_subcaptions,
    save_dataset,
    split_sentences,
)
from .encoders import (
    DualEncoder,
    EncoderConfig,
    ParamSet,
    Tokenizer,
    l2_normalize,
    load_image_tensor,
    load_weights,
    param_count_formula,
    save_image_tensor,
    save_weights,
)
from .errors import (
    CorruptCheckpoint,
    DataError,
    DegenerateVector,
    DimensionMismatch,
    DlipError,
    EmptyGallery,
    EmptySet,
    MalformedRecord,
    NoClasses,
    NonFiniteInput,
    NonFiniteLoss,
    NumericError,
    ShapeError,
    ShapeMismatch,
    UnknownConfigKey,
    UnknownSource,
    VersionMismatch,
)
from .evaluation import (
    PROMPT_TEMPLATES,
    RECALL_KS,
    evaluate_corpus,
    export_attention,
    retrieval,
    write_eval_report,
    zeroshot_classify,
)
from .losses import (
    AttentionGrouping,
    GradCheckReport,
    LossOutput,
    attention_grouping,
    clip_infonce,
    finite_diff_check,
    grouping_loss,
    mpcl,
    run_gradient_checks,
    total_loss,
)
from .synthetic import COLOR_TABLE, GenConfig, generate_corpus
from .trainer import (
    RunState,
    TrainConfig,
    full_chain_check,
    init_run_state,
    load_checkpoint,
    load_config,
    lr_at,
    parse_config_text,
    run_training,
    save_checkpoint,
    train_step,
)

__version__ = "0.1.0"

__all__ = [
    "AttentionGrouping",
    "COLOR_TABLE",
    "CaptionRecord",
    "CorruptCheckpoint",
    "DataError",
    "DegenerateVector",
    "DimensionMismatch",
    "DlipError",
    "DualEncoder",
    "EmptyGallery",
    "EmptySet",
    "EncoderConfig",
    "GenConfig",
    "GradCheckReport",
    "LossOutput",
    "MalformedRecord",
    "NoClasses",
    "NonFiniteInput",
    "NonFiniteLoss",
    "NumericError",
    "PROMPT_TEMPLATES",
    "ParamSet",
    "RECALL_KS",
    "RunState",
    "ShapeError",
    "ShapeMismatch",
    "SubCaptionBatch",
    "SubCaptionSet",
    "Tokenizer",
    "TrainConfig",
    "UnknownConfigKey",
    "UnknownSource",
    "VersionMismatch",
    "attention_grouping",
    "build_batch",
    "build_subcaption_set",
    "clip_infonce",
    "evaluate_corpus",
    "export_attention",
    "finite_diff_check",
    "full_chain_check",
    "generate_corpus",
    "grouping_loss",
    "init_run_state",
    "l2_normalize",
    "load_checkpoint",
    "load_config",
    "load_dataset",
    "load_image_tensor",
    "load_weights",
    "lr_at",
    "mpcl",
    "param_count_formula",
    "parse_config_text",
    "retrieval",
    "run_gradient_checks",
    "run_training",
    "sample_subcaptions",
    "save_checkpoint",
    "save_dataset",
    "save_image_tensor",
    "save_weights",
    "split_sentences",
    "total_loss",
    "train_step",
    "zeroshot_classify",
]
