"""Multimodal news recommendation: two-stream news encoding (title tokens +
image region features) fused by co-attention, candidate-aware user modeling,
and negative-sampling click-ranking — built on an in-package tape-based
autodiff engine over numpy, with a synthetic planted-signal benchmark,
ranking metrics, an ablation driver, and a CLI.
"""

from . import autodiff
from .ablation import AblationReport, ablate
from .autodiff import (
    AutodiffError,
    EmptyAttentionError,
    GradCheckReport,
    Parameter,
    ShapeError,
    Tape,
    Tensor,
    VocabularyError,
    backward,
    grad_check,
    no_grad,
)
from .config import ConfigError, ExperimentConfig
from .data import (
    DataFormatError,
    ImpressionSample,
    NewsBatch,
    NewsRecord,
    NewsTable,
    Vocabulary,
    build_vocab,
    load_behaviors,
    load_news,
    read_roi_features,
    recent_history,
    save_behaviors,
    tokenize,
    write_roi_features,
)
from .encoder import EncoderConfig, NewsEncoder, NewsEncoding
from .estimator import MMRecRanker
from .metrics import (
    METRIC_NAMES,
    MetricReport,
    aggregate_runs,
    auc,
    evaluate,
    evaluate_model,
    format_table,
    mrr,
    ndcg_at_k,
)
from .model import VARIANTS, MMRecModel
from .scoring import (
    CrossmodalWeights,
    UserState,
    click_score,
    crossmodal_weights,
    rank_candidates,
    score_impression,
    user_embedding,
)
from .synthetic import SyntheticConfig, SyntheticData, generate_synthetic
from .training import (
    Adam,
    CheckpointError,
    SampleBuild,
    TrainConfig,
    TrainResult,
    TrainingError,
    TrainingSample,
    build_samples,
    load_checkpoint,
    nce_loss,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "autodiff",
    # autodiff core
    "Tensor",
    "Parameter",
    "Tape",
    "backward",
    "no_grad",
    "grad_check",
    "GradCheckReport",
    "AutodiffError",
    "ShapeError",
    "EmptyAttentionError",
    "VocabularyError",
    # data
    "DataFormatError",
    "ImpressionSample",
    "NewsBatch",
    "NewsRecord",
    "NewsTable",
    "Vocabulary",
    "build_vocab",
    "load_behaviors",
    "load_news",
    "read_roi_features",
    "recent_history",
    "save_behaviors",
    "tokenize",
    "write_roi_features",
    # synthetic benchmark
    "SyntheticConfig",
    "SyntheticData",
    "generate_synthetic",
    # encoder & scoring
    "EncoderConfig",
    "NewsEncoder",
    "NewsEncoding",
    "UserState",
    "CrossmodalWeights",
    "crossmodal_weights",
    "user_embedding",
    "click_score",
    "score_impression",
    "rank_candidates",
    # model & variants
    "MMRecModel",
    "VARIANTS",
    # training
    "TrainConfig",
    "TrainingSample",
    "SampleBuild",
    "TrainingError",
    "CheckpointError",
    "build_samples",
    "nce_loss",
    "Adam",
    "train",
    "TrainResult",
    "save_checkpoint",
    "load_checkpoint",
    # metrics
    "METRIC_NAMES",
    "auc",
    "mrr",
    "ndcg_at_k",
    "evaluate_model",
    "evaluate",
    "MetricReport",
    "aggregate_runs",
    "format_table",
    # experiment plumbing
    "ExperimentConfig",
    "ConfigError",
    "MMRecRanker",
    "ablate",
    "AblationReport",
]
