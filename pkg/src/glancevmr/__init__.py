"""Glance-supervised video moment retrieval.

Train a cross-modal model from a single annotated timestamp per example
using Gaussian-weighted clip contrastive learning, then retrieve
query-described moments through attention-anchored proposal ranking.
"""

from .alignment import (
    GaussianConfig,
    build_loss_input,
    clip_weight,
    frame_index_scale,
    frame_weights,
    gls_nce_loss,
    qag_kl_loss,
    total_loss,
)
from .data import (
    Example,
    FullAnnotation,
    GlanceAnnotation,
    QueryTokens,
    SynthConfig,
    VideoFeatures,
    WordVectorTable,
    generate_synthetic,
    load_annotations,
    load_features,
    load_glance_dataset,
    load_word_vectors,
    sample_glance,
    tokenize_and_embed,
)
from .estimator import MomentRetriever
from .evaluation import EvalReport, evaluate_dataset, mean_iou, recall_at_iou, temporal_iou
from .inference import Proposal, ProposalConfig, RetrievalResult, retrieve
from .model import CrossModalNetwork, CrossModalOutput, ModelConfig, init_params, load_model, save_model
from .training import TrainConfig, TrainState, train

__version__ = "0.1.0"

__all__ = [
    "CrossModalNetwork",
    "CrossModalOutput",
    "EvalReport",
    "Example",
    "FullAnnotation",
    "GaussianConfig",
    "GlanceAnnotation",
    "ModelConfig",
    "MomentRetriever",
    "Proposal",
    "ProposalConfig",
    "QueryTokens",
    "RetrievalResult",
    "SynthConfig",
    "TrainConfig",
    "TrainState",
    "VideoFeatures",
    "WordVectorTable",
    "build_loss_input",
    "clip_weight",
    "evaluate_dataset",
    "frame_index_scale",
    "frame_weights",
    "generate_synthetic",
    "gls_nce_loss",
    "init_params",
    "load_annotations",
    "load_features",
    "load_glance_dataset",
    "load_model",
    "load_word_vectors",
    "mean_iou",
    "qag_kl_loss",
    "recall_at_iou",
    "retrieve",
    "sample_glance",
    "save_model",
    "temporal_iou",
    "tokenize_and_embed",
    "total_loss",
    "train",
]
