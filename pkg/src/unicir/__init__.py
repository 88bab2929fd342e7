"""Composed image retrieval via raw-data query unification.

A reference image and a modification text are merged before encoding: the
textual route concatenates the image caption with the modification, the
visual route writes target keywords onto the image. A dual encoder maps both
unified queries and candidate images into one space, a learnable linear
fusion combines them per sample, and retrieval ranks candidates by cosine
similarity.
"""

from .datamodel import (
    CandidateSet,
    Caption,
    EvalProtocol,
    KeywordList,
    TripletRecord,
    build_candidate_set,
    load_manifest,
    save_manifest,
)
from .encoders import Embedding, ToyEncoderBackend, create_backend, encode_image_batch, encode_text_batch
from .errors import UnicirError
from .evaluation import (
    EmbeddingIndex,
    MetricsReport,
    build_index,
    evaluate,
    rank,
    recall_at_k,
    recall_subset_at_k,
)
from .fusion import (
    FusedQuery,
    FusionParams,
    LossConfig,
    batch_classification_loss,
    compute_lambda,
    fuse,
)
from .trainer import Checkpoint, TrainConfig, load_checkpoint, save_checkpoint, train
from .unify_text import UnifiedTextualQuery, build_unified_textual_query
from .unify_vision import (
    RenderStyle,
    UnifiedVisualQuery,
    extract_target_keywords,
    render_keywords_on_image,
    rule_based_keywords,
)

__version__ = "0.1.0"

__all__ = [
    "CandidateSet",
    "Caption",
    "Checkpoint",
    "Embedding",
    "EmbeddingIndex",
    "EvalProtocol",
    "FusedQuery",
    "FusionParams",
    "KeywordList",
    "LossConfig",
    "MetricsReport",
    "RenderStyle",
    "ToyEncoderBackend",
    "TrainConfig",
    "TripletRecord",
    "UnicirError",
    "UnifiedTextualQuery",
    "UnifiedVisualQuery",
    "batch_classification_loss",
    "build_candidate_set",
    "build_index",
    "build_unified_textual_query",
    "compute_lambda",
    "create_backend",
    "encode_image_batch",
    "encode_text_batch",
    "evaluate",
    "extract_target_keywords",
    "fuse",
    "load_checkpoint",
    "load_manifest",
    "rank",
    "recall_at_k",
    "recall_subset_at_k",
    "render_keywords_on_image",
    "rule_based_keywords",
    "save_checkpoint",
    "save_manifest",
    "train",
]
