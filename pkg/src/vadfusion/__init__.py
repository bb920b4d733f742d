"""Voice activity detection from upper-body video via vision-language fusion.

Ten-frame upper-body segments are encoded as 10x512 visual token matrices
(1 whole-crop + 9 patch embeddings, averaged over time), the segment's
central frame is captioned by a vision-language client, and a fusion
classifier (dense or self-attention) decides speaking vs not speaking.
Evaluation follows the leave-one-person-out and cross-dataset protocols
with per-person F1 reporting.
"""

__version__ = "0.1.0"

from .data import (
    AnnotationRecord,
    AnnotationTable,
    AugmentConfig,
    Batch,
    FoldSpec,
    VideoSegment,
    augment,
    build_segments,
    load_annotations,
    make_lopo_folds,
    sample_balanced_batch,
)
from .encoders import (
    EncoderBackend,
    MeanPixelBackend,
    MockEncoderBackend,
    TinyLinearBackend,
    ZeroShotScorer,
    encode_frame,
    encode_segment,
    encode_text,
    get_backend,
    partition_patches,
    replicate_text,
    zero_shot_score,
)
from .captioning import (
    Caption,
    CaptionCache,
    MockVlmClient,
    PromptSpec,
    caption_similarity_stats,
    generate_caption,
    select_central_frame,
    standalone_vlm_predict,
    to_fixed_caption,
)
from .estimators import MlpFusionClassifier, TransformerFusionClassifier
from .evaluation import EvalReport, PredictionRecord, f1_score, render_report, run_cross_dataset, run_lopo
from .fusion import bce_with_logits, fuse_for_mlp, fuse_for_transformer, self_attention
from .training import Checkpoint, FeatureStores, TrainConfig, resume, sweep, train_fold

__all__ = [
    "__version__",
    "AnnotationRecord", "AnnotationTable", "AugmentConfig", "Batch", "FoldSpec",
    "VideoSegment", "augment", "build_segments", "load_annotations",
    "make_lopo_folds", "sample_balanced_batch",
    "EncoderBackend", "MeanPixelBackend", "MockEncoderBackend", "TinyLinearBackend",
    "ZeroShotScorer", "encode_frame", "encode_segment", "encode_text", "get_backend",
    "partition_patches", "replicate_text", "zero_shot_score",
    "Caption", "CaptionCache", "MockVlmClient", "PromptSpec",
    "caption_similarity_stats", "generate_caption", "select_central_frame",
    "standalone_vlm_predict", "to_fixed_caption",
    "MlpFusionClassifier", "TransformerFusionClassifier",
    "EvalReport", "PredictionRecord", "f1_score", "render_report",
    "run_cross_dataset", "run_lopo",
    "bce_with_logits", "fuse_for_mlp", "fuse_for_transformer", "self_attention",
    "Checkpoint", "FeatureStores", "TrainConfig", "resume", "sweep", "train_fold",
]
