"""Coarse classification and fine re-ranking (CCFR) as numerical components."""

from .evaluation import EvalReport, SweepGrid, accuracy, compare_modes, sweep
from .features import FeatureBundle, FusionWeights, ScaleWeights, assemble_embedding, fuse_scale, pad_missing_regions
from .geometry import AnchorSpec, Box, generate_anchors, iou, scale_separated_nms
from .hierarchy import Hierarchy, build_hierarchy, class_means, super_label
from .losses import (
    LossResult,
    TripletInputs,
    check_gradient,
    cosine_similarity,
    cross_entropy,
    mine_triplets,
    multi_level_loss,
    softmax,
    total_loss,
    triplet_loss,
)
from .rerank import (
    PredictionRecord,
    RerankConfig,
    RerankOutcome,
    class_similarity_scores,
    rerank_batch,
    rerank_query,
)
from .retrieval import Database, EmbeddingRecord, SearchResult, build_database, filter_by_threshold, query_topm

__version__ = "0.1.0"
