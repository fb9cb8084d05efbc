"""Contrastively supervised cross-modal attention with attention-correctness metrics."""

from .attention import AttendedInfo, AttentionConfig, AttentionMap, FragmentSet, attend, pair_similarity, score_matrix
from .losses import LossBundle, LossConfig, ccr_loss, ccs_loss, combined_loss, ranking_loss, sample_swap
from .metrics import AlignmentAnnotation, AttentionReport, MetricThresholds, RetrievalReport, recall_at_k, rsum
from .synthworld import Dataset, WorldConfig, generate
from .trainer import Model, TrainConfig, evaluate, train

__version__ = "0.1.0"
