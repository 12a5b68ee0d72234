"""Incremental generalized category discovery on embedding vectors."""

from .core import (
    CategoryRegistry,
    ConfigurationError,
    DataError,
    EmbeddingMatrix,
    IgcdError,
    RunConfig,
    StageDataset,
    StateError,
    register_categories,
)
from .ingest import SyntheticSpec, generate_benchmark
from .neighbors import NeighborGraph, build_knn_graph, compute_density
from .discovery import PeakSet, dedup_peaks, estimate_category_count, find_density_peaks, pseudo_label_peaks
from .snn import SupportSet, extend_support, select_support_labeled, snn_predict, snn_predict_batch
from .losses import Batch, Projector, classifier_losses, selfcon_loss, sgd_step, supcon_loss, total_loss
from .evaluate import StageReport, clustering_accuracy, final_discovery, max_forgetting, stage_report
from .engine import EngineState, ReplayBuffer, advance_stage_igcd_l, run_benchmark, run_stage, train_initial

__version__ = "0.1.0"
