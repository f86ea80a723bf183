"""Lidar and spectral point cloud fusion with a dual-branch point transformer."""

from hyperpoint.settings import AppSettings, RunConfig, settings
from hyperpoint.models import (
    PointCloud, RasterGrid, GridSpec, GroundClassMap, Block,
    AttentionConfig, FusionConfig, ModelConfig, TrainConfig,
    ConfusionMatrix, Scores, CoverageRow, EpochRecord, TrainingResult,
    AttentionKind, RelationalKind, Neighborhood, FusionKind, ClassicFusion,
    Backbone, InputFeatures, SkipSource, CloudFormat,
)
from hyperpoint.numcore import Tensor, GradGraph, OpCounter, backward, grad_check, counting
from hyperpoint.geom import (
    KdTree, build_kdtree, knn, fps, partition_blocks, sample_block,
    normalize_coords, normalize_spectra, SpectralNormalizer,
)
from hyperpoint.fuse_io import (
    load_point_cloud, save_point_cloud, load_raster, save_raster,
    save_checkpoint, load_checkpoint, attach_spectra,
    transfer_labels_2d_to_3d, project_labels_3d_to_2d, save_colorized_ply,
)
from hyperpoint.attention import ssa, osa, vsa, local_attention, global_attention, coverage_table
from hyperpoint.network import (
    HyperPointFormer, CrossPointAttention, cross_point_attention, fuse_bidirectional,
    fuse_classic, build_model, BACKBONE_REGISTRY, get_backbone, register_backbone, list_backbones,
)
from hyperpoint.train import (
    cross_entropy_loss, late_fusion_loss, adam_step, Adam, OptimState,
    Trainer, Predictor, train_from_config, run_ablation,
)
from hyperpoint.metrics import confusion_matrix, scores, evaluate_2d
from hyperpoint.exceptions import (
    HyperPointError, ShapeError, GradientError, GeometryError, DataFormatError,
    CheckpointError, ConfigurationError, EvaluationError, TrainingError,
)

__version__ = "0.1.0"

__all__ = [
    # Configuration
    "AppSettings",
    "RunConfig",
    "settings",

    # Models
    "PointCloud",
    "RasterGrid",
    "GridSpec",
    "GroundClassMap",
    "Block",
    "AttentionConfig",
    "FusionConfig",
    "ModelConfig",
    "TrainConfig",
    "ConfusionMatrix",
    "Scores",
    "CoverageRow",
    "EpochRecord",
    "TrainingResult",
    "AttentionKind",
    "RelationalKind",
    "Neighborhood",
    "FusionKind",
    "ClassicFusion",
    "Backbone",
    "InputFeatures",
    "SkipSource",
    "CloudFormat",

    # Tensor engine
    "Tensor",
    "GradGraph",
    "OpCounter",
    "backward",
    "grad_check",
    "counting",

    # Geometry
    "KdTree",
    "build_kdtree",
    "knn",
    "fps",
    "partition_blocks",
    "sample_block",
    "normalize_coords",
    "normalize_spectra",
    "SpectralNormalizer",

    # File formats and 2D/3D bridging
    "load_point_cloud",
    "save_point_cloud",
    "load_raster",
    "save_raster",
    "save_checkpoint",
    "load_checkpoint",
    "attach_spectra",
    "transfer_labels_2d_to_3d",
    "project_labels_3d_to_2d",
    "save_colorized_ply",

    # Attention and network
    "ssa",
    "osa",
    "vsa",
    "local_attention",
    "global_attention",
    "coverage_table",
    "HyperPointFormer",
    "CrossPointAttention",
    "cross_point_attention",
    "fuse_bidirectional",
    "fuse_classic",
    "build_model",
    "BACKBONE_REGISTRY",
    "get_backbone",
    "register_backbone",
    "list_backbones",

    # Training and evaluation
    "cross_entropy_loss",
    "late_fusion_loss",
    "adam_step",
    "Adam",
    "OptimState",
    "Trainer",
    "Predictor",
    "train_from_config",
    "run_ablation",
    "confusion_matrix",
    "scores",
    "evaluate_2d",

    # Exceptions
    "HyperPointError",
    "ShapeError",
    "GradientError",
    "GeometryError",
    "DataFormatError",
    "CheckpointError",
    "ConfigurationError",
    "EvaluationError",
    "TrainingError",
]
