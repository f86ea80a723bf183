"""Pydantic models for point clouds, rasters, configuration and evaluation results."""

import logging
import tomllib
from enum import Enum
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from hyperpoint.exceptions import ConfigurationError

logger = logging.getLogger(__name__)

NUM_STAGES = 4


class AttentionKind(str, Enum):
    """Self-attention variant used inside the transformer layer."""
    SSA = "ssa"
    OSA = "osa"
    VSA = "vsa"


class RelationalKind(str, Enum):
    """Relational function combining query and key vectors in vector attention."""
    SUBTRACTION = "subtraction"
    SUMMATION = "summation"
    HADAMARD = "hadamard"


class Neighborhood(str, Enum):
    """Which points a query attends to."""
    LOCAL = "local"
    GLOBAL = "global"


class FusionKind(str, Enum):
    """Where and how the two modalities are combined."""
    EARLY = "early"
    LATE = "late"
    MID_CLASSIC = "mid-classic"
    MID_CPA = "mid-cpa"


class ClassicFusion(str, Enum):
    """Parameter-free fusion functions."""
    SUM = "sum"
    CONCAT = "concat"
    AVERAGE = "average"
    MAX = "max"


class Backbone(str, Enum):
    """Per-stage feature extractor."""
    VSA_TRANSFORMER = "vsa-transformer"
    POINTWISE_MLP = "pointwise-mlp"
    EDGE_GRAPH = "edge-graph"


class InputFeatures(str, Enum):
    """Input modalities fed to the network."""
    ALL = "all"
    GEOMETRY = "geometry"
    SPECTRAL = "spectral"


class SkipSource(str, Enum):
    """Which encoder features feed the decoder skip connections."""
    FUSED = "fused"
    RAW = "raw"


class CloudFormat(str, Enum):
    """Supported point-cloud file formats."""
    PLY = "ply-ascii"
    CSV = "csv"


def _as_float_array(value, ndim: int, name: str) -> np.ndarray:
    array = np.asarray(value, dtype=np.float64)
    if array.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-D, got shape {array.shape}")
    return array


# Spatial data

class PointCloud(BaseModel):
    """N points with XYZ coordinates, spectral attributes and optional labels."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    coords: np.ndarray
    attrs: np.ndarray
    labels: Optional[np.ndarray] = None
    ignore_label: int = 0
    band_names: List[str] = Field(default_factory=list)
    num_classes: Optional[int] = None
    nodata_mask: Optional[np.ndarray] = None

    @field_validator("coords", mode="before")
    @classmethod
    def validate_coords(cls, v) -> np.ndarray:
        """Coordinates are an N x 3 float array."""
        array = _as_float_array(v, 2, "coords")
        if array.shape[1] != 3:
            raise ValueError(f"coords must have 3 columns, got {array.shape[1]}")
        return array

    @field_validator("attrs", mode="before")
    @classmethod
    def validate_attrs(cls, v) -> np.ndarray:
        """Attributes are an N x b float array (b may be 0)."""
        return _as_float_array(v, 2, "attrs")

    @field_validator("labels", mode="before")
    @classmethod
    def validate_labels(cls, v) -> Optional[np.ndarray]:
        if v is None:
            return None
        array = np.asarray(v)
        if array.ndim != 1:
            raise ValueError(f"labels must be 1-D, got shape {array.shape}")
        return array.astype(np.int64)

    @model_validator(mode="after")
    def check_lengths(self) -> "PointCloud":
        """coords, attrs, labels (and band names) agree."""
        n = self.coords.shape[0]
        if self.attrs.shape[0] != n:
            raise ValueError(f"attrs has {self.attrs.shape[0]} rows, coords has {n}")
        if self.labels is not None and self.labels.shape[0] != n:
            raise ValueError(f"labels has {self.labels.shape[0]} entries, coords has {n}")
        if self.nodata_mask is not None and self.nodata_mask.shape[0] != n:
            raise ValueError("nodata_mask length differs from point count")
        if not self.band_names:
            self.band_names = [f"band_{i}" for i in range(self.attrs.shape[1])]
        if len(self.band_names) != self.attrs.shape[1]:
            raise ValueError(f"{len(self.band_names)} band names for {self.attrs.shape[1]} bands")
        if self.labels is not None and self.num_classes is not None:
            bad = (self.labels != self.ignore_label) & ((self.labels < 0) | (self.labels >= self.num_classes))
            if bad.any():
                idx = int(np.flatnonzero(bad)[0])
                raise ValueError(f"label {self.labels[idx]} at point {idx} outside [0, {self.num_classes})")
        return self

    @property
    def num_points(self) -> int:
        return int(self.coords.shape[0])

    @property
    def num_bands(self) -> int:
        return int(self.attrs.shape[1])

    @property
    def has_labels(self) -> bool:
        return self.labels is not None

    def with_labels(self, labels: np.ndarray) -> "PointCloud":
        """Copy of this cloud carrying ``labels``."""
        return self.model_copy(update={"labels": np.asarray(labels, dtype=np.int64)})

    def subset(self, index: np.ndarray) -> "PointCloud":
        """Points selected by ``index`` (any integer index array)."""
        return PointCloud(
            coords=self.coords[index],
            attrs=self.attrs[index],
            labels=None if self.labels is None else self.labels[index],
            nodata_mask=None if self.nodata_mask is None else self.nodata_mask[index],
            ignore_label=self.ignore_label,
            band_names=list(self.band_names),
            num_classes=self.num_classes,
        )


class GridSpec(BaseModel):
    """Georeferencing of a north-up raster: lower-left origin, square cells."""
    origin_xy: Tuple[float, float]
    cell: float = Field(gt=0)
    width: int = Field(ge=1)
    height: int = Field(ge=1)
    nodata: float = -9999.0

    @classmethod
    def covering(cls, coords: np.ndarray, cell: float, nodata: float = -9999.0) -> "GridSpec":
        """Smallest grid anchored at the XY minimum that covers every point."""
        lo = coords[:, :2].min(axis=0)
        hi = coords[:, :2].max(axis=0)
        width, height = (np.floor((hi - lo) / cell).astype(int) + 1).tolist()
        return cls(origin_xy=(float(lo[0]), float(lo[1])), cell=cell, width=width, height=height,
                   nodata=nodata)

    def pixel_centers(self) -> np.ndarray:
        """Centers of all pixels, flat index ``row * width + col`` with row 0 southernmost."""
        cols, rows = np.meshgrid(np.arange(self.width), np.arange(self.height))
        x = self.origin_xy[0] + (cols.reshape(-1) + 0.5) * self.cell
        y = self.origin_xy[1] + (rows.reshape(-1) + 0.5) * self.cell
        return np.column_stack([x, y])

    def pixel_of(self, xy: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """(col, row) of each XY position; positions outside the grid get -1."""
        col = np.floor((xy[:, 0] - self.origin_xy[0]) / self.cell).astype(np.int64)
        row = np.floor((xy[:, 1] - self.origin_xy[1]) / self.cell).astype(np.int64)
        inside = (col >= 0) & (col < self.width) & (row >= 0) & (row < self.height)
        col[~inside] = -1
        row[~inside] = -1
        return col, row


class RasterGrid(BaseModel):
    """Georeferenced grid of spectral bands or a single integer label band.

    ``values`` is band-major with shape (bands, height, width); row 0 is the
    southernmost row.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    origin_xy: Tuple[float, float]
    cell: float = Field(gt=0)
    width: int = Field(ge=1)
    height: int = Field(ge=1)
    values: np.ndarray
    nodata: float = -9999.0

    @model_validator(mode="after")
    def check_values(self) -> "RasterGrid":
        if self.values.ndim == 2:
            self.values = self.values[np.newaxis]
        if self.values.ndim != 3 or self.values.shape[1:] != (self.height, self.width):
            raise ValueError(
                f"values shape {self.values.shape} does not match {self.height} x {self.width}")
        return self

    @classmethod
    def from_spec(cls, spec: GridSpec, values: np.ndarray) -> "RasterGrid":
        return cls(origin_xy=spec.origin_xy, cell=spec.cell, width=spec.width, height=spec.height,
                   values=values, nodata=spec.nodata)

    @property
    def bands(self) -> int:
        return int(self.values.shape[0])

    @property
    def is_label(self) -> bool:
        return self.bands == 1 and np.issubdtype(self.values.dtype, np.integer)

    @property
    def spec(self) -> GridSpec:
        return GridSpec(origin_xy=self.origin_xy, cell=self.cell, width=self.width,
                        height=self.height, nodata=self.nodata)

    def pixel_centers(self) -> np.ndarray:
        return self.spec.pixel_centers()

    def flat_bands(self) -> np.ndarray:
        """Pixel values as (height * width, bands), flat pixel index order."""
        return self.values.reshape(self.bands, -1).T

    def nodata_pixels(self) -> np.ndarray:
        """Boolean per flat pixel: any band equals the nodata sentinel."""
        return (self.flat_bands() == self.nodata).any(axis=1)


class GroundClassMap(BaseModel):
    """Per-class ground / non-ground flag used by the two-stage 2D projection."""
    flags: Dict[int, bool]
    names: Dict[int, str] = Field(default_factory=dict)

    def is_ground(self, label: int) -> bool:
        return self.flags[int(label)]

    def validate_classes(self, labels: np.ndarray, num_classes: Optional[int] = None) -> None:
        """Every label (and every class below ``num_classes``) must carry a flag."""
        wanted = set(np.unique(labels).tolist())
        if num_classes is not None:
            wanted |= set(range(num_classes))
        missing = sorted(c for c in wanted if c not in self.flags)
        if missing:
            raise ConfigurationError(f"Ground class map has no flag for classes {missing}")

    def ground_mask(self, labels: np.ndarray) -> np.ndarray:
        labels = np.asarray(labels, dtype=np.int64)
        self.validate_classes(labels)
        lookup = np.zeros(max(self.flags) + 1, dtype=bool)
        for c, g in self.flags.items():
            lookup[c] = g
        return lookup[labels]

    @classmethod
    def from_toml(cls, path: Union[str, Path]) -> "GroundClassMap":
        """Load ``[classes]`` entries of the form ``3 = { name = "...", ground = true }``."""
        try:
            with open(path, "rb") as f:
                document = tomllib.load(f)
        except (OSError, tomllib.TOMLDecodeError) as e:
            raise ConfigurationError(f"Cannot read ground class map {path}: {e}") from e
        return cls._from_document(document, str(path))

    @classmethod
    def default(cls) -> "GroundClassMap":
        """The DFC2018 ground / non-ground split shipped with the package."""
        text = resources.files("hyperpoint.data").joinpath("dfc2018_ground_map.toml").read_text("utf-8")
        return cls._from_document(tomllib.loads(text), "dfc2018_ground_map.toml")

    @classmethod
    def _from_document(cls, document: dict, source: str) -> "GroundClassMap":
        classes = document.get("classes")
        if not isinstance(classes, dict) or not classes:
            raise ConfigurationError(f"{source}: missing [classes] table")
        flags, names = {}, {}
        for key, entry in classes.items():
            try:
                label = int(key)
                flags[label] = bool(entry["ground"])
            except (ValueError, KeyError, TypeError) as e:
                raise ConfigurationError(f"{source}: bad class entry {key!r}") from e
            if "name" in entry:
                names[label] = str(entry["name"])
        return cls(flags=flags, names=names)


class Block(BaseModel):
    """Square XY tile of a scene and the points it holds."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    origin_xy: Tuple[float, float]
    size: float
    stride: float
    members: np.ndarray
    sampled: Optional[np.ndarray] = None

    @property
    def center(self) -> np.ndarray:
        return np.array(self.origin_xy) + self.size / 2.0

    @property
    def num_members(self) -> int:
        return int(self.members.shape[0])


# Network and training configuration

class AttentionConfig(BaseModel):
    """Attention variant, relational function and neighborhood."""
    model_config = ConfigDict(extra="forbid")

    kind: AttentionKind = AttentionKind.VSA
    beta: RelationalKind = RelationalKind.SUBTRACTION
    neighborhood: Neighborhood = Neighborhood.LOCAL
    k: int = Field(default=16, ge=1)
    position_encoding: bool = False


class FusionConfig(BaseModel):
    """Fusion strategy between the geometry and spectral branches."""
    model_config = ConfigDict(extra="forbid")

    kind: FusionKind = FusionKind.MID_CPA
    classic: ClassicFusion = ClassicFusion.SUM
    alpha: float = Field(default=0.5, ge=0.0, le=1.0)
    gamma_init: float = 0.0
    cpa_dense: bool = False
    embed_width: Optional[int] = Field(default=None, ge=1)


class ModelConfig(BaseModel):
    """Architecture of the dual-branch segmentation network."""
    model_config = ConfigDict(extra="forbid")

    stage_widths: List[int] = Field(default_factory=lambda: [32, 64, 128, 256])
    n_input: int = 4096
    num_classes: int = Field(ge=2)
    attention: AttentionConfig = Field(default_factory=AttentionConfig)
    fusion: FusionConfig = Field(default_factory=FusionConfig)
    backbone: Backbone = Backbone.VSA_TRANSFORMER
    geometry_width: int = 3
    spectral_width: int = Field(ge=0)
    input_features: InputFeatures = InputFeatures.ALL
    skip_source: SkipSource = SkipSource.FUSED
    seed: int = 0

    @field_validator("stage_widths")
    @classmethod
    def validate_stage_widths(cls, v: List[int]) -> List[int]:
        if len(v) != NUM_STAGES or any(w < 1 for w in v):
            raise ValueError(f"stage_widths must be {NUM_STAGES} positive widths")
        return v

    @field_validator("n_input")
    @classmethod
    def validate_n_input(cls, v: int) -> int:
        """Each of the four stages halves the point count."""
        if v < 2 ** NUM_STAGES or v % (2 ** NUM_STAGES) != 0:
            raise ValueError(f"n_input must be a positive multiple of {2 ** NUM_STAGES}")
        return v

    @model_validator(mode="after")
    def check_modalities(self) -> "ModelConfig":
        dual = self.fusion.kind != FusionKind.EARLY
        if dual and self.input_features != InputFeatures.ALL:
            raise ValueError("single-modality inputs require fusion kind 'early'")
        if self.input_features != InputFeatures.GEOMETRY and self.spectral_width < 1:
            raise ValueError("spectral inputs need spectral_width >= 1")
        return self

    @property
    def k(self) -> int:
        return self.attention.k

    @property
    def is_dual_branch(self) -> bool:
        return self.fusion.kind != FusionKind.EARLY

    def stage_points(self) -> List[int]:
        """Point count at which each stage attends."""
        return [self.n_input // 2 ** s for s in range(NUM_STAGES)]


class TrainConfig(BaseModel):
    """Optimisation settings."""
    model_config = ConfigDict(extra="forbid")

    lr: float = Field(default=0.001, gt=0)
    batch: int = Field(default=16, ge=1)
    epochs: int = Field(default=100, ge=1)
    alpha: float = Field(default=0.5, ge=0.0, le=1.0)
    class_weights: Optional[List[float]] = None
    seed: int = 0
    val_fraction: float = Field(default=0.1, gt=0.0, lt=1.0)

    @field_validator("class_weights")
    @classmethod
    def validate_class_weights(cls, v: Optional[List[float]]) -> Optional[List[float]]:
        if v is not None and any(w < 0 for w in v):
            raise ValueError("class_weights must be nonnegative")
        return v


# Evaluation and training results

class ConfusionMatrix(BaseModel):
    """C x C counts; rows are ground truth, columns are predictions."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    counts: np.ndarray

    @property
    def num_classes(self) -> int:
        return int(self.counts.shape[0])

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(counts=self.counts + other.counts)


class Scores(BaseModel):
    """Accuracy metrics derived from a confusion matrix."""
    overall_accuracy: float
    precision: List[float]
    recall: List[float]
    f1: List[float]
    iou: List[float]
    present_classes: List[int]
    mean_precision: float
    mean_recall: float
    mean_f1: float
    miou: float
    kappa: float
    total: int


class CoverageRow(BaseModel):
    """Local-attention coverage at one encoder stage."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    stage: int
    points: int
    k: int
    coverage: int
    percentage: Fraction


class EpochRecord(BaseModel):
    """One line of the training log."""
    epoch: int
    loss: float
    val_miou: float


class AblationRow(BaseModel):
    """Held-out accuracy of one variant trained with one seed."""
    variant: str
    seed: int
    overall_accuracy: float
    mean_f1: float
    miou: float


class TrainingResult(BaseModel):
    """Outcome of a training run."""
    best_epoch: int
    best_miou: float
    checkpoint_path: str
    log_path: str
    history: List[EpochRecord] = Field(default_factory=list)
