"""Pydantic settings configuration with dotenv support, and the TOML run configuration."""

import json
import logging
import tomllib
from pathlib import Path
from typing import List, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from hyperpoint.exceptions import ConfigurationError
from hyperpoint.models import (
    AttentionConfig,
    AttentionKind,
    Backbone,
    ClassicFusion,
    CloudFormat,
    FusionConfig,
    FusionKind,
    InputFeatures,
    ModelConfig,
    Neighborhood,
    RelationalKind,
    SkipSource,
    TrainConfig,
)

logger = logging.getLogger(__name__)


class AppSettings(BaseSettings):
    """Process-level settings read from the environment (``HYPERPOINT_*``) or ``.env``."""

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        env_prefix="HYPERPOINT_",
        case_sensitive=False,
        extra="ignore"
    )

    log_level: str = Field(default="INFO", description="Logging level")
    log_every: int = Field(default=10, description="Batches between training progress lines")
    default_ground_map: Optional[str] = Field(default=None, description="Ground class map used when none is given")

    @field_validator('log_level')
    @classmethod
    def validate_log_level(cls, v: str) -> str:
        """Validate log level."""
        valid_levels = ['DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL']
        if v.upper() not in valid_levels:
            raise ValueError(f'Log level must be one of {valid_levels}')
        return v.upper()

    @field_validator('log_every')
    @classmethod
    def validate_log_every(cls, v: int) -> int:
        if v < 1:
            raise ValueError('log_every must be at least 1')
        return v

    def configure_logging(self) -> None:
        """Configure logging based on settings."""
        logging.basicConfig(
            level=getattr(logging, self.log_level),
            format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
            datefmt='%Y-%m-%d %H:%M:%S'
        )


# Run configuration (TOML)

class DataSection(BaseModel):
    """[data]: where the fused training scene lives and how it is labelled."""
    model_config = ConfigDict(extra="forbid")

    cloud: str
    val_cloud: Optional[str] = None
    format: Optional[CloudFormat] = None
    num_classes: int = Field(ge=2)
    ignore_label: int = 0


class BlocksSection(BaseModel):
    """[blocks]: scene tiling and per-block sampling."""
    model_config = ConfigDict(extra="forbid")

    size: float = Field(default=75.0, gt=0)
    stride: float = Field(default=25.0, gt=0)
    n_points: int = 4096
    seed: int = 0

    @model_validator(mode="after")
    def check_stride(self) -> "BlocksSection":
        if self.stride > self.size:
            raise ValueError("stride must not exceed size")
        return self


class ModelSection(BaseModel):
    """[model]: encoder shape and attention ablation switches."""
    model_config = ConfigDict(extra="forbid")

    stage_widths: List[int] = Field(default_factory=lambda: [32, 64, 128, 256])
    k: int = Field(default=16, ge=1)
    attention: AttentionKind = AttentionKind.VSA
    beta: RelationalKind = RelationalKind.SUBTRACTION
    neighborhood: Neighborhood = Neighborhood.LOCAL
    position_encoding: bool = False
    backbone: Backbone = Backbone.VSA_TRANSFORMER
    input_features: InputFeatures = InputFeatures.ALL
    skip_source: SkipSource = SkipSource.FUSED
    seed: int = 0


class TrainSection(BaseModel):
    """[train]: optimisation schedule."""
    model_config = ConfigDict(extra="forbid")

    lr: float = Field(default=0.001, gt=0)
    batch: int = Field(default=16, ge=1)
    epochs: int = Field(default=100, ge=1)
    class_weights: Optional[List[float]] = None
    inverse_frequency_weights: bool = True
    seed: int = 0
    val_fraction: float = Field(default=0.1, gt=0.0, lt=1.0)


class FusionSection(BaseModel):
    """[fusion]: how the two branches are combined."""
    model_config = ConfigDict(extra="forbid")

    kind: FusionKind = FusionKind.MID_CPA
    classic: ClassicFusion = ClassicFusion.SUM
    alpha: float = Field(default=0.5, ge=0.0, le=1.0)
    gamma_init: float = 0.0
    cpa_dense: bool = False
    embed_width: Optional[int] = Field(default=None, ge=1)


class EvalSection(BaseModel):
    """[eval]: 2D projection settings."""
    model_config = ConfigDict(extra="forbid")

    cell: float = Field(default=0.5, gt=0)
    ground_map: Optional[str] = None
    nodata: float = -9999.0


class RunConfig(BaseModel):
    """Complete description of one training / inference run."""
    model_config = ConfigDict(extra="forbid")

    data: DataSection
    blocks: BlocksSection = Field(default_factory=BlocksSection)
    model: ModelSection = Field(default_factory=ModelSection)
    train: TrainSection = Field(default_factory=TrainSection)
    fusion: FusionSection = Field(default_factory=FusionSection)
    eval: EvalSection = Field(default_factory=EvalSection)

    @classmethod
    def from_toml(cls, path: Union[str, Path]) -> "RunConfig":
        """Load and validate a TOML run file; relative data paths resolve against its directory."""
        path = Path(path)
        try:
            with open(path, "rb") as f:
                document = tomllib.load(f)
        except (OSError, tomllib.TOMLDecodeError) as e:
            logger.error(f"Failed to read run config {path}: {e}")
            raise ConfigurationError(f"Cannot read run config {path}: {e}") from e
        config = cls.from_dict(document, source=str(path))
        return config.resolved(path.parent)

    @classmethod
    def from_dict(cls, document: dict, source: str = "<dict>") -> "RunConfig":
        try:
            return cls.model_validate(document)
        except ValidationError as e:
            logger.error(f"Invalid run config {source}: {e.error_count()} error(s)")
            raise ConfigurationError(f"Invalid run config {source}: {e}") from e

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            return cls.model_validate_json(text)
        except ValidationError as e:
            raise ConfigurationError(f"Invalid stored run config: {e}") from e

    @classmethod
    def from_json_file(cls, path: Union[str, Path]) -> "RunConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigurationError(f"Cannot read {path}: {e}") from e
        return cls.from_json(text)

    def to_json(self) -> str:
        """Single-line JSON form, as written into training logs and ``run_config.json``."""
        return json.dumps(self.model_dump(mode="json"), separators=(",", ":"), sort_keys=True)

    def resolved(self, base: Path) -> "RunConfig":
        """Copy with relative file paths made absolute against ``base``."""
        def fix(value: Optional[str]) -> Optional[str]:
            if value is None or Path(value).is_absolute():
                return value
            return str((base / value).resolve())

        data = self.data.model_copy(update={"cloud": fix(self.data.cloud),
                                            "val_cloud": fix(self.data.val_cloud)})
        evaluation = self.eval.model_copy(update={"ground_map": fix(self.eval.ground_map)})
        return self.model_copy(update={"data": data, "eval": evaluation})

    def model_config_for(self, num_bands: int) -> ModelConfig:
        """Network configuration for a scene carrying ``num_bands`` spectral bands."""
        try:
            return ModelConfig(
                stage_widths=list(self.model.stage_widths),
                n_input=self.blocks.n_points,
                num_classes=self.data.num_classes,
                attention=AttentionConfig(
                    kind=self.model.attention,
                    beta=self.model.beta,
                    neighborhood=self.model.neighborhood,
                    k=self.model.k,
                    position_encoding=self.model.position_encoding,
                ),
                fusion=FusionConfig(**self.fusion.model_dump()),
                backbone=self.model.backbone,
                spectral_width=num_bands if self.model.input_features != InputFeatures.GEOMETRY else 0,
                input_features=self.model.input_features,
                skip_source=self.model.skip_source,
                seed=self.model.seed,
            )
        except ValidationError as e:
            logger.error(f"Run config does not describe a valid model: {e.error_count()} error(s)")
            raise ConfigurationError(f"Invalid model configuration: {e}") from e

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(
                lr=self.train.lr,
                batch=self.train.batch,
                epochs=self.train.epochs,
                alpha=self.fusion.alpha,
                class_weights=self.train.class_weights,
                seed=self.train.seed,
                val_fraction=self.train.val_fraction,
            )
        except ValidationError as e:
            raise ConfigurationError(f"Invalid training configuration: {e}") from e


# Global settings instance
settings = AppSettings()

# Configure logging when module is imported
settings.configure_logging()
