"""Losses, the Adam optimiser, the training loop and block-wise inference."""

import io
import json
import logging
from pathlib import Path
from typing import Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pyarrow as pa
import pyarrow.csv as pv
from pydantic import BaseModel, ConfigDict, Field

from hyperpoint.exceptions import CheckpointError, ConfigurationError, EvaluationError, TrainingError
from hyperpoint.fuse_io import CSV_WRITE_OPTIONS, load_checkpoint, load_point_cloud, save_checkpoint
from hyperpoint.geom import (
    KdTree,
    SpectralNormalizer,
    normalize_coords,
    partition_blocks,
    sample_block,
)
from hyperpoint.metrics import confusion_matrix, scores
from hyperpoint.models import (
    AblationRow,
    Block,
    ConfusionMatrix,
    EpochRecord,
    FusionKind,
    PointCloud,
    Scores,
    TrainConfig,
    TrainingResult,
)
from hyperpoint.network import ForwardResult, HyperPointFormer, StagePyramid, build_model
from hyperpoint.numcore import Tensor, add, backward, hadamard, log_softmax_lastdim, reduce_sum, scale
from hyperpoint.settings import RunConfig, settings

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "best.hpf"
LOG_NAME = "train_log.csv"
RUN_CONFIG_NAME = "run_config.json"
SPECTRAL_MIN_KEY = "spectral.min"
SPECTRAL_MAX_KEY = "spectral.max"
CONFIG_PREFIX = "# config="

PathLike = Union[str, Path]


# Losses

def cross_entropy_loss(logits: Tensor, labels: np.ndarray, class_weights: Optional[np.ndarray] = None,
                       ignore_label: Optional[int] = 0) -> Tensor:
    """Mean over non-ignored points of ``weight[label] * -log softmax(logits)[label]``."""
    n, num_classes = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise TrainingError(f"expected {n} labels, got shape {labels.shape}")
    keep = np.ones(n, dtype=bool) if ignore_label is None else labels != ignore_label
    count = int(keep.sum())
    if count == 0:
        raise TrainingError("every point carries the ignore label; the loss is undefined")
    kept = labels[keep]
    if kept.min() < 0 or kept.max() >= num_classes:
        raise TrainingError(f"labels must lie in [0, {num_classes})")
    weights = np.ones(num_classes) if class_weights is None else np.asarray(class_weights, dtype=np.float64)
    target = np.zeros((n, num_classes))
    target[np.flatnonzero(keep), kept] = weights[kept]
    picked = reduce_sum(hadamard(log_softmax_lastdim(logits), Tensor(target)))
    return scale(picked, -1.0 / count)


def late_fusion_loss(first, second, alpha: float) -> Tensor:
    """``alpha * first + (1 - alpha) * second``."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigurationError(f"alpha must lie in [0, 1], got {alpha}")
    return add(scale(first, alpha), scale(second, 1.0 - alpha))


def inverse_frequency_weights(labels: np.ndarray, num_classes: int,
                              ignore_label: Optional[int] = 0) -> np.ndarray:
    """Weights proportional to 1 / class count, averaging 1 over the classes present."""
    labels = np.asarray(labels, dtype=np.int64)
    if ignore_label is not None:
        labels = labels[labels != ignore_label]
    counts = np.bincount(labels, minlength=num_classes)[:num_classes].astype(np.float64)
    weights = np.zeros(num_classes)
    present = counts > 0
    if not present.any():
        raise TrainingError("no labelled points to derive class weights from")
    weights[present] = 1.0 / counts[present]
    weights[present] /= weights[present].mean()
    return weights


# Optimiser

class OptimState(BaseModel):
    """Adam moment accumulators, one pair per parameter name."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    first: Dict[str, np.ndarray] = Field(default_factory=dict)
    second: Dict[str, np.ndarray] = Field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Mapping[str, Tensor]) -> "OptimState":
        return cls(first={n: np.zeros(p.shape) for n, p in params.items()},
                   second={n: np.zeros(p.shape) for n, p in params.items()})


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: OptimState,
              lr: float) -> OptimState:
    """Bias-corrected Adam update of every parameter; rejected before any change on a non-finite gradient."""
    for name, param in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != param.shape:
            raise TrainingError(f"gradient for {name} has shape {g.shape}, parameter has {param.shape}")
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for {name}")

    state.step += 1
    t = state.step
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t
    for name, param in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(param.shape)
        m = state.beta1 * state.first[name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.second[name] + (1.0 - state.beta2) * g * g
        state.first[name] = m
        state.second[name] = v
        update = lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        value = np.array(param.data - update)
        value.flags.writeable = False
        param.data = value
    return state


class Adam:
    """Adam over a fixed, named parameter set."""

    def __init__(self, params: Mapping[str, Tensor], lr: float = 0.001):
        self.params = dict(params)
        self.lr = lr
        self.state = OptimState.for_params(self.params)

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        adam_step(self.params, grads, self.state, self.lr)


# Blocks

class PreparedBlock(BaseModel):
    """Sampled, normalised model input cut from a scene."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    block_id: int
    center: Tuple[float, float]
    indices: np.ndarray
    coords: np.ndarray
    attrs: np.ndarray
    labels: Optional[np.ndarray] = None
    pyramid: Optional[StagePyramid] = None

    def has_labels(self, ignore_label: Optional[int]) -> bool:
        if self.labels is None:
            return False
        return ignore_label is None or bool((self.labels != ignore_label).any())

    def ensure_pyramid(self, model: HyperPointFormer) -> StagePyramid:
        if self.pyramid is None:
            self.pyramid = model.build_pyramid(self.coords)
        return self.pyramid


def prepare_blocks(cloud: PointCloud, blocks: Sequence[Block], normalizer: SpectralNormalizer,
                   n_points: int, seed: int = 0, block_ids: Optional[Sequence[int]] = None) -> List[PreparedBlock]:
    """Sample ``n_points`` per block and normalise coordinates and spectra."""
    prepared = []
    ids = list(block_ids) if block_ids is not None else list(range(len(blocks)))
    for block_id, block in zip(ids, blocks):
        sampled = sample_block(block, n_points, seed + block_id)
        center = block.center
        prepared.append(PreparedBlock(
            block_id=block_id,
            center=(float(center[0]), float(center[1])),
            indices=sampled,
            coords=normalize_coords(cloud.coords[sampled]),
            attrs=normalizer.transform(cloud.attrs[sampled]),
            labels=None if cloud.labels is None else cloud.labels[sampled],
        ))
    return prepared


def split_blocks(blocks: Sequence[Block], val_fraction: float, seed: int) -> Tuple[List[int], List[int]]:
    """Seeded split of block positions into training and validation sets."""
    if len(blocks) < 2:
        raise TrainingError(f"need at least two blocks to hold one out for validation, got {len(blocks)}")
    order = np.random.default_rng(seed).permutation(len(blocks))
    n_val = min(len(blocks) - 1, max(1, int(round(val_fraction * len(blocks)))))
    return sorted(order[n_val:].tolist()), sorted(order[:n_val].tolist())


def fit_normalizer(cloud: PointCloud, blocks: Sequence[Block]) -> SpectralNormalizer:
    """Band ranges over every point belonging to ``blocks``."""
    members = np.unique(np.concatenate([b.members for b in blocks]))
    return SpectralNormalizer.fit(cloud.attrs[members])


# Training

def _forward_loss(model: HyperPointFormer, block: PreparedBlock, weights: Optional[np.ndarray],
                  ignore_label: Optional[int], alpha: float) -> Tuple[Tensor, ForwardResult]:
    result = model.forward(block.coords, block.attrs, block.ensure_pyramid(model))
    if result.branch_logits is not None:
        first, second = result.branch_logits
        loss = late_fusion_loss(cross_entropy_loss(first, block.labels, weights, ignore_label),
                                cross_entropy_loss(second, block.labels, weights, ignore_label), alpha)
    else:
        loss = cross_entropy_loss(result.logits, block.labels, weights, ignore_label)
    return loss, result


def block_confusion(model: HyperPointFormer, blocks: Sequence[PreparedBlock],
                    ignore_label: Optional[int] = 0) -> ConfusionMatrix:
    """Confusion matrix of argmax predictions on the sampled points of labelled blocks."""
    num_classes = model.config.num_classes
    total = ConfusionMatrix(counts=np.zeros((num_classes, num_classes), dtype=np.int64))
    for block in blocks:
        if block.labels is None:
            continue
        logits = model.forward(block.coords, block.attrs, block.ensure_pyramid(model)).logits
        total = total + confusion_matrix(logits.numpy().argmax(axis=1), block.labels, num_classes,
                                         ignore_label)
    return total


def evaluate_blocks(model: HyperPointFormer, blocks: Sequence[PreparedBlock],
                    ignore_label: Optional[int] = 0) -> Scores:
    return scores(block_confusion(model, blocks, ignore_label))


def checkpoint_state(model: HyperPointFormer, normalizer: SpectralNormalizer) -> Dict[str, np.ndarray]:
    state = dict(model.state_dict())
    state[SPECTRAL_MIN_KEY] = normalizer.mins
    state[SPECTRAL_MAX_KEY] = normalizer.maxs
    return state


class Trainer:
    """Mini-batch training with per-epoch validation and best-mIoU checkpointing."""

    def __init__(self, model: HyperPointFormer, config: TrainConfig, out_dir: PathLike,
                 normalizer: SpectralNormalizer, ignore_label: Optional[int] = 0,
                 class_weights: Optional[np.ndarray] = None, run_config: Optional[RunConfig] = None):
        self.model = model
        self.config = config
        self.out_dir = Path(out_dir)
        self.normalizer = normalizer
        self.ignore_label = ignore_label
        self.class_weights = class_weights
        self.run_config = run_config
        self.params = model.parameters()
        self.optimizer = Adam(self.params, lr=config.lr)
        self.rng = np.random.default_rng(config.seed)

    @property
    def checkpoint_path(self) -> Path:
        return self.out_dir / CHECKPOINT_NAME

    @property
    def log_path(self) -> Path:
        return self.out_dir / LOG_NAME

    def validate(self, blocks: Sequence[PreparedBlock]) -> float:
        cm = block_confusion(self.model, blocks, self.ignore_label)
        if cm.total == 0:
            logger.warning("Validation blocks hold no labelled points; mIoU reported as 0")
            return 0.0
        return scores(cm).miou

    def train_batch(self, batch: Sequence[PreparedBlock], epoch: int) -> List[float]:
        """One optimiser step on gradients averaged over the blocks of ``batch``."""
        summed: Dict[str, np.ndarray] = {}
        losses = []
        for block in batch:
            loss, _ = _forward_loss(self.model, block, self.class_weights, self.ignore_label,
                                    self.config.alpha)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"loss diverged to {value} in epoch {epoch}", epoch=epoch,
                                    checkpoint=self._last_good())
            losses.append(value)
            grads = backward(loss)
            for name, param in self.params.items():
                g = grads.get(param)
                if g is not None:
                    summed[name] = summed[name] + g if name in summed else g
        averaged = {name: g / len(batch) for name, g in summed.items()}
        try:
            self.optimizer.step(averaged)
        except TrainingError as e:
            logger.error(f"Optimizer step rejected in epoch {epoch}: {e}")
            raise TrainingError(str(e), epoch=epoch, checkpoint=self._last_good()) from e
        return losses

    def _last_good(self) -> Optional[str]:
        return str(self.checkpoint_path) if self.checkpoint_path.exists() else None

    def fit(self, train_blocks: Sequence[PreparedBlock],
            val_blocks: Sequence[PreparedBlock]) -> TrainingResult:
        train_blocks = [b for b in train_blocks if b.has_labels(self.ignore_label)]
        if not train_blocks or not val_blocks:
            raise TrainingError("training needs at least one labelled training block and one validation block")
        self.out_dir.mkdir(parents=True, exist_ok=True)
        config_json = self.run_config.to_json() if self.run_config else json.dumps(
            {"train": self.config.model_dump(mode="json")}, separators=(",", ":"), sort_keys=True)

        history: List[EpochRecord] = []
        best_epoch, best_miou = 0, -1.0
        schema = pa.schema([("epoch", pa.int64()), ("loss", pa.float64()), ("val_miou", pa.float64())])
        logger.info(f"Training on {len(train_blocks)} blocks, validating on {len(val_blocks)}, "
                    f"{self.config.epochs} epochs, batch {self.config.batch}")
        with open(self.log_path, "wb") as sink:
            sink.write(f"{CONFIG_PREFIX}{config_json}\n".encode("utf-8"))
            with pv.CSVWriter(sink, schema, write_options=CSV_WRITE_OPTIONS) as writer:
                for epoch in range(1, self.config.epochs + 1):
                    order = self.rng.permutation(len(train_blocks))
                    losses: List[float] = []
                    for b, start in enumerate(range(0, len(order), self.config.batch)):
                        batch = [train_blocks[i] for i in order[start:start + self.config.batch]]
                        losses.extend(self.train_batch(batch, epoch))
                        if (b + 1) % settings.log_every == 0:
                            logger.debug(f"epoch {epoch} batch {b + 1}: loss {np.mean(losses):.4f}")
                    record = EpochRecord(epoch=epoch, loss=float(np.mean(losses)),
                                         val_miou=self.validate(val_blocks))
                    history.append(record)
                    writer.write_table(pa.table({
                        "epoch": [record.epoch],
                        "loss": [record.loss],
                        "val_miou": [record.val_miou],
                    }, schema=schema))
                    if record.val_miou > best_miou:
                        best_epoch, best_miou = epoch, record.val_miou
                        save_checkpoint(self.checkpoint_path, checkpoint_state(self.model, self.normalizer))
                    logger.info(f"epoch {epoch}: loss {record.loss:.4f} "
                                f"val mIoU {record.val_miou:.4f} (best {best_miou:.4f} @ {best_epoch})")
        logger.info(f"Best checkpoint from epoch {best_epoch} saved to {self.checkpoint_path}")
        return TrainingResult(best_epoch=best_epoch, best_miou=best_miou,
                              checkpoint_path=str(self.checkpoint_path), log_path=str(self.log_path),
                              history=history)


def read_training_log(path: PathLike) -> Tuple[RunConfig, List[EpochRecord]]:
    """Configuration header and epoch rows of a training log."""
    path = Path(path)
    first, _, body = Path(path).read_bytes().partition(b"\n")
    first = first.decode("utf-8")
    if not first.startswith(CONFIG_PREFIX):
        raise TrainingError(f"{path} has no configuration header")
    table = pv.read_csv(io.BytesIO(body))
    config = RunConfig.from_json(first[len(CONFIG_PREFIX):])
    rows = table.to_pylist()
    return config, [EpochRecord(**row) for row in rows]


# Inference

class PredictionResult(NamedTuple):
    cloud: PointCloud
    features: np.ndarray


class Predictor:
    """Label a whole scene block by block with a trained network."""

    def __init__(self, model: HyperPointFormer, normalizer: SpectralNormalizer, size: float = 75.0,
                 stride: float = 25.0, seed: int = 0):
        self.model = model
        self.normalizer = normalizer
        self.size = size
        self.stride = stride
        self.seed = seed

    @classmethod
    def from_checkpoint(cls, checkpoint: PathLike, run_config: RunConfig) -> "Predictor":
        state = load_checkpoint(checkpoint)
        if SPECTRAL_MIN_KEY not in state or SPECTRAL_MAX_KEY not in state:
            raise CheckpointError(f"{checkpoint} carries no spectral normalisation")
        normalizer = SpectralNormalizer(mins=state.pop(SPECTRAL_MIN_KEY), maxs=state.pop(SPECTRAL_MAX_KEY))
        model = build_model(run_config.model_config_for(normalizer.num_bands))
        model.load_state_dict(state)
        logger.info(f"Loaded {model.num_parameters()} parameters from {checkpoint}")
        return cls(model, normalizer, run_config.blocks.size, run_config.blocks.stride, run_config.blocks.seed)

    def predict(self, cloud: PointCloud) -> PredictionResult:
        """Per-point argmax labels and penultimate features, in input order.

        A point sampled by several blocks keeps the result of the block whose
        centre is nearest in XY; points never sampled copy their nearest
        labelled neighbour.
        """
        if cloud.num_bands != self.normalizer.num_bands:
            raise CheckpointError(
                f"cloud has {cloud.num_bands} bands, checkpoint was trained on {self.normalizer.num_bands}")
        n = cloud.num_points
        blocks = partition_blocks(cloud, self.size, self.stride)
        prepared = prepare_blocks(cloud, blocks, self.normalizer, self.model.config.n_input, self.seed)

        labels = np.zeros(n, dtype=np.int64)
        features: Optional[np.ndarray] = None
        best = np.full(n, np.inf)
        for block in prepared:
            result = self.model.forward(block.coords, block.attrs, block.ensure_pyramid(self.model))
            feats = result.features.numpy()
            if features is None:
                features = np.zeros((n, feats.shape[1]))
            points, first = np.unique(block.indices, return_index=True)
            distance = np.linalg.norm(cloud.coords[points, :2] - np.array(block.center), axis=1)
            closer = distance < best[points]
            chosen = points[closer]
            labels[chosen] = result.logits.numpy()[first[closer]].argmax(axis=1)
            features[chosen] = feats[first[closer]]
            best[chosen] = distance[closer]

        covered = np.isfinite(best)
        missing = np.flatnonzero(~covered)
        if missing.size:
            source = np.flatnonzero(covered)
            nearest = source[KdTree(cloud.coords[source]).query(cloud.coords[missing], 1).indices[:, 0]]
            labels[missing] = labels[nearest]
            features[missing] = features[nearest]
            logger.info(f"{missing.size} unsampled points took their nearest labelled neighbour's label")
        logger.info(f"Predicted {n} points over {len(prepared)} blocks")
        return PredictionResult(cloud.with_labels(labels), features)


# Config-driven pipelines

def _load_training_cloud(path: str, run_config: RunConfig) -> PointCloud:
    cloud = load_point_cloud(path, run_config.data.format, run_config.data.num_classes,
                             run_config.data.ignore_label)
    if cloud.labels is None:
        raise TrainingError(f"training cloud {path} has no label column")
    return cloud


def build_datasets(run_config: RunConfig) -> Tuple[List[PreparedBlock], List[PreparedBlock], SpectralNormalizer, PointCloud]:
    """Blocks for training and validation plus the spectral normaliser fitted on the training split."""
    cloud = _load_training_cloud(run_config.data.cloud, run_config)
    blocks = partition_blocks(cloud, run_config.blocks.size, run_config.blocks.stride)
    n_points, seed = run_config.blocks.n_points, run_config.blocks.seed
    if run_config.data.val_cloud:
        normalizer = fit_normalizer(cloud, blocks)
        train = prepare_blocks(cloud, blocks, normalizer, n_points, seed)
        val_cloud = _load_training_cloud(run_config.data.val_cloud, run_config)
        val_blocks = partition_blocks(val_cloud, run_config.blocks.size, run_config.blocks.stride)
        val = prepare_blocks(val_cloud, val_blocks, normalizer, n_points, seed)
    else:
        train_ids, val_ids = split_blocks(blocks, run_config.train.val_fraction, run_config.train.seed)
        normalizer = fit_normalizer(cloud, [blocks[i] for i in train_ids])
        train = prepare_blocks(cloud, [blocks[i] for i in train_ids], normalizer, n_points, seed, train_ids)
        val = prepare_blocks(cloud, [blocks[i] for i in val_ids], normalizer, n_points, seed, val_ids)
    logger.info(f"Prepared {len(train)} training and {len(val)} validation blocks")
    return train, val, normalizer, cloud


def class_weights_for(run_config: RunConfig, blocks: Sequence[PreparedBlock]) -> Optional[np.ndarray]:
    num_classes = run_config.data.num_classes
    if run_config.train.class_weights is not None:
        if len(run_config.train.class_weights) != num_classes:
            raise ConfigurationError(
                f"{len(run_config.train.class_weights)} class weights for {num_classes} classes")
        return np.asarray(run_config.train.class_weights, dtype=np.float64)
    if not run_config.train.inverse_frequency_weights:
        return None
    labels = np.concatenate([b.labels for b in blocks if b.labels is not None])
    return inverse_frequency_weights(labels, num_classes, run_config.data.ignore_label)


def save_run_config(run_config: RunConfig, out_dir: PathLike) -> Path:
    path = Path(out_dir) / RUN_CONFIG_NAME
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(run_config.to_json() + "\n", encoding="utf-8")
    return path


def train_from_config(run_config: RunConfig, out_dir: PathLike) -> TrainingResult:
    """Load the scene, train, and leave checkpoint, log and ``run_config.json`` in ``out_dir``."""
    train, val, normalizer, cloud = build_datasets(run_config)
    model = build_model(run_config.model_config_for(cloud.num_bands))
    save_run_config(run_config, out_dir)
    trainer = Trainer(model, run_config.train_config(), out_dir, normalizer,
                      ignore_label=run_config.data.ignore_label,
                      class_weights=class_weights_for(run_config, train),
                      run_config=run_config)
    return trainer.fit(train, val)


# Ablations

ABLATION_VARIANTS: Dict[str, Dict[str, Dict[str, object]]] = {
    "mid-cpa": {"fusion": {"kind": FusionKind.MID_CPA.value}},
    "mid-classic": {"fusion": {"kind": FusionKind.MID_CLASSIC.value, "classic": "concat"}},
    "no-cpa": {"fusion": {"kind": FusionKind.MID_CLASSIC.value, "classic": "sum"}},
    "early": {"fusion": {"kind": FusionKind.EARLY.value}, "model": {"input_features": "all"}},
    "late": {"fusion": {"kind": FusionKind.LATE.value}},
    "geometry": {"fusion": {"kind": FusionKind.EARLY.value}, "model": {"input_features": "geometry"}},
    "spectral": {"fusion": {"kind": FusionKind.EARLY.value}, "model": {"input_features": "spectral"}},
}


def variant_config(base: RunConfig, variant: str, seed: int) -> RunConfig:
    """``base`` with a named variant's overrides and every seed set to ``seed``."""
    if variant not in ABLATION_VARIANTS:
        raise ConfigurationError(f"Unknown ablation variant {variant!r}; available: {list(ABLATION_VARIANTS)}")
    document = base.model_dump(mode="json")
    for section, values in ABLATION_VARIANTS[variant].items():
        document[section].update(values)
    for section in ("model", "train", "blocks"):
        document[section]["seed"] = seed
    return RunConfig.from_dict(document, source=f"variant {variant}")


def run_ablation(base: RunConfig, variants: Sequence[str], seeds: Sequence[int],
                 out_dir: PathLike) -> List[AblationRow]:
    """Train every variant with every seed and score it on the held-out blocks."""
    out_dir = Path(out_dir)
    rows = []
    for variant in variants:
        for seed in seeds:
            config = variant_config(base, variant, seed)
            run_dir = out_dir / variant / f"seed{seed}"
            train_from_config(config, run_dir)
            _, val, _, _ = build_datasets(config)
            predictor = Predictor.from_checkpoint(run_dir / CHECKPOINT_NAME, config)
            try:
                result = evaluate_blocks(predictor.model, val, config.data.ignore_label)
            except EvaluationError as e:
                raise TrainingError(f"variant {variant} seed {seed} has nothing to evaluate") from e
            rows.append(AblationRow(variant=variant, seed=seed, overall_accuracy=result.overall_accuracy,
                                    mean_f1=result.mean_f1, miou=result.miou))
            logger.info(f"{variant} seed {seed}: OA {result.overall_accuracy:.4f} "
                        f"mean F1 {result.mean_f1:.4f}")
    table = pa.Table.from_pylist([r.model_dump() for r in rows])
    out_dir.mkdir(parents=True, exist_ok=True)
    pv.write_csv(table, str(out_dir / "ablation.csv"), write_options=CSV_WRITE_OPTIONS)
    return rows


def summarize_ablation(rows: Sequence[AblationRow]) -> Dict[str, Tuple[float, float]]:
    """Mean (OA, mean F1) per variant, in first-seen order."""
    summary: Dict[str, List[AblationRow]] = {}
    for row in rows:
        summary.setdefault(row.variant, []).append(row)
    return {v: (float(np.mean([r.overall_accuracy for r in rs])), float(np.mean([r.mean_f1 for r in rs])))
            for v, rs in summary.items()}
