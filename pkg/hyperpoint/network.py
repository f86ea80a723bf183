"""Dual-branch point transformer with cross-point attention fusion.

A block of points is processed at four scales. At each scale the geometry
and spectral branches run their own stage layer, the two outputs are fused,
and farthest-point sampling halves the fused point set that both branches
consume next. A skip-connected decoder interpolates back to full resolution
and a linear head produces per-point class logits.
"""

import logging
from abc import ABC, abstractmethod
from typing import Dict, List, NamedTuple, Optional, Tuple, Type

import numpy as np
from pydantic import BaseModel, ConfigDict

from hyperpoint.attention import SelfAttention, scalar_attention_core
from hyperpoint.exceptions import ConfigurationError, ShapeError
from hyperpoint.geom import KdTree, canonical_start, fps, idw_weights, knn_self
from hyperpoint.models import (
    NUM_STAGES,
    Backbone,
    ClassicFusion,
    FusionKind,
    InputFeatures,
    ModelConfig,
    Neighborhood,
    SkipSource,
)
from hyperpoint.nn import Linear, Module
from hyperpoint.numcore import (
    Tensor,
    add,
    concat_channels,
    gather_rows,
    hadamard,
    layer_norm,
    matmul,
    maximum,
    reduce_max,
    relu,
    reshape,
    scale,
    sub,
)

logger = logging.getLogger(__name__)

INTERPOLATION_NEIGHBORS = 3


class StagePyramid(BaseModel):
    """Precomputed geometry of one block at every scale.

    ``coords[s]`` holds the points of stage s (``coords[4]`` is the
    bottleneck), ``neighbors[s]`` their kNN tables, ``down[s]`` the FPS
    selection into stage s+1 and ``up_index[s]``/``up_weight[s]`` the
    interpolation from stage s+1 back to stage s.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    coords: List[np.ndarray]
    neighbors: List[np.ndarray]
    down: List[np.ndarray]
    up_index: List[np.ndarray]
    up_weight: List[np.ndarray]

    @classmethod
    def build(cls, coords: np.ndarray, k: int, seed: int = 0) -> "StagePyramid":
        n = coords.shape[0]
        if n % (2 ** NUM_STAGES) != 0:
            raise ShapeError(f"{n} points cannot be halved {NUM_STAGES} times")
        levels = [np.asarray(coords, dtype=np.float64)]
        neighbors, down, up_index, up_weight = [], [], [], []
        for s in range(NUM_STAGES):
            current = levels[s]
            if current.shape[0] < 2:
                raise ShapeError(f"stage {s} has {current.shape[0]} points; need at least 2")
            tree = KdTree(current)
            neighbors.append(knn_self(current, k, tree=tree))
            selected = fps(current, current.shape[0] // 2, start=canonical_start(current, seed))
            down.append(selected)
            levels.append(current[selected])
        for s in range(NUM_STAGES):
            index, weight = idw_weights(levels[s + 1], levels[s], INTERPOLATION_NEIGHBORS)
            up_index.append(index)
            up_weight.append(weight)
        return cls(coords=levels, neighbors=neighbors, down=down, up_index=up_index, up_weight=up_weight)


class ForwardResult(NamedTuple):
    """Per-point logits, penultimate features and, for late fusion, each branch's logits."""
    logits: Tensor
    features: Tensor
    branch_logits: Optional[Tuple[Tensor, Tensor]] = None


# Stage layers (backbones)

class StageLayer(Module, ABC):
    """Feature extractor applied at one encoder stage."""

    def __init__(self, in_width: int, width: int):
        super().__init__()
        self.in_width = in_width
        self.width = width

    @abstractmethod
    def __call__(self, coords: np.ndarray, feats: Tensor, neighbors: np.ndarray) -> Tensor:
        """Map ``n x in_width`` features to ``n x width``."""
        ...


class TransformerLayer(StageLayer):
    """Input map, self-attention, then a residual ReLU map and layer normalisation."""

    def __init__(self, in_width: int, width: int, config: ModelConfig, rng: np.random.Generator):
        super().__init__(in_width, width)
        self.embed = Linear(in_width, width, rng)
        self.attention = SelfAttention(width, width, config.attention, rng)
        self.out = Linear(width, width, rng)

    def __call__(self, coords, feats, neighbors):
        h = self.embed(feats)
        a = self.attention(coords, h, neighbors)
        return layer_norm(add(h, relu(self.out(a))))


class PointwiseMLPLayer(StageLayer):
    """Shared per-point two-layer perceptron; ignores neighbourhoods."""

    def __init__(self, in_width: int, width: int, config: ModelConfig, rng: np.random.Generator):
        super().__init__(in_width, width)
        self.first = Linear(in_width, width, rng)
        self.second = Linear(width, width, rng)

    def __call__(self, coords, feats, neighbors):
        return relu(self.second(relu(self.first(feats))))


class EdgeGraphLayer(StageLayer):
    """Max over each neighbourhood of a linear map of ``(f_j - f_i || f_i)``."""

    def __init__(self, in_width: int, width: int, config: ModelConfig, rng: np.random.Generator):
        super().__init__(in_width, width)
        self.edge = Linear(2 * in_width, width, rng)

    def __call__(self, coords, feats, neighbors):
        n, k = neighbors.shape
        centre = gather_rows(feats, np.repeat(np.arange(n)[:, np.newaxis], k, axis=1))
        edges = concat_channels([sub(gather_rows(feats, neighbors), centre), centre])
        return relu(reduce_max(self.edge(edges), axis=1))


BACKBONE_REGISTRY: Dict[str, Type[StageLayer]] = {
    Backbone.VSA_TRANSFORMER.value: TransformerLayer,
    Backbone.POINTWISE_MLP.value: PointwiseMLPLayer,
    Backbone.EDGE_GRAPH.value: EdgeGraphLayer,
}


def get_backbone(name: str) -> Type[StageLayer]:
    """Get stage layer class by backbone id."""
    key = name.value if isinstance(name, Backbone) else str(name).lower()
    if key not in BACKBONE_REGISTRY:
        raise ConfigurationError(f"Unknown backbone {name!r}; available: {list_backbones()}")
    return BACKBONE_REGISTRY[key]


def register_backbone(name: str, layer_class: Type[StageLayer]) -> None:
    """Register a new stage layer class."""
    BACKBONE_REGISTRY[name.lower()] = layer_class


def list_backbones() -> List[str]:
    """List all available backbone ids."""
    return list(BACKBONE_REGISTRY.keys())


# Fusion

class CrossPointAttention(Module):
    """One direction of cross attention: queries from branch a, keys and values from branch b.

    Output is ``F_a + γ · W_out(A · V_b)`` with a learnable scalar γ.
    """

    def __init__(self, width: int, embed_width: int, rng: np.random.Generator, gamma_init: float = 0.0):
        super().__init__()
        self.width = width
        self.embed_width = embed_width
        self.query = Linear(width, embed_width, rng, bias=False)
        self.key = Linear(width, embed_width, rng, bias=False)
        self.value = Linear(width, embed_width, rng, bias=False)
        self.out = Linear(embed_width, width, rng, bias=False)
        self.gamma = Tensor(gamma_init, requires_grad=True)

    def __call__(self, f_a: Tensor, f_b: Tensor, neighbors: Optional[np.ndarray] = None) -> Tensor:
        if f_a.shape != f_b.shape:
            raise ShapeError(f"cross attention needs matching stages, got {f_a.shape} and {f_b.shape}")
        attended = scalar_attention_core(self.query(f_a), self.key(f_b), self.value(f_b), neighbors)
        return add(f_a, hadamard(self.gamma, self.out(attended)))


def cross_point_attention(f_a: Tensor, f_b: Tensor, params: CrossPointAttention,
                          neighbors: Optional[np.ndarray] = None) -> Tensor:
    return params(f_a, f_b, neighbors)


def fuse_bidirectional(f_l: Tensor, f_hs: Tensor, l_from_hs: CrossPointAttention,
                       hs_from_l: CrossPointAttention,
                       neighbors: Optional[np.ndarray] = None) -> Tensor:
    """Sum of cross attention in both directions."""
    return add(l_from_hs(f_l, f_hs, neighbors), hs_from_l(f_hs, f_l, neighbors))


def fuse_classic(kind: ClassicFusion, f1: Tensor, f2: Tensor) -> Tensor:
    """Parameter-free fusion of two equally shaped feature sets."""
    if f1.shape != f2.shape:
        raise ShapeError(f"fusion needs matching shapes, got {f1.shape} and {f2.shape}")
    kind = ClassicFusion(kind)
    if kind == ClassicFusion.SUM:
        return add(f1, f2)
    if kind == ClassicFusion.CONCAT:
        return concat_channels([f1, f2])
    if kind == ClassicFusion.AVERAGE:
        return scale(add(f1, f2), 0.5)
    return maximum(f1, f2)


class BidirectionalFusion(Module):
    """Both CPA directions at one stage."""

    def __init__(self, width: int, embed_width: int, rng: np.random.Generator,
                 gamma_init: float = 0.0, dense: bool = False):
        super().__init__()
        self.dense = dense
        self.l_from_hs = CrossPointAttention(width, embed_width, rng, gamma_init)
        self.hs_from_l = CrossPointAttention(width, embed_width, rng, gamma_init)

    def __call__(self, f_l: Tensor, f_hs: Tensor, neighbors: np.ndarray) -> Tensor:
        return fuse_bidirectional(f_l, f_hs, self.l_from_hs, self.hs_from_l,
                                  None if self.dense else neighbors)


# Decoder

def interpolate(coarse: Tensor, index: np.ndarray, weights: np.ndarray) -> Tensor:
    """Inverse-distance-weighted average of each fine point's nearest coarse features."""
    n, m = index.shape
    gathered = gather_rows(coarse, index)
    w = Tensor(weights.reshape(n, 1, m))
    return reshape(matmul(w, gathered), (n, coarse.shape[-1]))


class DecoderBlock(Module):
    """Interpolate to the finer stage, concatenate the skip features, then map linearly to ``width``."""

    def __init__(self, coarse_width: int, skip_width: int, width: int, rng: np.random.Generator):
        super().__init__()
        self.linear = Linear(coarse_width + skip_width, width, rng)

    def __call__(self, coarse: Tensor, skip: Tensor, index: np.ndarray, weights: np.ndarray) -> Tensor:
        if coarse.shape[0] == 0:
            raise ShapeError("decoder needs a non-empty coarse set")
        up = interpolate(coarse, index, weights)
        return self.linear(concat_channels([up, skip]))


class Decoder(Module):
    def __init__(self, bottleneck_width: int, skip_widths: List[int], widths: List[int],
                 rng: np.random.Generator):
        super().__init__()
        self.blocks: List[DecoderBlock] = []
        coarse = bottleneck_width
        for s in reversed(range(NUM_STAGES)):
            block = DecoderBlock(coarse, skip_widths[s], widths[s], rng)
            self.add_module(f"block{s}", block)
            self.blocks.insert(0, block)
            coarse = widths[s]

    def __call__(self, bottleneck: Tensor, skips: List[Tensor], pyramid: StagePyramid) -> Tensor:
        h = bottleneck
        for s in reversed(range(NUM_STAGES)):
            h = self.blocks[s](h, skips[s], pyramid.up_index[s], pyramid.up_weight[s])
        return h


# Networks

def _stage_layers(owner: Module, prefix: str, config: ModelConfig, in_widths: List[int],
                  rng: np.random.Generator) -> List[StageLayer]:
    layer_class = get_backbone(config.backbone)
    layers = []
    for s, in_width in enumerate(in_widths):
        layer = layer_class(in_width, config.stage_widths[s], config, rng)
        owner.add_module(f"{prefix}{s}", layer)
        layers.append(layer)
    return layers


class SingleBranchNet(Module):
    """One encoder over one input (early fusion, single-modality ablation, or one late-fusion branch)."""

    def __init__(self, in_width: int, config: ModelConfig, rng: np.random.Generator):
        super().__init__()
        widths = config.stage_widths
        self.layers = _stage_layers(self, "stage", config, [in_width] + widths[:-1], rng)
        self.decoder = Decoder(widths[-1], list(widths), list(widths), rng)
        self.head = Linear(widths[0], config.num_classes, rng)

    def __call__(self, feats: Tensor, pyramid: StagePyramid) -> ForwardResult:
        skips = []
        for s, layer in enumerate(self.layers):
            feats = layer(pyramid.coords[s], feats, pyramid.neighbors[s])
            skips.append(feats)
            feats = gather_rows(feats, pyramid.down[s])
        features = self.decoder(feats, skips, pyramid)
        return ForwardResult(self.head(features), features)


class DualBranchNet(Module):
    """Geometry and spectral branches fused at every stage (CPA or a classic function)."""

    def __init__(self, geometry_width: int, spectral_width: int, config: ModelConfig,
                 rng: np.random.Generator):
        super().__init__()
        widths = config.stage_widths
        self.fusion = config.fusion
        self.skip_source = config.skip_source
        concat = (self.fusion.kind == FusionKind.MID_CLASSIC
                  and self.fusion.classic == ClassicFusion.CONCAT)
        fused = [2 * w if concat else w for w in widths]
        skip_widths = list(widths) if self.skip_source == SkipSource.RAW else fused

        self.geometry_layers = _stage_layers(self, "geometry", config, [geometry_width] + fused[:-1], rng)
        self.spectral_layers = _stage_layers(self, "spectral", config, [spectral_width] + fused[:-1], rng)
        self.decoder = Decoder(fused[-1], skip_widths, list(widths), rng)
        self.head = Linear(widths[0], config.num_classes, rng)
        # created last so the branch parameters do not depend on the fusion kind
        self.fusers: List[Optional[BidirectionalFusion]] = []
        for s, w in enumerate(widths):
            fuser = None
            if self.fusion.kind == FusionKind.MID_CPA:
                fuser = BidirectionalFusion(w, self.fusion.embed_width or w, rng,
                                            self.fusion.gamma_init, self.fusion.cpa_dense)
                self.add_module(f"cpa{s}", fuser)
            self.fusers.append(fuser)

    def fuse(self, s: int, f_l: Tensor, f_hs: Tensor, neighbors: np.ndarray) -> Tensor:
        if self.fusers[s] is not None:
            return self.fusers[s](f_l, f_hs, neighbors)
        return fuse_classic(self.fusion.classic, f_l, f_hs)

    def __call__(self, geometry: Tensor, spectral: Tensor, pyramid: StagePyramid) -> ForwardResult:
        f_l, f_hs = geometry, spectral
        skips = []
        for s in range(NUM_STAGES):
            coords, neighbors = pyramid.coords[s], pyramid.neighbors[s]
            out_l = self.geometry_layers[s](coords, f_l, neighbors)
            out_hs = self.spectral_layers[s](coords, f_hs, neighbors)
            fused = self.fuse(s, out_l, out_hs, neighbors)
            skips.append(add(out_l, out_hs) if self.skip_source == SkipSource.RAW else fused)
            f_l = f_hs = gather_rows(fused, pyramid.down[s])
        features = self.decoder(f_l, skips, pyramid)
        return ForwardResult(self.head(features), features)


class LateFusionNet(Module):
    """Two independent branches, each with decoder and head; logits mixed by α."""

    def __init__(self, geometry_width: int, spectral_width: int, config: ModelConfig,
                 rng: np.random.Generator):
        super().__init__()
        self.alpha = config.fusion.alpha
        self.geometry = SingleBranchNet(geometry_width, config, rng)
        self.spectral = SingleBranchNet(spectral_width, config, rng)

    def __call__(self, geometry: Tensor, spectral: Tensor, pyramid: StagePyramid) -> ForwardResult:
        first = self.geometry(geometry, pyramid)
        second = self.spectral(spectral, pyramid)
        logits = add(scale(first.logits, self.alpha), scale(second.logits, 1.0 - self.alpha))
        features = concat_channels([first.features, second.features])
        return ForwardResult(logits, features, (first.logits, second.logits))


class HyperPointFormer(Module):
    """Per-point segmentation network selected by a ModelConfig."""

    def __init__(self, config: ModelConfig, seed: Optional[int] = None):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(config.seed if seed is None else seed)
        kind = config.fusion.kind
        if kind == FusionKind.EARLY:
            self.net = SingleBranchNet(self.input_width, config, rng)
        elif kind == FusionKind.LATE:
            self.net = LateFusionNet(config.geometry_width, config.spectral_width, config, rng)
        else:
            self.net = DualBranchNet(config.geometry_width, config.spectral_width, config, rng)
        logger.debug(f"Built {kind.value} network with {self.num_parameters()} parameters")

    @property
    def input_width(self) -> int:
        """Width of the single-branch input for early fusion and modality ablations."""
        features = self.config.input_features
        if features == InputFeatures.GEOMETRY:
            return self.config.geometry_width
        if features == InputFeatures.SPECTRAL:
            return self.config.spectral_width
        return self.config.geometry_width + self.config.spectral_width

    def check_inputs(self, coords: np.ndarray, attrs: np.ndarray) -> None:
        n = self.config.n_input
        if coords.shape != (n, 3):
            raise ShapeError(f"expected {n} x 3 coordinates, got {coords.shape}")
        uses_spectra = self.config.input_features != InputFeatures.GEOMETRY
        if uses_spectra and attrs.shape != (n, self.config.spectral_width):
            raise ShapeError(f"expected {n} x {self.config.spectral_width} spectra, got {attrs.shape}")

    def build_pyramid(self, coords: np.ndarray) -> StagePyramid:
        return StagePyramid.build(coords, self.config.k, self.config.seed)

    def forward(self, coords: np.ndarray, attrs: np.ndarray,
                pyramid: Optional[StagePyramid] = None) -> ForwardResult:
        """Logits (n_input x C) for one normalised block."""
        coords = np.asarray(coords, dtype=np.float64)
        attrs = np.asarray(attrs, dtype=np.float64)
        self.check_inputs(coords, attrs)
        pyramid = pyramid or self.build_pyramid(coords)
        geometry = Tensor(coords)
        kind = self.config.fusion.kind
        if kind == FusionKind.EARLY:
            features = self.config.input_features
            if features == InputFeatures.GEOMETRY:
                inputs = geometry
            elif features == InputFeatures.SPECTRAL:
                inputs = Tensor(attrs)
            else:
                inputs = concat_channels([geometry, Tensor(attrs)])
            return self.net(inputs, pyramid)
        return self.net(geometry, Tensor(attrs), pyramid)

    __call__ = forward


def build_model(config: ModelConfig) -> HyperPointFormer:
    """Construct the network for ``config``; rejects unknown backbones."""
    get_backbone(config.backbone)
    if config.attention.neighborhood == Neighborhood.GLOBAL:
        logger.info("Global attention selected; cost grows quadratically with block size")
    return HyperPointFormer(config)
