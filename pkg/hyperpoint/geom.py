"""Spatial primitives: kd-tree neighbour queries, farthest-point sampling, scene tiling
and the coordinate / spectral normalisations applied to every block."""

import logging
from typing import List, NamedTuple, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict
from sklearn.neighbors import KDTree

from hyperpoint.exceptions import DataFormatError, GeometryError
from hyperpoint.models import Block, PointCloud

logger = logging.getLogger(__name__)

DEFAULT_LEAF_SIZE = 16


class Neighbors(NamedTuple):
    """Result of a k-nearest-neighbour query."""
    indices: np.ndarray
    distances: np.ndarray
    truncated: bool


def _squared_distances(coords: np.ndarray, queries: np.ndarray, index: np.ndarray) -> np.ndarray:
    diff = coords[index] - queries[:, np.newaxis, :]
    return (diff ** 2).sum(axis=-1)


class KdTree:
    """Exact nearest-neighbour index over 2D or 3D coordinates.

    The tree itself comes from scikit-learn; ties in distance are resolved here
    so that the lower point index always comes first.
    """

    def __init__(self, coords: np.ndarray, leaf_size: int = DEFAULT_LEAF_SIZE):
        coords = np.asarray(coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[0] == 0:
            raise GeometryError(f"kd-tree needs a non-empty N x dim array, got shape {coords.shape}")
        if coords.shape[1] not in (2, 3):
            raise GeometryError(f"kd-tree supports 2 or 3 dimensions, got {coords.shape[1]}")
        finite = np.isfinite(coords).all(axis=1)
        if not finite.all():
            bad = int(np.flatnonzero(~finite)[0])
            raise GeometryError(f"non-finite coordinate at point {bad}", index=bad)
        self.coords = coords.copy()
        self.coords.flags.writeable = False
        self._tree = KDTree(self.coords, leaf_size=leaf_size)

    @property
    def num_points(self) -> int:
        return int(self.coords.shape[0])

    @property
    def dim(self) -> int:
        return int(self.coords.shape[1])

    def leaves(self) -> List[np.ndarray]:
        """Point indices held by each leaf node."""
        _, idx_array, node_data, _ = self._tree.get_arrays()
        return [np.asarray(idx_array[node["idx_start"]:node["idx_end"]])
                for node in node_data if node["is_leaf"]]

    def query(self, queries: np.ndarray, k: int) -> Neighbors:
        """``min(k, N)`` nearest points per query row, ascending distance, lower index first on ties."""
        if k < 1:
            raise GeometryError(f"k must be at least 1, got {k}")
        queries = np.asarray(queries, dtype=np.float64)
        if queries.ndim != 2 or queries.shape[1] != self.dim:
            raise GeometryError(f"queries must be M x {self.dim}, got shape {queries.shape}")
        n = self.num_points
        truncated = k > n
        if truncated:
            logger.warning(f"Requested {k} neighbours from {n} points; returning {n}")
        k = min(k, n)
        if queries.shape[0] == 0:
            return Neighbors(np.zeros((0, k), dtype=np.int64), np.zeros((0, k)), truncated)

        fetch = min(k + 1, n)
        _, candidates = self._tree.query(queries, k=fetch)
        candidates = candidates.astype(np.int64)
        d2 = _squared_distances(self.coords, queries, candidates)
        order = np.lexsort((candidates, d2), axis=-1)
        candidates = np.take_along_axis(candidates, order, axis=-1)
        d2 = np.take_along_axis(d2, order, axis=-1)

        indices = candidates[:, :k].copy()
        dist2 = d2[:, :k].copy()
        if fetch > k:
            for row in np.flatnonzero(d2[:, k] == d2[:, k - 1]):
                indices[row], dist2[row] = self._resolve_boundary_tie(queries[row], k, d2[row, k - 1])
        return Neighbors(indices, np.sqrt(dist2), truncated)

    def _resolve_boundary_tie(self, query: np.ndarray, k: int, boundary: float):
        """Re-rank every point at or inside the k-th distance when that distance is shared."""
        radius = np.sqrt(boundary) * (1.0 + 1e-9) + 1e-12
        inside = self._tree.query_radius(query[np.newaxis], r=radius)[0].astype(np.int64)
        d2 = _squared_distances(self.coords, query[np.newaxis], inside[np.newaxis])[0]
        order = np.lexsort((inside, d2))[:k]
        return inside[order], d2[order]


def build_kdtree(coords: np.ndarray, leaf_size: int = DEFAULT_LEAF_SIZE) -> KdTree:
    """Build a kd-tree over N x 2 or N x 3 coordinates."""
    return KdTree(coords, leaf_size=leaf_size)


def knn(tree: KdTree, query: np.ndarray, k: int) -> Neighbors:
    """k nearest neighbours of one point (shape ``(dim,)``) or of each row of an M x dim array."""
    query = np.asarray(query, dtype=np.float64)
    if query.ndim == 1:
        result = tree.query(query[np.newaxis], k)
        return Neighbors(result.indices[0], result.distances[0], result.truncated)
    return tree.query(query, k)


def knn_self(coords: np.ndarray, k: int, tree: Optional[KdTree] = None) -> np.ndarray:
    """Neighbourhoods of every point in ``coords``, each containing the point itself first."""
    tree = tree or KdTree(coords)
    indices = tree.query(coords, min(k, coords.shape[0])).indices
    own = np.arange(coords.shape[0])
    has_self = (indices == own[:, np.newaxis]).any(axis=1)
    for row in np.flatnonzero(~has_self):
        # a coincident point with a lower index took the slot
        indices[row] = np.concatenate([[row], indices[row, :-1]])
    return indices


def fps(coords: np.ndarray, m: int, seed: int = 0, start: Optional[int] = None) -> np.ndarray:
    """Farthest-point sampling of ``m`` indices.

    The first index is ``start`` when given, otherwise drawn uniformly from the
    seed. Every later index maximises the minimum squared distance to the
    points already selected; ``argmax`` keeps the lowest index on ties.
    """
    coords = np.asarray(coords, dtype=np.float64)
    n = coords.shape[0]
    if m < 1 or m > n:
        raise GeometryError(f"cannot sample {m} points from {n}")
    if start is None:
        start = int(np.random.default_rng(seed).integers(n))
    elif not 0 <= start < n:
        raise GeometryError(f"start index {start} outside [0, {n})", index=start)

    selected = np.empty(m, dtype=np.int64)
    selected[0] = start
    min_d = ((coords - coords[start]) ** 2).sum(axis=1)
    min_d[start] = -1.0
    for i in range(1, m):
        nxt = int(np.argmax(min_d))
        selected[i] = nxt
        np.minimum(min_d, ((coords - coords[nxt]) ** 2).sum(axis=1), out=min_d)
        min_d[nxt] = -1.0
    return selected


def canonical_start(coords: np.ndarray, seed: int) -> int:
    """Seed-chosen FPS start defined on the lexicographic order of the coordinates.

    The same geometric point is chosen whatever order the rows arrive in.
    """
    order = np.lexsort(coords.T[::-1])
    rank = int(np.random.default_rng(seed).integers(coords.shape[0]))
    return int(order[rank])


def _axis_origins(lo: float, hi: float, size: float, stride: float) -> List[float]:
    if hi - lo <= size:
        return [lo]
    origins = []
    i = 0
    while lo + i * stride <= hi - size:
        origins.append(lo + i * stride)
        i += 1
    if origins[-1] < hi - size:
        origins.append(hi - size)
    return origins


def partition_blocks(cloud, size: float = 75.0, stride: float = 25.0) -> List[Block]:
    """Tile the XY extent into overlapping square blocks; empty blocks are dropped.

    ``cloud`` may be a PointCloud or an N x 2/3 coordinate array.
    """
    if size <= 0 or not 0 < stride <= size:
        raise GeometryError(f"invalid block geometry size={size} stride={stride}")
    coords = cloud.coords if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if coords.shape[0] == 0:
        raise GeometryError("cannot partition an empty cloud")
    x, y = coords[:, 0], coords[:, 1]
    lo, hi = coords[:, :2].min(axis=0), coords[:, :2].max(axis=0)
    xs = _axis_origins(float(lo[0]), float(hi[0]), size, stride)
    ys = _axis_origins(float(lo[1]), float(hi[1]), size, stride)

    blocks = []
    for i, ox in enumerate(xs):
        x_top = hi[0] if i == len(xs) - 1 else ox + size
        in_x = (x >= ox) & (x <= x_top)
        for j, oy in enumerate(ys):
            y_top = hi[1] if j == len(ys) - 1 else oy + size
            members = np.flatnonzero(in_x & (y >= oy) & (y <= y_top))
            if members.size:
                blocks.append(Block(origin_xy=(ox, oy), size=size, stride=stride, members=members))
    logger.debug(f"Partitioned {coords.shape[0]} points into {len(blocks)} blocks "
                 f"({len(xs)} x {len(ys)} origins)")
    return blocks


def sample_block(block: Block, n: int = 4096, seed: int = 0) -> np.ndarray:
    """Exactly ``n`` member indices; without replacement when the block holds enough points."""
    if block.num_members == 0:
        raise GeometryError("cannot sample an empty block")
    rng = np.random.default_rng(seed)
    replace = block.num_members < n
    return rng.choice(block.members, size=n, replace=replace)


def normalize_coords(points: np.ndarray) -> np.ndarray:
    """Centre XY on the block's bounding-box midpoint, drop Z to its minimum and
    scale isotropically by the largest axis extent."""
    points = np.asarray(points, dtype=np.float64)
    lo, hi = points.min(axis=0), points.max(axis=0)
    shift = np.array([(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0, lo[2]])
    extent = float((hi - lo).max())
    return (points - shift) / (extent if extent > 0 else 1.0)


def _check_finite_bands(attrs: np.ndarray) -> None:
    finite = np.isfinite(attrs)
    if not finite.all():
        band = int(np.flatnonzero(~finite.all(axis=0))[0])
        raise DataFormatError(f"non-finite spectral value in band {band}")


class SpectralNormalizer(BaseModel):
    """Per-band min/max fitted on the training split and applied to any split."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    mins: np.ndarray
    maxs: np.ndarray

    @classmethod
    def fit(cls, attrs: np.ndarray) -> "SpectralNormalizer":
        attrs = np.asarray(attrs, dtype=np.float64)
        if attrs.ndim != 2 or attrs.shape[0] == 0:
            raise DataFormatError(f"cannot fit band ranges on shape {attrs.shape}")
        _check_finite_bands(attrs)
        return cls(mins=attrs.min(axis=0), maxs=attrs.max(axis=0))

    @property
    def num_bands(self) -> int:
        return int(self.mins.shape[0])

    def transform(self, attrs: np.ndarray) -> np.ndarray:
        """Scale to [0, 1], clamping values outside the fitted range; constant bands map to 0."""
        attrs = np.asarray(attrs, dtype=np.float64)
        if attrs.shape[-1] != self.num_bands:
            raise DataFormatError(f"expected {self.num_bands} bands, got {attrs.shape[-1]}")
        _check_finite_bands(attrs)
        span = self.maxs - self.mins
        safe = np.where(span > 0, span, 1.0)
        scaled = np.where(span > 0, (attrs - self.mins) / safe, 0.0)
        return np.clip(scaled, 0.0, 1.0)


def normalize_spectra(attrs: np.ndarray,
                      normalizer: Optional[SpectralNormalizer] = None) -> np.ndarray:
    """Min-max scale each band; fits on ``attrs`` itself when no normalizer is given."""
    normalizer = normalizer or SpectralNormalizer.fit(attrs)
    return normalizer.transform(attrs)


def idw_weights(coarse: np.ndarray, fine: np.ndarray, k: int = 3,
                tree: Optional[KdTree] = None) -> Sequence[np.ndarray]:
    """Inverse-distance weights of each fine point's ``k`` nearest coarse points.

    A fine point that coincides with a coarse point takes that point's weight 1.
    """
    if coarse.shape[0] == 0:
        raise GeometryError("cannot interpolate from an empty coarse set")
    tree = tree or KdTree(coarse)
    result = tree.query(fine, min(k, coarse.shape[0]))
    dist = result.distances
    exact = dist[:, 0] == 0.0
    weights = np.zeros_like(dist)
    inv = 1.0 / np.where(dist[~exact] > 0, dist[~exact], 1.0)
    weights[~exact] = inv / inv.sum(axis=1, keepdims=True)
    weights[exact, 0] = 1.0
    return result.indices, weights
