"""Scalar, offset and vector self-attention over local or global neighbourhoods.

Query/key/value projections are computed first; only the attention core
(scores, normalisation and aggregation) runs inside the optional counting
context, so recorded multiply counts reflect how attention scales with the
number of points.
"""

import logging
from contextlib import nullcontext
from fractions import Fraction
from typing import List, Optional, Tuple

import numpy as np

from hyperpoint.exceptions import ConfigurationError, ShapeError
from hyperpoint.geom import knn_self
from hyperpoint.models import AttentionConfig, AttentionKind, CoverageRow, Neighborhood, RelationalKind
from hyperpoint.nn import Linear, Module
from hyperpoint.numcore import (
    OpCounter,
    Tensor,
    add,
    counting,
    gather_rows,
    hadamard,
    matmul,
    reduce_sum,
    reshape,
    scale,
    softmax,
    softmax_lastdim,
    sub,
    transpose,
)

logger = logging.getLogger(__name__)


class AttentionParams(Module):
    """W_Q, W_K, W_V projections sharing the output width, plus an optional
    linear encoding of neighbour coordinate offsets."""

    def __init__(self, in_width: int, width: int, rng: np.random.Generator,
                 position_encoding: bool = False):
        super().__init__()
        if width < 1:
            raise ShapeError(f"attention width must be positive, got {width}")
        self.in_width = in_width
        self.width = width
        self.query = Linear(in_width, width, rng, bias=False)
        self.key = Linear(in_width, width, rng, bias=False)
        self.value = Linear(in_width, width, rng, bias=False)
        self.position = Linear(3, width, rng) if position_encoding else None

    def project(self, feats: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
        if feats.shape[-1] != self.in_width:
            raise ShapeError(f"attention expects width {self.in_width}, got shape {feats.shape}")
        return self.query(feats), self.key(feats), self.value(feats)

    def offsets(self, coords: np.ndarray, index: np.ndarray) -> Optional[Tensor]:
        """Encoded ``p_i - p_j`` for every centre i and neighbour j in ``index``."""
        if self.position is None:
            return None
        return self.position(Tensor(coords[:, np.newaxis, :] - coords[index]))


def _counted(counter: Optional[OpCounter]):
    return counting(counter) if counter is not None else nullcontext()


def full_index(n: int) -> np.ndarray:
    """Neighbourhood table in which every point sees all ``n`` points."""
    return np.tile(np.arange(n), (n, 1))


def self_index(n: int, k: int) -> np.ndarray:
    return np.repeat(np.arange(n)[:, np.newaxis], k, axis=1)


def relational(beta: RelationalKind, q: Tensor, k: Tensor) -> Tensor:
    """Combine query and key vectors elementwise: ``q - k``, ``q + k`` or ``q * k``."""
    if q.shape != k.shape:
        raise ShapeError(f"relational: shapes differ, got {q.shape} and {k.shape}")
    beta = RelationalKind(beta)
    if beta == RelationalKind.SUBTRACTION:
        return sub(q, k)
    if beta == RelationalKind.SUMMATION:
        return add(q, k)
    return hadamard(q, k)


# Attention cores

def scalar_attention_core(q: Tensor, k: Tensor, v: Tensor,
                          index: Optional[np.ndarray] = None,
                          delta: Optional[Tensor] = None) -> Tensor:
    """``softmax(QKᵀ/√d) V`` densely, or per row over the neighbours listed in ``index``."""
    n, d = q.shape
    if d == 0:
        raise ShapeError("attention width d must be positive")
    if index is None:
        scores = scale(matmul(q, transpose(k)), 1.0 / np.sqrt(d))
        return matmul(softmax_lastdim(scores), v)

    kk = index.shape[1]
    q_rep = gather_rows(q, self_index(n, kk))
    k_nb = gather_rows(k, index)
    v_nb = gather_rows(v, index)
    if delta is not None:
        v_nb = add(v_nb, delta)
    scores = scale(reduce_sum(hadamard(q_rep, k_nb), axis=-1), 1.0 / np.sqrt(d))
    weights = reshape(softmax_lastdim(scores), (n, 1, kk))
    return reshape(matmul(weights, v_nb), (n, d))


def vector_attention_core(q: Tensor, k: Tensor, v: Tensor, index: np.ndarray,
                          beta: RelationalKind, delta: Optional[Tensor] = None) -> Tensor:
    """Per-channel softmax over each row's neighbours of ``β(q_i, k_j)/√d``, weighting ``v_j``."""
    n, d = q.shape
    if index.shape[1] == 0:
        raise ShapeError("vector attention needs at least one neighbour (k = 0)")
    q_rep = gather_rows(q, self_index(n, index.shape[1]))
    k_nb = gather_rows(k, index)
    v_nb = gather_rows(v, index)
    relation = relational(beta, q_rep, k_nb)
    if delta is not None:
        relation = add(relation, delta)
        v_nb = add(v_nb, delta)
    weights = softmax(scale(relation, 1.0 / np.sqrt(d)), axis=1)
    return reduce_sum(hadamard(weights, v_nb), axis=1)


def vector_weights(q: Tensor, k: Tensor, index: np.ndarray, beta: RelationalKind) -> np.ndarray:
    """The n x k x d weight tensor of vector attention, for inspection."""
    n, d = q.shape
    relation = relational(beta, gather_rows(q, self_index(n, index.shape[1])), gather_rows(k, index))
    return softmax(scale(relation, 1.0 / np.sqrt(d)), axis=1).numpy()


# Public attention operations

def ssa(feats: Tensor, params: AttentionParams, index: Optional[np.ndarray] = None,
        counter: Optional[OpCounter] = None) -> Tensor:
    """Scalar self-attention; dense over all points when ``index`` is None."""
    q, k, v = params.project(feats)
    with _counted(counter):
        return scalar_attention_core(q, k, v, index)


def osa(feats: Tensor, params: AttentionParams, index: Optional[np.ndarray] = None,
        counter: Optional[OpCounter] = None) -> Tensor:
    """Offset self-attention: the input minus its scalar-attention output."""
    if params.in_width != params.width:
        raise ShapeError(f"offset attention needs equal widths, got {params.in_width} -> {params.width}")
    return sub(feats, ssa(feats, params, index, counter))


def vsa(feats: Tensor, params: AttentionParams, index: np.ndarray,
        beta: RelationalKind = RelationalKind.SUBTRACTION,
        counter: Optional[OpCounter] = None) -> Tensor:
    """Vector self-attention of each point over the neighbours listed in ``index``."""
    q, k, v = params.project(feats)
    with _counted(counter):
        return vector_attention_core(q, k, v, index, beta)


def _apply(kind: AttentionKind, feats: Tensor, params: AttentionParams, index: Optional[np.ndarray],
           beta: RelationalKind, delta: Optional[Tensor], counter: Optional[OpCounter]) -> Tensor:
    q, k, v = params.project(feats)
    with _counted(counter):
        if kind == AttentionKind.VSA:
            if index is None:
                index = full_index(feats.shape[0])
            return vector_attention_core(q, k, v, index, beta, delta)
        out = scalar_attention_core(q, k, v, index, delta)
    if kind == AttentionKind.OSA:
        if params.in_width != params.width:
            raise ShapeError(
                f"offset attention needs equal widths, got {params.in_width} -> {params.width}")
        return sub(feats, out)
    return out


def local_attention(coords: np.ndarray, feats: Tensor, config: AttentionConfig,
                    params: AttentionParams, index: Optional[np.ndarray] = None,
                    counter: Optional[OpCounter] = None) -> Tensor:
    """Attention within each point's k-neighbourhood (the point itself included).

    ``index`` may carry precomputed neighbourhoods; otherwise they are found
    from ``coords``.
    """
    if index is None:
        index = knn_self(coords, config.k)
    delta = params.offsets(coords, index)
    return _apply(config.kind, feats, params, index, config.beta, delta, counter)


def global_attention(feats: Tensor, config: AttentionConfig, params: AttentionParams,
                     coords: Optional[np.ndarray] = None,
                     counter: Optional[OpCounter] = None) -> Tensor:
    """Attention of every point over all points."""
    n = feats.shape[0]
    delta = None
    index = None
    if params.position is not None:
        if coords is None:
            raise ShapeError("position encoding needs coordinates")
        index = full_index(n)
        delta = params.offsets(coords, index)
    return _apply(config.kind, feats, params, index, config.beta, delta, counter)


class SelfAttention(Module):
    """Attention layer selected by an AttentionConfig."""

    def __init__(self, in_width: int, width: int, config: AttentionConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        if config.kind == AttentionKind.OSA and in_width != width:
            raise ShapeError(f"offset attention needs equal widths, got {in_width} -> {width}")
        self.params = AttentionParams(in_width, width, rng, config.position_encoding)

    def __call__(self, coords: np.ndarray, feats: Tensor, index: Optional[np.ndarray] = None,
                 counter: Optional[OpCounter] = None) -> Tensor:
        if self.config.neighborhood == Neighborhood.GLOBAL:
            return global_attention(feats, self.config, self.params, coords, counter)
        return local_attention(coords, feats, self.config, self.params, index, counter)


def coverage_table(n_input: int, k: int, stages: int) -> List[CoverageRow]:
    """Points, neighbourhood coverage and covered fraction at each encoder stage.

    A neighbourhood of k points at stage s spans as many input points as
    ``k * 2**(s-1)`` because every stage halves the point count.
    """
    if stages < 1 or k < 1:
        raise ConfigurationError(f"stages and k must be positive, got {stages}, {k}")
    if n_input % (2 ** (stages - 1)) != 0:
        raise ConfigurationError(f"{n_input} points cannot be halved {stages - 1} times")
    rows = []
    for s in range(1, stages + 1):
        coverage = k * 2 ** (s - 1)
        rows.append(CoverageRow(stage=s, points=n_input // 2 ** (s - 1), k=k, coverage=coverage,
                                percentage=Fraction(coverage, n_input)))
    return rows
