"""Exact desk-scale attention over cache residents plus an in-flight chunk.

Keys are stored unrotated in the cache and rotated at read time by their rank
inside the cache (pe index), never by stream position. Chunk tokens take the
pe indices right after the residents.
"""
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ..models.errors import ConfigError, NumericError, OrderingError, UnsupportedDimensionError
from ..models.schemas import AttentionParams, HeadPolicy, HeadReduction
from .cascade_cache import LayerKVCache

logger = logging.getLogger(__name__)


def _check_finite(*arrays: np.ndarray) -> None:
    for array in arrays:
        if not np.all(np.isfinite(array)):
            raise NumericError("attention inputs contain non-finite values")


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    weights = np.exp(shifted)
    return weights / weights.sum(axis=-1, keepdims=True)


def _softmax_rows_inplace(logits: np.ndarray) -> np.ndarray:
    logits -= logits.max(axis=-1, keepdims=True)
    np.exp(logits, out=logits)
    logits /= logits.sum(axis=-1, keepdims=True)
    return logits


def reference_attention(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    causal: bool = True,
    scale: Optional[float] = None,
) -> np.ndarray:
    """softmax(q k^T * scale) v in float64.

    ``q`` may hold fewer rows than ``k``; with ``causal`` the m queries are
    aligned to the last m keys.
    """
    q, k, v = (np.asarray(a, dtype=np.float64) for a in (q, k, v))
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ConfigError("reference_attention expects 2-D q, k, v")
    m, n = q.shape[0], k.shape[0]
    if m < 1 or q.shape[1] != k.shape[1] or v.shape[0] != n:
        raise ConfigError(f"mismatched shapes q={q.shape} k={k.shape} v={v.shape}")
    if causal and m > n:
        raise ConfigError("causal attention needs at least as many keys as queries")
    _check_finite(q, k, v)

    if scale is None:
        scale = 1.0 / np.sqrt(q.shape[1])
    logits = (q @ k.T) * scale
    if causal:
        rows = np.arange(m)[:, None] + (n - m)
        logits = np.where(np.arange(n)[None, :] <= rows, logits, -np.inf)
    return _softmax_rows(logits) @ v


def _rotary_tables(pe_indices: np.ndarray, dim: int, base: float) -> Tuple[np.ndarray, np.ndarray]:
    inv_freq = 1.0 / (base ** (np.arange(0, dim, 2, dtype=np.float64) / dim))
    angles = np.outer(pe_indices.astype(np.float64), inv_freq)
    angles = np.concatenate([angles, angles], axis=-1)
    return np.cos(angles), np.sin(angles)


def _rotate_half(x: np.ndarray) -> np.ndarray:
    half = x.shape[-1] // 2
    return np.concatenate([-x[..., half:], x[..., :half]], axis=-1)


@lru_cache(maxsize=32)
def _table_bucket(length: int, dim: int, base: float) -> Tuple[np.ndarray, np.ndarray]:
    return _rotary_tables(np.arange(length), dim, base)


def _prefix_tables(count: int, dim: int, base: float) -> Tuple[np.ndarray, np.ndarray]:
    """Rotary tables for pe indices 0..count-1, built in power-of-two buckets."""
    length = 1 << max(count - 1, 0).bit_length()
    cos, sin = _table_bucket(length, dim, base)
    return cos[:count], sin[:count]


def apply_rotary_by_cache_index(
    vectors: np.ndarray,
    pe_indices: Sequence[int],
    base: float = 10000.0,
) -> np.ndarray:
    """Rotate each row of ``vectors`` [n, d] by the angle schedule of its pe index."""
    vectors = np.asarray(vectors)
    dim = vectors.shape[-1]
    if dim % 2 != 0:
        raise UnsupportedDimensionError(f"rotary encoding needs an even head dimension, got {dim}")
    pe = np.asarray(pe_indices, dtype=np.int64)
    if pe.shape != vectors.shape[:1]:
        raise ConfigError(f"{pe.shape[0]} pe indices for {vectors.shape[0]} vectors")
    if np.any(pe < 0):
        raise ConfigError("pe indices must be non-negative")
    cos, sin = _rotary_tables(pe, dim, base)
    out = vectors * cos + _rotate_half(vectors) * sin
    return out.astype(vectors.dtype, copy=False)


def _reduce(stack: np.ndarray, reduction: HeadReduction) -> np.ndarray:
    if reduction == HeadReduction.MEAN:
        return stack.mean(axis=0)
    if reduction == HeadReduction.MAX:
        return stack.max(axis=0)
    return np.median(stack, axis=0)


def reduce_heads(
    scores: np.ndarray,
    policy: HeadPolicy,
    reduction: HeadReduction,
    group_size: int,
) -> np.ndarray:
    """Collapse per-q-head scores [Hq, ...] into per-decision-unit scores [U, ...].

    Homogeneous reduces across every q-head (U = 1); independent reduces each
    GQA group of ``group_size`` consecutive q-heads onto its kv-head.
    """
    scores = np.asarray(scores)
    if policy == HeadPolicy.HOMOGENEOUS:
        return _reduce(scores, reduction)[None]
    num_q = scores.shape[0]
    if num_q % group_size != 0:
        raise ConfigError(f"{num_q} q-heads do not split into groups of {group_size}")
    groups = scores.reshape(num_q // group_size, group_size, *scores.shape[1:])
    return np.stack([_reduce(g, reduction) for g in groups])


def ema_row_weights(m: int, beta: float) -> np.ndarray:
    """beta**(m-1-i) * (1-beta) for query rows i = 0..m-1."""
    return beta ** np.arange(m - 1, -1, -1, dtype=np.float64) * (1.0 - beta)


@dataclass
class ChunkAttentionResult:
    """Output of one chunk plus per-unit EMA score contributions.

    ``resident_scores[u]`` follows unit u's positional order and is folded as
    mu <- beta**m * mu + contribution. ``chunk_scores[u][j]`` is the mass chunk
    token j received from strictly later chunk queries. ``probs`` holds each
    q-head's attention matrix when ``keep_probs`` is set.
    """

    output: np.ndarray
    resident_scores: List[np.ndarray]
    chunk_scores: List[np.ndarray]
    probs: List[np.ndarray] = field(default_factory=list)


def _check_positions(cache: LayerKVCache, positions: Sequence[int], m: int) -> None:
    positions = np.asarray(positions, dtype=np.int64)
    expected = np.arange(cache.last_pos + 1, cache.last_pos + 1 + m)
    if positions.shape != (m,) or not np.array_equal(positions, expected):
        raise OrderingError(
            f"chunk positions must continue the cached stream from {cache.last_pos + 1} contiguously"
        )


def chunk_attend(
    params: AttentionParams,
    q_chunk: np.ndarray,
    cache: LayerKVCache,
    k_chunk: np.ndarray,
    v_chunk: np.ndarray,
    beta: float,
    positions: Sequence[int],
    keep_probs: bool = False,
) -> ChunkAttentionResult:
    """Attend m chunk queries [Hq, m, d] to cache residents and causally to the chunk itself.

    ``k_chunk``/``v_chunk`` are [Hkv, m, d] and unrotated. Nothing is written
    into the cache.
    """
    if not 0.0 < beta < 1.0:
        raise ConfigError(f"beta must lie in (0, 1), got {beta}")
    q_chunk = np.asarray(q_chunk)
    num_q, m, dim = q_chunk.shape
    if num_q != params.num_q_heads or dim != params.dim:
        raise ConfigError(f"query chunk shape {q_chunk.shape} does not match attention params")
    if k_chunk.shape != (params.num_kv_heads, m, dim) or v_chunk.shape != k_chunk.shape:
        raise ConfigError(f"key/value chunk shapes {k_chunk.shape}/{v_chunk.shape} do not match queries")
    if m < 1:
        raise ConfigError("chunk must hold at least one query")
    _check_positions(cache, positions, m)
    _check_finite(q_chunk, k_chunk, v_chunk)

    dtype = q_chunk.dtype
    config = cache.config
    group = params.group_size
    homogeneous = config.head_policy == HeadPolicy.HOMOGENEOUS
    scale = dtype.type(params.scale)
    weights = ema_row_weights(m, beta)
    future = np.triu_indices(m, 1)
    # strictly-later queries only: the diagonal belongs to the query's own step
    not_later = np.triu_indices(m)
    output = np.empty_like(q_chunk)
    resident_scores: List[np.ndarray] = []
    chunk_scores: List[np.ndarray] = []
    kept: List[np.ndarray] = []
    pending: List[np.ndarray] = []

    def fold(unit_probs: List[np.ndarray]) -> None:
        reduced = _reduce(np.stack(unit_probs), config.head_reduction)
        n_res = reduced.shape[1] - m
        block = reduced[:, n_res:]
        block[not_later] = 0.0
        resident_scores.append(weights @ reduced[:, :n_res])
        chunk_scores.append(weights @ block)

    for h in range(params.num_kv_heads):
        res_k, res_v = cache.kv_for_head(h)
        n = res_k.shape[0]
        cos, sin = _prefix_tables(n + m, dim, params.rope_base)
        cos, sin = cos.astype(dtype, copy=False), sin.astype(dtype, copy=False)
        keys = np.concatenate([res_k.astype(dtype, copy=False), k_chunk[h]])
        keys = keys * cos + _rotate_half(keys) * sin
        values = np.concatenate([res_v.astype(dtype, copy=False), v_chunk[h]])
        for qh in range(h * group, (h + 1) * group):
            q_rot = q_chunk[qh] * cos[n:] + _rotate_half(q_chunk[qh]) * sin[n:]
            logits = q_rot @ keys.T
            logits *= scale
            logits[:, n:][future] = -np.inf
            p = _softmax_rows_inplace(logits)
            output[qh] = p @ values
            pending.append(p)
            if keep_probs:
                kept.append(p)
        if not homogeneous:
            fold(pending)
            pending = []
    if homogeneous:
        fold(pending)

    return ChunkAttentionResult(output=output, resident_scores=resident_scores, chunk_scores=chunk_scores, probs=kept)


def sequential_score_oracle(
    params: AttentionParams,
    q_chunk: np.ndarray,
    resident_keys: Sequence[np.ndarray],
    k_chunk: np.ndarray,
    beta: float,
    policy: HeadPolicy,
    reduction: HeadReduction,
) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    """Per-row EMA scores obtained by processing the chunk one query at a time.

    ``resident_keys[h]`` holds kv-head h's resident keys in positional order;
    for homogeneous caches every head has the same resident count. Resident
    scores start at 0 so the result is the contribution alone. Returns
    (resident, chunk) scores per decision unit in float64.
    """
    q_chunk = np.asarray(q_chunk, dtype=np.float64)
    k_chunk = np.asarray(k_chunk, dtype=np.float64)
    num_q, m, _ = q_chunk.shape
    group = params.group_size
    units = 1 if policy == HeadPolicy.HOMOGENEOUS else params.num_kv_heads
    counts = [np.asarray(k).shape[0] for k in resident_keys]
    unit_counts = counts[:1] if units == 1 else counts
    mu = [np.zeros(unit_counts[u] + m) for u in range(units)]

    for i in range(m):
        rows = []
        for qh in range(num_q):
            h = qh // group
            n = counts[h]
            keys = np.concatenate([np.asarray(resident_keys[h], dtype=np.float64), k_chunk[h, : i + 1]])
            keys = apply_rotary_by_cache_index(keys, np.arange(n + i + 1), params.rope_base)
            q = apply_rotary_by_cache_index(q_chunk[qh, i : i + 1], [n + i], params.rope_base)[0]
            logits = keys @ q * params.scale
            weights = np.exp(logits - logits.max())
            rows.append(weights / weights.sum())
        if units == 1:
            reduced = [_reduce(np.stack(rows), reduction)]
        else:
            reduced = [_reduce(np.stack(rows[u * group : (u + 1) * group]), reduction) for u in range(units)]
        for u in range(units):
            seen = unit_counts[u] + i
            # token i joins the cache after its own query; its score starts at 0
            mu[u][:seen] = beta * mu[u][:seen] + (1.0 - beta) * reduced[u][:seen]

    resident = [mu[u][: unit_counts[u]] for u in range(units)]
    chunk = [mu[u][unit_counts[u] :] for u in range(units)]
    return resident, chunk
