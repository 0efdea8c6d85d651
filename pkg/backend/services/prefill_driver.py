"""Strided prefill over a stack of attention-only layers backed by cascading caches."""
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ..models.errors import ConfigError
from ..models.schemas import AttentionParams, PrefillConfig
from .attention_core import apply_rotary_by_cache_index, chunk_attend, reference_attention
from .cascade_cache import EvictionTrace, LayerKVCache, StoreFactory
from .ring_store import RingStore

logger = logging.getLogger(__name__)


def stride_chunks(seq_len: int, stride: int) -> List[Tuple[int, int]]:
    """Half-open ranges of length ``stride`` covering [0, seq_len); the last may be shorter."""
    if seq_len < 1 or stride < 1:
        raise ConfigError(f"seq_len and stride must be positive, got {seq_len} and {stride}")
    return [(start, min(start + stride, seq_len)) for start in range(0, seq_len, stride)]


class DeskModel:
    """Seeded per-layer Q/K/V projections; no MLP and no output projection.

    Layer input and output width is ``num_q_heads * dim``; a layer's output is
    its query heads' attention outputs concatenated.
    """

    def __init__(self, attn: AttentionParams, layers: int, seed: int = 0, dtype=np.float32):
        self.attn = attn
        self.layers = layers
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        width = attn.model_dim
        scale = 1.0 / np.sqrt(width)

        def draw(heads: int) -> np.ndarray:
            return (rng.standard_normal((heads, width, attn.dim)) * scale).astype(self.dtype)

        self.wq = [draw(attn.num_q_heads) for _ in range(layers)]
        self.wk = [draw(attn.num_kv_heads) for _ in range(layers)]
        self.wv = [draw(attn.num_kv_heads) for _ in range(layers)]

    @property
    def width(self) -> int:
        return self.attn.model_dim

    def project(self, layer: int, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """x [m, width] -> q [Hq, m, d], k [Hkv, m, d], v [Hkv, m, d]."""
        x = x.astype(self.dtype, copy=False)
        return (
            np.einsum("mw,hwd->hmd", x, self.wq[layer]),
            np.einsum("mw,hwd->hmd", x, self.wk[layer]),
            np.einsum("mw,hwd->hmd", x, self.wv[layer]),
        )

    def embed(self, seq_len: int, seed: int = 0) -> np.ndarray:
        """Random token embeddings [seq_len, width]."""
        rng = np.random.default_rng(seed)
        return rng.standard_normal((seq_len, self.width)).astype(self.dtype)


@dataclass
class PrefillResult:
    outputs: np.ndarray
    layer_outputs: List[np.ndarray]
    caches: List[LayerKVCache]
    traces: List[List[EvictionTrace]]


def new_caches(config: PrefillConfig, store_factory: StoreFactory = RingStore) -> List[LayerKVCache]:
    dtype = np.dtype(config.precision)
    return [LayerKVCache(config.cache_config, config.attn, dtype, store_factory) for _ in range(config.layers)]


def _merge_heads(output: np.ndarray) -> np.ndarray:
    heads, m, dim = output.shape
    return output.transpose(1, 0, 2).reshape(m, heads * dim)


def _process_chunk(
    config: PrefillConfig,
    model: DeskModel,
    caches: Sequence[LayerKVCache],
    x: np.ndarray,
    positions: np.ndarray,
) -> List[np.ndarray]:
    beta = config.score_beta
    m = len(positions)
    outputs = []
    for layer, cache in enumerate(caches):
        q, k, v = model.project(layer, x)
        result = chunk_attend(config.attn, q, cache, k, v, beta, positions)
        decay = beta**m
        for unit, contribution in zip(cache.units, result.resident_scores):
            unit.fold_scores(decay, contribution)
        cache.add_chunk(k, v, positions, result.chunk_scores)
        x = _merge_heads(result.output)
        outputs.append(x)
    return outputs


def prefill(
    config: PrefillConfig,
    inputs: np.ndarray,
    model: Optional[DeskModel] = None,
    caches: Optional[List[LayerKVCache]] = None,
) -> PrefillResult:
    """Run ``inputs`` [S, width] through every layer one stride chunk at a time.

    Each chunk reads the caches as they stood before the chunk, folds its score
    contributions, then appends its tokens in order.
    """
    dtype = np.dtype(config.precision)
    if model is None:
        model = DeskModel(config.attn, config.layers, config.seed, dtype)
    if model.layers != config.layers:
        raise ConfigError(f"model has {model.layers} layers, config asks for {config.layers}")
    inputs = np.asarray(inputs, dtype=dtype)
    if inputs.ndim != 2 or inputs.shape[1] != model.width or inputs.shape[0] < 1:
        raise ConfigError(f"inputs must be [S >= 1, {model.width}], got {inputs.shape}")
    if caches is None:
        caches = new_caches(config)

    seq_len = inputs.shape[0]
    offset = caches[0].last_pos + 1
    per_layer: List[List[np.ndarray]] = [[] for _ in caches]
    for index, (start, end) in enumerate(stride_chunks(seq_len, config.stride)):
        positions = np.arange(offset + start, offset + end)
        outputs = _process_chunk(config, model, caches, inputs[start:end], positions)
        for layer, out in enumerate(outputs):
            per_layer[layer].append(out)
        logger.debug("prefill chunk %d [%d, %d) done", index, start, end)

    layer_outputs = [np.concatenate(chunks) for chunks in per_layer]
    traces = [[unit.trace for unit in cache.units] for cache in caches]
    return PrefillResult(outputs=layer_outputs[-1], layer_outputs=layer_outputs, caches=caches, traces=traces)


def decode_step(
    config: PrefillConfig,
    embedding: np.ndarray,
    model: DeskModel,
    caches: List[LayerKVCache],
) -> np.ndarray:
    """One generation step: a stride-1 pass of a single new token."""
    embedding = np.asarray(embedding).reshape(1, -1)
    step_config = config.model_copy(update={"stride": 1})
    return prefill(step_config, embedding, model, caches).outputs[0]


def dense_reference(model: DeskModel, inputs: np.ndarray) -> List[np.ndarray]:
    """Uncached causal attention through every layer in float64, rotary by stream position."""
    attn = model.attn
    x = np.asarray(inputs, dtype=np.float64)
    positions = np.arange(x.shape[0])
    outputs = []
    for layer in range(model.layers):
        q = np.einsum("mw,hwd->hmd", x, model.wq[layer].astype(np.float64))
        k = np.einsum("mw,hwd->hmd", x, model.wk[layer].astype(np.float64))
        v = np.einsum("mw,hwd->hmd", x, model.wv[layer].astype(np.float64))
        heads = []
        for qh in range(attn.num_q_heads):
            h = qh // attn.group_size
            q_rot = apply_rotary_by_cache_index(q[qh], positions, attn.rope_base)
            k_rot = apply_rotary_by_cache_index(k[h], positions, attn.rope_base)
            heads.append(reference_attention(q_rot, k_rot, v[h], causal=True, scale=attn.scale))
        x = _merge_heads(np.stack(heads))
        outputs.append(x)
    return outputs
