"""
Prefill and segmented decode for one KV head.

The prefill output is computed from the full cache; eviction and channel pruning only shape
what later decode steps read. A decode step multiplies the masked query with the pruned
segment and the full query with the recent segment, then takes one softmax over both sets of
logits. The softmax scale is sqrt(D) of the unpruned head in both segments.
"""
import logging
from math import sqrt
from typing import List, NamedTuple, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel

from kvtrim.cache import CacheConfig, ChannelMask, SegmentedKeyCache, ValueCache
from kvtrim.eviction import EvictionKind, EvictionPolicy, retained_indices
from kvtrim.exceptions import PreconditionException, ShapeException
from kvtrim.pruner import (
    ChannelScores,
    Criterion,
    group_query_window,
    score_keys,
    score_magnitude,
    score_value_driven,
    select_top_t,
)
from kvtrim.quant import DEFAULT_GROUP_SIZE, QuantizationConfig
from kvtrim.tensor import Matrix, gather_cols, matmul, row_softmax, scatter_cols, transpose

logger = logging.getLogger(__name__)


def causal_attention_weights(q: Matrix, k: Matrix, causal: Optional[bool] = None) -> Matrix:
    """
    softmax(q k^T / sqrt(D)). With causal masking the rows of ``q`` are taken to be the last
    ``q.rows`` positions of ``k``.
    """
    if q.shape[1] != k.shape[1]:
        raise ShapeException(f"Queries {q.shape} and keys {k.shape} differ in channels")
    if causal is None:
        causal = q.shape[0] > 1
    allowed = None
    if causal:
        offset = k.shape[0] - q.shape[0]
        allowed = np.arange(k.shape[0])[None, :] <= np.arange(q.shape[0])[:, None] + offset
    return row_softmax(matmul(q, transpose(k)), sqrt(q.shape[1]), allowed)


def dense_attention(q: Matrix, k: Matrix, v: Matrix, causal: Optional[bool] = None) -> Matrix:
    if k.shape[0] != v.shape[0]:
        raise ShapeException(f"Keys {k.shape} and values {v.shape} differ in tokens")
    return matmul(causal_attention_weights(q, k, causal), v)


class PrefillResult(NamedTuple):
    key_cache: SegmentedKeyCache
    value_cache: ValueCache
    outputs: List[Matrix]
    retained: List[int]
    key_scores: ChannelScores
    value_scores: ChannelScores

    @property
    def output(self) -> Matrix:
        return self.outputs[0]


def score_values(
    criterion: Criterion, window: Matrix, keys: Matrix, values: Matrix
) -> ChannelScores:
    criterion = Criterion(criterion)
    if criterion == Criterion.L1:
        return score_magnitude(values, 1)
    if criterion == Criterion.VALUE:
        return score_value_driven(window, keys, values, window.shape[0], sqrt(keys.shape[1]))
    return score_magnitude(values, 2)


def prefill(
    cfg: CacheConfig,
    q: Union[Matrix, Sequence[Matrix]],
    k: Matrix,
    v: Matrix,
    policy: Optional[EvictionPolicy] = None,
    criterion: Criterion = Criterion.QUERY,
    quantization: Optional[QuantizationConfig] = None,
) -> PrefillResult:
    """
    Run the prompt through one KV head and build its compressed cache.

    :param cfg: Geometry and pruning ratios.

    :param q: The prompt queries, or one query matrix per member of a query group.

    :param k: The prompt keys, one row per token.

    :param v: The prompt values, one row per token.

    :param policy: The eviction policy, no eviction when None.

    :param criterion: How key (and value) channels are ranked.

    :param quantization: Low-bit settings for the pruned segments, full precision when None.

    :return: The caches, the uncompressed prefill output and the retained token indices.
    """
    queries = [q] if isinstance(q, np.ndarray) else list(q)
    seq_len, head_dim = k.shape
    if head_dim != cfg.head_dim or v.shape != k.shape:
        raise ShapeException(
            f"Keys {k.shape} and values {v.shape} do not match head_dim {cfg.head_dim}"
        )
    if len(queries) != cfg.query_group_size:
        raise ShapeException(
            f"Expected {cfg.query_group_size} query matrices per KV head, got {len(queries)}"
        )
    for member in queries:
        if member.shape != k.shape:
            raise ShapeException(f"Queries {member.shape} do not match keys {k.shape}")

    outputs = [dense_attention(member, k, v) for member in queries]

    policy = policy or EvictionPolicy()
    if policy.kind == EvictionKind.NONE:
        retained = list(range(seq_len))
    else:
        attention = sum(causal_attention_weights(member, k) for member in queries)
        retained = retained_indices(policy, attention)

    retained_keys, retained_values = k[retained], v[retained]
    window = group_query_window(queries, min(cfg.obs_window, seq_len))
    key_scores = score_keys(criterion, window, retained_keys, window.shape[0])
    value_scores = score_values(criterion, window, retained_keys, retained_values)
    key_mask = select_top_t(key_scores, cfg.key_channels)
    value_mask = select_top_t(value_scores, cfg.value_channels)

    bits_k = bits_v = None
    group_size = DEFAULT_GROUP_SIZE
    if quantization is not None:
        bits_k, bits_v, group_size = quantization.bits_k, quantization.bits_v, quantization.group_size
    key_cache = SegmentedKeyCache(head_dim, bits=bits_k, group_size=group_size)
    value_cache = ValueCache(head_dim, bits=bits_v, group_size=group_size)

    split = len(retained) - min(cfg.recent_tokens, len(retained))
    key_cache.extend(retained_keys[:split]).freeze(key_mask).extend(retained_keys[split:])
    value_cache.extend(retained_values[:split]).freeze(value_mask).extend(retained_values[split:])
    logger.debug(
        "Prefill kept %d/%d tokens, %d/%d key channels, %d/%d value channels",
        len(retained),
        seq_len,
        key_mask.kept_count,
        head_dim,
        value_mask.kept_count,
        head_dim,
    )
    return PrefillResult(key_cache, value_cache, outputs, retained, key_scores, value_scores)


class DecodeStep(BaseModel):
    query_row: np.ndarray
    output: np.ndarray
    weights: np.ndarray
    layer: int = 0
    head: int = 0

    class Config:
        arbitrary_types_allowed = True


def _kept(cache, head_dim: int):
    return range(head_dim) if cache.mask is None else cache.mask.kept_indices


def attend(
    cache: SegmentedKeyCache, vcache: ValueCache, query_row, layer: int = 0, head: int = 0
) -> DecodeStep:
    query = np.asarray(query_row, dtype=np.float64).reshape(1, -1)
    head_dim = cache.head_dim
    if query.shape[1] != head_dim:
        raise ShapeException(f"Expected a query of {head_dim} channels, got {query.shape[1]}")
    if cache.pruned_len != vcache.pruned_len or cache.recent_len != vcache.recent_len:
        raise ShapeException("Key and value caches hold different segment lengths")
    if cache.retained_len == 0:
        raise PreconditionException("Cannot attend over an empty cache")

    pruned_logits = matmul(gather_cols(query, _kept(cache, head_dim)), transpose(cache.pruned_keys))
    recent_logits = matmul(query, transpose(cache.recent_keys))
    weights = row_softmax(np.hstack([pruned_logits, recent_logits]), sqrt(head_dim))

    pruned_weights, recent_weights = weights[:, : cache.pruned_len], weights[:, cache.pruned_len:]
    output = scatter_cols(
        matmul(pruned_weights, vcache.pruned_values), _kept(vcache, head_dim), head_dim
    ) + matmul(recent_weights, vcache.recent_values)
    return DecodeStep(
        query_row=query.reshape(-1),
        output=output.reshape(-1),
        weights=weights.reshape(-1),
        layer=layer,
        head=head,
    )


def append_kv(
    cache: SegmentedKeyCache,
    vcache: ValueCache,
    key_row,
    value_row,
    residual_len: Optional[int] = None,
) -> None:
    """
    Add the new token to both recent segments. Once the recent segment holds ``residual_len``
    tokens both caches freeze with their stored masks.
    """
    cache.append(key_row)
    vcache.append(value_row)
    if residual_len is not None and cache.recent_len >= residual_len:
        cache.freeze(cache.mask or ChannelMask.full(cache.head_dim))
        vcache.freeze(vcache.mask or ChannelMask.full(vcache.head_dim))


def decode_step(
    cache: SegmentedKeyCache,
    vcache: ValueCache,
    query_row,
    key_row=None,
    value_row=None,
    residual_len: Optional[int] = None,
) -> DecodeStep:
    step = attend(cache, vcache, query_row)
    if key_row is not None:
        if value_row is None:
            raise PreconditionException("A new key needs its value row")
        append_kv(cache, vcache, key_row, value_row, residual_len)
    return step


def scoring_flops(
    criterion: Criterion, seq_len: int, obs_window: int, head_dim: int, value_pruning: bool = False
) -> int:
    """
    Arithmetic spent ranking channels during prefill.
    """
    criterion = Criterion(criterion)
    if criterion == Criterion.L1:
        key_flops = seq_len * head_dim
    elif criterion == Criterion.L2:
        key_flops = 2 * seq_len * head_dim
    else:
        key_flops = 2 * (obs_window + seq_len) * head_dim + head_dim
    if not value_pruning:
        return key_flops
    if criterion == Criterion.VALUE:
        value_flops = 4 * obs_window * seq_len * head_dim + 3 * obs_window * seq_len + 2 * obs_window * head_dim
    elif criterion == Criterion.L1:
        value_flops = seq_len * head_dim
    else:
        value_flops = 2 * seq_len * head_dim
    return key_flops + value_flops


def decode_flops(
    pruned_len: int, key_channels: int, recent_len: int, value_channels: int, head_dim: int
) -> int:
    """
    Arithmetic of one segmented decode step: both logit products, the softmax and the value
    products.
    """
    logits = 2 * (pruned_len * key_channels + recent_len * head_dim)
    softmax = 3 * (pruned_len + recent_len)
    values = 2 * (pruned_len * value_channels + recent_len * head_dim)
    return logits + softmax + values
