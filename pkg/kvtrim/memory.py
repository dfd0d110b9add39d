"""
Closed-form byte accounting for compressed KV caches.

Every (batch, layer, head) cache holds the same geometry, so the totals are one head's bytes
times B*L*N. Per head, ``recent`` tokens stay at full width and precision and the remaining
retained tokens sit in the pruned segment, optionally quantized. The counts follow the
constructed caches exactly: one quantized block per pruned segment, a mask only when it drops
channels.
"""
import logging
from math import ceil
from typing import List, NamedTuple, Optional, Sequence

from pydantic import BaseModel, validator

from kvtrim.cache import CacheConfig, bits_to_bytes, kept_channels
from kvtrim.exceptions import GuardException, PreconditionException
from kvtrim.quant import DEFAULT_GROUP_SIZE, GROUP_OVERHEAD_BYTES, QuantAxis, group_count

logger = logging.getLogger(__name__)


class MemoryReport(BaseModel):
    dense_bytes: int
    key_bytes: int
    value_bytes: int
    mask_bytes: int
    quant_overhead_bytes: int
    reduction_fraction: float
    equal_memory_kv_budget: Optional[int] = None

    @validator("dense_bytes", "key_bytes", "value_bytes", "mask_bytes", "quant_overhead_bytes")
    def validate_non_negative(cls, v, field):
        if v < 0:
            raise ValueError(f"{field.name} must not be negative, got {v}")
        return v

    @property
    def total_bytes(self) -> int:
        return self.key_bytes + self.value_bytes + self.mask_bytes + self.quant_overhead_bytes


class _HeadBytes(NamedTuple):
    payload: int
    mask: int
    overhead: int


def _segment_bytes(
    cfg: CacheConfig,
    pruned_len: int,
    recent_len: int,
    prune_ratio: float,
    bits: Optional[int],
    group_size: int,
    axis: QuantAxis,
) -> _HeadBytes:
    kept = kept_channels(cfg.head_dim, prune_ratio)
    payload = bits_to_bytes(recent_len * cfg.head_dim, cfg.dtype_bits)
    overhead = 0
    if bits is None:
        payload += bits_to_bytes(pruned_len * kept, cfg.dtype_bits)
    else:
        payload += bits_to_bytes(pruned_len * kept, bits)
        overhead = GROUP_OVERHEAD_BYTES * group_count(pruned_len, kept, group_size, axis)
    mask = ceil(cfg.head_dim / 8) if kept < cfg.head_dim else 0
    return _HeadBytes(payload, mask, overhead)


def dense_bytes(cfg: CacheConfig) -> int:
    return bits_to_bytes(2 * cfg.head_count * cfg.seq_len * cfg.head_dim, cfg.dtype_bits)


def report(
    cfg: CacheConfig,
    bits_k: Optional[int] = None,
    bits_v: Optional[int] = None,
    key_prune_ratio: Optional[float] = None,
    value_prune_ratio: Optional[float] = None,
    budget: Optional[int] = None,
    recent: int = 0,
    group_size: int = DEFAULT_GROUP_SIZE,
) -> MemoryReport:
    """
    Bytes of the whole cache for ``cfg`` under the given compression.

    :param cfg: Geometry. Its prune ratios and kv_budget are used when the arguments are None.

    :param bits_k: Quantization width of pruned keys, full precision when None.

    :param bits_v: Quantization width of pruned values, full precision when None.

    :param key_prune_ratio: Fraction of key channels removed.

    :param value_prune_ratio: Fraction of value channels removed.

    :param budget: Tokens retained per head after eviction.

    :param recent: Tokens per head kept unpruned and unquantized.

    :param group_size: Quantization group length.
    """
    key_prune_ratio = cfg.key_prune_ratio if key_prune_ratio is None else key_prune_ratio
    value_prune_ratio = cfg.value_prune_ratio if value_prune_ratio is None else value_prune_ratio
    for name, ratio in (("key_prune_ratio", key_prune_ratio), ("value_prune_ratio", value_prune_ratio)):
        if not 0.0 <= ratio < 1.0:
            raise PreconditionException(f"{name} must lie in [0, 1), got {ratio}")
    if recent < 0:
        raise PreconditionException(f"recent must not be negative, got {recent}")

    retained = cfg.retained_tokens if budget is None else min(budget, cfg.seq_len)
    recent_len = min(recent, retained)
    pruned_len = retained - recent_len

    keys = _segment_bytes(
        cfg, pruned_len, recent_len, key_prune_ratio, bits_k, group_size, QuantAxis.CHANNEL
    )
    values = _segment_bytes(
        cfg, pruned_len, recent_len, value_prune_ratio, bits_v, group_size, QuantAxis.TOKEN
    )
    heads = cfg.head_count
    dense = dense_bytes(cfg)
    result = MemoryReport(
        dense_bytes=dense,
        key_bytes=heads * keys.payload,
        value_bytes=heads * values.payload,
        mask_bytes=heads * (keys.mask + values.mask),
        quant_overhead_bytes=heads * (keys.overhead + values.overhead),
        reduction_fraction=0.0,
    )
    result.reduction_fraction = 1.0 - result.total_bytes / dense
    logger.debug("Modeled %d of %d dense bytes", result.total_bytes, dense)
    return result


def equal_memory_budget(cfg: CacheConfig, key_prune_ratio: float, reference_budget: int) -> int:
    """
    The largest dense kv_budget whose cache fits in the bytes of a key-pruned cache holding
    ``reference_budget`` tokens, ``cfg.recent_tokens`` of them unpruned.
    """
    if not 0.0 <= key_prune_ratio < 1.0:
        raise PreconditionException(f"key_prune_ratio must lie in [0, 1), got {key_prune_ratio}")
    if reference_budget < 1:
        raise PreconditionException(f"reference_budget must be positive, got {reference_budget}")
    if key_prune_ratio == 0.0:
        return reference_budget

    head = cfg.copy(update={"batch": 1, "layers": 1, "heads": 1})
    pruned = report(
        head,
        key_prune_ratio=key_prune_ratio,
        value_prune_ratio=0.0,
        budget=reference_budget,
        recent=cfg.recent_tokens,
    )
    dense_token_bytes = bits_to_bytes(2 * cfg.head_dim, cfg.dtype_bits)
    return pruned.total_bytes // dense_token_bytes


def batch_size_headroom(total_gpu_bytes: int, weight_bytes: int, per_seq_kv_bytes: int) -> int:
    """
    How many sequences fit next to the weights.
    """
    if per_seq_kv_bytes == 0:
        raise GuardException("A sequence needs a positive number of cache bytes")
    if weight_bytes >= total_gpu_bytes:
        raise PreconditionException(
            f"Weights of {weight_bytes} bytes leave nothing of {total_gpu_bytes} bytes"
        )
    return (total_gpu_bytes - weight_bytes) // per_seq_kv_bytes


def per_sequence_bytes(cfg: CacheConfig, memory: MemoryReport) -> int:
    return ceil(memory.total_bytes / cfg.batch)


def tpot_ratio(memory: MemoryReport, weight_bytes: int) -> float:
    """
    Modeled decode time per token relative to the dense cache, taking a step to be bound by
    the bytes it reads: the weights plus the cache.
    """
    if weight_bytes < 0:
        raise PreconditionException(f"weight_bytes must not be negative, got {weight_bytes}")
    return (weight_bytes + memory.total_bytes) / (weight_bytes + memory.dense_bytes)


class PeakMemoryPoint(BaseModel):
    batch: int
    total_bytes: int


def peak_memory_curve(
    cfg: CacheConfig, weight_bytes: int, batch_sizes: Sequence[int], **compression
) -> List[PeakMemoryPoint]:
    """
    Weights plus modeled cache bytes for each batch size; ``compression`` is passed to
    ``report``.
    """
    points = []
    for batch in batch_sizes:
        if batch < 1:
            raise PreconditionException(f"Batch sizes must be positive, got {batch}")
        memory = report(cfg.copy(update={"batch": batch}), **compression)
        points.append(PeakMemoryPoint(batch=batch, total_bytes=weight_bytes + memory.total_bytes))
    return points
