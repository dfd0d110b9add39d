"""
Segmented per-head KV cache.

Every head keeps a pruned segment, stored at the reduced width of its channel mask (and
optionally quantized), followed by a recent segment kept at full width and precision. Keys and
values share the layout; only the quantization axis differs.
"""
import logging
import struct
from math import ceil, floor
from typing import Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, root_validator, validator

from kvtrim.exceptions import (
    ChannelIndexException,
    ConsistencyException,
    FormatException,
    NumericalException,
    ShapeException,
)
from kvtrim.quant import (
    DEFAULT_GROUP_SIZE,
    QuantAxis,
    QuantizedBlock,
    dequantize,
    quantize,
)
from kvtrim.tensor import Matrix, gather_cols, scatter_cols

logger = logging.getLogger(__name__)

SNAPSHOT_MAGIC = b"KVTR"
SNAPSHOT_VERSION = 1
SNAPSHOT_HEADER = struct.Struct("<4sH6I")
SEGMENT_LENGTHS = struct.Struct("<2I")


def kept_channels(head_dim: int, prune_ratio: float) -> int:
    """
    T = floor((1 - ratio) * D). The small epsilon keeps products such as 0.1 * 10 from rounding
    down a whole channel.
    """
    return floor((1.0 - prune_ratio) * head_dim + 1e-9)


def bits_to_bytes(elements: int, bits: int) -> int:
    return ceil(elements * bits / 8)


class CacheConfig(BaseModel):
    batch: int = 1
    seq_len: int
    layers: int = 1
    heads: int = 1
    head_dim: int = 128
    dtype_bits: int = 16
    key_prune_ratio: float = 0.0
    value_prune_ratio: float = 0.0
    obs_window: int = 32
    residual_len: int = 128
    kv_budget: Optional[int] = None
    recent_size: Optional[int] = None
    query_group_size: int = 1

    @validator("batch", "seq_len", "layers", "heads", "head_dim", "dtype_bits", "query_group_size")
    def validate_positive(cls, v, field):
        if v < 1:
            raise ValueError(f"{field.name} must be at least 1, got {v}")
        return v

    @validator("key_prune_ratio", "value_prune_ratio")
    def validate_ratio(cls, v, field):
        if not 0.0 <= v < 1.0:
            raise ValueError(f"{field.name} must lie in [0, 1), got {v}")
        return v

    @validator("residual_len", "obs_window")
    def validate_window(cls, v, field):
        if v < 1:
            raise ValueError(f"{field.name} must be at least 1, got {v}")
        return v

    @root_validator(skip_on_failure=True)
    def validate_geometry(cls, values):
        seq_len = values["seq_len"]
        head_dim = values["head_dim"]
        for ratio_name in ("key_prune_ratio", "value_prune_ratio"):
            if kept_channels(head_dim, values[ratio_name]) < 1:
                raise ValueError(
                    f"{ratio_name}={values[ratio_name]} keeps no channel of head_dim={head_dim}"
                )
        if values["obs_window"] > seq_len:
            raise ValueError(f"obs_window {values['obs_window']} exceeds seq_len {seq_len}")
        budget = values.get("kv_budget")
        if budget is not None and not 1 <= budget <= seq_len:
            raise ValueError(f"kv_budget must lie in [1, {seq_len}], got {budget}")
        recent = values.get("recent_size")
        if recent is not None and not 0 <= recent <= seq_len:
            raise ValueError(f"recent_size must lie in [0, {seq_len}], got {recent}")
        return values

    @property
    def key_channels(self) -> int:
        return kept_channels(self.head_dim, self.key_prune_ratio)

    @property
    def value_channels(self) -> int:
        return kept_channels(self.head_dim, self.value_prune_ratio)

    @property
    def retained_tokens(self) -> int:
        return self.seq_len if self.kv_budget is None else min(self.kv_budget, self.seq_len)

    @property
    def recent_tokens(self) -> int:
        return self.obs_window if self.recent_size is None else self.recent_size

    @property
    def head_count(self) -> int:
        """Number of independent (batch, layer, head) caches."""
        return self.batch * self.layers * self.heads


class ChannelMask(BaseModel):
    """
    Kept channels of one head as a little-endian bit set, ceil(D/8) bytes long.
    """

    dim: int
    packed: bytes

    class Config:
        allow_mutation = False

    @validator("packed")
    def validate_packed(cls, v, values):
        dim = values.get("dim")
        if dim is None:
            return v
        if len(v) != ceil(dim / 8):
            raise ValueError(f"A mask over {dim} channels needs {ceil(dim / 8)} bytes, got {len(v)}")
        bits = np.unpackbits(np.frombuffer(v, dtype=np.uint8), bitorder="little")
        if bits[dim:].any():
            raise ValueError("Mask has bits set beyond its dimension")
        return v

    @classmethod
    def from_indices(cls, dim: int, indices: Iterable[int]) -> "ChannelMask":
        bits = np.zeros(dim, dtype=bool)
        for index in indices:
            if not 0 <= index < dim:
                raise ChannelIndexException(f"Channel {index} is outside [0, {dim})")
            bits[index] = True
        return cls(dim=dim, packed=np.packbits(bits, bitorder="little").tobytes())

    @classmethod
    def full(cls, dim: int) -> "ChannelMask":
        return cls.from_indices(dim, range(dim))

    @classmethod
    def from_bytes(cls, dim: int, data: bytes) -> "ChannelMask":
        return cls(dim=dim, packed=bytes(data))

    def to_bytes(self) -> bytes:
        return self.packed

    @property
    def bits(self) -> NDArray[np.bool_]:
        raw = np.unpackbits(np.frombuffer(self.packed, dtype=np.uint8), bitorder="little")
        return raw[: self.dim].astype(bool)

    @property
    def kept_indices(self) -> NDArray[np.intp]:
        return np.flatnonzero(self.bits)

    @property
    def kept_count(self) -> int:
        return int(self.bits.sum())

    @property
    def is_full(self) -> bool:
        return self.kept_count == self.dim

    @property
    def nbytes(self) -> int:
        return len(self.packed)


Segment = Union[Matrix, QuantizedBlock]


class SegmentedCache:
    """
    One head's cache for either keys or values.

    Rows arrive in the recent segment. ``freeze`` moves every recent row into the pruned
    segment, keeping only the channels of the mask; when ``bits`` is set the frozen rows are
    quantized into one block per freeze.
    """

    quant_axis = QuantAxis.CHANNEL

    def __init__(
        self,
        head_dim: int,
        bits: Optional[int] = None,
        group_size: int = DEFAULT_GROUP_SIZE,
    ):
        self.head_dim = head_dim
        self.bits = bits
        self.group_size = group_size
        self.mask: Optional[ChannelMask] = None
        self._segments: List[Segment] = []
        self._recent: List[NDArray[np.float64]] = []

    def __repr__(self):
        return (
            f"{type(self).__name__}(head_dim={self.head_dim}, pruned={self.pruned_len}, "
            f"recent={self.recent_len}, kept={self.kept_count})"
        )

    @property
    def kept_count(self) -> int:
        return self.head_dim if self.mask is None else self.mask.kept_count

    @property
    def pruned_len(self) -> int:
        return sum(segment.shape[0] if isinstance(segment, np.ndarray) else segment.rows
                   for segment in self._segments)

    @property
    def recent_len(self) -> int:
        return len(self._recent)

    @property
    def retained_len(self) -> int:
        return self.pruned_len + self.recent_len

    @property
    def segments(self) -> Tuple[Segment, ...]:
        return tuple(self._segments)

    @property
    def pruned_rows(self) -> Matrix:
        if not self._segments:
            return np.zeros((0, self.kept_count), dtype=np.float64)
        return np.vstack(
            [s if isinstance(s, np.ndarray) else dequantize(s) for s in self._segments]
        )

    @property
    def recent_rows(self) -> Matrix:
        if not self._recent:
            return np.zeros((0, self.head_dim), dtype=np.float64)
        return np.vstack(self._recent)

    def append(self, row) -> "SegmentedCache":
        vector = np.asarray(row, dtype=np.float64).reshape(-1)
        if vector.size != self.head_dim:
            raise ShapeException(f"Expected a row of {self.head_dim} channels, got {vector.size}")
        self._recent.append(vector.copy())
        return self

    def extend(self, rows) -> "SegmentedCache":
        for row in np.asarray(rows, dtype=np.float64).reshape(-1, self.head_dim):
            self.append(row)
        return self

    def freeze(self, mask: ChannelMask) -> "SegmentedCache":
        if mask.dim != self.head_dim:
            raise ShapeException(f"Mask over {mask.dim} channels cannot freeze {self.head_dim}")
        if self.mask is None:
            self.mask = mask
        elif self.mask != mask:
            raise ConsistencyException(
                f"Mask {list(mask.kept_indices)} conflicts with stored mask "
                f"{list(self.mask.kept_indices)}"
            )

        if self._recent:
            frozen = gather_cols(self.recent_rows, self.mask.kept_indices)
            if self.bits is None:
                self._segments.append(frozen)
            else:
                self._segments.append(
                    quantize(frozen, self.bits, self.group_size, self.quant_axis)
                )
            logger.debug("Froze %d rows at width %d", frozen.shape[0], frozen.shape[1])
            self._recent = []
        return self

    def dense_view(self) -> Matrix:
        """
        All retained rows at full width. Channels dropped from pruned rows read as zero.
        """
        indices = range(self.head_dim) if self.mask is None else self.mask.kept_indices
        pruned = scatter_cols(self.pruned_rows, indices, self.head_dim)
        return np.vstack([pruned, self.recent_rows])

    def nbytes(self, dtype_bits: int) -> int:
        total = bits_to_bytes(self.recent_len * self.head_dim, dtype_bits)
        for segment in self._segments:
            if isinstance(segment, np.ndarray):
                total += bits_to_bytes(segment.size, dtype_bits)
            else:
                total += segment.nbytes
        if self.mask is not None and not self.mask.is_full:
            total += self.mask.nbytes
        return total


class SegmentedKeyCache(SegmentedCache):
    quant_axis = QuantAxis.CHANNEL

    @property
    def pruned_keys(self) -> Matrix:
        return self.pruned_rows

    @property
    def recent_keys(self) -> Matrix:
        return self.recent_rows


class ValueCache(SegmentedCache):
    quant_axis = QuantAxis.TOKEN

    @property
    def pruned_values(self) -> Matrix:
        return self.pruned_rows

    @property
    def recent_values(self) -> Matrix:
        return self.recent_rows


def append_token(cache: SegmentedCache, key_row) -> SegmentedCache:
    return cache.append(key_row)


def freeze_recent(cache: SegmentedCache, mask: ChannelMask) -> SegmentedCache:
    return cache.freeze(mask)


def cache_bytes(cache: SegmentedCache, cfg: CacheConfig) -> int:
    return cache.nbytes(cfg.dtype_bits)


def total_cache_bytes(caches: Iterable[SegmentedCache], cfg: CacheConfig) -> int:
    return sum(cache_bytes(cache, cfg) for cache in caches)


class SnapshotHead(NamedTuple):
    key_mask: ChannelMask
    pruned_keys: Matrix
    recent_keys: Matrix
    value_mask: ChannelMask
    pruned_values: Matrix
    recent_values: Matrix


class Snapshot(NamedTuple):
    version: int
    batch: int
    seq_len: int
    layers: int
    heads: int
    head_dim: int
    key_channels: int
    entries: List[SnapshotHead]


def _f16_bytes(matrix: Matrix) -> bytes:
    with np.errstate(over="ignore"):
        converted = np.ascontiguousarray(matrix, dtype="<f2")
    if not np.all(np.isfinite(converted)):
        raise NumericalException(
            f"Cache entries up to {np.max(np.abs(matrix)):.6g} do not fit the f16 snapshot range"
        )
    return converted.tobytes()


def encode_snapshot(
    cfg: CacheConfig, caches: Sequence[Tuple[SegmentedKeyCache, ValueCache]]
) -> bytes:
    """
    Serialize the caches of every (batch, layer, head) in order into the little-endian
    snapshot format: a header followed, per head, by the key mask, the segment lengths, the
    f16 key segments, the value mask and the f16 value segments.
    """
    if len(caches) != cfg.head_count:
        raise ShapeException(f"Expected {cfg.head_count} head caches, got {len(caches)}")

    chunks = [
        SNAPSHOT_HEADER.pack(
            SNAPSHOT_MAGIC,
            SNAPSHOT_VERSION,
            cfg.batch,
            cfg.seq_len,
            cfg.layers,
            cfg.heads,
            cfg.head_dim,
            cfg.key_channels,
        )
    ]
    for key_cache, value_cache in caches:
        if key_cache.pruned_len != value_cache.pruned_len or key_cache.recent_len != value_cache.recent_len:
            raise ConsistencyException("Key and value caches of a head are segmented differently")
        key_mask = key_cache.mask or ChannelMask.full(cfg.head_dim)
        value_mask = value_cache.mask or ChannelMask.full(cfg.head_dim)
        if key_mask.kept_count != cfg.key_channels:
            raise ConsistencyException(
                f"Key mask keeps {key_mask.kept_count} channels, the config {cfg.key_channels}"
            )
        chunks.extend(
            [
                key_mask.to_bytes(),
                SEGMENT_LENGTHS.pack(key_cache.pruned_len, key_cache.recent_len),
                _f16_bytes(key_cache.pruned_rows),
                _f16_bytes(key_cache.recent_rows),
                value_mask.to_bytes(),
                _f16_bytes(value_cache.pruned_rows),
                _f16_bytes(value_cache.recent_rows),
            ]
        )
    return b"".join(chunks)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, length: int) -> bytes:
        if self.offset + length > len(self.data):
            raise FormatException(
                f"Snapshot truncated: wanted {length} bytes at offset {self.offset}, "
                f"{len(self.data) - self.offset} left"
            )
        chunk = self.data[self.offset: self.offset + length]
        self.offset += length
        return chunk

    def matrix(self, rows: int, cols: int) -> Matrix:
        raw = np.frombuffer(self.take(rows * cols * 2), dtype="<f2")
        return raw.astype(np.float64).reshape(rows, cols)


def decode_snapshot(data: bytes) -> Snapshot:
    reader = _Reader(data)
    magic, version, batch, seq_len, layers, heads, head_dim, key_channels = SNAPSHOT_HEADER.unpack(
        reader.take(SNAPSHOT_HEADER.size)
    )
    if magic != SNAPSHOT_MAGIC:
        raise FormatException(f"Not a cache snapshot, magic was {magic!r}")
    if version != SNAPSHOT_VERSION:
        raise FormatException(f"Unsupported snapshot version {version}")

    mask_length = ceil(head_dim / 8)
    entries = []
    for _ in range(batch * layers * heads):
        try:
            key_mask = ChannelMask.from_bytes(head_dim, reader.take(mask_length))
        except ValueError as e:
            raise FormatException(f"Corrupt key mask: {e}") from e
        if key_mask.kept_count != key_channels:
            raise FormatException(
                f"Key mask keeps {key_mask.kept_count} channels, the header says {key_channels}"
            )
        pruned_len, recent_len = SEGMENT_LENGTHS.unpack(reader.take(SEGMENT_LENGTHS.size))
        pruned_keys = reader.matrix(pruned_len, key_mask.kept_count)
        recent_keys = reader.matrix(recent_len, head_dim)
        try:
            value_mask = ChannelMask.from_bytes(head_dim, reader.take(mask_length))
        except ValueError as e:
            raise FormatException(f"Corrupt value mask: {e}") from e
        pruned_values = reader.matrix(pruned_len, value_mask.kept_count)
        recent_values = reader.matrix(recent_len, head_dim)
        entries.append(
            SnapshotHead(key_mask, pruned_keys, recent_keys, value_mask, pruned_values, recent_values)
        )
    if reader.offset != len(data):
        raise FormatException(f"{len(data) - reader.offset} trailing bytes after the last head")
    return Snapshot(version, batch, seq_len, layers, heads, head_dim, key_channels, entries)
