"""
Asymmetric low-bit group quantization for cache segments.

Keys are quantized per channel (groups run down the token axis of one channel) and values per
token (groups run along the channel axis of one token). Codes are packed LSB-first, with the
groups of one lane stored contiguously.
"""
from enum import Enum
from math import ceil
from typing import TYPE_CHECKING, Optional, Sequence

import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, validator

from kvtrim.exceptions import FormatException, PreconditionException, ShapeException
from kvtrim.tensor import Matrix, gather_cols

if TYPE_CHECKING:
    from kvtrim.cache import ChannelMask

SUPPORTED_BITS = (2, 4)
DEFAULT_GROUP_SIZE = 32
# scale and zero point are stored as two f16 values per group
GROUP_OVERHEAD_BYTES = 4


class QuantAxis(str, Enum):
    CHANNEL = "channel"
    TOKEN = "token"


class QuantizedBlock(BaseModel):
    bits: int
    group_size: int
    axis: QuantAxis
    rows: int
    cols: int
    packed: bytes
    scales: np.ndarray
    zero_points: np.ndarray

    class Config:
        arbitrary_types_allowed = True
        allow_mutation = False

    @validator("bits")
    def validate_bits(cls, v):
        if v not in SUPPORTED_BITS:
            raise ValueError(f"bits must be one of {SUPPORTED_BITS}, got {v}")
        return v

    @property
    def element_count(self) -> int:
        return self.rows * self.cols

    @property
    def group_count(self) -> int:
        return len(self.scales)

    @property
    def nbytes(self) -> int:
        return len(self.packed) + GROUP_OVERHEAD_BYTES * self.group_count


def group_count(rows: int, cols: int, group_size: int, axis: QuantAxis) -> int:
    """
    Number of groups a rows x cols block splits into, tail groups included.
    """
    if rows == 0 or cols == 0:
        return 0
    if axis == QuantAxis.CHANNEL:
        return cols * ceil(rows / group_size)
    return rows * ceil(cols / group_size)


def packed_length(elements: int, bits: int) -> int:
    return ceil(elements * bits / 8)


def pack_codes(codes: Sequence[int], bits: int) -> bytes:
    code_array = np.asarray(codes, dtype=np.uint8).reshape(-1)
    per_byte = 8 // bits
    padded = np.zeros(ceil(code_array.size / per_byte) * per_byte, dtype=np.uint8)
    padded[: code_array.size] = code_array
    shifts = (np.arange(per_byte, dtype=np.uint8) * bits).astype(np.uint8)
    packed = np.bitwise_or.reduce(padded.reshape(-1, per_byte) << shifts, axis=1)
    return packed.astype(np.uint8).tobytes()


def unpack_codes(packed: bytes, bits: int, count: int) -> NDArray[np.uint8]:
    if len(packed) != packed_length(count, bits):
        raise FormatException(
            f"Packed length {len(packed)} does not hold {count} codes of {bits} bits"
        )
    per_byte = 8 // bits
    shifts = (np.arange(per_byte, dtype=np.uint8) * bits).astype(np.uint8)
    raw = np.frombuffer(packed, dtype=np.uint8)
    codes = (raw[:, None] >> shifts) & np.uint8((1 << bits) - 1)
    return codes.reshape(-1)[:count]


def _lanes(x: Matrix, axis: QuantAxis) -> Matrix:
    return x.T if axis == QuantAxis.CHANNEL else x


def quantize(
    x: Matrix,
    bits: int,
    group_size: int = DEFAULT_GROUP_SIZE,
    axis: QuantAxis = QuantAxis.CHANNEL,
) -> QuantizedBlock:
    """
    Quantize ``x`` to ``bits``-bit codes with one scale and zero point per group.

    The scale of a group is (max - min) / (2**bits - 1) and its zero point is the minimum, so a
    constant group gets scale 0 and decodes exactly. A tail group shorter than ``group_size``
    is padded by repeating its last element, which leaves its min and max unchanged; the
    padding is never stored.
    """
    if bits not in SUPPORTED_BITS:
        raise PreconditionException(f"bits must be one of {SUPPORTED_BITS}, got {bits}")
    if group_size < 1:
        raise PreconditionException(f"group_size must be positive, got {group_size}")

    axis = QuantAxis(axis)
    lanes = _lanes(x, axis)
    lane_count, lane_length = lanes.shape
    levels = (1 << bits) - 1

    if lanes.size == 0:
        return QuantizedBlock(
            bits=bits,
            group_size=group_size,
            axis=axis,
            rows=x.shape[0],
            cols=x.shape[1],
            packed=b"",
            scales=np.zeros(0),
            zero_points=np.zeros(0),
        )

    groups_per_lane = ceil(lane_length / group_size)
    padded = np.pad(lanes, ((0, 0), (0, groups_per_lane * group_size - lane_length)), mode="edge")
    grouped = padded.reshape(lane_count, groups_per_lane, group_size)

    minimum = grouped.min(axis=2)
    scales = (grouped.max(axis=2) - minimum) / levels
    safe_scales = np.where(scales > 0, scales, 1.0)
    codes = np.rint((grouped - minimum[:, :, None]) / safe_scales[:, :, None])
    codes = np.where(scales[:, :, None] > 0, codes, 0.0)
    codes = np.clip(codes, 0, levels).astype(np.uint8)

    codes = codes.reshape(lane_count, groups_per_lane * group_size)[:, :lane_length]
    return QuantizedBlock(
        bits=bits,
        group_size=group_size,
        axis=axis,
        rows=x.shape[0],
        cols=x.shape[1],
        packed=pack_codes(codes.reshape(-1), bits),
        scales=scales.reshape(-1),
        zero_points=minimum.reshape(-1),
    )


def dequantize(q: QuantizedBlock) -> Matrix:
    lane_count, lane_length = (q.cols, q.rows) if q.axis == QuantAxis.CHANNEL else (q.rows, q.cols)
    if q.element_count == 0:
        return np.zeros((q.rows, q.cols), dtype=np.float64)

    groups_per_lane = ceil(lane_length / q.group_size)
    expected_groups = lane_count * groups_per_lane
    if len(q.scales) != expected_groups or len(q.zero_points) != expected_groups:
        raise FormatException(
            f"Block of {q.rows}x{q.cols} needs {expected_groups} groups, "
            f"got {len(q.scales)} scales and {len(q.zero_points)} zero points"
        )

    codes = unpack_codes(q.packed, q.bits, q.element_count).reshape(lane_count, lane_length)
    scales = np.repeat(q.scales.reshape(lane_count, groups_per_lane), q.group_size, axis=1)
    zero_points = np.repeat(
        q.zero_points.reshape(lane_count, groups_per_lane), q.group_size, axis=1
    )
    lanes = codes * scales[:, :lane_length] + zero_points[:, :lane_length]
    return np.ascontiguousarray(lanes.T if q.axis == QuantAxis.CHANNEL else lanes)


def prune_then_quantize(
    keys: Matrix,
    mask: "ChannelMask",
    bits: int,
    group_size: int = DEFAULT_GROUP_SIZE,
    axis: QuantAxis = QuantAxis.CHANNEL,
) -> QuantizedBlock:
    """
    Drop the channels ``mask`` does not keep, then quantize what is left.
    """
    if mask.dim != keys.shape[1]:
        raise ShapeException(f"Mask over {mask.dim} channels cannot prune {keys.shape[1]} columns")
    return quantize(gather_cols(keys, mask.kept_indices), bits, group_size, axis)


class QuantizationConfig(BaseModel):
    """
    Bit widths for the pruned key and value segments. A width of None leaves that cache at
    full precision.
    """

    bits_k: Optional[int] = 4
    bits_v: Optional[int] = 4
    group_size: int = DEFAULT_GROUP_SIZE

    @validator("bits_k", "bits_v")
    def validate_bits(cls, v, field):
        if v is not None and v not in SUPPORTED_BITS:
            raise ValueError(f"{field.name} must be one of {SUPPORTED_BITS}, got {v}")
        return v

    @validator("group_size")
    def validate_group_size(cls, v):
        if v < 1:
            raise ValueError(f"group_size must be positive, got {v}")
        return v
