import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from pydantic import ValidationError

from kvtrim.attention import append_kv, prefill
from kvtrim.cache import CacheConfig, ChannelMask
from kvtrim.exceptions import FormatException, PreconditionException
from kvtrim.quant import (
    QuantAxis,
    QuantizationConfig,
    QuantizedBlock,
    dequantize,
    group_count,
    pack_codes,
    prune_then_quantize,
    quantize,
    unpack_codes,
)
from kvtrim.tensor import gather_cols

seeds = st.integers(min_value=0, max_value=2**32 - 1)


def _group_scales(block, lane_count: int, lane_length: int):
    """Scale of the group every element belongs to, shaped like the block."""
    per_lane = int(np.ceil(lane_length / block.group_size))
    scales = np.repeat(block.scales.reshape(lane_count, per_lane), block.group_size, axis=1)
    scales = scales[:, :lane_length]
    return scales.T if block.axis == QuantAxis.CHANNEL else scales


class TestQuantize:
    def test_constant_matrix_is_exact(self):
        x = np.full((5, 3), 2.5)
        block = quantize(x, 2, group_size=4)
        assert not block.scales.any()
        np.testing.assert_array_equal(dequantize(block), x)

    def test_hand_quantized_row(self):
        x = np.array([[0.0, 1.0, 2.0, 3.0]])
        block = quantize(x, 2, group_size=4, axis=QuantAxis.TOKEN)
        assert list(unpack_codes(block.packed, 2, 4)) == [0, 1, 2, 3]
        np.testing.assert_array_equal(dequantize(block), x)

    @pytest.mark.parametrize("bits", [2, 4])
    @pytest.mark.parametrize("axis", list(QuantAxis))
    def test_error_within_half_scale(self, rng, bits, axis):
        x = rng.standard_normal((8, 8))
        block = quantize(x, bits, group_size=3, axis=axis)
        lanes = (8, 8)
        bound = _group_scales(block, *lanes) / 2
        assert np.all(np.abs(dequantize(block) - x) <= bound + 1e-12)

    def test_group_counts(self):
        assert group_count(10, 3, 4, QuantAxis.CHANNEL) == 3 * 3
        assert group_count(10, 3, 4, QuantAxis.TOKEN) == 10
        assert quantize(np.zeros((10, 3)), 4, 4, QuantAxis.CHANNEL).group_count == 9

    def test_packed_length(self, rng):
        block = quantize(rng.standard_normal((5, 3)), 4, 2)
        assert len(block.packed) == 8
        assert block.nbytes == 8 + 4 * block.group_count

    def test_unsupported_bits(self, rng):
        with pytest.raises(PreconditionException):
            quantize(rng.standard_normal((2, 2)), 3)

    def test_all_zero_codes(self):
        block = quantize(np.full((3, 2), -1.0), 4, 2)
        corrupted = block.copy(update={"scales": np.ones_like(block.scales)})
        np.testing.assert_array_equal(dequantize(corrupted), np.full((3, 2), -1.0))

    def test_corrupt_group_count(self, rng):
        block = quantize(rng.standard_normal((4, 4)), 4, 2)
        with pytest.raises(FormatException):
            dequantize(block.copy(update={"scales": block.scales[:-1]}))

    def test_corrupt_packed_length(self, rng):
        block = quantize(rng.standard_normal((4, 4)), 4, 2)
        with pytest.raises(FormatException):
            dequantize(block.copy(update={"packed": block.packed + b"\0"}))

    @settings(max_examples=100, deadline=None)
    @given(seed=seeds, bits=st.sampled_from([2, 4]), axis=st.sampled_from(list(QuantAxis)))
    def test_random_error_bound(self, seed, bits, axis):
        rng = np.random.default_rng(seed)
        rows, cols = int(rng.integers(1, 12)), int(rng.integers(1, 12))
        group_size = int(rng.integers(1, 9))
        x = rng.standard_normal((rows, cols)) * rng.lognormal(size=cols)
        block = quantize(x, bits, group_size, axis)
        lanes = (cols, rows) if axis == QuantAxis.CHANNEL else (rows, cols)
        bound = _group_scales(block, *lanes) / 2
        assert np.all(np.abs(dequantize(block) - x) <= bound * (1 + 1e-9) + 1e-12)


class TestPacking:
    @pytest.mark.parametrize("bits", [2, 4])
    def test_round_trip(self, rng, bits):
        codes = rng.integers(0, 1 << bits, size=13)
        np.testing.assert_array_equal(unpack_codes(pack_codes(codes, bits), bits, 13), codes)

    def test_lsb_first(self):
        assert pack_codes([1, 2, 3, 0], 2) == bytes([0b00111001])

    def test_length_mismatch(self):
        with pytest.raises(FormatException):
            unpack_codes(b"\0\0", 4, 5)


class TestPruneThenQuantize:
    def test_full_mask_is_plain_quantize(self, rng):
        x = rng.standard_normal((6, 4))
        pruned = prune_then_quantize(x, ChannelMask.full(4), 4, 3)
        plain = quantize(x, 4, 3)
        assert pruned.packed == plain.packed
        np.testing.assert_array_equal(pruned.scales, plain.scales)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_gather_then_quantize(self, seed):
        x = np.random.default_rng(seed).standard_normal((9, 4))
        mask = ChannelMask.from_indices(4, [0, 2])
        pruned = prune_then_quantize(x, mask, 2, 4)
        oracle = quantize(gather_cols(x, [0, 2]), 2, 4)
        assert pruned.cols == 2
        assert pruned.packed == oracle.packed
        np.testing.assert_array_equal(pruned.zero_points, oracle.zero_points)

    def test_byte_count(self, rng):
        x = rng.standard_normal((64, 128))
        mask = ChannelMask.from_indices(128, range(76))
        block = prune_then_quantize(x, mask, 2, 32)
        dense_payload = 64 * 128 * 2
        assert len(block.packed) == 64 * 76 * 2 // 8
        assert len(block.packed) / dense_payload == pytest.approx(76 / 128 * 2 / 16)
        assert block.nbytes == len(block.packed) + 4 * 76 * 2


class TestQuantizationConfig:
    def test_defaults(self):
        config = QuantizationConfig()
        assert (config.bits_k, config.bits_v, config.group_size) == (4, 4, 32)

    @pytest.mark.parametrize("fields", [{"bits_k": 3}, {"bits_v": 8}, {"group_size": 0}])
    def test_invalid(self, fields):
        with pytest.raises(ValidationError):
            QuantizationConfig(**fields)


class TestResidualDiscipline:
    def _prefilled(self, rng):
        cfg = CacheConfig(
            seq_len=16, head_dim=8, obs_window=4, residual_len=6, key_prune_ratio=0.5, value_prune_ratio=0.25
        )
        quantization = QuantizationConfig(bits_k=2, bits_v=4, group_size=4)
        q, k, v = (rng.standard_normal((20, 8)) for _ in range(3))
        result = prefill(cfg, q[:16], k[:16], v[:16], quantization=quantization)
        return cfg, k, v, result.key_cache, result.value_cache

    def test_recent_rows_stay_full_precision(self, rng):
        cfg, k, v, key_cache, value_cache = self._prefilled(rng)
        np.testing.assert_array_equal(key_cache.recent_keys, k[12:16])
        np.testing.assert_array_equal(value_cache.recent_values, v[12:16])
        append_kv(key_cache, value_cache, k[16], v[16], cfg.residual_len)
        np.testing.assert_array_equal(key_cache.recent_keys, k[12:17])
        np.testing.assert_array_equal(value_cache.recent_values, v[12:17])

    def test_frozen_rows_are_quantized(self, rng):
        _, _, _, key_cache, value_cache = self._prefilled(rng)
        for cache, bits in ((key_cache, 2), (value_cache, 4)):
            assert len(cache.segments) == 1
            block = cache.segments[0]
            assert isinstance(block, QuantizedBlock)
            assert (block.bits, block.rows) == (bits, 12)
        assert key_cache.segments[0].axis == QuantAxis.CHANNEL
        assert value_cache.segments[0].axis == QuantAxis.TOKEN

    def test_freeze_at_residual_length(self, rng):
        cfg, k, v, key_cache, value_cache = self._prefilled(rng)
        frozen = key_cache.pruned_keys.copy()
        append_kv(key_cache, value_cache, k[16], v[16], cfg.residual_len)
        np.testing.assert_array_equal(key_cache.pruned_keys, frozen)
        append_kv(key_cache, value_cache, k[17], v[17], cfg.residual_len)
        for cache, width in ((key_cache, 4), (value_cache, 6)):
            assert (cache.pruned_len, cache.recent_len) == (18, 0)
            block = cache.segments[-1]
            assert isinstance(block, QuantizedBlock)
            assert (block.rows, block.cols) == (6, width)
