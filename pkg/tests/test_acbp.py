import struct
import zlib

import numpy as np
import pytest

from hlq.errors.handlers import FormatError, ParameterError
from hlq.models.plan import HadamardPlan
from hlq.models.quantized import QuantizedTensor, RngState
from hlq.models.strategy import ACBPActivation
from hlq.models.tensor import Tensor
from hlq.ops.acbp import acbp_pack, acbp_unpack, header_size, read_header, verify_container
from hlq.ops.backprop import SEQUENCE_AXIS, hlq_gw_forward_stage
from hlq.ops.hadamard import make_plan


def stored_activation(rng, shape=(2, 32, 6), bits=8, per_channel=False, rank=8):
    x = Tensor(rng.standard_normal(shape).astype(np.float32))
    return hlq_gw_forward_stage(x, make_plan(16, rank, SEQUENCE_AXIS), bits, RngState(0), per_channel=per_channel)


class TestRoundTrip:

    @pytest.mark.parametrize("bits", [4, 8])
    @pytest.mark.parametrize("per_channel", [False, True])
    def test_pack_unpack_is_byte_exact(self, rng, bits, per_channel):
        activation = stored_activation(rng, bits=bits, per_channel=per_channel)
        data = acbp_pack(activation)
        restored = acbp_unpack(data, target_axis=SEQUENCE_AXIS, original_shape=activation.original_shape)
        assert np.array_equal(restored.quantized.payload, activation.quantized.payload)
        assert np.array_equal(restored.quantized.scale, activation.quantized.scale)
        assert restored.plan == activation.plan
        assert restored.original_shape == activation.original_shape
        assert acbp_pack(restored) == data

    def test_odd_element_count_int4(self):
        payload = QuantizedTensor(np.array([[1, -7, 3]], dtype=np.int8), 4, [0.5])
        odd = ACBPActivation(payload, make_plan(16, 8, 1), (1, 6))
        data = acbp_pack(odd)
        assert len(data) == header_size(2, 1) + 2
        assert np.array_equal(acbp_unpack(data).quantized.payload, payload.payload)

    def test_default_original_shape_from_header(self, rng):
        activation = stored_activation(rng, shape=(2, 32, 6))
        restored = acbp_unpack(acbp_pack(activation), target_axis=SEQUENCE_AXIS)
        assert restored.original_shape == (2, 32, 6)

    def test_empty_batch_is_header_only(self):
        payload = QuantizedTensor(np.zeros((0, 8, 4), dtype=np.int8), 8, [1.0])
        data = acbp_pack(ACBPActivation(payload, make_plan(16, 8, 1), (0, 16, 4)))
        assert len(data) == header_size(3, 1)
        assert verify_container(data).dims == (0, 8, 4)

    @pytest.mark.parametrize("B, L, I", [(1, 16, 1), (2, 16, 7), (3, 48, 5), (1, 20, 9), (5, 17, 3),
                                         (2, 33, 2), (4, 64, 8), (1, 1, 1), (3, 31, 4), (2, 80, 3)])
    def test_default_payload_byte_count(self, rng, B, L, I):
        activation = stored_activation(rng, shape=(B, L, I))
        data = acbp_pack(activation)
        expected = B * (-(-L // 16) * 8) * I
        assert read_header(data).payload_bytes == expected
        assert len(data) == header_size(3, 1) + expected
        if L % 16 == 0:
            assert 8 * expected == 4 * B * L * I


class TestHeader:

    def test_defaults_container_fields(self, rng):
        header = verify_container(acbp_pack(stored_activation(rng)))
        assert (header.bits, header.block_size, header.rank) == (8, 16, 8)
        assert header.basis_indices == make_plan(16, 8).basis_indices
        assert header.dims == (2, 16, 6)
        assert len(header.scales) == 1

    def test_to_dict_is_json_ready(self, rng):
        fields = read_header(acbp_pack(stored_activation(rng))).to_dict()
        assert fields["bits"] == 8
        assert fields["dims"] == [2, 16, 6]
        assert fields["payload_bytes"] == 2 * 16 * 6

    def test_bad_magic(self, rng):
        data = bytearray(acbp_pack(stored_activation(rng)))
        data[0:4] = b"NOPE"
        with pytest.raises(FormatError) as info:
            read_header(bytes(data))
        assert info.value.offset == 0

    def test_truncated(self, rng):
        data = acbp_pack(stored_activation(rng))
        for cut in (0, 5, 20, len(data) - 1):
            with pytest.raises(FormatError):
                verify_container(data[:cut])

    def test_trailing_bytes(self, rng):
        with pytest.raises(FormatError):
            verify_container(acbp_pack(stored_activation(rng)) + b"\x00")


class TestCorruption:

    def test_flipped_payload_bit_fails_crc(self, rng):
        data = bytearray(acbp_pack(stored_activation(rng)))
        data[-10] ^= 0x01
        with pytest.raises(FormatError):
            verify_container(bytes(data))

    def test_out_of_range_int4_nibble(self, rng):
        activation = stored_activation(rng, bits=4)
        data = bytearray(acbp_pack(activation))
        header = read_header(bytes(data))
        data[header.payload_offset] = (data[header.payload_offset] & 0xF0) | 0x8
        body = bytes(data[:-4])
        data[-4:] = struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
        with pytest.raises(FormatError) as info:
            verify_container(bytes(data))
        assert info.value.offset == header.payload_offset

    def test_bit_flip_fuzz(self, rng):
        data = acbp_pack(stored_activation(rng, bits=4))
        for _ in range(1000):
            corrupted = bytearray(data)
            position = int(rng.integers(0, len(data)))
            corrupted[position] ^= 1 << int(rng.integers(0, 8))
            with pytest.raises(FormatError) as info:
                verify_container(bytes(corrupted))
            assert info.value.offset is not None


class TestPackErrors:

    def test_block_size_beyond_bitmap(self):
        payload = QuantizedTensor(np.zeros((1, 4, 2), dtype=np.int8), 8, [1.0])
        with pytest.raises(ParameterError):
            acbp_pack(ACBPActivation(payload, HadamardPlan(32, 1, (0, 1, 2, 3)), (1, 32, 2)))

    def test_scales_on_inner_axis(self):
        payload = QuantizedTensor(np.zeros((1, 4, 2), dtype=np.int8), 8, [1.0] * 4, scale_axis=1)
        with pytest.raises(ParameterError):
            acbp_pack(ACBPActivation(payload, make_plan(16, 4, 1), (1, 16, 2)))
