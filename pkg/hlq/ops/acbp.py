"""Binary container for compressed activations (ACBP).

Layout, little-endian:
    magic "ACBP" | version u16 | bits u8 | block_n u8 | rank u16 | basis bitmap u16 |
    ndims u8 | dims u32 * ndims | num_scales u32 | scales f32 * num_scales |
    payload (int8 raw, or int4 two per byte, low nibble first) | CRC32 u32 of all prior bytes
"""
import logging
import struct
import zlib
from dataclasses import asdict, dataclass

import numpy as np

from config.settings import Config
from hlq.errors.handlers import FormatError, ParameterError
from hlq.models.plan import HadamardPlan
from hlq.models.quantized import QuantizedTensor, qmax
from hlq.models.strategy import ACBPActivation

logger = logging.getLogger(__name__)

_FIXED = struct.Struct("<4sHBBHHB")
_U32 = struct.Struct("<I")
_OFFSET_VERSION = 4
_OFFSET_BITS = 6
_OFFSET_BLOCK = 7
_OFFSET_RANK = 8
_OFFSET_BITMAP = 10
_OFFSET_NDIMS = 12
_MAX_DIMS = 4


@dataclass(frozen=True)
class ACBPHeader:
    version: int
    bits: int
    block_size: int
    rank: int
    basis_bitmap: int
    dims: tuple
    scales: tuple
    payload_offset: int

    @property
    def element_count(self):
        count = 1
        for extent in self.dims:
            count *= extent
        return count

    @property
    def payload_bytes(self):
        return -(-self.element_count * self.bits // 8)

    @property
    def basis_indices(self):
        return tuple(i for i in range(self.block_size) if self.basis_bitmap >> i & 1)

    def to_dict(self):
        fields = asdict(self)
        fields["basis_indices"] = list(self.basis_indices)
        fields["dims"] = list(self.dims)
        fields["scales"] = list(self.scales)
        fields["payload_bytes"] = self.payload_bytes
        return fields


def header_size(ndims, num_scales):
    """Bytes before the payload, plus the trailing CRC."""
    return _FIXED.size + 4 * ndims + 4 + 4 * num_scales + 4


def _pack_nibbles(values):
    nibbles = (values.astype(np.int16) & 0xF).astype(np.uint8)
    if nibbles.size % 2:
        nibbles = np.append(nibbles, np.uint8(0))
    return (nibbles[0::2] | (nibbles[1::2] << 4)).astype(np.uint8).tobytes()


def _unpack_nibbles(raw, count):
    packed = np.frombuffer(raw, dtype=np.uint8)
    nibbles = np.empty(packed.size * 2, dtype=np.int16)
    nibbles[0::2] = packed & 0xF
    nibbles[1::2] = packed >> 4
    return nibbles[:count], nibbles[count:]


def acbp_pack(activation):
    quantized = activation.quantized
    plan = activation.plan
    if plan.block_size > Config.ACBP_MAX_BLOCK:
        raise ParameterError(f"container bitmap holds at most {Config.ACBP_MAX_BLOCK} bases")
    dims = quantized.shape
    if not 1 <= len(dims) <= _MAX_DIMS:
        raise ParameterError(f"container holds rank 1..{_MAX_DIMS} payloads, got {dims}")
    if quantized.scale_axis not in (None, len(dims) - 1):
        raise ParameterError("container scales must be per-tensor or per last axis")

    parts = [
        _FIXED.pack(
            Config.ACBP_MAGIC, Config.ACBP_VERSION, quantized.bits, plan.block_size,
            plan.rank, plan.basis_bitmap, len(dims),
        ),
        struct.pack(f"<{len(dims)}I", *dims),
        _U32.pack(quantized.scale.size),
        quantized.scale.astype("<f4").tobytes(),
    ]
    flat = quantized.payload.reshape(-1)
    if quantized.bits == 8:
        parts.append(flat.astype(np.int8).tobytes())
    else:
        parts.append(_pack_nibbles(flat))
    body = b"".join(parts)
    return body + _U32.pack(zlib.crc32(body) & 0xFFFFFFFF)


def read_header(data):
    """Parse and validate everything up to the payload; raises FormatError with an offset."""
    data = bytes(data)
    if len(data) < _FIXED.size:
        raise FormatError("truncated header", len(data))
    magic, version, bits, block_n, rank, bitmap, ndims = _FIXED.unpack_from(data, 0)
    if magic != Config.ACBP_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != Config.ACBP_VERSION:
        raise FormatError(f"unsupported version {version}", _OFFSET_VERSION)
    if bits not in Config.SUPPORTED_BITS:
        raise FormatError(f"unsupported bit-width {bits}", _OFFSET_BITS)
    if block_n < 2 or block_n & (block_n - 1) or block_n > Config.ACBP_MAX_BLOCK:
        raise FormatError(f"invalid block size {block_n}", _OFFSET_BLOCK)
    if not 1 <= rank <= block_n:
        raise FormatError(f"rank {rank} outside [1, {block_n}]", _OFFSET_RANK)
    if bitmap >> block_n or bin(bitmap).count("1") != rank:
        raise FormatError(f"basis bitmap {bitmap:#06x} does not hold {rank} of {block_n} bases", _OFFSET_BITMAP)
    if not 1 <= ndims <= _MAX_DIMS:
        raise FormatError(f"invalid rank {ndims}", _OFFSET_NDIMS)

    offset = _FIXED.size
    if len(data) < offset + 4 * ndims + 4:
        raise FormatError("truncated dims", len(data))
    dims = struct.unpack_from(f"<{ndims}I", data, offset)
    offset += 4 * ndims
    num_scales = _U32.unpack_from(data, offset)[0]
    if num_scales != 1 and num_scales != dims[-1]:
        raise FormatError(f"{num_scales} scales for last extent {dims[-1]}", offset)
    offset += 4
    if len(data) < offset + 4 * num_scales:
        raise FormatError("truncated scales", len(data))
    scales = struct.unpack_from(f"<{num_scales}f", data, offset)
    for index, scale in enumerate(scales):
        if not np.isfinite(scale) or scale <= 0:
            raise FormatError(f"invalid scale {scale}", offset + 4 * index)
    offset += 4 * num_scales
    return ACBPHeader(version, bits, block_n, rank, bitmap, tuple(dims), tuple(scales), offset)


def _read_payload(data, header):
    start = header.payload_offset
    end = start + header.payload_bytes
    if len(data) < end + 4:
        raise FormatError("truncated payload", len(data))
    if len(data) > end + 4:
        raise FormatError("trailing bytes after CRC", end + 4)
    raw = data[start:end]
    count = header.element_count
    limit = qmax(header.bits)
    if header.bits == 8:
        values = np.frombuffer(raw, dtype=np.int8).astype(np.int16)
        bad = np.flatnonzero(np.abs(values) > limit)
        if bad.size:
            raise FormatError(f"payload value outside [-{limit}, {limit}]", start + int(bad[0]))
    else:
        nibbles, tail = _unpack_nibbles(raw, count)
        bad = np.flatnonzero(nibbles == 8)
        if bad.size:
            raise FormatError("payload nibble -8 outside [-7, 7]", start + int(bad[0]) // 2)
        if tail.size and tail[0] != 0:
            raise FormatError("non-zero padding nibble", end - 1)
        values = np.where(nibbles >= 8, nibbles - 16, nibbles)
    stored = _U32.unpack_from(data, end)[0]
    if zlib.crc32(data[:end]) & 0xFFFFFFFF != stored:
        raise FormatError("CRC mismatch", end)
    return values.astype(np.int8).reshape(header.dims)


def acbp_unpack(data, target_axis=1, original_shape=None):
    """Rebuild the stored activation; the plan axis and unpadded shape come from the caller."""
    data = bytes(data)
    header = read_header(data)
    payload = _read_payload(data, header)
    scale_axis = None if len(header.scales) == 1 else len(header.dims) - 1
    quantized = QuantizedTensor(payload, header.bits, np.array(header.scales, dtype=np.float32), scale_axis)
    plan = HadamardPlan.from_bitmap(header.block_size, header.basis_bitmap, target_axis)
    if original_shape is None:
        shape = list(header.dims)
        if 0 <= target_axis < len(shape):
            shape[target_axis] = shape[target_axis] // plan.rank * plan.block_size
        original_shape = tuple(shape)
    return ACBPActivation(quantized, plan, tuple(original_shape))


def verify_container(data):
    """Full validation; returns the header of a sound container."""
    data = bytes(data)
    header = read_header(data)
    _read_payload(data, header)
    return header
