"""Differential affine quantization of evicted KV blocks.

Keys and values are quantized per channel per block with asymmetric
min-max affine codes (``code = round((x - min) / scale)``), keys at a wider
bit width than values. Codes are bit-packed little-endian, so at 4 bits the
low nibble of each byte holds the even-indexed element.

Packed block layout (``dumps_block``), all integers little-endian::

    magic "TTKVQB" | version u16 | block_id u64 | first_position u64 |
    block_size u32 | d_k u32 | d_v u32 | key_bits u8 | value_bits u8 |
    dtype u8 | element_bytes u8
    packed keys | packed values |
    key scale, key zero (f64 x d_k each)   -- absent when key_bits == 16
    value scale, value zero (f64 x d_v)    -- absent when value_bits == 16
    key centroid (f64 x d_k)

Traffic accounting charges each scale/zero pair 2 bytes apiece (FP16 on the
wire); in memory they are kept as float64 so round trips stay inside the
quantization error bound.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .config import PASSTHROUGH_BITS, TierConfig
from .errors import IntegrityError, ShapeError

PARAM_BYTES = 2  # bytes charged per scale or zero-point value
FORMAT_VERSION = 1
_MAGIC = b"TTKVQB"
_HEADER = struct.Struct("<6sHQQIIIBBBB")
_DTYPES = {0: np.dtype(np.float32), 1: np.dtype(np.float64), 2: np.dtype(np.float16)}
_DTYPE_CODES = {v: k for k, v in _DTYPES.items()}


@dataclass(frozen=True)
class KvBlock:
    """A contiguous run of full-precision token KV pairs."""

    block_id: int
    first_position: int
    keys: np.ndarray
    values: np.ndarray

    def __post_init__(self) -> None:
        if self.keys.ndim != 2 or self.values.ndim != 2:
            raise ShapeError("keys and values must be 2-D")
        if self.keys.shape[0] != self.values.shape[0]:
            raise ShapeError(
                f"key rows {self.keys.shape[0]} != value rows {self.values.shape[0]}"
            )

    @property
    def size(self) -> int:
        return self.keys.shape[0]

    @property
    def last_position(self) -> int:
        return self.first_position + self.size - 1


@dataclass(frozen=True)
class QuantParams:
    """Per-channel affine parameters for one matrix of one block."""

    scale: np.ndarray
    zero_point: np.ndarray
    bit_width: int


@dataclass(frozen=True, eq=False)
class QuantizedBlock:
    block_id: int
    first_position: int
    block_size: int
    d_k: int
    d_v: int
    key_bits: int
    value_bits: int
    packed_keys: bytes
    packed_values: bytes
    key_params: QuantParams | None
    value_params: QuantParams | None
    key_centroid: np.ndarray
    dtype: np.dtype
    element_bytes: int = 2

    @property
    def last_position(self) -> int:
        return self.first_position + self.block_size - 1

    @property
    def payload_bytes(self) -> int:
        return (_matrix_bytes(self.block_size * self.d_k, self.key_bits, self.element_bytes)
                + _matrix_bytes(self.block_size * self.d_v, self.value_bits, self.element_bytes))

    @property
    def param_bytes(self) -> int:
        return _param_bytes(self.d_k, self.key_bits) + _param_bytes(self.d_v, self.value_bits)

    @property
    def transfer_bytes(self) -> int:
        """Bytes moved slow -> fast when this block is fetched."""
        return self.payload_bytes + self.param_bytes

    @property
    def centroid_bytes(self) -> int:
        return self.d_k * self.element_bytes

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, QuantizedBlock):
            return NotImplemented
        return dumps_block(self) == dumps_block(other)


def _matrix_bytes(n_elements: int, bits: int, element_bytes: int) -> int:
    if bits >= PASSTHROUGH_BITS:
        return n_elements * element_bytes
    return math.ceil(n_elements * bits / 8)


def _param_bytes(channels: int, bits: int) -> int:
    return 0 if bits >= PASSTHROUGH_BITS else channels * 2 * PARAM_BYTES


def pack_codes(codes: np.ndarray, bits: int) -> bytes:
    """Pack unsigned integer codes of ``bits`` width, little-endian bit order."""
    flat = np.ascontiguousarray(codes, dtype=np.uint8).reshape(-1)
    if bits == 8:
        return flat.tobytes()
    if bits == 4:
        if flat.size % 2:
            flat = np.append(flat, np.uint8(0))
        return (flat[0::2] | (flat[1::2] << 4)).astype(np.uint8).tobytes()
    bitplanes = np.unpackbits(flat[:, None], axis=1, bitorder="little")[:, :bits]
    return np.packbits(bitplanes.reshape(-1), bitorder="little").tobytes()


def unpack_codes(buf: bytes, bits: int, count: int) -> np.ndarray:
    raw = np.frombuffer(buf, dtype=np.uint8)
    if raw.size != math.ceil(count * bits / 8):
        raise IntegrityError(f"expected {math.ceil(count * bits / 8)} packed bytes, got {raw.size}")
    if bits == 8:
        return raw.copy()
    if bits == 4:
        out = np.empty(raw.size * 2, dtype=np.uint8)
        out[0::2] = raw & 0x0F
        out[1::2] = raw >> 4
        return out[:count]
    bitstream = np.unpackbits(raw, bitorder="little")[: count * bits].reshape(count, bits)
    return np.packbits(bitstream, axis=1, bitorder="little").reshape(-1)


def quantize_channels(x: np.ndarray, bits: int) -> tuple[np.ndarray, QuantParams]:
    """Asymmetric min-max quantization of each column of ``x``.

    Constant columns get ``scale = 1`` and ``zero_point = value`` so they
    round-trip exactly. Rounding is half away from zero (all offsets are >= 0).
    """
    xf = np.asarray(x, dtype=np.float64)
    lo = xf.min(axis=0)
    hi = xf.max(axis=0)
    levels = (1 << bits) - 1
    span = hi - lo
    scale = np.where(span > 0, span / levels, 1.0)
    codes = np.floor((xf - lo) / scale + 0.5)
    codes = np.clip(codes, 0, levels).astype(np.uint8)
    return codes, QuantParams(scale=scale, zero_point=lo, bit_width=bits)


def dequantize_channels(codes: np.ndarray, params: QuantParams, dtype=np.float32) -> np.ndarray:
    return (codes.astype(np.float64) * params.scale + params.zero_point).astype(dtype)


def quantize_block(block: KvBlock, config: TierConfig) -> QuantizedBlock:
    """Compress a full-precision block with the configured key/value bit widths."""
    if block.keys.shape[1] != config.d_k or block.values.shape[1] != config.d_v:
        raise ShapeError(
            f"block widths ({block.keys.shape[1]}, {block.values.shape[1]}) do not match "
            f"config ({config.d_k}, {config.d_v})"
        )
    dtype = np.dtype(block.keys.dtype)
    if dtype not in _DTYPE_CODES:
        raise ShapeError(f"unsupported dtype {dtype}")
    centroid = block.keys.astype(np.float64).mean(axis=0)

    def encode(x: np.ndarray, bits: int) -> tuple[bytes, QuantParams | None]:
        if bits >= PASSTHROUGH_BITS:
            return np.ascontiguousarray(x, dtype=dtype).tobytes(), None
        codes, params = quantize_channels(x, bits)
        return pack_codes(codes, bits), params

    packed_k, kp = encode(block.keys, config.key_bits)
    packed_v, vp = encode(block.values, config.value_bits)
    return QuantizedBlock(
        block_id=block.block_id,
        first_position=block.first_position,
        block_size=block.size,
        d_k=config.d_k,
        d_v=config.d_v,
        key_bits=config.key_bits,
        value_bits=config.value_bits,
        packed_keys=packed_k,
        packed_values=packed_v,
        key_params=kp,
        value_params=vp,
        key_centroid=centroid,
        dtype=dtype,
        element_bytes=config.bytes_full_precision,
    )


def _decode(buf: bytes, params: QuantParams | None, bits: int, rows: int, cols: int,
            dtype: np.dtype) -> np.ndarray:
    if bits >= PASSTHROUGH_BITS:
        if len(buf) != rows * cols * dtype.itemsize:
            raise IntegrityError(f"raw payload has {len(buf)} bytes, expected {rows * cols * dtype.itemsize}")
        return np.frombuffer(buf, dtype=dtype).reshape(rows, cols).copy()
    codes = unpack_codes(buf, bits, rows * cols).reshape(rows, cols)
    return dequantize_channels(codes, params, dtype)


def dequantize_block(qblock: QuantizedBlock) -> KvBlock:
    keys = _decode(qblock.packed_keys, qblock.key_params, qblock.key_bits,
                   qblock.block_size, qblock.d_k, qblock.dtype)
    values = _decode(qblock.packed_values, qblock.value_params, qblock.value_bits,
                     qblock.block_size, qblock.d_v, qblock.dtype)
    return KvBlock(qblock.block_id, qblock.first_position, keys, values)


def compressed_block_bytes(config: TierConfig, include_params: bool = True) -> int:
    """Exact bytes of one compressed block as charged to slow -> fast traffic."""
    b, eb = config.block_size, config.bytes_full_precision
    total = _matrix_bytes(b * config.d_k, config.key_bits, eb) + _matrix_bytes(b * config.d_v, config.value_bits, eb)
    if include_params:
        total += _param_bytes(config.d_k, config.key_bits) + _param_bytes(config.d_v, config.value_bits)
    return total


def compressed_bytes(config: TierConfig, include_params: bool = True) -> float:
    """Bytes per token in the slow tier, parameters amortized over the block."""
    return compressed_block_bytes(config, include_params) / config.block_size


# -- serialization -----------------------------------------------------------

def _section_sizes(header: tuple) -> list[int]:
    _, _, _, _, bs, d_k, d_v, kb, vb, dcode, eb = header
    itemsize = _DTYPES[dcode].itemsize

    def payload(n, bits):
        return n * itemsize if bits >= PASSTHROUGH_BITS else math.ceil(n * bits / 8)

    return [
        payload(bs * d_k, kb),
        payload(bs * d_v, vb),
        0 if kb >= PASSTHROUGH_BITS else 2 * d_k * 8,
        0 if vb >= PASSTHROUGH_BITS else 2 * d_v * 8,
        d_k * 8,
    ]


def dumps_block(qblock: QuantizedBlock) -> bytes:
    header = _HEADER.pack(
        _MAGIC, FORMAT_VERSION, qblock.block_id, qblock.first_position, qblock.block_size,
        qblock.d_k, qblock.d_v, qblock.key_bits, qblock.value_bits,
        _DTYPE_CODES[np.dtype(qblock.dtype)], qblock.element_bytes,
    )
    parts = [header, qblock.packed_keys, qblock.packed_values]
    for p in (qblock.key_params, qblock.value_params):
        if p is not None:
            parts += [np.asarray(p.scale, "<f8").tobytes(), np.asarray(p.zero_point, "<f8").tobytes()]
    parts.append(np.asarray(qblock.key_centroid, "<f8").tobytes())
    return b"".join(parts)


def _read_header(buf: bytes, offset: int) -> tuple:
    if len(buf) - offset < _HEADER.size:
        raise IntegrityError("truncated block header")
    header = _HEADER.unpack_from(buf, offset)
    if header[0] != _MAGIC:
        raise IntegrityError("bad magic")
    if header[1] != FORMAT_VERSION:
        raise IntegrityError(f"unsupported format version {header[1]}")
    if header[9] not in _DTYPES:
        raise IntegrityError(f"unknown dtype code {header[9]}")
    return header


def _parse_one(buf: bytes, offset: int) -> tuple[QuantizedBlock, int]:
    header = _read_header(buf, offset)
    _, _, block_id, first, bs, d_k, d_v, kb, vb, dcode, eb = header
    sizes = _section_sizes(header)
    pos = offset + _HEADER.size
    if len(buf) - pos < sum(sizes):
        raise IntegrityError(f"payload has {len(buf) - pos} bytes, expected {sum(sizes)}")
    sections = []
    for n in sizes:
        sections.append(bytes(buf[pos:pos + n]))
        pos += n

    def params(raw: bytes, channels: int, bits: int) -> QuantParams | None:
        if not raw:
            return None
        arr = np.frombuffer(raw, "<f8").astype(np.float64)
        return QuantParams(scale=arr[:channels].copy(), zero_point=arr[channels:].copy(), bit_width=bits)

    qb = QuantizedBlock(
        block_id=block_id, first_position=first, block_size=bs, d_k=d_k, d_v=d_v,
        key_bits=kb, value_bits=vb, packed_keys=sections[0], packed_values=sections[1],
        key_params=params(sections[2], d_k, kb), value_params=params(sections[3], d_v, vb),
        key_centroid=np.frombuffer(sections[4], "<f8").astype(np.float64),
        dtype=_DTYPES[dcode], element_bytes=eb,
    )
    return qb, pos


def loads_block(buf: bytes) -> QuantizedBlock:
    qb, end = _parse_one(buf, 0)
    if end != len(buf):
        raise IntegrityError(f"{len(buf) - end} trailing bytes after block")
    return qb


def iter_blocks(buf: bytes) -> Iterator[QuantizedBlock]:
    pos = 0
    while pos < len(buf):
        qb, pos = _parse_one(buf, pos)
        yield qb


def dump_blocks(path: str | Path, blocks: Iterable[QuantizedBlock]) -> None:
    Path(path).write_bytes(b"".join(dumps_block(b) for b in blocks))


def load_blocks(path: str | Path) -> list[QuantizedBlock]:
    return list(iter_blocks(Path(path).read_bytes()))
