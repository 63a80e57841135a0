"""Versioned container for range-coded latents (``.jlc`` files).

Layout (little-endian header, then payload)::

    magic   4s   b"JLC\\x00"
    version u16
    flags   u16  reserved, must be 0
    height  u32  source image height (before any padding)
    width   u32  source image width
    batch   u32
    latent channels, latent height, latent width   3 x u32
    model hash  8s
    payload length  u64 (bytes)

Each latent element is coded against its channel's table.  Values outside
the table support are coded as the escape symbol followed by the zigzagged
value in two raw 16-bit chunks.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import torch

from .codec import QuantizedLatent, QuantMode
from .entropy import CodingTables, EntropyModel
from .errors import DecodeError, FormatError, ModeError
from .rangecoder import RangeDecoder, RangeEncoder

MAGIC = b"JLC\x00"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHHIIIIII8sQ")
HEADER_SIZE = _HEADER.size


@dataclass
class Bitstream:
    height: int
    width: int
    latent_shape: tuple[int, int, int, int]
    model_hash: bytes
    payload: bytes
    version: int = FORMAT_VERSION

    @property
    def payload_bits(self) -> int:
        return 8 * len(self.payload)

    def to_bytes(self) -> bytes:
        n, c, h, w = self.latent_shape
        header = _HEADER.pack(
            MAGIC, self.version, 0, self.height, self.width, n, c, h, w, self.model_hash, len(self.payload)
        )
        return header + self.payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        if len(data) < HEADER_SIZE:
            raise FormatError(f"stream of {len(data)} bytes is shorter than the {HEADER_SIZE}-byte header")
        magic, version, flags, height, width, n, c, h, w, digest, length = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}")
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported format version {version} (expected {FORMAT_VERSION})")
        if flags != 0:
            raise FormatError(f"unknown header flags {flags:#x}")
        payload = data[HEADER_SIZE:]
        if len(payload) < length:
            raise DecodeError(f"payload truncated: header declares {length} bytes, found {len(payload)}")
        if len(payload) > length:
            raise FormatError(f"{len(payload) - length} trailing bytes after payload")
        return cls(height, width, (n, c, h, w), digest, bytes(payload), version)


def _zigzag(v: int) -> int:
    return (v << 1) if v >= 0 else ((-v << 1) - 1)


def _unzigzag(z: int) -> int:
    return (z >> 1) if not z & 1 else -((z + 1) >> 1)


def _tables_as_lists(tables: CodingTables) -> list[list[int]]:
    return [cdf.tolist() for cdf in tables.cdfs]


def encode_bitstream(
    yhat: QuantizedLatent,
    em: EntropyModel,
    image_size: tuple[int, int],
    model_hash: bytes = b"\x00" * 8,
    tables: CodingTables | None = None,
) -> Bitstream:
    """Range-code an inference-mode latent against tables derived from ``em``."""
    if yhat.mode is not QuantMode.INFER_ROUND:
        raise ModeError(f"only {QuantMode.INFER_ROUND.value} latents can be entropy coded, got {yhat.mode.value}")
    data = yhat.data
    if data.dim() != 4:
        raise ValueError(f"latent must be 4-D, got shape {tuple(data.shape)}")
    shape = tuple(int(s) for s in data.shape)
    height, width = image_size
    if data.numel() == 0:
        return Bitstream(height, width, shape, model_hash, b"")
    if shape[1] != em.channels:
        raise ValueError(f"latent has {shape[1]} channels, entropy model has {em.channels}")
    tables = tables or em.coding_tables()
    cdfs = _tables_as_lists(tables)
    values = data.detach().to(torch.float64).cpu().numpy()
    if not np.all(values == np.round(values)):
        raise ModeError("latent values are not integers")
    values = values.astype(np.int64)
    enc = RangeEncoder(tables.precision)
    n, c = shape[0], shape[1]
    for b in range(n):
        for ch in range(c):
            cdf = cdfs[ch]
            offset = tables.offsets[ch]
            escape = len(cdf) - 2
            for v in values[b, ch].ravel().tolist():
                s = v - offset
                if 0 <= s < escape:
                    enc.encode(cdf[s], cdf[s + 1] - cdf[s])
                else:
                    enc.encode(cdf[escape], cdf[escape + 1] - cdf[escape])
                    z = _zigzag(v)
                    if z >> 32:
                        raise ValueError(f"latent value {v} exceeds the 32-bit escape range")
                    enc.encode_bits(z >> 16, 16)
                    enc.encode_bits(z & 0xFFFF, 16)
    return Bitstream(height, width, shape, model_hash, enc.finish())


def decode_bitstream(
    bs: Bitstream,
    em: EntropyModel,
    tables: CodingTables | None = None,
    expected_hash: bytes | None = None,
    dtype: torch.dtype = torch.float32,
) -> QuantizedLatent:
    """Exact inverse of :func:`encode_bitstream`."""
    if expected_hash is not None and bs.model_hash != expected_hash:
        raise FormatError("bitstream was produced by a different model (hash mismatch)")
    shape = bs.latent_shape
    n, c, h, w = shape
    if n * c * h * w == 0:
        if bs.payload:
            raise FormatError("empty latent with non-empty payload")
        return QuantizedLatent(torch.zeros(shape, dtype=dtype), QuantMode.INFER_ROUND)
    if c != em.channels:
        raise FormatError(f"stream has {c} latent channels, entropy model has {em.channels}")
    tables = tables or em.coding_tables()
    cdfs = _tables_as_lists(tables)
    dec = RangeDecoder(bs.payload, tables.precision)
    out = np.empty((n, c, h * w), dtype=np.int64)
    for b in range(n):
        for ch in range(c):
            cdf = cdfs[ch]
            offset = tables.offsets[ch]
            escape = len(cdf) - 2
            row = out[b, ch]
            for i in range(h * w):
                s = dec.decode_symbol(cdf)
                if s == escape:
                    z = (dec.decode_bits(16) << 16) | dec.decode_bits(16)
                    row[i] = _unzigzag(z)
                else:
                    row[i] = s + offset
    if dec.bytes_consumed != len(bs.payload):
        raise DecodeError(f"decoder consumed {dec.bytes_consumed} of {len(bs.payload)} payload bytes")
    return QuantizedLatent(torch.from_numpy(out.reshape(shape)).to(dtype), QuantMode.INFER_ROUND)
