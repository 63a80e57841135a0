"""Whole-image compress/decompress through the real range-coded bitstream."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor

from .bitstream import Bitstream, decode_bitstream, encode_bitstream
from .codec import Codec, QuantMode, analyze, check_image, quantize, synthesize
from .entropy import CodingTables
from .errors import FormatError


def pad_to_multiple(x: Tensor, factor: int) -> Tensor:
    """Reflect-pad the bottom/right edges so both spatial dims divide ``factor``."""
    h, w = x.shape[-2:]
    ph, pw = -h % factor, -w % factor
    if not ph and not pw:
        return x
    mode = "reflect" if ph < h and pw < w else "replicate"
    return F.pad(x, (0, pw, 0, ph), mode=mode)


@dataclass
class Compressed:
    bitstream: Bitstream
    estimated_bits: float

    @property
    def bpp(self) -> float:
        return self.bitstream.payload_bits / (self.bitstream.height * self.bitstream.width)


@torch.no_grad()
def compress(codec: Codec, x: Tensor, tables: CodingTables | None = None) -> Compressed:
    """Encode a single [1, 3, H, W] image; any H, W is accepted (padding is internal)."""
    check_image(x)
    if x.shape[0] != 1:
        raise ValueError("compress takes one image at a time")
    h, w = x.shape[-2:]
    xp = pad_to_multiple(x.to(next(codec.parameters()).dtype), codec.downsampling)
    q = quantize(analyze(xp, codec), QuantMode.INFER_ROUND)
    tables = tables or codec.entropy_model.coding_tables()
    bs = encode_bitstream(q, codec.entropy_model, (h, w), codec.model_hash(), tables)
    est = float(-torch.log2(codec.entropy_model.likelihood(q.data)).sum())
    return Compressed(bs, est)


@torch.no_grad()
def decompress(codec: Codec, bs: Bitstream, tables: CodingTables | None = None) -> Tensor:
    s = codec.downsampling
    expected = (-(-bs.height // s), -(-bs.width // s))
    if tuple(bs.latent_shape[2:]) != expected or bs.latent_shape[1] != codec.arch.latent_channels:
        raise FormatError(f"latent shape {bs.latent_shape} does not match a {bs.height}x{bs.width} image for this model")
    dtype = next(codec.parameters()).dtype
    q = decode_bitstream(bs, codec.entropy_model, tables, expected_hash=codec.model_hash(), dtype=dtype)
    x_hat = synthesize(q, codec, clamp=True)
    return x_hat[..., : bs.height, : bs.width]
