"""Bit-packed ±1 tensors and the XNOR-popcount layers built on them.

Bit order is fixed: row-major, LSB-first within each little-endian 64-bit
word; a set bit encodes +1. Trailing bits of the last word in a row are zero.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from .. import bitops


class PackError(ValueError):
    pass


@dataclass
class PackedBitTensor:
    shape: tuple  # logical shape of the ±1 tensor
    words: np.ndarray  # uint64, last axis indexes words
    valid_bits: int  # meaningful bits per packed row
    pad_mask: np.ndarray | None = None  # uint64 words; 0 bits never contribute
    layout: str = "rows"

    @property
    def nbytes(self) -> int:
        return self.words.nbytes


def _words_for(bits: int) -> int:
    return (bits + 63) // 64


def pack_rows(bits: np.ndarray) -> np.ndarray:
    """bool (..., K) -> uint64 (..., ceil(K/64)), LSB-first."""
    k = bits.shape[-1]
    nw = _words_for(k)
    padded = np.zeros(bits.shape[:-1] + (nw * 64,), dtype=bool)
    padded[..., :k] = bits
    packed = np.packbits(padded, axis=-1, bitorder="little")
    return np.ascontiguousarray(packed).view("<u8").astype(np.uint64, copy=False)


def unpack_rows(words: np.ndarray, k: int) -> np.ndarray:
    """uint64 (..., W) -> bool (..., K)."""
    as_bytes = np.ascontiguousarray(words.astype("<u8", copy=False)).view(np.uint8)
    bits = np.unpackbits(as_bytes, axis=-1, bitorder="little")
    return bits[..., :k].astype(bool)


def _check_pm1(x: np.ndarray) -> None:
    if not np.all((x == 1) | (x == -1)):
        raise PackError("pack_bits expects entries exactly +1 or -1")


def pack_bits(x) -> PackedBitTensor:
    """Pack a ±1 tensor along its last axis (a 1-D tensor is one row)."""
    x = np.asarray(x)
    _check_pm1(x)
    rows = x.reshape(1, -1) if x.ndim <= 1 else x
    return PackedBitTensor(x.shape, pack_rows(rows > 0), rows.shape[-1])


def unpack(p: PackedBitTensor) -> np.ndarray:
    """Inverse of the matching pack routine; returns float32 ±1 values."""
    if p.layout == "rows":
        bits = unpack_rows(p.words, p.valid_bits)
        return np.where(bits, 1.0, -1.0).astype(np.float32).reshape(p.shape)
    if p.layout == "conv_weight":
        cout, cin = p.shape[:2]
        bits = unpack_rows(p.words, cin)  # (Cout, 9, Cin)
        vals = np.where(bits, 1.0, -1.0).astype(np.float32)
        return vals.transpose(0, 2, 1).reshape(cout, cin, 3, 3)
    if p.layout == "conv_input":
        n, c, h, w = p.shape
        bits = unpack_rows(p.words[:, 1:-1, 1:-1], c)  # (N, H, W, C)
        vals = np.where(bits, 1.0, -1.0).astype(np.float32)
        return vals.transpose(0, 3, 1, 2)
    raise PackError(f"unknown layout {p.layout!r}")


def pack_conv_weight(w) -> PackedBitTensor:
    """(Cout, Cin, 3, 3) ±1 -> words (Cout, 9, Cw) packed along Cin per tap."""
    w = np.asarray(w)
    _check_pm1(w)
    cout, cin = w.shape[:2]
    taps = w.reshape(cout, cin, 9).transpose(0, 2, 1)
    return PackedBitTensor(w.shape, pack_rows(taps > 0), cin, layout="conv_weight")


def pack_conv_input(x) -> PackedBitTensor:
    """(N, C, H, W) ±1 -> words (N, H+2, W+2, Cw) with a zero ring and pad mask."""
    x = np.asarray(x)
    unbatched = x.ndim == 3
    if unbatched:
        x = x[None]
    _check_pm1(x)
    n, c, h, w = x.shape
    inner = pack_rows(x.transpose(0, 2, 3, 1) > 0)
    nw = inner.shape[-1]
    words = np.zeros((n, h + 2, w + 2, nw), dtype=np.uint64)
    words[:, 1:-1, 1:-1] = inner
    mask = np.zeros((h + 2, w + 2, nw), dtype=np.uint64)
    mask[1:-1, 1:-1] = pack_rows(np.ones((1, c), dtype=bool))[0]
    return PackedBitTensor((n, c, h, w), words, c, pad_mask=mask, layout="conv_input")


def pack_conv_signs(x: np.ndarray) -> PackedBitTensor:
    """Sign-binarize real activations (0 -> +1) and pack them for convolution."""
    return pack_conv_input(np.where(x >= 0, 1.0, -1.0))


@functools.lru_cache(maxsize=64)
def _conv_pad_mask(c: int, h: int, w: int) -> np.ndarray:
    nw = (c + 63) // 64
    mask = np.zeros((h + 2, w + 2, nw), dtype=np.uint64)
    mask[1:-1, 1:-1] = pack_rows(np.ones((1, c), dtype=bool))[0]
    mask.setflags(write=False)
    return mask


def sign_pool_pack(x: np.ndarray, shift: np.ndarray | None = None, pool: bool = False,
                   kernels=None) -> PackedBitTensor:
    """Fused ``[maxpool2] -> sign(x - shift) -> pack`` for a binary conv input.

    Equivalent to ``pack_conv_signs(maxpool2(x) - shift)``; rounding of the
    float subtraction is monotone, so pooling and thresholding commute.
    """
    x = np.ascontiguousarray(x, dtype=np.float32)
    n, c, h, w = x.shape
    if shift is None:
        shift = np.zeros(c, dtype=np.float32)
    shift = np.ascontiguousarray(shift, dtype=np.float32).reshape(-1)
    k = kernels or bitops
    words = k.sign_pack_conv(x, shift, bool(pool))
    ho, wo = words.shape[1] - 2, words.shape[2] - 2
    return PackedBitTensor((n, c, ho, wo), words, c, pad_mask=_conv_pad_mask(c, ho, wo), layout="conv_input")


def binary_conv2d(
    inp: PackedBitTensor,
    weights: PackedBitTensor,
    scale=1.0,
    act_scale: float = 1.0,
    bias: np.ndarray | None = None,
    kernels=None,
) -> np.ndarray:
    """XNOR-popcount convolution, ``dot = K_valid - 2 popcount((a ^ w) & mask)``.

    Returns float32 ``(N, Cout, H, W)``: integer dots times ``scale * act_scale``
    plus ``bias``. ``scale`` may be a scalar or one value per output channel.
    """
    if inp.layout != "conv_input" or weights.layout != "conv_weight":
        raise PackError("binary_conv2d needs conv_input activations and conv_weight weights")
    if inp.shape[1] != weights.shape[1]:
        raise PackError(f"channel mismatch: activations {inp.shape[1]}, weights {weights.shape[1]}")
    if inp.pad_mask is None or inp.pad_mask.shape != inp.words.shape[1:]:
        raise PackError("pad mask missing or shaped differently from the activation words")
    k = kernels or bitops
    dots = k.binary_conv2d_words(inp.words, inp.pad_mask, weights.words)
    return _rescale(dots, scale, act_scale, bias, axis=1)


def binary_linear(
    inp: PackedBitTensor,
    weights: PackedBitTensor,
    scale=1.0,
    act_scale: float = 1.0,
    bias: np.ndarray | None = None,
    kernels=None,
) -> np.ndarray:
    """XNOR-popcount matrix product: rows of ``inp`` against rows of ``weights``."""
    if inp.valid_bits != weights.valid_bits:
        raise PackError(f"feature mismatch: {inp.valid_bits} vs {weights.valid_bits}")
    k = kernels or bitops
    a = inp.words.reshape(-1, inp.words.shape[-1])
    dots = k.binary_linear_words(np.ascontiguousarray(a), weights.words, inp.valid_bits)
    dots = dots.reshape(inp.shape[:-1] + (weights.shape[0],))
    return _rescale(dots, scale, act_scale, bias, axis=-1)


def _rescale(dots, scale, act_scale, bias, axis):
    out = dots.astype(np.float32)
    s = np.asarray(scale, dtype=np.float32) * np.float32(act_scale)
    if s.ndim:
        shape = [1] * out.ndim
        shape[axis] = -1
        s = s.reshape(shape)
    out *= s
    if bias is not None:
        shape = [1] * out.ndim
        shape[axis] = -1
        out += np.asarray(bias, dtype=np.float32).reshape(shape)
    return out
