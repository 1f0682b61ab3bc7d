"""Numpy fallback for the XNOR-popcount kernels (same signatures as ``_bitops``)."""

import numpy as np


def binary_conv2d_words(act: np.ndarray, mask: np.ndarray, wts: np.ndarray) -> np.ndarray:
    n, hp, wp, cw = act.shape
    if mask.shape != (hp, wp, cw):
        raise ValueError("mask shape does not match activations")
    if wts.shape[1:] != (9, cw):
        raise ValueError("weight words do not match activation words")
    h, w = hp - 2, wp - 2
    cout = wts.shape[0]
    valid = np.zeros((h, w), dtype=np.int32)
    diff = np.zeros((n, cout, h, w), dtype=np.int32)
    for t in range(9):
        dy, dx = divmod(t, 3)
        m = mask[dy : dy + h, dx : dx + w]  # (h, w, cw)
        valid += np.bitwise_count(m).sum(axis=-1, dtype=np.int32)
        a = act[:, dy : dy + h, dx : dx + w]  # (n, h, w, cw)
        x = (a[:, None] ^ wts[None, :, t, None, None, :]) & m
        diff += np.bitwise_count(x).sum(axis=-1, dtype=np.int32)
    return valid[None, None] - 2 * diff


def binary_linear_words(act: np.ndarray, wts: np.ndarray, valid_bits: int) -> np.ndarray:
    if wts.shape[1] != act.shape[1]:
        raise ValueError("weight words do not match activation words")
    x = act[:, None, :] ^ wts[None, :, :]
    return (valid_bits - 2 * np.bitwise_count(x).sum(axis=-1, dtype=np.int32)).astype(np.int32)


def sign_pack_conv(x: np.ndarray, shift: np.ndarray, pool: bool) -> np.ndarray:
    n, c, h, w = x.shape
    if shift.shape[0] != c:
        raise ValueError("shift length does not match channels")
    u = x - shift.reshape(1, -1, 1, 1)
    if pool:
        if h % 2 or w % 2:
            raise ValueError("pooling needs even spatial size")
        u = np.maximum(np.maximum(u[..., 0::2, 0::2], u[..., 0::2, 1::2]),
                       np.maximum(u[..., 1::2, 0::2], u[..., 1::2, 1::2]))
    bits = u.transpose(0, 2, 3, 1) >= 0
    ho, wo = bits.shape[1:3]
    nw = (c + 63) // 64
    padded = np.zeros((n, ho, wo, nw * 64), dtype=bool)
    padded[..., :c] = bits
    words = np.packbits(padded, axis=-1, bitorder="little").view("<u8")
    out = np.zeros((n, ho + 2, wo + 2, nw), dtype=np.uint64)
    out[:, 1:-1, 1:-1] = words
    return out
