# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""XNOR-popcount kernels over 64-bit packed sign vectors."""

import numpy as np
cimport numpy as cnp
from libc.stdint cimport uint64_t, int32_t

cnp.import_array()

cdef extern from *:
    int popcount64 "__builtin_popcountll"(unsigned long long) nogil


def binary_conv2d_words(const uint64_t[:, :, :, ::1] act,
                        const uint64_t[:, :, ::1] mask,
                        const uint64_t[:, :, ::1] wts):
    """3x3 stride-1 XNOR-popcount convolution.

    act  : (N, H+2, W+2, Cw) packed activations, zero words in the padding ring
    mask : (H+2, W+2, Cw) valid-bit mask
    wts  : (Cout, 9, Cw) packed weights, tap-major
    returns int32 (N, Cout, H, W) dot products over valid bits only
    """
    cdef Py_ssize_t n = act.shape[0], hp = act.shape[1], wp = act.shape[2], cw = act.shape[3]
    cdef Py_ssize_t cout = wts.shape[0]
    cdef Py_ssize_t h = hp - 2, w = wp - 2
    if mask.shape[0] != hp or mask.shape[1] != wp or mask.shape[2] != cw:
        raise ValueError("mask shape does not match activations")
    if wts.shape[1] != 9 or wts.shape[2] != cw:
        raise ValueError("weight words do not match activation words")
    out = np.empty((n, cout, h, w), dtype=np.int32)
    cdef int32_t[:, :, :, ::1] o = out
    cdef Py_ssize_t taps = 9 * cw
    cdef uint64_t[::1] abuf = np.empty(taps, dtype=np.uint64)
    cdef uint64_t[::1] mbuf = np.empty(taps, dtype=np.uint64)
    cdef Py_ssize_t[::1] ibuf = np.empty(taps, dtype=np.intp)
    cdef uint64_t m, a
    # (9*Cw, Cout) so the innermost loop runs over output channels
    cdef uint64_t[:, ::1] wt = np.ascontiguousarray(np.asarray(wts).reshape(cout, taps).T)
    cdef int32_t[::1] dbuf = np.empty(cout, dtype=np.int32)
    cdef const uint64_t* wrow
    cdef Py_ssize_t b, co, y, x, t, k, j, nz
    cdef int valid
    for b in range(n):
        for y in range(h):
            for x in range(w):
                # gather the receptive field, dropping fully masked words
                valid = 0
                nz = 0
                for t in range(9):
                    for k in range(cw):
                        m = mask[y + t // 3, x + t % 3, k]
                        if m:
                            valid += popcount64(m)
                            abuf[nz] = act[b, y + t // 3, x + t % 3, k]
                            mbuf[nz] = m
                            ibuf[nz] = t * cw + k
                            nz += 1
                for co in range(cout):
                    dbuf[co] = 0
                for j in range(nz):
                    a = abuf[j]
                    m = mbuf[j]
                    wrow = &wt[ibuf[j], 0]
                    for co in range(cout):
                        dbuf[co] += popcount64((a ^ wrow[co]) & m)
                for co in range(cout):
                    o[b, co, y, x] = valid - 2 * dbuf[co]
    return out


def binary_linear_words(const uint64_t[:, ::1] act, const uint64_t[:, ::1] wts, int valid_bits):
    """act (M, Dw), wts (Dout, Dw) -> int32 (M, Dout) = K - 2 popcount(a ^ w)."""
    cdef Py_ssize_t mrows = act.shape[0], dw = act.shape[1], dout = wts.shape[0]
    if wts.shape[1] != dw:
        raise ValueError("weight words do not match activation words")
    out = np.empty((mrows, dout), dtype=np.int32)
    cdef int32_t[:, ::1] o = out
    cdef Py_ssize_t i, j, k
    cdef int diff
    for i in range(mrows):
        for j in range(dout):
            diff = 0
            for k in range(dw):
                diff += popcount64(act[i, k] ^ wts[j, k])
            o[i, j] = valid_bits - 2 * diff
    return out


def sign_pack_conv(const float[:, :, :, ::1] x, const float[::1] shift, bint pool):
    """Binarize ``x - shift`` (0 -> +1) into the padded conv input layout.

    With ``pool`` the 2x2 max is taken first; since float subtraction is
    monotone this equals OR-ing the block's sign bits.
    returns uint64 (N, H'+2, W'+2, Cw)
    """
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    if pool and (h % 2 or w % 2):
        raise ValueError("pooling needs even spatial size")
    if shift.shape[0] != c:
        raise ValueError("shift length does not match channels")
    cdef Py_ssize_t ho = h // 2 if pool else h, wo = w // 2 if pool else w
    cdef Py_ssize_t cw = (c + 63) // 64, ow = wo + 2
    out = np.zeros((n, ho + 2, wo + 2, cw), dtype=np.uint64)
    if n == 0 or c == 0:
        return out
    cdef uint64_t[:, :, :, ::1] o = out
    cdef uint64_t* op
    cdef const float* r0
    cdef const float* r1
    cdef Py_ssize_t b, ch, y, xx, word
    cdef float s, m
    cdef uint64_t bit
    for b in range(n):
        for ch in range(c):
            s = shift[ch]
            bit = (<uint64_t>1) << (ch & 63)
            word = ch >> 6
            for y in range(ho):
                op = &o[b, y + 1, 1, word]
                if pool:
                    r0 = &x[b, ch, 2 * y, 0]
                    r1 = r0 + w
                    for xx in range(wo):
                        m = r0[2 * xx]
                        if r0[2 * xx + 1] > m: m = r0[2 * xx + 1]
                        if r1[2 * xx] > m: m = r1[2 * xx]
                        if r1[2 * xx + 1] > m: m = r1[2 * xx + 1]
                        op[xx * cw] |= bit & (<uint64_t>0 - <uint64_t>(m - s >= 0))
                else:
                    r0 = &x[b, ch, y, 0]
                    for xx in range(wo):
                        op[xx * cw] |= bit & (<uint64_t>0 - <uint64_t>(r0[xx] - s >= 0))
    return out
