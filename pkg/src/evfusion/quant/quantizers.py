"""Quantizer forward/backward rules.

All binarizers map 0 to +1. Each differentiable quantizer is registered as a
single graph op with a hand-written backward.
"""

from __future__ import annotations

import math

import numpy as np

from .. import tensor as T
from ..tensor import Tensor, custom_op
from .bitpack import PackedBitTensor, pack_bits, pack_conv_weight


def sign(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, 1.0, -1.0).astype(x.dtype if x.dtype.kind == "f" else np.float32)


def grid_bounds(bits: int, signed: bool) -> tuple[int, int]:
    if not 1 < bits <= 8:
        raise ValueError(f"LSQ+ supports 2..8 bits, got {bits}")
    if signed:
        return -(2 ** (bits - 1)), 2 ** (bits - 1) - 1
    return 0, 2**bits - 1


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    return T._unbroadcast(g, shape).reshape(shape)


# --------------------------------------------------------------------------
# LSQ+


def lsq_quantize(x: Tensor, s: Tensor, beta: Tensor, bits: int, signed: bool = True) -> Tensor:
    """Learned-step asymmetric quantizer ``clamp(round((x - beta)/s), Qn, Qp) * s + beta``.

    ``s`` and ``beta`` broadcast against ``x`` (per-channel weights use shape
    ``(C, 1, ...)``). Backward: identity to ``x`` inside the grid and zero
    outside; the LSQ+ step/offset gradients, scaled by ``1/sqrt(n * Qp)``
    where ``n`` counts the elements sharing one scale.
    """
    qn, qp = grid_bounds(bits, signed)
    if np.any(s.data <= 0):
        raise ValueError("LSQ+ scale must be positive")
    v = (x.data - beta.data) / s.data
    q = np.clip(np.round(v), qn, qp)
    out = (q * s.data + beta.data).astype(x.dtype)
    inside = (v >= qn) & (v <= qp)
    n_per_scale = x.data.size / max(s.data.size, 1)
    gscale = 1.0 / math.sqrt(n_per_scale * qp)

    def bw(g):
        gx = g * inside
        ds = np.where(inside, q - v, q)  # q is qn or qp outside the grid
        gs = _reduce_to(g * ds, s.shape) * gscale
        gb = _reduce_to(g * (~inside), beta.shape) * gscale
        return gx, gs.astype(s.dtype), gb.astype(beta.dtype)

    return custom_op(out, (x, s, beta), bw, "lsq_quantize")


def lsq_codes(x: np.ndarray, s: np.ndarray, beta: np.ndarray, bits: int, signed: bool) -> np.ndarray:
    qn, qp = grid_bounds(bits, signed)
    return np.clip(np.round((x - beta) / s), qn, qp).astype(np.int16)


# --------------------------------------------------------------------------
# binary weights


def ste_sign(w: Tensor, clip: float = 1.0, grad_scale: float = 1.0,
             stochastic_bits: int | None = None, rng: np.random.Generator | None = None) -> Tensor:
    """sign(w) with a straight-through gradient masked to ``|w| <= clip``.

    ``stochastic_bits`` enables DoReFa's stochastic k-bit quantization of the
    incoming gradient.
    """
    mask = np.abs(w.data) <= clip

    def bw(g):
        if stochastic_bits is not None:
            g = dorefa_quantize_grad(g, stochastic_bits, rng or np.random.default_rng())
        return (g * mask * grad_scale,)

    return custom_op(sign(w.data), (w,), bw, "ste_sign")


def dorefa_quantize_grad(g: np.ndarray, bits: int, rng: np.random.Generator) -> np.ndarray:
    """Stochastic k-bit gradient quantization from DoReFa-Net."""
    levels = 2**bits - 1
    m = np.abs(g).max()
    if m == 0:
        return g
    r = g / (2 * m) + 0.5 + rng.uniform(-0.5, 0.5, size=g.shape) / levels
    q = np.round(np.clip(r, 0.0, 1.0) * levels) / levels
    return (2 * m * (q - 0.5)).astype(g.dtype)


def dorefa_binarize_weights(w) -> tuple[PackedBitTensor, float]:
    """Packed sign bits and the per-tensor scale ``mean(|W|)``."""
    w = np.asarray(w.data if isinstance(w, Tensor) else w, dtype=np.float32)
    bits = sign(w)
    scale = float(np.abs(w).mean())
    packed = pack_conv_weight(bits) if w.ndim == 4 else pack_bits(bits)
    return packed, scale


def irnet_standardize(w: np.ndarray, standardize: bool) -> np.ndarray:
    if not standardize:
        return w
    std = w.std()
    if std == 0:
        raise ValueError("IRNet weight standardization of a constant tensor (std == 0)")
    return (w - w.mean()) / std


def power_of_two(x: float) -> float:
    return float(2.0 ** np.round(np.log2(x))) if x > 0 else 1.0


def irnet_signs(w: np.ndarray, standardize: bool) -> tuple[np.ndarray, float]:
    """Signs of the (optionally standardized) weights and the power-of-two scale."""
    wp = irnet_standardize(np.asarray(w, dtype=np.float64), standardize)
    return sign(wp).astype(np.float32), power_of_two(float(np.abs(wp).mean()))


def irnet_binarize_weights(w, standardize: bool = True) -> tuple[PackedBitTensor, float]:
    """Libra-style balanced binarization; scale is ``2**round(log2(mean|W'|))``."""
    w = np.asarray(w.data if isinstance(w, Tensor) else w)
    bits, scale = irnet_signs(w, standardize)
    packed = pack_conv_weight(bits) if w.ndim == 4 else pack_bits(bits)
    return packed, scale


def ede_params(progress: float, t_min: float = 0.1, t_max: float = 10.0) -> tuple[float, float]:
    """IRNet error-decay estimator schedule: returns ``(k, t)``."""
    progress = min(max(progress, 0.0), 1.0)
    t = t_min * 10 ** (progress * math.log10(t_max / t_min))
    return max(1.0 / t, 1.0), t


def ede_sign(x: Tensor, progress: float, shift: np.ndarray | float = 0.0, grad_scale: float = 1.0) -> Tensor:
    """sign(x - shift) with IRNet's tanh-shaped backward ``k t (1 - tanh^2(t x))``."""
    u = x.data - shift
    k, t = ede_params(progress)

    def bw(g):
        return (g * (k * t * (1.0 - np.tanh(t * u) ** 2)) * grad_scale,)

    return custom_op(sign(u), (x,), bw, "ede_sign")


# --------------------------------------------------------------------------
# ReActNet


def _channel_view(p: Tensor, x: Tensor, axis: int) -> np.ndarray:
    shape = [1] * x.data.ndim
    shape[axis] = -1
    return p.data.reshape(shape)


def reactnet_rsign(x: Tensor, alpha: Tensor, axis: int = 1) -> Tensor:
    """sign(x - alpha) per channel; backward uses the piecewise-quadratic sign surrogate."""
    a = _channel_view(alpha, x, axis)
    u = x.data - a
    surrogate = np.where(np.abs(u) < 1.0, 2.0 - 2.0 * np.abs(u), 0.0).astype(x.dtype)

    def bw(g):
        gx = g * surrogate
        return gx, -_reduce_to(gx, a.shape).reshape(alpha.shape)

    return custom_op(sign(u), (x, alpha), bw, "rsign")


def reactnet_rprelu(x: Tensor, gamma: Tensor, zeta: Tensor, beta: Tensor, axis: int = 1) -> Tensor:
    """(x - gamma) above gamma, zeta * (x - gamma) below, then shifted by beta."""
    gm = _channel_view(gamma, x, axis)
    zt = _channel_view(zeta, x, axis)
    bt = _channel_view(beta, x, axis)
    u = x.data - gm
    pos = u > 0
    out = np.where(pos, u, zt * u) + bt
    slope = np.where(pos, 1.0, zt).astype(x.dtype)

    def bw(g):
        gx = g * slope
        g_gamma = -_reduce_to(gx, gm.shape).reshape(gamma.shape)
        g_zeta = _reduce_to(g * np.where(pos, 0.0, u), zt.shape).reshape(zeta.shape)
        g_beta = _reduce_to(g, bt.shape).reshape(beta.shape)
        return gx, g_gamma, g_zeta, g_beta

    return custom_op(out.astype(x.dtype), (x, gamma, zeta, beta), bw, "rprelu")


def distributional_loss(student: Tensor, teacher) -> Tensor:
    """Output-matching loss against a frozen real-valued teacher."""
    target = teacher.data if isinstance(teacher, Tensor) else np.asarray(teacher)
    return T.mse(student, Tensor(target.astype(student.dtype)))
