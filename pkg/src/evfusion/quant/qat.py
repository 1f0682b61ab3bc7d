"""Quantization schemes, QAT wrapping of a built model, and packed export."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np

from .. import tensor as T
from ..model import CollisionNet, Layer, LayerDescriptor, describe_layers
from ..tensor import Tensor
from . import quantizers as Q
from .bitpack import (
    PackedBitTensor,
    binary_conv2d,
    binary_linear,
    pack_bits,
    pack_conv_signs,
    sign_pool_pack,
)

BINARY_KINDS = ("dorefa", "irnet", "irnet_star", "reactnet")
KINDS = ("fp32", "lsq+") + BINARY_KINDS


class SchemeError(ValueError):
    pass


@dataclass(frozen=True)
class QuantScheme:
    kind: str = "fp32"
    bits: int = 32
    first_last_fp: bool = True
    stochastic_grad_bits: int | None = None  # DoReFa only; off by default

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemeError(f"unknown scheme {self.kind!r}")
        if self.kind == "lsq+" and not 2 <= self.bits <= 8:
            raise SchemeError(f"LSQ+ bits must be within 2..8, got {self.bits}")
        if self.kind in BINARY_KINDS and self.bits != 1:
            object.__setattr__(self, "bits", 1)
        if self.kind == "fp32" and self.bits != 32:
            object.__setattr__(self, "bits", 32)

    @classmethod
    def parse(cls, text: str, first_last_fp: bool = True) -> "QuantScheme":
        """``fp32``, ``lsq+:BITS``, ``dorefa``, ``irnet``, ``irnet_star`` or ``reactnet``."""
        text = text.strip().lower()
        if text.startswith("lsq+"):
            _, _, b = text.partition(":")
            if not b.isdigit():
                raise SchemeError(f"expected lsq+:BITS, got {text!r}")
            return cls("lsq+", int(b), first_last_fp)
        if text in ("fp32", *BINARY_KINDS):
            return cls(text, first_last_fp=first_last_fp)
        raise SchemeError(f"unknown scheme {text!r}")

    def __str__(self) -> str:
        return f"lsq+:{self.bits}" if self.kind == "lsq+" else self.kind

    @property
    def is_binary(self) -> bool:
        return self.kind in BINARY_KINDS

    def layer_bits(self, desc: LayerDescriptor) -> int:
        """Numeric width a layer runs at under this scheme (32 = float)."""
        if self.kind == "fp32" or desc.kind not in ("conv", "linear", "attention"):
            return 32
        if self.first_last_fp and (desc.first or desc.last):
            return 32
        return self.bits

    def to_dict(self) -> dict:
        return {"kind": self.kind, "bits": self.bits, "first_last_fp": self.first_last_fp,
                "stochastic_grad_bits": self.stochastic_grad_bits}

    @classmethod
    def from_dict(cls, d: dict) -> "QuantScheme":
        return cls(d["kind"], int(d["bits"]), bool(d["first_last_fp"]), d.get("stochastic_grad_bits"))


# --------------------------------------------------------------------------
# quantizer modules attached to layers


class LsqWeight(Layer):
    """Signed per-output-channel LSQ+ weight quantizer (offset fixed at 0)."""

    def __init__(self, bits: int, w: np.ndarray):
        self.bits = bits
        _, qp = Q.grid_bounds(bits, True)
        flat = w.reshape(w.shape[0], -1).astype(np.float64)
        mu, sd = flat.mean(axis=1), flat.std(axis=1)
        s = np.maximum(np.abs(mu - 3 * sd), np.abs(mu + 3 * sd)) / 2 ** (bits - 1)
        s = np.maximum(s, 1e-8)
        shape = (w.shape[0],) + (1,) * (w.ndim - 1)
        self.s = Tensor(s.reshape(shape).astype(np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros((1,) * w.ndim, np.float32))

    def __call__(self, w: Tensor):
        return Q.lsq_quantize(w, self.s, self.beta, self.bits, signed=True), None

    def codes(self, w: np.ndarray) -> np.ndarray:
        return Q.lsq_codes(w, self.s.data, self.beta.data, self.bits, True)


class LsqAct(Layer):
    """Unsigned-grid LSQ+ activation quantizer with learnable scale and offset.

    Initialized from the first batch it sees: ``s = 3 std / sqrt(Qp)``,
    ``beta = min``.
    """

    def __init__(self, bits: int):
        self.bits = bits
        self.s = Tensor(np.ones(1, np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(1, np.float32), requires_grad=True)
        self.initialized = False

    def init_from(self, x: np.ndarray) -> None:
        _, qp = Q.grid_bounds(self.bits, False)
        s = 3.0 * float(x.std()) / math.sqrt(qp)
        self.s.data[...] = max(s, 1e-4)
        self.beta.data[...] = float(x.min())
        self.initialized = True

    def __call__(self, x: Tensor) -> Tensor:
        if not self.initialized:
            self.init_from(x.data)
        return Q.lsq_quantize(x, self.s, self.beta, self.bits, signed=False)


class BinaryWeight(Layer):
    """Per-tensor binarized weights for the 1-bit schemes.

    Returns ``(±1 tensor, scale)``; the owning layer multiplies its output
    by the scale so the float path and the popcount path agree exactly.
    """

    def __init__(self, kind: str, stochastic_grad_bits: int | None = None):
        self.kind = kind
        self.progress = 0.0
        self.stochastic_grad_bits = stochastic_grad_bits
        self.rng = np.random.default_rng(0)

    def __call__(self, w: Tensor):
        if self.kind in ("irnet", "irnet_star"):
            standardize = self.kind == "irnet"
            signs, scale = Q.irnet_signs(w.data, standardize)
            ws = w
            if standardize:
                ws = T.mul(T.add(w, -float(w.data.mean())), 1.0 / float(w.data.std()))
            out = Q.ede_sign(ws, self.progress, grad_scale=scale)
            out.data = signs.astype(w.dtype)
            return out, scale
        scale = float(np.abs(w.data).mean())
        stochastic = self.stochastic_grad_bits if self.kind == "dorefa" else None
        return Q.ste_sign(w, clip=1.0, grad_scale=scale, stochastic_bits=stochastic, rng=self.rng), scale

    def export(self, w: np.ndarray) -> tuple[PackedBitTensor, float]:
        if self.kind == "irnet":
            return Q.irnet_binarize_weights(w, True)
        if self.kind == "irnet_star":
            return Q.irnet_binarize_weights(w, False)
        return Q.dorefa_binarize_weights(w)


class BinaryAct(Layer):
    """±1 activations; ReActNet variants carry a learnable per-channel shift."""

    def __init__(self, kind: str, channels: int, axis: int):
        self.kind = kind
        self.axis = axis
        self.progress = 0.0
        if kind == "reactnet":
            self.alpha = Tensor(np.zeros(channels, np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        if self.kind == "reactnet":
            return Q.reactnet_rsign(x, self.alpha, axis=self.axis)
        if self.kind in ("irnet", "irnet_star"):
            return Q.ede_sign(x, self.progress)
        # DoReFa: straight-through with |x| <= 1 clip
        return Q.ste_sign(x, clip=1.0)


class RPReLU(Layer):
    def __init__(self, channels: int, axis: int = 1):
        self.axis = axis
        self.gamma = Tensor(np.zeros(channels, np.float32), requires_grad=True)
        self.zeta = Tensor(np.full(channels, 0.25, np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return Q.reactnet_rprelu(x, self.gamma, self.zeta, self.beta, axis=self.axis)


# --------------------------------------------------------------------------
# wrapping


def _quantized_layers(model: CollisionNet):
    """Yield (descriptor, layer, slot of the nonlinearity feeding it) for every weight layer."""
    by_name = {d.name: d for d in describe_layers(model)}
    for b, enc in model.encoders.items():
        for i, conv in enumerate(enc.convs):
            d = by_name[f"{b}.conv{i}"]
            yield d, conv, (enc, i - 1) if i > 0 else None
    d = by_name["attention"]
    yield d, model.attention, "attention"
    yield by_name["head"], model.head, "head"


def qat_wrap(model: CollisionNet, scheme: QuantScheme) -> CollisionNet:
    """Copy of ``model`` with quantizers attached per ``scheme``.

    The latent float weights stay the trainable parameters. Under binary
    schemes, the activation feeding a binarized layer becomes the sign
    function (ReLU is dropped there; ReActNet uses RPReLU instead), and the
    dropout in front of it is disabled.
    """
    if model.scheme is not None and model.scheme.kind != "fp32":
        raise SchemeError("model is already quantized")
    wrapped = copy.deepcopy(model)
    wrapped.scheme = scheme
    if scheme.kind == "fp32":
        return wrapped
    for desc, layer, slot in _quantized_layers(wrapped):
        bits = scheme.layer_bits(desc)
        if bits == 32:
            continue
        if scheme.kind == "lsq+":
            if desc.kind == "attention":
                layer.wquant = [LsqWeight(bits, w.data) for w in (layer.wq_, layer.wk_, layer.wv_)]
            else:
                layer.wq = LsqWeight(bits, layer.weight.data)
            layer.aq = LsqAct(bits)
            continue
        if desc.kind == "attention":
            layer.wquant = [BinaryWeight(scheme.kind, scheme.stochastic_grad_bits) for _ in range(3)]
            channels, axis = layer.dim, -1
        elif desc.kind == "linear":
            layer.wq = BinaryWeight(scheme.kind, scheme.stochastic_grad_bits)
            channels, axis = layer.weight.shape[1], -1
        else:
            layer.wq = BinaryWeight(scheme.kind, scheme.stochastic_grad_bits)
            channels, axis = layer.cin, 1
        layer.aq = BinaryAct(scheme.kind, channels, axis)
        # the nonlinearity in front of a binarized conv
        if isinstance(slot, tuple):
            enc, j = slot
            enc.acts[j] = RPReLU(enc.convs[j].cout) if scheme.kind == "reactnet" else "identity"
            if j < len(enc.drop):
                # a dropped zero would always binarize to +1
                enc.drop[j] = False
        elif slot == "attention":
            for enc in wrapped.encoders.values():
                enc.acts[5] = RPReLU(enc.convs[5].cout) if scheme.kind == "reactnet" else "identity"
    return wrapped


def set_progress(model: CollisionNet, progress: float) -> None:
    """Advance progressive estimators (IRNet EDE) to a training fraction in [0, 1]."""
    for layer in _all_quantizers(model):
        if hasattr(layer, "progress"):
            layer.progress = progress


MIN_STEP = 1e-6


def clamp_steps(model: CollisionNet, floor: float = MIN_STEP) -> None:
    """Keep LSQ+ step sizes positive after an optimizer update."""
    for q in _all_quantizers(model):
        if isinstance(q, (LsqWeight, LsqAct)):
            np.maximum(q.s.data, floor, out=q.s.data)


def _all_quantizers(model: CollisionNet):
    for enc in model.encoders.values():
        for conv in enc.convs:
            yield from (q for q in (conv.wq, conv.aq) if q is not None)
    att = model.attention
    if att.wquant:
        yield from att.wquant
    if att.aq is not None:
        yield att.aq
    yield from (q for q in (model.head.wq, model.head.aq) if q is not None)


def init_quantizers(model: CollisionNet, evs=None, rgb=None) -> None:
    """Run one eval forward so LSQ+ activation ranges come from this batch."""
    with T.no_grad():
        model.forward(evs, rgb, mode="eval")


# --------------------------------------------------------------------------
# export


def _export_weight(w: Tensor, quant, transpose: bool = False) -> dict:
    """``transpose`` packs rows of W.T, for projections applied as ``x @ W``."""
    if quant is None:
        return {"kind": "float", "weight": w.data.copy()}
    if isinstance(quant, LsqWeight):
        return {"kind": "lsq", "bits": quant.bits, "codes": quant.codes(w.data), "scale": quant.s.data.copy()}
    packed, scale = quant.export(np.ascontiguousarray(w.data.T) if transpose else w.data)
    return {"kind": "binary", "packed": packed, "scale": scale}


def _export_act(aq) -> dict | None:
    if aq is None:
        return None
    if isinstance(aq, LsqAct):
        return {"kind": "lsq", "bits": aq.bits, "scale": aq.s.data.copy(), "offset": aq.beta.data.copy()}
    shift = aq.alpha.data.copy() if aq.kind == "reactnet" else None
    return {"kind": "sign", "shift": shift}


def _export_nonlinearity(act) -> dict:
    if act is None:
        return {"kind": "relu"}
    if isinstance(act, str):
        return {"kind": act}
    return {"kind": "rprelu", "gamma": act.gamma.data.copy(), "zeta": act.zeta.data.copy(),
            "beta": act.beta.data.copy()}


def export_packed(model: CollisionNet) -> "PackedModel":
    """Freeze a (possibly QAT-wrapped) model into its inference form.

    Binary layers keep only packed sign bits and one scale per tensor; LSQ+
    layers keep integer codes and per-channel scales.
    """
    layers = {}
    for b, enc in model.encoders.items():
        for i, conv in enumerate(enc.convs):
            layers[f"{b}.conv{i}"] = {
                "weight": _export_weight(conv.weight, conv.wq),
                "bias": conv.bias.data.copy(),
                "act_in": _export_act(conv.aq),
                "nonlinearity": _export_nonlinearity(enc.acts[i]),
            }
    att = model.attention
    quants = att.wquant or (None, None, None)
    layers["attention"] = {
        "proj": [_export_weight(w, q, transpose=True) for w, q in zip((att.wq_, att.wk_, att.wv_), quants)],
        "act_in": _export_act(att.aq),
    }
    layers["head"] = {
        "weight": _export_weight(model.head.weight, model.head.wq),
        "bias": model.head.bias.data.copy(),
        "act_in": _export_act(model.head.aq),
    }
    return PackedModel(model.cfg, model.scheme or QuantScheme(), layers)


class PackedModel:
    """Eval-only network driven by exported layers; binary layers use XNOR-popcount kernels."""

    def __init__(self, cfg, scheme: QuantScheme, layers: dict, kernels=None):
        self.cfg = cfg
        self.scheme = scheme
        self.layers = layers
        self.kernels = kernels

    # activations ---------------------------------------------------------

    def _quant_act(self, x: np.ndarray, spec: dict | None, axis: int):
        """Returns float activations, or the sign-shifted input when binarizing."""
        if spec is None:
            return x
        if spec["kind"] == "lsq":
            return Q.lsq_quantize(Tensor(x), Tensor(spec["scale"]), Tensor(spec["offset"]),
                                  spec["bits"], signed=False).data
        if spec["shift"] is not None:
            shape = [1] * x.ndim
            shape[axis] = -1
            x = x - spec["shift"].reshape(shape).astype(x.dtype)
        return x

    @staticmethod
    def _dequant(w: dict) -> np.ndarray:
        if w["kind"] == "float":
            return w["weight"]
        return (w["codes"].astype(np.float32) * w["scale"] + np.float32(0.0)).astype(np.float32)

    @staticmethod
    def _nonlinearity(x: np.ndarray, spec: dict) -> np.ndarray:
        if spec["kind"] == "relu":
            return x * (x > 0)
        if spec["kind"] == "identity":
            return x
        t = Q.reactnet_rprelu(Tensor(x), Tensor(spec["gamma"]), Tensor(spec["zeta"]), Tensor(spec["beta"]), axis=1)
        return t.data

    # layers --------------------------------------------------------------

    def _conv(self, x: np.ndarray, spec: dict) -> np.ndarray:
        w = spec["weight"]
        x = self._quant_act(x, spec["act_in"], axis=1)
        if w["kind"] == "binary":
            return binary_conv2d(pack_conv_signs(x), w["packed"], w["scale"], bias=spec["bias"],
                                 kernels=self.kernels)
        if w["kind"] == "float":
            return T.conv2d(Tensor(x), Tensor(w["weight"]), Tensor(spec["bias"])).data
        y = T.conv2d(Tensor(x), Tensor(self._dequant(w)), None).data
        return y + spec["bias"].reshape(1, -1, 1, 1)

    def _project(self, x: np.ndarray, w: dict) -> np.ndarray:
        """Tokens (N, T, D) times a (D, D) projection."""
        if w["kind"] == "binary":
            n, t, d = x.shape
            a = pack_bits(Q.sign(x.reshape(n * t, d)))
            y = binary_linear(a, w["packed"], w["scale"], kernels=self.kernels)
            return y.reshape(n, t, -1)
        return x @ self._dequant(w)

    def _encode(self, b: str, x: np.ndarray) -> np.ndarray:
        """One encoder; a binary conv receives its input already pooled and packed."""
        for i in range(6):
            spec = self.layers[f"{b}.conv{i}"]
            if not isinstance(x, PackedBitTensor):
                x = self._conv(x, spec)
            else:
                w = spec["weight"]
                x = binary_conv2d(x, w["packed"], w["scale"], bias=spec["bias"], kernels=self.kernels)
            x = self._nonlinearity(x, spec["nonlinearity"])
            pool = i < 4
            nxt = self.layers.get(f"{b}.conv{i + 1}")
            if nxt is not None and nxt["weight"]["kind"] == "binary" and nxt["act_in"]["kind"] == "sign":
                x = sign_pool_pack(x, nxt["act_in"]["shift"], pool, kernels=self.kernels)
            elif pool:
                x = T.maxpool2(Tensor(x)).data
        return x

    def forward(self, evs=None, rgb=None) -> np.ndarray:
        inputs = {"evs": evs, "rgb": rgb}
        feats = []
        with T.no_grad():
            for b in self.cfg.branches:
                x = np.asarray(inputs[b], dtype=np.float32)
                if x.ndim == 3:
                    x = x[None]
                feats.append(self._encode(b, x))
            n = feats[0].shape[0]
            tokens = np.concatenate(
                [f.reshape(n, f.shape[1], -1).transpose(0, 2, 1) for f in feats], axis=1
            )
            att = self.layers["attention"]
            tokens = self._quant_act(tokens, att["act_in"], axis=-1)
            q, k, v = (Tensor(self._project(tokens, w)) for w in att["proj"])
            mixed = T.attend(q, k, v).data.reshape(n, -1)
            head = self.layers["head"]
            mixed = self._quant_act(mixed, head["act_in"], axis=-1)
            w = head["weight"]
            if w["kind"] == "binary":
                return binary_linear(pack_bits(Q.sign(mixed)), w["packed"], w["scale"], bias=head["bias"],
                                     kernels=self.kernels)
            return mixed @ self._dequant(w).T + head["bias"]

    __call__ = forward
