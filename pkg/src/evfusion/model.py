"""EVS-only, RGB-only and fusion collision networks.

Each encoder is six 3x3 conv layers; 2x2 max pooling after the first four
takes 80x80 inputs down to a 5x5 grid. The grid positions become attention
tokens, one self-attention block mixes them and a linear head regresses
``(x_mm, y_mm, t_ms)`` without an output activation.

Fusion concatenates the two encoder maps and attends over the union of both
branches' tokens (50 tokens of depth 64 under the default widths).
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, asdict
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

MODALITIES = ("evs", "rgb", "fusion")
INPUT_SIZE = 80
N_POOL = 4
GRID = INPUT_SIZE // 2**N_POOL


@dataclass
class ModelConfig:
    modality: str = "evs"
    stack_k: int = 1
    conv_widths: tuple = (8, 16, 32, 64, 64, 64)
    dropout_p: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.conv_widths = tuple(int(c) for c in self.conv_widths)
        if self.modality not in MODALITIES:
            raise ValueError(f"modality must be one of {MODALITIES}, got {self.modality!r}")
        if len(self.conv_widths) != 6:
            raise ValueError("conv_widths must list 6 channel counts")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")
        if self.stack_k < 1:
            raise ValueError("stack_k must be >= 1")

    @property
    def in_channels_evs(self) -> int:
        return self.stack_k

    @property
    def in_channels_rgb(self) -> int:
        return 3 * self.stack_k

    @property
    def attention_dim(self) -> int:
        return self.conv_widths[-1]

    @property
    def branches(self) -> tuple[str, ...]:
        return ("evs", "rgb") if self.modality == "fusion" else (self.modality,)

    @property
    def n_tokens(self) -> int:
        return GRID * GRID * len(self.branches)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_widths"] = list(self.conv_widths)
        return d


@dataclass
class CollisionPrediction:
    x_mm: float
    y_mm: float
    t_ms: float

    @classmethod
    def from_row(cls, row) -> "CollisionPrediction":
        return cls(float(row[0]), float(row[1]), float(row[2]))


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Layer:
    """Parameter container; subclasses list their own tensors."""

    def parameters(self) -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, Layer):
                for sub, t in value.parameters():
                    yield f"{name}.{sub}", t
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Layer):
                        for sub, t in item.parameters():
                            yield f"{name}.{i}.{sub}", t


class Conv3x3(Layer):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        self.weight = Tensor(kaiming_uniform(rng, (cout, cin, 3, 3), cin * 9), requires_grad=True)
        self.bias = Tensor(np.zeros(cout, np.float32), requires_grad=True)
        self.wq = None  # weight quantizer
        self.aq = None  # input activation quantizer

    @property
    def cin(self) -> int:
        return self.weight.shape[1]

    @property
    def cout(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        if self.aq is not None:
            x = self.aq(x)
        if self.wq is None:
            return T.conv2d(x, self.weight, self.bias)
        w, scale = self.wq(self.weight)
        return _scaled(T.conv2d(x, w, None), scale, self.bias, axis=-3)


class Linear(Layer):
    def __init__(self, din: int, dout: int, rng: np.random.Generator):
        self.weight = Tensor(kaiming_uniform(rng, (dout, din), din), requires_grad=True)
        self.bias = Tensor(np.zeros(dout, np.float32), requires_grad=True)
        self.wq = None
        self.aq = None

    def __call__(self, x: Tensor) -> Tensor:
        if self.aq is not None:
            x = self.aq(x)
        if self.wq is None:
            return T.linear(x, self.weight, self.bias)
        w, scale = self.wq(self.weight)
        return _scaled(T.linear(x, w, None), scale, self.bias, axis=-1)


class SelfAttention(Layer):
    """Single-head attention; projections are stored (D, D) and applied as ``x @ W``."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.wq_ = Tensor(kaiming_uniform(rng, (dim, dim), dim), requires_grad=True)
        self.wk_ = Tensor(kaiming_uniform(rng, (dim, dim), dim), requires_grad=True)
        self.wv_ = Tensor(kaiming_uniform(rng, (dim, dim), dim), requires_grad=True)
        self.wquant = None  # one weight quantizer per projection, or None
        self.aq = None

    @property
    def dim(self) -> int:
        return self.wq_.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        if self.aq is not None:
            x = self.aq(x)
        if self.wquant is None:
            return T.self_attention(x, self.wq_, self.wk_, self.wv_)
        proj = []
        for w, quant in zip((self.wq_, self.wk_, self.wv_), self.wquant):
            wq, scale = quant(w)
            proj.append(_scaled(T.matmul(x, wq), scale, None, axis=-1))
        return T.attend(*proj)


def _scaled(y: Tensor, scale, bias: Tensor | None, axis: int) -> Tensor:
    """``y * scale + bias``; scale is a constant or a Tensor broadcast along ``axis``."""
    if scale is not None:
        if isinstance(scale, Tensor):
            shape = [1] * y.data.ndim
            shape[axis] = -1
            y = T.mul(y, T.reshape(scale, shape))
        else:
            y = T.mul(y, np.asarray(scale, dtype=y.dtype))
    if bias is not None:
        shape = [1] * y.data.ndim
        shape[axis] = -1
        y = T.add(y, T.reshape(bias, shape))
    return y


class Encoder(Layer):
    def __init__(self, in_channels: int, widths, rng: np.random.Generator):
        chans = (in_channels,) + tuple(widths)
        self.convs = [Conv3x3(chans[i], chans[i + 1], rng) for i in range(6)]
        # activation after each conv: None means ReLU; quantization may swap in others
        self.acts = [None] * 6
        # dropout after each pool; off where the next conv binarizes its input
        self.drop = [True] * N_POOL

    def __call__(self, x: Tensor, mode: str, rng: np.random.Generator, dropout_p: float) -> Tensor:
        if x.shape[-2:] != (INPUT_SIZE, INPUT_SIZE):
            raise T.ShapeError("encoder", "input size", x.shape[-2:], (INPUT_SIZE, INPUT_SIZE))
        for i, conv in enumerate(self.convs):
            x = conv(x)
            act = self.acts[i]
            if act is None:
                x = T.relu(x)
            elif act != "identity":
                x = act(x)
            if i < N_POOL:
                x = T.maxpool2(x)
                if self.drop[i]:
                    x = T.dropout(x, dropout_p, mode, rng)
        return x


class CollisionNet(Layer):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        in_ch = {"evs": cfg.in_channels_evs, "rgb": cfg.in_channels_rgb}
        self.encoders = {b: Encoder(in_ch[b], cfg.conv_widths, rng) for b in cfg.branches}
        self.attention = SelfAttention(cfg.attention_dim, rng)
        self.head = Linear(cfg.n_tokens * cfg.attention_dim, 3, rng)
        self.scheme = None  # set by quantization wrapping

    def parameters(self):
        for b, enc in self.encoders.items():
            for name, t in enc.parameters():
                yield f"{b}.{name}", t
        for name, t in self.attention.parameters():
            yield f"attention.{name}", t
        for name, t in self.head.parameters():
            yield f"head.{name}", t

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self.parameters())

    def astype(self, dtype) -> "CollisionNet":
        """Copy with every parameter cast (float64 is used for gradient checks)."""
        other = copy.deepcopy(self)
        for t in other.named_parameters().values():
            t.data = t.data.astype(dtype)
        return other

    def _tokens(self, fmap: Tensor) -> Tensor:
        n, c = fmap.shape[0], fmap.shape[1]
        return T.transpose(T.reshape(fmap, (n, c, GRID * GRID)), (0, 2, 1))

    def forward(
        self,
        evs: Tensor | np.ndarray | None = None,
        rgb: Tensor | np.ndarray | None = None,
        mode: str = "eval",
        rng: np.random.Generator | int | None = None,
    ) -> Tensor:
        """Batched forward pass returning an ``(N, 3)`` tensor."""
        rng = np.random.default_rng(rng)
        inputs = {"evs": evs, "rgb": rgb}
        feats = []
        for b in self.cfg.branches:
            x = inputs[b]
            if x is None:
                raise ValueError(f"{self.cfg.modality} model needs a {b} input")
            x = x if isinstance(x, Tensor) else Tensor(x)
            if x.data.ndim == 3:
                x = T.reshape(x, (1,) + x.shape)
            enc = self.encoders[b]
            expected = enc.convs[0].cin
            if x.shape[1] != expected:
                raise T.ShapeError(f"{b} input", "channels", x.shape[1], expected)
            feats.append(enc(x, mode, rng, self.cfg.dropout_p))
        if len(feats) == 2:
            if feats[0].shape[0] != feats[1].shape[0]:
                raise T.ShapeError("fusion", "batch size", feats[1].shape[0], feats[0].shape[0])
            fused = T.concat_channels(feats[0], feats[1])
            n, c2 = fused.shape[:2]
            c = c2 // 2
            # (N, 2C, 5, 5) -> (N, 2, C, 25) -> (N, 2, 25, C) -> (N, 50, C)
            grouped = T.reshape(fused, (n, 2, c, GRID * GRID))
            tokens = T.reshape(T.transpose(grouped, (0, 1, 3, 2)), (n, 2 * GRID * GRID, c))
        else:
            tokens = self._tokens(feats[0])
        mixed = self.attention(tokens)
        mixed = T.dropout(mixed, self.cfg.dropout_p, mode, rng)
        flat = T.reshape(mixed, (mixed.shape[0], -1))
        return self.head(flat)

    __call__ = forward

    def predict(self, evs=None, rgb=None) -> list[CollisionPrediction]:
        with T.no_grad():
            out = self.forward(evs, rgb, mode="eval").data
        return [CollisionPrediction.from_row(r) for r in out]


def build_encoder(in_channels: int, conv_widths=ModelConfig.conv_widths, seed: int = 0) -> Encoder:
    return Encoder(in_channels, conv_widths, np.random.default_rng(seed))


def forward_fusion(model: CollisionNet, evs, rgb, mode: str = "eval", rng=None) -> Tensor:
    if model.cfg.modality != "fusion":
        raise ValueError("forward_fusion needs a fusion model")
    return model.forward(evs, rgb, mode, rng)


def forward_single(model: CollisionNet, frame, mode: str = "eval", rng=None) -> Tensor:
    if model.cfg.modality == "fusion":
        raise ValueError("forward_single needs an evs or rgb model")
    key = model.cfg.modality
    return model.forward(**{key: frame}, mode=mode, rng=rng)


def count_parameters(model: CollisionNet, include_quantizers: bool = False) -> int:
    total = 0
    for name, t in model.parameters():
        if not include_quantizers and _is_quantizer_param(name):
            continue
        total += t.size
    return total


def _is_quantizer_param(name: str) -> bool:
    parts = name.split(".")
    return any(p in ("aq", "wq", "wquant", "acts") for p in parts)


@dataclass
class LayerDescriptor:
    name: str
    kind: str  # conv | relu | pool | attention | linear
    group: str  # evs | rgb | fusion (shared attention/head)
    shape: dict = field(default_factory=dict)
    first: bool = False
    last: bool = False

    @property
    def n_params(self) -> int:
        s = self.shape
        if self.kind == "conv":
            return s["cout"] * s["cin"] * 9 + s["cout"]
        if self.kind == "linear":
            return s["dout"] * s["din"] + s["dout"]
        if self.kind == "attention":
            return 3 * s["dim"] * s["dim"]
        return 0


def describe_layers(model: CollisionNet | ModelConfig) -> list[LayerDescriptor]:
    """Ordered descriptors with enough shape detail to count operations."""
    cfg = model.cfg if isinstance(model, CollisionNet) else model
    in_ch = {"evs": cfg.in_channels_evs, "rgb": cfg.in_channels_rgb}
    out: list[LayerDescriptor] = []
    for b in cfg.branches:
        size = INPUT_SIZE
        cin = in_ch[b]
        for i, cout in enumerate(cfg.conv_widths):
            out.append(
                LayerDescriptor(
                    f"{b}.conv{i}", "conv", b, {"cin": cin, "cout": cout, "h": size, "w": size}, first=i == 0
                )
            )
            out.append(LayerDescriptor(f"{b}.relu{i}", "relu", b,
                                       {"channels": cout, "elements": cout * size * size}))
            if i < N_POOL:
                out.append(LayerDescriptor(f"{b}.pool{i}", "pool", b,
                                           {"channels": cout, "elements": cout * size * size}))
                size //= 2
            cin = cout
    d = cfg.attention_dim
    out.append(LayerDescriptor("attention", "attention", "fusion" if cfg.modality == "fusion" else cfg.modality,
                               {"tokens": cfg.n_tokens, "dim": d}))
    out.append(LayerDescriptor("head", "linear", out[-1].group, {"din": cfg.n_tokens * d, "dout": 3}, last=True))
    return out
