"""MSE training loop: Adam with decoupled weight decay, gradient clipping,
plateau LR schedule, early stopping and stochastic weight averaging."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .dataset import WindowSet, label_stats, load_split
from .events import WindowConfig
from .model import CollisionNet, _is_quantizer_param
from .quant.qat import LsqAct, _all_quantizers, clamp_steps, init_quantizers, set_progress
from .quant.quantizers import distributional_loss
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 16
    lr0: float = 1e-4
    weight_decay: float = 1e-5
    clip_norm: float = 1.0
    plateau_patience: int = 5
    plateau_factor: float = 0.1
    plateau_threshold: float = 1e-6
    early_stop_patience: int = 10
    swa_start_fraction: float = 0.75
    max_epochs: int = 30
    seed: int = 0
    windows_per_recording: int | None = 8
    distill_weight: float = 1.0

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be positive")
        for name in ("lr0", "clip_norm"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if not 0 < self.plateau_factor < 1:
            raise ValueError("plateau_factor must be in (0, 1)")
        if not 0 <= self.swa_start_fraction <= 1:
            raise ValueError("swa_start_fraction must be in [0, 1]")


# --------------------------------------------------------------------------
# optimizer pieces


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, wd: float = 0.0,
              decay: set | None = None) -> None:
    """Bias-corrected Adam update in place; weight decay ``lr * wd * w`` is decoupled.

    ``params`` maps names to arrays; names missing from ``grads`` are left
    alone. ``decay`` restricts weight decay to the given names.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    for name, g in grads.items():
        w = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(w)
            state.v[name] = np.zeros_like(w)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if wd and (decay is None or name in decay):
            w -= lr * wd * w
        w -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(w.dtype)


def global_norm(grads) -> float:
    values = grads.values() if isinstance(grads, dict) else grads
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in values))


def clip_gradients(grads, max_norm: float):
    """Scale every gradient by ``max_norm / norm`` when the global L2 norm exceeds it."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads
    k = max_norm / norm
    if isinstance(grads, dict):
        return {n: (g * k).astype(g.dtype) for n, g in grads.items()}
    return [(np.asarray(g) * k).astype(np.asarray(g).dtype) for g in grads]


class PlateauScheduler:
    """Multiply the LR by ``factor`` after ``patience`` epochs without improvement."""

    def __init__(self, lr: float, patience: int = 5, factor: float = 0.1, threshold: float = 1e-6):
        self.lr = lr
        self.patience = patience
        self.factor = factor
        self.threshold = threshold
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, val_loss: float) -> float:
        if val_loss < self.best - self.threshold:
            self.best = val_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr *= self.factor
                self.bad_epochs = 0
        return self.lr


class EarlyStopping:
    def __init__(self, patience: int = 10, threshold: float = 1e-6):
        self.patience = patience
        self.threshold = threshold
        self.best = math.inf
        self.best_epoch = -1
        self.bad_epochs = 0
        self.epoch = 0

    def step(self, val_loss: float) -> str:
        """Returns ``"continue"`` or ``"stop"``."""
        self.epoch += 1
        if val_loss < self.best - self.threshold:
            self.best = val_loss
            self.best_epoch = self.epoch
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        return "stop" if self.bad_epochs >= self.patience else "continue"


def swa_update(swa: dict | None, current: dict, n_collected: int) -> dict:
    """Running mean ``(swa * n + current) / (n + 1)``."""
    if swa is None or n_collected == 0:
        return {k: v.copy() for k, v in current.items()}
    return {k: ((swa[k].astype(np.float64) * n_collected + current[k]) / (n_collected + 1)).astype(current[k].dtype)
            for k in current}


# --------------------------------------------------------------------------
# training


LOG_COLUMNS = ("epoch", "lr", "steps", "train_mse", "val_mse", "val_pos_err_mm", "val_time_err_ms",
               "swa_val_pos_err_mm", "swa_val_time_err_ms", "seconds")


@dataclass
class TrainResult:
    model: CollisionNet  # best-validation weights loaded
    best_state: dict
    swa_state: dict | None
    history: list
    label_mean: np.ndarray
    label_std: np.ndarray
    best_epoch: int
    steps: int


def get_state(model: CollisionNet) -> dict:
    return {n: t.data.copy() for n, t in model.parameters()}


def set_state(model: CollisionNet, state: dict) -> None:
    for n, t in model.parameters():
        t.data = state[n].copy()


def predict_array(model, ws: WindowSet, mean, std, batch: int = 64) -> np.ndarray:
    """De-standardized predictions ``(N, 3)`` in mm / ms."""
    out = []
    with T.no_grad():
        for i in range(0, len(ws), batch):
            idx = np.arange(i, min(i + batch, len(ws)))
            if isinstance(model, CollisionNet):
                y = model.forward(**ws.inputs(model.cfg.modality, idx), mode="eval").data
            else:
                y = model.forward(**ws.inputs(model.cfg.modality, idx))
            out.append(np.asarray(y, np.float32))
    z = np.concatenate(out) if out else np.zeros((0, 3), np.float32)
    return z * std + mean


def _errors(pred: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    pos = np.sqrt(((pred[:, :2] - labels[:, :2]) ** 2).sum(axis=1)).mean()
    return float(pos), float(np.abs(pred[:, 2] - labels[:, 2]).mean())


def _val(model, ws: WindowSet, mean, std) -> tuple[float, float, float]:
    pred = predict_array(model, ws, mean, std)
    z_pred, z_true = (pred - mean) / std, (ws.labels - mean) / std
    mse = float(np.mean((z_pred - z_true) ** 2))
    return (mse, *_errors(pred, ws.labels))


def fit(model: CollisionNet, train_set: WindowSet, val_set: WindowSet, cfg: TrainConfig = TrainConfig(),
        teacher: CollisionNet | None = None, log_path=None, label_norm=None) -> TrainResult:
    """Train ``model`` in place; returns it with the best-validation weights loaded."""
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("training and validation sets must be non-empty")
    mean, std = label_norm if label_norm is not None else label_stats(train_set.labels)
    z_train = ((train_set.labels - mean) / std).astype(np.float32)
    modality = model.cfg.modality
    rng = np.random.default_rng(cfg.seed)

    if model.scheme is not None and model.scheme.kind != "fp32":
        needs_init = [q for q in _all_quantizers(model) if isinstance(q, LsqAct) and not q.initialized]
        if needs_init:
            idx = rng.choice(len(train_set), size=min(64, len(train_set)), replace=False)
            init_quantizers(model, **train_set.inputs(modality, idx))
    teacher_out = None
    if teacher is not None:
        with T.no_grad():
            teacher_out = np.concatenate([
                teacher.forward(**train_set.inputs(modality, np.arange(i, min(i + 64, len(train_set)))),
                                mode="eval").data
                for i in range(0, len(train_set), 64)
            ])

    params = model.named_parameters()
    trainable = {n: t for n, t in params.items() if t.requires_grad}
    decay = {n for n in trainable if not _is_quantizer_param(n)}
    state = AdamState()
    sched = PlateauScheduler(cfg.lr0, cfg.plateau_patience, cfg.plateau_factor, cfg.plateau_threshold)
    stopper = EarlyStopping(cfg.early_stop_patience, cfg.plateau_threshold)
    swa_start = int(math.floor(cfg.swa_start_fraction * cfg.max_epochs))
    swa, n_swa = None, 0
    best_state, best_val = get_state(model), math.inf
    history = []
    steps_per_epoch = math.ceil(len(train_set) / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.max_epochs
    lr = cfg.lr0
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(train_set))
        losses = []
        for b in range(steps_per_epoch):
            idx = np.sort(order[b * cfg.batch_size : (b + 1) * cfg.batch_size])
            set_progress(model, state.step / max(total_steps - 1, 1))
            for t in trainable.values():
                t.zero_grad()
            pred = model.forward(**train_set.inputs(modality, idx), mode="train", rng=rng)
            loss = T.mse(pred, Tensor(z_train[idx]))
            if teacher_out is not None and cfg.distill_weight > 0:
                loss = T.add(loss, T.mul(distributional_loss(pred, teacher_out[idx]), cfg.distill_weight))
            T.backward(loss)
            losses.append(loss.item())
            grads = {n: t.grad for n, t in trainable.items() if t.grad is not None}
            grads = clip_gradients(grads, cfg.clip_norm)
            adam_step({n: t.data for n, t in trainable.items()}, grads, state, lr, cfg.weight_decay, decay)
            clamp_steps(model)

        val_mse, val_pos, val_time = _val(model, val_set, mean, std)
        if val_mse < best_val:
            best_val, best_state = val_mse, get_state(model)
        swa_pos = swa_time = float("nan")
        if epoch > swa_start:
            swa = swa_update(swa, get_state(model), n_swa)
            n_swa += 1
        lr = sched.step(val_mse)
        verdict = stopper.step(val_mse)
        row = {
            "epoch": epoch, "lr": lr, "steps": state.step, "train_mse": float(np.mean(losses)),
            "val_mse": val_mse, "val_pos_err_mm": val_pos, "val_time_err_ms": val_time,
            "swa_val_pos_err_mm": swa_pos, "swa_val_time_err_ms": swa_time,
            "seconds": time.perf_counter() - t0,
        }
        history.append(row)
        log.info("epoch %d lr %.2e train %.4f val %.4f pos %.1f mm time %.1f ms", epoch, lr,
                 row["train_mse"], val_mse, val_pos, val_time)
        if verdict == "stop":
            break

    if swa is not None:
        # score the SWA average once at the end; it goes on the last log row
        set_state(model, swa)
        _, swa_pos, swa_time = _val(model, val_set, mean, std)
        history[-1]["swa_val_pos_err_mm"], history[-1]["swa_val_time_err_ms"] = swa_pos, swa_time
    if log_path is not None:
        write_log(history, log_path)
    set_state(model, best_state)
    return TrainResult(model, best_state, swa, history, mean, std, stopper.best_epoch, state.step)


def write_log(history: list, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for row in history:
            w.writerow([row[c] for c in LOG_COLUMNS])


def train(model: CollisionNet, manifest, cfg: TrainConfig = TrainConfig(),
          window: WindowConfig = WindowConfig(), teacher: CollisionNet | None = None, log_path=None,
          label_norm=None) -> TrainResult:
    """Load the manifest's train/val splits and run :func:`fit`."""
    train_set = load_split(manifest, "train", window, cfg.windows_per_recording)
    val_set = load_split(manifest, "val", window, cfg.windows_per_recording)
    return fit(model, train_set, val_set, cfg, teacher, log_path, label_norm)


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
