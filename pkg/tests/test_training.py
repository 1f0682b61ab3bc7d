import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evfusion.dataset import WindowSet
from evfusion.model import CollisionNet, ModelConfig
from evfusion.quant.qat import QuantScheme, qat_wrap
from evfusion.training import (
    LOG_COLUMNS,
    AdamState,
    EarlyStopping,
    PlateauScheduler,
    TrainConfig,
    adam_step,
    clip_gradients,
    fit,
    get_state,
    global_norm,
    swa_update,
    train,
)

SMALL = dict(conv_widths=(2, 2, 4, 4, 4, 4))


# --------------------------------------------------------------------------
# Adam


def test_adam_zero_gradient_is_a_fixed_point():
    w = {"w": np.array([1.0, -2.0])}
    state = AdamState()
    for _ in range(3):
        adam_step(w, {"w": np.zeros(2)}, state, lr=0.1)
    np.testing.assert_array_equal(w["w"], [1.0, -2.0])


def test_adam_first_step_moves_by_lr():
    w = {"w": np.array([0.5])}
    adam_step(w, {"w": np.array([1.0])}, AdamState(), lr=1e-3)
    assert w["w"][0] == pytest.approx(0.5 - 1e-3, abs=1e-9)


def test_adam_matches_scalar_reference_trace():
    """Five steps on w^2/2 from w = 1, against a hand-written scalar Adam."""
    w = {"w": np.array([1.0])}
    state = AdamState()
    ref, m, v = 1.0, 0.0, 0.0
    for t in range(1, 6):
        g = ref
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 0.01 * (m / (1 - 0.9**t)) / ((v / (1 - 0.999**t)) ** 0.5 + 1e-8)
        adam_step(w, {"w": w["w"].copy()}, state, lr=0.01)
        assert w["w"][0] == pytest.approx(ref, abs=1e-6)


def test_adam_decoupled_weight_decay_and_decay_mask():
    w = {"a": np.array([2.0]), "b": np.array([2.0])}
    adam_step(w, {"a": np.zeros(1), "b": np.zeros(1)}, AdamState(), lr=0.1, wd=0.5, decay={"a"})
    assert w["a"][0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)
    assert w["b"][0] == 2.0


def test_adam_rejects_non_finite_gradients():
    with pytest.raises(FloatingPointError, match="head.weight"):
        adam_step({"head.weight": np.ones(2)}, {"head.weight": np.array([1.0, np.nan])}, AdamState(), 0.1)


# --------------------------------------------------------------------------
# clipping


def test_clip_examples():
    small = {"a": np.array([0.3, 0.4])}
    assert clip_gradients(small, 1.0) is small
    np.testing.assert_allclose(clip_gradients({"a": np.array([3.0, 4.0])}, 1.0)["a"], [0.6, 0.8])
    with pytest.raises(ValueError):
        clip_gradients(small, 0.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 10.0))
def test_clip_bounds_global_norm(seed, max_norm):
    rng = np.random.default_rng(seed)
    grads = {str(i): rng.standard_normal(rng.integers(1, 20)) * rng.uniform(0, 5) for i in range(4)}
    clipped = clip_gradients(grads, max_norm)
    assert global_norm(clipped) <= max_norm + 1e-6
    if global_norm(grads) > max_norm:
        assert global_norm(clipped) == pytest.approx(max_norm)


# --------------------------------------------------------------------------
# schedules


def run_plateau(losses, lr=1e-4):
    s = PlateauScheduler(lr, patience=5, factor=0.1)
    return [s.step(x) for x in losses]


def test_plateau_examples():
    assert set(run_plateau([10 - i for i in range(20)])) == {1e-4}
    lrs = run_plateau([1.0] * 6)
    assert lrs[:5] == [1e-4] * 5 and lrs[5] == pytest.approx(1e-5)
    trace = run_plateau([1.0] + [1.0] * 5 + [0.5] + [0.5] * 5)
    assert trace == pytest.approx([1e-4] * 5 + [1e-5] * 6 + [1e-6])


def test_plateau_threshold_is_absolute():
    lrs = run_plateau([1.0] + [1.0 - 1e-7 * k for k in range(1, 6)])
    assert lrs[-1] == pytest.approx(1e-5)  # sub-threshold improvements count as flat


def plateau_oracle(losses, lr, patience=5, factor=0.1, thr=1e-6):
    best, bad, out = float("inf"), 0, []
    for x in losses:
        if x < best - thr:
            best, bad = x, 0
        else:
            bad += 1
            if bad == patience:
                lr, bad = lr * factor, 0
        out.append(lr)
    return out


def stop_oracle(losses, patience=10, thr=1e-6):
    best, bad = float("inf"), 0
    for i, x in enumerate(losses, 1):
        if x < best - thr:
            best, bad = x, 0
        else:
            bad += 1
        if bad == patience:
            return i
    return None


loss_seqs = st.lists(st.sampled_from([0.1, 0.2, 0.3, 0.5, 1.0]), min_size=1, max_size=60)


@settings(max_examples=200, deadline=None)
@given(loss_seqs)
def test_plateau_matches_state_machine_oracle(losses):
    assert run_plateau(losses) == pytest.approx(plateau_oracle(losses, 1e-4))


@settings(max_examples=200, deadline=None)
@given(loss_seqs)
def test_early_stopping_matches_state_machine_oracle(losses):
    es = EarlyStopping(10)
    stopped = next((i for i, x in enumerate(losses, 1) if es.step(x) == "stop"), None)
    assert stopped == stop_oracle(losses)


def test_early_stopping_examples():
    es = EarlyStopping(10)
    assert all(es.step(10 - i) == "continue" for i in range(30))
    es = EarlyStopping(10)
    verdicts = [es.step(1.0) for _ in range(11)]
    assert verdicts == ["continue"] * 10 + ["stop"]
    es = EarlyStopping(10)
    losses = [0.9, 0.7, 0.8, 0.6, 0.65, 0.61]
    for x in losses:
        es.step(x)
    assert es.best == min(losses) and es.best_epoch == 4


def test_swa_examples(rng):
    first = {"w": np.array([1.0, 2.0])}
    np.testing.assert_array_equal(swa_update(None, first, 0)["w"], first["w"])
    avg = swa_update(swa_update(None, {"w": np.zeros(2)}, 0), {"w": np.full(2, 2.0)}, 1)
    np.testing.assert_array_equal(avg["w"], [1.0, 1.0])
    snaps = [rng.standard_normal(5).astype(np.float32) for _ in range(10)]
    swa = None
    for i, s in enumerate(snaps):
        swa = swa_update(swa, {"w": s}, i)
    np.testing.assert_allclose(swa["w"], np.mean(snaps, axis=0), atol=1e-6)


# --------------------------------------------------------------------------
# training loop


def toy_set(rng, n):
    """Inputs whose mean brightness encodes the labels, so a tiny net can learn them."""
    labels = rng.uniform(-1, 1, (n, 3)).astype(np.float32)
    evs = np.broadcast_to(labels[:, :1, None, None], (n, 1, 80, 80)).copy()
    evs += rng.normal(0, 0.05, evs.shape).astype(np.float32)
    rgb = np.zeros((n, 3, 80, 80), np.float32)
    return WindowSet(evs, rgb, labels * [300, 300, 200] + [0, 0, 500], [f"r{i}" for i in range(n)],
                     np.zeros(n, np.int64), np.ones(n))


def test_one_epoch_on_32_samples_takes_two_steps(rng):
    res = fit(CollisionNet(ModelConfig(**SMALL)), toy_set(rng, 32), toy_set(rng, 8), TrainConfig(max_epochs=1))
    assert res.steps == 2 and res.history[0]["steps"] == 2


def test_same_seed_gives_identical_parameters(rng):
    tr, va = toy_set(rng, 24), toy_set(rng, 8)
    cfg = TrainConfig(max_epochs=2, seed=5)
    a = fit(CollisionNet(ModelConfig(**SMALL)), tr, va, cfg)
    b = fit(CollisionNet(ModelConfig(**SMALL)), tr, va, cfg)
    for k, v in get_state(a.model).items():
        np.testing.assert_array_equal(v, get_state(b.model)[k])
    for k, v in a.swa_state.items():
        np.testing.assert_array_equal(v, b.swa_state[k])


def test_training_loss_drops(rng):
    tr = toy_set(rng, 64)
    res = fit(CollisionNet(ModelConfig(dropout_p=0.0, **SMALL)), tr, toy_set(rng, 16),
              TrainConfig(max_epochs=5, lr0=3e-3))
    first, last = res.history[0]["train_mse"], res.history[-1]["train_mse"]
    assert last < first


def test_best_weights_are_the_lowest_validation_epoch(rng, tmp_path):
    res = fit(CollisionNet(ModelConfig(**SMALL)), toy_set(rng, 32), toy_set(rng, 8),
              TrainConfig(max_epochs=6, lr0=1e-2), log_path=tmp_path / "log.csv")
    vals = [r["val_mse"] for r in res.history]
    assert res.best_epoch == int(np.argmin(vals)) + 1
    with open(tmp_path / "log.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0]) == LOG_COLUMNS and len(rows) == len(res.history)
    # SWA collects from 75% of max_epochs on and is scored on the last row only
    assert rows[-1]["swa_val_pos_err_mm"] != "nan" and rows[0]["swa_val_pos_err_mm"] == "nan"


def test_empty_split_is_an_error(rng):
    empty = toy_set(rng, 4).subset([])
    with pytest.raises(ValueError):
        fit(CollisionNet(ModelConfig(**SMALL)), empty, toy_set(rng, 4))


@pytest.mark.parametrize("scheme", ["lsq+:4", "irnet", "reactnet"])
def test_qat_runs_the_same_loop(rng, scheme):
    base = CollisionNet(ModelConfig(**SMALL))
    teacher = base if scheme == "reactnet" else None
    model = qat_wrap(base, QuantScheme.parse(scheme))
    res = fit(model, toy_set(rng, 32), toy_set(rng, 8), TrainConfig(max_epochs=2), teacher=teacher)
    assert res.steps == 4 and all(np.isfinite(r["val_mse"]) for r in res.history)


def test_train_reads_manifest_splits(tiny_dataset):
    cfg = TrainConfig(max_epochs=1, windows_per_recording=2)
    res = train(CollisionNet(ModelConfig(**SMALL)), tiny_dataset, cfg)
    assert res.steps == 1  # 3 train recordings x 2 windows, one batch
    assert res.label_mean.shape == (3,)


@pytest.mark.parametrize("kw", [{"batch_size": 0}, {"lr0": 0}, {"plateau_factor": 1.0}, {"weight_decay": -1}])
def test_train_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_lsq_steps_stay_positive_under_large_updates(rng):
    from evfusion.quant.qat import LsqWeight, _all_quantizers

    model = qat_wrap(CollisionNet(ModelConfig(**SMALL)), QuantScheme.parse("lsq+:8"))
    res = fit(model, toy_set(rng, 32), toy_set(rng, 8), TrainConfig(max_epochs=2, lr0=0.5))
    steps = [q.s.data for q in _all_quantizers(res.model) if isinstance(q, LsqWeight)]
    assert steps and all(np.all(s > 0) for s in steps)
