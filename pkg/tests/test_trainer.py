import json
import math
import struct

import numpy as np
import pytest

from mobilecaps.autodiff import Parameter, Tensor, backward
from mobilecaps.data import make_blob_classification, make_blob_severity
from mobilecaps.model import MobileCaps, ModelConfig, build_model
from mobilecaps.trainer import (
    CheckpointFormatError,
    CheckpointTruncatedError,
    Nadam,
    NadamState,
    NonFiniteGradientError,
    ScheduleConfig,
    Snapshot,
    TrainConfig,
    TrainingDiverged,
    UnknownParameterError,
    compute_loss,
    cosine_lr,
    ensemble_predict,
    load_checkpoint,
    load_ensemble,
    model_from_snapshot,
    nadam_step,
    predict,
    read_checkpoint,
    save_checkpoint,
    save_ensemble,
    snapshot_predictions,
    train,
)
from mobilecaps.trainer.checkpoint import decode_state, encode_state

from .oracles import cosine_lr_ref

# --- schedule -----------------------------------------------------------------------


def test_cosine_examples():
    cfg = ScheduleConfig(0.01, 500, 10)
    assert cosine_lr(1, cfg) == 0.01
    assert abs(cosine_lr(26, cfg) - 0.005) < 1e-15
    assert cosine_lr(51, cfg) == 0.01


def test_cosine_minimum_at_cycle_end():
    cfg = ScheduleConfig(0.01, 500, 10)
    cycle = [cosine_lr(t, cfg) for t in range(1, 51)]
    assert int(np.argmin(cycle)) == 49
    for t in range(1, 501):
        assert cosine_lr(t, cfg) == pytest.approx(cosine_lr_ref(t, 0.01, 500, 10), abs=1e-12)


def test_cosine_range_and_config():
    cfg = ScheduleConfig(0.01, 10, 2)
    with pytest.raises(ValueError):
        cosine_lr(0, cfg)
    with pytest.raises(ValueError):
        cosine_lr(11, cfg)
    with pytest.raises(ValueError):
        ScheduleConfig(0.01, 3, 5)
    with pytest.raises(ValueError):
        ScheduleConfig(0.0, 10, 2)


def test_snapshot_epochs():
    cfg = ScheduleConfig(0.01, 500, 10)
    assert [t for t in range(1, 501) if cfg.is_snapshot_epoch(t)] == list(range(50, 501, 50))
    odd = ScheduleConfig(0.01, 10, 3)  # cycle_len 4
    assert [t for t in range(1, 11) if odd.is_snapshot_epoch(t)] == [4, 8, 10]


# --- Nadam --------------------------------------------------------------------------


def test_nadam_zero_gradient_keeps_params():
    p = Parameter(np.array([1.5, -2.0]), name="p", dtype=np.float64)
    state = NadamState()
    for _ in range(100):
        nadam_step([p], {"p": np.zeros(2)}, state, 0.1)
    np.testing.assert_array_equal(p.data, [1.5, -2.0])


def test_nadam_single_step_hand_value():
    p = Parameter(np.array([0.0]), name="p", dtype=np.float64)
    nadam_step([p], {"p": np.array([1.0])}, NadamState(), 0.1)
    b1, b2, eps = 0.9, 0.999, 1e-7
    m_hat = (1 - b1) * 1.0 / (1 - b1)
    v_hat = (1 - b2) * 1.0 / (1 - b2)
    want = -0.1 * (b1 * m_hat + (1 - b1) * 1.0 / (1 - b1)) / (math.sqrt(v_hat) + eps)
    assert p.data[0] == pytest.approx(want, abs=1e-15)


def test_nadam_non_finite_gradient_names_parameter():
    p = Parameter(np.array([1.0]), name="layer.w", dtype=np.float64)
    with pytest.raises(NonFiniteGradientError, match="layer.w"):
        nadam_step([p], {"layer.w": np.array([np.nan])}, NadamState(), 0.1)


def test_nadam_deterministic_trajectories():
    def run():
        rng = np.random.default_rng(0)
        p = Parameter(rng.normal(size=5), name="p", dtype=np.float64)
        opt = Nadam([p])
        for _ in range(20):
            p.grad = None
            backward(_quad(p))
            opt.step(0.05)
        return p.data.tobytes()

    assert run() == run()


def _quad(p):
    from mobilecaps.autodiff import ops
    return ops.sum(ops.square(p))


def test_nadam_minimises_quadratic():
    p = Parameter(np.array([3.0, -2.0]), name="p", dtype=np.float64)
    opt = Nadam([p])
    for _ in range(500):
        p.grad = None
        backward(_quad(p))
        opt.step(0.05)
    assert np.abs(p.data).max() < 1e-2


# --- checkpoint ---------------------------------------------------------------------


def test_checkpoint_header_layout(tmp_path):
    path = save_checkpoint({"w": np.arange(6, dtype=np.float32).reshape(2, 3)}, tmp_path / "c.mcap")
    raw = path.read_bytes()
    assert raw[:4] == b"MCAP"
    assert struct.unpack("<II", raw[4:12]) == (1, 1)
    assert struct.unpack("<H", raw[12:14]) == (1,)
    assert raw[14:15] == b"w"
    assert raw[15:17] == bytes([0, 2])
    assert struct.unpack("<II", raw[17:25]) == (2, 3)
    assert np.frombuffer(raw[25:], "<f4").tolist() == list(range(6))


def test_checkpoint_round_trip_bit_exact(tmp_path):
    model = build_model(profile="desk")
    a = save_checkpoint(model, tmp_path / "a.mcap")
    other = build_model(profile="desk", init_seed=99)
    load_checkpoint(a, other)
    b = save_checkpoint(other, tmp_path / "b.mcap")
    assert a.read_bytes() == b.read_bytes()
    x = np.random.default_rng(0).random((3, 32, 32, 3)).astype(np.float32)
    assert predict(model, x).tobytes() == predict(other, x).tobytes()


def test_checkpoint_float64_and_names():
    state = {"a.b": np.array([1.0, 2.0]), "é": np.ones((1, 1, 1), dtype=np.float32)}
    back = decode_state(encode_state(state))
    assert list(back) == ["a.b", "é"]
    assert back["a.b"].dtype == np.float64


def test_checkpoint_errors(tmp_path):
    raw = encode_state({"w": np.ones(4, dtype=np.float32)})
    with pytest.raises(CheckpointFormatError):
        decode_state(b"XCAP" + raw[4:])
    with pytest.raises(CheckpointFormatError):
        decode_state(raw[:4] + struct.pack("<I", 2) + raw[8:])
    with pytest.raises(CheckpointTruncatedError):
        decode_state(raw[:-3])
    with pytest.raises(CheckpointFormatError):
        decode_state(raw + b"\0")
    path = save_checkpoint({"nope": np.ones(1, dtype=np.float32)}, tmp_path / "x.mcap")
    with pytest.raises(UnknownParameterError):
        load_checkpoint(path, build_model(profile="desk"))


# --- training -----------------------------------------------------------------------


def _tiny_cls(n=24):
    return make_blob_classification(n=n, seed=0)


def _cfg(epochs=2, cycles=1, lr=0.01, batch=8, **kw):
    return TrainConfig(ScheduleConfig(lr, epochs, cycles), batch_size=batch, **kw)


def test_train_snapshots_and_history():
    model = build_model(profile="desk")
    res = train(model, _tiny_cls(), _cfg(epochs=4, cycles=2))
    assert [s.epoch for s in res.snapshots] == [2, 4]
    assert [h["epoch"] for h in res.history] == [1, 2, 3, 4]
    assert res.history[0]["lr"] == 0.01 and "train" in res.history[0]


def test_single_cycle_degenerates_to_cosine_decay():
    res = train(build_model(profile="desk"), _tiny_cls(), _cfg(epochs=3, cycles=1))
    assert len(res.snapshots) == 1
    lrs = [h["lr"] for h in res.history]
    assert lrs[0] == 0.01 and lrs == sorted(lrs, reverse=True)


def test_train_is_deterministic():
    a = train(build_model(profile="desk"), _tiny_cls(), _cfg())
    b = train(build_model(profile="desk"), _tiny_cls(), _cfg())
    assert json.dumps(a.history) == json.dumps(b.history)
    for k in a.snapshots[0].params:
        assert a.snapshots[0].params[k].tobytes() == b.snapshots[0].params[k].tobytes()


def test_train_rejects_empty_and_unknown_loss():
    data = _tiny_cls()
    with pytest.raises(ValueError):
        train(build_model(profile="desk"), data.subset([]), _cfg())
    with pytest.raises(ValueError):
        train(build_model(profile="desk"), data, _cfg(), loss_kind="hinge")


class _PoisonedModel(MobileCaps):
    """Emits NaN outputs once training reaches ``poison_epoch``."""

    poison_epoch = 3
    batches_per_epoch = 3

    def __init__(self, config):
        super().__init__(config)
        self.train_calls = 0

    def __call__(self, x, rng=None):
        out = super().__call__(x, rng)
        if self.training:
            self.train_calls += 1
            if self.train_calls > (self.poison_epoch - 1) * self.batches_per_epoch:
                out.data = out.data * np.nan
        return out


def test_divergence_keeps_earlier_snapshots():
    model = _PoisonedModel(ModelConfig(profile="desk"))
    with pytest.raises(TrainingDiverged) as info:
        train(model, _tiny_cls(), _cfg(epochs=6, cycles=3, eval_train=False))
    assert [s.epoch for s in info.value.snapshots] == [2]
    assert info.value.epoch == 3
    assert len(info.value.history) == 2


def test_loss_descends_on_fixed_batch():
    from mobilecaps.autodiff import backward as bw

    model = build_model(profile="desk", dropout=0.0)
    data = _tiny_cls(16)
    opt = Nadam(model.trainable_parameters())
    idx = np.arange(16)
    losses = []
    for _ in range(10):
        model.eval()  # fixed batch statistics keep the objective a fixed function
        out = model(Tensor(data.images))
        loss = compute_loss(out, data, idx, "margin")
        losses.append(loss.item())
        model.zero_grad()
        bw(loss)
        opt.step(1e-4)
    assert all(b <= a + 1e-7 for a, b in zip(losses, losses[1:])), losses


def test_severity_training_runs():
    data = make_blob_severity(n=24, seed=0)
    res = train(build_model(profile="desk", task="severity"), data, _cfg())
    assert "r2" in res.history[-1]["train"]


# --- ensembles ----------------------------------------------------------------------


def _snapshots(n=3):
    res = train(build_model(profile="desk"), _tiny_cls(), _cfg(epochs=n, cycles=n))
    return res.snapshots


def test_single_snapshot_equals_model_prediction():
    snaps = _snapshots(1)
    x = _tiny_cls().images[:5]
    model = model_from_snapshot(snaps[0])
    p = predict(model, x).astype(np.float64)
    np.testing.assert_allclose(ensemble_predict(snaps, x), p / p.sum(axis=1, keepdims=True), atol=1e-12)
    np.testing.assert_allclose(ensemble_predict(snaps, x, normalize=False), p, atol=1e-12)


def test_ensemble_is_mean_of_normalised_and_order_invariant():
    snaps = _snapshots(3)
    x = _tiny_cls().images[:6]
    per = snapshot_predictions(snaps, x)
    ens = ensemble_predict(snaps, x)
    np.testing.assert_allclose(ens, np.mean(per, axis=0), atol=1e-12)
    np.testing.assert_allclose(ens.sum(axis=1), 1, atol=1e-9)
    assert np.all(ens >= 0)
    assert ensemble_predict(snaps[::-1], x).tobytes() == ens.tobytes()


def test_ensemble_arithmetic_example():
    a = np.array([[0.8, 0.1, 0.1]])
    b = np.array([[0.6, 0.3, 0.1]])
    np.testing.assert_allclose(np.mean([a, b], axis=0), [[0.7, 0.2, 0.1]])


def test_ensemble_architecture_mismatch():
    snaps = _snapshots(1)
    with pytest.raises(ValueError):
        ensemble_predict(snaps, _tiny_cls().images[:2], model=build_model(profile="desk", task="severity"))
    with pytest.raises(ValueError):
        ensemble_predict([], _tiny_cls().images[:2])


def test_ensemble_persistence(tmp_path):
    snaps = _snapshots(2)
    save_ensemble(tmp_path / "ens", snaps)
    back = load_ensemble(tmp_path / "ens")
    assert [s.epoch for s in back] == [1, 2]
    x = _tiny_cls().images[:4]
    assert ensemble_predict(back, x).tobytes() == ensemble_predict(snaps, x).tobytes()
    idx = json.loads((tmp_path / "ens" / "index.json").read_text())
    assert idx["model_config"]["profile"] == "desk"
