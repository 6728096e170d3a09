import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fscn import train as train_mod
from fscn.data import AugmentConfig, generate_synthetic
from fscn.model import ConfigError, ModelConfig, build_model
from fscn.tensor import Tensor
from fscn.train import (
    CheckpointError,
    OptimState,
    TrainConfig,
    TrainingError,
    adamw_step,
    batch_indices,
    load_checkpoint,
    lr_at,
    save_checkpoint,
    train,
)
from oracles import adamw_reference

SMALL = dict(base_channels=4, input_h=32, input_w=64)


@pytest.fixture(scope="module")
def data():
    return generate_synthetic(0, 6, 32, 64, 10.0)


def _cfg(**kw):
    base = dict(epochs=100, batch_size=2, lr0=1e-3, total_steps=20, seed=0)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------- AdamW


def _one(value, name="w.weight"):
    p = Tensor(np.array([value], dtype=np.float64), requires_grad=True, name=name)
    return [(name, p)], p


def test_adamw_hand_example():
    named, p = _one(1.0)
    state = OptimState.for_params(named, TrainConfig(weight_decay=0.01))
    adamw_step(named, {"w.weight": np.array([1.0])}, state, lr=0.1)
    assert state.t == 1
    assert p.data[0] == pytest.approx(1 - 0.1 * (1 / (1 + 1e-6) + 0.01), abs=1e-12)
    assert p.data[0] == pytest.approx(0.8990001, abs=1e-7)


def test_adamw_zero_gradient_no_decay_is_noop():
    named, p = _one(0.3)
    state = OptimState.for_params(named, TrainConfig(weight_decay=0.0))
    for _ in range(5):
        adamw_step(named, {"w.weight": np.zeros(1)}, state, lr=0.1)
    assert p.data[0] == 0.3


def test_adamw_constant_gradient_step_tends_to_lr():
    named, p = _one(0.0)
    state = OptimState.for_params(named, TrainConfig(weight_decay=0.0))
    prev = 0.0
    for _ in range(200):
        adamw_step(named, {"w.weight": np.array([-2.5])}, state, lr=0.01)
        step, prev = p.data[0] - prev, p.data[0]
    assert step == pytest.approx(0.01, rel=1e-5)


@settings(max_examples=40, deadline=None)
@given(
    theta=st.floats(-3, 3),
    grads=st.lists(st.floats(-5, 5), min_size=10, max_size=10),
    lr=st.floats(1e-4, 0.1),
)
def test_adamw_matches_scalar_reference(theta, grads, lr):
    named, p = _one(theta)
    state = OptimState.for_params(named, TrainConfig())
    for g in grads:
        adamw_step(named, {"w.weight": np.array([g])}, state, lr)
    assert p.data[0] == pytest.approx(adamw_reference(theta, grads, lr), abs=1e-7)


def test_no_decay_for_bias_and_alpha():
    for name in ("conv.bias", "acms.0.alphas.1"):
        named, p = _one(2.0, name)
        state = OptimState.for_params(named, TrainConfig(weight_decay=0.5))
        adamw_step(named, {name: np.zeros(1)}, state, lr=0.1)
        assert p.data[0] == 2.0


def test_nan_gradient_names_parameter():
    named, p = _one(1.0, "enc.stem.weight")
    state = OptimState.for_params(named, TrainConfig())
    with pytest.raises(TrainingError, match="enc.stem.weight"):
        adamw_step(named, {"enc.stem.weight": np.array([np.nan])}, state, lr=0.1)
    assert p.data[0] == 1.0 and state.t == 0


# ---------------------------------------------------------------- schedule


def test_lr_endpoints_and_midpoint():
    cfg = TrainConfig(lr0=1e-4, total_steps=1000)
    assert lr_at(0, cfg) == 1e-4
    assert lr_at(1000, cfg) == pytest.approx(1e-5, rel=1e-12)
    assert lr_at(500, cfg) == pytest.approx(9e-5 * 0.5**0.9 + 1e-5, rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(total=st.integers(1, 5000), lr0=st.floats(1e-6, 1.0))
def test_lr_monotone(total, lr0):
    cfg = TrainConfig(lr0=lr0, total_steps=total)
    lrs = [lr_at(s, cfg) for s in range(0, total + 1, max(1, total // 50))]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))


def test_train_config_validation():
    with pytest.raises(ConfigError, match="train.batch_size"):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError, match="train.lr0"):
        TrainConfig(lr0=0)
    with pytest.raises(ConfigError, match="train.warmup"):
        TrainConfig.from_dict({"warmup": 3})
    cfg = TrainConfig(total_steps=7, loss={"lam": 0.5})
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_planned_steps():
    assert TrainConfig(epochs=3, batch_size=4).planned_steps(10) == 9
    assert TrainConfig(epochs=3, batch_size=4, total_steps=5).planned_steps(10) == 5


def test_epochs_walk_permutations():
    seen = np.concatenate([batch_indices(4, s, 10, 3) for s in range(4)])
    assert sorted(seen.tolist()) == list(range(10))
    assert not np.array_equal(batch_indices(4, 0, 10, 3), batch_indices(4, 4, 10, 3))


# ---------------------------------------------------------------- loop


def test_zero_epochs_keeps_init(data):
    model = build_model(ModelConfig(**SMALL), seed=1)
    before = {k: v.copy() for k, v in model.state_arrays().items()}
    result = train(model, data, _cfg(epochs=0))
    assert result.loss_log == []
    assert all(np.array_equal(before[k], v) for k, v in model.state_arrays().items())


def test_training_is_deterministic(data):
    logs = []
    for _ in range(2):
        model = build_model(ModelConfig(**SMALL), seed=0)
        logs.append(train(model, data, _cfg(total_steps=10), AugmentConfig(crop_h=32, crop_w=64), 10.0).loss_log)
    assert logs[0] == logs[1]
    assert len(logs[0]) == 10
    assert [r[0] for r in logs[0]] == list(range(10))


def test_loss_decreases(data):
    model = build_model(ModelConfig(**SMALL), seed=0)
    log = train(model, data[:2], _cfg(total_steps=60, batch_size=2, lr0=3e-3)).loss_log
    assert np.mean([r[2] for r in log[-10:]]) < 0.7 * np.mean([r[2] for r in log[:10]])


def test_empty_dataset():
    with pytest.raises(TrainingError):
        train(build_model(ModelConfig(**SMALL)), [], _cfg())


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip_bytes(tmp_path, data):
    model = build_model(ModelConfig(**SMALL), seed=0)
    result = train(model, data, _cfg(total_steps=3), checkpoint_dir=tmp_path)
    a = tmp_path / "final.ckpt"
    ck = load_checkpoint(a)
    assert ck.step == 3 and ck.optim.t == 3
    save_checkpoint(tmp_path / "again.ckpt", ck)
    assert a.read_bytes() == (tmp_path / "again.ckpt").read_bytes()
    assert all(np.array_equal(ck.params[k], v) for k, v in result.model.state_arrays().items())


def test_checkpoint_errors(tmp_path, data):
    model = build_model(ModelConfig(**SMALL), seed=0)
    train(model, data, _cfg(total_steps=1), checkpoint_dir=tmp_path)
    buf = (tmp_path / "final.ckpt").read_bytes()
    (tmp_path / "trunc.ckpt").write_bytes(buf[: len(buf) // 2])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "trunc.ckpt")
    bad = bytearray(buf)
    bad[8:12] = (99).to_bytes(4, "little")
    (tmp_path / "ver.ckpt").write_bytes(bytes(bad))
    with pytest.raises(CheckpointError, match="version 99"):
        load_checkpoint(tmp_path / "ver.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"hello")
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        load_checkpoint(tmp_path / "junk.ckpt")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "absent.ckpt")


def test_resume_matches_uninterrupted(tmp_path, data):
    aug = AugmentConfig(crop_h=32, crop_w=64)
    cfg = _cfg(total_steps=12, checkpoint_every=5)
    full = train(build_model(ModelConfig(**SMALL), seed=0), data, cfg, aug, 10.0, checkpoint_dir=tmp_path / "a")
    ck = load_checkpoint(tmp_path / "a" / "step_000005.ckpt")
    resumed = train(ck.to_model(), data, cfg, aug, 10.0, resume=ck)
    assert resumed.loss_log == full.loss_log
    for k, v in full.model.state_arrays().items():
        assert np.array_equal(resumed.model.state_arrays()[k], v)


def test_stop_at_then_resume(data):
    cfg = _cfg(total_steps=8)
    full = train(build_model(ModelConfig(**SMALL), seed=2), data, cfg)
    half = train(build_model(ModelConfig(**SMALL), seed=2), data, cfg, stop_at=3)
    rest = train(half.checkpoint.to_model(), data, cfg, resume=half.checkpoint)
    assert rest.loss_log == full.loss_log


def test_nan_loss_keeps_last_good(tmp_path, data, monkeypatch):
    real = train_mod.silog_loss
    calls = {"n": 0}

    def flaky(pred, gt, mask, params):
        calls["n"] += 1
        out = real(pred, gt, mask, params)
        if calls["n"] == 5:
            out.data = np.asarray(np.nan, dtype=out.dtype)
        return out

    monkeypatch.setattr(train_mod, "silog_loss", flaky)
    with pytest.raises(TrainingError, match="step 4"):
        train(build_model(ModelConfig(**SMALL)), data, _cfg(checkpoint_every=2), checkpoint_dir=tmp_path)
    ck = load_checkpoint(tmp_path / "last_good.ckpt")
    assert ck.step == 4
    assert not (tmp_path / "final.ckpt").exists()
