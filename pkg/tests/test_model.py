import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fscn import tensor as T
from fscn.model import (
    ACM,
    Conv,
    ConfigError,
    ModelConfig,
    SEBlock,
    Upscale,
    build_model,
    encoder_forward,
    fscn_forward,
    param_count,
    se_param_count,
)
from fscn.tensor import ShapeError, Tensor


def _small(**kw):
    kw.setdefault("input_h", 32)
    kw.setdefault("input_w", 64)
    return ModelConfig(**kw)


def _x(n=2, h=32, w=64, seed=0):
    return Tensor(np.random.default_rng(seed).uniform(0, 1, size=(n, 3, h, w)).astype(np.float32))


# ---------------------------------------------------------------- config


def test_default_schedule():
    assert ModelConfig().channel_schedule == [16, 24, 32, 48, 64, 96]


@pytest.mark.parametrize(
    "kw,key",
    [
        ({"skip_mode": "dense"}, "skip_mode"),
        ({"input_h": 48}, "input_h"),
        ({"input_w": 100}, "input_w"),
        ({"se_reduction": 0}, "se_reduction"),
        ({"max_depth_m": 0.0}, "max_depth_m"),
        ({"channel_schedule": [16, 24, 0, 48, 64, 96]}, "channel_schedule"),
        ({"channel_schedule": [16, 24]}, "channel_schedule"),
    ],
)
def test_invalid_config_names_the_field(kw, key):
    with pytest.raises(ConfigError, match=key):
        ModelConfig(**kw)


def test_config_round_trip():
    cfg = ModelConfig(skip_mode="same", use_se=False, input_h=32)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError, match="model.depth"):
        ModelConfig.from_dict({"depth": 3})


def test_skip_sources():
    assert ModelConfig(skip_mode="full").skip_sources(2) == [1, 2, 3, 4]
    assert ModelConfig(skip_mode="same").skip_sources(3) == [3]
    assert ModelConfig(skip_mode="none").skip_sources(1) == []


# ---------------------------------------------------------------- init


def test_build_is_deterministic():
    a = build_model(_small(), seed=7).state_arrays()
    b = build_model(_small(), seed=7).state_arrays()
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    c = build_model(_small(), seed=8).state_arrays()
    assert any(not np.array_equal(a[k], c[k]) for k in a)


def _convs(module, out=None):
    out = [] if out is None else out
    if isinstance(module, Conv):
        out.append(module)
        return out
    for v in vars(module).values():
        items = v if isinstance(v, list) else [v]
        for item in items:
            if hasattr(item, "named_parameters"):
                _convs(item, out)
    return out


def test_xavier_uniform_bounds_and_variance():
    model = build_model(ModelConfig(), seed=0)
    convs = _convs(model)
    assert len(convs) > 20
    checked = 0
    for conv in convs:
        fan_in, fan_out = conv.fan
        w = conv.weight.data.astype(np.float64)
        assert np.abs(w).max() <= np.sqrt(6.0 / (fan_in + fan_out))
        assert not conv.bias.data.any()
        if w.size >= 500:  # the sample variance of smaller tensors is too noisy for a 20% band
            target = 2.0 / (fan_in + fan_out)
            assert abs(w.var() / target - 1) < 0.2, conv.weight.name
            checked += 1
    assert checked >= 15


def test_alphas_uniform_unit_interval():
    model = build_model(ModelConfig(), seed=3)
    alphas = [p.data.item() for n, p in model.named_parameters() if ".alphas." in n]
    assert len(alphas) == 16
    assert all(0.0 <= a < 1.0 for a in alphas)
    assert len(set(alphas)) == 16


@pytest.mark.parametrize("mode,count", [("full", 16), ("same", 4), ("none", 0)])
def test_alpha_counts(mode, count):
    model = build_model(_small(skip_mode=mode))
    assert sum(1 for n, _ in model.named_parameters() if ".alphas." in n) == count


def test_no_alphas_without_concat_weights():
    model = build_model(_small(use_concat_weights=False))
    assert not [n for n, _ in model.named_parameters() if ".alphas." in n]


# ---------------------------------------------------------------- counts


def test_param_count_single_conv():
    assert param_count(Conv(2, 4, 3, np.random.default_rng(0))) == 76


def test_param_count_ordering():
    counts = {m: param_count(build_model(ModelConfig(skip_mode=m))) for m in ("full", "same", "none")}
    assert counts["full"] > counts["same"] > counts["none"]


def test_dropping_se_removes_exactly_the_se_parameters():
    full = build_model(ModelConfig())
    no_se = build_model(ModelConfig(use_se=False))
    assert se_param_count(full) > 0
    assert param_count(full) - param_count(no_se) == se_param_count(full)


def test_dropping_concat_weights_removes_sixteen():
    assert param_count(build_model(ModelConfig())) - param_count(build_model(ModelConfig(use_concat_weights=False))) == 16


# ---------------------------------------------------------------- forward


def test_encoder_pyramid():
    model = build_model(ModelConfig(input_h=64, input_w=64))
    feats = encoder_forward(model, _x(2, 64, 64))
    assert [f.shape[2] for f in feats] == [64, 32, 16, 8, 4, 2]
    assert [f.shape[1] for f in feats] == model.config.channel_schedule
    assert all(f.shape[0] == 2 for f in feats)


@settings(max_examples=6, deadline=None)
@given(mode=st.sampled_from(["none", "same", "full"]), hk=st.integers(1, 2), wk=st.integers(1, 3), n=st.integers(1, 2))
def test_output_shape_contract(mode, hk, wk, n):
    h, w = 32 * hk, 32 * wk
    model = build_model(ModelConfig(skip_mode=mode, base_channels=4, input_h=h, input_w=w))
    y = fscn_forward(model, _x(n, h, w))
    assert y.shape == (n, 1, h, w)
    assert np.all(y.data > 0) and np.all(y.data < model.config.max_depth_m)


def test_wrong_input_size_rejected():
    model = build_model(_small())
    with pytest.raises(ShapeError):
        model(_x(1, 64, 64))


def test_skips_carry_signal():
    x = _x()
    a = build_model(_small(skip_mode="none"), seed=0)(x).data
    b = build_model(_small(skip_mode="full"), seed=0)(x).data
    assert not np.allclose(a, b)


def test_acm_output_matches_decoder_shape():
    model = build_model(_small())
    x = _x()
    feats = model.encode(x)
    d = model.up_seed(feats[5])
    for j in range(4, 0, -1):
        acm = model.acms[j - 1]
        skips = [T.resample(feats[i], *d.shape[2:]) for i in acm.sources]
        f = acm(skips, d)
        assert f.shape == d.shape
        d = model.ups[j - 1](f)


def test_all_parameters_receive_gradients():
    model = build_model(_small())
    from fscn.losses import silog_loss

    y = model(_x())
    gt = np.full(y.shape, 3.0)
    T.backward(silog_loss(y, gt, np.ones(y.shape, bool)))
    for name, p in model.named_parameters():
        assert p.grad is not None, name


# ---------------------------------------------------------------- blocks


def test_se_zero_weights_halves_input():
    rng = np.random.default_rng(0)
    se = SEBlock(8, 16, rng, dtype=np.float64)
    for _, p in se.named_parameters():
        p.data[...] = 0
    x = Tensor(rng.normal(size=(2, 8, 3, 3)))
    np.testing.assert_allclose(se(x).data, 0.5 * x.data)


def test_se_hidden_floor():
    se = SEBlock(20, 16, np.random.default_rng(0))
    assert se.reduce.weight.shape[0] == 4
    assert SEBlock(128, 16, np.random.default_rng(0)).reduce.weight.shape[0] == 8


def test_se_gates_do_not_depend_on_position():
    rng = np.random.default_rng(1)
    se = SEBlock(6, 2, rng, dtype=np.float64)
    x = np.broadcast_to(rng.normal(size=(1, 6, 1, 1)), (1, 6, 4, 5)).copy()
    y = se(Tensor(x)).data
    ratio = y / x
    assert np.allclose(ratio, ratio[:, :, :1, :1])


def _acm(use_cw=True, use_se=True):
    cfg = ModelConfig(use_concat_weights=use_cw, use_se=use_se)
    return ACM([1, 2, 3, 4], [1, 1, 1, 1], 1, cfg, np.random.default_rng(0), dtype=np.float64)


def _set_alphas(acm, values):
    for a, v in zip(acm.alphas, values):
        a.data[...] = v


def test_acm_concat_example():
    acm = _acm()
    _set_alphas(acm, [0.5, 1, 0, 2])
    skips = [Tensor(np.full((1, 1, 1, 1), v), dtype=np.float64) for v in (1, 2, 3, 4)]
    d = Tensor(np.full((1, 1, 1, 1), 9.0))
    np.testing.assert_array_equal(acm.concat(skips, d).data.ravel(), [0.5, 2, 0, 8, 9])


def test_acm_zero_fuse_gives_zero():
    acm = _acm()
    _set_alphas(acm, [1, 1, 1, 1])
    for _, p in acm.se.named_parameters():
        p.data[...] = 0
    acm.fuse.weight.data[...] = 0
    rng = np.random.default_rng(2)
    skips = [Tensor(rng.normal(size=(1, 1, 3, 3))) for _ in range(4)]
    assert not acm(skips, Tensor(rng.normal(size=(1, 1, 3, 3)))).data.any()


def test_acm_zero_alphas_silence_encoder_blocks():
    acm = _acm()
    _set_alphas(acm, [0, 0, 0, 0])
    rng = np.random.default_rng(3)
    skips = [Tensor(rng.normal(size=(1, 1, 2, 2))) for _ in range(4)]
    d = Tensor(rng.normal(size=(1, 1, 2, 2)))
    cat = acm.concat(skips, d).data
    assert not cat[:, :4].any()
    np.testing.assert_array_equal(cat[:, 4:], d.data)


def test_doubling_alpha_doubles_its_block():
    acm = _acm()
    rng = np.random.default_rng(4)
    skips = [Tensor(rng.normal(size=(1, 1, 2, 2))) for _ in range(4)]
    d = Tensor(rng.normal(size=(1, 1, 2, 2)))
    before = acm.concat(skips, d).data.copy()
    acm.alphas[2].data *= 2
    after = acm.concat(skips, d).data
    np.testing.assert_array_equal(after[:, 2], 2 * before[:, 2])
    np.testing.assert_array_equal(np.delete(after, 2, axis=1), np.delete(before, 2, axis=1))


def test_acm_without_weights_is_plain_concat():
    acm = _acm(use_cw=False)
    skips = [Tensor(np.full((1, 1, 1, 1), v), dtype=np.float64) for v in (1, 2, 3, 4)]
    np.testing.assert_array_equal(acm.concat(skips, Tensor(np.full((1, 1, 1, 1), 9.0))).data.ravel(), [1, 2, 3, 4, 9])


def test_acm_spatial_mismatch_rejected():
    acm = _acm()
    skips = [Tensor(np.zeros((1, 1, 2, 2))) for _ in range(3)] + [Tensor(np.zeros((1, 1, 4, 4)))]
    with pytest.raises(ShapeError):
        acm(skips, Tensor(np.zeros((1, 1, 2, 2))))


def test_upscale_constant_input():
    up = Upscale(3, 2, np.random.default_rng(0), dtype=np.float64)
    up.conv.weight.data[...] = 0
    up.conv.bias.data[:] = [0.7, -0.2]
    y = up(Tensor(np.full((1, 3, 2, 3), 5.0)))
    assert y.shape == (1, 2, 4, 6)
    assert np.all(y.data[:, 0] == 0.7) and np.all(y.data[:, 1] == 0.0)


def test_astype_copies():
    model = build_model(_small())
    m64 = model.astype(np.float64)
    assert all(p.dtype == np.float64 for p in m64.parameters())
    assert all(p.dtype == np.float32 for p in model.parameters())
