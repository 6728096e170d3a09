"""Finite-difference checks for every differentiable op and the full model loss."""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .losses import LossParams, silog_loss
from .model import ACM, ModelConfig, SEBlock, Upscale, build_model
from .tensor import GradCheckReport, Tensor, grad_check

EPS = 1e-5
TOL = 1e-3


def _away_from_zero(rng, shape, margin=0.05):
    # keeps relu kinks outside the +-eps probe
    x = rng.normal(size=shape)
    return np.sign(x) * (np.abs(x) + margin)


def _leaf(arr, name):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True, name=name)


def _project(out: Tensor, rng) -> Callable:
    """Random linear functional so gradients do not cancel by symmetry."""
    w = Tensor(rng.normal(size=out.shape))
    return lambda y: T.tensor_sum(T.mul(y, w))


def _check(name, build, leaves, rng, **kw) -> GradCheckReport:
    proj = _project(build(), rng)
    return grad_check(lambda: proj(build()), leaves, EPS, TOL, op_name=name, **kw)


def op_reports(seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    reports = []

    # (input shape, cout, k, stride, pad); the first four take the unfolding
    # kernel, the rest the stride-1 shifted-tap kernel used when cin >= cout
    conv_cases = [
        ((1, 2, 5, 6), 3, 3, 1, 1),
        ((2, 3, 7, 5), 2, 3, 2, 1),
        ((1, 4, 4, 4), 5, 1, 1, 0),
        ((2, 2, 6, 6), 3, 3, 2, 0),
        ((1, 4, 5, 6), 3, 3, 1, 1),
        ((2, 3, 4, 5), 3, 3, 1, 2),
        ((1, 5, 3, 4), 2, 1, 1, 0),
    ]
    for i, (shape, cout, k, stride, pad) in enumerate(conv_cases):
        x = _leaf(rng.normal(size=shape), "x")
        w = _leaf(rng.normal(size=(cout, shape[1], k, k)), "weight")
        b = _leaf(rng.normal(size=cout), "bias")
        reports.append(_check(f"conv2d[{i}]", lambda: T.conv2d(x, w, b, stride, pad), [x, w, b], rng))

    for kind in ("relu", "sigmoid"):
        for i, shape in enumerate([(1, 2, 3, 3), (2, 1, 4, 5), (3, 3, 2, 2)]):
            x = _leaf(_away_from_zero(rng, shape), "x")
            reports.append(_check(f"{kind}[{i}]", lambda: T.activation(x, kind), [x], rng))

    for i, chans in enumerate([(2, 1, 3), (1,), (4, 2)]):
        parts = [_leaf(rng.normal(size=(2, c, 3, 4)), f"part{j}") for j, c in enumerate(chans)]
        reports.append(_check(f"concat_channels[{i}]", lambda: T.concat_channels(parts), parts, rng))
        x = _leaf(rng.normal(size=(2, sum(chans), 3, 4)), "x")
        reports.append(
            _check(f"split_channels[{i}]", lambda: T.concat_channels(T.split_channels(x, chans)[::-1]), [x], rng)
        )

    for i, (shape, th, tw) in enumerate([((1, 2, 2, 2), 4, 4), ((2, 1, 8, 4), 2, 1), ((1, 3, 4, 2), 2, 8), ((1, 1, 3, 5), 7, 5)]):
        x = _leaf(rng.normal(size=shape), "x")
        reports.append(_check(f"resample[{i}]", lambda: T.resample(x, th, tw), [x], rng))

    for i, shape in enumerate([(1, 2, 3, 3), (2, 3, 1, 4), (2, 1, 5, 2)]):
        x = _leaf(rng.normal(size=shape), "x")
        reports.append(_check(f"global_avg_pool[{i}]", lambda: T.global_avg_pool(x), [x], rng))
        gates = _leaf(rng.normal(size=shape[:2] + (1, 1)), "gates")
        reports.append(_check(f"scale_channels[{i}]", lambda: T.scale_channels(x, gates), [x, gates], rng))
        a = _leaf(rng.normal(), "a")
        reports.append(_check(f"scalar_mul[{i}]", lambda: T.scalar_mul(x, a), [x, a], rng))
        y = _leaf(rng.normal(size=shape), "y")
        reports.append(_check(f"mul[{i}]", lambda: T.mul(x, y), [x, y], rng))

    for i, shape in enumerate([(1, 1, 4, 4), (2, 1, 3, 5), (3, 1, 2, 2)]):
        pred = _leaf(rng.uniform(0.5, 5.0, size=shape), "pred")
        gt = rng.uniform(0.5, 5.0, size=shape)
        mask = rng.random(shape) > 0.2
        mask.flat[0] = True
        params = LossParams(lam=[0.85, 0.5, 0.0][i], alpha=10.0)
        reports.append(grad_check(lambda: silog_loss(pred, gt, mask, params), [pred], EPS, TOL, op_name=f"silog_loss[{i}]"))
    return reports


def block_reports(seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    reports = []
    cfg = ModelConfig(se_reduction=4)

    for i, (c, hw) in enumerate([(8, 3), (12, 4), (6, 2)]):
        se = SEBlock(c, cfg.se_reduction, rng, dtype=np.float64)
        x = _leaf(rng.normal(size=(2, c, hw, hw)), "x")
        leaves = [x, *[p for _, p in se.named_parameters()]]
        reports.append(_check(f"se_block[{i}]", lambda: se(x), leaves, rng))

    for i, (cin, cout, hw) in enumerate([(4, 3, 2), (3, 5, 3), (2, 2, 4)]):
        up = Upscale(cin, cout, rng, dtype=np.float64)
        up.conv.bias.data[:] = 0.3
        x = _leaf(rng.normal(size=(1, cin, hw, hw)), "x")
        reports.append(_check(f"upscale[{i}]", lambda: up(x), [x, up.conv.weight, up.conv.bias], rng))

    for i, (use_cw, use_se) in enumerate([(True, True), (False, True), (True, False)]):
        acfg = ModelConfig(use_concat_weights=use_cw, use_se=use_se, se_reduction=4)
        skips = [_leaf(rng.normal(size=(1, c, 4, 4)), f"skip{j}") for j, c in enumerate((2, 3, 2, 1))]
        d = _leaf(rng.normal(size=(1, 3, 4, 4)), "d")
        acm = ACM([1, 2, 3, 4], [2, 3, 2, 1], 3, acfg, rng, dtype=np.float64)
        acm.fuse.bias.data[:] = 0.5
        leaves = [*skips, d, *[p for _, p in acm.named_parameters()]]
        reports.append(_check(f"acm[{i}]", lambda: acm(skips, d), leaves, rng))
    return reports


def model_report(seed: int = 0, shape=(2, 3, 32, 64), samples_per_weight: int = 2, skip_mode: str = "full") -> GradCheckReport:
    """End-to-end loss gradient w.r.t. every concatenation weight and sampled conv weights."""
    rng = np.random.default_rng(seed)
    n, _, h, w = shape
    cfg = ModelConfig(skip_mode=skip_mode, input_h=h, input_w=w)
    model = build_model(cfg, seed).astype(np.float64)
    x = Tensor(rng.uniform(0, 1, size=shape))
    gt = rng.uniform(1.0, 9.0, size=(n, 1, h, w))
    mask = rng.random((n, 1, h, w)) > 0.02
    leaves = []
    for name, p in model.named_parameters():
        p.name = name
        if ".alphas." in name or name.endswith("weight"):
            leaves.append(p)

    def f():
        return silog_loss(model(x), gt, mask, LossParams())

    # every alpha in full, sampled entries elsewhere
    alpha = [p for p in leaves if p.size == 1]
    weights = [p for p in leaves if p.size > 1]
    r1 = grad_check(f, alpha, EPS, TOL, op_name=f"fscn_loss[{skip_mode}].alphas") if alpha else None
    r2 = grad_check(f, weights, EPS, TOL, max_entries=samples_per_weight, seed=seed, op_name=f"fscn_loss[{skip_mode}].weights")
    if r1 is None:
        return r2
    worst = max(r1.max_rel_error, r2.max_rel_error)
    return GradCheckReport(
        f"fscn_loss[{skip_mode}]",
        worst,
        r1.per_parameter_errors + r2.per_parameter_errors,
        worst <= TOL,
        TOL,
        r1.kink_reprobes + r2.kink_reprobes,
    )


MODEL_CASES = (("full", (2, 3, 32, 64)), ("same", (1, 3, 64, 32)), ("none", (2, 3, 32, 32)))


def run_suite(seed: int = 0) -> list:
    reports = op_reports(seed) + block_reports(seed)
    for k, (mode, shape) in enumerate(MODEL_CASES):
        reports.append(model_report(seed + k, shape, skip_mode=mode))
    return reports
