"""FSCN encoder-decoder with switchable skip topology and adaptive concatenation."""
from __future__ import annotations

import copy
import enum
from dataclasses import asdict, dataclass
from typing import Iterator, Optional

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    concat_channels,
    conv2d,
    global_avg_pool,
    relu,
    resample,
    scalar_mul,
    scale_channels,
    sigmoid,
)

# channel widths of E0..E5 relative to the stem width
_SCHEDULE_RATIOS = (1.0, 1.5, 2.0, 3.0, 4.0, 6.0)


class ConfigError(ValueError):
    """Invalid configuration value; the message names the offending key."""


class SkipMode(str, enum.Enum):
    NONE = "none"
    SAME = "same"
    FULL = "full"


@dataclass
class ModelConfig:
    skip_mode: SkipMode = SkipMode.FULL
    base_channels: int = 16
    channel_schedule: Optional[list] = None
    use_concat_weights: bool = True
    use_se: bool = True
    se_reduction: int = 16
    max_depth_m: float = 10.0
    input_h: int = 64
    input_w: int = 128

    def __post_init__(self):
        try:
            self.skip_mode = SkipMode(self.skip_mode)
        except ValueError:
            raise ConfigError(f"skip_mode: expected one of none/same/full, got {self.skip_mode!r}") from None
        if self.base_channels < 1:
            raise ConfigError("base_channels: must be positive")
        if self.channel_schedule is None:
            self.channel_schedule = [max(1, round(self.base_channels * r)) for r in _SCHEDULE_RATIOS]
        self.channel_schedule = [int(c) for c in self.channel_schedule]
        if len(self.channel_schedule) != 6:
            raise ConfigError(f"channel_schedule: need 6 entries for E0..E5, got {len(self.channel_schedule)}")
        if any(c < 1 for c in self.channel_schedule):
            raise ConfigError("channel_schedule: all widths must be positive")
        if self.channel_schedule[0] != self.base_channels:
            raise ConfigError("channel_schedule: first entry must equal base_channels")
        if self.se_reduction < 1:
            raise ConfigError("se_reduction: must be >= 1")
        if not self.max_depth_m > 0:
            raise ConfigError("max_depth_m: must be positive")
        for key in ("input_h", "input_w"):
            v = getattr(self, key)
            if v < 32 or v % 32:
                raise ConfigError(f"{key}: must be a positive multiple of 32, got {v}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["skip_mode"] = self.skip_mode.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        for key in d:
            if key not in known:
                raise ConfigError(f"model.{key}: unknown key")
        return cls(**d)

    def skip_sources(self, level: int) -> list:
        if self.skip_mode is SkipMode.FULL:
            return [1, 2, 3, 4]
        if self.skip_mode is SkipMode.SAME:
            return [level]
        return []


# --------------------------------------------------------------------------
# parameter containers


class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item
                    elif isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def _param(data: np.ndarray, name: str) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


class Conv(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 1, dtype=np.float32):
        fan_in, fan_out = cin * k * k, cout * k * k
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        self.weight = _param(rng.uniform(-limit, limit, size=(cout, cin, k, k)).astype(dtype), "weight")
        self.bias = _param(np.zeros(cout, dtype=dtype), "bias")
        self.stride = stride
        self.pad = k // 2

    @property
    def fan(self) -> tuple:
        cout, cin, k, _ = self.weight.shape
        return cin * k * k, cout * k * k

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.pad)


class SEBlock(Module):
    """Squeeze-excitation: channel gates from a pooled bottleneck."""

    def __init__(self, channels: int, reduction: int, rng: np.random.Generator, dtype=np.float32):
        hidden = max(4, channels // reduction)
        self.reduce = Conv(channels, hidden, 1, rng, dtype=dtype)
        self.expand = Conv(hidden, channels, 1, rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        gates = sigmoid(self.expand(relu(self.reduce(global_avg_pool(x)))))
        return scale_channels(x, gates)


class ACM(Module):
    """Adaptive concatenation at one decoder level.

    Encoder blocks are scaled by learnable weights, concatenated in front of
    the decoder feature, gated by SE and fused back to the decoder width by a
    3x3 convolution followed by relu.
    """

    def __init__(self, sources: list, skip_channels: list, dec_channels: int, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        self.sources = list(sources)
        self.alphas = []
        if cfg.use_concat_weights:
            self.alphas = [_param(np.asarray(rng.random(), dtype=dtype), f"alpha{i}") for i in sources]
        total = sum(skip_channels) + dec_channels
        self.se = SEBlock(total, cfg.se_reduction, rng, dtype) if cfg.use_se else None
        self.fuse = Conv(total, dec_channels, 3, rng, dtype=dtype)

    def concat(self, skips: list, d: Tensor) -> Tensor:
        for s in skips:
            if s.shape[2:] != d.shape[2:]:
                raise ShapeError(f"skip {s.shape} not resampled to decoder size {d.shape}")
        if len(skips) != len(self.sources):
            raise ShapeError(f"expected {len(self.sources)} skip features, got {len(skips)}")
        if self.alphas:
            skips = [scalar_mul(s, a) for s, a in zip(skips, self.alphas)]
        return concat_channels([*skips, d])

    def __call__(self, skips: list, d: Tensor) -> Tensor:
        x = self.concat(skips, d)
        if self.se is not None:
            x = self.se(x)
        return relu(self.fuse(x))


class Upscale(Module):
    """Bilinear x2 followed by 3x3 conv and relu."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, dtype=np.float32):
        self.conv = Conv(cin, cout, 3, rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return relu(self.conv(resample(x, 2 * x.shape[2], 2 * x.shape[3])))


class Encoder(Module):
    def __init__(self, channels: list, rng: np.random.Generator, dtype=np.float32):
        self.stem = Conv(3, channels[0], 3, rng, dtype=dtype)
        self.stages = []
        for k in range(1, 6):
            self.stages.append(Conv(channels[k - 1], channels[k], 3, rng, stride=2, dtype=dtype))
            self.stages.append(Conv(channels[k], channels[k], 3, rng, dtype=dtype))

    def __call__(self, x: Tensor) -> list:
        feats = [relu(self.stem(x))]
        for k in range(5):
            h = relu(self.stages[2 * k](feats[-1]))
            feats.append(relu(self.stages[2 * k + 1](h)))
        return feats


class FscnModel(Module):
    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        rng = np.random.default_rng(seed)
        ch = config.channel_schedule
        self.encoder = Encoder(ch, rng, dtype)
        self.up_seed = Upscale(ch[5], ch[4], rng, dtype)
        # index j-1 holds decoder level j
        self.acms = []
        if config.skip_mode is not SkipMode.NONE:
            for j in range(1, 5):
                src = config.skip_sources(j)
                self.acms.append(ACM(src, [ch[i] for i in src], ch[j], config, rng, dtype))
        self.ups = [Upscale(ch[j], ch[j - 1], rng, dtype) for j in range(1, 5)]
        self.head = Conv(ch[0], 1, 1, rng, dtype=dtype)

    def encode(self, x: Tensor) -> list:
        return self.encoder(x)

    def __call__(self, x: Tensor) -> Tensor:
        cfg = self.config
        if x.data.ndim != 4 or x.shape[1] != 3 or x.shape[2:] != (cfg.input_h, cfg.input_w):
            raise ShapeError(f"expected input (n, 3, {cfg.input_h}, {cfg.input_w}), got {x.shape}")
        feats = self.encode(x)
        d = self.up_seed(feats[5])
        for j in range(4, 0, -1):
            if self.acms:
                acm = self.acms[j - 1]
                h, w = d.shape[2:]
                skips = [resample(feats[i], h, w) for i in acm.sources]
                d = acm(skips, d)
            d = self.ups[j - 1](d)
        return scalar_mul(sigmoid(self.head(d)), cfg.max_depth_m)

    forward = __call__

    def state_arrays(self) -> dict:
        return {name: p.data for name, p in self.named_parameters()}

    def load_arrays(self, arrays: dict):
        params = dict(self.named_parameters())
        if set(params) != set(arrays):
            missing = sorted(set(params) ^ set(arrays))
            raise ValueError(f"parameter set mismatch: {missing[:5]}")
        for name, p in params.items():
            if arrays[name].shape != p.shape:
                raise ValueError(f"{name}: shape {arrays[name].shape} != {p.shape}")
            p.data = np.array(arrays[name], dtype=p.dtype)

    def astype(self, dtype) -> "FscnModel":
        clone = copy.deepcopy(self)
        for p in clone.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return clone


def build_model(config: ModelConfig, seed: int = 0, dtype=np.float32) -> FscnModel:
    return FscnModel(config, seed, dtype)


def encoder_forward(model: FscnModel, x: Tensor) -> list:
    return model.encode(x)


def fscn_forward(model: FscnModel, x: Tensor) -> Tensor:
    return model(x)


def param_count(model: Module) -> int:
    return int(sum(p.size for p in model.parameters()))


def se_param_count(model: FscnModel) -> int:
    return int(sum(param_count(a.se) for a in model.acms if a.se is not None))
