"""AdamW training loop, learning-rate decay and checkpoint files."""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .data import AugmentConfig, DepthSample, augment, make_batch
from .losses import LossParams, silog_loss
from .model import ConfigError, FscnModel, ModelConfig, build_model
from .tensor import backward

log = logging.getLogger(__name__)

MAGIC = b"FSCNCKPT"
VERSION = 1


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 8
    lr0: float = 1e-4
    total_steps: Optional[int] = None
    seed: int = 0
    loss: LossParams = field(default_factory=LossParams)
    checkpoint_every: int = 0
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    lr_power: float = 0.9
    lr_end_ratio: float = 0.1

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossParams(**self.loss)
        for key in ("epochs", "checkpoint_every"):
            if getattr(self, key) < 0:
                raise ConfigError(f"train.{key}: must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size: must be positive")
        if self.total_steps is not None and self.total_steps < 0:
            raise ConfigError("train.total_steps: must be non-negative")
        if not self.lr0 > 0:
            raise ConfigError("train.lr0: must be positive")
        for key in ("beta1", "beta2"):
            if not 0 < getattr(self, key) < 1:
                raise ConfigError(f"train.{key}: must lie in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        for key in d:
            if key not in known:
                raise ConfigError(f"train.{key}: unknown key")
        d = dict(d)
        if "loss" in d:
            loss = d["loss"]
            for key in loss:
                if key not in LossParams.__dataclass_fields__:
                    raise ConfigError(f"train.loss.{key}: unknown key")
            try:
                d["loss"] = LossParams(**loss)
            except ValueError as e:
                raise ConfigError(f"train.loss: {e}") from None
        return cls(**d)

    def planned_steps(self, n_samples: int) -> int:
        steps = self.epochs * math.ceil(n_samples / self.batch_size)
        if self.total_steps is not None:
            steps = min(steps, self.total_steps)
        return steps


# --------------------------------------------------------------------------
# optimiser


@dataclass
class OptimState:
    m: dict
    v: dict
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    weight_decay: float = 1e-2
    lr0: float = 1e-4

    @classmethod
    def for_params(cls, named_params, cfg: TrainConfig) -> "OptimState":
        m = {name: np.zeros_like(p.data) for name, p in named_params}
        v = {name: np.zeros_like(a) for name, a in m.items()}
        return cls(m, v, 0, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay, cfg.lr0)


def decays(name: str) -> bool:
    # no decay on biases and concatenation weights
    return not (name.endswith("bias") or ".alphas." in name)


def adamw_step(named_params, grads: dict, state: OptimState, lr: float) -> None:
    """One decoupled-weight-decay Adam update, in place."""
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**state.t
    c2 = 1 - b2**state.t
    for name, p in named_params:
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay and decays(name):
            update = update + state.weight_decay * p.data
        p.data -= (lr * update).astype(p.dtype)


def lr_at(step: int, cfg: TrainConfig, total_steps: Optional[int] = None) -> float:
    """Polynomial decay from ``lr0`` to ``lr0 * lr_end_ratio``."""
    total = total_steps if total_steps is not None else cfg.total_steps
    if not total:
        return cfg.lr0
    lr_end = cfg.lr0 * cfg.lr_end_ratio
    frac = min(max(step / total, 0.0), 1.0)
    return (cfg.lr0 - lr_end) * (1 - frac) ** cfg.lr_power + lr_end


# --------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    params: dict
    optim: OptimState
    step: int
    rng_state: dict
    loss_log: list = field(default_factory=list)

    def to_model(self) -> FscnModel:
        model = build_model(self.model_config, seed=0)
        model.load_arrays(self.params)
        return model


def _blob(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write header, config JSON, float32 blobs (params, m, v) and the rng state.

    Layout: ``MAGIC | u32 version | u64 header_len | header JSON | blobs |
    u64 rng_len | rng JSON``, all little-endian.
    """
    names = list(ckpt.params)
    header = {
        "model": ckpt.model_config.to_dict(),
        "train": ckpt.train_config.to_dict(),
        "step": ckpt.step,
        "optim": {k: getattr(ckpt.optim, k) for k in ("t", "beta1", "beta2", "eps", "weight_decay", "lr0")},
        "params": [[n, list(ckpt.params[n].shape)] for n in names],
        "loss_log": ckpt.loss_log,
    }
    head = json.dumps(header, sort_keys=True).encode()
    rng = json.dumps(ckpt.rng_state, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(head)), head]
    for group in (ckpt.params, ckpt.optim.m, ckpt.optim.v):
        parts.extend(_blob(group[n]) for n in names)
    parts += [struct.pack("<Q", len(rng)), rng]
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if buf[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    off = len(MAGIC)
    if len(buf) < off + 12:
        raise CheckpointError(f"{path}: truncated header")
    version, head_len = struct.unpack_from("<IQ", buf, off)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    off += 12
    if len(buf) < off + head_len:
        raise CheckpointError(f"{path}: truncated header")
    header = json.loads(buf[off : off + head_len])
    off += head_len
    shapes = [(n, tuple(s)) for n, s in header["params"]]
    groups = []
    for _ in range(3):
        group = {}
        for name, shape in shapes:
            nbytes = 4 * int(np.prod(shape, dtype=np.int64))
            if len(buf) < off + nbytes:
                raise CheckpointError(f"{path}: truncated while reading {name}")
            group[name] = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=off).reshape(shape).astype(np.float32)
            off += nbytes
        groups.append(group)
    if len(buf) < off + 8:
        raise CheckpointError(f"{path}: truncated before rng state")
    (rng_len,) = struct.unpack_from("<Q", buf, off)
    off += 8
    if len(buf) != off + rng_len:
        raise CheckpointError(f"{path}: expected {off + rng_len} bytes, found {len(buf)}")
    rng_state = json.loads(buf[off:])
    opt = header["optim"]
    optim = OptimState(groups[1], groups[2], **opt)
    return Checkpoint(
        ModelConfig.from_dict(header["model"]),
        TrainConfig.from_dict(header["train"]),
        groups[0],
        optim,
        header["step"],
        rng_state,
        [tuple(r) for r in header["loss_log"]],
    )


# --------------------------------------------------------------------------
# training loop


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, 0, epoch]).permutation(n)


def _step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, 1, step])


def batch_indices(seed: int, step: int, n: int, batch_size: int) -> np.ndarray:
    """Sample indices for ``step``; epochs walk a seeded permutation."""
    per_epoch = math.ceil(n / batch_size)
    epoch, k = divmod(step, per_epoch)
    order = _epoch_order(seed, epoch, n)
    return order[k * batch_size : (k + 1) * batch_size]


@dataclass
class TrainResult:
    model: FscnModel
    loss_log: list
    checkpoint: Checkpoint


def train(
    model: FscnModel,
    dataset: Sequence[DepthSample],
    cfg: TrainConfig,
    augment_cfg: Optional[AugmentConfig] = None,
    depth_cap_m: Optional[float] = None,
    checkpoint_dir=None,
    resume: Optional[Checkpoint] = None,
    stop_at: Optional[int] = None,
    on_step: Optional[Callable] = None,
) -> TrainResult:
    """Train ``model`` in place.

    The step schedule, data order and augmentation draws are pure functions
    of ``cfg.seed`` and the step index, so a resumed run reproduces the
    uninterrupted one. ``stop_at`` ends the loop early without changing the
    learning-rate schedule.
    """
    if not dataset:
        raise TrainingError("training set is empty")
    cap = depth_cap_m if depth_cap_m is not None else model.config.max_depth_m
    named = list(model.named_parameters())
    total = cfg.planned_steps(len(dataset))
    if resume is not None:
        model.load_arrays(resume.params)
        state = resume.optim
        start = resume.step
        loss_log = list(resume.loss_log)
    else:
        state = OptimState.for_params(named, cfg)
        start = 0
        loss_log = []
    end = total if stop_at is None else min(stop_at, total)
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    rng_state = {"scheme": "counter", "seed": cfg.seed}

    def snapshot(step: int) -> Checkpoint:
        return Checkpoint(
            model.config,
            cfg,
            {n: p.data.copy() for n, p in named},
            OptimState({k: a.copy() for k, a in state.m.items()}, {k: a.copy() for k, a in state.v.items()},
                       state.t, state.beta1, state.beta2, state.eps, state.weight_decay, state.lr0),
            step,
            dict(rng_state, next_step=step),
            list(loss_log),
        )

    last_good = snapshot(start)
    for step in range(start, end):
        idx = batch_indices(cfg.seed, step, len(dataset), cfg.batch_size)
        rng = _step_rng(cfg.seed, step)
        samples = [dataset[i] for i in idx]
        if augment_cfg is not None:
            samples = [augment(s, augment_cfg, rng) for s in samples]
        x, depth, mask = make_batch(samples, cap)
        lr = lr_at(step, cfg, total)
        model.zero_grad()
        loss = silog_loss(model(x), depth, mask, cfg.loss)
        value = loss.item()
        if not math.isfinite(value):
            if ckpt_dir is not None:
                save_checkpoint(ckpt_dir / "last_good.ckpt", last_good)
            raise TrainingError(f"non-finite loss at step {step}; last good checkpoint at step {last_good.step}")
        backward(loss)
        adamw_step(named, {n: p.grad for n, p in named}, state, lr)
        loss_log.append((step, lr, value))
        if on_step is not None:
            on_step(step, lr, value)
        done = step + 1
        if cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
            last_good = snapshot(done)
            if ckpt_dir is not None:
                save_checkpoint(ckpt_dir / f"step_{done:06d}.ckpt", last_good)
        if step % 100 == 0:
            log.info("step %d lr %.3g loss %.4f", step, lr, value)
    model.zero_grad()
    final = snapshot(max(end, start))
    if ckpt_dir is not None:
        save_checkpoint(ckpt_dir / "final.ckpt", final)
    return TrainResult(model, loss_log, final)


def predict(model: FscnModel, rgb: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Depth maps ``(n, h, w)`` for an rgb array ``(n, 3, h, w)``; no graph is kept."""
    from .tensor import Tensor

    out = []
    dtype = model.parameters()[0].dtype
    for i in range(0, len(rgb), batch_size):
        out.append(model(Tensor(np.asarray(rgb[i : i + batch_size], dtype=dtype))).data[:, 0])
    return np.concatenate(out, axis=0)
