"""RGB-D samples: synthetic scenes, PNG storage, augmentation and batching."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .losses import valid_mask
from .tensor import Tensor

DEPTH_SCALE = 256.0


class DataError(ValueError):
    """Missing, corrupt or inconsistent sample data."""


@dataclass
class DepthSample:
    rgb: np.ndarray  # (1, 3, h, w) in [0, 1]
    depth_m: np.ndarray  # (h, w), 0 marks invalid
    id: str = ""

    def __post_init__(self):
        if self.rgb.ndim == 3:
            self.rgb = self.rgb[None]
        if self.rgb.shape[:2] != (1, 3) or self.rgb.shape[2:] != self.depth_m.shape:
            raise DataError(f"{self.id}: rgb {self.rgb.shape} does not match depth {self.depth_m.shape}")

    @property
    def hw(self) -> tuple:
        return self.depth_m.shape


@dataclass
class AugmentConfig:
    flip_p: float = 0.5
    contrast_p: float = 0.5
    color_p: float = 0.5
    rot_range_deg: tuple = (-2.5, 2.5)
    crop_h: int = 64
    crop_w: int = 128

    def __post_init__(self):
        self.rot_range_deg = tuple(float(v) for v in self.rot_range_deg)
        for key in ("flip_p", "contrast_p", "color_p"):
            if not 0.0 <= getattr(self, key) <= 1.0:
                raise ValueError(f"{key}: probability must lie in [0, 1]")
        lo, hi = self.rot_range_deg
        if lo > hi:
            raise ValueError("rot_range_deg: lower bound exceeds upper bound")

    @classmethod
    def disabled(cls, crop_h: int, crop_w: int) -> "AugmentConfig":
        return cls(0.0, 0.0, 0.0, (0.0, 0.0), crop_h, crop_w)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rot_range_deg"] = list(self.rot_range_deg)
        return d


# --------------------------------------------------------------------------
# synthetic scenes


def _render_scene(rng: np.random.Generator, h: int, w: int, max_depth_m: float, constant: Optional[float]):
    near, far = 0.15 * max_depth_m, 0.9 * max_depth_m
    if constant is not None:
        depth = np.full((h, w), constant)
        albedo = np.broadcast_to(rng.uniform(0.4, 1.0, size=(3, 1, 1)), (3, h, w))
    else:
        # ground plane receding towards the top of the image
        rows = np.linspace(1.0, 0.0, h)[:, None]
        horizon = rng.uniform(0.6, 1.0)
        depth = np.broadcast_to(far - (far - near) * np.clip(rows / horizon, 0, 1) ** 0.7, (h, w)).copy()
        albedo = np.empty((3, h, w))
        albedo[:] = rng.uniform(0.5, 1.0, size=(3, 1, 1))
        for _ in range(rng.integers(2, 6)):
            rh, rw = rng.integers(h // 8, h // 2), rng.integers(w // 10, w // 3)
            y0, x0 = rng.integers(0, h - rh), rng.integers(0, w - rw)
            z = rng.uniform(near, far)
            region = (slice(y0, y0 + rh), slice(x0, x0 + rw))
            # painter's order: nearer rectangles occlude farther surfaces
            closer = depth[region] > z
            depth[region] = np.where(closer, z, depth[region])
            colour = rng.uniform(0.3, 1.0, size=3)
            colour /= colour.max()
            for c in range(3):
                albedo[c][region] = np.where(closer, colour[c], albedo[c][region])
    shade = 1.0 - 0.75 * (depth / max_depth_m)
    rgb = np.clip(albedo * shade, 0.0, 1.0)
    return rgb, depth


def generate_synthetic(
    seed: int,
    n: int,
    h: int,
    w: int,
    max_depth_m: float,
    invalid_frac: float = 0.02,
    constant_depth: Optional[float] = None,
    offset: int = 0,
) -> list:
    """Procedural scenes whose brightness falls off with depth.

    Sample ``i`` draws from its own stream, so ``offset`` selects a disjoint
    set (e.g. a held-out split after the training samples). ``constant_depth``
    renders a flat, uniformly shaded scene at that depth.
    """
    if h % 32 or w % 32:
        raise DataError(f"synthetic size must be a multiple of 32, got {h}x{w}")
    samples = []
    for i in range(offset, offset + n):
        rng = np.random.default_rng([seed, i])
        rgb, depth = _render_scene(rng, h, w, max_depth_m, constant_depth)
        if constant_depth is None and invalid_frac > 0:
            depth[rng.random((h, w)) < invalid_frac] = 0.0
        samples.append(
            DepthSample(rgb.astype(np.float32)[None], depth.astype(np.float32), id=f"synth_{seed}_{i:05d}")
        )
    return samples


# --------------------------------------------------------------------------
# storage


def read_rgb_png(path) -> np.ndarray:
    """8-bit colour image as ``(1, 3, h, w)`` float32 in [0, 1]."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            rgb = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read rgb image {path}: {e}") from e
    return rgb.transpose(2, 0, 1)[None].copy()


def load_sample(rgb_path, depth_path) -> DepthSample:
    rgb_path, depth_path = Path(rgb_path), Path(depth_path)
    rgb = read_rgb_png(rgb_path)
    depth = read_depth_png(depth_path)
    if rgb.shape[2:] != depth.shape:
        raise DataError(f"size mismatch: {rgb_path} is {rgb.shape[2:]}, {depth_path} is {depth.shape}")
    return DepthSample(rgb, depth, id=rgb_path.stem)


def read_depth_png(path) -> np.ndarray:
    path = Path(path)
    try:
        with Image.open(path) as im:
            raw = np.array(im)
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read depth image {path}: {e}") from e
    if raw.ndim != 2:
        raise DataError(f"depth image {path} must be single-channel, got shape {raw.shape}")
    return (raw.astype(np.float64) / DEPTH_SCALE).astype(np.float32)


def write_depth_png(path, depth_m: np.ndarray) -> None:
    raw = np.clip(np.rint(np.asarray(depth_m, dtype=np.float64) * DEPTH_SCALE), 0, 65535).astype(np.uint16)
    Image.fromarray(raw).save(path)


def write_rgb_png(path, rgb: np.ndarray) -> None:
    arr = np.asarray(rgb)
    if arr.ndim == 4:
        arr = arr[0]
    img = np.rint(np.clip(arr.transpose(1, 2, 0), 0, 1) * 255).astype(np.uint8)
    Image.fromarray(img).save(path)


def parse_split(path) -> list:
    """Read ``<rgb_path> <depth_path>`` lines; '#' starts a comment."""
    entries = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise DataError(f"{path}:{lineno}: expected '<rgb_path> <depth_path>', got {line!r}")
        entries.append((parts[0], parts[1]))
    return entries


def load_split(root, name: str) -> list:
    root = Path(root)
    split = root / "splits" / f"{name}.txt"
    if not split.exists():
        raise DataError(f"missing split file {split}")
    samples = []
    for rgb, depth in parse_split(split):
        rgb_p, depth_p = root / rgb, root / depth
        for p in (rgb_p, depth_p):
            if not p.exists():
                raise DataError(f"{split}: referenced file {p} does not exist")
        samples.append(load_sample(rgb_p, depth_p))
    return samples


def materialize(samples: Sequence[DepthSample], root, split: str) -> Path:
    """Write samples as PNGs under ``root`` and list them in ``splits/<split>.txt``."""
    root = Path(root)
    for sub in ("rgb", "depth", "splits"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        write_rgb_png(root / "rgb" / f"{s.id}.png", s.rgb)
        write_depth_png(root / "depth" / f"{s.id}.png", s.depth_m)
        lines.append(f"rgb/{s.id}.png depth/{s.id}.png")
    split_path = root / "splits" / f"{split}.txt"
    split_path.write_text("".join(line + "\n" for line in lines))
    return split_path


# --------------------------------------------------------------------------
# augmentation


def augment(sample: DepthSample, cfg: AugmentConfig, rng: np.random.Generator) -> DepthSample:
    """Rotate, flip, adjust contrast and colour, then crop.

    Geometric steps touch rgb and depth identically; photometric steps touch
    rgb only. Every draw is taken unconditionally so the random stream does
    not depend on which effects fire.
    """
    h, w = sample.hw
    if cfg.crop_h > h or cfg.crop_w > w:
        raise DataError(f"crop {cfg.crop_h}x{cfg.crop_w} larger than sample {h}x{w}")
    theta = rng.uniform(*cfg.rot_range_deg)
    flip = rng.random() < cfg.flip_p
    do_contrast = rng.random() < cfg.contrast_p
    contrast = rng.uniform(0.9, 1.1)
    do_color = rng.random() < cfg.color_p
    gains = rng.uniform(0.9, 1.1, size=3)
    top = int(rng.integers(0, h - cfg.crop_h + 1))
    left = int(rng.integers(0, w - cfg.crop_w + 1))

    rgb = sample.rgb[0]
    depth = sample.depth_m
    if theta != 0.0:
        rgb = ndimage.rotate(rgb, theta, axes=(2, 1), reshape=False, order=1, mode="constant", cval=0.0)
        depth = ndimage.rotate(depth, theta, axes=(1, 0), reshape=False, order=0, mode="constant", cval=0.0)
    if flip:
        rgb = rgb[:, :, ::-1]
        depth = depth[:, ::-1]
    if do_contrast:
        mean = rgb.mean()
        rgb = mean + contrast * (rgb - mean)
    if do_color:
        rgb = rgb * gains[:, None, None].astype(rgb.dtype)
    if do_contrast or do_color or theta != 0.0:
        rgb = np.clip(rgb, 0.0, 1.0)
    rgb = rgb[:, top : top + cfg.crop_h, left : left + cfg.crop_w]
    depth = depth[top : top + cfg.crop_h, left : left + cfg.crop_w]
    return DepthSample(
        np.ascontiguousarray(rgb, dtype=sample.rgb.dtype)[None],
        np.ascontiguousarray(depth, dtype=sample.depth_m.dtype),
        id=sample.id,
    )


def make_batch(samples: Sequence[DepthSample], cap_m: float, dtype=np.float32):
    """Stack samples into ``(rgb Tensor(n,3,h,w), depth (n,1,h,w), mask (n,1,h,w))``."""
    if not samples:
        raise DataError("cannot batch zero samples")
    hw = samples[0].hw
    for s in samples:
        if s.hw != hw:
            raise DataError(f"sample {s.id} is {s.hw}, batch expects {hw}")
    rgb = np.concatenate([s.rgb for s in samples], axis=0).astype(dtype)
    depth = np.stack([s.depth_m for s in samples])[:, None].astype(dtype)
    mask = np.stack([valid_mask(s.depth_m, cap_m) for s in samples])[:, None]
    return Tensor(rgb), depth, mask
