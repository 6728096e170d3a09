"""Run configuration: the JSON document consumed by the command line."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .data import AugmentConfig
from .model import ConfigError, ModelConfig
from .train import TrainConfig


def _reject_unknown(section: str, d: dict, allowed) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{section}: expected an object")
    for key in d:
        if key not in allowed:
            raise ConfigError(f"{section}.{key}: unknown key")


@dataclass
class SyntheticSpec:
    seed: int = 0
    n_train: int = 64
    n_test: int = 64
    invalid_frac: float = 0.02


@dataclass
class DataConfig:
    root: Optional[str] = None
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    augment: Optional[AugmentConfig] = field(default_factory=AugmentConfig)
    depth_cap_m: float = 10.0

    def __post_init__(self):
        if not self.depth_cap_m > 0:
            raise ConfigError("data.depth_cap_m: must be positive")

    def to_dict(self) -> dict:
        return {
            "root": self.root,
            "synthetic": vars(self.synthetic).copy(),
            "augment": self.augment.to_dict() if self.augment is not None else None,
            "depth_cap_m": self.depth_cap_m,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        _reject_unknown("data", d, cls.__dataclass_fields__)
        d = dict(d)
        if "synthetic" in d:
            _reject_unknown("data.synthetic", d["synthetic"], SyntheticSpec.__dataclass_fields__)
            d["synthetic"] = SyntheticSpec(**d["synthetic"])
        if d.get("augment") is not None:
            _reject_unknown("data.augment", d["augment"], AugmentConfig.__dataclass_fields__)
            try:
                d["augment"] = AugmentConfig(**d["augment"])
            except ValueError as e:
                raise ConfigError(f"data.augment.{e}") from None
        return cls(**d)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    output_dir: str = "runs/default"

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "data": self.data.to_dict(),
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        _reject_unknown("config", d, cls.__dataclass_fields__)
        try:
            model = ModelConfig.from_dict(d.get("model", {}))
        except TypeError as e:
            raise ConfigError(f"model: {e}") from None
        except ConfigError as e:
            msg = str(e)
            raise ConfigError(msg if msg.startswith("model.") else f"model.{msg}") from None
        return cls(
            model=model,
            train=TrainConfig.from_dict(d.get("train", {})),
            data=DataConfig.from_dict(d.get("data", {})),
            output_dir=str(d.get("output_dir", cls.output_dir)),
        )

    def check(self) -> None:
        """Cross-section consistency: augmentation crops feed the model directly."""
        aug = self.data.augment
        if aug is not None:
            if aug.crop_h != self.model.input_h:
                raise ConfigError(f"data.augment.crop_h: {aug.crop_h} must equal model.input_h ({self.model.input_h})")
            if aug.crop_w != self.model.input_w:
                raise ConfigError(f"data.augment.crop_w: {aug.crop_w} must equal model.input_w ({self.model.input_w})")

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps() + "\n")


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return RunConfig.from_dict(raw)
