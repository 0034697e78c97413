"""Experiment configuration: a flat JSON object mirroring :class:`ExperimentConfig`."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..backbones import EncoderConfig
from ..errors import ConfigError, ShapeError

PREFINETUNE_DOMAINS = ("none", "matched", "mismatched")

# Fixed component indices for seed splitting; never renumber.
SEED_COMPONENTS = {
    "train_data": 0,
    "val_data": 1,
    "pretrain_data": 2,
    "global_init": 3,
    "decoder_init": 4,
    "windowed_init": 5,
    "fusion_init": 6,
    "head_init": 7,
    "step1_reconstruction": 8,
    "step1_contrastive": 9,
    "step2_shuffle": 10,
}


@dataclass(frozen=True)
class ExperimentConfig:
    image_size: int = 16
    patch: int = 4
    channels: int = 8
    layers: int = 2
    window: int = 2
    ffn_hidden: int = 32
    mask_ratio: float = 0.75
    tau: float = 0.2
    lr_step1: float = 0.05
    lr_step2: float = 0.02
    step1_steps: int = 300
    step2_epochs: int = 40
    batch_size: int = 32
    pretrain_size: int = 512
    train_size: int = 256
    val_size: int = 512
    seed: int = 0
    fusion_on: bool = True
    prefinetune_domain: str = "matched"
    ablation_seeds: tuple = (0, 1, 2, 3, 4)
    out_dir: str = "runs"

    def __post_init__(self):
        for name in ("image_size", "patch", "channels", "layers", "ffn_hidden", "batch_size",
                     "pretrain_size", "train_size", "val_size"):
            if not isinstance(getattr(self, name), int) or getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        for name in ("window", "step1_steps", "step2_epochs", "seed"):
            if not isinstance(getattr(self, name), int) or getattr(self, name) < 0:
                raise ConfigError(f"{name} must be a non-negative integer")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError("mask_ratio must lie in (0, 1)")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.lr_step1 < 0 or self.lr_step2 < 0:
            raise ConfigError("learning rates must be non-negative")
        if self.prefinetune_domain not in PREFINETUNE_DOMAINS:
            raise ConfigError(f"prefinetune_domain must be one of {PREFINETUNE_DOMAINS}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2 for in-batch negatives")
        object.__setattr__(self, "ablation_seeds", tuple(int(s) for s in self.ablation_seeds))
        try:
            self.encoder_config(0)
            self.encoder_config(self.window)
        except ShapeError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def prefinetune_on(self) -> bool:
        return self.prefinetune_domain != "none"

    def encoder_config(self, window: int) -> EncoderConfig:
        return EncoderConfig(
            image_size=self.image_size,
            in_channels=1,
            patch=self.patch,
            dim=self.channels,
            num_layers=self.layers,
            window=window,
            hidden=self.ffn_hidden,
        )

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["ablation_seeds"] = list(self.ablation_seeds)
        return d

    def digest(self) -> str:
        """Stable hash of every setting except output location."""
        d = self.to_dict()
        d.pop("out_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def component_seed(self, component: str, seed: int | None = None) -> int:
        """Derive a per-component seed from the master seed (see README)."""
        master = self.seed if seed is None else seed
        ss = np.random.SeedSequence([master, SEED_COMPONENTS[component]])
        return int(ss.generate_state(1, dtype=np.uint32)[0])

    def rng(self, component: str, seed: int | None = None) -> np.random.Generator:
        return np.random.default_rng(self.component_seed(component, seed))


def from_dict(d: dict) -> ExperimentConfig:
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        return ExperimentConfig(**d)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        d = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    return from_dict(d)


def save_config(config: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
