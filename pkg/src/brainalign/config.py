"""Run configuration, scale profiles, and reproducibility manifests."""

from __future__ import annotations

import hashlib
import json
import platform
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

from .text_encoder import EncoderConfig
from .vision import VisionConfig, VisionTrainConfig
from .volumes import SequenceType


class ConfigError(ValueError):
    pass


@dataclass
class MlmTrainParams:
    epochs: int = 250
    batch_size: int = 64
    lr: float = 1e-4
    mask_rate: float = 0.15
    patience: int = 10


@dataclass
class RsmTrainParams:
    epochs: int = 50
    batch_size: int = 16
    lr: float = 1e-6
    warmup_steps: int = 100
    n_pairs: int = 2000
    true_fraction: float = 0.5


@dataclass
class RunConfig:
    """Everything a pipeline run needs; profiles fix sizes consistently."""

    profile: str = "desk"
    seed: int = 0
    vocab_size: int = 2000
    min_frequency: int = 5
    block_length: int = 64
    encoder_layers: int = 2
    encoder_heads: int = 4
    encoder_hidden: int = 128
    embed_dim: int = 128
    canonical_shape: tuple[int, int, int] = (32, 32, 32)
    sequences: tuple[str, ...] = ("ax_t2", "ax_dwi", "ax_gre", "cor_t1")
    vision_block_layers: tuple[int, int, int, int] = (2, 2, 2, 2)
    vision_growth: int = 8
    vision_init_channels: int = 16
    mlm: MlmTrainParams = field(default_factory=MlmTrainParams)
    rsm: RsmTrainParams = field(default_factory=RsmTrainParams)
    vision_lr0: float = 1e-3
    vision_batch_size: int = 8
    vision_max_epochs: int = 12
    vision_plateau_patience: int = 5
    vision_plateau_factor: float = 10.0
    vision_early_stop_cycles: int = 3
    test_fraction: float = 0.2
    train_valid_ratios: tuple[float, float] = (0.85, 0.15)

    def encoder_config(self, vocab_size: int) -> EncoderConfig:
        return EncoderConfig(
            vocab_size=vocab_size,
            n_layers=self.encoder_layers,
            n_heads=self.encoder_heads,
            hidden_dim=self.encoder_hidden,
            embed_dim=self.embed_dim,
            block_length=self.block_length,
        )

    def vision_config(self, age_mean: float, age_std: float) -> VisionConfig:
        return VisionConfig(
            block_layers=tuple(self.vision_block_layers),
            growth=self.vision_growth,
            init_channels=self.vision_init_channels,
            input_shape=tuple(self.canonical_shape),
            embed_dim=self.embed_dim,
            age_mean=age_mean,
            age_std=age_std,
        )

    def vision_train_config(self) -> VisionTrainConfig:
        return VisionTrainConfig(
            lr0=self.vision_lr0,
            plateau_factor=self.vision_plateau_factor,
            plateau_patience=self.vision_plateau_patience,
            batch_size=self.vision_batch_size,
            max_epochs=self.vision_max_epochs,
            early_stop_cycles=self.vision_early_stop_cycles,
        )

    def sequence_types(self) -> tuple[SequenceType, ...]:
        return tuple(SequenceType(s) for s in self.sequences)


def desk_profile(seed: int = 0) -> RunConfig:
    """Laptop-scale sizes: the whole pipeline runs in minutes on one CPU."""
    return RunConfig(
        profile="desk",
        seed=seed,
        mlm=MlmTrainParams(epochs=14, batch_size=32, lr=1e-3, patience=10),
        rsm=RsmTrainParams(epochs=50, batch_size=16, lr=1e-4, warmup_steps=100,
                           n_pairs=600, true_fraction=0.5),
        vision_max_epochs=16,
    )


def paper_profile(seed: int = 0) -> RunConfig:
    """Full-scale sizes matching the published training protocol."""
    return RunConfig(
        profile="paper",
        seed=seed,
        vocab_size=10_000,
        min_frequency=10,
        block_length=128,
        encoder_layers=12,
        encoder_heads=12,
        encoder_hidden=768,
        embed_dim=768,
        canonical_shape=(180, 180, 180),
        sequences=tuple(s.value for s in SequenceType),
        vision_block_layers=(6, 12, 24, 16),
        vision_growth=32,
        vision_init_channels=64,
        mlm=MlmTrainParams(epochs=250, batch_size=64, lr=1e-4),
        rsm=RsmTrainParams(epochs=50, batch_size=16, lr=1e-6, warmup_steps=100),
        vision_lr0=1e-4,
        vision_batch_size=8,
        vision_max_epochs=100,
    )


def profile(name: str, seed: int = 0) -> RunConfig:
    if name == "desk":
        return desk_profile(seed)
    if name == "paper":
        return paper_profile(seed)
    raise ConfigError(f"unknown profile {name!r}")


def _jsonable(cfg: RunConfig) -> dict:
    payload = asdict(cfg)
    for key in ("canonical_shape", "sequences", "vision_block_layers", "train_valid_ratios"):
        payload[key] = list(payload[key])
    return payload


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(_jsonable(cfg), indent=2, sort_keys=True))


def load_config(path) -> RunConfig:
    obj = json.loads(Path(path).read_text())
    obj["mlm"] = MlmTrainParams(**obj["mlm"])
    obj["rsm"] = RsmTrainParams(**obj["rsm"])
    for key in ("canonical_shape", "sequences", "vision_block_layers", "train_valid_ratios"):
        obj[key] = tuple(obj[key])
    return RunConfig(**obj)


def config_hash(cfg: RunConfig) -> str:
    canon = json.dumps(_jsonable(cfg), sort_keys=True)
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def write_manifest(path, cfg: RunConfig, command: str, extra: dict | None = None) -> None:
    """Record enough to reproduce a run: config hash, seed, versions."""
    import numpy
    import torch

    manifest = {
        "command": command,
        "config": _jsonable(cfg),
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "versions": {
            "python": platform.python_version(),
            "numpy": numpy.__version__,
            "torch": torch.__version__,
        },
    }
    if extra:
        manifest.update(extra)
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_query_config(path=None) -> dict:
    """Task -> query sentence(s); defaults to the packaged configuration."""
    if path is not None:
        return json.loads(Path(path).read_text())
    with resources.as_file(resources.files("brainalign.data") / "queries.json") as p:
        return json.loads(p.read_text())
