"""Per-sequence 3D dense-convolutional encoders regressed onto report embeddings.

The trunk keeps the four dense blocks + transition layers of a DenseNet and
drops the classifier: global average pooling feeds a single linear layer after
the patient's normalized age is appended, yielding a D-dimensional embedding in
the report-embedding space. One independent model is trained per MRI sequence.

Rectifiers are custom modules so saliency code can flip them into guided mode
(backward signal zeroed where either the activation or the incoming gradient
is non-positive).
"""

from __future__ import annotations

import copy
import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .volumes import CanonicalVolume, SequenceType


class VisionError(ValueError):
    pass


class _GuidedReLU(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return x.clamp(min=0)

    @staticmethod
    def backward(ctx, grad_out):
        (x,) = ctx.saved_tensors
        return grad_out * (x > 0) * (grad_out > 0)


class Rectifier(nn.Module):
    """ReLU whose backward pass can be switched to the guided rule."""

    def __init__(self):
        super().__init__()
        self.guided = False

    def forward(self, x):
        return _GuidedReLU.apply(x) if self.guided else F.relu(x)


def set_guided(model: nn.Module, flag: bool) -> None:
    for module in model.modules():
        if isinstance(module, Rectifier):
            module.guided = flag


@contextmanager
def guided_mode(model: nn.Module):
    set_guided(model, True)
    try:
        yield model
    finally:
        set_guided(model, False)


@dataclass
class VisionConfig:
    block_layers: tuple[int, int, int, int] = (2, 2, 2, 2)
    growth: int = 8
    init_channels: int = 16
    bottleneck: int = 4
    input_shape: tuple[int, int, int] = (32, 32, 32)
    embed_dim: int = 128
    age_mean: float = 54.0
    age_std: float = 21.0

    def __post_init__(self):
        if len(self.block_layers) != 4:
            raise VisionError("exactly four dense blocks are required")
        if self.age_std <= 0:
            raise VisionError("age_std must be positive")


PAPER_BLOCK_LAYERS = (6, 12, 24, 16)  # DenseNet121 layout, growth 32


class _DenseLayer(nn.Module):
    def __init__(self, in_channels, growth, bottleneck):
        super().__init__()
        inner = bottleneck * growth
        self.norm1 = nn.BatchNorm3d(in_channels)
        self.relu1 = Rectifier()
        self.conv1 = nn.Conv3d(in_channels, inner, 1, bias=False)
        self.norm2 = nn.BatchNorm3d(inner)
        self.relu2 = Rectifier()
        self.conv2 = nn.Conv3d(inner, growth, 3, padding=1, bias=False)

    def forward(self, x):
        out = self.conv1(self.relu1(self.norm1(x)))
        out = self.conv2(self.relu2(self.norm2(out)))
        return torch.cat([x, out], dim=1)


class _Transition(nn.Module):
    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.norm = nn.BatchNorm3d(in_channels)
        self.relu = Rectifier()
        self.conv = nn.Conv3d(in_channels, out_channels, 1, bias=False)
        self.pool = nn.AvgPool3d(2, ceil_mode=True)

    def forward(self, x):
        out = self.conv(self.relu(self.norm(x)))
        if min(out.shape[2:]) > 1:  # nothing left to pool at 1^3
            out = self.pool(out)
        return out


class VolumeEncoder(nn.Module):
    """Canonical volume + age -> D-dimensional image embedding."""

    def __init__(self, cfg: VisionConfig):
        super().__init__()
        self.cfg = cfg
        self.stem = nn.Sequential(
            nn.Conv3d(1, cfg.init_channels, 7, stride=2, padding=3, bias=False),
            nn.BatchNorm3d(cfg.init_channels),
            Rectifier(),
            nn.MaxPool3d(3, stride=2, padding=1),
        )
        channels = cfg.init_channels
        stages = []
        for i, n_layers in enumerate(cfg.block_layers):
            block = []
            for _ in range(n_layers):
                block.append(_DenseLayer(channels, cfg.growth, cfg.bottleneck))
                channels += cfg.growth
            stages.append(nn.Sequential(*block))
            if i < len(cfg.block_layers) - 1:
                out_channels = channels // 2
                stages.append(_Transition(channels, out_channels))
                channels = out_channels
        self.features = nn.Sequential(*stages)
        self.final_norm = nn.BatchNorm3d(channels)
        self.final_relu = Rectifier()
        self.fc = nn.Linear(channels + 1, cfg.embed_dim)
        self.trunk_channels = channels

    def forward(self, volume, age):
        if volume.shape[2:] != tuple(self.cfg.input_shape):
            raise VisionError(
                f"volume shape {tuple(volume.shape[2:])} does not match configured "
                f"input shape {tuple(self.cfg.input_shape)}"
            )
        x = self.stem(volume)
        x = self.final_relu(self.final_norm(self.features(x)))
        pooled = x.mean(dim=(2, 3, 4))
        age_norm = (age.to(pooled.dtype) - self.cfg.age_mean) / self.cfg.age_std
        return self.fc(torch.cat([pooled, age_norm.unsqueeze(1)], dim=1))


def encode_volume(model: VolumeEncoder, v: CanonicalVolume, missing_age: str = "error") -> np.ndarray:
    """Embed one canonical volume (inference mode)."""
    age = v.patient_age_years
    if age is None or (isinstance(age, float) and math.isnan(age)):
        if missing_age == "mean":
            age = model.cfg.age_mean
        else:
            raise VisionError("patient age is required for encoding")
    model.eval()
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        vol = torch.as_tensor(np.asarray(v.data), dtype=dtype).unsqueeze(0).unsqueeze(0)
        out = model(vol, torch.tensor([float(age)], dtype=dtype))
    return out[0].cpu().numpy()


def vision_loss(img_emb, report_emb):
    """Element-wise MSE between image and report embeddings."""
    if isinstance(img_emb, torch.Tensor):
        if img_emb.shape[-1] != report_emb.shape[-1]:
            raise VisionError("embedding dimensionality mismatch")
        return ((img_emb - report_emb) ** 2).mean()
    a = np.asarray(img_emb, dtype=np.float64)
    b = np.asarray(report_emb, dtype=np.float64)
    if a.shape != b.shape:
        raise VisionError("embedding dimensionality mismatch")
    return float(((a - b) ** 2).mean())


@dataclass
class VisionTrainConfig:
    lr0: float = 1e-4
    plateau_factor: float = 10.0
    plateau_patience: int = 5
    batch_size: int = 8
    max_epochs: int = 100
    early_stop_cycles: int = 3

    def __post_init__(self):
        if self.lr0 <= 0:
            raise VisionError("lr0 must be positive")


class PlateauSchedule:
    """Divide the lr by plateau_factor after every `patience` epochs without
    validation improvement; signals a stop after `max_cycles` reductions."""

    def __init__(self, lr0, factor, patience, max_cycles):
        self.lr = lr0
        self.factor = factor
        self.patience = patience
        self.max_cycles = max_cycles
        self.best = math.inf
        self.stale = 0
        self.cycles = 0

    def step(self, val_loss) -> bool:
        """Record an epoch's validation loss; returns True when training should stop."""
        if val_loss < self.best:
            self.best = val_loss
            self.stale = 0
            return False
        self.stale += 1
        if self.stale >= self.patience:
            self.lr /= self.factor
            self.cycles += 1
            self.stale = 0
        return self.cycles >= self.max_cycles


@dataclass
class VisionTrainState:
    model: VolumeEncoder
    epoch: int
    best_val_loss: float
    best_epoch: int
    history: list[tuple[float, float]] = field(default_factory=list)


def train_vision(
    train_volumes: np.ndarray,
    train_ages: np.ndarray,
    train_targets: np.ndarray,
    val_volumes: np.ndarray,
    val_ages: np.ndarray,
    val_targets: np.ndarray,
    cfg: VisionConfig,
    train_cfg: VisionTrainConfig | None = None,
    seed: int = 0,
    model: VolumeEncoder | None = None,
    log=None,
) -> VisionTrainState:
    """Regress volumes onto frozen report embeddings; returns best-val checkpoint."""
    if len(train_volumes) == 0 or len(val_volumes) == 0:
        raise VisionError("no training pairs for this sequence")
    train_cfg = train_cfg or VisionTrainConfig()
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    if model is None:
        model = VolumeEncoder(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=train_cfg.lr0)
    schedule = PlateauSchedule(
        train_cfg.lr0, train_cfg.plateau_factor, train_cfg.plateau_patience,
        train_cfg.early_stop_cycles,
    )

    t_vol = torch.as_tensor(train_volumes, dtype=torch.float32).unsqueeze(1)
    t_age = torch.as_tensor(train_ages, dtype=torch.float32)
    t_tgt = torch.as_tensor(train_targets, dtype=torch.float32)
    v_vol = torch.as_tensor(val_volumes, dtype=torch.float32).unsqueeze(1)
    v_age = torch.as_tensor(val_ages, dtype=torch.float32)
    v_tgt = torch.as_tensor(val_targets, dtype=torch.float32)

    best = None
    state = VisionTrainState(model=model, epoch=0, best_val_loss=math.inf, best_epoch=-1)
    for epoch in range(train_cfg.max_epochs):
        model.train()
        order = rng.permutation(len(t_vol))
        total, batches = 0.0, 0
        for start in range(0, len(order), train_cfg.batch_size):
            sel = order[start : start + train_cfg.batch_size]
            if len(sel) == 1:  # batch-norm needs >1 value per channel in train mode
                sel = np.concatenate([sel, sel])
            opt.zero_grad()
            out = model(t_vol[sel], t_age[sel])
            loss = vision_loss(out, t_tgt[sel])
            loss.backward()
            opt.step()
            total += loss.item()
            batches += 1
        train_loss = total / max(batches, 1)

        model.eval()
        with torch.no_grad():
            val_losses = []
            for start in range(0, len(v_vol), train_cfg.batch_size):
                out = model(v_vol[start : start + train_cfg.batch_size],
                            v_age[start : start + train_cfg.batch_size])
                val_losses.append(
                    float(vision_loss(out, v_tgt[start : start + train_cfg.batch_size]))
                    * len(out)
                )
            val_loss = sum(val_losses) / len(v_vol)
        state.history.append((train_loss, val_loss))
        state.epoch = epoch + 1
        if log:
            log(f"vision epoch {epoch + 1}/{train_cfg.max_epochs} "
                f"train {train_loss:.5f} val {val_loss:.5f} lr {schedule.lr:.2e}")
        if val_loss < state.best_val_loss:
            state.best_val_loss = val_loss
            state.best_epoch = epoch + 1
            best = copy.deepcopy(model.state_dict())
        stop = schedule.step(val_loss)
        for group in opt.param_groups:
            group["lr"] = schedule.lr
        if stop:
            break

    if best is not None:
        model.load_state_dict(best)
    return state


def save_vision_checkpoint(path, model: VolumeEncoder, sequence: SequenceType, extras: dict | None = None):
    torch.save(
        {
            "config": vars(model.cfg),
            "state_dict": model.state_dict(),
            "sequence": sequence.value,
            "extras": extras or {},
        },
        path,
    )


def load_vision_checkpoint(path) -> tuple[VolumeEncoder, SequenceType, dict]:
    payload = torch.load(path, weights_only=False)
    cfg_kwargs = dict(payload["config"])
    cfg_kwargs["block_layers"] = tuple(cfg_kwargs["block_layers"])
    cfg_kwargs["input_shape"] = tuple(cfg_kwargs["input_shape"])
    cfg = VisionConfig(**cfg_kwargs)
    model = VolumeEncoder(cfg)
    model.load_state_dict(payload["state_dict"])
    return model, SequenceType(payload["sequence"]), payload.get("extras", {})
