"""Smooth guided backpropagation for text-image similarity scores.

The derivative of the clipped cosine similarity w.r.t. input voxels is
backpropagated with the guided rule at every rectifier (backward signal zeroed
where the forward activation or the incoming gradient is non-positive). The
displayed saliency is the absolute input gradient. Per-slice maxima form a
lineout whose argmax picks the key slice.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .inference import Query
from .vision import VisionError, VolumeEncoder, guided_mode
from .volumes import CanonicalVolume, SequenceType


class SaliencyError(ValueError):
    pass


# through-plane axis per acquisition: axial stacks slice along the third array
# axis, coronal along the second
DEFAULT_SLICE_AXIS = {
    seq: (1 if seq.value.startswith("cor_") else 2) for seq in SequenceType
}


@dataclass
class SmoothGradConfig:
    n_samples: int = 50
    noise_mean: float = 0.0
    noise_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 1:
            raise SaliencyError("n_samples must be >= 1")
        if self.noise_std < 0:
            raise SaliencyError("noise_std must be >= 0")


@dataclass
class SaliencyResult:
    volume: np.ndarray
    lineout: np.ndarray
    key_slice: int
    heatmap: np.ndarray
    axis: int
    metadata: dict = field(default_factory=dict)


def _input_gradient(model: VolumeEncoder, data: np.ndarray, age: float, q: Query) -> np.ndarray:
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(np.ascontiguousarray(data), dtype=dtype)
    x = x.unsqueeze(0).unsqueeze(0).requires_grad_(True)
    age_t = torch.tensor([float(age)], dtype=dtype)
    qv = torch.as_tensor(np.array(q.embedding), dtype=dtype)
    emb = model(x, age_t)[0]
    norm_e = torch.linalg.vector_norm(emb)
    norm_q = torch.linalg.vector_norm(qv)
    if norm_e == 0 or norm_q == 0:
        raise SaliencyError("zero embedding: similarity undefined")
    sim = torch.relu((emb @ qv) / (norm_e * norm_q))
    (grad,) = torch.autograd.grad(sim, x)
    return grad[0, 0].detach().cpu().numpy()


def guided_backprop(model: VolumeEncoder, v: CanonicalVolume, q: Query) -> np.ndarray:
    """Absolute input gradient of the clipped similarity, guided rule active."""
    data = np.asarray(v.data)
    if data.shape != tuple(model.cfg.input_shape):
        raise SaliencyError(
            f"non-canonical volume {data.shape}; model expects {tuple(model.cfg.input_shape)}"
        )
    age = v.patient_age_years
    if age is None or (isinstance(age, float) and math.isnan(age)):
        raise VisionError("patient age is required for saliency")
    model.eval()
    with guided_mode(model):
        grad = _input_gradient(model, data, age, q)
    return np.abs(grad)


def smooth_guided_backprop(
    model: VolumeEncoder, v: CanonicalVolume, q: Query, cfg: SmoothGradConfig
) -> np.ndarray:
    """Mean of guided_backprop over noise-perturbed copies of the input."""
    rng = np.random.default_rng(cfg.seed)
    data = np.asarray(v.data, dtype=np.float64)
    total = np.zeros_like(data)
    for _ in range(cfg.n_samples):
        noise = rng.normal(cfg.noise_mean, cfg.noise_std, data.shape)
        noisy = CanonicalVolume(
            data=(data + noise).astype(np.asarray(v.data).dtype, copy=False),
            sequence=v.sequence,
            patient_age_years=v.patient_age_years,
        )
        total += guided_backprop(model, noisy, q)
    return total / cfg.n_samples


def lineout(grad_volume: np.ndarray, axis: int = 2) -> tuple[np.ndarray, int, np.ndarray]:
    """Per-slice maximum profile, its argmax slice, and that slice's heatmap."""
    grad_volume = np.asarray(grad_volume)
    if grad_volume.ndim != 3:
        raise SaliencyError("lineout expects a 3D volume")
    if axis not in (0, 1, 2):
        raise SaliencyError(f"invalid axis {axis}")
    other = tuple(a for a in range(3) if a != axis)
    profile = grad_volume.max(axis=other)
    key_slice = int(np.argmax(profile))  # first index on ties
    heatmap = np.take(grad_volume, key_slice, axis=axis)
    return profile, key_slice, heatmap


def compute_saliency(
    model: VolumeEncoder,
    v: CanonicalVolume,
    q: Query,
    smooth: SmoothGradConfig | None = None,
    axis: int = 2,
) -> SaliencyResult:
    """Full saliency product: gradient volume + lineout + key slice."""
    if smooth is None:
        volume = guided_backprop(model, v, q)
        meta = {"smoothgrad": False}
    else:
        volume = smooth_guided_backprop(model, v, q, smooth)
        meta = {
            "smoothgrad": True,
            "n_samples": smooth.n_samples,
            "noise_mean": smooth.noise_mean,
            "noise_std": smooth.noise_std,
            "seed": smooth.seed,
        }
    profile, key_slice, heatmap = lineout(volume, axis)
    meta.update({"query": q.text, "axis": axis, "sequence": v.sequence.value})
    return SaliencyResult(
        volume=volume,
        lineout=profile,
        key_slice=key_slice,
        heatmap=heatmap,
        axis=axis,
        metadata=meta,
    )


def _normalize01(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi - lo < 1e-12:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def render_heatmap_png(scan_slice: np.ndarray, saliency_slice: np.ndarray, alpha: float = 0.6) -> bytes:
    """Alpha-blend a hot-colormapped saliency slice over the grayscale scan slice."""
    from PIL import Image

    gray = _normalize01(scan_slice)
    heat = _normalize01(saliency_slice)
    r = np.clip(3 * heat, 0, 1)
    g = np.clip(3 * heat - 1, 0, 1)
    b = np.clip(3 * heat - 2, 0, 1)
    weight = alpha * heat
    rgb = np.stack(
        [
            gray * (1 - weight) + r * weight,
            gray * (1 - weight) + g * weight,
            gray * (1 - weight) + b * weight,
        ],
        axis=-1,
    )
    image = Image.fromarray((rgb * 255).astype(np.uint8))
    buf = io.BytesIO()
    image.save(buf, format="PNG")
    return buf.getvalue()
