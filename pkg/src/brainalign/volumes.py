"""Canonical volume preparation: resample to 1 mm, crop/pad, z-normalize.

The pipeline is deliberately minimal; there is no skull-stripping,
registration, or bias-field stage (PIPELINE_STAGES is the complete list).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.ndimage import map_coordinates


class VolumeError(ValueError):
    pass


class SequenceType(str, Enum):
    """The eight routinely acquired MRI sequences; declaration order is canonical."""

    AX_T2 = "ax_t2"
    AX_DWI = "ax_dwi"
    COR_T2_FLAIR = "cor_t2_flair"
    AX_GRE = "ax_gre"
    COR_T1 = "cor_t1"
    AX_T1_POST = "ax_t1_post"
    AX_T2_FLAIR = "ax_t2_flair"
    COR_T1_POST = "cor_t1_post"


SEQUENCE_ORDER = tuple(SequenceType)


@dataclass
class RawVolume:
    data: np.ndarray
    spacing: tuple[float, float, float]
    sequence: SequenceType
    patient_age_years: float

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise VolumeError("volume must be 3D with at least one voxel per axis")
        if any(s <= 0 for s in self.spacing):
            raise VolumeError("voxel spacings must be positive")


@dataclass
class CanonicalVolume:
    data: np.ndarray
    sequence: SequenceType
    patient_age_years: float


def resample(v: RawVolume, target_spacing=(1.0, 1.0, 1.0)) -> RawVolume:
    """Trilinear resample onto the target grid, preserving physical extent."""
    if any(t <= 0 for t in target_spacing):
        raise VolumeError("target spacings must be positive")
    new_shape = tuple(
        max(1, int(round(n * s / t)))
        for n, s, t in zip(v.data.shape, v.spacing, target_spacing)
    )
    if new_shape == v.data.shape and tuple(v.spacing) == tuple(target_spacing):
        return RawVolume(v.data.copy(), tuple(target_spacing), v.sequence, v.patient_age_years)
    axes = [
        np.arange(n_out, dtype=np.float64) * (t / s)
        for n_out, s, t in zip(new_shape, v.spacing, target_spacing)
    ]
    grid = np.meshgrid(*axes, indexing="ij")
    out = map_coordinates(v.data.astype(np.float64), grid, order=1, mode="nearest")
    return RawVolume(
        out.astype(v.data.dtype, copy=False),
        tuple(target_spacing),
        v.sequence,
        v.patient_age_years,
    )


def crop_or_pad(arr: np.ndarray, canonical_shape=(180, 180, 180)) -> np.ndarray:
    """Center-crop oversize axes, symmetrically zero-pad undersize axes."""
    out = arr
    for axis, target in enumerate(canonical_shape):
        n = out.shape[axis]
        if n > target:
            start = (n - target) // 2
            out = np.take(out, range(start, start + target), axis=axis)
        elif n < target:
            before = (target - n) // 2
            after = target - n - before
            pads = [(0, 0)] * out.ndim
            pads[axis] = (before, after)
            out = np.pad(out, pads, mode="constant", constant_values=0)
    return out


def znorm(arr: np.ndarray) -> np.ndarray:
    """Subtract the mean and divide by the standard deviation (population)."""
    x = np.asarray(arr, dtype=np.float64)
    std = x.std()
    if std == 0:
        raise VolumeError("degenerate intensity: constant volume")
    out = (x - x.mean()) / std
    return out.astype(arr.dtype, copy=False) if arr.dtype == np.float64 else out.astype(np.float32)


PIPELINE_STAGES = (resample, crop_or_pad, znorm)


def preprocess(v: RawVolume, canonical_shape=(180, 180, 180), target_spacing=(1.0, 1.0, 1.0)) -> CanonicalVolume:
    """resample -> crop_or_pad -> znorm, in that order."""
    resampled = resample(v, target_spacing)
    sized = crop_or_pad(resampled.data, canonical_shape)
    return CanonicalVolume(
        data=znorm(sized), sequence=v.sequence, patient_age_years=v.patient_age_years
    )
