"""Tumor-mask augmentation: scale, shift, combine, and clip to the brain."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .volume import BrainMask, SegMask, VolumeError, check_same_shape


class MaskSamplingError(RuntimeError):
    def __init__(self, attempts: int):
        self.attempts = attempts
        super().__init__(f"every synthetic mask was rejected after {attempts} attempts")


@dataclass
class MaskAugmentConfig:
    scale_range: tuple = (0.8, 1.2)
    shift_range_mm: float = 20.0
    combine_probability: float = 0.3
    min_tumor_voxels: int = 64
    max_attempts: int = 10
    seed: int = 0

    def __post_init__(self):
        lo, hi = (float(v) for v in self.scale_range)
        self.scale_range = (lo, hi)
        if not (0 < lo <= hi):
            raise ValueError(f"scale_range must be positive and ordered, got {self.scale_range}")
        if self.shift_range_mm < 0:
            raise ValueError("shift_range_mm must be non-negative")
        if not 0.0 <= self.combine_probability <= 1.0:
            raise ValueError("combine_probability must lie in [0, 1]")
        if int(self.min_tumor_voxels) < 1:
            raise ValueError("min_tumor_voxels must be >= 1")
        if int(self.max_attempts) < 1:
            raise ValueError("max_attempts must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scale_range"] = list(self.scale_range)
        return d


def scale_mask(mask: SegMask, factor: float) -> SegMask:
    """Isotropic nearest-neighbour rescale of the tumor about its centroid.

    Output dims are unchanged; anything scaled past the volume edge is lost.
    """
    if not factor > 0:
        raise ValueError(f"scale factor must be positive, got {factor}")
    if mask.tumor_voxels() == 0:
        raise VolumeError("cannot scale an empty mask")
    if factor == 1.0:
        return mask.with_labels(mask.labels.copy())
    centroid = np.array(ndimage.center_of_mass(mask.roi))
    inv = 1.0 / factor
    # output voxel p samples input at centroid + (p - centroid) / factor
    out = ndimage.affine_transform(
        mask.labels, np.diag(np.full(3, inv)), offset=centroid * (1.0 - inv),
        order=0, mode="constant", cval=0,
    )
    return mask.with_labels(out)


def shift_mask(mask: SegMask, offset: Sequence[int]) -> SegMask:
    """Integer translation by ``offset`` voxels; voxels leaving the grid are dropped."""
    offset = [int(o) for o in offset]
    if len(offset) != 3:
        raise ValueError("offset must have three components")
    src, dst = [], []
    for o, n in zip(offset, mask.shape):
        if abs(o) >= n:
            return mask.with_labels(np.zeros_like(mask.labels))
        src.append(slice(max(0, -o), n - max(0, o)))
        dst.append(slice(max(0, o), n - max(0, -o)))
    out = np.zeros_like(mask.labels)
    out[tuple(dst)] = mask.labels[tuple(src)]
    return mask.with_labels(out)


def combine_masks(primary: SegMask, secondary: SegMask) -> SegMask:
    """Voxelwise union; the primary label wins where both are tumor."""
    check_same_shape(primary.shape, secondary.shape)
    out = np.where(primary.labels > 0, primary.labels, secondary.labels)
    return primary.with_labels(out)


def clip_to_brain(mask: SegMask, brain: BrainMask, min_tumor_voxels: int = 1) -> Optional[SegMask]:
    """Drop tumor voxels outside the brain. Returns None when too little tumor survives."""
    check_same_shape(mask.shape, brain.shape)
    out = np.where(brain.mask, mask.labels, 0).astype(np.uint8)
    if np.count_nonzero(out) < min_tumor_voxels:
        return None
    return mask.with_labels(out)


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for sample ``index`` so parallel draws stay reproducible."""
    return np.random.default_rng([int(seed), int(index)])


def _augment(mask: SegMask, config: MaskAugmentConfig, rng: np.random.Generator, spacing) -> tuple:
    lo, hi = config.scale_range
    factor = float(rng.uniform(lo, hi)) if hi > lo else lo
    reach = [int(np.floor(config.shift_range_mm / s)) for s in spacing]
    offset = [int(rng.integers(-r, r + 1)) if r > 0 else 0 for r in reach]
    out = scale_mask(mask, factor) if factor != 1.0 else mask
    out = shift_mask(out, offset)
    return out, {"scale": factor, "shift": offset}


def sample_synthetic_mask(
    real_masks: Sequence[SegMask],
    brain: BrainMask,
    config: MaskAugmentConfig,
    rng: np.random.Generator,
    return_info: bool = False,
):
    """Draw an augmented tumor mask that fits inside ``brain``.

    One pool mask (two with ``combine_probability``) is scaled, shifted,
    combined and clipped. Rejected draws are retried up to
    ``config.max_attempts`` times.
    """
    if len(real_masks) == 0:
        raise ValueError("mask pool is empty")
    spacing = real_masks[0].spacing
    for attempt in range(1, config.max_attempts + 1):
        first = int(rng.integers(len(real_masks)))
        out, info = _augment(real_masks[first], config, rng, spacing)
        record = {"attempt": attempt, "sources": [first], "augment": [info]}
        if config.combine_probability > 0 and rng.random() < config.combine_probability:
            second = int(rng.integers(len(real_masks)))
            extra, extra_info = _augment(real_masks[second], config, rng, spacing)
            out = combine_masks(out, extra)
            record["sources"].append(second)
            record["augment"].append(extra_info)
        clipped = clip_to_brain(out, brain, config.min_tumor_voxels)
        if clipped is not None:
            return (clipped, record) if return_info else clipped
    raise MaskSamplingError(config.max_attempts)
