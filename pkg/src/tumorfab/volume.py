"""Volumetric data model, NIfTI I/O and the in-scope preprocessing steps.

Inputs are expected to be skull-stripped and to share a common isotropic grid.
Arrays are indexed ``(channel, height, width, depth)`` for images and
``(height, width, depth)`` for label fields, matching NIfTI voxel order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import nibabel as nib
import numpy as np
from scipy import ndimage

PathLike = Union[str, Path]

BACKGROUND = 0
NCR = 1
ED = 2
ET = 3
LABELS = {BACKGROUND: "background", NCR: "NCR", ED: "ED", ET: "ET"}
TUMOR_CLASSES = (NCR, ED, ET)


class VolumeError(ValueError):
    """Raised for malformed volumes and files; carries the offending path when known."""

    def __init__(self, message: str, path: Optional[PathLike] = None):
        self.path = None if path is None else str(path)
        super().__init__(f"{message}: {path}" if path is not None else message)


# NIfTI-1 stores pixdim and the sform in float32; geometry is kept at that
# precision so it survives a save/load round trip unchanged
def _check_spacing(spacing) -> tuple:
    spacing = tuple(float(np.float32(s)) for s in spacing)
    if len(spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in spacing):
        raise VolumeError(f"spacing must be three positive finite values, got {spacing}")
    return spacing


def _check_affine(affine) -> np.ndarray:
    affine = np.asarray(affine, dtype=np.float32).astype(np.float64)
    if affine.shape != (4, 4) or not np.all(np.isfinite(affine)):
        raise VolumeError(f"affine must be a finite 4x4 matrix, got shape {affine.shape}")
    return affine


def _default_affine(spacing) -> np.ndarray:
    return np.diag([*spacing, 1.0])


@dataclass
class MriVolume:
    """Multi-channel 3D scalar field (C, H, W, D) with voxel spacing in mm."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    affine: Optional[np.ndarray] = None

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 3:
            data = data[None]
        if data.ndim != 4 or data.shape[0] < 1:
            raise VolumeError(f"image data must be (C, H, W, D), got shape {data.shape}")
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float32)
        if not np.all(np.isfinite(data)):
            raise VolumeError("image data contains non-finite values")
        self.data = data
        self.spacing = _check_spacing(self.spacing)
        if self.affine is None:
            self.affine = _default_affine(self.spacing)
        self.affine = _check_affine(self.affine)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple:
        """Spatial shape (H, W, D)."""
        return tuple(self.data.shape[1:])

    def with_data(self, data: np.ndarray) -> "MriVolume":
        return MriVolume(data, self.spacing, self.affine.copy())


@dataclass
class SegMask:
    """Integer label field over {0: background, 1: NCR, 2: ED, 3: ET}."""

    labels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    affine: Optional[np.ndarray] = None

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3:
            raise VolumeError(f"mask must be 3D, got shape {labels.shape}")
        if np.issubdtype(labels.dtype, np.floating):
            if not np.all(labels == np.round(labels)):
                raise VolumeError("mask contains non-integer labels")
        if labels.size and (labels.min() < 0 or labels.max() > ET):
            found = sorted(int(v) for v in np.unique(labels))
            raise VolumeError(f"mask labels must lie in {{0,1,2,3}}, found {found}")
        self.labels = labels.astype(np.uint8)
        self.spacing = _check_spacing(self.spacing)
        if self.affine is None:
            self.affine = _default_affine(self.spacing)
        self.affine = _check_affine(self.affine)

    @property
    def shape(self) -> tuple:
        return tuple(self.labels.shape)

    @property
    def roi(self) -> np.ndarray:
        """Binary tumor mask (labels > 0)."""
        return self.labels > 0

    def tumor_voxels(self) -> int:
        return int(np.count_nonzero(self.labels))

    def label_set(self) -> set:
        return {int(v) for v in np.unique(self.labels)}

    def with_labels(self, labels: np.ndarray) -> "SegMask":
        return SegMask(labels, self.spacing, self.affine.copy())


@dataclass
class BrainMask:
    mask: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.ndim != 3:
            raise VolumeError(f"brain mask must be 3D, got shape {self.mask.shape}")

    @property
    def shape(self) -> tuple:
        return tuple(self.mask.shape)

    def voxels(self) -> int:
        return int(np.count_nonzero(self.mask))


def check_same_shape(*shapes: Sequence[int]) -> None:
    first = tuple(shapes[0])
    for other in shapes[1:]:
        if tuple(other) != first:
            raise VolumeError(f"spatial dimensions differ: {first} vs {tuple(other)}")


# ---------------------------------------------------------------- file I/O


def _read_nifti(path: PathLike):
    path = Path(path)
    if not path.exists():
        raise VolumeError("file not found", path)
    try:
        img = nib.load(str(path))
        header = img.header
        dataobj = np.asanyarray(img.dataobj)
    except Exception as exc:  # nibabel raises a variety of types for bad headers
        raise VolumeError(f"cannot read NIfTI ({exc})", path) from exc
    if not isinstance(img, (nib.Nifti1Image, nib.Nifti2Image)):
        raise VolumeError("not a NIfTI file", path)
    if dataobj.ndim not in (3, 4):
        raise VolumeError(f"expected a 3D or 4D payload, got {dataobj.ndim}D", path)
    spacing = tuple(float(z) for z in header.get_zooms()[:3])
    return dataobj, spacing, np.array(img.affine, dtype=np.float64)


def load_volume(path: PathLike) -> MriVolume:
    """Read a NIfTI-1 image; 4D files are read with the last axis as channels."""
    data, spacing, affine = _read_nifti(path)
    if not np.issubdtype(data.dtype, np.floating):
        data = data.astype(np.float32)
    if data.ndim == 4:
        data = np.moveaxis(data, -1, 0)
    try:
        return MriVolume(np.ascontiguousarray(data), spacing, affine)
    except VolumeError as exc:
        raise VolumeError(str(exc), path) from exc


def load_mask(path: PathLike) -> SegMask:
    data, spacing, affine = _read_nifti(path)
    if data.ndim != 3:
        raise VolumeError("mask file must be 3D", path)
    try:
        return SegMask(data, spacing, affine)
    except VolumeError as exc:
        raise VolumeError(str(exc), path) from exc


def _nifti(array: np.ndarray, spacing, affine, dtype) -> nib.Nifti1Image:
    img = nib.Nifti1Image(array.astype(dtype, copy=False), affine)
    img.header.set_data_dtype(dtype)
    img.header.set_zooms(tuple(spacing) + tuple(img.header.get_zooms()[3:]))
    # keep scl slope/inter unset so float data round-trips bit-exactly
    img.header["scl_slope"] = np.nan
    img.header["scl_inter"] = np.nan
    return img


def _write(img: nib.Nifti1Image, path: PathLike) -> None:
    path = Path(path)
    if not path.parent.is_dir():
        raise OSError(f"parent directory does not exist: {path.parent}")
    try:
        nib.save(img, str(path))
    except OSError:
        raise
    except Exception as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def save_volume(vol: MriVolume, path: PathLike) -> None:
    """Write a float32 NIfTI-1 file; single-channel volumes are stored as 3D."""
    data = vol.data[0] if vol.channels == 1 else np.moveaxis(vol.data, 0, -1)
    _write(_nifti(data, vol.spacing, vol.affine, np.float32), path)


def save_mask(mask: SegMask, path: PathLike) -> None:
    _write(_nifti(mask.labels, mask.spacing, mask.affine, np.uint8), path)


def save_brain_mask(brain: BrainMask, path: PathLike, spacing=(1.0, 1.0, 1.0), affine=None) -> None:
    affine = _default_affine(spacing) if affine is None else affine
    _write(_nifti(brain.mask.astype(np.uint8), spacing, affine, np.uint8), path)


def load_brain_mask(path: PathLike) -> BrainMask:
    data, _, _ = _read_nifti(path)
    if data.ndim != 3:
        raise VolumeError("brain mask file must be 3D", path)
    return BrainMask(data > 0)


# ---------------------------------------------------------------- preprocessing


def normalize_intensity(vol: MriVolume, brain: Optional[BrainMask] = None) -> MriVolume:
    """Map each channel's brain range linearly onto [-1, 1]; background becomes -1.

    The brain region defaults to the nonzero voxels of each channel. A constant
    brain maps to 0.
    """
    out = np.full(vol.data.shape, -1.0, dtype=np.float32)
    for c in range(vol.channels):
        channel = vol.data[c]
        region = (channel != 0) if brain is None else brain.mask
        if not region.any():
            raise VolumeError(f"channel {c} has no brain voxels; cannot normalize")
        values = channel[region].astype(np.float64)
        lo, hi = values.min(), values.max()
        if hi == lo:
            out[c][region] = 0.0
        else:
            scaled = 2.0 * (values - lo) / (hi - lo) - 1.0
            out[c][region] = np.clip(scaled, -1.0, 1.0)
    return vol.with_data(out)


def _resample_geometry(shape, spacing, target):
    spacing = np.asarray(spacing, dtype=np.float64)
    ratio = target / spacing  # input voxels per output voxel
    new_shape = tuple(max(1, int(round(n * s / target))) for n, s in zip(shape, spacing))
    # output voxel i centre maps to input coordinate (i + 0.5) * ratio - 0.5
    offset = 0.5 * ratio - 0.5
    return new_shape, ratio, offset


def _resampled_affine(affine, ratio, offset):
    step = np.eye(4)
    step[:3, :3] = np.diag(ratio)
    step[:3, 3] = offset
    return affine @ step


def resample_isotropic(vol: MriVolume, target: float = 1.0) -> MriVolume:
    """Trilinear resampling of every channel onto a ``target`` mm isotropic grid."""
    if not target > 0:
        raise VolumeError(f"target spacing must be positive, got {target}")
    if vol.spacing == (target,) * 3:
        return MriVolume(vol.data.copy(), vol.spacing, vol.affine.copy())
    shape, ratio, offset = _resample_geometry(vol.shape, vol.spacing, target)
    out = np.stack([
        ndimage.affine_transform(
            vol.data[c].astype(np.float64), np.diag(ratio), offset=offset,
            output_shape=shape, order=1, mode="nearest",
        )
        for c in range(vol.channels)
    ]).astype(vol.data.dtype)
    return MriVolume(out, (target,) * 3, _resampled_affine(vol.affine, ratio, offset))


def resample_mask(mask: SegMask, target: float = 1.0) -> SegMask:
    """Nearest-neighbour resampling so no new labels can appear."""
    if not target > 0:
        raise VolumeError(f"target spacing must be positive, got {target}")
    if mask.spacing == (target,) * 3:
        return SegMask(mask.labels.copy(), mask.spacing, mask.affine.copy())
    shape, ratio, offset = _resample_geometry(mask.shape, mask.spacing, target)
    out = ndimage.affine_transform(
        mask.labels, np.diag(ratio), offset=offset, output_shape=shape, order=0, mode="nearest",
    )
    return SegMask(out, (target,) * 3, _resampled_affine(mask.affine, ratio, offset))


def infer_background(vol: MriVolume) -> float:
    """-1 for normalized volumes (minimum exactly -1), else 0."""
    return -1.0 if float(vol.data[0].min()) == -1.0 else 0.0


def compute_brain_mask(vol: MriVolume, background: Optional[float] = None) -> BrainMask:
    """Brain = everything except background-valued voxels connected to the volume border.

    Using border connectivity rather than a plain value test keeps the mask
    identical before and after normalization, where the darkest brain voxel
    also becomes -1.
    """
    if background is None:
        background = infer_background(vol)
    candidate = vol.data[0] == background
    if not candidate.any():
        return BrainMask(np.ones(vol.shape, dtype=bool))
    components, _ = ndimage.label(candidate)
    border = np.zeros_like(candidate)
    border[[0, -1], :, :] = True
    border[:, [0, -1], :] = True
    border[:, :, [0, -1]] = True
    outside_ids = np.unique(components[border & candidate])
    outside = np.isin(components, outside_ids[outside_ids > 0])
    return BrainMask(~outside)


def corners_nonzero(vol: MriVolume, size: int = 2, background: float = 0.0) -> bool:
    """Skull-strip heuristic: any corner block differing from background."""
    data = vol.data[0]
    s = size
    for i in (slice(0, s), slice(-s, None)):
        for j in (slice(0, s), slice(-s, None)):
            for k in (slice(0, s), slice(-s, None)):
                if np.any(data[i, j, k] != background):
                    return True
    return False
