"""Procedural skull-stripped brain phantoms and nested-ellipsoid tumor cases.

Randomness comes from numpy's PCG64 bit generator seeded with the integer
``seed``; draws are made in a fixed order (texture field, then noise) so a
given spec reproduces bit-for-bit on any platform with the same numpy.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from .volume import ED, ET, NCR, MriVolume, SegMask


@dataclass
class TumorSpec:
    center_offset_mm: tuple = (8.0, 4.0, 0.0)
    ed_radii_mm: tuple = (12.0, 11.0, 10.0)
    ncr_radii_mm: tuple = (8.0, 7.5, 7.0)
    et_radii_mm: tuple = (5.0, 5.0, 4.5)
    # additive intensity offsets per class, in raw phantom units
    ed_offset: float = -90.0
    ncr_offset: float = -230.0
    et_offset: float = 80.0


@dataclass
class PhantomSpec:
    dims: tuple = (64, 64, 64)
    spacing: tuple = (1.0, 1.0, 1.0)
    brain_axes_mm: tuple = (28.0, 25.0, 23.0)
    base_intensity: float = 600.0
    texture_scale: float = 4.0
    texture_amplitude: float = 80.0
    noise_sigma: float = 10.0
    # dark CSF-like core; set axes to None to disable
    ventricle_axes_mm: Optional[tuple] = (6.0, 4.0, 4.0)
    ventricle_offset: float = -250.0
    tumor_spec: TumorSpec = field(default_factory=TumorSpec)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.tumor_spec, dict):
            self.tumor_spec = TumorSpec(**self.tumor_spec)
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) != 3 or min(self.dims) < 32:
            raise ValueError(f"phantom dims must be three values >= 32, got {self.dims}")
        if len(self.brain_axes_mm) != 3 or min(self.brain_axes_mm) <= 0:
            raise ValueError(f"degenerate brain axes {self.brain_axes_mm}")
        t = self.tumor_spec
        for outer, inner in ((t.ed_radii_mm, t.ncr_radii_mm), (t.ncr_radii_mm, t.et_radii_mm)):
            if not all(o > i > 0 for o, i in zip(outer, inner)):
                raise ValueError("tumor radii must be strictly nested: ED > NCR > ET > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _grid_mm(spec: PhantomSpec):
    """Voxel-centre coordinates in mm relative to the volume centre."""
    axes = [
        (np.arange(n) - (n - 1) / 2.0) * s for n, s in zip(spec.dims, spec.spacing)
    ]
    return np.meshgrid(*axes, indexing="ij")


def ellipsoid(spec: PhantomSpec, radii, center=(0.0, 0.0, 0.0)) -> np.ndarray:
    x, y, z = _grid_mm(spec)
    r = ((x - center[0]) / radii[0]) ** 2 + ((y - center[1]) / radii[1]) ** 2 \
        + ((z - center[2]) / radii[2]) ** 2
    return r <= 1.0


def ellipsoid_voxels(radii, spacing=(1.0, 1.0, 1.0)) -> float:
    """Analytic ellipsoid volume in voxel units."""
    return 4.0 / 3.0 * math.pi * float(np.prod(radii)) / float(np.prod(spacing))


def generate_phantom_brain(spec: PhantomSpec) -> MriVolume:
    """Ellipsoidal brain with smooth texture and noise over an exact-zero background."""
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    brain = ellipsoid(spec, spec.brain_axes_mm)
    image = np.full(spec.dims, spec.base_intensity, dtype=np.float64)

    # draw both fields unconditionally so the stream layout never changes
    white = rng.standard_normal(spec.dims)
    noise = rng.standard_normal(spec.dims)
    if math.isfinite(spec.texture_scale) and spec.texture_amplitude != 0:
        field_ = ndimage.gaussian_filter(white, spec.texture_scale, mode="wrap")
        std = field_.std()
        if std > 0:
            image += spec.texture_amplitude * field_ / std
    if spec.ventricle_axes_mm is not None:
        image[ellipsoid(spec, spec.ventricle_axes_mm)] += spec.ventricle_offset
    image += spec.noise_sigma * noise

    image = np.maximum(image, 1.0)
    image[~brain] = 0.0
    return MriVolume(image.astype(np.float32)[None], spec.spacing)


def generate_phantom_tumor_case(spec: PhantomSpec) -> tuple:
    """Brain phantom carrying nested ED ⊃ NCR ⊃ ET ellipsoids and the matching mask."""
    t = spec.tumor_spec
    brain = ellipsoid(spec, spec.brain_axes_mm)
    regions = [
        (ED, ellipsoid(spec, t.ed_radii_mm, t.center_offset_mm), t.ed_offset),
        (NCR, ellipsoid(spec, t.ncr_radii_mm, t.center_offset_mm), t.ncr_offset),
        (ET, ellipsoid(spec, t.et_radii_mm, t.center_offset_mm), t.et_offset),
    ]
    if np.any(regions[0][1] & ~brain):
        raise ValueError("tumor is not contained in the brain ellipsoid")

    vol = generate_phantom_brain(spec)
    data = vol.data[0].astype(np.float64)
    labels = np.zeros(spec.dims, dtype=np.uint8)
    for label, region, _ in regions:
        labels[region] = label
    for label, _, shift in regions:
        data[labels == label] += shift
    data[brain] = np.maximum(data[brain], 1.0)
    return MriVolume(data.astype(np.float32)[None], spec.spacing), SegMask(labels, spec.spacing)
