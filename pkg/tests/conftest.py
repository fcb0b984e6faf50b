import numpy as np
import pytest

from tumorfab.phantom import PhantomSpec, TumorSpec, generate_phantom_brain, generate_phantom_tumor_case
from tumorfab.volume import BrainMask, MriVolume, SegMask, normalize_intensity


def small_spec(seed=0, dims=32, **kw) -> PhantomSpec:
    """32^3 phantom with every length halved relative to the 64^3 default."""
    s = dims / 64.0
    t = TumorSpec(
        center_offset_mm=(8.0 * s, 4.0 * s, 0.0),
        ed_radii_mm=(12 * s, 11 * s, 10 * s),
        ncr_radii_mm=(8 * s, 7.5 * s, 7 * s),
        et_radii_mm=(5 * s, 5 * s, 4.5 * s),
    )
    return PhantomSpec(dims=(dims,) * 3, brain_axes_mm=(28 * s, 25 * s, 23 * s),
                       ventricle_axes_mm=(6 * s, 4 * s, 4 * s), tumor_spec=t, seed=seed, **kw)


def ball_mask(shape, center, radius, label=1) -> SegMask:
    idx = np.indices(shape)
    r2 = sum((i - c) ** 2 for i, c in zip(idx, center))
    labels = np.where(r2 <= radius ** 2, label, 0).astype(np.uint8)
    return SegMask(labels)


@pytest.fixture(scope="session")
def small_tumor_case():
    vol, mask = generate_phantom_tumor_case(small_spec(seed=3))
    return normalize_intensity(vol), mask


@pytest.fixture(scope="session")
def small_healthy():
    return normalize_intensity(generate_phantom_brain(small_spec(seed=4)))


@pytest.fixture(scope="session")
def extractor():
    from tumorfab.features import FeatureExtractor
    return FeatureExtractor.random(0)
