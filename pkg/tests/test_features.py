import warnings

import numpy as np
import pytest
import torch

from tumorfab.features import (ClassFeature, EmptyClassWarning, ExtractorWeightsError, FeatureExtractor,
                               class_perceptual_loss, downsample_labels, extract_features,
                               masked_class_pool)


def test_pyramid_dims_128():
    ext = FeatureExtractor.random(0)
    with torch.no_grad():
        pyr = extract_features(ext, torch.zeros(1, 1, 128, 128, 128))
    assert [tuple(f.shape[2:]) for f in pyr.levels] == [(n,) * 3 for n in (128, 64, 32, 16, 8, 4)]


def test_pyramid_dims_follow_ceil_rule():
    ext = FeatureExtractor.random(0)
    with torch.no_grad():
        pyr = extract_features(ext, torch.zeros(1, 1, 20, 17, 9))
    for i, f in enumerate(pyr.levels):
        assert tuple(f.shape[2:]) == tuple(-(-n // 2 ** i) for n in (20, 17, 9))


def test_identical_inputs_identical_pyramids(extractor):
    x = torch.randn(1, 1, 16, 16, 16, generator=torch.Generator().manual_seed(0))
    a = extract_features(extractor, x.clone())
    b = extract_features(extractor, x.clone())
    for fa, fb in zip(a.levels, b.levels):
        assert torch.equal(fa, fb)


def test_level0_receptive_field(extractor):
    # two 3^3 convolutions: a voxel influences level-0 features within Chebyshev radius 2
    x = torch.randn(1, 1, 16, 16, 16, generator=torch.Generator().manual_seed(1))
    y = x.clone()
    y[0, 0, 8, 8, 8] += 1.0
    with torch.no_grad():
        fx = extract_features(extractor, x, max_level=0)[0][0]
        fy = extract_features(extractor, y, max_level=0)[0][0]
    changed = (fx != fy).any(0).numpy()
    idx = np.argwhere(changed)
    assert changed[8, 8, 8]
    assert np.abs(idx - 8).max() <= 2


def test_weights_stay_frozen(extractor):
    before = extractor.checksum()
    x = torch.randn(1, 1, 16, 16, 16, requires_grad=True)
    extract_features(extractor, x)[2].sum().backward()
    assert x.grad is not None
    assert all(p.grad is None for p in extractor.encoder.parameters())
    assert extractor.checksum() == before


def test_checkpoint_round_trip(tmp_path):
    ext = FeatureExtractor.random(3, widths=(4, 4, 8))
    ext.save(tmp_path / "e.pt")
    back = FeatureExtractor.from_checkpoint(tmp_path / "e.pt")
    assert back.checksum() == ext.checksum()
    torch.save({"format": "other"}, tmp_path / "bad.pt")
    with pytest.raises(ExtractorWeightsError):
        FeatureExtractor.from_checkpoint(tmp_path / "bad.pt")
    with pytest.raises(ExtractorWeightsError):
        FeatureExtractor.from_checkpoint(tmp_path / "missing.pt")


def test_channel_mismatch(extractor):
    with pytest.raises(ExtractorWeightsError):
        extract_features(extractor, torch.zeros(1, 2, 8, 8, 8))


def _pyramid(seed, size=8):
    g = torch.Generator().manual_seed(seed)
    from tumorfab.features import FeaturePyramid
    return FeaturePyramid([torch.randn(2, 5, size // 2 ** i, size // 2 ** i, size // 2 ** i, generator=g)
                           for i in range(3)])


def test_pool_full_support_is_global_mean():
    pyr = _pyramid(0)
    mask = torch.full((2, 8, 8, 8), 2)
    feat = masked_class_pool(pyr, mask, 2, 0, index=1)
    assert isinstance(feat, ClassFeature)
    assert torch.allclose(feat.vector, pyr[0][1].mean(dim=(1, 2, 3)))


def test_pool_singleton():
    pyr = _pyramid(1)
    mask = torch.zeros(2, 8, 8, 8, dtype=torch.long)
    mask[0, 3, 4, 5] = 3
    feat = masked_class_pool(pyr, mask, 3, 0)
    assert torch.equal(feat.vector, pyr[0][0][:, 3, 4, 5])
    assert masked_class_pool(pyr, mask, 1, 0) is None


def test_pool_matches_voxel_loop():
    pyr = _pyramid(2)
    rng = np.random.default_rng(0)
    mask = torch.from_numpy(rng.integers(0, 4, size=(2, 8, 8, 8)))
    for layer in (0, 1, 2):
        feats = pyr[layer][0]
        lab = downsample_labels(mask[:1], feats.shape[1:])[0]
        for c in (1, 2, 3):
            acc, n = np.zeros(feats.shape[0]), 0
            for i in range(feats.shape[1]):
                for j in range(feats.shape[2]):
                    for k in range(feats.shape[3]):
                        if int(lab[i, j, k]) == c:
                            acc += feats[:, i, j, k].double().numpy()
                            n += 1
            got = masked_class_pool(pyr, mask, c, layer)
            if n == 0:
                assert got is None
            else:
                assert np.allclose(got.vector.double().numpy(), acc / n, atol=1e-6)


def test_pool_permutation_invariant():
    pyr = _pyramid(3)
    mask = torch.from_numpy(np.random.default_rng(1).integers(0, 4, size=(1, 8, 8, 8)))
    perm = torch.randperm(8, generator=torch.Generator().manual_seed(0))
    from tumorfab.features import FeaturePyramid
    pyr_p = FeaturePyramid([pyr[0][:1][:, :, perm]])
    feat = masked_class_pool(FeaturePyramid([pyr[0][:1]]), mask, 2, 0)
    feat_p = masked_class_pool(pyr_p, mask[:, perm], 2, 0)
    assert torch.allclose(feat.vector, feat_p.vector, atol=1e-6)


def test_pool_rejects_deep_layer():
    with pytest.raises(ValueError):
        masked_class_pool(_pyramid(0), torch.zeros(2, 8, 8, 8, dtype=torch.long), 1, 3)


def test_perceptual_zero_for_identical(extractor, small_tumor_case):
    vol, mask = small_tumor_case
    x = torch.from_numpy(vol.data)[None]
    m = torch.from_numpy(mask.labels.astype(np.int64))[None]
    pyr = extract_features(extractor, x, max_level=2)
    assert float(class_perceptual_loss(pyr, pyr, m, m)) == 0.0


def test_perceptual_empty_warns():
    pyr = _pyramid(0)
    empty = torch.zeros(2, 8, 8, 8, dtype=torch.long)
    with pytest.warns(EmptyClassWarning):
        assert float(class_perceptual_loss(pyr, pyr, empty, empty)) == 0.0


def test_perceptual_layer_width_mismatch():
    from tumorfab.features import FeaturePyramid
    a = _pyramid(0)
    b = FeaturePyramid([t[:, :3] for t in a.levels])
    m = torch.ones(2, 8, 8, 8, dtype=torch.long)
    with pytest.raises(ExtractorWeightsError):
        class_perceptual_loss(a, b, m, m)
