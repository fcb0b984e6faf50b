"""Coarse tumor synthesis: ROI blur, per-class affine intensity change, and its fitting."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from scipy import ndimage

from .features import FeatureExtractor, PERCEPTUAL_LAYERS, extract_features, masked_class_pool
from .volume import ED, ET, NCR, TUMOR_CLASSES, LABELS, MriVolume, SegMask, check_same_shape

log = logging.getLogger(__name__)

GAUSSIAN_TRUNCATE = 4.0


class FitDivergedError(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        self.epoch = epoch
        super().__init__(f"intensity fit diverged at epoch {epoch} (loss={loss})")


@dataclass
class IntensityTransform:
    """Gain/offset per tumor class, keyed by label (1=NCR, 2=ED, 3=ET)."""

    params: dict = field(default_factory=lambda: {c: (1.0, 0.0) for c in TUMOR_CLASSES})

    def __post_init__(self):
        params = {int(k) if str(k).isdigit() else _label_id(k): (float(a), float(b))
                  for k, (a, b) in self.params.items()}
        if set(params) != set(TUMOR_CLASSES):
            raise ValueError(f"transform needs exactly the classes {TUMOR_CLASSES}, got {sorted(params)}")
        if not all(math.isfinite(v) for ab in params.values() for v in ab):
            raise ValueError("transform parameters must be finite")
        self.params = params

    @classmethod
    def identity(cls) -> "IntensityTransform":
        return cls()

    def gains(self) -> list:
        return [self.params[c][0] for c in TUMOR_CLASSES]

    def offsets(self) -> list:
        return [self.params[c][1] for c in TUMOR_CLASSES]

    def to_dict(self) -> dict:
        return {LABELS[c]: {"a": a, "b": b} for c, (a, b) in self.params.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "IntensityTransform":
        return cls({k: (v["a"], v["b"]) for k, v in d.items()})


def _label_id(name) -> int:
    lookup = {v: k for k, v in LABELS.items()}
    if name not in lookup:
        raise ValueError(f"unknown tumor class {name!r}")
    return lookup[name]


@dataclass
class Stage1FitConfig:
    epochs: int = 200
    learning_rate: float = 1e-2
    optimizer: str = "sgd"
    momentum: float = 0.9
    # optimise in per-class standardized coordinates (see fit_intensity_params)
    standardize: bool = True
    features: str = "class_pooled"
    layers: tuple = PERCEPTUAL_LAYERS
    sigma: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if int(self.epochs) < 1:
            raise ValueError("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.features not in ("class_pooled", "global_deep"):
            raise ValueError(f"unknown stage-1 feature mode {self.features!r}")
        self.layers = tuple(int(l) for l in self.layers)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layers"] = list(self.layers)
        return d


@dataclass
class FitResult:
    transform: IntensityTransform
    losses: list


def gaussian_blur(x: np.ndarray, sigma: float) -> np.ndarray:
    """Per-channel Gaussian filter, truncated at 4 sigma with symmetric boundaries."""
    return np.stack([
        ndimage.gaussian_filter(ch.astype(np.float64), sigma, mode="reflect", truncate=GAUSSIAN_TRUNCATE)
        for ch in x
    ])


def roi_blur(x_h: MriVolume, roi: np.ndarray, sigma: float = 2.0) -> MriVolume:
    """Blur the whole volume once and paste the result back inside ``roi`` only."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    roi = np.asarray(roi, dtype=bool)
    check_same_shape(x_h.shape, roi.shape)
    if not roi.any():
        return x_h.with_data(x_h.data.copy())
    blurred = gaussian_blur(x_h.data, sigma).astype(x_h.data.dtype)
    out = np.where(roi[None], blurred, x_h.data)
    return x_h.with_data(out)


def intensity_transform_tensor(x: torch.Tensor, labels: torch.Tensor,
                               gains: torch.Tensor, offsets: torch.Tensor) -> torch.Tensor:
    """Differentiable I(x) = a_c x + b_c on voxels of class c, clamped to [-1, 1].

    ``x`` is (..., C, H, W, D) and ``labels`` broadcastable (..., 1, H, W, D);
    ``gains``/``offsets`` hold one value per class in ``TUMOR_CLASSES`` order.
    """
    out = x
    for i, c in enumerate(TUMOR_CLASSES):
        sel = labels == c
        mapped = torch.clamp(gains[i] * x + offsets[i], -1.0, 1.0)
        out = torch.where(sel, mapped, out)
    return out


def apply_intensity_transform(vol: MriVolume, mask: SegMask, t: IntensityTransform) -> MriVolume:
    check_same_shape(vol.shape, mask.shape)
    x = torch.from_numpy(vol.data.astype(np.float64))
    labels = torch.from_numpy(mask.labels.astype(np.int64))[None]
    out = intensity_transform_tensor(
        x, labels, torch.tensor(t.gains(), dtype=torch.float64),
        torch.tensor(t.offsets(), dtype=torch.float64))
    out = out.numpy().astype(vol.data.dtype)
    # untouched voxels must stay bitwise identical
    out = np.where(mask.labels[None] > 0, out, vol.data)
    return vol.with_data(out)


def fabricate_coarse(x_h: MriVolume, m_s: SegMask, t: IntensityTransform,
                     sigma: float = 2.0) -> tuple:
    """Coarse synthetic pair ``(I(B(x_h, m_s)), m_s)``."""
    blurred = roi_blur(x_h, m_s.roi, sigma)
    return apply_intensity_transform(blurred, m_s, t), m_s


# ---------------------------------------------------------------- fitting


def _embedding(extractor: FeatureExtractor, x: torch.Tensor, labels: torch.Tensor,
               config: Stage1FitConfig) -> torch.Tensor:
    """Embedding compared by the stage-1 loss for one (1, C, H, W, D) volume."""
    if config.features == "global_deep":
        pyr = extract_features(extractor, x)
        return pyr[pyr.level_count - 1].mean(dim=(2, 3, 4))[0]
    pyr = extract_features(extractor, x, max_level=max(config.layers))
    parts = []
    for layer in config.layers:
        width = pyr[layer].shape[1]
        for c in TUMOR_CLASSES:
            feat = masked_class_pool(pyr, labels, c, layer)
            parts.append(feat.vector if feat is not None else x.new_full((width,), math.nan))
    return torch.cat(parts)


def _mean_embedding(embeddings: list) -> torch.Tensor:
    stacked = torch.stack(embeddings)
    present = ~torch.isnan(stacked)
    total = torch.where(present, stacked, torch.zeros_like(stacked)).sum(0)
    count = present.sum(0)
    return torch.where(count > 0, total / count.clamp(min=1), torch.full_like(total, math.nan))


# class-pooled features at levels <= 2 see at most 11 voxels away
ROI_CROP_MARGIN = 12


def _roi_crop(labels: np.ndarray, margin: int, align: int) -> tuple:
    """Slices around the tumor bounding box, starting on the encoder's stride grid."""
    idx = np.argwhere(labels > 0)
    if len(idx) == 0:
        return tuple(slice(None) for _ in labels.shape)
    lo = (idx.min(0) - margin) // align * align
    hi = idx.max(0) + margin + 1
    return tuple(slice(int(max(0, a)), int(min(n, b))) for a, b, n in zip(lo, hi, labels.shape))


def _class_stats(sums: np.ndarray) -> tuple:
    """(mean, std) of coarse ROI intensity per class from (count, sum, sum of squares)."""
    means, stds = [], []
    for n, s1, s2 in sums:
        mu = s1 / n if n else 0.0
        sd = math.sqrt(max(s2 / n - mu * mu, 0.0)) if n else 0.0
        means.append(mu)
        stds.append(sd if sd > 1e-3 else 1.0)
    return means, stds


class Stage1Objective:
    """Mean L1 distance between averaged coarse and real embeddings, as a function of (a, b).

    Blurring does not depend on the parameters, so it is done once up front.
    Unpaired samples are compared through their batch-mean embeddings. In the
    class-pooled mode volumes are cropped around the tumor, which leaves the
    pooled features unchanged and saves most of the compute.
    """

    def __init__(self, coarse_batches: Sequence[tuple], real_batches: Sequence,
                 extractor: FeatureExtractor, config: Stage1FitConfig,
                 dtype: torch.dtype = torch.float32):
        if not coarse_batches or not real_batches:
            raise ValueError("stage-1 fitting needs non-empty coarse and real batches")
        self.extractor = extractor
        self.config = config
        self.dtype = dtype
        self.coarse = []
        sums = np.zeros((len(TUMOR_CLASSES), 3))
        for vol, mask in coarse_batches:
            blurred = roi_blur(vol, mask.roi, config.sigma)
            x, labels = self._prepare(blurred, mask)
            self.coarse.append((x, labels))
            for i, c in enumerate(TUMOR_CLASSES):
                v = blurred.data[:, mask.labels == c].astype(np.float64)
                sums[i] += (v.size, v.sum(), (v * v).sum())
        self.class_stats = _class_stats(sums)
        with torch.no_grad():
            real_emb = []
            for item in real_batches:
                vol, mask = item if isinstance(item, tuple) else (item, None)
                if mask is None and config.features == "class_pooled":
                    raise ValueError("class_pooled stage-1 features need real masks")
                x, labels = self._prepare(vol, mask)
                real_emb.append(_embedding(extractor, x, labels, config))
            self.target = _mean_embedding(real_emb)

    def _prepare(self, vol: MriVolume, mask: Optional[SegMask]) -> tuple:
        data = vol.data
        labels = None if mask is None else mask.labels.astype(np.int64)
        if self.config.features == "class_pooled":
            sl = _roi_crop(labels, ROI_CROP_MARGIN, 2 ** max(self.config.layers))
            data, labels = data[(slice(None),) + sl], labels[sl]
        x = torch.from_numpy(np.ascontiguousarray(data)).to(self.dtype)[None]
        if labels is not None:
            labels = torch.from_numpy(np.ascontiguousarray(labels))[None]
        return x, labels

    def residual(self, gains: torch.Tensor, offsets: torch.Tensor) -> torch.Tensor:
        """Coarse minus real embedding over the components both batches define."""
        emb = []
        for x, labels in self.coarse:
            xt = intensity_transform_tensor(x, labels[:, None], gains, offsets)
            emb.append(_embedding(self.extractor, xt, labels, self.config))
        mine = _mean_embedding(emb)
        valid = ~torch.isnan(mine) & ~torch.isnan(self.target)
        if not bool(valid.any()):
            raise ValueError("no tumor class is shared by the coarse and real batches")
        return mine[valid] - self.target[valid]

    def __call__(self, gains: torch.Tensor, offsets: torch.Tensor) -> torch.Tensor:
        return self.residual(gains, offsets).abs().mean()


def fit_intensity_params(coarse_batches: Sequence[tuple], real_batches: Sequence,
                         extractor: FeatureExtractor, config: Optional[Stage1FitConfig] = None,
                         init: Optional[IntensityTransform] = None) -> FitResult:
    """Gradient-descent fit of (a_c, b_c) so coarse tumors match real ones in feature space.

    ``coarse_batches`` are (healthy volume, synthetic mask) pairs; the blur and
    intensity change are applied inside the loss. ``real_batches`` are real
    volumes, or (volume, mask) pairs for the class-pooled feature mode.
    """
    config = config or Stage1FitConfig()
    init = init or IntensityTransform.identity()
    objective = Stage1Objective(coarse_batches, real_batches, extractor, config)
    dtype = objective.dtype
    if config.standardize:
        # a*x + b == u*(x - mu)/s + v: u scales contrast and v shifts the class
        # mean, so both coordinates move the embedding at comparable rates
        mu = torch.tensor(objective.class_stats[0], dtype=dtype)
        sd = torch.tensor(objective.class_stats[1], dtype=dtype)
    else:
        mu, sd = torch.zeros(3, dtype=dtype), torch.ones(3, dtype=dtype)
    a0 = torch.tensor(init.gains(), dtype=dtype)
    b0 = torch.tensor(init.offsets(), dtype=dtype)
    u = (a0 * sd).requires_grad_(True)
    v = (b0 + a0 * mu).requires_grad_(True)

    def affine():
        gains = u / sd
        return gains, v - gains * mu

    if config.optimizer == "sgd":
        opt = torch.optim.SGD([u, v], lr=config.learning_rate, momentum=config.momentum)
    else:
        opt = torch.optim.Adam([u, v], lr=config.learning_rate)

    losses = []
    for epoch in range(config.epochs):
        opt.zero_grad()
        loss = objective(*affine())
        value = float(loss.detach())
        if not math.isfinite(value):
            raise FitDivergedError(epoch, value)
        losses.append(value)
        loss.backward()
        opt.step()
        if epoch % 20 == 0:
            log.debug("stage-1 epoch %d loss %.6f", epoch, value)

    with torch.no_grad():
        gains, offsets = affine()
        final = float(objective(gains, offsets))
    if not math.isfinite(final):
        raise FitDivergedError(config.epochs, final)
    losses.append(final)
    params = {c: (float(gains[i].detach()), float(offsets[i].detach())) for i, c in enumerate(TUMOR_CLASSES)}
    return FitResult(IntensityTransform(params), losses)
