"""Frozen multi-scale 3D encoder and class-wise masked pooling for perceptual losses."""

from __future__ import annotations

import hashlib
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .volume import TUMOR_CLASSES

CHECKPOINT_FORMAT = "tumorfab-extractor"
CHECKPOINT_VERSION = 1
DEFAULT_WIDTHS = (8, 16, 32, 64, 64, 64)
PERCEPTUAL_LAYERS = (0, 1, 2)


class EmptyClassWarning(UserWarning):
    """No tumor class was present in both masks, so the perceptual loss is 0."""


class ExtractorWeightsError(RuntimeError):
    pass


def conv_block(in_ch: int, out_ch: int, stride: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv3d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm3d(out_ch),
        nn.LeakyReLU(0.01, inplace=True),
        nn.Conv3d(out_ch, out_ch, 3, stride=1, padding=1, bias=False),
        nn.BatchNorm3d(out_ch),
        nn.LeakyReLU(0.01, inplace=True),
    )


class Encoder3D(nn.Module):
    """Plain segmentation-style encoder: stage 0 keeps resolution, later stages stride 2."""

    def __init__(self, in_channels: int = 1, widths: Sequence[int] = DEFAULT_WIDTHS):
        super().__init__()
        self.in_channels = in_channels
        self.widths = tuple(int(w) for w in widths)
        stages, prev = [], in_channels
        for i, w in enumerate(self.widths):
            stages.append(conv_block(prev, w, stride=1 if i == 0 else 2))
            prev = w
        self.stages = nn.ModuleList(stages)

    def forward(self, x: torch.Tensor, max_level: Optional[int] = None) -> list:
        last = len(self.stages) - 1 if max_level is None else max_level
        feats = []
        for i, stage in enumerate(self.stages[: last + 1]):
            x = stage(x)
            feats.append(x)
        return feats


@dataclass
class FeaturePyramid:
    """Feature maps per level, each (N, C_i, h_i, w_i, d_i); level 0 is full resolution."""

    levels: list

    @property
    def level_count(self) -> int:
        return len(self.levels)

    def __getitem__(self, i: int) -> torch.Tensor:
        return self.levels[i]


@dataclass
class ClassFeature:
    vector: torch.Tensor
    layer_index: int
    class_id: int


class FeatureExtractor:
    """Read-only wrapper around a frozen :class:`Encoder3D`.

    Build one with :meth:`from_checkpoint` or, for desk-scale runs, with
    :meth:`random` (fixed-seed initialization).
    """

    def __init__(self, encoder: Encoder3D):
        self.encoder = encoder.eval()
        for p in self.encoder.parameters():
            p.requires_grad_(False)

    @classmethod
    def random(cls, seed: int = 0, in_channels: int = 1, widths: Sequence[int] = DEFAULT_WIDTHS):
        gen = torch.Generator().manual_seed(int(seed))
        enc = Encoder3D(in_channels, widths)
        with torch.no_grad():
            for m in enc.modules():
                if isinstance(m, nn.Conv3d):
                    fan_in = m.in_channels * math.prod(m.kernel_size)
                    std = math.sqrt(2.0 / fan_in)
                    m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * std)
        return cls(enc)

    @classmethod
    def from_checkpoint(cls, path):
        path = Path(path)
        if not path.exists():
            raise ExtractorWeightsError(f"extractor checkpoint not found: {path}")
        blob = torch.load(path, map_location="cpu", weights_only=True)
        if blob.get("format") != CHECKPOINT_FORMAT or blob.get("version") != CHECKPOINT_VERSION:
            raise ExtractorWeightsError(f"unrecognised extractor checkpoint header in {path}")
        enc = Encoder3D(int(blob["in_channels"]), blob["widths"])
        try:
            enc.load_state_dict(blob["state_dict"])
        except RuntimeError as exc:
            raise ExtractorWeightsError(f"incompatible extractor weights in {path}: {exc}") from exc
        return cls(enc)

    def save(self, path) -> None:
        torch.save({
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "stages": len(self.encoder.widths),
            "widths": list(self.encoder.widths),
            "in_channels": self.encoder.in_channels,
            "state_dict": self.encoder.state_dict(),
        }, path)

    @property
    def level_count(self) -> int:
        return len(self.encoder.widths)

    @property
    def in_channels(self) -> int:
        return self.encoder.in_channels

    def to(self, *args, **kwargs) -> "FeatureExtractor":
        self.encoder.to(*args, **kwargs)
        return self

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in sorted(self.encoder.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()

    def __call__(self, x: torch.Tensor, mask_channels: Optional[torch.Tensor] = None,
                 max_level: Optional[int] = None) -> FeaturePyramid:
        return extract_features(self, x, mask_channels, max_level)


def extract_features(extractor: FeatureExtractor, x: torch.Tensor,
                     mask_channels: Optional[torch.Tensor] = None,
                     max_level: Optional[int] = None, pad_value: float = -1.0) -> FeaturePyramid:
    """Run the frozen encoder on a (N, C, H, W, D) batch.

    Inputs are padded at the high end of each axis up to a multiple of
    ``2**max_level`` and every level is cropped back to ``ceil(h / 2**i)``.
    Gradients flow to ``x`` but never to the encoder weights.
    """
    if x.dim() == 4:
        x = x[None]
    if mask_channels is not None:
        x = torch.cat([x, mask_channels.to(x.dtype)], dim=1)
    if x.shape[1] != extractor.in_channels:
        raise ExtractorWeightsError(
            f"extractor expects {extractor.in_channels} input channels, got {x.shape[1]}")
    last = extractor.level_count - 1 if max_level is None else int(max_level)
    factor = 2 ** last
    size = x.shape[2:]
    pad = [(-n) % factor for n in size]
    if any(pad):
        x = F.pad(x, (0, pad[2], 0, pad[1], 0, pad[0]), value=pad_value)
    extractor.encoder.eval()
    levels = extractor.encoder(x, last)
    cropped = []
    for i, f in enumerate(levels):
        dims = [math.ceil(n / 2 ** i) for n in size]
        cropped.append(f[..., : dims[0], : dims[1], : dims[2]])
    return FeaturePyramid(cropped)


def downsample_labels(labels: torch.Tensor, size: Sequence[int]) -> torch.Tensor:
    """Nearest-neighbour downsampling of a (N, H, W, D) label tensor."""
    if tuple(labels.shape[-3:]) == tuple(size):
        return labels
    out = F.interpolate(labels[:, None].float(), size=tuple(size), mode="nearest")
    return out[:, 0].to(labels.dtype)


def masked_class_pool(pyramid: FeaturePyramid, mask: torch.Tensor, class_id: int,
                      layer: int, index: int = 0) -> Optional[ClassFeature]:
    """Mean feature vector over voxels of ``class_id`` at ``layer`` for batch item ``index``.

    Returns None when the class is absent at that resolution.
    """
    if layer not in PERCEPTUAL_LAYERS or layer >= pyramid.level_count:
        raise ValueError(f"layer must be one of {PERCEPTUAL_LAYERS}, got {layer}")
    feats = pyramid[layer][index]
    if mask.dim() == 3:
        mask = mask[None]
    labels = downsample_labels(mask[index : index + 1], feats.shape[1:])[0]
    sel = labels == class_id
    count = int(sel.sum())
    if count == 0:
        return None
    vector = (feats * sel.to(feats.dtype)).sum(dim=(1, 2, 3)) / count
    return ClassFeature(vector, layer, class_id)


def class_perceptual_loss(pyr_real: FeaturePyramid, pyr_syn: FeaturePyramid,
                          mask_real: torch.Tensor, mask_syn: torch.Tensor,
                          layers: Sequence[int] = PERCEPTUAL_LAYERS,
                          classes: Sequence[int] = TUMOR_CLASSES) -> torch.Tensor:
    """Mean L1 distance between class-pooled real and synthetic features.

    Averages over every (sample, layer, class) triple present in both masks;
    returns 0 with an :class:`EmptyClassWarning` if none is.
    """
    if mask_real.dim() == 3:
        mask_real, mask_syn = mask_real[None], mask_syn[None]
    terms = []
    for layer in layers:
        real_l, syn_l = pyr_real[layer], pyr_syn[layer]
        if real_l.shape[1] != syn_l.shape[1]:
            raise ExtractorWeightsError(
                f"channel mismatch at layer {layer}: {real_l.shape[1]} vs {syn_l.shape[1]}")
        for n in range(real_l.shape[0]):
            for c in classes:
                fr = masked_class_pool(pyr_real, mask_real, c, layer, n)
                fs = masked_class_pool(pyr_syn, mask_syn, c, layer, n)
                if fr is None or fs is None:
                    continue
                terms.append((fr.vector - fs.vector).abs().mean())
    if not terms:
        warnings.warn("no tumor class present in both masks; perceptual loss is 0",
                      EmptyClassWarning, stacklevel=2)
        return pyr_syn[0].new_zeros(())
    return torch.stack(terms).mean()
