"""Generator (6-level 3D U-Net) and dual-head discriminator."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

MASK_CHANNELS = 4  # one-hot background + NCR + ED + ET
GENERATOR_LEVELS = 6
DISCRIMINATOR_STAGES = 5


def one_hot_mask(labels: torch.Tensor, dtype=torch.float32) -> torch.Tensor:
    """(N, H, W, D) integer labels -> (N, 4, H, W, D) one-hot channels."""
    return F.one_hot(labels.long(), MASK_CHANNELS).permute(0, 4, 1, 2, 3).to(dtype)


def condition(x: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return torch.cat([x, one_hot_mask(labels, x.dtype)], dim=1)


def norm(channels: int) -> nn.GroupNorm:
    # group norm stays defined on the 1-voxel maps reached by 32^3 crops
    return nn.GroupNorm(max(1, channels // 4), channels)


def _check_divisible(shape, factor: int, what: str) -> None:
    if any(n % factor for n in shape):
        raise ValueError(f"{what} spatial dims {tuple(shape)} must be divisible by {factor}")


class DoubleConv(nn.Module):
    def __init__(self, in_ch, out_ch, stride=1):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv3d(in_ch, out_ch, 3, stride=stride, padding=1),
            norm(out_ch),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv3d(out_ch, out_ch, 3, padding=1),
            norm(out_ch),
            nn.LeakyReLU(0.2, inplace=True),
        )

    def forward(self, x):
        return self.block(x)


class UpBlock(nn.Module):
    """Nearest-neighbour x2 upsampling followed by a convolution (no transposed conv)."""

    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.conv = nn.Sequential(
            nn.Conv3d(in_ch, out_ch, 3, padding=1),
            norm(out_ch),
            nn.LeakyReLU(0.2, inplace=True),
        )

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class Generator(nn.Module):
    def __init__(self, image_channels=1, base_channels=8, max_channels=128):
        super().__init__()
        self.image_channels = image_channels
        widths = [min(base_channels * 2 ** i, max_channels) for i in range(GENERATOR_LEVELS)]
        self.widths = widths
        self.encoders = nn.ModuleList()
        prev = image_channels + MASK_CHANNELS
        for i, w in enumerate(widths):
            self.encoders.append(DoubleConv(prev, w, stride=1 if i == 0 else 2))
            prev = w
        self.ups = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for i in reversed(range(GENERATOR_LEVELS - 1)):
            self.ups.append(UpBlock(widths[i + 1], widths[i]))
            self.decoders.append(DoubleConv(2 * widths[i], widths[i]))
        self.head = nn.Conv3d(widths[0], image_channels, 1)

    def forward(self, x: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        _check_divisible(x.shape[2:], 2 ** (GENERATOR_LEVELS - 1), "generator input")
        h = condition(x, labels)
        skips = []
        for enc in self.encoders:
            h = enc(h)
            skips.append(h)
        h = skips.pop()
        for up, dec in zip(self.ups, self.decoders):
            h = dec(torch.cat([up(h), skips.pop()], dim=1))
        return torch.tanh(self.head(h))


class DualHeadDiscriminator(nn.Module):
    """Shared 5-stage strided encoder feeding a PatchGAN map and a pooled global score."""

    def __init__(self, image_channels=1, base_channels=8, max_channels=128):
        super().__init__()
        layers, prev = [], image_channels + MASK_CHANNELS
        for i in range(DISCRIMINATOR_STAGES):
            w = min(base_channels * 2 ** i, max_channels)
            layers.append(nn.Conv3d(prev, w, 4, stride=2, padding=1))
            if i > 0:
                layers.append(norm(w))
            layers.append(nn.LeakyReLU(0.2, inplace=True))
            prev = w
        self.encoder = nn.Sequential(*layers)
        self.patch_head = nn.Conv3d(prev, 1, 3, padding=1)
        self.pool = nn.AdaptiveAvgPool3d(1)
        self.global_head = nn.Linear(prev, 1)

    def forward(self, x: torch.Tensor, labels: torch.Tensor) -> tuple:
        _check_divisible(x.shape[2:], 2 ** DISCRIMINATOR_STAGES, "discriminator input")
        h = self.encoder(condition(x, labels))
        patch = self.patch_head(h)
        score = self.global_head(self.pool(h).flatten(1))
        return patch, score[:, 0]


def generator_forward(generator: Generator, x_coarse: torch.Tensor, m_s: torch.Tensor) -> torch.Tensor:
    return generator(x_coarse, m_s)


def discriminator_forward(discriminator: DualHeadDiscriminator, x: torch.Tensor, m: torch.Tensor) -> tuple:
    return discriminator(x, m)
