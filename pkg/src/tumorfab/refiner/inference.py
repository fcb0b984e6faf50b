"""Whole-volume refinement by blended sliding-window inference."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from ..volume import BrainMask, MriVolume, SegMask, check_same_shape, compute_brain_mask
from .networks import DISCRIMINATOR_STAGES

WINDOW_MULTIPLE = 2 ** DISCRIMINATOR_STAGES


def tile_starts(size: int, window: int, overlap: float) -> list:
    """Window origins covering ``[0, size)``; the last window is flush with the end."""
    if size <= window:
        return [0]
    step = max(1, int(round(window * (1.0 - overlap))))
    starts = list(range(0, size - window + 1, step))
    if starts[-1] != size - window:
        starts.append(size - window)
    return starts


def cosine_window(shape: Sequence[int]) -> np.ndarray:
    """Separable raised-cosine taper, strictly positive so every voxel has weight."""
    ramps = [0.5 - 0.5 * np.cos(2.0 * np.pi * (np.arange(n) + 0.5) / n) for n in shape]
    return ramps[0][:, None, None] * ramps[1][None, :, None] * ramps[2][None, None, :]


def refine_volume(x_coarse: MriVolume, m_s: SegMask, generator: Callable,
                  window: Sequence[int] = (128, 128, 128), overlap: float = 0.5,
                  brain: Optional[BrainMask] = None, keep_background: bool = True,
                  pad_value: float = -1.0) -> MriVolume:
    """Refine a full volume by tiling ``generator(x, labels)`` over overlapping windows.

    Overlapping predictions are blended with a cosine weight map normalised
    to sum to one at every voxel. Volumes smaller than the window are padded
    and cropped back. With ``keep_background`` voxels outside the brain are
    copied from ``x_coarse``.
    """
    window = tuple(int(w) for w in window)
    if len(window) != 3 or any(w % WINDOW_MULTIPLE for w in window):
        raise ValueError(f"window dims {window} must be divisible by {WINDOW_MULTIPLE}")
    if not 0.0 <= overlap <= 0.75:
        raise ValueError(f"overlap must lie in [0, 0.75], got {overlap}")
    check_same_shape(x_coarse.shape, m_s.shape)

    shape = x_coarse.shape
    padded = tuple(max(n, w) for n, w in zip(shape, window))
    pad = [p - n for p, n in zip(padded, shape)]
    x = torch.from_numpy(x_coarse.data.astype(np.float32))[None]
    labels = torch.from_numpy(m_s.labels.astype(np.int64))[None]
    if any(pad):
        x = F.pad(x, (0, pad[2], 0, pad[1], 0, pad[0]), value=pad_value)
        labels = F.pad(labels, (0, pad[2], 0, pad[1], 0, pad[0]), value=0)

    acc = np.zeros((x_coarse.channels,) + padded, dtype=np.float64)
    wsum = np.zeros(padded, dtype=np.float64)
    weight = cosine_window(window)
    if isinstance(generator, torch.nn.Module):
        generator.eval()
    with torch.no_grad():
        for i in tile_starts(padded[0], window[0], overlap):
            for j in tile_starts(padded[1], window[1], overlap):
                for k in tile_starts(padded[2], window[2], overlap):
                    sl = (slice(i, i + window[0]), slice(j, j + window[1]), slice(k, k + window[2]))
                    pred = generator(x[(slice(None), slice(None)) + sl], labels[(slice(None),) + sl])
                    acc[(slice(None),) + sl] += weight * pred[0].double().numpy()
                    wsum[sl] += weight
    out = (acc / wsum)[:, : shape[0], : shape[1], : shape[2]].astype(np.float32)
    out = np.clip(out, -1.0, 1.0)
    if keep_background:
        if brain is None:
            brain = compute_brain_mask(x_coarse)
        out = np.where(brain.mask[None], out, x_coarse.data)
    return x_coarse.with_data(out)
