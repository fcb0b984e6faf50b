"""Refinement objectives: hinge reconstruction, adversarial terms, and the weighted total."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F


@dataclass
class LossWeights:
    lambda_a: float = 10.0  # patch adversarial
    lambda_b: float = 1.0  # global adversarial
    lambda_c_start: float = 10.0  # hinge, linearly annealed
    lambda_c_end: float = 1.0
    lambda_d: float = 1.0  # class-wise perceptual
    margin_n_roi: float = 0.05

    def __post_init__(self):
        values = asdict(self)
        if any(v < 0 for v in values.values()):
            raise ValueError(f"loss weights must be non-negative: {values}")
        if self.lambda_c_end > self.lambda_c_start:
            raise ValueError("lambda_c schedule must be non-increasing")

    def lambda_c(self, epoch: int, total_epochs: int) -> float:
        """Linear schedule from ``lambda_c_start`` at epoch 0 to ``lambda_c_end`` at the last epoch.

        A single-epoch run uses the start value.
        """
        if not 0 <= epoch < total_epochs:
            raise ValueError(f"epoch {epoch} outside [0, {total_epochs})")
        if total_epochs == 1:
            return self.lambda_c_start
        frac = epoch / (total_epochs - 1)
        return self.lambda_c_start + (self.lambda_c_end - self.lambda_c_start) * frac

    def to_dict(self) -> dict:
        return asdict(self)


def hinge_reconstruction_loss(x_s: torch.Tensor, x_coarse: torch.Tensor, roi: torch.Tensor,
                              margin: float) -> torch.Tensor:
    """mean(max(0, (1 - roi) * |x_s - x_coarse| - margin)) over every voxel.

    ``roi`` broadcasts against the images, e.g. (N, 1, H, W, D).
    """
    if margin < 0:
        raise ValueError(f"margin must be non-negative, got {margin}")
    if x_s.shape != x_coarse.shape:
        raise ValueError(f"shape mismatch: {tuple(x_s.shape)} vs {tuple(x_coarse.shape)}")
    outside = 1.0 - roi.to(x_s.dtype)
    return F.relu(outside * (x_s - x_coarse).abs() - margin).mean()


def _check_finite(*tensors) -> None:
    for t in tensors:
        if not torch.isfinite(t).all():
            raise ValueError("discriminator produced non-finite logits")


def discriminator_adv_loss(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    """-(log D(real) + log(1 - D(fake))), each term averaged over its elements."""
    _check_finite(real_logits, fake_logits)
    real = F.binary_cross_entropy_with_logits(real_logits, torch.ones_like(real_logits))
    fake = F.binary_cross_entropy_with_logits(fake_logits, torch.zeros_like(fake_logits))
    return real + fake


def generator_adv_loss(fake_logits: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator loss, -log D(fake)."""
    _check_finite(fake_logits)
    return F.binary_cross_entropy_with_logits(fake_logits, torch.ones_like(fake_logits))


def adversarial_losses(patch_real, patch_fake, global_real, global_fake) -> tuple:
    """(d_patch, d_global, g_patch, g_global) from raw discriminator logits.

    Inside a training step the discriminator terms should be built from
    detached fakes; this helper is for evaluating all four at once.
    """
    return (
        discriminator_adv_loss(patch_real, patch_fake),
        discriminator_adv_loss(global_real, global_fake),
        generator_adv_loss(patch_fake),
        generator_adv_loss(global_fake),
    )


def total_loss(components: dict, epoch: int, weights: LossWeights, total_epochs: int):
    """Weighted generator objective from a dict with keys g_patch, g_global, hinge, percep."""
    lam_c = weights.lambda_c(epoch, total_epochs)
    return (weights.lambda_a * components["g_patch"]
            + weights.lambda_b * components["g_global"]
            + lam_c * components["hinge"]
            + weights.lambda_d * components["percep"])
