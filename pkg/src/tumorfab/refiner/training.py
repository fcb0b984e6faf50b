"""Adversarial training loop for the refinement network, plus checkpoint I/O."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from ..features import EmptyClassWarning, FeatureExtractor, class_perceptual_loss, extract_features
from ..volume import MriVolume, SegMask
from .losses import (LossWeights, discriminator_adv_loss, generator_adv_loss,
                     hinge_reconstruction_loss, total_loss)
from .networks import DISCRIMINATOR_STAGES, DualHeadDiscriminator, Generator

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "tumorfab-refiner"
CHECKPOINT_VERSION = 1
LOG_FIELDS = ("step", "epoch", "d_patch", "d_global", "g_patch", "g_global",
              "hinge", "percep", "lambda_c", "lr_g", "lr_d")


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, components: dict):
        self.step = step
        self.components = components
        detail = ", ".join(f"{k}={v}" for k, v in components.items())
        super().__init__(f"non-finite loss at step {step}: {detail}")


@dataclass
class TrainConfig:
    epochs: int = 200
    lr_generator: float = 2e-4
    lr_discriminator: float = 1e-4
    adam_betas: tuple = (0.5, 0.999)
    crop_size: tuple = (128, 128, 128)
    batch_size: int = 2
    flip: bool = True
    image_channels: int = 1
    generator_channels: int = 8
    discriminator_channels: int = 8
    seed: int = 0

    def __post_init__(self):
        self.adam_betas = tuple(float(b) for b in self.adam_betas)
        self.crop_size = tuple(int(c) for c in self.crop_size)
        if int(self.epochs) < 1 or int(self.batch_size) < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not (self.lr_generator > 0 and self.lr_discriminator > 0):
            raise ValueError("learning rates must be positive")
        factor = 2 ** DISCRIMINATOR_STAGES
        if len(self.crop_size) != 3 or any(c % factor or c <= 0 for c in self.crop_size):
            raise ValueError(f"crop dims {self.crop_size} must be positive multiples of {factor}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        d["crop_size"] = list(self.crop_size)
        return d


def lr_factor(epoch: int, epochs: int) -> float:
    """Linear decay: 1 at epoch 0, 1/epochs at the final epoch, 0 after training."""
    return max(0.0, 1.0 - epoch / epochs)


def fingerprint(config: TrainConfig, weights: LossWeights) -> str:
    blob = json.dumps({"train": config.to_dict(), "weights": weights.to_dict()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def build_networks(config: TrainConfig) -> tuple:
    torch.manual_seed(config.seed)
    gen = Generator(config.image_channels, config.generator_channels)
    disc = DualHeadDiscriminator(config.image_channels, config.discriminator_channels)
    return gen, disc


@dataclass
class RefinerCheckpoint:
    generator: dict
    discriminator: dict
    epoch: int
    optimizer: dict
    config: dict
    weights: dict
    fingerprint: str
    version: int = CHECKPOINT_VERSION

    def save(self, path) -> None:
        blob = asdict(self)
        blob["format"] = CHECKPOINT_FORMAT
        torch.save(blob, path)

    @classmethod
    def load(cls, path) -> "RefinerCheckpoint":
        blob = torch.load(path, map_location="cpu", weights_only=False)
        if blob.pop("format", None) != CHECKPOINT_FORMAT:
            raise ValueError(f"{path} is not a refiner checkpoint")
        if blob.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported refiner checkpoint version {blob.get('version')}")
        return cls(**blob)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.config)

    def build_generator(self) -> Generator:
        cfg = self.train_config()
        gen = Generator(cfg.image_channels, cfg.generator_channels)
        gen.load_state_dict(self.generator)
        return gen.eval()


@dataclass
class TrainResult:
    final: RefinerCheckpoint
    log: list
    checkpoint_paths: list = field(default_factory=list)


# ---------------------------------------------------------------- data


def _crop_bounds(shape, crop, center) -> list:
    return [int(np.clip(c - k // 2, 0, max(0, n - k))) for n, k, c in zip(shape, crop, center)]


def sample_crop(vol: MriVolume, mask: SegMask, crop, rng: np.random.Generator, flip: bool) -> tuple:
    """Tumor-centred random crop (uniform if there is no tumor) with optional axis flips.

    Volumes smaller than the crop are padded with background (-1 / label 0).
    """
    data, labels = vol.data, mask.labels
    pad = [max(0, k - n) for n, k in zip(mask.shape, crop)]
    if any(pad):
        data = np.pad(data, [(0, 0)] + [(0, p) for p in pad], constant_values=-1.0)
        labels = np.pad(labels, [(0, p) for p in pad], constant_values=0)
    tumor = np.argwhere(labels > 0)
    if len(tumor):
        center = tumor[int(rng.integers(len(tumor)))]
    else:
        center = [int(rng.integers(n)) for n in labels.shape]
    lo = _crop_bounds(labels.shape, crop, center)
    sl = tuple(slice(s, s + k) for s, k in zip(lo, crop))
    x, m = data[(slice(None),) + sl], labels[sl]
    if flip:
        for axis in range(3):
            if rng.random() < 0.5:
                x, m = np.flip(x, axis + 1), np.flip(m, axis)
    return np.ascontiguousarray(x, dtype=np.float32), np.ascontiguousarray(m, dtype=np.int64)


def _batch(items) -> tuple:
    xs, ms = zip(*items)
    return torch.from_numpy(np.stack(xs)), torch.from_numpy(np.stack(ms))


# ---------------------------------------------------------------- loop


def _set_lr(opt, lr) -> None:
    for group in opt.param_groups:
        group["lr"] = lr


def train_refiner(coarse_pairs: Sequence[tuple], real_pool: Sequence[tuple],
                  extractor: FeatureExtractor, config: Optional[TrainConfig] = None,
                  weights: Optional[LossWeights] = None, out_dir=None,
                  resume: Optional[RefinerCheckpoint] = None) -> TrainResult:
    """Alternate one discriminator and one generator update per batch.

    ``coarse_pairs`` and ``real_pool`` are sequences of (MriVolume, SegMask).
    Every random choice for sample ``i`` of epoch ``e`` comes from a stream
    seeded with ``(seed, e, i)``, so runs and resumed runs are reproducible.
    With ``out_dir`` a checkpoint per epoch and ``train_log.jsonl`` are written.
    """
    config = config or TrainConfig()
    weights = weights or LossWeights()
    if not coarse_pairs or not real_pool:
        raise ValueError("training needs non-empty coarse and real datasets")
    gen, disc = build_networks(config)
    opt_g = torch.optim.Adam(gen.parameters(), lr=config.lr_generator, betas=config.adam_betas)
    opt_d = torch.optim.Adam(disc.parameters(), lr=config.lr_discriminator, betas=config.adam_betas)
    fp = fingerprint(config, weights)
    start_epoch = 0
    if resume is not None:
        if resume.fingerprint != fp:
            raise ValueError("checkpoint was produced with a different configuration")
        gen.load_state_dict(resume.generator)
        disc.load_state_dict(resume.discriminator)
        opt_g.load_state_dict(resume.optimizer["generator"])
        opt_d.load_state_dict(resume.optimizer["discriminator"])
        start_epoch = resume.epoch + 1

    out = None
    if out_dir is not None:
        out = Path(out_dir)
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    log_handle = open(out / "train_log.jsonl", "a" if resume else "w") if out else None

    checksum = extractor.checksum()
    steps_per_epoch = math.ceil(len(coarse_pairs) / config.batch_size)
    records, paths, ckpt = [], [], resume
    try:
        for epoch in range(start_epoch, config.epochs):
            lr_g = config.lr_generator * lr_factor(epoch, config.epochs)
            lr_d = config.lr_discriminator * lr_factor(epoch, config.epochs)
            _set_lr(opt_g, lr_g)
            _set_lr(opt_d, lr_d)
            lam_c = weights.lambda_c(epoch, config.epochs)
            order = np.random.default_rng([config.seed, epoch]).permutation(len(coarse_pairs))
            gen.train()
            disc.train()
            for b in range(steps_per_epoch):
                idx = order[b * config.batch_size:(b + 1) * config.batch_size]
                coarse, real_d, real_p = [], [], []
                for pos, i in enumerate(idx):
                    rng = np.random.default_rng([config.seed, epoch, b * config.batch_size + pos])
                    coarse.append(sample_crop(*coarse_pairs[i], config.crop_size, rng, config.flip))
                    j, k = rng.integers(len(real_pool), size=2)
                    real_d.append(sample_crop(*real_pool[j], config.crop_size, rng, config.flip))
                    real_p.append(sample_crop(*real_pool[k], config.crop_size, rng, config.flip))
                step = epoch * steps_per_epoch + b
                comps = _train_step(gen, disc, extractor, opt_g, opt_d, _batch(coarse),
                                    _batch(real_d), _batch(real_p), weights, epoch, config.epochs)
                record = {"step": step, "epoch": epoch, **comps,
                          "lambda_c": lam_c, "lr_g": lr_g, "lr_d": lr_d}
                if not all(math.isfinite(record[k]) for k in comps):
                    raise TrainingDivergedError(step, comps)
                records.append(record)
                if log_handle:
                    log_handle.write(json.dumps({k: record[k] for k in LOG_FIELDS}) + "\n")
            ckpt = RefinerCheckpoint(
                generator={k: v.clone() for k, v in gen.state_dict().items()},
                discriminator={k: v.clone() for k, v in disc.state_dict().items()},
                epoch=epoch,
                optimizer={"generator": opt_g.state_dict(), "discriminator": opt_d.state_dict()},
                config=config.to_dict(), weights=weights.to_dict(), fingerprint=fp,
            )
            if out:
                path = out / "checkpoints" / f"epoch_{epoch:03d}.pt"
                ckpt.save(path)
                paths.append(path)
            log.info("epoch %d done: %s", epoch, records[-1] if records else {})
    finally:
        if log_handle:
            log_handle.close()
    if extractor.checksum() != checksum:
        raise RuntimeError("frozen feature extractor weights changed during training")
    return TrainResult(ckpt, records, paths)


def _train_step(gen, disc, extractor, opt_g, opt_d, coarse, real_d, real_p,
                weights: LossWeights, epoch: int, epochs: int) -> dict:
    xc, mc = coarse
    xr, mr = real_d
    xp, mp = real_p
    fake = gen(xc, mc)

    for p in disc.parameters():
        p.requires_grad_(True)
    opt_d.zero_grad()
    patch_r, glob_r = disc(xr, mr)
    patch_f, glob_f = disc(fake.detach(), mc)
    d_patch = discriminator_adv_loss(patch_r, patch_f)
    d_global = discriminator_adv_loss(glob_r, glob_f)
    (weights.lambda_a * d_patch + weights.lambda_b * d_global).backward()
    opt_d.step()

    for p in disc.parameters():
        p.requires_grad_(False)
    opt_g.zero_grad()
    patch_f, glob_f = disc(fake, mc)
    roi = (mc > 0)[:, None]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptyClassWarning)
        with torch.no_grad():
            pyr_real = extract_features(extractor, xp, max_level=2)
        pyr_fake = extract_features(extractor, fake, max_level=2)
        percep = class_perceptual_loss(pyr_real, pyr_fake, mp, mc)
    comps = {
        "g_patch": generator_adv_loss(patch_f),
        "g_global": generator_adv_loss(glob_f),
        "hinge": hinge_reconstruction_loss(fake, xc, roi, weights.margin_n_roi),
        "percep": percep,
    }
    total_loss(comps, epoch, weights, epochs).backward()
    opt_g.step()
    out = {"d_patch": d_patch.item(), "d_global": d_global.item()}
    out.update({k: float(v.detach()) if torch.is_tensor(v) else float(v) for k, v in comps.items()})
    return out
