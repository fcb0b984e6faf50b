"""Pipeline configuration: defaults, YAML loading, dotted overrides, typed section views."""

from __future__ import annotations

import copy
from dataclasses import fields
from pathlib import Path
from typing import Iterable, Optional

import yaml

from .coarse import Stage1FitConfig
from .features import DEFAULT_WIDTHS, PERCEPTUAL_LAYERS, FeatureExtractor
from .masks import MaskAugmentConfig
from .phantom import PhantomSpec
from .refiner.losses import LossWeights
from .refiner.training import TrainConfig


class ConfigError(ValueError):
    pass


def _defaults_of(cls, drop=("seed",)) -> dict:
    inst = cls()
    d = inst.to_dict()
    for k in drop:
        d.pop(k, None)
    return d


def default_config() -> dict:
    """Every knob with its default; training values follow the published settings."""
    stage1 = _defaults_of(Stage1FitConfig)
    stage1["fit_samples"] = 4
    return {
        "seed": 0,
        "out": "runs/default",
        "data": {"target_spacing": 1.0, "skullstrip_check": "warn"},
        "mask_augment": _defaults_of(MaskAugmentConfig),
        "stage1": stage1,
        "extractor": {
            "checkpoint_path": None,
            "fallback_random_seed": 0,
            "widths": list(DEFAULT_WIDTHS),
            "layers_for_percep": list(PERCEPTUAL_LAYERS),
        },
        "stage2": {
            "train": _defaults_of(TrainConfig),
            "weights": LossWeights().to_dict(),
            "window": [128, 128, 128],
            "overlap": 0.5,
        },
        "eval": {"baseline": None},
        "phantom": {
            "count": 8,
            "dims": [64, 64, 64],
            "axes_jitter": 0.05,
            "tumor_scale_range": [0.85, 1.1],
            "tumor_shift_mm": 3.0,
        },
    }


def _merge(base: dict, update: dict, path: str = "") -> dict:
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and value is not None:
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be a mapping")
            _merge(base[key], value, where + ".")
        else:
            base[key] = value
    return base


def apply_override(cfg: dict, item: str) -> None:
    """Apply one ``a.b.c=value`` override; the value is parsed as YAML."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not KEY=VALUE")
    key, raw = item.split("=", 1)
    parts = key.strip().split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown config section in override {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = yaml.safe_load(raw)


class PipelineConfig:
    def __init__(self, data: dict):
        self.data = data
        self.validate()

    @classmethod
    def load(cls, path: Optional[str] = None, overrides: Iterable[str] = (),
             seed: Optional[int] = None, out: Optional[str] = None) -> "PipelineConfig":
        cfg = default_config()
        if path is not None:
            p = Path(path)
            if not p.exists():
                raise ConfigError(f"config file not found: {p}")
            loaded = yaml.safe_load(p.read_text()) or {}
            if not isinstance(loaded, dict):
                raise ConfigError(f"config file {p} must hold a mapping")
            _merge(cfg, loaded)
        for item in overrides:
            apply_override(cfg, item)
        if seed is not None:
            cfg["seed"] = int(seed)
        if out is not None:
            cfg["out"] = str(out)
        return cls(cfg)

    def __getitem__(self, key):
        return self.data[key]

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    @property
    def out(self) -> Path:
        return Path(self.data["out"])

    def validate(self) -> None:
        try:
            self.mask_augment()
            self.stage1()
            self.train_config()
            self.loss_weights()
            self.phantom_spec()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if self.data["data"]["skullstrip_check"] not in ("warn", "fail"):
            raise ConfigError("data.skullstrip_check must be 'warn' or 'fail'")
        ckpt = self.data["extractor"]["checkpoint_path"]
        if ckpt is not None and not Path(ckpt).exists():
            raise ConfigError(f"extractor.checkpoint_path does not exist: {ckpt}")
        if not 0 <= float(self.data["stage2"]["overlap"]) <= 0.75:
            raise ConfigError("stage2.overlap must lie in [0, 0.75]")

    def _section(self, cls, section: dict):
        names = {f.name for f in fields(cls)}
        kwargs = {k: copy.deepcopy(v) for k, v in section.items() if k in names}
        if "seed" in names:
            kwargs["seed"] = self.seed
        return cls(**kwargs)

    def mask_augment(self) -> MaskAugmentConfig:
        return self._section(MaskAugmentConfig, self.data["mask_augment"])

    def stage1(self) -> Stage1FitConfig:
        return self._section(Stage1FitConfig, self.data["stage1"])

    def train_config(self) -> TrainConfig:
        return self._section(TrainConfig, self.data["stage2"]["train"])

    def loss_weights(self) -> LossWeights:
        return self._section(LossWeights, self.data["stage2"]["weights"])

    def phantom_spec(self) -> PhantomSpec:
        return PhantomSpec(dims=tuple(self.data["phantom"]["dims"]), seed=self.seed)

    def extractor(self) -> FeatureExtractor:
        section = self.data["extractor"]
        if section["checkpoint_path"]:
            return FeatureExtractor.from_checkpoint(section["checkpoint_path"])
        return FeatureExtractor.random(section["fallback_random_seed"], widths=section["widths"])

    def resolved(self) -> dict:
        return copy.deepcopy(self.data)

    def write(self, directory: Path) -> Path:
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / "config.resolved.yaml"
        path.write_text(yaml.safe_dump(self.resolved(), sort_keys=True))
        return path
