import json

import numpy as np
import pytest
import yaml

from tumorfab import manifest as mf
from tumorfab.config import ConfigError, PipelineConfig, apply_override, default_config


def test_defaults_materialize_all_sections(tmp_path):
    cfg = PipelineConfig.load(seed=7, out=str(tmp_path))
    path = cfg.write(tmp_path)
    data = yaml.safe_load(path.read_text())
    assert data["seed"] == 7
    for key in ("data", "mask_augment", "stage1", "extractor", "stage2", "eval", "phantom"):
        assert key in data
    assert data["stage1"]["learning_rate"] == 0.01 and data["stage1"]["epochs"] == 200
    assert data["stage2"]["train"]["lr_generator"] == 2e-4
    assert data["stage2"]["weights"]["lambda_a"] == 10.0
    assert cfg.stage1().seed == 7 and cfg.train_config().seed == 7 and cfg.mask_augment().seed == 7


def test_yaml_and_overrides(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump({"stage1": {"epochs": 5}, "stage2": {"train": {"crop_size": [32, 32, 32]}}}))
    cfg = PipelineConfig.load(str(p), ["stage1.learning_rate=0.5", "stage2.overlap=0.25"])
    assert cfg.stage1().epochs == 5
    assert cfg.stage1().learning_rate == 0.5
    assert cfg.train_config().crop_size == (32, 32, 32)
    assert cfg["stage2"]["overlap"] == 0.25


@pytest.mark.parametrize("override", ["nope=1", "stage1.nope=1", "stage1", "nosection.x=1"])
def test_unknown_override_keys(override):
    with pytest.raises(ConfigError):
        PipelineConfig.load(overrides=[override])


def test_unknown_yaml_key(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("stage1:\n  bogus: 1\n")
    with pytest.raises(ConfigError):
        PipelineConfig.load(str(p))


@pytest.mark.parametrize("override", ["stage1.epochs=0", "mask_augment.combine_probability=2",
                                      "stage2.train.crop_size=[30,32,32]", "data.skullstrip_check=maybe",
                                      "stage2.overlap=0.9", "extractor.checkpoint_path=/does/not/exist"])
def test_invalid_values(override):
    with pytest.raises(ConfigError):
        PipelineConfig.load(overrides=[override])


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        PipelineConfig.load(str(tmp_path / "absent.yaml"))


def test_extractor_fallback_is_seeded():
    a = PipelineConfig.load().extractor()
    b = PipelineConfig.load().extractor()
    assert a.checksum() == b.checksum()


def test_manifest_round_trip(tmp_path):
    (tmp_path / "sub").mkdir()
    recs = [{"case_id": "a", "image": "sub/a.nii.gz", "mask": None, "n": 1}]
    path = mf.write_manifest(tmp_path / "m.jsonl", recs)
    back = mf.read_manifest(path)
    assert back[0]["image"] == str((tmp_path / "sub" / "a.nii.gz").resolve())
    assert back[0]["mask"] is None and back[0]["n"] == 1
    bad = tmp_path / "bad.jsonl"
    bad.write_text("{not json\n")
    with pytest.raises(ValueError):
        mf.read_manifest(bad)
    with pytest.raises(FileNotFoundError):
        mf.read_manifest(tmp_path / "none.jsonl")


def test_array_hash_sensitive_to_dtype_and_shape():
    a = np.zeros((2, 3), np.float32)
    assert mf.array_sha256(a) == mf.array_sha256(a.copy())
    assert mf.array_sha256(a) != mf.array_sha256(a.reshape(3, 2))
    assert mf.array_sha256(a) != mf.array_sha256(a.astype(np.float64))
