"""Command-line pipeline: phantom -> preprocess -> fit-intensity/fabricate -> train-refiner -> refine -> evaluate.

Exit codes: 0 success, 1 validation failure, 2 runtime failure. Failures
also print a JSON error record on stderr and write ``error.json`` to the
output directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import traceback
from pathlib import Path

import numpy as np

from . import manifest as mf
from .coarse import FitDivergedError, IntensityTransform, fabricate_coarse, fit_intensity_params
from .config import ConfigError, PipelineConfig
from .masks import MaskSamplingError, sample_rng, sample_synthetic_mask
from .metrics import REGIONS, mean_dice, two_tailed_t_test
from .phantom import PhantomSpec, TumorSpec, generate_phantom_brain, generate_phantom_tumor_case
from .refiner.inference import refine_volume
from .refiner.training import RefinerCheckpoint, TrainingDivergedError, train_refiner
from .volume import (VolumeError, compute_brain_mask, corners_nonzero, load_brain_mask, load_mask,
                     load_volume, normalize_intensity, resample_isotropic, resample_mask,
                     save_brain_mask, save_mask, save_volume)

log = logging.getLogger("tumorfab")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2
VALIDATION_ERRORS = (ConfigError, VolumeError, ValueError, FileNotFoundError)
RUNTIME_ERRORS = (MaskSamplingError, TrainingDivergedError, FitDivergedError)


class SkullStripError(ValueError):
    pass


def _nifti_stem(path: Path) -> str:
    name = path.name
    for suffix in (".nii.gz", ".nii"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return path.stem


def _nifti_files(directory: Path) -> list:
    return sorted(p for p in directory.iterdir() if p.name.endswith((".nii", ".nii.gz")))


# ---------------------------------------------------------------- phantom


def _jittered_case(cfg: PipelineConfig, index: int, tumor: bool) -> PhantomSpec:
    base = cfg.phantom_spec()
    ph = cfg["phantom"]
    rng = sample_rng(cfg.seed, 10_000 * int(tumor) + index)
    jitter = 1.0 + rng.uniform(-ph["axes_jitter"], ph["axes_jitter"], size=3)
    dims = np.asarray(base.dims, dtype=float)
    axes = tuple(float(a) for a in dims * np.array([0.44, 0.40, 0.36]) * jitter)
    seed = int(rng.integers(2 ** 31))
    if not tumor:
        return PhantomSpec(dims=base.dims, brain_axes_mm=axes, seed=seed)
    lo, hi = ph["tumor_scale_range"]
    t = TumorSpec()
    scale = dims.min() / 64.0 * rng.uniform(lo, hi)
    shift = rng.uniform(-ph["tumor_shift_mm"], ph["tumor_shift_mm"], size=3)
    spec_t = TumorSpec(
        center_offset_mm=tuple(float(c) for c in np.asarray(t.center_offset_mm) * dims.min() / 64.0 + shift),
        ed_radii_mm=tuple(r * scale for r in t.ed_radii_mm),
        ncr_radii_mm=tuple(r * scale for r in t.ncr_radii_mm),
        et_radii_mm=tuple(r * scale for r in t.et_radii_mm),
    )
    return PhantomSpec(dims=base.dims, brain_axes_mm=axes, tumor_spec=spec_t, seed=seed)


def cmd_phantom(cfg: PipelineConfig, count: int, kind: str = "both") -> dict:
    out = cfg.out
    fixtures, written = [], {}
    for tumor in (False, True):
        name = "tumor" if tumor else "healthy"
        if kind not in ("both", name):
            continue
        folder = out / name
        folder.mkdir(parents=True, exist_ok=True)
        records = []
        for i in range(count):
            spec = _jittered_case(cfg, i, tumor)
            case_id = f"{name}_{i:03d}"
            img_path = folder / f"{case_id}.nii.gz"
            rec = {"case_id": case_id, "image": mf.relative(img_path, out),
                   "seed": spec.seed, "spec_hash": spec.digest()}
            if tumor:
                vol, mask = generate_phantom_tumor_case(spec)
                mask_path = folder / f"{case_id}_seg.nii.gz"
                save_mask(mask, mask_path)
                rec["mask"] = mf.relative(mask_path, out)
            else:
                vol = generate_phantom_brain(spec)
            save_volume(vol, img_path)
            records.append(rec)
            fixtures.append({"seed": spec.seed, "spec_hash": spec.digest(), "path": rec["image"]})
        written[name] = mf.write_manifest(out / f"{name}.jsonl", records)
    mf.write_manifest(out / "fixtures.jsonl", fixtures)
    return {k: str(v) for k, v in written.items()}


# ---------------------------------------------------------------- preprocess


def cmd_preprocess(cfg: PipelineConfig, input_dir) -> Path:
    input_dir = Path(input_dir)
    if not input_dir.is_dir():
        raise FileNotFoundError(f"input directory not found: {input_dir}")
    images = [p for p in _nifti_files(input_dir) if not _nifti_stem(p).endswith("_seg")]
    if not images:
        raise ValueError(f"no NIfTI images in {input_dir}")
    out = cfg.out
    for sub in ("images", "brain", "masks"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    target = float(cfg["data"]["target_spacing"])
    records = []
    for path in images:
        case_id = _nifti_stem(path)
        vol = load_volume(path)
        stripped = not corners_nonzero(vol)
        if not stripped:
            msg = f"{path}: nonzero corners, input does not look skull-stripped"
            if cfg["data"]["skullstrip_check"] == "fail":
                raise SkullStripError(msg)
            log.warning(msg)
        vol = resample_isotropic(vol, target)
        brain = compute_brain_mask(vol, background=0.0)
        norm = normalize_intensity(vol, brain)
        img_path = out / "images" / f"{case_id}.nii.gz"
        brain_path = out / "brain" / f"{case_id}.nii.gz"
        save_volume(norm, img_path)
        save_brain_mask(brain, brain_path, norm.spacing, norm.affine)
        rec = {"case_id": case_id, "source": path.name, "skullstrip_warning": not stripped,
               "image": mf.relative(img_path, out), "brain_mask": mf.relative(brain_path, out),
               "image_sha256": mf.array_sha256(norm.data)}
        seg_path = path.with_name(f"{case_id}_seg" + path.name[len(case_id):])
        if seg_path.exists():
            mask = resample_mask(load_mask(seg_path), target)
            mask_path = out / "masks" / f"{case_id}.nii.gz"
            save_mask(mask, mask_path)
            rec["mask"] = mf.relative(mask_path, out)
            rec["mask_sha256"] = mf.array_sha256(mask.labels)
        records.append(rec)
    return mf.write_manifest(out / "manifest.jsonl", records)


# ---------------------------------------------------------------- stage 1


def _load_pool(records: list, need_mask: bool = True) -> list:
    pool = []
    for rec in records:
        if need_mask and not rec.get("mask"):
            raise ValueError(f"case {rec['case_id']} has no mask")
        pool.append(load_mask(rec["mask"]) if need_mask else None)
    return pool


def _healthy_brain(rec: dict, vol):
    if rec.get("brain_mask"):
        return load_brain_mask(rec["brain_mask"])
    return compute_brain_mask(vol)


def _draw_coarse_inputs(cfg: PipelineConfig, healthy: list, pool: list, count: int, offset: int = 0):
    """Yield (index, healthy record, volume, brain, synthetic mask, provenance)."""
    aug = cfg.mask_augment()
    cache = {}
    for i in range(count):
        rng = sample_rng(cfg.seed, offset + i)
        h = int(rng.integers(len(healthy)))
        if h not in cache:
            vol = load_volume(healthy[h]["image"])
            cache = {h: (vol, _healthy_brain(healthy[h], vol))}
        vol, brain = cache[h]
        if pool[0].shape != vol.shape:
            raise ValueError(f"mask grid {pool[0].shape} differs from healthy grid {vol.shape}")
        m_s, info = sample_synthetic_mask(pool, brain, aug, rng, return_info=True)
        yield i, healthy[h], vol, brain, m_s, info


def cmd_fit_intensity(cfg: PipelineConfig, healthy_manifest, tumor_manifest) -> Path:
    healthy = mf.read_manifest(healthy_manifest)
    tumor = mf.read_manifest(tumor_manifest)
    if not healthy or not tumor:
        raise ValueError("fit-intensity needs non-empty healthy and tumor manifests")
    pool = _load_pool(tumor)
    st1 = cfg.stage1()
    n = int(cfg["stage1"]["fit_samples"])
    coarse = [(vol, m_s) for _, _, vol, _, m_s, _ in
              _draw_coarse_inputs(cfg, healthy, pool, n, offset=1_000_000)]
    real = [(load_volume(r["image"]), m) for r, m in zip(tumor, pool)]
    result = fit_intensity_params(coarse, real, cfg.extractor(), st1)
    path = cfg.out / "transform.json"
    cfg.out.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"transform": result.transform.to_dict(), "losses": result.losses,
                                "stage1": st1.to_dict()}, indent=2))
    return path


def _load_transform(path) -> IntensityTransform:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"intensity transform not found: {path}")
    blob = json.loads(path.read_text())
    return IntensityTransform.from_dict(blob.get("transform", blob))


def cmd_fabricate(cfg: PipelineConfig, healthy_manifest, tumor_manifest, count: int,
                  transform_path=None) -> Path:
    out = cfg.out
    (out / "coarse").mkdir(parents=True, exist_ok=True)
    records = []
    if count > 0:
        healthy = mf.read_manifest(healthy_manifest)
        tumor = mf.read_manifest(tumor_manifest)
        if not healthy or not tumor:
            raise ValueError("fabricate needs non-empty healthy and tumor manifests")
        if transform_path is None:
            transform_path = cmd_fit_intensity(cfg, healthy_manifest, tumor_manifest)
        transform = _load_transform(transform_path)
        sigma = float(cfg["stage1"]["sigma"])
        pool = _load_pool(tumor)
        for i, h_rec, vol, brain, m_s, info in _draw_coarse_inputs(cfg, healthy, pool, count):
            x_s, m = fabricate_coarse(vol, m_s, transform, sigma)
            case_id = f"coarse_{i:04d}"
            img_path = out / "coarse" / f"{case_id}.nii.gz"
            mask_path = out / "coarse" / f"{case_id}_seg.nii.gz"
            save_volume(x_s, img_path)
            save_mask(m, mask_path)
            rec = {
                "case_id": case_id,
                "image": mf.relative(img_path, out),
                "mask": mf.relative(mask_path, out),
                "healthy_id": h_rec["case_id"],
                "mask_sources": [tumor[j]["case_id"] for j in info["sources"]],
                "augment": info["augment"],
                "attempts": info["attempt"],
                "transform": transform.to_dict(),
                "sigma": sigma,
                "image_sha256": mf.array_sha256(x_s.data),
                "mask_sha256": mf.array_sha256(m.labels),
            }
            if h_rec.get("brain_mask"):
                rec["brain_mask"] = os.path.relpath(h_rec["brain_mask"], out.resolve())
            records.append(rec)
    return mf.write_manifest(out / "coarse.jsonl", records)


# ---------------------------------------------------------------- stage 2


def _pairs(records: list) -> list:
    return [(load_volume(r["image"]), load_mask(r["mask"])) for r in records]


def cmd_train_refiner(cfg: PipelineConfig, coarse_manifest, real_manifest) -> dict:
    coarse = _pairs(mf.read_manifest(coarse_manifest))
    real = _pairs(mf.read_manifest(real_manifest))
    extractor = cfg.extractor()
    before = extractor.checksum()
    result = train_refiner(coarse, real, extractor, cfg.train_config(), cfg.loss_weights(),
                           out_dir=cfg.out)
    info = {"extractor_checksum_before": before, "extractor_checksum_after": extractor.checksum(),
            "checkpoints": [mf.relative(p, cfg.out) for p in result.checkpoint_paths],
            "steps": len(result.log)}
    (cfg.out / "train_summary.json").write_text(json.dumps(info, indent=2))
    return info


def cmd_refine(cfg: PipelineConfig, checkpoint, coarse_manifest) -> Path:
    ckpt = RefinerCheckpoint.load(checkpoint)
    gen = ckpt.build_generator()
    out = cfg.out
    (out / "refined").mkdir(parents=True, exist_ok=True)
    window = tuple(cfg["stage2"]["window"])
    overlap = float(cfg["stage2"]["overlap"])
    records = []
    for rec in mf.read_manifest(coarse_manifest):
        vol, mask = load_volume(rec["image"]), load_mask(rec["mask"])
        brain = load_brain_mask(rec["brain_mask"]) if rec.get("brain_mask") else None
        refined = refine_volume(vol, mask, gen, window, overlap, brain=brain)
        img_path = out / "refined" / f"{rec['case_id']}.nii.gz"
        mask_path = out / "refined" / f"{rec['case_id']}_seg.nii.gz"
        save_volume(refined, img_path)
        save_mask(mask, mask_path)
        records.append({"case_id": rec["case_id"], "image": mf.relative(img_path, out),
                        "mask": mf.relative(mask_path, out), "source_image": rec["image"],
                        "checkpoint": str(Path(checkpoint).resolve())})
    return mf.write_manifest(out / "refined.jsonl", records)


# ---------------------------------------------------------------- evaluate


def _score_cases(pred_records: list, gt_by_id: dict) -> dict:
    cases = {}
    for rec in pred_records:
        cid = rec["case_id"]
        if cid not in gt_by_id:
            raise ValueError(f"prediction {cid} has no ground truth")
        scores, mean = mean_dice(load_mask(rec["mask"]), load_mask(gt_by_id[cid]["mask"]))
        cases[cid] = {**scores, "Mean": mean}
    return cases


def cmd_evaluate(cfg: PipelineConfig, pred_manifests: dict, gt_manifest) -> dict:
    """Dice per case/region for each named prediction set; Welch p-values vs the baseline."""
    gt_by_id = {r["case_id"]: r for r in mf.read_manifest(gt_manifest)}
    methods = {}
    for name, path in pred_manifests.items():
        cases = _score_cases(mf.read_manifest(path), gt_by_id)
        if not cases:
            raise ValueError(f"prediction manifest {path} is empty")
        agg = {}
        for key in [r.name for r in REGIONS] + ["Mean"]:
            vals = np.array([c[key] for c in cases.values()])
            agg[key] = {"mean": float(vals.mean()),
                        "std": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0}
        methods[name] = {"cases": cases, "aggregate": agg}
    names = list(pred_manifests)
    baseline = cfg["eval"]["baseline"] or names[0]
    if baseline not in methods:
        raise ValueError(f"baseline {baseline!r} is not among the prediction sets {names}")
    comparisons = []
    base_means = [c["Mean"] for c in methods[baseline]["cases"].values()]
    for name in names:
        if name == baseline:
            continue
        means = [c["Mean"] for c in methods[name]["cases"].values()]
        row = {"method": name, "baseline": baseline,
               "mean_diff": methods[name]["aggregate"]["Mean"]["mean"]
               - methods[baseline]["aggregate"]["Mean"]["mean"]}
        if len(means) >= 2 and len(base_means) >= 2:
            res = two_tailed_t_test(means, base_means)
            row.update({"t_statistic": res.t_statistic, "p_value": res.p_value,
                        "degenerate": res.degenerate})
        comparisons.append(row)
    report = {
        "header": {"metric": "Dice", "regions": {r.name: sorted(r.label_set) for r in REGIONS},
                   "test": "two-tailed Welch t-test (unpaired, unequal variance) on per-case mean Dice",
                   "empty_convention": "Dice = 1 when prediction and ground truth are both empty"},
        "methods": methods,
        "comparisons": comparisons,
    }
    cfg.out.mkdir(parents=True, exist_ok=True)
    (cfg.out / "report.json").write_text(json.dumps(report, indent=2))
    return report


def _format_table(report: dict) -> str:
    lines = [f"{'method':<16}{'ET':>8}{'TC':>8}{'WT':>8}{'Mean':>8}{'Diff':>8}{'p':>8}"]
    comp = {c["method"]: c for c in report["comparisons"]}
    for name, m in report["methods"].items():
        a = m["aggregate"]
        c = comp.get(name, {})
        diff = f"{c['mean_diff']:+.4f}" if c else "-"
        p = f"{c['p_value']:.3f}" if "p_value" in c else "-"
        lines.append(f"{name:<16}" + "".join(f"{a[k]['mean']:8.4f}" for k in ("ET", "TC", "WT", "Mean"))
                     + f"{diff:>8}{p:>8}")
    return "\n".join(lines)


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML pipeline configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="tumorfab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", parents=[common], help="generate phantom fixtures")
    p.add_argument("--count", type=int)
    p.add_argument("--kind", choices=("both", "healthy", "tumor"), default="both")

    p = sub.add_parser("preprocess", parents=[common], help="resample, mask and normalize a directory")
    p.add_argument("--input", required=True)

    p = sub.add_parser("fit-intensity", parents=[common], help="fit per-class intensity transform")
    p.add_argument("--healthy", required=True)
    p.add_argument("--tumor", required=True)

    p = sub.add_parser("fabricate", parents=[common], help="generate coarse synthetic pairs")
    p.add_argument("--healthy", required=True)
    p.add_argument("--tumor", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--transform", help="transform.json from fit-intensity (fitted if omitted)")

    p = sub.add_parser("train-refiner", parents=[common], help="adversarial refinement training")
    p.add_argument("--coarse", required=True)
    p.add_argument("--real", required=True)

    p = sub.add_parser("refine", parents=[common], help="sliding-window refinement")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--coarse", required=True)

    p = sub.add_parser("evaluate", parents=[common], help="Dice report")
    p.add_argument("--pred", action="append", required=True, metavar="[NAME=]MANIFEST")
    p.add_argument("--gt", required=True)
    return parser


def _pred_sets(items: list) -> dict:
    sets = {}
    for i, item in enumerate(items):
        name, _, path = item.rpartition("=")
        sets[name or (f"pred{i}" if len(items) > 1 else "pred")] = path
    return sets


def run(args: argparse.Namespace) -> object:
    cfg = PipelineConfig.load(args.config, args.override, args.seed, args.out)
    cfg.write(cfg.out)
    if args.command == "phantom":
        return cmd_phantom(cfg, args.count if args.count is not None else cfg["phantom"]["count"], args.kind)
    if args.command == "preprocess":
        return cmd_preprocess(cfg, args.input)
    if args.command == "fit-intensity":
        return cmd_fit_intensity(cfg, args.healthy, args.tumor)
    if args.command == "fabricate":
        if args.count < 0:
            raise ValueError("--count must be non-negative")
        return cmd_fabricate(cfg, args.healthy, args.tumor, args.count, args.transform)
    if args.command == "train-refiner":
        return cmd_train_refiner(cfg, args.coarse, args.real)
    if args.command == "refine":
        return cmd_refine(cfg, args.checkpoint, args.coarse)
    if args.command == "evaluate":
        report = cmd_evaluate(cfg, _pred_sets(args.pred), args.gt)
        print(_format_table(report))
        return cfg.out / "report.json"
    raise AssertionError(args.command)


def _error_record(args, exc: BaseException, code: int) -> dict:
    rec = {"command": getattr(args, "command", None), "exit_code": code,
           "error": type(exc).__name__, "message": str(exc)}
    for attr in ("step", "epoch", "attempts", "path", "components"):
        if hasattr(exc, attr):
            rec[attr] = getattr(exc, attr)
    return rec


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = run(args)
    except Exception as exc:  # noqa: BLE001 - every failure gets an exit code and a record
        error = exc
    else:
        if result is not None:
            print(result if not isinstance(result, dict) else json.dumps(result))
        return EXIT_OK
    if isinstance(error, RUNTIME_ERRORS):
        code = EXIT_RUNTIME
    elif isinstance(error, VALIDATION_ERRORS):
        code = EXIT_VALIDATION
    else:
        code = EXIT_RUNTIME
    record = _error_record(args, error, code)
    print(json.dumps(record, default=str), file=sys.stderr)
    if args.verbose:
        traceback.print_exception(error)
    if args.out:
        try:
            Path(args.out).mkdir(parents=True, exist_ok=True)
            (Path(args.out) / "error.json").write_text(json.dumps(record, default=str, indent=2))
        except OSError:
            pass
    return code


if __name__ == "__main__":
    sys.exit(main())
