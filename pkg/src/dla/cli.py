"""Command-line entry point: ``dla <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import glob
import logging
import os
import sys
import time
from typing import Dict, List, Optional

import numpy as np

from dla import __version__
from dla.config import RunConfig, derive_seed, parse_config
from dla.errors import ConfigError, DataError, NumericalError
from dla.inference import classify_volume, make_dla
from dla.labelgen import LabeledVoxelSet, LabelGenConfig, generate_labels
from dla.metrics import (
    CaseMetrics,
    cohort_tsv,
    confusion,
    metrics_from_table,
    summarize_cohort,
)
from dla.nn import Architecture, load_checkpoint, save_checkpoint
from dla.patches import PatchSource
from dla.phantom import PhantomCase, PhantomSpec, RigidTransform, generate_phantom
from dla.render import artifact_report, render_mip_pair
from dla.trainer import TrainConfig, train
from dla.volume import ROI, load_labels, load_volume, save_labels, save_volume, subtract

__all__ = ["main", "run_end2end"]

log = logging.getLogger("dla")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4

CASE_METRICS_HEADER = "tp\tfp\tfn\ttn\tsensitivity\tppv\tdsc\taccuracy\tundefined"


class StageError(Exception):
    """Failure inside a named end-to-end stage; wraps the original error."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage, self.cause = stage, cause


# ---------------------------------------------------------------------------
# config to domain objects


def _config_error(fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def phantom_spec(cfg: RunConfig, seed: int, motion: RigidTransform = RigidTransform()) -> PhantomSpec:
    v = cfg.values
    return _config_error(
        PhantomSpec,
        dims=v["dims"], spacing_mm=v["spacing_mm"], seed=seed,
        n_root_branches=v["n_root_branches"], branch_depth=v["branch_depth"],
        radius_mm=v["radius_mm"], vessel_fill_hu=v["vessel_fill_hu"],
        skull_semiaxes_mm=v["skull_semiaxes_mm"], skull_thickness_mm=v["skull_thickness_mm"],
        bone_hu=v["bone_hu"], soft_hu=v["soft_hu"], aneurysm_count=v["aneurysm_count"],
        aneurysm_radius_mm=v["aneurysm_radius_mm"], foramen_gap_mm=v["foramen_gap_mm"],
        noise_sigma_hu=v["noise_sigma_hu"], motion=motion,
    )


def labelgen_config(cfg: RunConfig, seed: int) -> LabelGenConfig:
    v = cfg.values
    return _config_error(
        LabelGenConfig,
        vessel_threshold_hu=v["vessel_threshold_hu"],
        vessel_min_component_voxels=v["vessel_min_component_voxels"],
        bone_threshold_hu=v["bone_threshold_hu"],
        bone_min_component_voxels=v["bone_min_component_voxels"],
        soft_range_hu=v["soft_range_hu"], erosion_radius_voxels=v["erosion_radius_voxels"],
        undersample_seed=seed,
    )


def architecture(cfg: RunConfig) -> Architecture:
    v = cfg.values
    return _config_error(
        Architecture,
        conv_layers=v["conv_layers"], base_channels=v["base_channels"],
        stage_boundaries=v["stage_boundaries"], patch_size=v["patch_size"],
        n_slices=v["n_slices"], input_filter=v["input_filter"], pooling=v["pooling"],
    )


def train_config(cfg: RunConfig, seed: int) -> TrainConfig:
    v = cfg.values
    return _config_error(
        TrainConfig,
        batch_size=v["batch_size"], momentum=v["momentum"], lr_points=v["lr_points"],
        max_iterations=v["max_iterations"], n_workers=v["n_workers"],
        eval_interval=v["eval_interval"], patience=v["patience"], min_delta=v["min_delta"],
        val_subsample=v["val_subsample"], seed=seed,
    )


def parse_roi(text) -> Optional[ROI]:
    if text is None:
        return None
    return _config_error(ROI.parse, text)


# ---------------------------------------------------------------------------
# file helpers


def _write_text(path, text):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _write_resolved(cfg: RunConfig, out_dir, name="resolved.cfg"):
    os.makedirs(out_dir, exist_ok=True)
    _write_text(os.path.join(out_dir, name), cfg.to_text())


def _parent(path):
    """Directory of ``path``, created if missing."""
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    return parent


def write_case(case: PhantomCase, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    save_volume(case.mask, os.path.join(out_dir, "mask.dlav"))
    save_volume(case.fill, os.path.join(out_dir, "fill.dlav"))
    save_labels(case.truth, os.path.join(out_dir, "truth.dlal"))


def read_case(case_dir) -> PhantomCase:
    mask = load_volume(os.path.join(case_dir, "mask.dlav"))
    fill = load_volume(os.path.join(case_dir, "fill.dlav"))
    truth_path = os.path.join(case_dir, "truth.dlal")
    truth = load_labels(truth_path) if os.path.exists(truth_path) else None
    return PhantomCase(mask=mask, fill=fill, truth=truth, spec=None)


def case_metrics_tsv(table, m: CaseMetrics) -> str:
    undefined = ",".join(sorted(m.undefined)) or "-"
    return (
        CASE_METRICS_HEADER + "\n"
        f"{table.tp}\t{table.fp}\t{table.fn}\t{table.tn}\t{m.sensitivity:.6f}\t{m.ppv:.6f}"
        f"\t{m.dsc:.6f}\t{m.accuracy:.6f}\t{undefined}\n"
    )


def read_case_metrics(path) -> CaseMetrics:
    with open(path, encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if len(lines) != 2 or lines[0] != CASE_METRICS_HEADER:
        raise DataError(f"{path}: not a per-case metrics file")
    f = lines[1].split("\t")
    undefined = frozenset() if f[8] == "-" else frozenset(f[8].split(","))
    return CaseMetrics(float(f[4]), float(f[5]), float(f[6]), float(f[7]), undefined)


# ---------------------------------------------------------------------------
# subcommands


def cmd_phantom(cfg: RunConfig, out_dir) -> int:
    v = cfg.values
    motion = _config_error(RigidTransform, v["motion_translation_mm"], v["motion_rotation_deg_z"])
    case = generate_phantom(phantom_spec(cfg, v["seed"], motion))
    write_case(case, out_dir)
    _write_resolved(cfg, out_dir)
    print(f"wrote phantom case to {out_dir}")
    return EXIT_OK


def cmd_labelgen(cfg: RunConfig, case_dir) -> int:
    case = read_case(case_dir)
    labels, samples = generate_labels(
        case.mask, case.fill, labelgen_config(cfg, cfg["seed"]), parse_roi(cfg["roi"])
    )
    save_labels(labels, os.path.join(case_dir, "labels.dlal"))
    samples.to_tsv(os.path.join(case_dir, "samples.tsv"))
    # the case directory already holds the phantom's resolved.cfg
    _write_resolved(cfg, case_dir, "labelgen.resolved.cfg")
    counts = samples.counts()
    print(f"labeled voxels: vessel={counts[1]} bone={counts[2]} soft={counts[3]}")
    return EXIT_OK


def _patch_source(case_dirs: List[str], arch: Architecture) -> PatchSource:
    if not case_dirs:
        raise DataError("no case directories found")
    fills, sets = [], []
    for d in case_dirs:
        fill = load_volume(os.path.join(d, "fill.dlav"))
        fills.append(fill)
        sets.append(LabeledVoxelSet.from_tsv(os.path.join(d, "samples.tsv"), fill.shape))
    return PatchSource(fills, sets, arch.patch_size, arch.n_slices)


def _case_dirs(root):
    return sorted(d for d in glob.glob(os.path.join(root, "*")) if os.path.isfile(os.path.join(d, "samples.tsv")))


def cmd_train(cfg: RunConfig, data_dir, out_path) -> int:
    arch = architecture(cfg)
    tcfg = train_config(cfg, cfg["seed"])
    train_src = _patch_source(_case_dirs(os.path.join(data_dir, "train")), arch)
    val_src = _patch_source(_case_dirs(os.path.join(data_dir, "val")), arch)
    params, history = train(tcfg, arch, train_src, val_src)
    out_dir = _parent(out_path)
    save_checkpoint(out_path, params, arch)
    _write_text(os.path.join(out_dir, "history.tsv"), history.to_tsv())
    _write_resolved(cfg, out_dir)
    print(f"stop_reason={history.stop_reason} best_iteration={history.best_iteration}")
    return EXIT_OK


def cmd_infer(cfg: RunConfig) -> int:
    params, arch = load_checkpoint(cfg["model"])
    fill = load_volume(cfg["fill"])
    roi = parse_roi(cfg["roi"])
    result = classify_volume(params, arch, fill, roi, workers=cfg["workers"], tile_size=cfg["tile_size"])
    _parent(cfg["out_labels"])
    save_labels(result.full_labels(fill.shape), cfg["out_labels"])
    if cfg["out_dla"]:
        save_volume(make_dla(fill, result.labels, result.probs.roi), cfg["out_dla"])
    _write_resolved(cfg, _parent(cfg["out_labels"]))
    print(f"throughput_voxels_per_s={result.voxels_per_s:.1f}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    pred = load_labels(cfg["pred"])
    truth = LabeledVoxelSet.from_tsv(cfg["truth"], pred.shape)
    table = confusion(pred, truth)
    text = case_metrics_tsv(table, metrics_from_table(table))
    if cfg["out"]:
        _write_resolved(cfg, _parent(cfg["out"]))
        _write_text(cfg["out"], text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_cohort(cfg: RunConfig) -> int:
    paths = sorted(glob.glob(os.path.join(cfg["cases"], "*", "metrics.tsv")))
    if len(paths) < 2:
        raise DataError(f"need at least two */metrics.tsv under {cfg['cases']}, found {len(paths)}")
    text = cohort_tsv({"test": summarize_cohort([read_case_metrics(p) for p in paths])})
    out = cfg["out"] or os.path.join(cfg["cases"], "cohort.tsv")
    _write_resolved(cfg, _parent(out))
    _write_text(out, text)
    sys.stdout.write(text)
    return EXIT_OK


def report_case(case: PhantomCase, dla_labels, roi: Optional[ROI], out_dir, vessel_threshold_hu, case_id=""):
    """Write DSA/DLA MIPs along every axis and the residual-artifact table."""
    os.makedirs(out_dir, exist_ok=True)
    region = roi.mask(case.fill.shape) if roi is not None else None
    dsa = subtract(case.fill, case.mask)
    if region is not None:
        dsa = dsa.with_values(np.where(region, dsa.values, np.float32(-1000.0)))
    roi_box = roi if roi is not None else ROI.full(case.fill.shape)
    dla = make_dla(case.fill, dla_labels[roi_box.slices], roi_box)
    for axis in ("x", "y", "z"):
        render_mip_pair(dsa, dla, axis, out_dir)
    cfg = LabelGenConfig(vessel_threshold_hu=vessel_threshold_hu)
    report = artifact_report(case, dla_labels, cfg, roi, case_id)
    _write_text(os.path.join(out_dir, "report.tsv"), report.to_tsv())
    return report


def cmd_report(cfg: RunConfig) -> int:
    case = read_case(cfg["case_dir"])
    if case.truth is None:
        raise DataError(f"{cfg['case_dir']} has no truth.dlal")
    roi = parse_roi(cfg["roi"])
    if cfg["pred"]:
        labels = load_labels(cfg["pred"])
    else:
        params, arch = load_checkpoint(cfg["model"])
        labels = classify_volume(params, arch, case.fill, roi, workers=cfg["workers"]).full_labels(case.fill.shape)
    report = report_case(case, labels, roi, cfg["out"], cfg["vessel_threshold_hu"], os.path.basename(cfg["case_dir"].rstrip("/")))
    _write_resolved(cfg, cfg["out"])
    sys.stdout.write(report.to_tsv())
    return EXIT_OK


# ---------------------------------------------------------------------------
# end to end


class _Stage:
    def __init__(self, name):
        self.name = name

    def __enter__(self):
        log.info("stage %s", self.name)
        self.start = time.perf_counter()
        return self

    def __exit__(self, kind, exc, tb):
        if exc is not None and not isinstance(exc, StageError):
            raise StageError(self.name, exc) from exc
        log.info("stage %s done in %.1f s", self.name, time.perf_counter() - self.start)
        return False


def run_end2end(cfg: RunConfig, out_dir) -> Dict[str, object]:
    """Phantoms, labels, training, inference, evaluation, cohort table and reports.

    Training and validation cases share the evaluation ROI for their labels.
    Test cases get a mask shifted by ``test_shift_voxels``; their reference
    labels come from the same label pipeline run against the unshifted mask,
    standing in for perfect manual artifact removal.
    """
    v = cfg.values
    seed = v["seed"]
    os.makedirs(out_dir, exist_ok=True)
    _write_resolved(cfg, out_dir)
    roi = parse_roi(v["roi"])
    arch = architecture(cfg)
    tcfg = train_config(cfg, derive_seed(seed, "train"))
    splits = {"train": v["n_train"], "val": v["n_val"], "test": v["n_test"]}
    if splits["train"] < 1 or splits["val"] < 1 or splits["test"] < 2:
        raise ConfigError("n_train and n_val must be >= 1 and n_test >= 2")

    with _Stage("phantom"):
        base = phantom_spec(cfg, 0)
        shift_mm = tuple(float(s) * base.spacing_mm for s in v["test_shift_voxels"])
        cases: Dict[str, List] = {}
        for split, n in splits.items():
            cases[split] = []
            for i in range(n):
                case_seed = derive_seed(seed, f"phantom/{split}/{i}")
                clean = generate_phantom(phantom_spec(cfg, case_seed))
                if split == "test":
                    moved = generate_phantom(phantom_spec(cfg, case_seed, RigidTransform(shift_mm)))
                    cases[split].append((f"{split}{i}", moved, clean))
                else:
                    cases[split].append((f"{split}{i}", clean, clean))
                write_case(cases[split][-1][1], os.path.join(out_dir, "cases", f"{split}{i}"))

    with _Stage("labelgen"):
        samples = {}
        for split, items in cases.items():
            for name, case, clean in items:
                lcfg = labelgen_config(cfg, derive_seed(seed, f"labelgen/{name}"))
                _, s = generate_labels(clean.mask, case.fill, lcfg, roi)
                s.to_tsv(os.path.join(out_dir, "cases", name, "samples.tsv"))
                samples[name] = s

    with _Stage("train"):
        def source(split):
            items = cases[split]
            return PatchSource([c.fill for _, c, _ in items], [samples[n] for n, _, _ in items],
                               arch.patch_size, arch.n_slices)
        params, history = train(tcfg, arch, source("train"), source("val"))
        save_checkpoint(os.path.join(out_dir, "model.dlam"), params, arch)
        _write_text(os.path.join(out_dir, "history.tsv"), history.to_tsv())

    predictions = {}
    with _Stage("infer"):
        rates = []
        for name, case, _ in cases["test"]:
            res = classify_volume(params, arch, case.fill, roi, workers=v["infer_workers"], tile_size=v["tile_size"])
            predictions[name] = res.full_labels(case.fill.shape)
            save_labels(predictions[name], os.path.join(out_dir, "cases", name, "pred.dlal"))
            rates.append(res.voxels_per_s)
        log.info("inference throughput %.1f voxels/s", float(np.mean(rates)))

    per_case = {}
    with _Stage("eval"):
        for name, _, _ in cases["test"]:
            table = confusion(predictions[name], samples[name])
            per_case[name] = metrics_from_table(table)
            _write_text(os.path.join(out_dir, "cases", name, "metrics.tsv"),
                        case_metrics_tsv(table, per_case[name]))

    with _Stage("cohort"):
        summary = summarize_cohort(list(per_case.values()))
        _write_text(os.path.join(out_dir, "summary.tsv"), cohort_tsv({"test": summary}))

    reports = {}
    with _Stage("report"):
        for name, case, _ in cases["test"]:
            reports[name] = report_case(case, predictions[name], roi, os.path.join(out_dir, "report", name),
                                        v["vessel_threshold_hu"], name)
        lines = ["case\tresidual_bone_voxels_dsa\tresidual_bone_voxels_dla\tratio"]
        for r in reports.values():
            lines.append(r.to_tsv().splitlines()[1])
        _write_text(os.path.join(out_dir, "artifacts.tsv"), "\n".join(lines) + "\n")

    return {"per_case": per_case, "summary": summary, "reports": reports, "history": history}


def cmd_end2end(cfg: RunConfig, out_dir) -> int:
    result = run_end2end(cfg, out_dir)
    with open(os.path.join(out_dir, "summary.tsv"), encoding="utf-8") as fh:
        sys.stdout.write(fh.read())
    for r in result["reports"].values():
        log.info("%s residual bone voxels: dsa=%d dla=%d", r.case_id, r.residual_bone_voxels_dsa,
                 r.residual_bone_voxels_dla)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _common(p, config_flag="--config"):
    p.add_argument(config_flag, dest="config", help="key = value configuration file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one configuration key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dla", description="Deep-learning angiography on synthetic phantoms.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic mask/fill case")
    _common(p, "--spec")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("labelgen", help="derive training labels for a case")
    _common(p)
    p.add_argument("--case-dir", required=True)

    p = sub.add_parser("train", help="train the classifier")
    _common(p)
    p.add_argument("--data", required=True, help="directory with train/ and val/ case directories")
    p.add_argument("--out", required=True, help="checkpoint path")

    p = sub.add_parser("infer", help="classify a fill volume")
    _common(p)
    p.add_argument("--model")
    p.add_argument("--fill")
    p.add_argument("--roi", help="x0,x1,y0,y1,z0,z1")
    p.add_argument("--out-labels", dest="out_labels")
    p.add_argument("--out-dla", dest="out_dla")
    p.add_argument("--workers", type=str)
    p.add_argument("--tile-size", dest="tile_size", type=str)

    p = sub.add_parser("eval", help="score predicted labels against a reference sample")
    _common(p)
    p.add_argument("--pred")
    p.add_argument("--truth")
    p.add_argument("--out")

    p = sub.add_parser("cohort", help="aggregate per-case metrics")
    _common(p)
    p.add_argument("--cases")
    p.add_argument("--out")

    p = sub.add_parser("report", help="MIP images and residual-artifact counts for one case")
    _common(p)
    p.add_argument("--case-dir", dest="case_dir")
    p.add_argument("--model")
    p.add_argument("--out")
    p.add_argument("--roi")
    p.add_argument("--pred")
    p.add_argument("--workers", type=str)

    p = sub.add_parser("end2end", help="run the whole phantom experiment")
    _common(p)
    p.add_argument("--out-dir", required=True)
    return parser


_FLAG_KEYS = {
    "infer": ("model", "fill", "roi", "out_labels", "out_dla", "workers", "tile_size"),
    "eval": ("pred", "truth", "out"),
    "cohort": ("cases", "out"),
    "report": ("case_dir", "model", "out", "roi", "pred", "workers"),
}


def _dispatch(args) -> int:
    flags = {k: getattr(args, k) for k in _FLAG_KEYS.get(args.command, ())}
    cfg = parse_config(args.command, args.config, args.overrides, flags)
    if args.command == "phantom":
        return cmd_phantom(cfg, args.out_dir)
    if args.command == "labelgen":
        return cmd_labelgen(cfg, args.case_dir)
    if args.command == "train":
        return cmd_train(cfg, args.data, args.out)
    if args.command == "end2end":
        return cmd_end2end(cfg, args.out_dir)
    return {"infer": cmd_infer, "eval": cmd_eval, "cohort": cmd_cohort, "report": cmd_report}[args.command](cfg)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return _dispatch(args)
    except StageError as exc:
        print(f"dla {args.command}: {exc}", file=sys.stderr)
        return _exit_code(exc.cause)
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes below
        code = _exit_code(exc)
        if code is None:
            raise
        print(f"dla {args.command}: {exc}", file=sys.stderr)
        return code


def _exit_code(exc) -> Optional[int]:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, NumericalError):
        return EXIT_NUMERICAL
    if isinstance(exc, (DataError, OSError)):
        return EXIT_DATA
    return None


if __name__ == "__main__":
    sys.exit(main())
