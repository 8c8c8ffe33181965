"""Command-line front end: ``stickcalib generate | calibrate | evaluate``.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 assertion gate.

Seed precedence (highest first): ``--seed`` flag, the ``pipeline.seed`` entry
of ``--config``, the ``STICKCALIB_SEED`` environment variable, then 0.
Other configuration values: command-line flags override the config file,
which overrides the built-in defaults.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from . import dataset as dsio
from . import evaluation as ev
from . import pipeline as pl
from . import synth
from .errors import CalibrationError

log = logging.getLogger("stickcalib")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE, EXIT_ASSERT = 0, 1, 2, 3


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# run manifest


def _hash_config(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()[:16]


def manifest_path(out: Path) -> Path:
    return out / "run_manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")


def write_run_manifest(out: Path, command: str, config: dict, inputs, seed, timings: dict) -> Path:
    doc = {
        "tool": "stickcalib",
        "version": __version__,
        "command": command,
        "config_hash": _hash_config(config),
        "config": config,
        "inputs": [str(p) for p in inputs],
        "output": str(out),
        "seed": seed,
        "timings_s": timings,
    }
    path = manifest_path(out)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str))
    return path


def default_seed() -> int:
    env = os.environ.get("STICKCALIB_SEED")
    if env is None or env == "":
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"STICKCALIB_SEED must be an integer, got {env!r}")


# --------------------------------------------------------------------------
# generate


def cmd_generate(args) -> int:
    out = Path(args.output)
    seed = args.seed if args.seed is not None else default_seed()
    t0 = time.perf_counter()
    if args.suite:
        if args.suite not in synth.PROTOCOLS:
            raise UsageError(f"unknown suite {args.suite!r}; choose from {sorted(synth.PROTOCOLS)}")
        protocol = replace(synth.PROTOCOLS[args.suite], base_seed=seed)
        synth.generate_suite(protocol, out, include_gt=not args.no_gt, jobs=args.jobs)
        config = {"suite": args.suite, "protocol": asdict(protocol)}
    else:
        spec = synth.SceneSpec(
            sport=args.sport, num_cameras=args.cameras, layout=args.layout, num_frames=args.frames,
            noise_sigma_px=args.noise_px, occlusion_rate=args.occlusion, seed=seed,
        )
        try:
            gt = synth.generate(spec)
        except synth.InvalidSpec as exc:
            raise UsageError(str(exc))
        synth.emit_dataset(gt, out, include_gt=not args.no_gt)
        config = synth.spec_to_dict(spec)
    write_run_manifest(out, "generate", config, [], seed, {"total": time.perf_counter() - t0})
    print(f"wrote {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# calibrate


def load_config(path: Optional[str]) -> dict:
    if not path:
        return {}
    doc = dsio.read_json(path)
    unknown = set(doc) - {"ransac", "solver_stage1", "solver_stage3", "loss", "pipeline"}
    if unknown:
        raise UsageError(f"unknown config sections: {sorted(unknown)}")
    return doc


def build_pipeline_config(args, file_cfg: dict, height_prior: Optional[float] = None) -> pl.PipelineConfig:
    doc = json.loads(json.dumps(file_cfg))  # deep copy
    pipe = doc.setdefault("pipeline", {})
    if args.mode is not None:
        pipe["mode"] = args.mode
    if args.seed is not None:
        pipe["seed"] = args.seed
    elif "seed" not in pipe:
        pipe["seed"] = default_seed()
    if args.height_prior_m is not None:
        pipe["height_prior_m"] = args.height_prior_m
    elif height_prior is not None and pipe.get("height_prior_m") is None:
        pipe["height_prior_m"] = height_prior
    try:
        return pl.PipelineConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}")


def guessed_height(true_height: float, offset: float, seed: int) -> float:
    """True height shifted by ``offset`` with a sign drawn per trial."""
    if offset == 0:
        return true_height
    sign = 1.0 if np.random.default_rng(seed).random() < 0.5 else -1.0
    return true_height + sign * offset


def error_path(calib_path: Path) -> Path:
    return calib_path.with_name(calib_path.name.replace(".calib.json", ".error.json"))


def _calibrate_one(task) -> dict:
    """Calibrate one suite cell; a pipeline failure is recorded next to the
    expected output instead of aborting the whole suite."""
    ds_path, out_path, cfg_dict = task
    out_path = Path(out_path)
    cfg = pl.PipelineConfig.from_dict(cfg_dict)
    ds = dsio.load(ds_path)
    t0 = time.perf_counter()
    err = error_path(out_path)
    try:
        result = pl.run(ds.obs, ds.stick, cfg)
    except CalibrationError as exc:
        out_path.unlink(missing_ok=True)
        stage = getattr(exc, "stage", None)
        err.write_text(json.dumps({"stage": stage, "error": str(exc)}, indent=2, sort_keys=True))
        return {"failed": True, "stage": stage, "total": time.perf_counter() - t0}
    err.unlink(missing_ok=True)
    result.save(out_path)
    timings = dict(result.timings)
    timings["total"] = time.perf_counter() - t0
    return timings


def _is_suite(path: Path) -> bool:
    return path.is_dir() and (path / "manifest.json").exists()


def cmd_calibrate(args) -> int:
    src = Path(args.dataset)
    out = Path(args.output)
    file_cfg = load_config(args.config)
    if _is_suite(src):
        manifest = json.loads((src / "manifest.json").read_text())
        out.mkdir(parents=True, exist_ok=True)
        tasks, names = [], []
        base_cfg = build_pipeline_config(args, file_cfg, height_prior=1.0)  # validated once
        for cell in manifest["cells"]:
            h = None
            if base_cfg.mode is pl.Mode.HUMAN_ONLY and args.height_prior_m is None:
                h = guessed_height(cell["standing_height_m"], args.height_offset_m, cell["spec"]["seed"])
            cfg = build_pipeline_config(args, file_cfg, height_prior=h)
            tasks.append((str(src / cell["file"]), str(out / f"{cell['name']}.calib.json"), cfg.to_dict()))
            names.append(cell["name"])
        t0 = time.perf_counter()
        if args.jobs > 1:
            from concurrent.futures import ProcessPoolExecutor

            with ProcessPoolExecutor(max_workers=args.jobs) as pool:
                timings = list(pool.map(_calibrate_one, tasks))
        else:
            timings = [_calibrate_one(t) for t in tasks]
        per_cell = dict(zip(names, timings))
        per_cell["total"] = time.perf_counter() - t0
        write_run_manifest(out, "calibrate", base_cfg.to_dict(), [src], base_cfg.seed, per_cell)
        failed = [n for n, t in zip(names, timings) if t.get("failed")]
        print(f"calibrated {len(tasks) - len(failed)} of {len(tasks)} datasets into {out}")
        for n in failed:
            print(f"stickcalib: {n} failed, see {n}.error.json", file=sys.stderr)
        return EXIT_FAILURE if failed else EXIT_OK

    cfg = build_pipeline_config(args, file_cfg)  # human-only without a height prior is a usage error
    ds = dsio.load(src)
    t0 = time.perf_counter()
    result = pl.run(ds.obs, ds.stick, cfg)
    result.save(out)
    timings = dict(result.timings)
    timings["total"] = time.perf_counter() - t0
    write_run_manifest(out, "calibrate", cfg.to_dict(), [src], cfg.seed, timings)
    print(f"wrote {out} (scale {result.scale:.6f})")
    return EXIT_OK


# --------------------------------------------------------------------------
# evaluate


def parse_assert(text: Optional[str]) -> dict:
    if not text:
        return {}
    out = {}
    for part in text.split(","):
        if "=" not in part:
            raise UsageError(f"bad --assert item {part!r}; expected name=value")
        k, v = part.split("=", 1)
        k = k.strip()
        if k not in ("rot_deg", "trans_m"):
            raise UsageError(f"unknown --assert metric {k!r}; use rot_deg or trans_m")
        try:
            out[k] = float(v)
        except ValueError:
            raise UsageError(f"bad --assert value {v!r}")
    return out


def _evaluate_file(calib_path, ds_path, use_centers: bool, meta: dict) -> ev.CalibrationReport:
    ds = dsio.load(ds_path)
    if ds.gt_rig is None:
        raise CalibrationError(f"{ds_path}: dataset has no ground-truth extrinsics (gt_extrinsics)")
    doc = pl.load_calibration(calib_path)
    try:
        rig = pl.rig_from_calibration(doc, ds.obs.intrinsics)
    except (KeyError, TypeError, ValueError) as exc:
        raise dsio.DatasetFormatError(f"{calib_path}: malformed calibration file: {exc!r}") from exc
    meta = dict(meta, num_cameras=ds.obs.num_cameras, mode=doc.get("mode"))
    return ev.evaluate_rigs(rig, ds.gt_rig, use_centers, meta)


def cmd_evaluate(args) -> int:
    calib, data = Path(args.calibration), Path(args.dataset)
    out = Path(args.output)
    thresholds = parse_assert(args.assert_)
    use_centers = not args.align_raw_t
    failed: list = []
    t0 = time.perf_counter()
    if _is_suite(data):
        if not calib.is_dir():
            raise UsageError("suite evaluation needs a directory of calibrations")
        manifest = json.loads((data / "manifest.json").read_text())
        out.mkdir(parents=True, exist_ok=True)
        reports = []
        for cell in manifest["cells"]:
            meta = {"name": cell["name"], "sport": cell["spec"]["sport"],
                    "noise_sigma_px": cell["spec"]["noise_sigma_px"], "layout": cell["spec"]["layout"]}
            calib_file = calib / f"{cell['name']}.calib.json"
            if not calib_file.exists() and error_path(calib_file).exists():
                failed.append(cell["name"])  # calibration failed; reported, not scored
                continue
            rep = _evaluate_file(calib_file, data / cell["file"], use_centers, meta)
            (out / f"{cell['name']}.report.json").write_text(rep.to_json())
            reports.append(rep)
        summary = ev.aggregate(reports)
        by_c = ev.group_by(reports, "num_cameras")
        by_n = ev.group_by(reports, "noise_sigma_px")
        doc = {"summary": summary,
               "failed_cells": failed,
               "by_num_cameras": {str(k): v for k, v in by_c.items()},
               "by_noise_sigma_px": {str(k): v for k, v in by_n.items()}}
        (out / "summary.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
        (out / "by_num_cameras.csv").write_text(ev.grouped_csv(by_c, "num_cameras"))
        (out / "by_noise.csv").write_text(ev.grouped_csv(by_n, "noise_sigma_px"))
        per_cam = "name,num_cameras,noise_sigma_px,camera,rot_err_deg,trans_err_m\n" + "".join(
            f"{r.meta['name']},{r.meta['num_cameras']},{r.meta['noise_sigma_px']},{i},{a!r},{b!r}\n"
            for r in reports for i, (a, b) in enumerate(zip(r.rot_err_deg, r.trans_err_m))
        )
        (out / "per_camera.csv").write_text(per_cam)
        table = "\n\n".join([ev.grouped_table(by_c, "num_cameras"), ev.grouped_table(by_n, "noise_sigma_px")])
        (out / "summary.txt").write_text(table + "\n")
        print(table)
        if reports:
            print(f"overall: rot mean {summary['rot_mean_deg']:.5f} deg, trans mean {summary['trans_mean_m']:.6f} m")
        if failed:
            print(f"{len(failed)} cells failed to calibrate: {', '.join(failed)}")
    else:
        rep = _evaluate_file(calib, data, use_centers, {"name": data.stem})
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(rep.to_json())
        out.with_suffix(".csv").write_text(rep.to_csv())
        summary = rep.summary()
        print(rep.to_table())
    write_run_manifest(out, "evaluate", {"assert": thresholds, "align": "centers" if use_centers else "t"},
                       [calib, data], None, {"total": time.perf_counter() - t0})
    violations = ev.check_thresholds(summary, thresholds) if "rot_mean_deg" in summary else (
        ["no calibrated cells to score"] if thresholds else [])
    if failed and thresholds:
        violations.append(f"{len(failed)} cells failed to calibrate")
    for v in violations:
        print(f"ASSERTION FAILED: {v}", file=sys.stderr)
    return EXIT_ASSERT if violations else EXIT_OK


# --------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit with EXIT_USAGE (argparse's default is also 2)
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stickcalib", description="Metric multi-camera extrinsic calibration from a person and a stick.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic dataset or a benchmark suite")
    g.add_argument("-o", "--output", required=True, help="dataset file, or directory with --suite")
    g.add_argument("--suite", help=f"protocol name: {', '.join(sorted(synth.PROTOCOLS))}")
    g.add_argument("--sport", default="baseball", choices=synth.SPORTS)
    g.add_argument("--cameras", type=int, default=5)
    g.add_argument("--layout", default="semi_spherical", choices=("semi_spherical", "random"))
    g.add_argument("--frames", type=int, default=120)
    g.add_argument("--noise-px", type=float, default=1.0)
    g.add_argument("--occlusion", type=float, default=0.1)
    g.add_argument("--seed", type=int, help="default: $STICKCALIB_SEED or 0")
    g.add_argument("--no-gt", action="store_true", help="strip ground-truth fields")
    g.add_argument("--jobs", type=int, default=1)
    g.set_defaults(func=cmd_generate)

    c = sub.add_parser("calibrate", help="run the calibration pipeline on a dataset or suite directory")
    c.add_argument("dataset")
    c.add_argument("-o", "--output", required=True)
    c.add_argument("--mode", choices=[m.value for m in pl.Mode])
    c.add_argument("--config", help="JSON with sections ransac, solver_stage1, solver_stage3, loss, pipeline")
    c.add_argument("--height-prior-m", type=float, help="height prior for human-only mode")
    c.add_argument("--height-offset-m", type=float, default=0.0,
                   help="suite human-only runs: perturb the true height by this much with a random sign")
    c.add_argument("--seed", type=int, help="RANSAC seed (default: config, then $STICKCALIB_SEED, then 0)")
    c.add_argument("--jobs", type=int, default=1)
    c.set_defaults(func=cmd_calibrate)

    e = sub.add_parser("evaluate", help="score calibrations against ground truth")
    e.add_argument("calibration", help="calibration file or directory")
    e.add_argument("dataset", help="dataset file with ground truth, or suite directory")
    e.add_argument("-o", "--output", required=True, help="report file, or directory for suites")
    e.add_argument("--assert", dest="assert_", metavar="rot_deg=X,trans_m=Y",
                   help="fail with exit code 3 when a mean error exceeds its limit")
    e.add_argument("--align-raw-t", action="store_true", help="align raw translations instead of camera centers")
    e.set_defaults(func=cmd_evaluate)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"stickcalib: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CalibrationError, dsio.DatasetFormatError, OSError, ValueError) as exc:
        print(f"stickcalib: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
