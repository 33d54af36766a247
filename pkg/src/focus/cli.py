"""Command-line entry point: ``focus {synth,sfm,optim,eval,bench-views}``.

Exit codes: 0 success, 1 domain error or missing path, 2 usage or file-format
error. Progress goes to stderr; results only to the files named on the
command line.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shlex
import shutil
import subprocess
import sys
from pathlib import Path
from typing import List, Optional

from .errors import FocusError, FormatError

log = logging.getLogger("focus")

DEFAULT_SEED = 42
POISSON_ENV = "FOCUS_POISSON_CMD"


def _int_list(text: str) -> List[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not vals:
        raise argparse.ArgumentTypeError("expected at least one integer")
    return vals


def _epochs(text: str):
    vals = _int_list(text)
    if len(vals) != 2:
        raise argparse.ArgumentTypeError("--epochs takes two counts, e.g. 500,500")
    return tuple(vals)


def _resolution(text: str):
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WIDTHxHEIGHT, got {text!r}")
    return w, h


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=DEFAULT_SEED, help="RNG seed (default: %(default)s)")
    common.add_argument("--threads", type=int, default=None,
                        help="worker threads (default: available cores); results do not depend on it")
    common.add_argument("-v", "--verbose", action="count", default=0, help="more progress output on stderr")
    common.add_argument("--dump-config", metavar="PATH", default=None,
                        help="write the resolved run configuration as JSON to PATH (- for stdout)")
    common.add_argument("--dry-run", action="store_true", help="resolve the configuration and exit")

    p = argparse.ArgumentParser(prog="focus", description="Multi-view foot reconstruction from TOC predictions.",
                                formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    sub = p.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    fmt = argparse.ArgumentDefaultsHelpFormatter

    s = sub.add_parser("synth", parents=[common], formatter_class=fmt, help="render a synthetic scene")
    s.add_argument("--views", type=int, default=10, help="number of ring cameras")
    s.add_argument("--noise", type=float, default=0.0, help="base TOC noise std (TOC units)")
    s.add_argument("--noise-range", type=float, default=0.0, help="spatial spread added on top of --noise")
    s.add_argument("--normal-noise", type=float, default=0.0, help="std of the perturbation of predicted normals")
    s.add_argument("--model-seed", type=int, default=0, help="seed of the procedural deformable model")
    s.add_argument("--resolution", type=_resolution, default="480x640", help="image size WIDTHxHEIGHT")
    s.add_argument("--elevation", type=float, default=40.0, help="camera elevation (degrees)")
    s.add_argument("--out", required=True, help="output scene directory")

    s = sub.add_parser("sfm", parents=[common], formatter_class=fmt, help="correspondence triangulation")
    s.add_argument("--scene", required=True, help="scene directory or manifest")
    s.add_argument("--out", required=True, help="oriented point cloud PLY")
    s.add_argument("--samples", type=int, default=3000, help="samples per image")
    s.add_argument("--threshold", type=float, default=0.002, help="TOC match threshold (l2)")
    s.add_argument("--subpixel-factor", type=int, default=8, help="subpixel upscaling factor")
    s.add_argument("--reproj-threshold", type=float, default=3.0, help="max mean reprojection error (px)")
    s.add_argument("--no-subpixel", action="store_true", help="keep integer-pixel matches")
    s.add_argument("--no-normal-aggregation", action="store_true", help="use the source view's normal only")

    s = sub.add_parser("optim", parents=[common], formatter_class=fmt, help="fit the deformable model")
    s.add_argument("--scene", required=True, help="scene directory or manifest")
    s.add_argument("--out", required=True, help="fitted mesh PLY (params JSON written alongside)")
    s.add_argument("--samples", type=int, default=3000, help="samples per image")
    s.add_argument("--epochs", type=_epochs, default="500,500", help="epochs of stage 1 and stage 2")
    s.add_argument("--lr", type=float, default=0.001, help="Adam learning rate")
    s.add_argument("--no-uncertainty", action="store_true", help="unit pixel weights instead of propagated sigma")

    s = sub.add_parser("eval", parents=[common], formatter_class=fmt, help="score a reconstruction")
    s.add_argument("--pred", required=True, help="predicted mesh or oriented cloud PLY")
    s.add_argument("--gt", required=True, help="ground-truth mesh PLY")
    s.add_argument("--crop", type=float, default=100.0, help="crop height (mm); negative disables")
    s.add_argument("--samples", type=int, default=10000, help="surface samples per mesh")
    s.add_argument("--out", default="report.json", help="JSON report path")

    s = sub.add_parser("bench-views", parents=[common], formatter_class=fmt, help="quality vs number of views")
    s.add_argument("--scene", required=True, help="scene directory or manifest")
    s.add_argument("--method", choices=["sfm", "optim"], required=True)
    s.add_argument("--counts", type=_int_list, default="3,5,10,15,20", help="view counts")
    s.add_argument("--crop", type=float, default=100.0, help="crop height (mm)")
    s.add_argument("--samples", type=int, default=10000, help="surface samples per mesh")
    s.add_argument("--no-subpixel", action="store_true")
    s.add_argument("--no-normal-aggregation", action="store_true")
    s.add_argument("--no-uncertainty", action="store_true")
    s.add_argument("--epochs", type=_epochs, default="500,500")
    s.add_argument("--out", required=True, help="CSV path")
    return p


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------
def sfm_config(args):
    from .sfm import SfmConfig

    return SfmConfig(
        samples_per_image=getattr(args, "samples", 3000) if args.command == "sfm" else 3000,
        match_threshold=getattr(args, "threshold", 0.002),
        subpixel_factor=getattr(args, "subpixel_factor", 8),
        reproj_threshold=getattr(args, "reproj_threshold", 3.0),
        seed=args.seed,
        subpixel=not getattr(args, "no_subpixel", False),
        normal_aggregation=not getattr(args, "no_normal_aggregation", False),
    )


def optim_config(args):
    from .optim import OptimConfig

    return OptimConfig(
        samples_per_image=getattr(args, "samples", 3000) if args.command == "optim" else 3000,
        epochs=getattr(args, "epochs", (500, 500)),
        lr=getattr(args, "lr", 0.001),
        use_uncertainty=not getattr(args, "no_uncertainty", False),
        seed=args.seed,
    )


def run_config(args) -> dict:
    """Everything a run depends on, as plain JSON-able data."""
    cfg = {"command": args.command, "seed": args.seed, "threads": args.threads, "verbosity": args.verbose}
    if args.command == "synth":
        cfg["synth"] = {
            "views": args.views, "noise": {"sigma_base": args.noise, "sigma_range": args.noise_range,
                                           "normal_sigma": args.normal_noise},
            "model_seed": args.model_seed, "resolution": list(args.resolution), "elevation_deg": args.elevation,
        }
    if args.command in ("sfm", "bench-views"):
        cfg["sfm"] = sfm_config(args).to_dict()
        cfg["poisson_sidecar"] = sfm_config(args).poisson_sidecar()
    if args.command in ("optim", "bench-views"):
        cfg["optim"] = optim_config(args).to_dict()
    if args.command in ("eval", "bench-views"):
        cfg["eval"] = {"crop_mm": args.crop, "samples": args.samples}
    if args.command == "bench-views":
        cfg["bench"] = {"method": args.method, "counts": args.counts}
    return cfg


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------
def _cmd_synth(args, threads):
    from .synth import NoiseSpec, SceneSpec, generate_scene

    spec = SceneSpec(
        model_seed=args.model_seed,
        n_views=args.views,
        resolution=args.resolution,
        noise=NoiseSpec(args.noise, args.noise_range, args.normal_noise),
        seed=args.seed,
        elevation_deg=args.elevation,
    )
    log.info("rendering %d views", args.views)
    generate_scene(spec, args.out, threads=threads)
    log.info("scene written to %s", args.out)


def _run_poisson(ply: Path, sidecar: Path) -> None:
    cmd = os.environ.get(POISSON_ENV)
    if not cmd:
        log.info("%s not set; leaving meshing to the user", POISSON_ENV)
        return
    argv = shlex.split(cmd)
    if not argv or shutil.which(argv[0]) is None:
        log.warning("mesher %r from %s not found; skipping surface reconstruction", cmd, POISSON_ENV)
        return
    out = ply.with_name(ply.stem + ".mesh.ply")
    try:
        subprocess.run(argv + [str(ply), str(sidecar), str(out)], check=True)
        log.info("mesh written to %s", out)
    except (OSError, subprocess.CalledProcessError) as exc:
        log.warning("external mesher failed: %s", exc)


def _cmd_sfm(args, threads):
    from .sfm import run_sfm, sidecar_path

    res = run_sfm(args.scene, args.out, sfm_config(args), threads=threads)
    log.info("sfm: %s -> %d points", res.stats, len(res.cloud))
    _run_poisson(Path(args.out), sidecar_path(args.out))


def _cmd_optim(args, threads):
    from .optim import fit, params_path

    if not Path(args.scene).exists():
        raise FileNotFoundError(f"scene not found: {args.scene}")
    res = fit(args.scene, args.out, optim_config(args),
              progress=lambda e, loss: log.info("epoch %d loss %.6g", e, loss))
    log.info("optim: final mean pixel error %.4f px; params in %s", res.mean_pixel_error, params_path(args.out))


def _cmd_eval(args, threads):
    from . import io
    from .evaluate import evaluate

    pred = io.read_ply(args.pred)
    gt = io.read_mesh(args.gt)
    crop = None if args.crop is not None and args.crop < 0 else args.crop
    rep = evaluate(pred, gt, crop, args.samples, args.seed)
    report = {"pred": str(args.pred), "gt": str(args.gt), "crop_mm": crop, "samples": args.samples,
              "seed": args.seed, "kind": "cloud" if rep.coverage is not None else "mesh", **rep.to_dict()}
    with open(args.out, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    log.info("chamfer mean %.4f mm, normal mean %.3f deg", rep.chamfer["mean"], rep.normal["mean"])


def _cmd_bench(args, threads):
    from .evaluate import bench_views, write_bench_csv

    rows = bench_views(args.scene, args.method, args.counts, sfm_config(args), optim_config(args),
                       args.crop, args.samples, args.seed, threads)
    write_bench_csv(args.out, rows)
    for r in rows:
        log.info("%s k=%d: %s", args.method, r["views"], r["status"])


COMMANDS = {"synth": _cmd_synth, "sfm": _cmd_sfm, "optim": _cmd_optim, "eval": _cmd_eval,
            "bench-views": _cmd_bench}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    level = logging.DEBUG if args.verbose else logging.INFO
    logging.basicConfig(level=level, stream=sys.stderr, format="focus %(levelname)s: %(message)s", force=True)
    threads = args.threads if args.threads is not None else (os.cpu_count() or 1)
    if threads < 1:
        print("focus: error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        cfg = run_config(args)
    except ValueError as exc:
        print(f"focus {args.command}: invalid option: {exc}", file=sys.stderr)
        return 2
    if args.dump_config:
        text = json.dumps(cfg, indent=2, sort_keys=True) + "\n"
        if args.dump_config == "-":
            sys.stdout.write(text)
        else:
            Path(args.dump_config).write_text(text)
    if args.dry_run:
        return 0
    try:
        COMMANDS[args.command](args, threads)
    except FormatError as exc:
        print(f"focus {args.command}: format error: {exc}", file=sys.stderr)
        return 2
    except FocusError as exc:
        print(f"focus {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, NotADirectoryError) as exc:
        print(f"focus {args.command}: path error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"focus {args.command}: invalid value: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"focus {args.command}: I/O error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
