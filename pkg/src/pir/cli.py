"""Command-line entry point: ``pir <verb> ...``.

Exit codes: 0 success, 2 configuration or input error, 3 missing artifact,
4 numeric failure (non-finite values, or a failed gradient check).
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from pir.autodiff import checkpoint
from pir.camera import read_cameras
from pir.config import DEFAULTS, apply_assignments, load_config
from pir.errors import ConfigError, MissingArtifactError, NumericError, PirError
from pir.report import format_tsv, write_tsv

log = logging.getLogger("pir")


# ---------------------------------------------------------------------------
# shared option handling
# ---------------------------------------------------------------------------
def _workspace(args):
    from pir.pipeline import Workspace

    return Workspace(Path(args.workdir))


def _config(args):
    """--config file, else the workspace's saved config, else defaults; then --set overrides."""
    if args.config:
        cfg = load_config(args.config)
    else:
        saved = Path(args.workdir) / "config.cfg"
        cfg = load_config(saved) if saved.exists() else DEFAULTS
    return apply_assignments(cfg, args.set or [])


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--workdir", default="pir-work", help="workspace directory (default: pir-work)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one configuration key (repeatable)")


def _print_tsv(header, rows) -> None:
    sys.stdout.write(format_tsv(header, rows))


# ---------------------------------------------------------------------------
# verbs
# ---------------------------------------------------------------------------
def cmd_gen_scene(args) -> int:
    from pir.pipeline import write_scene

    cfg, ws = _config(args), _workspace(args)
    ws.root.mkdir(parents=True, exist_ok=True)
    scene = write_scene(cfg, ws)
    _print_tsv(["frames", "train_frames", "size", "scene_dir"],
               [(scene.n_frames, scene.train_frames, cfg.scene_size, ws.scene_dir)])
    return 0


def cmd_audio2exp_train(args) -> int:
    from pir.pipeline import TrainReport, ensure_scene, run_audio_stage, write_train_report

    cfg, ws = _config(args), _workspace(args)
    ws.root.mkdir(parents=True, exist_ok=True)
    report = TrainReport()
    run_audio_stage(cfg, ws, ensure_scene(cfg, ws), report)
    write_train_report(ws, report)
    _print_tsv(["stage", "metric", "value"], report.rows)
    return 0


def cmd_audio2exp_infer(args) -> int:
    from pir.audio2exp import infer
    from pir.pipeline import PER_FRAME, load_audio2exp

    cfg = _config(args)
    model, z_id = load_audio2exp(args.ckpt, cfg)
    path = Path(args.features)
    if not path.exists():
        raise MissingArtifactError(f"feature file {path} not found")
    tensors, _ = checkpoint.load(path)
    if "features" not in tensors:
        raise ConfigError(f"{path} holds no 'features' tensor")
    feats = tensors["features"]
    n_frames = (len(feats) + PER_FRAME - 1) // PER_FRAME
    expressions = infer(model, feats, z_id, n_frames, PER_FRAME)
    if not np.all(np.isfinite(expressions)):
        raise NumericError("non-finite expression predictions")
    if args.out:
        checkpoint.save(args.out, {"expressions": expressions}, {"source": str(path)})
    _print_tsv(["frame"] + [f"a{j}" for j in range(expressions.shape[1])],
               [(i, *map(float, row)) for i, row in enumerate(expressions)])
    return 0


def cmd_field_train(args) -> int:
    from pir.pipeline import TrainReport, ensure_scene, run_field_stage, write_train_report

    cfg, ws = _config(args), _workspace(args)
    ws.root.mkdir(parents=True, exist_ok=True)
    report = TrainReport()
    run_field_stage(cfg, ws, ensure_scene(cfg, ws), report)
    write_train_report(ws, report)
    _print_tsv(["stage", "metric", "value"], report.rows)
    return 0


def cmd_render_train(args) -> int:
    from pir.pipeline import (TrainReport, ensure_scene, load_field, run_render_stage,
                              write_train_report)

    cfg, ws = _config(args), _workspace(args)
    scene = ensure_scene(cfg, ws)
    report = TrainReport()
    run_render_stage(cfg, ws, scene, load_field(ws, cfg), report)
    write_train_report(ws, report)
    _print_tsv(["stage", "metric", "value"], report.rows)
    return 0


def cmd_render_infer(args) -> int:
    from pir.imageio import write_ppm
    from pir.inpaint import render_frame
    from pir.pipeline import frame_name, load_field, load_render
    from pir.scene import load_scene

    cfg, ws = _config(args), _workspace(args)
    net, _ = load_render(args.ckpt, cfg)
    renderer = load_field(args.field or Path(args.ckpt).with_name("field.pirk"), cfg)
    scene = load_scene(args.scene or ws.scene_dir)
    cam_path, expr_path = Path(args.camera), Path(args.expr)
    for p in (cam_path, expr_path):
        if not p.exists():
            raise MissingArtifactError(f"{p} not found")
    cameras = read_cameras(cam_path)
    tensors, _ = checkpoint.load(expr_path)
    if "expressions" not in tensors:
        raise ConfigError(f"{expr_path} holds no 'expressions' tensor")
    expressions = tensors["expressions"]
    if len(cameras) != len(expressions):
        raise ConfigError(f"{len(cameras)} cameras but {len(expressions)} expression rows")
    start = scene.train_frames if args.start is None else args.start
    if start < 0 or start + len(cameras) > scene.n_frames:
        raise ConfigError(f"frames {start}..{start + len(cameras) - 1} exceed the scene")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for j, (cam, expr) in enumerate(zip(cameras, expressions)):
        i = start + j
        frame = render_frame(net, renderer, scene.images[i], scene.masks[i], scene.z_id, expr,
                             cam.K, cam.pose)
        if not np.all(np.isfinite(frame)):
            raise NumericError(f"non-finite output at frame {i}")
        write_ppm(out / frame_name(i), np.clip(frame, 0.0, 1.0))
        rows.append((i, str(out / frame_name(i))))
    _print_tsv(["frame", "path"], rows)
    return 0


def cmd_train_all(args) -> int:
    from pir.pipeline import train_all

    report = train_all(_config(args), _workspace(args))
    _print_tsv(["stage", "metric", "value"], report.rows)
    return 0


def cmd_run(args) -> int:
    from pir.pipeline import run_end_to_end

    rep = run_end_to_end(_config(args), _workspace(args), args.out)
    rows = [(f, p, s) for f, p, s in zip(rep.frames, rep.psnr, rep.ssim)]
    _print_tsv(["frame", "psnr", "ssim"], rows + [("mean", rep.mean_psnr, rep.mean_ssim)])
    return 0


def cmd_ablate_k(args) -> int:
    from pir.ablation import ablate_context_length, write_context_report
    from pir.pipeline import ensure_scene

    cfg, ws = _config(args), _workspace(args)
    ws.root.mkdir(parents=True, exist_ok=True)
    rows = ablate_context_length(cfg, ensure_scene(cfg, ws))
    path = write_context_report(args.out or ws.root, rows)
    sys.stdout.write(path.read_text())
    return 0 if all(r.probe_ok for r in rows) else 4


def cmd_ablate_jitter(args) -> int:
    from pir.ablation import ablate_jitter, write_jitter_report
    from pir.scene import load_scene

    cfg, ws = _config(args), _workspace(args)
    rows = ablate_jitter(cfg, ws, load_scene(ws.scene_dir))
    path = write_jitter_report(args.out or ws.root, rows)
    sys.stdout.write(path.read_text())
    return 0


def cmd_gradcheck(args) -> int:
    from pir.gradsuite import CASES, TOLERANCE, run_suite
    from pir.plotting import plot_gradcheck

    names = args.case or sorted(CASES)
    unknown = [n for n in names if n not in CASES]
    if unknown:
        raise ConfigError(f"unknown gradient cases {unknown}; choose from {sorted(CASES)}")
    results = run_suite(seeds=range(args.seeds), names=names)
    rows = [(r.name, r.seed, r.error, r.seconds, r.passed) for r in results]
    header = ["case", "seed", "max_rel_error", "seconds", "passed"]
    _print_tsv(header, rows)
    if args.out:
        out = Path(args.out)
        write_tsv(out / "gradcheck.tsv", header, rows)
        worst = [max(r.error for r in results if r.name == n) for n in names]
        plot_gradcheck(out / "gradcheck.png", names, worst, TOLERANCE)
    failed = sorted({r.name for r in results if not r.passed})
    if failed:
        log.error("gradient check failed: %s", ", ".join(failed))
        return NumericError.exit_code
    return 0


def cmd_metrics(args) -> int:
    from pir.imageio import read_ppm
    from pir.metrics import psnr, ssim
    from pir.pipeline import RunReport, frame_name, write_run_metrics
    from pir.scene import load_scene

    pred_dir = Path(args.pred)
    files = sorted(pred_dir.glob("frame_*.ppm"))
    if not files:
        raise MissingArtifactError(f"no frame_*.ppm files in {pred_dir}")
    scene = None if args.ref else load_scene(_workspace(args).scene_dir)
    rep = RunReport([], [], [], Path(args.out) if args.out else pred_dir)
    for f in files:
        i = int(f.stem.split("_")[1])
        if args.ref:
            ref = read_ppm(Path(args.ref) / frame_name(i))
        else:
            if i >= scene.n_frames:
                raise ConfigError(f"{f.name} has no reference frame in the scene")
            ref = scene.images[i]
        img = read_ppm(f)
        rep.frames.append(i)
        rep.psnr.append(psnr(img, ref))
        rep.ssim.append(ssim(img, ref))
    rep.out_dir.mkdir(parents=True, exist_ok=True)
    write_run_metrics(rep)
    sys.stdout.write((rep.out_dir / "metrics.tsv").read_text())
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pir", description=__doc__.splitlines()[0])
    verbs = parser.add_subparsers(dest="verb", required=True)

    p = verbs.add_parser("gen-scene", help="generate the synthetic scene")
    _add_common(p)
    p.set_defaults(func=cmd_gen_scene)

    a2e = verbs.add_parser("audio2exp", help="audio-to-expression stage").add_subparsers(
        dest="action", required=True)
    p = a2e.add_parser("train")
    _add_common(p)
    p.set_defaults(func=cmd_audio2exp_train)
    p = a2e.add_parser("infer")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--features", required=True, help="container with a 'features' tensor")
    p.add_argument("--out", help="write expressions to this container file")
    p.set_defaults(func=cmd_audio2exp_infer)

    fld = verbs.add_parser("field", help="tri-plane field stage").add_subparsers(
        dest="action", required=True)
    p = fld.add_parser("train")
    _add_common(p)
    p.set_defaults(func=cmd_field_train)

    rnd = verbs.add_parser("render", help="inpainting renderer stage").add_subparsers(
        dest="action", required=True)
    p = rnd.add_parser("train")
    _add_common(p)
    p.set_defaults(func=cmd_render_train)
    p = rnd.add_parser("infer")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--camera", required=True, help="camera text file, one camera per output frame")
    p.add_argument("--expr", required=True, help="container with an 'expressions' tensor")
    p.add_argument("--out", required=True)
    p.add_argument("--field", help="field checkpoint (default: field.pirk next to --ckpt)")
    p.add_argument("--scene", help="scene directory supplying the visible frames")
    p.add_argument("--start", type=int, help="scene frame of the first output (default: first held-out)")
    p.set_defaults(func=cmd_render_infer)

    p = verbs.add_parser("train-all", help="scene plus all three training stages")
    _add_common(p)
    p.set_defaults(func=cmd_train_all)

    p = verbs.add_parser("run", help="end-to-end inference on the held-out frames")
    _add_common(p)
    p.add_argument("--out", help="output directory (default: <workdir>/out)")
    p.set_defaults(func=cmd_run)

    p = verbs.add_parser("ablate-k", help="sequence-length ablation")
    _add_common(p)
    p.add_argument("--out", help="report directory (default: workdir)")
    p.set_defaults(func=cmd_ablate_k)

    p = verbs.add_parser("ablate-jitter", help="jitter-augmentation ablation")
    _add_common(p)
    p.add_argument("--out", help="report directory (default: workdir)")
    p.set_defaults(func=cmd_ablate_jitter)

    p = verbs.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--case", action="append", help="run only this case (repeatable)")
    p.add_argument("--out", help="also write gradcheck.tsv and gradcheck.png here")
    p.set_defaults(func=cmd_gradcheck)

    p = verbs.add_parser("metrics", help="PSNR/SSIM of frame_*.ppm files")
    _add_common(p)
    p.add_argument("--pred", required=True, help="directory of frame_NNNN.ppm outputs")
    p.add_argument("--ref", help="directory of reference frames (default: the workspace scene)")
    p.add_argument("--out", help="report directory (default: --pred)")
    p.set_defaults(func=cmd_metrics)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(message)s", datefmt="%H:%M:%S", stream=sys.stderr)
    try:
        return args.func(args)
    except PirError as exc:
        log.error("error: %s", exc)
        return exc.exit_code if exc.exit_code in (3, 4) else ConfigError.exit_code
    except ValueError as exc:  # malformed input files
        log.error("error: %s", exc)
        return ConfigError.exit_code


if __name__ == "__main__":
    sys.exit(main())
