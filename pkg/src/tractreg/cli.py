"""Command-line interface: ``tractreg {synth,train,register,keypoints,evaluate}``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
Environment: ``TRACTREG_THREADS`` (default worker count), ``TRACTREG_LOG_LEVEL``.
"""
import argparse
import contextlib
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import FormatError, NumericalError, ValidationError
from .fileio import load_tractogram, save_keypoints_csv, save_tractogram
from .metrics import bundle_report
from .pipeline import keypoint_subset, load_transform, register, save_transform
from .network import detect_keypoints
from .streamlines import resample_tractogram
from .synth import gen_phantom, make_pair
from .tps import apply_transform
from .train import TrainConfig, apply_overrides, checkpoint_load, fit, format_config, load_config

logger = logging.getLogger("tractreg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _thread_limit(n):
    if not n:
        return contextlib.nullcontext()
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return contextlib.nullcontext()
    return threadpool_limits(n)


def _load_model_state(path):
    if path is None:
        raise UsageError("--checkpoint is required")
    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return checkpoint_load(path)


# -- subcommands -------------------------------------------------------------------

def cmd_synth(args):
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"output directory is not writable: {out}")
    phantom = gen_phantom(args.bundles, seed=args.seed, n_streamlines=args.streamlines,
                          n_points=args.points, sigma=args.sigma)
    moving, fixed, truth = make_pair(phantom, args.dmax, seed=args.seed + 1, kind=args.warp)
    ext = ".txt" if args.format == "text" else ".trg"
    save_tractogram(moving, out / f"moving{ext}", args.format)
    save_tractogram(fixed, out / f"fixed{ext}", args.format)
    if truth.transform is not None:
        save_transform(truth.transform, out / "truth.tps")
    counts = np.repeat(np.arange(len(fixed)), fixed.lengths)
    within = np.concatenate([np.arange(n) for n in fixed.lengths])
    lines = ["streamline,point,dr,da,ds"]
    lines += [f"{s},{p},{d[0]!r},{d[1]!r},{d[2]!r}"
              for s, p, d in zip(counts, within, truth.displacement.tolist())]
    (out / "displacement.csv").write_text("\n".join(lines) + "\n")
    print(f"bundles={args.bundles} streamlines={len(fixed)} d_max={args.dmax} out={out}")
    return EXIT_OK


def _read_subjects(data_dir, n_points):
    files = sorted(p for p in Path(data_dir).iterdir() if p.suffix in (".trg", ".txt"))
    subjects = []
    for f in files:
        t = load_tractogram(f)
        subjects.append(t if t.n_points == n_points else resample_tractogram(t, n_points))
    if len(subjects) < 2:
        raise ValidationError(f"need at least 2 training tractograms in {data_dir}, found {len(subjects)}")
    return subjects, files


def cmd_train(args):
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    overrides = [(i + 1, s) for i, s in enumerate(args.set or [])]
    state = None
    if args.resume:
        state = checkpoint_load(args.resume)
        state.config = apply_overrides(state.config, overrides, "--set")
        config = state.config
    else:
        config = load_config(args.config) if args.config else TrainConfig()
        config = apply_overrides(config, overrides, "--set")
    if args.seed is not None:
        config.seed = args.seed
    subjects, files = _read_subjects(args.data_dir, config.n_points)
    (out / "config.txt").write_text(format_config(config))
    logger.info("training on %d subjects: %s", len(subjects), ", ".join(f.name for f in files))
    state = fit(subjects, config, state=state, epochs=args.epochs, log_path=out / "train_log.csv",
                checkpoint_dir=out)
    print(f"epochs={state.epoch} iterations={state.iteration} checkpoint={out / 'last.ckpt'}")
    return EXIT_OK


def cmd_register(args):
    moving = load_tractogram(args.moving, args.format)
    if args.apply_transform:
        transform = load_transform(args.apply_transform)
        moved = moving.with_coords(apply_transform(transform, moving.coords))
        seconds = None
    else:
        fixed = load_tractogram(args.fixed, args.format) if args.fixed else None
        if fixed is None:
            raise UsageError("--fixed is required unless --apply-transform is given")
        params, n_points, lam = None, 15, 0.5
        if args.matcher == "net" or args.checkpoint:
            state = _load_model_state(args.checkpoint)
            params, n_points, lam = state.params, state.config.n_points, state.config.lambda_infer
        if args.matcher == "nn" and params is None and not args.keypoints:
            raise UsageError("--keypoints is required for --matcher nn without a checkpoint")
        if args.lam is not None:
            lam = args.lam
        result = register(moving, fixed, params, lam=lam, subset_size=args.subset_size,
                          seed=args.seed, matcher=args.matcher, n_points=n_points,
                          n_keypoints=args.keypoints)
        moved, transform, seconds = result.moved, result.transform, result.seconds
    save_tractogram(moved, args.out, args.format)
    if args.transform_out:
        save_transform(transform, args.transform_out)
    if seconds is not None:
        logger.info("wall-clock: keypoints %.3f s, solve %.3f s, warp %.3f s, total %.3f s",
                    seconds["keypoints"], seconds["solve"], seconds["warp"], seconds["total"])
        print(f"streamlines={len(moved)} lambda={transform.lam!r} seconds={seconds['total']:.3f}")
    return EXIT_OK


def cmd_keypoints(args):
    state = _load_model_state(args.checkpoint)
    tract = load_tractogram(args.tractogram, args.format)
    sub = keypoint_subset(tract, args.subset_size, args.seed, state.config.n_points)
    keypoints = detect_keypoints(sub, state.params)
    save_keypoints_csv(keypoints, args.out)
    print(f"keypoints={len(keypoints)} out={args.out}")
    return EXIT_OK


def cmd_evaluate(args):
    moved = load_tractogram(args.moved, args.format)
    fixed = load_tractogram(args.fixed, args.format)
    rows = bundle_report(moved, fixed, args.voxel, workers=args.threads or 1)
    for r in rows:
        print(f"bundle={r['bundle']} abd_mm={r['abd_mm']:.6f} wdice={r['wdice']:.6f} "
              f"n_moving={r['n_moving']} n_fixed={r['n_fixed']}")
    print(f"mean_abd_mm={np.mean([r['abd_mm'] for r in rows]):.6f}")
    print(f"mean_wdice={np.mean([r['wdice'] for r in rows]):.6f}")
    if args.csv:
        lines = ["bundle,abd_mm,wdice,n_moving,n_fixed"]
        lines += [f"{r['bundle']},{r['abd_mm']!r},{r['wdice']!r},{r['n_moving']},{r['n_fixed']}"
                  for r in rows]
        Path(args.csv).write_text("\n".join(lines) + "\n")
    return EXIT_OK


# -- parser --------------------------------------------------------------------------

def build_parser():
    env_threads = os.environ.get("TRACTREG_THREADS")
    parser = argparse.ArgumentParser(prog="tractreg", description="Streamline tractography registration "
                                     "with probabilistic keypoints and thin-plate splines.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--threads", type=int, default=int(env_threads) if env_threads else None,
                        help="cap on worker threads (env TRACTREG_THREADS)")
    parser.add_argument("--deterministic", action="store_true",
                        help="fixed reduction order (always on; accepted for scripts)")
    parser.add_argument("--log-level", default=os.environ.get("TRACTREG_LOG_LEVEL", "INFO"))
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic phantom pair with a ground-truth warp")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--bundles", type=int, default=6)
    p.add_argument("--streamlines", type=int, default=400, help="streamlines per bundle")
    p.add_argument("--points", type=int, default=15)
    p.add_argument("--sigma", type=float, default=2.0, help="lateral jitter (mm)")
    p.add_argument("--dmax", type=float, default=5.0, help="max displacement (mm)")
    p.add_argument("--warp", choices=("tps", "sine"), default="tps")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("binary", "text"), default="binary")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="unsupervised training on a directory of tractograms")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")
    p.add_argument("--epochs", type=int, help="stop after this many epochs in total")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("register", help="warp a moving tractogram onto a fixed one")
    p.add_argument("--moving", required=True)
    p.add_argument("--fixed")
    p.add_argument("--checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--transform-out")
    p.add_argument("--apply-transform", help="re-apply a saved transform instead of solving")
    p.add_argument("--subset-size", type=int, help="streamlines used for keypoints (default min(30000, N))")
    p.add_argument("--lambda", dest="lam", type=float, help="TPS regularization (default 0.5)")
    p.add_argument("--matcher", choices=("net", "nn"), default="net")
    p.add_argument("--keypoints", type=int, help="keypoint count for --matcher nn")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("binary", "text"))
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("keypoints", help="export detected keypoints as CSV")
    p.add_argument("--tractogram", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--subset-size", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("binary", "text"))
    p.set_defaults(func=cmd_keypoints)

    p = sub.add_parser("evaluate", help="per-bundle ABD and weighted Dice")
    p.add_argument("--moved", required=True)
    p.add_argument("--fixed", required=True)
    p.add_argument("--voxel", type=float, default=2.0, help="voxel size (mm)")
    p.add_argument("--csv")
    p.add_argument("--format", choices=("binary", "text"))
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit(args.threads):
            return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))  # exits with 2
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValidationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
