"""``caedet`` command line: train, eval, score, synth, plot.

Exit codes: 0 success, 1 usage error, 2 I/O or configuration error,
3 numeric failure.
"""
from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
from dataclasses import replace

from . import pipeline
from .data import FAST_BLOB, LARGE_BLOB, SyntheticConfig
from .errors import CaedetError, ConfigError, FormatError, NumericError
from .plot import plot_metrics

log = logging.getLogger("caedet")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _add_common(p):
    p.add_argument("--data", help="dataset root (UCSD root or synthetic dataset directory)")
    p.add_argument("--dataset", choices=pipeline.DATASETS, default=None)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--scale", type=int, help="divide every channel width by this factor")
    p.add_argument("--size", type=int, help="square frame side fed to the model")
    p.add_argument("--val-fraction", dest="val_fraction", type=float)
    p.add_argument("--quantile", type=float, help="threshold quantile of normal validation scores")
    p.add_argument("--ckpt")
    p.add_argument("--metrics")
    p.add_argument("--scores")
    p.add_argument("--out")


def build_parser():
    parser = _Parser(prog="caedet", description="Convolutional autoencoder video anomaly detection")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    _add_common(sub.add_parser("train", help="train an autoencoder and write checkpoint + metrics CSV"))

    p = sub.add_parser("eval", help="reconstruction accuracy and frame-level detection metrics")
    _add_common(p)
    p.add_argument("--split", choices=("Train", "Test"), default="Test")

    p = sub.add_parser("score", help="score arbitrary frame directories")
    _add_common(p)
    p.add_argument("--threshold", type=float, help="flag frames whose normalized score exceeds this")

    p = sub.add_parser("synth", help="write a synthetic Train/Test dataset")
    _add_common(p)
    p.add_argument("--train-clips", dest="train_clips", type=int, default=80)
    p.add_argument("--test-clips", dest="test_clips", type=int, default=10)
    p.add_argument("--frames", type=int, default=40, help="frames per clip")
    p.add_argument("--anomaly-rate", dest="anomaly_rate", type=float, default=0.3)
    p.add_argument("--anomaly-types", dest="anomaly_types", default=f"{FAST_BLOB},{LARGE_BLOB}")
    p.add_argument("--noise", type=float, default=0.02)

    _add_common(sub.add_parser("plot", help="SVG chart of a metrics CSV"))
    return parser


def _run_config(args, base: pipeline.RunConfig | None = None) -> pipeline.RunConfig:
    cfg = base or pipeline.RunConfig()
    overrides = {k: getattr(args, k) for k in ("data", "dataset", "epochs", "batch", "lr", "seed", "scale",
                                               "size", "val_fraction", "quantile", "ckpt", "metrics",
                                               "scores", "out")
                 if getattr(args, k, None) is not None}
    return replace(cfg, **overrides).validate()


def cmd_train(args):
    cfg = _run_config(args)
    if not cfg.ckpt and not cfg.metrics:
        raise ConfigError("train needs --ckpt and/or --metrics")
    pipeline.run_train(cfg)
    return EXIT_OK


def _checkpoint_config(args):
    if not args.ckpt:
        raise ConfigError("--ckpt is required")
    model = pipeline.load_model(args.ckpt)
    stored = getattr(model, "checkpoint_config", {}).get("run", {})
    base = pipeline.RunConfig.from_dict(stored)
    # the model fixes the geometry; flags may not contradict it
    if args.size is not None and args.size != model.input_shape[0]:
        raise ConfigError(f"--size {args.size} does not match checkpoint input {model.input_shape}")
    if args.scale is not None and args.scale != model.scale_factor:
        raise ConfigError(f"--scale {args.scale} does not match checkpoint scale {model.scale_factor}")
    base = replace(base, size=model.input_shape[0], scale=model.scale_factor, bottleneck=model.bottleneck_dim)
    return model, base


def cmd_eval(args):
    model, base = _checkpoint_config(args)
    cfg = _run_config(args, base)
    cfg = replace(cfg, scores=args.scores)
    result = pipeline.run_eval(model, cfg, split=args.split)
    for line in result.lines():
        print(line)
    return EXIT_OK


def cmd_score(args):
    model, _ = _checkpoint_config(args)
    if not args.data:
        raise ConfigError("--data (directory of frames or clip folders) is required")
    if not args.scores:
        raise ConfigError("--scores output path is required")
    scores = pipeline.run_score(model, args.data, args.scores, threshold=args.threshold)
    print(f"scored {len(scores)} frames -> {args.scores}")
    return EXIT_OK


def cmd_synth(args):
    if not args.out:
        raise ConfigError("--out is required")
    size = args.size or 64
    types = tuple(t.strip() for t in args.anomaly_types.split(",") if t.strip())
    if not 0 <= args.anomaly_rate <= 1:
        raise ConfigError("--anomaly-rate must lie in [0, 1]")
    if args.train_clips < 1 or args.test_clips < 1:
        raise ConfigError("clip counts must be positive")
    try:
        syn = SyntheticConfig(frame_size=(size, size), clip_length=args.frames, anomaly_types=types,
                              noise=args.noise, seed=args.seed if args.seed is not None else 42)
    except CaedetError as exc:
        raise ConfigError(str(exc)) from None
    (train, _), (test, gt) = pipeline.run_synth(args.out, syn, args.train_clips, args.test_clips,
                                                args.anomaly_rate)
    n_anom = sum(int(gt[c.clip_id].any()) for c in test)
    print(f"wrote {len(train)} train clips and {len(test)} test clips ({n_anom} anomalous) to {args.out}")
    return EXIT_OK


def cmd_plot(args):
    if not args.metrics or not args.out:
        raise ConfigError("plot needs --metrics CSV and --out SVG path")
    if not os.path.isfile(args.metrics):
        raise FileNotFoundError(f"metrics file not found: {args.metrics}")
    plot_metrics(args.metrics, args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "score": cmd_score, "synth": cmd_synth, "plot": cmd_plot}


def _thread_limit():
    value = os.environ.get("CAEDET_THREADS")
    if not value:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=max(int(value), 1))


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        with _thread_limit():
            return COMMANDS[args.command](args)
    except NumericError as exc:
        print(f"caedet: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, FormatError, OSError) as exc:
        print(f"caedet: {exc}", file=sys.stderr)
        return EXIT_IO
    except CaedetError as exc:
        print(f"caedet: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
