"""``asffnet`` command line: prepare, train, evaluate, compare, explain.

Exit status: 0 on success, 1 when a command fails, 2 on usage or
configuration errors.
"""

from __future__ import annotations

import argparse
import logging
import sys

from asffnet import experiment as X
from asffnet.errors import AsffError, ConfigurationError

log = logging.getLogger("asffnet")

_GLOBAL_DEFAULTS = {"config": None, "seed": None, "out": "out", "profile": None, "verbose": False}


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    # Suppressed defaults let the flags appear before or after the verb.
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--config", default=d(None), help="INI experiment config")
    parser.add_argument("--seed", type=int, default=d(None), help="random seed")
    parser.add_argument("--out", default=d("out"), help="experiment directory (default: out)")
    parser.add_argument("--profile", choices=sorted(X.PROFILES), default=d(None),
                        help="preset scale (default: desk)")
    parser.add_argument("-v", "--verbose", action="store_true", default=d(False))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="asffnet", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="generate or index a dataset and write the split manifest")
    _global_flags(p, suppress=True)
    p.add_argument("--data-root", help="folder with one sub-folder of images per class")
    p.add_argument("--synthetic-n", type=int, help="synthetic images per class")
    p.add_argument("--image-size", type=int, help="synthetic image side length")
    p.add_argument("--cue-mode", choices=("global_shape", "local_texture", "multi_scale"))
    p.add_argument("--train-fraction", type=float)

    p = sub.add_parser("train", help="train one model on the prepared dataset")
    _global_flags(p, suppress=True)
    p.add_argument("--arch", choices=sorted(X.PUBLISHED_DEFAULTS))
    p.add_argument("--epochs", type=int)
    p.add_argument("--width", type=float, help="channel width multiplier")
    p.add_argument("--input", type=int, help="input side length")
    p.add_argument("--lr", type=float, help="learning rate")
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--optimizer", choices=("sgd", "adam"))
    p.add_argument("--decay-mode", choices=("l2", "inverse_time"))
    p.add_argument("--manifest", help="dataset manifest (default: OUT/data/manifest.csv)")
    p.add_argument("--dry-run", action="store_true", help="print the resolved config and run directory, then stop")

    p = sub.add_parser("evaluate", help="metrics, curves and plots for a run")
    _global_flags(p, suppress=True)
    p.add_argument("run_dir")
    p.add_argument("--threshold", type=float)

    p = sub.add_parser("compare", help="cross-run metrics table and overlaid curves")
    _global_flags(p, suppress=True)
    p.add_argument("run_dirs", nargs="+")

    p = sub.add_parser("explain", help="Grad-CAM heatmaps and overlays for images")
    _global_flags(p, suppress=True)
    p.add_argument("run_dir")
    p.add_argument("images", nargs="+")
    p.add_argument("--class-index", type=int, help="target class (default: predicted)")
    p.add_argument("--layer", help="tap layer name or alias (default: the model's CAM layer)")
    p.add_argument("--blend-alpha", type=float)
    return parser


def _resolve(args, **kw) -> X.ExperimentConfig:
    return X.resolve_config(args.config, profile=args.profile, seed=args.seed, **kw)


def run(args) -> int:
    if args.command == "prepare":
        cfg = _resolve(args, dataset={
            "root": args.data_root, "n_per_class": args.synthetic_n, "image_size": args.image_size,
            "cue_mode": args.cue_mode, "train_fraction": args.train_fraction, "seed": args.seed,
        })
        print(X.cmd_prepare(cfg, args.out))
    elif args.command == "train":
        cfg = _resolve(
            args, arch=args.arch,
            model={"input_size": args.input, "width_multiplier": args.width},
            train_overrides={
                "epochs": args.epochs, "learning_rate": args.lr, "weight_decay": args.weight_decay,
                "batch_size": args.batch_size, "optimizer": args.optimizer, "decay_mode": args.decay_mode,
            },
        )
        run_dir = X.cmd_train(cfg, args.out, args.manifest, dry_run=args.dry_run)
        if args.dry_run:
            print(cfg.to_ini(), end="")
        print(run_dir)
    elif args.command == "evaluate":
        print(X.cmd_evaluate(args.run_dir, args.threshold))
    elif args.command == "compare":
        report = X.cmd_compare(args.run_dirs, args.out)
        for row in report.rows:
            print(f"{row['model']:<14} {row['run']:<40} acc {row['accuracy']:.5f} "
                  f"roc_auc {row['roc_auc']:.4f} pr_auc {row['pr_auc']:.4f}")
        print(report.out_dir)
    elif args.command == "explain":
        out, failures = X.cmd_explain(
            args.run_dir, args.images, class_index=args.class_index, layer=args.layer,
            blend_alpha=args.blend_alpha,
        )
        print(out)
        if failures == len(args.images):
            log.error("no image could be explained")
            return 1
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for k, v in _GLOBAL_DEFAULTS.items():
        if not hasattr(args, k):
            setattr(args, k, v)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return run(args)
    except ConfigurationError as exc:
        print(f"asffnet {args.command}: {exc}", file=sys.stderr)
        return 2
    except AsffError as exc:
        print(f"asffnet {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
