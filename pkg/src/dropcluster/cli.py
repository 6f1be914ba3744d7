"""Command-line entry point: ``dropcluster {train,cluster-viz,tendency-report,corrupt-eval}``."""

import argparse
import logging
import os
import sys
from dataclasses import fields

from . import experiment
from .core import InvalidArgument, StateError
from .data import FormatError

log = logging.getLogger("dropcluster")


def _add_config_flags(parser):
    parser.add_argument("--config", help="flat key = value config file")
    group = parser.add_argument_group("config overrides")
    for f in fields(experiment.ExperimentConfig):
        group.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}", metavar="VALUE")


def _config(args):
    overrides = {
        key[4:]: value for key, value in vars(args).items()
        if key.startswith("cfg_") and value is not None
    }
    return experiment.load_config(args.config, overrides)


def cmd_train(args):
    cfg = _config(args)

    def report(record):
        log.info("epoch %d lr %.5f loss %.4f top1 %.4f top5 %.4f",
                 record.epoch, record.lr, record.train_loss, record.top1, record.top5)

    out = experiment.run_train(cfg, log=report)
    print(out.metrics_path)
    print(out.summary_path)
    print(out.checkpoint_path)


def cmd_cluster_viz(args):
    cfg = _config(args)
    out = args.out or os.path.join(cfg.output_dir, "clusters")
    for path in experiment.run_cluster_viz(args.checkpoint, out, args.scale):
        print(path)


def cmd_tendency_report(args):
    cfg = _config(args)
    if args.checkpoint is None and args.activations is None:
        raise InvalidArgument("pass --checkpoint or --activations")
    out = args.out or os.path.join(cfg.output_dir, "tendency")
    _, report_path, hist_path = experiment.run_tendency_report(cfg, out, args.checkpoint, args.activations)
    print(report_path)
    print(hist_path)


def cmd_corrupt_eval(args):
    cfg = _config(args)
    out = args.out or cfg.output_dir
    _, path = experiment.run_corrupt_eval(cfg, args.checkpoint, out)
    print(path)


def build_parser():
    parser = argparse.ArgumentParser(prog="dropcluster", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the toy CNN and write metrics CSVs and a checkpoint")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("cluster-viz", help="render each channel's clusters as a pixmap")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out")
    p.add_argument("--scale", type=int, default=8)
    _add_config_flags(p)
    p.set_defaults(func=cmd_cluster_viz)

    p = sub.add_parser("tendency-report", help="per-channel Spatial Hopkins and its histogram")
    p.add_argument("--checkpoint")
    p.add_argument("--activations", help=".npy array of shape (b, t, w, h)")
    p.add_argument("--out")
    _add_config_flags(p)
    p.set_defaults(func=cmd_tendency_report)

    p = sub.add_parser("corrupt-eval", help="accuracy on corrupted test data per kind and severity")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out")
    _add_config_flags(p)
    p.set_defaults(func=cmd_corrupt_eval)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (InvalidArgument, StateError, FormatError, FileNotFoundError) as exc:
        print(f"dropcluster: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
