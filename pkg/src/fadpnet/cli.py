"""Command line entry point: ``fadpnet <verb> [config.yaml] [--set key=value ...]``.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
"""

import argparse
import glob
import logging
import os
import sys

import torch

from . import data as D
from .checkpoint import CheckpointError, load_checkpoint, model_from_checkpoint
from .config import load_config
from .lfeb import NumericalInstabilityError
from .net import ConfigError, FADPNet
from .profiler import profile

DATA_ROOT_ENV = "FADPNET_DATA_ROOT"
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("fadpnet")


def _manifest(run, args):
    root = os.environ.get(DATA_ROOT_ENV) or run.data.root
    path = args.manifest or run.data.manifest
    return D.load_manifest(path, root=root, seed=run.train.seed)


def _dataset(run, args, split):
    return D.PairDataset(_manifest(run, args), split, run.data.scale, run.data.size)


def cmd_train(run, args):
    from .train import train

    os.makedirs(args.out, exist_ok=True)
    m = _manifest(run, args)
    train_set = D.PairDataset(m, "train", run.data.scale, run.data.size)
    val_set = D.PairDataset(m, "val", run.data.scale, run.data.size) if m.paths("val") else None
    from .config import dump_config
    dump_config(run, os.path.join(args.out, "config.yaml"))
    train(run, train_set, val_set, out_dir=args.out, resume=args.resume)


def cmd_eval(run, args):
    from .train import evaluate, summarize

    rows = evaluate(args.checkpoint, _manifest(run, args), args.split, run.data.scale, run.data.size, args.out)
    p, s = summarize(rows)
    print(f"images={len(rows)} psnr={p:.4f} ssim={s:.4f}")


def cmd_infer(run, args):
    from .train import infer

    paths = []
    for p in args.inputs:
        paths.extend(sorted(glob.glob(os.path.join(p, "*.png"))) if os.path.isdir(p) else [p])
    written, failed = infer(args.checkpoint, paths, args.out, args.degrade, run.data.scale, run.data.size)
    print(f"written={len(written)} failed={len(failed)}")
    if failed and not written:
        raise D.DataError("no input could be processed")


def cmd_profile(run, args):
    report = profile(run.model, (args.size, args.size), args.runs)
    print(report.to_text())


def cmd_spectrum(run, args):
    from .analysis import spectrum_report

    if args.checkpoint:
        model = model_from_checkpoint(load_checkpoint(args.checkpoint))
    else:
        torch.manual_seed(run.train.seed)
        model = FADPNet(run.model)
    sys.stdout.write(spectrum_report(model, _dataset(run, args, args.split), args.level - 1, args.out))


def cmd_ablate(run, args):
    from .analysis import ablate, check_flags

    flags = [f for f in args.flags.split(",") if f]
    check_flags(flags)
    train_set = _dataset(run, args, "train")
    _, table = ablate(run, flags, train_set, size=(run.data.size, run.data.size))
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(table)
    sys.stdout.write(table)


def build_parser():
    p = argparse.ArgumentParser(prog="fadpnet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp):
        sp.add_argument("config", nargs="?", help="YAML run config")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a dotted config key, e.g. model.base_channels=16")
        sp.add_argument("--manifest", help="dataset manifest (overrides data.manifest)")
        return sp

    sp = common(sub.add_parser("train", help="train a model"))
    sp.add_argument("--out", default="runs/default")
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.set_defaults(func=cmd_train)

    sp = common(sub.add_parser("eval", help="per-image PSNR/SSIM on a split"))
    sp.add_argument("checkpoint")
    sp.add_argument("--split", default="test")
    sp.add_argument("--out", help="metrics CSV path")
    sp.set_defaults(func=cmd_eval)

    sp = common(sub.add_parser("infer", help="super-resolve images"))
    sp.add_argument("checkpoint")
    sp.add_argument("inputs", nargs="+")
    sp.add_argument("--out", default="sr_out")
    sp.add_argument("--degrade", action="store_true", help="apply the bicubic degradation first")
    sp.set_defaults(func=cmd_infer)

    sp = common(sub.add_parser("profile", help="params, FLOPs and latency"))
    sp.add_argument("--size", type=int, default=128)
    sp.add_argument("--runs", type=int, default=0, help="latency runs (0 skips timing)")
    sp.set_defaults(func=cmd_profile)

    sp = common(sub.add_parser("spectrum", help="band-energy ratios of branch outputs"))
    sp.add_argument("--checkpoint")
    sp.add_argument("--level", type=int, default=1, help="1-based U-Net level")
    sp.add_argument("--split", default="test")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_spectrum)

    sp = common(sub.add_parser("ablate", help="train variants and tabulate"))
    sp.add_argument("--flags", required=True, help="comma-separated variant flags")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_ablate)
    return p


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        run = load_config(args.config, args.set)
        args.func(run, args)
    except ConfigError as e:
        log.error("config error: %s", e)
        return EXIT_CONFIG
    except (D.DataError, CheckpointError, FileNotFoundError) as e:
        log.error("data error: %s", e)
        return EXIT_DATA
    except (NumericalInstabilityError, FloatingPointError) as e:
        log.error("numerical failure: %s", e)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
