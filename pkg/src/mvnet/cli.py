"""``mvnet`` command line: spline tools, data generation, training and evaluation.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numeric failure.
"""

import argparse
import csv
import logging
import os
import sys

import numpy as np

from . import data as D
from . import experiment as X
from .netspec import ArchParseError, ShapeError, build_network, parse_dims, parse_shorthand, \
    render_shorthand
from .spline import parse_number_list, parse_rational, resample_clip, spline_weights, \
    velocity_weights
from .tensor import SingularMatrixError, TensorFormatError, read_tensor, write_tensor
from .layers import save_params
from .plotting import plot_confusion, plot_loss_curves, plot_pretrain_history, plot_weights
from .train import DivergenceError, TrainConfig, evaluate, format_config, load_config

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# commands --------------------------------------------------------------------

def cmd_spline_weights(args):
    knots = parse_number_list(args.knots)
    queries = parse_number_list(args.queries)
    W = spline_weights([float(k) for k in knots], [float(q) for q in queries])
    write_tensor(args.out, W)
    if args.csv:
        np.savetxt(args.csv, W, delimiter=",", fmt="%.17g")
    if args.plot:
        plot_weights(W, args.plot, "interpolation weights")
    print(f"weights {W.shape[0]}x{W.shape[1]} -> {args.out}")


def cmd_resample(args):
    frames = read_tensor(args.input)
    if frames.ndim not in (3, 4):
        raise TensorFormatError(f"clip tensor must have rank 3 or 4, got {frames.ndim}")
    factor = parse_rational(args.factor)
    W = velocity_weights(frames.shape[0], factor)
    out = resample_clip(frames, W)
    write_tensor(args.out, out)
    print(f"resampled {frames.shape[0]} frames at factor {factor} -> {args.out}")


def cmd_gen_data(args):
    dims = parse_dims(args.dims)
    if len(dims) != 3:
        raise UsageError("--dims must be TxHxW")
    clips, split = D.generate_dataset(args.classes, args.per_class, dims, args.seed,
                                      args.noise)
    meta = {"classes": args.classes, "dims": args.dims, "seed": args.seed,
            "per_class": args.per_class, "noise": args.noise}
    D.write_dataset(args.out, clips, split, meta)
    if args.strips:
        os.makedirs(os.path.join(args.out, "strips"), exist_ok=True)
        for c in clips:
            D.write_strip(c, os.path.join(args.out, "strips", f"{c.id}.pgm"))
    print(f"clips={len(clips)} train={len(split.train)} test={len(split.test)} "
          f"val={len(split.val)} -> {args.out}")


def cmd_parse_arch(args):
    spec = parse_shorthand(args.arch)
    print(render_shorthand(spec))
    if args.input:
        net = build_network(spec, parse_dims(args.input), args.temporal or (),
                            allocate=False)
        print(net.format_shape_table())


def _config(args):
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return load_config(args.config, **overrides) if args.config else TrainConfig(**overrides)


def _arrays(dataset, cfg, part):
    clips, split, _ = dataset
    ids = getattr(split, part)
    if not ids:
        raise ValueError(f"split {part!r} is empty")
    Xa, ya = X.clip_arrays([clips[i] for i in ids], cfg.input_frames)
    return ids, Xa, ya


def cmd_pretrain(args):
    cfg = _config(args)
    dataset = D.load_dataset(args.data)
    _, Xtr, _ = _arrays(dataset, cfg, "train")
    _, Xva, _ = _arrays(dataset, cfg, "val")
    net, history = X.pretrain_autoencoder(Xtr, cfg, Xva,
                                          checkpoint_dir=os.path.join(args.out, "stages"))
    save_params(net.named_layers(), args.out)
    with open(os.path.join(args.out, "config.txt"), "w") as fh:
        fh.write(format_config(cfg))
    with open(os.path.join(args.out, "pretrain_curves.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stage", "epoch", "train_mse", "val_mse"])
        for row in history:
            w.writerow([row[0], row[1], repr(row[2]), repr(row[3])])
    plot_pretrain_history(history, os.path.join(args.out, "pretrain_curves.png"))
    first, last = history[0][3], history[-1][3]
    print(f"pretrain val_mse first_epoch={first:.6g} final={last:.6g} -> {args.out}")


def cmd_train(args):
    cfg = _config(args)
    dataset = D.load_dataset(args.data)
    ids, Xtr, ytr = _arrays(dataset, cfg, "train")
    _, Xva, yva = _arrays(dataset, cfg, "val")
    if np.any(ytr < 0):
        raise ValueError("training clips need class labels")
    labeled = X.stratified_subset(ytr, args.labeled_fraction, cfg.seed)
    net, log = X.train_model(cfg, Xtr, ytr, labeled, Xva, yva, pretrained=args.init)
    n_classes = int(dataset[2].get("classes", ytr.max() + 1))
    X.save_model(net, cfg, Xtr.shape[1:], args.out, n_classes)
    X.write_labeled_ids(os.path.join(args.out, "labeled.csv"), [ids[i] for i in labeled])
    log.write(args.out)
    plot_loss_curves(log.epochs, os.path.join(args.out, "loss_curves.png"))
    last = [r for r in log.epochs if r[1] == "joint-val"]
    tail = f" val_ce={last[-1][3]:.6g}" if last else ""
    print(f"trained labeled={len(labeled)} unlabeled={len(ytr) - len(labeled)}{tail} "
          f"-> {args.out}")


def cmd_eval(args):
    net, cfg, _, n_classes = X.load_model(args.model)
    _, Xs, ys = _arrays(D.load_dataset(args.data), cfg, args.split)
    if np.any(ys < 0):
        raise ValueError("evaluation clips need class labels")
    report = evaluate(net, Xs, ys, n_classes, threads=args.threads)
    report.write(args.out)
    names = [D.GESTURES[k].name for k in range(n_classes)] if n_classes <= len(D.GESTURES) \
        else None
    plot_confusion(report.confusion, os.path.join(args.out, "confusion.png"), names,
                   f"{args.split} accuracy {report.accuracy:.3f}")
    print(report.summary())


# parser -----------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="mvnet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("spline-weights", help="natural cubic spline weight matrix")
    s.add_argument("--knots", required=True, help="comma list, e.g. 0,1,2,3")
    s.add_argument("--queries", required=True, help="comma list; a/b fractions allowed")
    s.add_argument("--out", required=True)
    s.add_argument("--csv")
    s.add_argument("--plot", help="optional PNG heatmap")
    s.set_defaults(func=cmd_spline_weights)

    s = sub.add_parser("resample", help="re-time a clip tensor")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--factor", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_resample)

    s = sub.add_parser("gen-data", help="synthetic gesture dataset")
    s.add_argument("--classes", type=int, default=7)
    s.add_argument("--per-class", type=int, default=60)
    s.add_argument("--dims", default="25x33x33")
    s.add_argument("--seed", type=int, default=1)
    s.add_argument("--noise", type=float, default=0.05)
    s.add_argument("--strips", action="store_true", help="also write PGM strips")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("parse-arch", help="canonical form and shape table")
    s.add_argument("--arch", required=True)
    s.add_argument("--input", help="TxCxHxW")
    s.add_argument("--temporal", help='e.g. "(3,2),(2,2),(2,1)"')
    s.set_defaults(func=cmd_parse_arch)

    for name, func, help_ in (("pretrain", cmd_pretrain, "layer-wise autoencoder pretraining"),
                              ("train", cmd_train, "semi-supervised multi-velocity training")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config")
        s.add_argument("--data", required=True)
        s.add_argument("--out", required=True)
        s.add_argument("--seed", type=int)
        if name == "train":
            s.add_argument("--init", help="pretrained autoencoder checkpoint")
            s.add_argument("--labeled-fraction", type=float, default=0.2)
        s.set_defaults(func=func)

    s = sub.add_parser("eval", help="confusion matrix and accuracy")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test", choices=["train", "test", "val"])
    s.add_argument("--out", required=True)
    s.add_argument("--threads", type=int, default=1,
                   help="evaluate batches on this many threads")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "threads", 1) < 1:
            raise UsageError("--threads must be at least 1")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(message)s")
        args.func(args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return EXIT_OK if not e.code else EXIT_USAGE
    except (SingularMatrixError, DivergenceError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ArchParseError, ShapeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (TensorFormatError, OSError, KeyError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
