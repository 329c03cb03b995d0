"""Command-line entry point: dataset generation, training, inspection.

Exit codes: 0 success, 2 bad arguments or configuration, 3 missing or
corrupt data (and other I/O failures), 4 numeric aborts.  Every command
prints its resolved configuration up front, and none of the output lines
carry timestamps, so identical invocations produce identical output.
"""

import argparse
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import PartitionManifest, generate_dataset, load_sample, split
from .errors import ArgumentError, DataError, NumericError
from .hardness import evaluate_hardness
from .model import init_pair, load_checkpoint
from .trainer import TrainConfig, evaluate_miou, run

INSPECT_HEADER = ("instance_id", "gamma", "rho_s", "rho_t", "wiou_st",
                  "wiou_ts")


def _print_config(args):
    pairs = [f"{k}={v}" for k, v in sorted(vars(args).items())
             if k != "func"]
    print("config: " + " ".join(pairs))


# -------------------------------------------------------------- commands --

def cmd_gen_data(args):
    manifest = generate_dataset(args.out, args.n_train, args.n_val,
                                args.size, args.size, args.classes,
                                args.seed)
    print(f"wrote {args.n_train} train / {args.n_val} val scenes "
          f"({args.size}x{args.size}, K={args.classes}) under "
          f"{manifest.root}")


def cmd_split(args):
    manifest = PartitionManifest.load(args.data)
    manifest = split(manifest, args.fraction, args.seed)
    manifest.save()
    print(f"labeled={len(manifest.labeled)} "
          f"unlabeled={len(manifest.unlabeled)}")


def cmd_train(args):
    manifest = PartitionManifest.load(args.data)
    if args.fraction is not None:
        manifest = split(manifest, args.fraction, args.seed)
        manifest.save()
        print(f"split: labeled={len(manifest.labeled)} "
              f"unlabeled={len(manifest.unlabeled)}")
    config = TrainConfig(
        mode=args.mode, tau=args.tau, lambda_u=args.lambda_u,
        alpha=args.alpha, batch_size=args.batch, epochs=args.epochs,
        base_lr=args.base_lr, momentum=args.momentum,
        poly_power=args.poly_power, seed=args.seed,
        blend_direction=args.blend_direction,
        cutmix_trigger=args.cutmix_trigger, eval_every=args.eval_every,
        eval_model=args.eval_model, out_dir=args.out, dtype=args.dtype)
    result = run(config, manifest)
    print(f"steps={result.total_steps} best_val_miou={result.best_val_miou!r}")
    print(f"final_miou: student={result.final_val_miou_student!r} "
          f"teacher={result.final_val_miou_teacher!r}")
    print(f"outputs: {result.metrics_path} {result.hardness_path}")


def cmd_eval(args):
    manifest = PartitionManifest.load(args.data)
    pair, _state = load_checkpoint(args.checkpoint)
    net = pair.teacher if args.model == "teacher" else pair.student
    ids = args.ids if args.ids else manifest.val
    miou, per_class = evaluate_miou(net, ids, manifest)
    print(f"miou={miou!r} over {len(ids)} images ({args.model})")
    for c, v in enumerate(per_class):
        print(f"class_{c}=" + ("absent" if np.isnan(v) else repr(float(v))))


def cmd_inspect_hardness(args):
    manifest = PartitionManifest.load(args.data)
    valid = sorted(set(manifest.labeled) | set(manifest.unlabeled)
                   | set(manifest.val))
    unknown = [sid for sid in args.ids if sid not in set(valid)]
    if unknown:
        shown = ", ".join(valid[:64])
        more = "" if len(valid) <= 64 else f", ... ({len(valid)} total)"
        raise ArgumentError(
            f"unknown instance ids {unknown}; valid ids: {shown}{more}")
    if args.checkpoint is not None:
        pair, _state = load_checkpoint(args.checkpoint)
    else:
        pair = init_pair(manifest.k, args.seed)
    images = np.stack([np.asarray(load_sample(manifest, sid).image)
                       for sid in args.ids])
    with T.no_grad():
        p_s = T.softmax_channels(
            pair.student.forward(T.Tensor(images))).data
        p_t = T.softmax_channels(
            pair.teacher.forward(T.Tensor(images))).data
    rows = []
    for i, sid in enumerate(args.ids):
        r = evaluate_hardness(p_t[i], p_s[i], args.tau)
        rows.append((sid, r.gamma, r.rho_s, r.rho_t, r.wiou_st, r.wiou_ts))

    widths = [max(len(INSPECT_HEADER[0]), max(len(r[0]) for r in rows))]
    print("  ".join([INSPECT_HEADER[0].ljust(widths[0])]
                    + [h.rjust(9) for h in INSPECT_HEADER[1:]]))
    for row in rows:
        print("  ".join([row[0].ljust(widths[0])]
                        + [f"{v:9.6f}" for v in row[1:]]))
    if args.out is not None:
        with open(args.out, "w", newline="") as fh:
            fh.write(",".join(INSPECT_HEADER) + "\n")
            for row in rows:
                fh.write(",".join([row[0]] + [repr(float(v))
                                              for v in row[1:]]) + "\n")
        print(f"wrote {args.out}")


def cmd_export_plots_data(args):
    header = None
    merged = []
    for rdir in args.runs:
        path = Path(rdir) / f"{args.what}.csv"
        if not path.exists():
            raise DataError(f"no {args.what}.csv under {rdir}")
        lines = path.read_text().splitlines()
        if not lines:
            raise DataError(f"{path}: empty file")
        if header is None:
            header = lines[0]
        elif lines[0] != header:
            raise DataError(f"{path}: header {lines[0]!r} does not match "
                            f"{header!r}")
        run_name = Path(rdir).name
        merged.extend(f"{run_name},{line}" for line in lines[1:])
    with open(args.out, "w", newline="") as fh:
        fh.write("run," + header + "\n")
        for line in merged:
            fh.write(line + "\n")
    print(f"wrote {len(merged)} rows from {len(args.runs)} runs to "
          f"{args.out}")


# --------------------------------------------------------------- parsing --

def build_parser():
    parser = argparse.ArgumentParser(
        prog="imas",
        description="Instance-adaptive semi-supervised segmentation, "
                    "desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_):
        p = sub.add_parser(
            name, help=help_,
            formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        return p

    p = command("gen-data", "render a synthetic shapes dataset")
    p.add_argument("--out", required=True, help="dataset directory")
    p.add_argument("--n-train", type=int, default=256,
                   help="training scenes")
    p.add_argument("--n-val", type=int, default=64, help="validation scenes")
    p.add_argument("--size", type=int, default=32,
                   help="scene height and width")
    p.add_argument("--classes", type=int, default=4,
                   help="classes incl. background")
    p.add_argument("--seed", type=int, default=7, help="generation seed")
    p.set_defaults(func=cmd_gen_data)

    p = command("split", "carve the labeled subset out of the train pool")
    p.add_argument("--data", required=True, help="path to manifest.json")
    p.add_argument("--fraction", required=True,
                   help="labeled fraction, e.g. 1/16, or an integer count")
    p.add_argument("--seed", type=int, default=0, help="split seed")
    p.set_defaults(func=cmd_split)

    p = command("train", "train one model per the configured mode")
    p.add_argument("--data", required=True, help="path to manifest.json")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--mode", default="imas",
                   choices=("supervised", "standard_cr", "imas"),
                   help="training regime")
    p.add_argument("--fraction", default=None,
                   help="re-split before training and persist the result")
    p.add_argument("--tau", type=float, default=0.95,
                   help="pseudo-label confidence threshold")
    p.add_argument("--lambda-u", type=float, default=3.0,
                   help="unsupervised loss weight")
    p.add_argument("--alpha", type=float, default=0.996,
                   help="teacher EMA decay")
    p.add_argument("--epochs", type=int, default=40, help="training epochs")
    p.add_argument("--batch", type=int, default=8, help="batch size")
    p.add_argument("--base-lr", type=float, default=0.01,
                   help="initial learning rate")
    p.add_argument("--momentum", type=float, default=0.9,
                   help="SGD momentum")
    p.add_argument("--poly-power", type=float, default=0.9,
                   help="polynomial lr-decay exponent")
    p.add_argument("--seed", type=int, default=0, help="run seed")
    p.add_argument("--blend-direction", default="prose",
                   choices=("prose", "literal"),
                   help="how hardness maps to the blend weight")
    p.add_argument("--cutmix-trigger", default="prose",
                   choices=("prose", "probability_mean"),
                   help="how mean hardness gates CutMix")
    p.add_argument("--eval-every", type=int, default=5,
                   help="evaluation period in epochs")
    p.add_argument("--eval-model", default="student",
                   choices=("student", "teacher"),
                   help="which net the logged mIoU uses")
    p.add_argument("--dtype", default="float32",
                   choices=("float32", "float64"), help="parameter dtype")
    p.set_defaults(func=cmd_train)

    p = command("eval", "mIoU of a checkpoint over validation images")
    p.add_argument("--data", required=True, help="path to manifest.json")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--model", default="student",
                   choices=("student", "teacher"),
                   help="which half of the pair to evaluate")
    p.add_argument("--ids", nargs="*", default=None,
                   help="evaluate these ids instead of the val set")
    p.set_defaults(func=cmd_eval)

    p = command("inspect-hardness",
                "recompute per-instance hardness on un-augmented images")
    p.add_argument("--data", required=True, help="path to manifest.json")
    p.add_argument("--checkpoint", default=None,
                   help="model pair to probe (default: fresh seeded pair)")
    p.add_argument("--ids", nargs="+", required=True,
                   help="instance ids to probe")
    p.add_argument("--tau", type=float, default=0.95,
                   help="pseudo-label confidence threshold")
    p.add_argument("--seed", type=int, default=0,
                   help="init seed when no checkpoint is given")
    p.add_argument("--out", default=None, help="also write a CSV here")
    p.set_defaults(func=cmd_inspect_hardness)

    p = command("export-plots-data",
                "merge per-run CSV logs into one long-format table")
    p.add_argument("--runs", nargs="+", required=True,
                   help="run output directories")
    p.add_argument("--out", required=True, help="merged CSV destination")
    p.add_argument("--what", default="metrics",
                   choices=("metrics", "hardness"),
                   help="which per-run log to merge")
    p.set_defaults(func=cmd_export_plots_data)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        _print_config(args)
        args.func(args)
        return 0
    except ArgumentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
