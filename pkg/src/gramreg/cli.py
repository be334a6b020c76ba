"""Command line: gen-data, train, eval, gradcheck, sweep.

Exit codes: 0 success, 2 usage, 3 divergence, 4 artifact mismatch,
5 gradient check failure.
"""

import argparse
import csv
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import data, gradcheck
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, DomainError, FormatError, TrainingError
from .network import build_spec
from .retrieval import evaluate
from .train import TrainConfig, fit, write_loss_csv

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_MISMATCH, EXIT_GRADCHECK = 0, 2, 3, 4, 5

ARCH_FLAGS = {"view-cnn": "view_cnn", "mvcnn": "mvcnn", "cnn-lstm": "cnn_lstm"}

# CLI flag -> TrainConfig field
TRAIN_FLAGS = {
    "arch": "architecture",
    "lr": "base_lr",
    "epochs": "total_epochs",
    "lambda1": "lambda1",
    "lambda2": "lambda2",
    "seed": "seed",
    "batch_size": "batch_size",
    "momentum": "momentum",
    "lr_drop_epoch": "lr_drop_epoch",
    "lr_drop_factor": "lr_drop_factor",
    "precision": "precision",
    "step_lrs": "step_lrs",
    "step_epochs": "step_epochs",
}


class UsageError(Exception):
    pass


def _csv_floats(text):
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    return vals


def _csv_ints(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _add_train_flags(p):
    p.add_argument("--data", required=True, help="dataset directory (from gen-data)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="key = value file of TrainConfig fields; flags override it")
    p.add_argument("--arch", choices=sorted(ARCH_FLAGS))
    p.add_argument("--lambda1", type=float, help="weight of the cross-kernel Gram term")
    p.add_argument("--lambda2", type=float, help="weight of the L2 term")
    p.add_argument("--lr", type=float, help="base learning rate")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--momentum", type=float)
    p.add_argument("--lr-drop-epoch", type=int)
    p.add_argument("--lr-drop-factor", type=float)
    p.add_argument("--precision", choices=["single", "double"])
    p.add_argument("--step-lrs", help="cnn-lstm: three comma-separated base lrs")
    p.add_argument("--step-epochs", help="cnn-lstm: three comma-separated epoch counts")


def build_parser():
    parser = argparse.ArgumentParser(prog="gramreg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a synthetic multi-view dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--classes", type=int, default=len(data.DEFAULT_CLASSES),
                   help=f"number of classes, taken in order from {','.join(data.DEFAULT_CLASSES)}")
    g.add_argument("--shapes-per-class", type=int, default=50)
    g.add_argument("--test-fraction", type=float, default=0.2)
    g.add_argument("--views", type=int, default=8)
    g.add_argument("--size", type=int, default=32)

    t = sub.add_parser("train", help="train a network and write checkpoint + loss curve")
    _add_train_flags(t)

    e = sub.add_parser("eval", help="retrieval MAP/AUC of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=["train", "test"], default="test")
    e.add_argument("--out", help="directory for metric CSVs (default: beside the checkpoint)")

    c = sub.add_parser("gradcheck", help="finite-difference verification of all gradients")
    c.add_argument("--layout", choices=["fc", "conv", "lstm", "network"], required=True)
    c.add_argument("--trials", type=int, default=20)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--cross-factor", type=float, default=2.0,
                   help="multiplier on the cross-term gradient; anything but 2 must fail (regression guard)")

    s = sub.add_parser("sweep", help="hyper-parameter sweep over values x seeds")
    _add_train_flags(s)
    s.add_argument("--param", choices=["lambda1", "lambda2", "views", "lr"], required=True)
    s.add_argument("--values", type=_csv_floats, required=True)
    s.add_argument("--seeds", type=_csv_ints, default=[0])
    s.add_argument("--jobs", type=int, default=1, help="concurrent sub-runs")
    return parser


def resolve_train_config(args, overrides=None):
    kv = {}
    if args.config:
        try:
            kv.update(data.read_kv(args.config))
        except OSError as e:
            raise UsageError(f"cannot read config {args.config}: {e.strerror}") from None
    for flag, key in TRAIN_FLAGS.items():
        val = getattr(args, flag, None)
        if val is not None:
            kv[key] = ARCH_FLAGS[val] if flag == "arch" else val
    kv.update(overrides or {})
    return TrainConfig.from_mapping(kv)


def _write_resolved(cfg, path):
    Path(path).write_text("\n".join(cfg.to_lines()) + "\n", encoding="utf-8")


def run_training(cfg, dataset, out_dir):
    """Train, then write checkpoint, loss curve and resolved config under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_resolved(cfg, out_dir / "train.cfg")
    m = dataset.manifest
    spec = build_spec(cfg.architecture, len(m.classes), m.views, m.size)
    state, rows = fit(spec, dataset, cfg)
    save_checkpoint(state, out_dir / "checkpoint.bin")
    write_loss_csv(rows, out_dir / "loss.csv")
    return state, rows


def cmd_gen_data(args):
    if not 2 <= args.classes <= len(data.DEFAULT_CLASSES):
        raise UsageError(f"--classes must be between 2 and {len(data.DEFAULT_CLASSES)}")
    train_n, test_n = data.split_counts(args.shapes_per_class, args.test_fraction)
    manifest = data.DatasetManifest(
        classes=list(data.DEFAULT_CLASSES[:args.classes]),
        train_per_class=train_n,
        test_per_class=test_n,
        views=args.views,
        size=args.size,
        seed=args.seed,
    )
    ds = data.generate(manifest, args.out)
    n_train = sum(s.split == "train" for s in ds.samples)
    print(f"wrote {len(ds.samples)} shapes ({n_train} train, {len(ds.samples) - n_train} test), "
          f"{len(ds.samples) * manifest.views} views to {args.out}")
    return EXIT_OK


def cmd_train(args):
    cfg = resolve_train_config(args)
    dataset = data.load(args.data)
    print("\n".join(cfg.to_lines()))
    try:
        _, rows = run_training(cfg, dataset, args.out)
    except TrainingError as e:
        print(f"error: training diverged at epoch {e.epoch}: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    last = rows[-1]
    print(f"final epoch {last[0]} step {last[1]}: softmax={last[3]:.6g} gram_cross={last[4]:.6g} gram_l2={last[5]:.6g}")
    return EXIT_OK


def _check_compatible(state, dataset):
    spec, m = state.net.spec, dataset.manifest
    problems = []
    if spec.image_size != m.size:
        problems.append(f"image size {m.size} != network input {spec.image_size}")
    if spec.num_classes != len(m.classes):
        problems.append(f"{len(m.classes)} classes != network's {spec.num_classes}")
    if spec.architecture != "view_cnn" and spec.views != m.views:
        problems.append(f"{m.views} views != network's {spec.views}")
    return problems


def cmd_eval(args):
    state = load_checkpoint(args.checkpoint)
    dataset = data.load(args.data)
    problems = _check_compatible(state, dataset)
    if problems:
        print("error: checkpoint/dataset mismatch: " + "; ".join(problems), file=sys.stderr)
        return EXIT_MISMATCH
    report = evaluate(state.net, dataset, args.split)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    (out / f"metrics_{args.split}.csv").write_text(report.per_query_csv(), encoding="utf-8")
    (out / f"summary_{args.split}.csv").write_text(report.summary_csv(), encoding="utf-8")
    (out / f"pr_{args.split}.csv").write_text(report.pr_csv(), encoding="utf-8")
    print(report.summary())
    if report.excluded:
        print(f"excluded queries without relevant items: {report.excluded}")
    return EXIT_OK


def cmd_gradcheck(args):
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    results = gradcheck.run(args.layout, trials=args.trials, seed=args.seed, cross_factor=args.cross_factor)
    failed = False
    for r in results:
        status = "ok" if r.ok else "FAIL"
        line = f"{r.name:<12} worst relative error {r.worst:.3e} (tol {r.tol:.0e}) {status}"
        if r.strict is not None:
            line += f"  [unfloored {r.strict:.3e}]"
        print(line)
        if not r.ok:
            failed = True
            print(f"  failing element: {r.where}", file=sys.stderr)
    return EXIT_GRADCHECK if failed else EXIT_OK


def _sweep_one(job):
    """One (value, seed) sub-run in its own directory; never raises."""
    cfg_kv, data_dir, out_dir = job
    try:
        cfg = TrainConfig.from_mapping(cfg_kv)
        dataset = data.load(data_dir)
        state, _ = run_training(cfg, dataset, out_dir)
        report = evaluate(state.net, dataset, "test")
        return report.map, report.auc, "ok"
    except Exception as e:  # recorded in the table, sweep continues
        return float("nan"), float("nan"), f"{type(e).__name__}: {e}".replace("\n", " ")


def cmd_sweep(args):
    if not args.values:
        raise UsageError("--values needs at least one value")
    if not args.seeds:
        raise UsageError("--seeds needs at least one seed")
    base = resolve_train_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_resolved(base, out / "sweep_base.cfg")
    base_kv = {line.split(" = ")[0]: line.split(" = ", 1)[1] for line in base.to_lines()}
    base_manifest = data.load(args.data).manifest if args.param == "views" else None

    jobs, keys = [], []
    for value in args.values:
        data_dir = args.data
        if args.param == "views":
            if value != int(value) or value < 1:
                raise UsageError(f"view counts must be positive integers, got {value}")
            value = int(value)
            data_dir = out / f"data_views{value}"
            m = base_manifest
            data.generate(data.DatasetManifest(m.classes, m.train_per_class, m.test_per_class, value, m.size, m.seed), data_dir)
        for seed in args.seeds:
            kv = dict(base_kv, seed=str(seed))
            if args.param in ("lambda1", "lambda2"):
                kv[args.param] = repr(float(value))
            elif args.param == "lr":
                kv["base_lr"] = repr(float(value))
            jobs.append((kv, str(data_dir), str(out / f"{args.param}={value}" / f"seed{seed}")))
            keys.append((value, seed))

    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_sweep_one, jobs))
    else:
        results = [_sweep_one(j) for j in jobs]

    with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "param", "value", "seed", "map", "auc", "map_std", "auc_std", "status"])
        for (value, seed), (m, a, status) in zip(keys, results):
            w.writerow(["run", args.param, value, seed, repr(m), repr(a), "", "", status])
        for value in dict.fromkeys(v for v, _ in keys):
            rs = [r for (v, _), r in zip(keys, results) if v == value and r[2] == "ok"]
            maps = np.array([r[0] for r in rs])
            aucs = np.array([r[1] for r in rs])
            n_ok = len(rs)
            mean = lambda x: repr(float(x.mean())) if len(x) else "nan"  # noqa: E731
            std = lambda x: repr(float(x.std())) if len(x) else "nan"  # noqa: E731
            w.writerow(["mean", args.param, value, f"n={n_ok}", mean(maps), mean(aucs), std(maps), std(aucs),
                        "ok" if n_ok == len(args.seeds) else f"{len(args.seeds) - n_ok} failed"])
    failed = sum(r[2] != "ok" for r in results)
    print(f"{len(results)} runs, {failed} failed; table in {out / 'sweep.csv'}")
    for value in dict.fromkeys(v for v, _ in keys):
        rs = [r for (v, _), r in zip(keys, results) if v == value and r[2] == "ok"]
        if rs:
            maps = np.array([r[0] for r in rs])
            print(f"  {args.param}={value}: MAP {maps.mean():.4f} +- {maps.std():.4f}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "sweep": cmd_sweep,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FormatError, DomainError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISMATCH


if __name__ == "__main__":
    sys.exit(main())
