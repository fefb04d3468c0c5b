"""Command-line entry point: ``anodev2 <command> [flags]``.

Exit codes: 0 success / check passed, 1 check failed, 2 usage or I/O error.
"""
import argparse
import csv
import logging
import os
import sys

import numpy as np

from . import gradcheck
from .data import LabeledBatch, load_cifar10_split, synthetic_blobs
from .models import (ARCHITECTURES, BASELINE_TARGETS, OVERHEAD_BOUNDS, VARIANTS, ModelSpec,
                     build_model, count_parameters)
from .spectral import rda_step
from .trainer import (ALEXNET_DECAYS, RESNET_DECAYS, TrainConfig, evaluate, load_checkpoint,
                      save_checkpoint, train, write_history)

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- simulate


def write_pgm(path, grid):
    """8-bit binary PGM, min-max scaled; returns (min, max) used for scaling."""
    lo, hi = float(grid.min()), float(grid.max())
    span = hi - lo
    img = np.zeros(grid.shape, np.uint8) if span == 0 else np.rint(255 * (grid - lo) / span).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{grid.shape[1]} {grid.shape[0]}\n255\n".encode())
        fh.write(img.tobytes())
    return lo, hi


def read_pgm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h], np.uint8).reshape(h, w)


def moments(grid):
    """(sum, mean_x, mean_y, variance) with cell centres at j/N on the unit square.

    ``variance`` is the per-axis second central moment averaged over x and y.
    """
    n = grid.shape[0]
    pos = np.arange(n) / n
    total = grid.sum()
    wx = grid.sum(axis=0)
    wy = grid.sum(axis=1)
    mx = (wx * pos).sum() / total
    my = (wy * pos).sum() / total
    vx = (wx * (pos - mx) ** 2).sum() / total
    vy = (wy * (pos - my) ** 2).sum() / total
    return float(total), float(mx), float(my), float((vx + vy) / 2)


def gaussian_field(n, sigma0, center=0.5):
    pos = np.arange(n) / n
    g = np.exp(-((pos - center) ** 2) / (2 * sigma0**2))
    field = np.outer(g, g)
    return field / field.sum()


def _initial_field(spec, grid):
    if spec.startswith("gaussian:"):
        return gaussian_field(grid, float(spec.split(":", 1)[1]))
    if spec.startswith("file:") or os.path.exists(spec):
        path = spec.split(":", 1)[1] if spec.startswith("file:") else spec
        arr = np.load(path) if path.endswith(".npy") else np.loadtxt(path)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise UsageError(f"initial field in {path} must be a square 2D array, got {arr.shape}")
        return arr.astype(np.float64)
    raise UsageError(f"--init must be gaussian:<sigma0> or a file, got {spec!r}")


def cmd_simulate(args):
    w = _initial_field(args.init, args.grid)
    p = (args.d, args.vx, args.vy, args.rho)
    if args.d < 0:
        raise UsageError("--d must be non-negative")
    os.makedirs(args.out, exist_ok=True)
    frames, moms = [], []
    for step in range(args.steps + 1):
        if step:
            w = rda_step(w, p, args.dt, args.sigma)
        name = f"frame_{step:03d}.pgm"
        lo, hi = write_pgm(os.path.join(args.out, name), w)
        frames.append((step, name, lo, hi))
        moms.append((step,) + moments(w))
    with open(os.path.join(args.out, "frames.csv"), "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["frame", "file", "min", "max"])
        wr.writerows([(s, n, repr(lo), repr(hi)) for s, n, lo, hi in frames])
    with open(os.path.join(args.out, "moments.csv"), "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["step", "sum", "mean_x", "mean_y", "variance"])
        wr.writerows([(m[0],) + tuple(repr(v) for v in m[1:]) for m in moms])
    print(f"wrote {len(frames)} frames to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- grad-check


def cmd_grad_check(args):
    if args.model == "scalar-system":
        report, tol = gradcheck.scalar_system_report(args.nt or 512, args.nkkt, args.eps)
    else:
        report, tol = gradcheck.tiny_resnet4_report(
            args.config, args.nt, args.ntheta, args.eps, seed=args.seed
        )
    text = report.to_csv()
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    err = report.max_error()
    ok = err <= tol
    msg = f"max relative error {err:.3e} ({'<=' if ok else '>'} {tol:.0e})"
    if report.n_excluded:
        msg += f"; {report.n_excluded} coordinates skipped (kink inside the FD stencil or below FD resolution)"
    print(msg if ok else f"FAIL: {msg}", file=sys.stderr)
    return EXIT_OK if ok else EXIT_FAIL


# ---------------------------------------------------------------- train / eval / count


def _spec_from_args(args):
    return ModelSpec(
        architecture=args.arch, variant=args.variant, precision=args.precision,
        nonlinearity=args.sigma,
    )


def _load_data(args):
    if args.data:
        if not os.path.isdir(args.data):
            raise UsageError(f"data directory {args.data!r} does not exist")
        try:
            tr, te = load_cifar10_split(args.data)
        except FileNotFoundError as e:
            raise UsageError(str(e)) from None
    elif args.synthetic:
        tr = synthetic_blobs(args.synthetic, seed=args.seed)
        te = synthetic_blobs(max(args.synthetic // 5, 10), seed=args.seed + 1)
    else:
        raise UsageError("one of --data or --synthetic is required")
    if args.subset:
        tr = LabeledBatch(tr.images[: args.subset], tr.labels[: args.subset])
    if args.test_subset:
        te = LabeledBatch(te.images[: args.test_subset], te.labels[: args.test_subset])
    return tr, te


def cmd_train(args):
    train_data, test_data = _load_data(args)
    model = build_model(_spec_from_args(args), seed=args.seed)
    if args.schedule == "paper":
        decays = ALEXNET_DECAYS if args.arch == "alexnet" else RESNET_DECAYS
        decays = tuple(d for d in decays if d < args.epochs)
    else:
        decays = ()
    cfg = TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, lr0=args.lr, decay_epochs=decays,
        momentum=args.momentum, weight_decay=args.weight_decay, seed=args.seed,
        augment=not args.no_augment,
    )
    os.makedirs(args.out, exist_ok=True)
    hist = train(model, train_data, cfg, test_data, out_dir=args.out)
    save_checkpoint(model, os.path.join(args.out, "final.anv2"))
    write_history(hist, os.path.join(args.out, "history.csv"))
    print(f"final test accuracy {hist[-1]['test_acc']:.4f}")
    return EXIT_OK


def cmd_eval(args):
    _, test_data = _load_data(args)
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
    else:
        model = build_model(_spec_from_args(args), seed=args.seed)
    loss, acc = evaluate(model, test_data)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "eval.csv"), "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["n", "loss", "accuracy"])
            wr.writerow([len(test_data), repr(loss), repr(acc)])
    print(f"accuracy {acc:.4f} loss {loss:.4f} over {len(test_data)} images")
    return EXIT_OK


def check_param_report(arch, variant, total):
    """(ok, message) for a parameter total against the published figures."""
    base = BASELINE_TARGETS[arch]
    if variant == "baseline":
        ok = abs(total - base) <= 10
        return ok, f"total {total} vs target {base}"
    over = total / base - 1
    bound = OVERHEAD_BOUNDS[variant]
    return 0 <= over <= bound, f"total {total}, overhead {100 * over:.2f}% (bound {100 * bound:.1f}%)"


def cmd_count_params(args):
    model = build_model(ModelSpec(args.arch, args.variant))
    report = count_parameters(model)
    text = report.to_csv()
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write(text)
    sys.stdout.write(text)
    ok, msg = check_param_report(args.arch, args.variant, report.total)
    print(msg if ok else f"FAIL: {msg}", file=sys.stderr)
    return EXIT_OK if ok else EXIT_FAIL


# ---------------------------------------------------------------- parser


def build_parser():
    ap = argparse.ArgumentParser(prog="anodev2", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="evolve a 2D field with the RDA operator and dump frames")
    s.add_argument("--grid", type=int, default=64)
    s.add_argument("--d", type=float, default=0.0)
    s.add_argument("--vx", type=float, default=0.0)
    s.add_argument("--vy", type=float, default=0.0)
    s.add_argument("--rho", type=float, default=0.0)
    s.add_argument("--steps", type=int, default=10)
    s.add_argument("--dt", type=float, default=0.01)
    s.add_argument("--sigma", choices=("tanh", "identity"), default="identity")
    s.add_argument("--init", default="gaussian:0.05")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    g = sub.add_parser("grad-check", help="compare DTO gradients with FD (and the adjoint solver)")
    g.add_argument("--model", choices=("tiny-resnet4", "scalar-system"), default="tiny-resnet4")
    g.add_argument("--config", type=int, choices=(1, 2), default=1)
    g.add_argument("--nt", type=int, default=None)
    g.add_argument("--ntheta", type=int, default=None)
    g.add_argument("--nkkt", type=int, default=4096)
    g.add_argument("--eps", type=float, default=1e-5)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out")
    g.set_defaults(func=cmd_grad_check)

    def model_flags(q):
        q.add_argument("--arch", choices=ARCHITECTURES, default="resnet4")
        q.add_argument("--variant", choices=VARIANTS, default="baseline")
        q.add_argument("--precision", choices=("float64", "float32"), default="float32")
        q.add_argument("--sigma", choices=("tanh", "identity"), default="tanh")
        q.add_argument("--seed", type=int, default=0)

    def data_flags(q):
        q.add_argument("--data", help="CIFAR-10 binary directory")
        q.add_argument("--synthetic", type=int, help="use N synthetic blob images instead")
        q.add_argument("--subset", type=int)
        q.add_argument("--test-subset", type=int)

    t = sub.add_parser("train", help="train a model")
    model_flags(t)
    data_flags(t)
    t.add_argument("--epochs", type=int, default=1)
    t.add_argument("--batch-size", type=int, default=256)
    t.add_argument("--lr", type=float, default=0.1)
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--weight-decay", type=float, default=5e-4)
    t.add_argument("--schedule", choices=("paper", "constant"), default="paper")
    t.add_argument("--no-augment", action="store_true")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint or a freshly initialized model")
    model_flags(e)
    data_flags(e)
    e.add_argument("--checkpoint")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("count-params", help="parameter report against the published totals")
    c.add_argument("--arch", choices=ARCHITECTURES, default="resnet4")
    c.add_argument("--variant", choices=VARIANTS, default="baseline")
    c.add_argument("--csv")
    c.set_defaults(func=cmd_count_params)
    return ap


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as e:
        print(f"FAIL: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
