"""Train ResNet-4 baseline and ODE variants side by side at desk scale.

Uses CIFAR-10 binary batches when --data is given, otherwise the synthetic
blob set. Writes one history CSV per variant plus a summary table.

    python3 scripts/desk_training.py --epochs 5 --n-train 1000 --out runs/desk
    python3 scripts/desk_training.py --data data/cifar-10-batches-bin --n-train 5000 --n-test 1000 --epochs 20
"""
import argparse
import csv
import logging
import os
import time

from anodev2.data import LabeledBatch, load_cifar10_split, synthetic_blobs
from anodev2.models import ModelSpec, build_model, count_parameters
from anodev2.trainer import TrainConfig, train


def load(args):
    if args.data:
        tr, te = load_cifar10_split(args.data)
    else:
        tr = synthetic_blobs(args.n_train, seed=args.seed, noise=args.noise)
        te = synthetic_blobs(args.n_test, seed=args.seed + 1, noise=args.noise)
    return (LabeledBatch(tr.images[:args.n_train], tr.labels[:args.n_train]),
            LabeledBatch(te.images[:args.n_test], te.labels[:args.n_test]))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data")
    ap.add_argument("--n-train", type=int, default=1000)
    ap.add_argument("--n-test", type=int, default=200)
    ap.add_argument("--noise", type=float, default=1.0)
    ap.add_argument("--variants", nargs="+", default=["baseline", "anodev2_c1", "anodev2_c2"])
    ap.add_argument("--epochs", type=int, default=5)
    ap.add_argument("--batch-size", type=int, default=128)
    ap.add_argument("--lr", type=float, default=0.05)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/desk")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    tr, te = load(args)
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr0=args.lr, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    rows = []
    for variant in args.variants:
        model = build_model(ModelSpec("resnet4", variant, precision="float32"), seed=args.seed)
        t0 = time.perf_counter()
        hist = train(model, tr, cfg, te, out_dir=os.path.join(args.out, variant))
        rows.append({"variant": variant, "params": count_parameters(model).total,
                     "final_loss": f"{hist[-1]['train_loss']:.4f}", "test_acc": f"{hist[-1]['test_acc']:.4f}",
                     "seconds": f"{time.perf_counter() - t0:.1f}"})
    with open(os.path.join(args.out, "summary.csv"), "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=list(rows[0]))
        wr.writeheader()
        wr.writerows(rows)
    for r in rows:
        print(", ".join(f"{k} {v}" for k, v in r.items()))


if __name__ == "__main__":
    main()
