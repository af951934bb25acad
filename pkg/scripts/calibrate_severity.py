"""Check a severity table against the two calibration targets.

1. Mean squared distortion on the fixed calibration set rises strictly with
   severity for every kind.
2. A plainly trained desk classifier's error is nondecreasing in severity
   for at least 12 of the 15 kinds.

Prints one row per kind and exits 1 when either target is missed.

    python3 scripts/calibrate_severity.py [--table path.json] [--epochs 10]
"""
import argparse
import sys

import numpy as np

from vita.corruptions import KINDS, SEVERITIES, SeverityTable, build_corruption_suite, distortion_curve
from vita.datasets import SyntheticDatasetSpec, generate_synthetic_dataset
from vita.metrics import evaluate_suite
from vita.networks import Classifier
from vita.training import TrainConfig, train_erm


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--table")
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    table = SeverityTable.load(args.table) if args.table else SeverityTable.default()

    ds = generate_synthetic_dataset(SyntheticDatasetSpec(n_train=512, n_test=200, seed=args.seed, contrast=0.35))
    model = Classifier(3, ds.train.n_classes, 16, seed=args.seed)
    train_erm(model, ds.train, TrainConfig(epochs=args.epochs, seed=args.seed))
    errors = evaluate_suite(model, build_corruption_suite(ds.test, table, seed=args.seed))

    strict, monotone_err = 0, 0
    print(f"{'kind':16s} {'distortion by severity':52s} error by severity")
    for kind in KINDS:
        dist = distortion_curve(kind, table)
        err = [errors.errors[(kind, s)] for s in SEVERITIES]
        d_ok = all(b > a for a, b in zip(dist, dist[1:]))
        e_ok = all(b >= a for a, b in zip(err, err[1:]))
        strict += d_ok
        monotone_err += e_ok
        print(f"{kind:16s} {' '.join(f'{v:.5f}' for v in dist)} {'ok ' if d_ok else 'BAD'}  "
              f"{' '.join(f'{v:.3f}' for v in err)} {'ok' if e_ok else '--'}")
    print(f"strictly monotone distortion: {strict}/15; nondecreasing error: {monotone_err}/15")
    return 0 if strict == len(KINDS) and monotone_err >= 12 else 1


if __name__ == "__main__":
    sys.exit(main())
