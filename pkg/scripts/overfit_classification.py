"""Overfit PDNet-S on 4 synthetic shape classes x 16 clouds x 512 points.

Stops once training accuracy reaches the target; writes the epoch history
to results/overfit.json.
"""

import argparse
import json
import sys
from pathlib import Path

from pdnet.experiments import overfit_classification


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--epochs", type=int, default=200)
    ap.add_argument("--target", type=float, default=0.95)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "results" / "overfit.json"))
    args = ap.parse_args(argv)
    res = overfit_classification(epochs=args.epochs, target=args.target, seed=args.seed,
                                 log=lambda m: print(m, flush=True))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(res.__dict__, indent=1))
    print(f"train accuracy {res.final_train_accuracy:.3f} after {res.epochs_run} epochs ({res.seconds:.0f}s)")
    return 0 if res.best_train_accuracy >= args.target else 1


if __name__ == "__main__":
    sys.exit(main())
