"""Segmentation ablation sweep: full vs PLAM-only, and FPS / random / center reference init.

Writes results/ablations.json (resumable) and prints a summary table.
"""

import argparse
import sys
from pathlib import Path

from pdnet.experiments import AblationSetup, run_ablation


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "results" / "ablations.json"))
    ap.add_argument("--epochs", type=int, default=AblationSetup.epochs)
    ap.add_argument("--seeds", default="0,1,2")
    args = ap.parse_args(argv)
    setup = AblationSetup(epochs=args.epochs, seeds=tuple(int(s) for s in args.seeds.split(",")))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    res = run_ablation(setup, log=lambda m: print(m, flush=True), results_path=args.out)
    print(f"kNN floor: mIoU {res['knn_floor']['miou']:.4f} OA {res['knn_floor']['oa']:.4f}")
    for arm, row in res["summary"].items():
        print(f"{arm:12s} mIoU {row['mean']:.4f} +- {row['std']:.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
