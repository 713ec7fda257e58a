"""AUROC against the number of sampled generations B on the synthetic world.

    python3 scripts/efficiency_sweep.py --B 1 2 3 5 10 --seeds 0 1 2
"""

import argparse
import sys
from collections import defaultdict

import numpy as np

from raruq.experiments import seed_sweep
from raruq.synthworld import WorldSpec


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--B", type=int, nargs="+", default=[1, 2, 3, 5, 10])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--methods", nargs="+", default=["R2C", "SelfC"])
    ap.add_argument("--n-queries", type=int, default=200)
    args = ap.parse_args()

    rows = seed_sweep(WorldSpec(n_queries=args.n_queries), args.seeds, args.methods, args.B)
    table = defaultdict(list)
    for r in rows:
        table[(r.method, r.B)].append(r)
    print(f"{'method':8s} {'B':>3s} {'AUROC':>7s} {'tokens/query':>13s}")
    for (m, b), rs in sorted(table.items()):
        auc = np.mean([r.auroc for r in rs])
        tok = np.mean([r.mean_tokens for r in rs]) * b
        print(f"{m:8s} {b:3d} {auc:7.4f} {tok:13.1f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
