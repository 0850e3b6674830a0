"""Sensitivity to the mask fraction lambda and the guidance scale s, per seed.

    python scripts/robustness.py --workdir runs/robust --seeds 0
"""

from __future__ import annotations

import csv

import numpy as np

from _common import base_parser, log, seed_layout, setup
from sona import pipeline as P

GRIDS = {"lambda": ["0.1", "0.15", "0.2", "0.25"], "s": ["5", "10", "15", "20"]}


def main():
    ap = base_parser(__doc__.splitlines()[0])
    ap.add_argument("--tier", default="full", choices=("ce+oe", "full"))
    args = ap.parse_args()
    cfg, base = setup(args)
    for sweep, values in GRIDS.items():
        table = {v: [] for v in values}
        for seed in args.seeds:
            scfg, lay = seed_layout(cfg, base, seed)
            path = P.ablate(scfg, lay, sweep, values, args.tier, "sona", log=log.info)
            with open(path, newline="") as fh:
                for row, v in zip(csv.DictReader(fh), values):
                    table[v].append(float(row["near_ood_auroc"]))
        means = [np.mean(table[v]) for v in values]
        print(f"{sweep}: " + "  ".join(f"{v}={100 * m:.2f}" for v, m in zip(values, means)) + f"  spread {100 * (max(means) - min(means)):.2f} pts")


if __name__ == "__main__":
    main()
