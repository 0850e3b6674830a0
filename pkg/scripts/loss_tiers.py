"""Loss-tier comparison: CE vs CE+OE vs CE+OE+MI with SONA outliers, over seeds.

    python scripts/loss_tiers.py --workdir runs/tiers --seeds 0 1 2 3 4
"""

from __future__ import annotations

import numpy as np

from _common import base_parser, log, mean_std, seed_layout, setup, write_rows
from sona import pipeline as P

TIERS = ("ce", "ce+oe", "full")


def main():
    ap = base_parser(__doc__.splitlines()[0])
    ap.add_argument("--guidance", default="sona", choices=P.GUIDANCE_CHOICES)
    args = ap.parse_args()
    cfg, base = setup(args)
    rows = []
    for seed in args.seeds:
        scfg, lay = seed_layout(cfg, base, seed)
        P.gen_outliers(scfg, lay, args.guidance, log=log.info)
        for tier in TIERS:
            P.train_detector_stage(scfg, lay, tier, args.guidance, log=log.info)
            rep = P.evaluate(scfg, lay, tier, args.guidance, grid=False, log=log.info)
            rows.append([seed, tier, rep.get("auroc", "near_ood"), rep.get("auroc", "far_ood"), rep.get("id_accuracy", "id_test")])
    write_rows(base.workdir / "loss_tiers.csv", ["seed", "tier", "near_auroc", "far_auroc", "id_acc"], rows)
    print(f"{'loss':<8} {'near-OOD AUROC':>16} {'far-OOD AUROC':>16} {'ID acc':>16}")
    for tier in TIERS:
        sel = np.array([r[2:] for r in rows if r[1] == tier])
        print(f"{tier:<8} {mean_std(sel[:, 0]):>16} {mean_std(sel[:, 1]):>16} {mean_std(sel[:, 2]):>16}")


if __name__ == "__main__":
    main()
