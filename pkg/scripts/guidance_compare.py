"""SONA vs global guidance: detector AUROC over seeds, and outlier statistics
as a function of a fixed early-stop step (pixel distance, background MSE,
probe-measured semantic shift).

    python scripts/guidance_compare.py --workdir runs/guidance --tilde-ts 10 20 30 40 50
"""

from __future__ import annotations

import numpy as np

from _common import base_parser, log, mean_std, seed_layout, setup, write_rows
from sona import config as C
from sona import pipeline as P
from sona.guidance import generate_outlier_set
from sona.metrics import nuisance_retention_batch, semantic_shift
from sona.substrate import derive_seed

GUIDANCE = ("sona", "global")


def detector_table(cfg, base, seeds, tier):
    rows = []
    for seed in seeds:
        scfg, lay = seed_layout(cfg, base, seed)
        for g in GUIDANCE:
            P.gen_outliers(scfg, lay, g, log=log.info)
            P.train_detector_stage(scfg, lay, tier, g, log=log.info)
            rep = P.evaluate(scfg, lay, tier, g, grid=g == "global", log=log.info)
            nr = rep.get("nuisance_retention", f"outliers_{g}")
            rows.append([seed, g, rep.get("auroc", "near_ood"), rep.get("auroc", "far_ood"), nr])
    return rows


def tilde_sweep(cfg, base, tilde_ts, n):
    splits = P.load_data(cfg, base)
    den = P.load_denoiser(cfg, base)
    probe = P.get_probe(cfg, base, splits, log=log.info)
    targets = P.id_targets(splits, splits.id_train.labels[:n])
    tr = splits.id_train
    rows = []
    for t in tilde_ts:
        for g in GUIDANCE:
            sona = C.with_overrides(cfg, sona__tilde_t=t).sona.sona()
            o = generate_outlier_set(den, P.schedule_of(cfg), tr.images[:n], tr.labels[:n], splits.ood_prompt_labels,
                                     sona, seed=derive_seed(cfg.run.seed, "tilde-sweep"), guidance=g)
            pix = ((o.images - tr.images[:n]) ** 2).mean(axis=(1, 2, 3))
            bg = nuisance_retention_batch(tr.images[:n], tr.masks[:n], o.images)
            shift = semantic_shift(probe, o.images, targets)
            rows.append([t, g, float(pix.mean()), float(bg.mean()), float(shift.mean())])
            log.info(f"T~={t} {g}: pixel MSE {pix.mean():.4f} background MSE {bg.mean():.4f} semantic shift {shift.mean():.3f}")
    return rows


def main():
    ap = base_parser(__doc__.splitlines()[0])
    ap.add_argument("--tier", default="full", choices=("ce+oe", "full"))
    ap.add_argument("--tilde-ts", type=int, nargs="*", default=[10, 20, 30, 40, 50])
    ap.add_argument("--sweep-samples", type=int, default=256)
    args = ap.parse_args()
    cfg, base = setup(args)

    rows = detector_table(cfg, base, args.seeds, args.tier)
    write_rows(base.workdir / "guidance_detectors.csv", ["seed", "guidance", "near_auroc", "far_auroc", "background_mse"], rows)
    print(f"{'guidance':<8} {'near-OOD AUROC':>16} {'far-OOD AUROC':>16}")
    for g in GUIDANCE:
        sel = np.array([r[2:4] for r in rows if r[1] == g])
        print(f"{g:<8} {mean_std(sel[:, 0]):>16} {mean_std(sel[:, 1]):>16}")

    if args.tilde_ts:
        sweep = tilde_sweep(cfg, base, args.tilde_ts, args.sweep_samples)
        write_rows(base.workdir / "tilde_sweep.csv", ["tilde_t", "guidance", "pixel_mse", "background_mse", "semantic_shift"], sweep)
        print(f"\n{'T~':>4} {'guidance':<8} {'pixel MSE':>10} {'bg MSE':>10} {'shift':>8}")
        for t, g, pix, bg, sh in sweep:
            print(f"{t:>4} {g:<8} {pix:>10.4f} {bg:>10.4f} {sh:>8.3f}")


if __name__ == "__main__":
    main()
