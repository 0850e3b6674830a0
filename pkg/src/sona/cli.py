"""`sona` command line: gen-data, train-diffusion, gen-outliers, train-detector, eval, ablate."""

from __future__ import annotations

import argparse
import logging
import sys
import time

from sona import config as C
from sona import pipeline as P
from sona.archive import FormatError
from sona.substrate import ConfigError, NumericError

log = logging.getLogger("sona")


def _tilde_t(text: str) -> int | str:
    if text == "uniform":
        return "uniform"
    if text.startswith("fixed:"):
        try:
            return int(text.split(":", 1)[1])
        except ValueError:
            pass
    raise argparse.ArgumentTypeError(f"--tilde-t expects fixed:N or uniform, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file (defaults apply when omitted)")
    common.add_argument("--workdir", help="output directory (overrides [run] workdir)")
    common.add_argument("--seed", type=int, help="global seed (overrides [run] seed)")
    common.add_argument("--force", action="store_true", help="accept upstream artifacts with a different config hash")
    common.add_argument("-q", "--quiet", action="store_true")

    ap = argparse.ArgumentParser(prog="sona", description="Desk-scale SONA outlier synthesis and OOD detection pipeline.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("write-config", parents=[common], help="write the effective config to a file")
    p.add_argument("out")

    p = sub.add_parser("gen-data", parents=[common], help="generate the synthetic benchmark archive")
    p.add_argument("--out", help="archive path (default: <workdir>/data.sona)")

    sub.add_parser("train-diffusion", parents=[common], help="train the class-conditional denoiser with CFG dropout")

    p = sub.add_parser("gen-outliers", parents=[common], help="synthesize outliers from the ID training set")
    p.add_argument("--guidance", choices=P.GUIDANCE_CHOICES, default="sona")
    p.add_argument("--tilde-t", type=_tilde_t, help="fixed:N or uniform (overrides [sona] tilde_t)")

    p = sub.add_parser("train-detector", parents=[common], help="train the OOD detector")
    p.add_argument("--loss", choices=("ce", "ce+oe", "full"), default="full")
    p.add_argument("--outliers", choices=P.GUIDANCE_CHOICES, default="sona", help="which outlier set to expose")

    p = sub.add_parser("eval", parents=[common], help="score a trained detector and write the report")
    p.add_argument("--loss", choices=("ce", "ce+oe", "full"), default="full")
    p.add_argument("--guidance", choices=P.GUIDANCE_CHOICES, default="sona")

    p = sub.add_parser("ablate", parents=[common], help="sweep lambda, s or tilde_t and write a consolidated CSV")
    p.add_argument("--sweep", choices=tuple(P.SWEEPS), required=True)
    p.add_argument("values", nargs="+")
    p.add_argument("--loss", choices=("ce+oe", "full"), default="full")
    p.add_argument("--guidance", choices=P.GUIDANCE_CHOICES, default="sona")

    p = sub.add_parser("run-all", parents=[common], help="every stage, all three loss tiers, SONA and global guidance")
    return ap


def effective_config(args) -> C.PipelineConfig:
    cfg = C.load_config(args.config)
    over = {}
    if args.workdir is not None:
        over["run__workdir"] = args.workdir
    if args.seed is not None:
        over["run__seed"] = args.seed
    if getattr(args, "tilde_t", None) is not None:
        over["sona__tilde_t"] = args.tilde_t
    return C.with_overrides(cfg, **over) if over else cfg


def run_all(cfg: C.PipelineConfig, layout: P.Layout, force: bool, say) -> None:
    P.gen_data(cfg, layout, log=say)
    P.train_diffusion(cfg, layout, force, log=say)
    for g in ("sona", "global"):
        P.gen_outliers(cfg, layout, g, force, log=say)
    P.train_detector_stage(cfg, layout, "ce", "sona", force, log=say)
    P.evaluate(cfg, layout, "ce", "sona", force, grid=False, log=say)
    for g in ("sona", "global"):
        for tier in ("ce+oe", "full"):
            P.train_detector_stage(cfg, layout, tier, g, force, log=say)
            P.evaluate(cfg, layout, tier, g, force, log=say)


def dispatch(args, cfg: C.PipelineConfig, say) -> dict:
    layout = P.layout_for(cfg)
    cmd = args.command
    if cmd == "write-config":
        C.save_config(cfg, args.out)
        say(f"wrote {args.out}")
        return {}
    if cmd == "gen-data":
        if args.out:
            layout = P.Layout(layout.workdir, args.out)
        P.gen_data(cfg, layout, log=say)
        return {}
    if cmd == "train-diffusion":
        P.train_diffusion(cfg, layout, args.force, log=say)
        return {}
    if cmd == "gen-outliers":
        P.gen_outliers(cfg, layout, args.guidance, args.force, log=say)
        return {"guidance": args.guidance}
    if cmd == "train-detector":
        P.train_detector_stage(cfg, layout, args.loss, args.outliers, args.force, log=say)
        return {"loss": args.loss, "outliers": args.outliers}
    if cmd == "eval":
        rep = P.evaluate(cfg, layout, args.loss, args.guidance, args.force, log=say)
        for split in ("near_ood", "far_ood"):
            say(f"{split}: AUROC {rep.get('auroc', split):.4f}  FPR@{cfg.eval.tpr:.0%} {rep.get('fpr_at_tpr', split):.4f}")
        say(f"ID accuracy {rep.get('id_accuracy', 'id_test'):.4f}")
        return {"loss": args.loss, "guidance": args.guidance}
    if cmd == "ablate":
        P.ablate(cfg, layout, args.sweep, args.values, args.loss, args.guidance, args.force, log=say)
        return {"sweep": args.sweep, "values": args.values}
    if cmd == "run-all":
        run_all(cfg, layout, args.force, say)
        return {}
    raise ConfigError(f"unknown command {cmd}")


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s", stream=sys.stderr)
    t0 = time.perf_counter()
    try:
        cfg = effective_config(args)
        extra = dispatch(args, cfg, log.info)
    except (ConfigError, FormatError, NumericError, OSError) as exc:
        log.error(f"sona {args.command}: error: {exc}")
        return 2 if isinstance(exc, ConfigError) else 1
    if args.command != "write-config":
        P.log_manifest(P.layout_for(cfg), args.command, cfg, time.perf_counter() - t0, **extra)
    return 0


if __name__ == "__main__":
    sys.exit(main())
