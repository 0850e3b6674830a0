"""Helpers shared by the experiment scripts: one benchmark and one denoiser
per workdir, reused by every seed and variant."""

from __future__ import annotations

import argparse
import logging
from pathlib import Path

import numpy as np

from sona import config as C
from sona import pipeline as P

log = logging.getLogger("sona.scripts")


def base_parser(description: str) -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(description=description)
    ap.add_argument("--config", help="INI config (defaults apply when omitted)")
    ap.add_argument("--workdir", default="runs", help="root directory for all outputs")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("-q", "--quiet", action="store_true")
    return ap


def setup(args) -> tuple[C.PipelineConfig, P.Layout]:
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    cfg = C.with_overrides(C.load_config(args.config), run__workdir=args.workdir)
    layout = P.layout_for(cfg)
    layout.workdir.mkdir(parents=True, exist_ok=True)
    if not layout.data_path.exists():
        P.gen_data(cfg, layout, log=log.info)
    if not layout.diffusion_path.exists():
        P.train_diffusion(cfg, layout, log=log.info)
    return cfg, layout


def seed_layout(cfg: C.PipelineConfig, base: P.Layout, seed: int, name: str = "") -> tuple[C.PipelineConfig, P.Layout]:
    """Per-seed config and directory that point back at the shared data and denoiser."""
    work = base.workdir / (f"{name}seed{seed}")
    scfg = C.with_overrides(cfg, run__seed=seed, run__workdir=str(work))
    return scfg, P.Layout(work, base.data_path, base.diffusion_path)


def mean_std(values) -> str:
    v = np.asarray(values, dtype=float)
    return f"{100 * v.mean():6.2f} +- {100 * v.std(ddof=1) if len(v) > 1 else 0.0:5.2f}"


def write_rows(path: Path, header: list[str], rows: list[list]) -> None:
    lines = [",".join(header)] + [",".join(str(x) for x in r) for r in rows]
    path.write_text("\n".join(lines) + "\n")
    log.info(f"wrote {path}")
