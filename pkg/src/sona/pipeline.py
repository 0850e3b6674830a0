"""Stage functions behind the CLI: data -> diffusion -> outliers -> detector -> report.

Every artifact carries the hash of the configuration slice it was built
from; a stage refuses upstream artifacts whose hash does not match the
current configuration unless ``force`` is set.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from sona import config as C
from sona.data import BenchmarkSplits, generate_benchmark, load_benchmark, save_benchmark
from sona.detector import DetectorModel, TrainConfig, tier_config, train_detector
from sona.diffusion import Denoiser, make_schedule, to_model_space, train_denoiser
from sona.guidance import GUIDANCE_MODES, OutlierSet, generate_outlier_set, load_outlier_set, save_outlier_set
from sona.substrate import ConfigError, derive_seed, load_checkpoint, make_generator, read_meta, save_checkpoint

GUIDANCE_CHOICES = ("sona", "global", "global-contrast")


class MissingArtifact(ConfigError):
    """A prerequisite file is absent; the message names the command that makes it."""


@dataclass
class Layout:
    workdir: Path
    data_path: Path | None = None
    diffusion_path: Path | None = None

    def __post_init__(self):
        self.workdir = Path(self.workdir)
        self.data_path = Path(self.data_path) if self.data_path else self.workdir / "data.sona"
        self.diffusion_path = Path(self.diffusion_path) if self.diffusion_path else self.workdir / "diffusion.sona"

    def outliers(self, guidance: str) -> Path:
        return self.workdir / f"outliers_{guidance}.sona"

    def detector(self, tier: str, guidance: str) -> Path:
        if tier == "ce":
            return self.workdir / "detector_ce.sona"
        return self.workdir / f"detector_{tier}_{guidance}.sona"

    def tag(self, tier: str, guidance: str) -> str:
        return "ce" if tier == "ce" else f"{tier}_{guidance}"

    def report(self, tier: str, guidance: str) -> Path:
        return self.workdir / f"report_{self.tag(tier, guidance)}.csv"

    def scores(self, tier: str, guidance: str) -> Path:
        return self.workdir / f"scores_{self.tag(tier, guidance)}.csv"

    @property
    def probe(self) -> Path:
        return self.workdir / "probe.sona"

    @property
    def grid(self) -> Path:
        return self.workdir / "outlier_grid.png"

    @property
    def manifest(self) -> Path:
        return self.workdir / "manifest.log"


def layout_for(cfg: C.PipelineConfig) -> Layout:
    return Layout(Path(cfg.run.workdir))


def _require(path: Path, command: str) -> None:
    if not path.exists():
        raise MissingArtifact(f"missing {path}; run `sona {command}` first")


def _check_hash(path: Path, expected: str, force: bool) -> dict:
    meta = read_meta(path)
    got = meta.get("stage_hash")
    if got != expected and not force:
        raise ConfigError(
            f"{path} was built from a different configuration (hash {got}, current {expected}); "
            "re-run the producing command or pass --force"
        )
    return meta


def log_manifest(layout: Layout, command: str, cfg: C.PipelineConfig, seconds: float, **extra) -> None:
    layout.workdir.mkdir(parents=True, exist_ok=True)
    rec = {"command": command, "config_hash": C.config_hash(cfg), "seed": cfg.run.seed, "seconds": round(seconds, 3), **extra}
    with open(layout.manifest, "a") as fh:
        fh.write(json.dumps(rec, sort_keys=True) + "\n")


def id_targets(splits: BenchmarkSplits, labels: np.ndarray) -> np.ndarray:
    remap = {lab: i for i, lab in enumerate(splits.id_labels)}
    return np.array([remap[int(v)] for v in labels], dtype=np.int64)


# --- stages -----------------------------------------------------------------


def gen_data(cfg: C.PipelineConfig, layout: Layout, log=print) -> BenchmarkSplits:
    splits = generate_benchmark(cfg.data.factor_spec(), cfg.data.counts(), cfg.data.seed)
    save_benchmark(splits, layout.data_path, {"stage_hash": C.data_hash(cfg), "config_hash": C.config_hash(cfg)})
    log(f"wrote {layout.data_path}")
    return splits


def load_data(cfg: C.PipelineConfig, layout: Layout, force: bool = False) -> BenchmarkSplits:
    _require(layout.data_path, "gen-data")
    splits = load_benchmark(layout.data_path)
    if splits.meta.get("stage_hash") != C.data_hash(cfg) and not force:
        raise ConfigError(f"{layout.data_path} was built from a different [data] configuration; re-run gen-data or pass --force")
    return splits


def build_denoiser(cfg: C.PipelineConfig, splits: BenchmarkSplits) -> Denoiser:
    return Denoiser(splits.id_labels + splits.ood_prompt_labels, base=cfg.diffusion.base_channels)


def schedule_of(cfg: C.PipelineConfig):
    d = cfg.diffusion
    return make_schedule(d.T, d.beta_start, d.beta_end)


def train_diffusion(cfg: C.PipelineConfig, layout: Layout, force: bool = False, log=print) -> Denoiser:
    splits = load_data(cfg, layout, force)
    d = cfg.diffusion
    torch.manual_seed(derive_seed(d.seed, "denoiser-init"))
    den = build_denoiser(cfg, splits)
    images = np.concatenate([splits.id_train.images, splits.prompt_train.images])
    labels = np.concatenate([splits.id_train.labels, splits.prompt_train.labels])
    losses = train_denoiser(
        den,
        to_model_space(torch.from_numpy(images)),
        torch.from_numpy(labels),
        schedule_of(cfg),
        d.steps,
        d.batch_size,
        d.lr,
        d.p_uncond,
        make_generator(derive_seed(d.seed, "denoiser-train")),
        log_every=max(d.steps // 10, 1),
        log=log,
    )
    meta = {
        **den.arch,
        "steps": d.steps,
        "final_loss": float(np.mean(losses[-50:])) if losses else None,
        "stage_hash": C.diffusion_hash(cfg),
        "config_hash": C.config_hash(cfg),
    }
    save_checkpoint(den, layout.diffusion_path, meta)
    log(f"wrote {layout.diffusion_path}")
    return den


def load_denoiser(cfg: C.PipelineConfig, layout: Layout, force: bool = False) -> Denoiser:
    _require(layout.diffusion_path, "train-diffusion")
    meta = _check_hash(layout.diffusion_path, C.diffusion_hash(cfg), force)
    den = Denoiser(meta["labels"], channels=meta["channels"], base=meta["base"], emb_dim=meta["emb_dim"])
    load_checkpoint(den, layout.diffusion_path)
    den.eval()
    return den


def shape_distance(splits: BenchmarkSplits) -> np.ndarray:
    """1 - IoU between canonical centred renderings of every pair of classes."""
    from sona.data import render

    spec = splits.spec
    S = spec.image_size
    masks = [
        render(name, S, (S / 2, S / 2), 0.34 * S, np.ones(3), np.zeros((3, S, S)))[1].astype(bool) for name in spec.classes
    ]
    n = len(masks)
    d = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            inter = (masks[i] & masks[j]).sum()
            union = (masks[i] | masks[j]).sum()
            d[i, j] = 1.0 - inter / max(union, 1)
    return d


def gen_outliers(cfg: C.PipelineConfig, layout: Layout, guidance: str = "sona", force: bool = False, log=print) -> OutlierSet:
    if guidance not in GUIDANCE_CHOICES:
        raise ConfigError(f"guidance must be one of {GUIDANCE_CHOICES}")
    splits = load_data(cfg, layout, force)
    den = load_denoiser(cfg, layout, force)
    g = cfg.sona
    count = g.count or None
    oset = generate_outlier_set(
        den,
        schedule_of(cfg),
        splits.id_train.images,
        splits.id_train.labels,
        splits.ood_prompt_labels,
        g.sona(),
        seed=derive_seed(cfg.run.seed, "outliers") % (1 << 31),
        guidance=guidance,
        policy=g.prompt_policy,
        distance=shape_distance(splits) if g.prompt_policy != "rand" else None,
        count=count,
        batch_size=g.batch_size,
    )
    save_outlier_set(oset, layout.outliers(guidance), {"stage_hash": C.outlier_hash(cfg, guidance), "config_hash": C.config_hash(cfg)})
    log(f"wrote {layout.outliers(guidance)} ({len(oset)} outliers)")
    return oset


def load_outliers(cfg: C.PipelineConfig, layout: Layout, guidance: str, force: bool = False) -> OutlierSet:
    path = layout.outliers(guidance)
    _require(path, f"gen-outliers --guidance {guidance}")
    _check_hash(path, C.outlier_hash(cfg, guidance), force)
    return load_outlier_set(path)


def build_detector(cfg: C.PipelineConfig, splits: BenchmarkSplits) -> DetectorModel:
    d = cfg.detector
    return DetectorModel(len(splits.id_labels), feat_dim=d.feat_dim, width=d.width)


def train_detector_stage(
    cfg: C.PipelineConfig, layout: Layout, tier: str = "full", guidance: str = "sona", force: bool = False, log=print
) -> DetectorModel:
    splits = load_data(cfg, layout, force)
    tcfg: TrainConfig = tier_config(cfg.detector.train_config(), tier)
    oset = None if tier == "ce" else load_outliers(cfg, layout, guidance, force)
    seed = derive_seed(cfg.run.seed, "detector") % (1 << 31)
    torch.manual_seed(seed)
    model = build_detector(cfg, splits)
    curves = train_detector(
        model,
        splits.id_train.images,
        id_targets(splits, splits.id_train.labels),
        tcfg,
        seed,
        None if oset is None else oset.images,
        None if oset is None else oset.source_indices,
        log_every=max(tcfg.epochs // 5, 1),
        log=log,
    )
    meta = {
        **model.arch,
        "tier": tier,
        "guidance": None if tier == "ce" else guidance,
        "final_loss": float(np.mean(curves.total[-10:])) if curves.total else None,
        "stage_hash": C.detector_hash(cfg, tier, guidance),
        "config_hash": C.config_hash(cfg),
    }
    path = layout.detector(tier, guidance)
    save_checkpoint(model, path, meta)
    log(f"wrote {path}")
    return model


def load_detector(cfg: C.PipelineConfig, layout: Layout, tier: str, guidance: str, force: bool = False) -> DetectorModel:
    path = layout.detector(tier, guidance)
    cmd = f"train-detector --loss {tier}" + ("" if tier == "ce" else f" --outliers {guidance}")
    _require(path, cmd)
    meta = _check_hash(path, C.detector_hash(cfg, tier, guidance), force)
    model = DetectorModel(meta["num_classes"], feat_dim=meta["feat_dim"], width=meta["width"], club_hidden=meta["club_hidden"])
    load_checkpoint(model, path)
    model.eval()
    return model


def get_probe(cfg: C.PipelineConfig, layout: Layout, splits: BenchmarkSplits, log=print) -> DetectorModel:
    """Fresh CE-only classifier used to measure semantic shift; cached per data hash."""
    expected = C._digest(C.data_hash(cfg), f"probe_epochs={cfg.eval.probe_epochs}")
    if layout.probe.exists() and read_meta(layout.probe).get("stage_hash") == expected:
        probe = DetectorModel(len(splits.id_labels))
        load_checkpoint(probe, layout.probe)
        probe.eval()
        return probe
    seed = derive_seed(cfg.data.seed, "probe") % (1 << 31)
    torch.manual_seed(seed)
    probe = DetectorModel(len(splits.id_labels))
    tcfg = TrainConfig(beta=0.0, gamma_mi=0.0, epochs=cfg.eval.probe_epochs)
    train_detector(probe, splits.id_train.images, id_targets(splits, splits.id_train.labels), tcfg, seed)
    save_checkpoint(probe, layout.probe, {**probe.arch, "stage_hash": expected})
    log(f"wrote {layout.probe}")
    return probe


def evaluate(
    cfg: C.PipelineConfig,
    layout: Layout,
    tier: str = "full",
    guidance: str = "sona",
    force: bool = False,
    grid: bool = True,
    log=print,
):
    """Score the chosen detector, write report/score CSVs and the outlier grid."""
    from sona.report import atomic_write, run_report, save_grid, scores_csv

    splits = load_data(cfg, layout, force)
    model = load_detector(cfg, layout, tier, guidance, force)
    outlier_sets = {}
    for g in GUIDANCE_CHOICES:
        if layout.outliers(g).exists():
            try:
                outlier_sets[g] = load_outliers(cfg, layout, g, force)
            except ConfigError as exc:
                log(f"skipping outlier set {g}: {exc}")
    probe = get_probe(cfg, layout, splits, log) if outlier_sets else None
    rep, scores = run_report(
        model,
        splits,
        id_targets(splits, splits.id_test.labels),
        outlier_sets,
        seed=cfg.run.seed,
        config_hash=C.config_hash(cfg),
        tpr=cfg.eval.tpr,
        probe=probe,
        targets_train=id_targets(splits, splits.id_train.labels),
    )
    atomic_write(layout.report(tier, guidance), rep.to_csv())
    atomic_write(layout.scores(tier, guidance), scores_csv(scores))
    if grid and outlier_sets:
        n = cfg.eval.grid_triplets
        first = next(iter(outlier_sets.values()))
        cols = [splits.id_train.images[first.source_indices[:n]]]
        cols += [o.images[:n] for o in outlier_sets.values()]
        save_grid(cols, layout.grid)
    log(f"wrote {layout.report(tier, guidance)}")
    return rep


SWEEPS = {"lambda": ("sona", "lam", float), "s": ("sona", "s", float), "tilde_t": ("sona", "tilde_t", int)}


def parse_sweep_values(sweep: str, values: list[str], cfg: C.PipelineConfig) -> list:
    if sweep not in SWEEPS:
        raise ConfigError(f"unknown sweep {sweep!r}; choose from {list(SWEEPS)}")
    _, key, typ = SWEEPS[sweep]
    if not values:
        raise ConfigError("a sweep needs at least one value")
    out = []
    for v in values:
        try:
            val = typ(v)
        except ValueError:
            raise ConfigError(f"{sweep} value {v!r} is not a valid {typ.__name__}") from None
        C.with_overrides(cfg, **{f"sona__{key}": val})
        out.append(val)
    return out


def ablate(
    cfg: C.PipelineConfig,
    layout: Layout,
    sweep: str,
    values: list[str],
    tier: str = "full",
    guidance: str = "sona",
    force: bool = False,
    log=print,
) -> Path:
    """One outlier set + detector + report per value, sharing data and diffusion."""
    from sona.report import atomic_write

    vals = parse_sweep_values(sweep, values, cfg)
    _require(layout.data_path, "gen-data")
    _require(layout.diffusion_path, "train-diffusion")
    sec, key, _ = SWEEPS[sweep]
    lines = ["sweep,value,near_ood_auroc,far_ood_auroc,id_accuracy,nuisance_retention,seed,config_hash"]
    for val in vals:
        var = C.with_overrides(cfg, **{f"{sec}__{key}": val})
        vdir = layout.workdir / "ablate" / f"{sweep}={val}"
        vl = Layout(vdir, layout.data_path, layout.diffusion_path)
        gen_outliers(var, vl, guidance, force, log)
        train_detector_stage(var, vl, tier, guidance, force, log)
        rep = evaluate(var, vl, tier, guidance, force, grid=False, log=log)
        nr = rep.get("nuisance_retention", f"outliers_{guidance}") if rep.has("nuisance_retention", f"outliers_{guidance}") else float("nan")
        lines.append(
            ",".join(
                [sweep, repr(val), repr(rep.get("auroc", "near_ood")), repr(rep.get("auroc", "far_ood")),
                 repr(rep.get("id_accuracy", "id_test")), repr(nr), str(var.run.seed), C.config_hash(var)]
            )
        )
    out = layout.workdir / f"ablate_{sweep}.csv"
    atomic_write(out, "\n".join(lines) + "\n")
    log(f"wrote {out}")
    return out
