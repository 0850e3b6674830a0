"""Evaluation reports: CSV tables, score dumps and qualitative outlier grids."""

from __future__ import annotations

import csv
import io
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from sona.detector import DetectorModel, accuracy, energy_score
from sona.metrics import ScoreSet, auroc, fpr_at_tpr, nuisance_retention_batch, semantic_shift

REPORT_COLUMNS = ("section", "metric", "split", "value", "seed", "config_hash")
SCORE_COLUMNS = ("sample_id", "split", "energy")
OOD_SPLITS = ("near_ood", "far_ood")


@dataclass
class EvalReport:
    seed: int
    config_hash: str
    rows: list[tuple[str, str, str, float]] = field(default_factory=list)

    def add(self, section: str, metric: str, split: str, value: float) -> None:
        self.rows.append((section, metric, split, float(value)))

    def get(self, metric: str, split: str) -> float:
        for _, m, s, v in self.rows:
            if m == metric and s == split:
                return v
        raise KeyError(f"{metric}/{split} not in report")

    def has(self, metric: str, split: str) -> bool:
        return any(m == metric and s == split for _, m, s, _ in self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for sec, metric, split, value in self.rows:
            w.writerow((sec, metric, split, repr(value), self.seed, self.config_hash))
        return buf.getvalue()


def read_report(path: str | Path) -> EvalReport:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return EvalReport(0, "")
    rep = EvalReport(int(rows[0]["seed"]), rows[0]["config_hash"])
    for r in rows:
        rep.add(r["section"], r["metric"], r["split"], float(r["value"]))
    return rep


def atomic_write(path: str | Path, data: bytes | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = data.encode("utf-8") if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(raw)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def scores_csv(scores: Mapping[str, np.ndarray]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SCORE_COLUMNS)
    for split, vals in scores.items():
        for i, v in enumerate(vals):
            w.writerow((i, split, repr(float(v))))
    return buf.getvalue()


def read_scores(path: str | Path) -> dict[str, np.ndarray]:
    out: dict[str, list[float]] = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            out.setdefault(r["split"], []).append(float(r["energy"]))
    return {k: np.array(v) for k, v in out.items()}


def run_report(
    model: DetectorModel,
    splits,
    targets_test: np.ndarray,
    outlier_sets: Mapping[str, object],
    seed: int,
    config_hash: str,
    tpr: float = 0.95,
    probe: DetectorModel | None = None,
    targets_train: np.ndarray | None = None,
) -> tuple[EvalReport, dict[str, np.ndarray]]:
    """Detection metrics for every OOD split plus outlier diagnostics per outlier set.

    ``outlier_sets`` maps a name (e.g. "sona") to an OutlierSet; empty sets
    are skipped, so the report still forms without any outliers.
    """
    rep = EvalReport(seed, config_hash)
    scores = {"id_test": energy_score(model, splits.id_test.images)}
    for name in OOD_SPLITS:
        scores[name] = energy_score(model, splits.split(name).images)
    for name in OOD_SPLITS:
        ss = ScoreSet(scores["id_test"], scores[name])
        rep.add("detection", "auroc", name, auroc(ss))
        rep.add("detection", "fpr_at_tpr", name, fpr_at_tpr(ss, tpr))
    rep.add("classification", "id_accuracy", "id_test", accuracy(model, splits.id_test.images, targets_test))
    for name, oset in outlier_sets.items():
        if oset is None or len(oset) == 0:
            continue
        src = oset.source_indices
        nr = nuisance_retention_batch(splits.id_train.images[src], splits.id_train.masks[src], oset.images)
        rep.add("outliers", "nuisance_retention", f"outliers_{name}", float(nr.mean()))
        if probe is not None and targets_train is not None:
            sh = semantic_shift(probe, oset.images, targets_train[src])
            rep.add("outliers", "semantic_shift", f"outliers_{name}", float(sh.mean()))
        rep.add("outliers", "count", f"outliers_{name}", len(oset))
    return rep, scores


def save_grid(rows_of_images: list[np.ndarray], path: str | Path, per_row: int = 8, zoom: int = 4) -> None:
    """Tile groups of images side by side; ``rows_of_images`` is a list of
    [N, 3, H, W] arrays, one per column of each group (e.g. source, SONA, global)."""
    from PIL import Image

    k = len(rows_of_images)
    n = min(len(r) for r in rows_of_images)
    H, W = rows_of_images[0].shape[2:]
    pad = 1
    cell_w = k * (W + pad) + 2 * pad
    nrows = max(1, -(-n // per_row))
    canvas = np.ones((nrows * (H + 2 * pad), per_row * cell_w, 3), dtype=np.float32)
    for i in range(n):
        r, c = divmod(i, per_row)
        y0 = r * (H + 2 * pad) + pad
        for j in range(k):
            x0 = c * cell_w + pad + j * (W + pad)
            canvas[y0 : y0 + H, x0 : x0 + W] = np.clip(rows_of_images[j][i].transpose(1, 2, 0), 0, 1)
    img = Image.fromarray((canvas * 255).round().astype(np.uint8))
    img = img.resize((img.width * zoom, img.height * zoom), Image.NEAREST)
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    atomic_write(path, buf.getvalue())
