"""Detection metrics and ground-truth-mask outlier diagnostics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from scipy.stats import rankdata


@dataclass
class ScoreSet:
    id_scores: np.ndarray
    ood_scores: np.ndarray

    def __post_init__(self):
        self.id_scores = np.asarray(self.id_scores, dtype=np.float64).reshape(-1)
        self.ood_scores = np.asarray(self.ood_scores, dtype=np.float64).reshape(-1)
        if not len(self.id_scores) or not len(self.ood_scores):
            raise ValueError("both ID and OOD score lists must be non-empty")


def auroc(scores: ScoreSet) -> float:
    """P(OOD score > ID score) + 0.5 * P(tie), via the Mann-Whitney rank sum."""
    n_id, n_ood = len(scores.id_scores), len(scores.ood_scores)
    ranks = rankdata(np.concatenate([scores.id_scores, scores.ood_scores]))
    u = ranks[n_id:].sum() - n_ood * (n_ood + 1) / 2.0
    return float(u / (n_id * n_ood))


def fpr_at_tpr(scores: ScoreSet, tpr: float = 0.95) -> float:
    """Fraction of ID scores flagged at the strictest threshold that still
    flags at least ``tpr`` of the OOD scores (flag means score >= threshold)."""
    if not 0.0 < tpr <= 1.0:
        raise ValueError(f"tpr must be in (0, 1], got {tpr}")
    ood = np.sort(scores.ood_scores)[::-1]
    need = int(np.ceil(round(tpr * len(ood), 9)))
    threshold = ood[need - 1]
    return float((scores.id_scores >= threshold).mean())


def nuisance_retention(source: np.ndarray, mask: np.ndarray | None, outlier: np.ndarray) -> float:
    """Mean squared pixel error over the background (mask == 0), all channels."""
    if mask is None:
        raise ValueError("source image has no ground-truth foreground mask")
    src = np.asarray(source, dtype=np.float64)
    out = np.asarray(outlier, dtype=np.float64)
    bg = np.asarray(mask) == 0
    if not bg.any():
        return 0.0
    diff = (src - out)[:, bg]
    return float((diff**2).mean())


def nuisance_retention_batch(sources: np.ndarray, masks: np.ndarray, outliers: np.ndarray) -> np.ndarray:
    src = np.asarray(sources, dtype=np.float64)
    out = np.asarray(outliers, dtype=np.float64)
    bg = (np.asarray(masks) == 0)[:, None].astype(np.float64)
    num = (((src - out) ** 2) * bg).sum(axis=(1, 2, 3))
    den = bg.sum(axis=(1, 2, 3)) * src.shape[1]
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


@torch.no_grad()
def semantic_shift(probe, outliers: np.ndarray, source_targets: Sequence[int]) -> np.ndarray:
    """1 - p_probe(source class | outlier), per outlier."""
    probe.eval()
    x = torch.as_tensor(np.asarray(outliers), dtype=torch.float32)
    if x.dim() == 3:
        x = x[None]
    probs = torch.cat([torch.softmax(probe(x[i : i + 512]).double(), -1) for i in range(0, len(x), 512)])
    t = torch.as_tensor(np.asarray(source_targets), dtype=torch.long).reshape(-1)
    return (1.0 - probs[torch.arange(len(t)), t]).numpy()
