"""Region-masked outlier guidance and outlier synthesis from ID images.

At every denoising step the conditional/unconditional gap psi is computed
for the ID label and for an OOD label. Positions where |psi_id| is largest
(semantic region) get pushed away from the ID class, positions where it is
smallest (nuisance region) are nudged towards it, and the OOD label's semantic
region, minus the ID nuisance region, is pushed towards the OOD class.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from sona.archive import load_archive, save_archive
from sona.diffusion import NULL, NoiseSchedule, add_noise, ddpm_step, predict, to_model_space, to_pixel_space
from sona.substrate import ConfigError, derive_seed, make_generator

GUIDANCE_MODES = ("sona", "global", "global-contrast", "uncond")


@dataclass
class GuidanceMasks:
    m_s_id: torch.Tensor
    m_n_id: torch.Tensor
    m_s_ood: torch.Tensor


@dataclass
class SonaConfig:
    s: float = 10.0
    lam: float = 0.2
    tilde_t: int | str = "uniform"  # fixed step in [0, T] or "uniform" for U{1..T}
    # component switches for ablations; all on is the full method
    use_id: bool = True
    use_n: bool = True
    use_ood: bool = True
    filter_n: bool = True

    def validate(self, T: int | None = None) -> None:
        if not 0.0 <= self.lam < 0.5:
            raise ConfigError(f"lambda must be in [0, 0.5), got {self.lam}")
        if self.s < 0:
            raise ConfigError(f"guidance scale must be >= 0, got {self.s}")
        if self.tilde_t != "uniform":
            if not isinstance(self.tilde_t, int):
                raise ConfigError(f"tilde_t must be 'uniform' or an int, got {self.tilde_t!r}")
            if T is not None and not 0 <= self.tilde_t <= T:
                raise ConfigError(f"fixed tilde_t {self.tilde_t} outside [0, {T}]")


def mask_count(lam: float, n: int) -> int:
    # round first so 0.3 * 10 counts as 3, not 4
    return min(n, math.ceil(round(lam * n, 9)))


def top_fraction_mask(a: torch.Tensor, lam: float) -> torch.Tensor:
    """Binary mask with ceil(lam*N) ones at the largest entries of ``a``.

    Ties go to the lowest flat index. A leading batch dimension is honoured
    when ``a`` has more than one dimension and is treated per sample.
    """
    flat = a.reshape(1, -1) if a.dim() <= 1 else a.reshape(a.shape[0], -1)
    k = mask_count(lam, flat.shape[1])
    out = torch.zeros(flat.shape, dtype=torch.float32)
    if k:
        order = torch.sort(flat, dim=1, descending=True, stable=True).indices
        out.scatter_(1, order[:, :k], 1.0)
    return out.reshape(a.shape)


def _bottom_mask(a: torch.Tensor, lam: float, exclude: torch.Tensor) -> torch.Tensor:
    flat = a.reshape(a.shape[0], -1)
    k = mask_count(lam, flat.shape[1])
    out = torch.zeros(flat.shape, dtype=torch.float32)
    if k:
        keyed = torch.where(exclude.reshape(flat.shape) > 0, torch.full_like(flat, math.inf), flat)
        order = torch.sort(keyed, dim=1, stable=True).indices
        out.scatter_(1, order[:, :k], 1.0)
    return out.reshape(a.shape)


def get_masks(psi_id: torch.Tensor, psi_ood: torch.Tensor, lam: float) -> GuidanceMasks:
    """Per-sample semantic/nuisance masks over all of a sample's elements.

    Inputs are [B, ...]. The nuisance mask takes the ceil(lam*N) smallest
    |psi_id| among positions outside the ID semantic mask, so the two never
    overlap even when magnitudes tie.
    """
    if psi_id.shape != psi_ood.shape:
        raise ValueError(f"psi shapes differ: {tuple(psi_id.shape)} vs {tuple(psi_ood.shape)}")
    n = psi_id[0].numel()
    if 2 * mask_count(lam, n) > n:
        raise ValueError(f"lambda={lam} selects more than half of {n} elements")
    mag_id = psi_id.abs()
    m_s_id = top_fraction_mask(mag_id, lam)
    m_n_id = _bottom_mask(mag_id, lam, m_s_id)
    m_s_ood = top_fraction_mask(psi_ood.abs(), lam)
    return GuidanceMasks(m_s_id, m_n_id, m_s_ood)


def delta_id(m_s_id: torch.Tensor, psi_id: torch.Tensor) -> torch.Tensor:
    return -m_s_id * psi_id


def delta_n(m_n_id: torch.Tensor, psi_id: torch.Tensor) -> torch.Tensor:
    return m_n_id * psi_id


def delta_ood(m_s_ood: torch.Tensor, m_n_id: torch.Tensor, psi_ood: torch.Tensor) -> torch.Tensor:
    return m_s_ood * (1.0 - m_n_id) * psi_ood


@dataclass
class NoiseTerms:
    eps_uncond: torch.Tensor
    psi_id: torch.Tensor
    psi_ood: torch.Tensor


def noise_terms(denoiser, z_t: torch.Tensor, t, c_id, c_ood) -> NoiseTerms:
    """Three separate forward passes: unconditional, ID-conditioned, OOD-conditioned."""
    eps_u = predict(denoiser, z_t, t, NULL)
    return NoiseTerms(
        eps_u,
        predict(denoiser, z_t, t, c_id) - eps_u,
        predict(denoiser, z_t, t, c_ood) - eps_u,
    )


def sona_delta(terms: NoiseTerms, cfg: SonaConfig) -> torch.Tensor:
    """Delta_ID + Delta_N + Delta_OOD (unscaled), honouring the ablation switches."""
    masks = get_masks(terms.psi_id, terms.psi_ood, cfg.lam)
    total = torch.zeros_like(terms.eps_uncond)
    if cfg.use_id:
        total = total + delta_id(masks.m_s_id, terms.psi_id)
    if cfg.use_n:
        total = total + delta_n(masks.m_n_id, terms.psi_id)
    if cfg.use_ood:
        keep = masks.m_n_id if cfg.filter_n else torch.zeros_like(masks.m_n_id)
        total = total + delta_ood(masks.m_s_ood, keep, terms.psi_ood)
    return total


def _check_pair(c_id, c_ood) -> None:
    a = torch.as_tensor(c_id).reshape(-1)
    b = torch.as_tensor(c_ood).reshape(-1)
    if bool((a == NULL).any()) or bool((b == NULL).any()):
        raise ValueError("c_id and c_ood must be real labels, not the null token")
    if bool((a == b).any()):
        raise ValueError("c_id and c_ood must differ")


def sona_noise(denoiser, z_t: torch.Tensor, t, c_id, c_ood, cfg: SonaConfig) -> torch.Tensor:
    """eps(z_t) + s * (Delta_ID + Delta_N + Delta_OOD), masks from this step's psi."""
    _check_pair(c_id, c_ood)
    terms = noise_terms(denoiser, z_t, t, c_id, c_ood)
    return terms.eps_uncond + cfg.s * sona_delta(terms, cfg)


def guided_noise(denoiser, z_t, t, c_id, c_ood, cfg: SonaConfig, guidance: str) -> torch.Tensor:
    if guidance == "sona":
        return sona_noise(denoiser, z_t, t, c_id, c_ood, cfg)
    if guidance == "uncond":
        return predict(denoiser, z_t, t, NULL)
    _check_pair(c_id, c_ood)
    if guidance == "global":
        eps_u = predict(denoiser, z_t, t, NULL)
        return eps_u + cfg.s * (predict(denoiser, z_t, t, c_ood) - eps_u)
    if guidance == "global-contrast":
        terms = noise_terms(denoiser, z_t, t, c_id, c_ood)
        return terms.eps_uncond + cfg.s * (terms.psi_ood - terms.psi_id)
    raise ValueError(f"unknown guidance {guidance!r}; choose from {GUIDANCE_MODES}")


@dataclass
class OutlierRecord:
    tilde_t: int
    c_ood: int
    seed: int


def _draw_tilde_t(cfg: SonaConfig, T: int, gen: torch.Generator) -> int:
    if cfg.tilde_t == "uniform":
        return int(torch.randint(1, T + 1, (1,), generator=gen))
    return int(cfg.tilde_t)


@torch.no_grad()
def synthesize(
    denoiser,
    sched: NoiseSchedule,
    images: torch.Tensor,
    c_id: Sequence[int],
    c_ood: Sequence[int],
    seeds: Sequence[int],
    cfg: SonaConfig,
    guidance: str = "sona",
    batch_size: int = 128,
) -> tuple[torch.Tensor, list[OutlierRecord]]:
    """Deform a batch of ID images ([B,3,H,W] in [0,1]) into outliers.

    Each sample owns a generator seeded by ``seeds[i]``, which draws its
    early-stop step, its forward-noise and its per-step sampler noise, so a
    sample's result does not depend on which other samples share its batch
    (up to floating-point batching effects in the network). Samples are
    grouped by early-stop step to keep batches dense.
    """
    if guidance not in GUIDANCE_MODES:
        raise ValueError(f"unknown guidance {guidance!r}; choose from {GUIDANCE_MODES}")
    cfg.validate(sched.T)
    n = images.shape[0]
    if not (len(c_id) == len(c_ood) == len(seeds) == n):
        raise ValueError("images, c_id, c_ood and seeds must have equal length")
    if guidance != "uncond":
        _check_pair(torch.as_tensor(list(c_id)), torch.as_tensor(list(c_ood)))
    gens = [make_generator(s) for s in seeds]
    tilde = np.array([_draw_tilde_t(cfg, sched.T, g) for g in gens], dtype=np.int64)
    z0 = to_model_space(images.float())
    eps0 = torch.stack([torch.randn(z0.shape[1:], generator=g) for g in gens]) if n else z0.clone()
    out = z0.clone()
    cid = torch.as_tensor(list(c_id), dtype=torch.long)
    cood = torch.as_tensor(list(c_ood), dtype=torch.long)
    order = np.argsort(-tilde, kind="stable")
    for b0 in range(0, n, batch_size):
        idx = order[b0 : b0 + batch_size]
        ts = torch.from_numpy(tilde[idx])
        z = add_noise(z0[idx], ts, eps0[idx], sched)
        for t in range(int(ts.max()) if len(idx) else 0, 0, -1):
            act = torch.nonzero(ts >= t).reshape(-1)
            za = z[act]
            sel = idx[act.numpy()]
            eps_hat = guided_noise(denoiser, za, t, cid[sel], cood[sel], cfg, guidance)
            if t > 1:
                noise = torch.stack([torch.randn(za.shape[1:], generator=gens[i]) for i in sel])
            else:
                noise = torch.zeros_like(za)
            z[act] = ddpm_step(za, t, eps_hat, sched, noise=noise)
        out[idx] = z
    pixels = to_pixel_space(out)
    # untouched samples (tilde_t = 0) come back bit-exact
    keep = torch.from_numpy(tilde == 0)
    pixels[keep] = images[keep].float()
    records = [OutlierRecord(int(tilde[i]), int(cood[i]), int(seeds[i])) for i in range(n)]
    return pixels, records


def generate_outlier(x, c_id: int, c_ood: int, denoiser, sched: NoiseSchedule, cfg: SonaConfig, seed: int):
    """Single-image SONA outlier; returns (image [3,H,W], OutlierRecord)."""
    if x.min() < 0 or x.max() > 1:
        raise ValueError("input image must lie in [0, 1]")
    imgs, recs = synthesize(denoiser, sched, x[None], [c_id], [c_ood], [seed], cfg, "sona", 1)
    return imgs[0], recs[0]


def generate_outlier_global(x, c_id: int, c_ood: int, denoiser, sched: NoiseSchedule, cfg: SonaConfig, seed: int, contrast: bool = False):
    """Single-image baseline with unmasked guidance towards ``c_ood``."""
    mode = "global-contrast" if contrast else "global"
    imgs, recs = synthesize(denoiser, sched, x[None], [c_id], [c_ood], [seed], cfg, mode, 1)
    return imgs[0], recs[0]


@dataclass
class OutlierSet:
    images: np.ndarray  # [N, 3, H, W]
    source_indices: np.ndarray  # [N] int64 into id_train
    ood_labels: np.ndarray  # [N] int64
    tilde_ts: np.ndarray  # [N] int64
    seeds: np.ndarray  # [N] int64, < 2**24 so float32 storage is exact
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.source_indices)


def choose_prompts(
    source_labels: np.ndarray, prompt_labels: Sequence[int], policy: str, seed: int, distance: np.ndarray | None = None
) -> np.ndarray:
    """Pick c_OOD per sample: "rand" (uniform), or "close"/"far" by shape distance.

    ``distance[i, j]`` is the distance from global class i to global class j.
    """
    prompt_labels = np.asarray(prompt_labels, dtype=np.int64)
    if policy == "rand":
        rng = np.random.default_rng([seed, 0x9E0])
        return prompt_labels[rng.integers(0, len(prompt_labels), size=len(source_labels))]
    if policy in ("close", "far"):
        if distance is None:
            raise ValueError(f"policy {policy!r} needs a class distance matrix")
        d = distance[np.asarray(source_labels)][:, prompt_labels]
        pick = d.argmin(1) if policy == "close" else d.argmax(1)
        return prompt_labels[pick]
    raise ValueError(f"unknown prompt policy {policy!r}")


def generate_outlier_set(
    denoiser,
    sched: NoiseSchedule,
    images: np.ndarray,
    labels: np.ndarray,
    prompt_labels: Sequence[int],
    cfg: SonaConfig,
    seed: int,
    guidance: str = "sona",
    policy: str = "rand",
    distance: np.ndarray | None = None,
    count: int | None = None,
    batch_size: int = 128,
) -> OutlierSet:
    """One outlier per ID image (or the first ``count``), with provenance."""
    n = len(labels) if count is None else min(count, len(labels))
    src = np.arange(n, dtype=np.int64)
    c_ood = choose_prompts(labels[src], prompt_labels, policy, seed, distance)
    seeds = np.array([derive_seed(seed, int(i)) % (1 << 24) for i in src], dtype=np.int64)
    imgs, recs = synthesize(
        denoiser,
        sched,
        torch.from_numpy(np.ascontiguousarray(images[src])),
        labels[src].tolist(),
        c_ood.tolist(),
        seeds.tolist(),
        cfg,
        guidance,
        batch_size,
    )
    return OutlierSet(
        images=imgs.numpy(),
        source_indices=src,
        ood_labels=c_ood,
        tilde_ts=np.array([r.tilde_t for r in recs], dtype=np.int64),
        seeds=seeds,
        meta={"guidance": guidance, "policy": policy, "seed": seed},
    )


def save_outlier_set(o: OutlierSet, path, meta: dict | None = None) -> None:
    import json

    save_archive(
        {
            "images": o.images,
            "source_indices": o.source_indices.astype(np.float32),
            "ood_labels": o.ood_labels.astype(np.float32),
            "tilde_ts": o.tilde_ts.astype(np.float32),
            "seeds": o.seeds.astype(np.float32),
            "meta": json.dumps({**o.meta, **(meta or {})}, sort_keys=True),
        },
        path,
    )


def load_outlier_set(path) -> OutlierSet:
    import json

    e = load_archive(path)
    missing = [k for k in ("images", "source_indices", "ood_labels", "tilde_ts", "seeds") if k not in e]
    if missing:
        raise ConfigError(f"{path}: outlier archive lacks entries {missing}")
    return OutlierSet(
        images=e["images"],
        source_indices=e["source_indices"].astype(np.int64),
        ood_labels=e["ood_labels"].astype(np.int64),
        tilde_ts=e["tilde_ts"].astype(np.int64),
        seeds=e["seeds"].astype(np.int64),
        meta=json.loads(e.get("meta", "{}")),
    )
