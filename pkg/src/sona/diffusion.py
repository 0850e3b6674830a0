"""Pixel-space conditional DDPM with classifier-free guidance."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from sona.substrate import ConfigError, adam_step, check_finite, forward_backward, sinusoidal_embedding

NULL = -1  # reserved label id for the unconditional (null) token


@dataclass(frozen=True)
class NoiseSchedule:
    """Index 0 is the clean-data convention (beta=0, alpha=alpha_bar=1)."""

    T: int
    beta: np.ndarray  # float64, length T+1
    alpha: np.ndarray
    alpha_bar: np.ndarray


def make_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.zeros(T + 1, dtype=np.float64)
    beta[1:] = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(T, beta, alpha, alpha_bar)


def _coef(values: np.ndarray, t, like: torch.Tensor) -> torch.Tensor | float:
    if isinstance(t, torch.Tensor):
        c = torch.from_numpy(values[t.numpy()]).to(like.dtype)
        return c.view(-1, *([1] * (like.dim() - 1)))
    return float(values[t])


def add_noise(z0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps; ``t`` is an int or a per-sample LongTensor."""
    if z0.shape != eps.shape:
        raise ValueError(f"z0 shape {tuple(z0.shape)} != eps shape {tuple(eps.shape)}")
    ts = t.numpy() if isinstance(t, torch.Tensor) else np.array([t])
    if ts.min() < 0 or ts.max() > sched.T:
        raise ValueError(f"timestep out of range [0, {sched.T}]")
    if not isinstance(t, torch.Tensor) and t == 0:
        return z0.clone()
    a = _coef(np.sqrt(sched.alpha_bar), t, z0)
    b = _coef(np.sqrt(1.0 - sched.alpha_bar), t, z0)
    return a * z0 + b * eps


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, emb_dim: int, groups: int = 8):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm1 = nn.GroupNorm(min(groups, cout), cout)
        self.emb = nn.Linear(emb_dim, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.norm2 = nn.GroupNorm(min(groups, cout), cout)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = F.silu(self.norm1(self.conv1(x)))
        h = h + self.emb(emb)[:, :, None, None]
        h = F.silu(self.norm2(self.conv2(h)))
        return h + self.skip(x)


class ConditionalNoisePredictor(nn.Module):
    """Shared condition vocabulary: ``labels`` are global class ids and the
    null token owns the extra last embedding row."""

    def __init__(self, labels: Sequence[int], emb_dim: int):
        super().__init__()
        self.labels = tuple(int(x) for x in labels)
        if NULL in self.labels or len(set(self.labels)) != len(self.labels):
            raise ConfigError("condition labels must be unique and may not use the null id")
        self.emb_dim = emb_dim
        self.cond = nn.Embedding(len(self.labels) + 1, emb_dim)
        self.time = nn.Sequential(nn.Linear(emb_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self._lut = {lab: i for i, lab in enumerate(self.labels)}
        self._lut[NULL] = len(self.labels)

    def cond_index(self, c: torch.Tensor) -> torch.Tensor:
        try:
            return torch.tensor([self._lut[int(v)] for v in c.tolist()], dtype=torch.long)
        except KeyError as exc:
            raise ValueError(f"label {exc.args[0]} not in condition vocabulary {self.labels}") from None

    def embed(self, t: torch.Tensor, c: torch.Tensor, dtype) -> torch.Tensor:
        return self.time(sinusoidal_embedding(t, self.emb_dim).to(dtype)) + self.cond(self.cond_index(c))


class Denoiser(ConditionalNoisePredictor):
    """Small two-level U-Net predicting eps(z_t, t, c) for [B, C, H, W] latents (H, W divisible by 4)."""

    def __init__(self, labels: Sequence[int], channels: int = 3, base: int = 32, emb_dim: int = 64):
        super().__init__(labels, emb_dim)
        self.arch = {"labels": list(self.labels), "channels": channels, "base": base, "emb_dim": emb_dim}
        c = base
        self.inp = nn.Conv2d(channels, c, 3, padding=1)
        self.down1 = ResBlock(c, c, emb_dim)
        self.down2 = ResBlock(c, 2 * c, emb_dim)
        self.mid = ResBlock(2 * c, 2 * c, emb_dim)
        self.up2 = ResBlock(4 * c, c, emb_dim)
        self.up1 = ResBlock(2 * c, c, emb_dim)
        self.out = nn.Conv2d(c, channels, 3, padding=1)

    def forward(self, z: torch.Tensor, t: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        emb = self.embed(t, c, z.dtype)
        h0 = self.inp(z)
        h1 = self.down1(h0, emb)
        h2 = self.down2(F.avg_pool2d(h1, 2), emb)
        m = self.mid(F.avg_pool2d(h2, 2), emb)
        u = self.up2(torch.cat([F.interpolate(m, scale_factor=2.0, mode="nearest"), h2], 1), emb)
        u = self.up1(torch.cat([F.interpolate(u, scale_factor=2.0, mode="nearest"), h1], 1), emb)
        return self.out(u)


class MLPDenoiser(ConditionalNoisePredictor):
    """eps(z_t, t, c) for flat [B, dim] latents; used for low-dimensional toy problems."""

    def __init__(self, labels: Sequence[int], dim: int = 1, hidden: int = 64, emb_dim: int = 32):
        super().__init__(labels, emb_dim)
        self.arch = {"labels": list(self.labels), "dim": dim, "hidden": hidden, "emb_dim": emb_dim}
        self.net = nn.Sequential(
            nn.Linear(dim + emb_dim, hidden), nn.SiLU(), nn.Linear(hidden, hidden), nn.SiLU(), nn.Linear(hidden, dim)
        )

    def forward(self, z: torch.Tensor, t: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        return self.net(torch.cat([z, self.embed(t, c, z.dtype)], 1))


def _full(n: int, value) -> torch.Tensor:
    return torch.full((n,), int(value), dtype=torch.long)


def _as_labels(c, n: int) -> torch.Tensor:
    if isinstance(c, torch.Tensor):
        return c.long().reshape(-1).expand(n) if c.numel() == 1 else c.long()
    return _full(n, c)


@torch.no_grad()
def predict(denoiser: nn.Module, z_t: torch.Tensor, t, c) -> torch.Tensor:
    """eps_theta(z_t, t, c) for a batch; ``t`` int or per-sample tensor, ``c`` label(s) or NULL."""
    n = z_t.shape[0]
    tt = t.long() if isinstance(t, torch.Tensor) else _full(n, t)
    return check_finite(denoiser(z_t, tt, _as_labels(c, n)), "denoiser")


def _is_null(c) -> bool:
    if isinstance(c, torch.Tensor):
        return bool((c == NULL).any())
    return int(c) == NULL


def psi(denoiser: nn.Module, z_t: torch.Tensor, t, c, eps_uncond: torch.Tensor | None = None) -> torch.Tensor:
    """Conditional minus unconditional noise prediction."""
    if _is_null(c):
        raise ValueError("psi of the null condition is identically zero; pass a real label")
    if eps_uncond is None:
        eps_uncond = predict(denoiser, z_t, t, NULL)
    return predict(denoiser, z_t, t, c) - eps_uncond


def cfg_noise(denoiser: nn.Module, z_t: torch.Tensor, t, c, s: float) -> torch.Tensor:
    """eps(z_t) + s * psi(z_t, c), written as (1-s)*eps_u + s*eps_c.

    The blended form is algebraically identical and makes s=0 and s=1 return
    the unconditional and conditional predictions bit-for-bit.
    """
    if s < 0:
        raise ValueError(f"guidance scale must be >= 0, got {s}")
    if _is_null(c):
        raise ValueError("cfg_noise needs a real label")
    eps_u = predict(denoiser, z_t, t, NULL)
    eps_c = predict(denoiser, z_t, t, c)
    return (1.0 - s) * eps_u + s * eps_c


def ddpm_step(
    z_t: torch.Tensor,
    t,
    eps_hat: torch.Tensor,
    sched: NoiseSchedule,
    gen: torch.Generator | None = None,
    noise: torch.Tensor | None = None,
) -> torch.Tensor:
    """Ancestral update z_t -> z_{t-1}; sigma_t = sqrt(beta_t), and no noise at t=1.

    ``t`` may be a per-sample LongTensor. Supply either ``gen`` or a
    pre-drawn ``noise`` tensor.
    """
    if eps_hat.shape != z_t.shape:
        raise ValueError("eps_hat must match z_t in shape")
    ts = t.numpy() if isinstance(t, torch.Tensor) else np.array([t])
    if ts.min() < 1 or ts.max() > sched.T:
        raise ValueError(f"ddpm_step needs 1 <= t <= {sched.T}")
    inv_sqrt_a = _coef(1.0 / np.sqrt(sched.alpha), t, z_t)
    ratio = _coef((1.0 - sched.alpha) / np.sqrt(np.maximum(1.0 - sched.alpha_bar, 1e-300)), t, z_t)
    sigma_np = np.sqrt(sched.beta)
    sigma_np[1] = 0.0
    sigma = _coef(sigma_np, t, z_t)
    mean = inv_sqrt_a * (z_t - ratio * eps_hat)
    if noise is None:
        if isinstance(t, int) and t == 1:
            return mean
        noise = torch.randn(z_t.shape, generator=gen, dtype=z_t.dtype)
    return mean + sigma * noise


def cfg_train_step(
    denoiser: nn.Module,
    opt: torch.optim.Optimizer,
    z0: torch.Tensor,
    c: torch.Tensor,
    p_uncond: float,
    sched: NoiseSchedule,
    gen: torch.Generator,
) -> float:
    """One classifier-free-guidance training step; returns the mean squared error."""
    if z0.shape[0] == 0:
        raise ValueError("empty batch")
    if not 0.0 <= p_uncond <= 1.0:
        raise ValueError(f"p_uncond must be in [0, 1], got {p_uncond}")
    n = z0.shape[0]
    t = torch.randint(1, sched.T + 1, (n,), generator=gen)
    eps = torch.randn(z0.shape, generator=gen, dtype=z0.dtype)
    drop = torch.rand(n, generator=gen) < p_uncond
    c = torch.where(drop, torch.full_like(c, NULL), c.long())
    z_t = add_noise(z0, t, eps, sched)
    loss = forward_backward(denoiser, lambda: F.mse_loss(denoiser(z_t, t, c), eps), "cfg_train_step")
    adam_step(denoiser, opt)
    return loss


def to_model_space(x: torch.Tensor) -> torch.Tensor:
    """Encode: pixels in [0,1] -> [-1,1]. Stands where a learned autoencoder would go."""
    return x * 2.0 - 1.0


def to_pixel_space(z: torch.Tensor) -> torch.Tensor:
    """Decode and clamp to [0,1]."""
    return ((z + 1.0) * 0.5).clamp(0.0, 1.0)


@torch.no_grad()
def sample(
    denoiser: nn.Module,
    c,
    s: float,
    sched: NoiseSchedule,
    gen: torch.Generator,
    shape: Sequence[int] | None = None,
    start: tuple[torch.Tensor, int] | None = None,
) -> torch.Tensor:
    """CFG ancestral sampling down to t=0.

    Without ``start`` the chain begins at z_T ~ N(0, I) with the given ``shape``;
    with ``start=(z, T_start)`` it resumes from ``z`` at timestep ``T_start``.
    """
    if start is None:
        if shape is None:
            raise ValueError("shape is required when no start latent is given")
        z = torch.randn(tuple(shape), generator=gen)
        t0 = sched.T
    else:
        z, t0 = start
        if not 0 <= t0 <= sched.T:
            raise ValueError(f"start timestep {t0} outside [0, {sched.T}]")
        z = z.clone()
    for t in range(t0, 0, -1):
        z = ddpm_step(z, t, cfg_noise(denoiser, z, t, c, s), sched, gen)
    return z


def train_denoiser(
    denoiser: nn.Module,
    images: torch.Tensor,
    labels: torch.Tensor,
    sched: NoiseSchedule,
    steps: int,
    batch_size: int,
    lr: float,
    p_uncond: float,
    gen: torch.Generator,
    log_every: int = 0,
    log=print,
) -> list[float]:
    """Minibatch CFG training with Adam and a cosine-decayed learning rate."""
    from sona.substrate import make_adam

    opt = make_adam(denoiser.parameters(), lr=lr)
    z_all = images
    losses = []
    n = z_all.shape[0]
    perm = torch.randperm(n, generator=gen)
    pos = 0
    for step in range(steps):
        if pos + batch_size > n:
            perm = torch.randperm(n, generator=gen)
            pos = 0
        idx = perm[pos : pos + batch_size]
        pos += batch_size
        for g in opt.param_groups:
            g["lr"] = lr * 0.5 * (1 + math.cos(math.pi * step / max(steps, 1)))
        losses.append(cfg_train_step(denoiser, opt, z_all[idx], labels[idx], p_uncond, sched, gen))
        if log_every and (step + 1) % log_every == 0:
            log(f"diffusion step {step + 1}/{steps} loss {np.mean(losses[-log_every:]):.4f}")
    return losses
