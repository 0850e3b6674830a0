"""OOD detector: encoder + classifier head trained with CE, outlier exposure and a
CLUB mutual-information penalty between ID features and paired outlier features."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from sona.substrate import ConfigError, adam_step, check_finite, forward_backward, make_adam, make_generator

LOG_2PI = math.log(2 * math.pi)


class Encoder(nn.Module):
    def __init__(self, channels: int = 3, width: int = 32, feat_dim: int = 128):
        super().__init__()
        w = width
        self.net = nn.Sequential(
            nn.Conv2d(channels, w, 3, padding=1), nn.GroupNorm(8, w), nn.ReLU(),
            nn.Conv2d(w, w, 3, padding=1), nn.GroupNorm(8, w), nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(w, 2 * w, 3, padding=1), nn.GroupNorm(8, 2 * w), nn.ReLU(),
            nn.Conv2d(2 * w, 2 * w, 3, padding=1), nn.GroupNorm(8, 2 * w), nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(2 * w, feat_dim, 3, padding=1), nn.GroupNorm(8, feat_dim), nn.ReLU(),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
        )

    def forward(self, x):
        return self.net(x)


class ClubHead(nn.Module):
    """Diagonal Gaussian q(y | x): two-layer MLPs for the mean and (tanh-bounded) log-variance."""

    def __init__(self, x_dim: int, y_dim: int, hidden: int = 128):
        super().__init__()
        self.mu = nn.Sequential(nn.Linear(x_dim, hidden), nn.ReLU(), nn.Linear(hidden, y_dim))
        self.logvar = nn.Sequential(nn.Linear(x_dim, hidden), nn.ReLU(), nn.Linear(hidden, y_dim), nn.Tanh())

    def forward(self, x):
        return self.mu(x), 4.0 * self.logvar(x)

    def log_likelihood(self, x, y):
        """Mean over the batch of log q(y_i | x_i), summed over dimensions."""
        mu, logvar = self(x)
        ll = -0.5 * (((y - mu) ** 2) / logvar.exp() + logvar + LOG_2PI)
        return ll.sum(1).mean()


class DetectorModel(nn.Module):
    def __init__(self, num_classes: int, feat_dim: int = 128, width: int = 32, club_hidden: int = 128):
        super().__init__()
        self.arch = {"num_classes": num_classes, "feat_dim": feat_dim, "width": width, "club_hidden": club_hidden}
        self.f = Encoder(3, width, feat_dim)
        self.g = nn.Linear(feat_dim, num_classes)
        self.q = ClubHead(feat_dim, feat_dim, club_hidden)

    @property
    def num_classes(self) -> int:
        return self.g.out_features

    def features(self, x):
        return self.f(x)

    def forward(self, x):
        return self.g(self.f(x))

    def classifier_parameters(self):
        return list(self.f.parameters()) + list(self.g.parameters())


def loss_ce(logits: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    C = logits.shape[-1]
    if bool(((y < 0) | (y >= C)).any()):
        raise ValueError(f"labels must lie in [0, {C})")
    return F.cross_entropy(logits, y.long())


def loss_oe(logits: torch.Tensor, literal: bool = False) -> torch.Tensor:
    """Cross-entropy from the uniform distribution, batch-averaged.

    ``literal=True`` evaluates -(1/C) * sum softmax instead, which is the
    constant -1/C and has zero gradient; it exists only for comparison.
    """
    if literal:
        return -(F.softmax(logits, dim=-1).mean(-1)).mean()
    return -(F.log_softmax(logits, dim=-1).mean(-1)).mean()


def club_mi(x: torch.Tensor, y: torch.Tensor, q: ClubHead) -> torch.Tensor:
    """CLUB estimate (1/N) sum_i log q(y_i|x_i) - (1/N^2) sum_ij log q(y_j|x_i).

    The all-pairs term is evaluated in closed form: for a diagonal Gaussian,
    mean_j (y_j - mu_i)^2 = mean_j y_j^2 - 2 mu_i mean_j y_j + mu_i^2.
    """
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"unpaired batches: {x.shape[0]} vs {y.shape[0]}")
    mu, logvar = q(x)
    inv_var = torch.exp(-logvar)
    positive = -0.5 * ((y - mu) ** 2 * inv_var).sum(1)
    y_mean = y.mean(0, keepdim=True)
    y_sq = (y**2).mean(0, keepdim=True)
    negative = -0.5 * ((y_sq - 2 * mu * y_mean + mu**2) * inv_var).sum(1)
    return (positive - negative).mean()


def club_mi_pairs(x: torch.Tensor, y: torch.Tensor, q: ClubHead) -> torch.Tensor:
    """Direct O(N^2) evaluation of the same estimate (reference for tests)."""
    mu, logvar = q(x)
    ll = -0.5 * ((y[None, :, :] - mu[:, None, :]) ** 2 / logvar.exp()[:, None, :] + logvar[:, None, :] + LOG_2PI).sum(-1)
    return ll.diagonal().mean() - ll.mean()


def energy_from_logits(logits: torch.Tensor) -> torch.Tensor:
    return -torch.logsumexp(logits.double(), dim=-1)


@torch.no_grad()
def logits_of(model: DetectorModel, images, batch_size: int = 512) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    outs = [model(x[i : i + batch_size]) for i in range(0, len(x), batch_size)]
    return torch.cat(outs) if outs else torch.zeros(0, model.num_classes)


def energy_score(model: DetectorModel, images, batch_size: int = 512) -> np.ndarray:
    """-logsumexp(logits); higher means more OOD."""
    model.eval()
    return energy_from_logits(logits_of(model, images, batch_size)).numpy()


@dataclass
class TrainConfig:
    beta: float = 0.5
    gamma_mi: float = 0.1
    epochs: int = 30
    batch_size: int = 64
    lr: float = 2e-3
    q_lr: float = 1e-3
    weight_decay: float = 5e-4
    literal_oe: bool = False
    # gamma_mi ramps linearly from 0 over this fraction of training
    mi_ramp: float = 0.3

    def validate(self) -> None:
        if self.beta < 0 or self.gamma_mi < 0:
            raise ConfigError("beta and gamma_mi must be >= 0")
        if not 0 <= self.mi_ramp <= 1:
            raise ConfigError("mi_ramp must be in [0, 1]")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")


LOSS_TIERS = {"ce": (False, False), "ce+oe": (True, False), "full": (True, True)}


def tier_config(cfg: TrainConfig, tier: str) -> TrainConfig:
    """Zero out the loss weights a tier does not use."""
    if tier not in LOSS_TIERS:
        raise ConfigError(f"unknown loss tier {tier!r}; choose from {list(LOSS_TIERS)}")
    use_oe, use_mi = LOSS_TIERS[tier]
    return TrainConfig(**{**cfg.__dict__, "beta": cfg.beta if use_oe else 0.0, "gamma_mi": cfg.gamma_mi if use_mi else 0.0})


def lr_at(base: float, step: int, total: int, warmup_frac: float = 0.05) -> float:
    """Linear warmup over the first ``warmup_frac`` of training, cosine decay after."""
    warm = max(1, int(total * warmup_frac))
    if step < warm:
        return base * (step + 1) / warm
    return base * 0.5 * (1 + math.cos(math.pi * (step - warm) / max(1, total - warm)))


@dataclass
class TrainCurves:
    total: list[float] = field(default_factory=list)
    ce: list[float] = field(default_factory=list)
    oe: list[float] = field(default_factory=list)
    mi: list[float] = field(default_factory=list)
    q_nll: list[float] = field(default_factory=list)


def train_detector(
    model: DetectorModel,
    id_images: np.ndarray,
    id_targets: np.ndarray,
    cfg: TrainConfig,
    seed: int,
    outliers: np.ndarray | None = None,
    source_indices: np.ndarray | None = None,
    log_every: int = 0,
    log=print,
) -> TrainCurves:
    """Minimise CE + beta*OE + gamma_mi*CLUB over f and g, alternating with q fits.

    ``id_targets`` are class indices in [0, C). Every epoch walks a seeded
    permutation of the ID set; the outliers paired with a batch are those
    whose source index falls in it. With beta = gamma_mi = 0 outliers are
    never touched and training is plain classification.
    """
    cfg.validate()
    use_outliers = cfg.beta > 0 or cfg.gamma_mi > 0
    n = len(id_targets)
    partner = np.full(n, -1, dtype=np.int64)
    if use_outliers:
        if outliers is None or source_indices is None:
            raise ConfigError("beta/gamma_mi > 0 need an outlier set with source indices")
        if len(outliers) != len(source_indices):
            raise ConfigError("outlier images and source indices differ in length")
        if len(source_indices) and (source_indices.min() < 0 or source_indices.max() >= n):
            raise ConfigError("outlier provenance refers to indices outside the ID training set")
        for j, s in enumerate(source_indices):
            if partner[s] < 0:
                partner[s] = j
        if not (partner >= 0).any():
            raise ConfigError("no outlier resolves to an ID training sample")
    gen = make_generator(seed)
    x_id = torch.as_tensor(id_images, dtype=torch.float32)
    y_id = torch.as_tensor(id_targets, dtype=torch.long)
    x_ood = torch.as_tensor(outliers, dtype=torch.float32) if use_outliers else None
    opt = make_adam(model.classifier_parameters(), lr=cfg.lr)
    for grp in opt.param_groups:
        grp["weight_decay"] = cfg.weight_decay
    q_opt = make_adam(model.q.parameters(), lr=cfg.q_lr)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = max(cfg.epochs * steps_per_epoch, 1)
    curves = TrainCurves()
    step = 0
    model.train()
    for epoch in range(cfg.epochs):
        perm = torch.randperm(n, generator=gen)
        for b in range(steps_per_epoch):
            idx = perm[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            lr = lr_at(cfg.lr, step, total_steps)
            for grp in opt.param_groups:
                grp["lr"] = lr
            xb, yb = x_id[idx], y_id[idx]
            gamma = cfg.gamma_mi * min(1.0, step / max(cfg.mi_ramp * total_steps, 1e-12)) if cfg.mi_ramp else cfg.gamma_mi
            if not use_outliers:
                parts = {}

                def objective():
                    parts["ce"] = loss_ce(model(xb), yb)
                    return parts["ce"]

            else:
                pj = partner[idx.numpy()]
                has = pj >= 0
                ob = x_ood[torch.from_numpy(pj[has])]
                src_rows = torch.from_numpy(np.nonzero(has)[0])
                # one encoder pass serves both the q fit (detached) and the loss
                feats = model.f(torch.cat([xb, ob]))
                f_id, f_ood = feats[: len(xb)], feats[len(xb) :]
                if cfg.gamma_mi > 0 and len(ob) > 1:
                    fi, fo = f_id[src_rows].detach(), f_ood.detach()
                    q_nll = forward_backward(model.q, lambda: -model.q.log_likelihood(fi, fo), "club q fit")
                    adam_step(model.q, q_opt)
                    curves.q_nll.append(q_nll)
                parts = {}

                def objective():
                    logits = model.g(feats)
                    parts["ce"] = loss_ce(logits[: len(xb)], yb)
                    total = parts["ce"]
                    if cfg.beta > 0 and len(ob):
                        parts["oe"] = loss_oe(logits[len(xb) :], cfg.literal_oe)
                        total = total + cfg.beta * parts["oe"]
                    if cfg.gamma_mi > 0 and len(ob) > 1:
                        parts["mi"] = club_mi(f_id[src_rows], f_ood, model.q)
                        # MI is non-negative; a negative CLUB value only means q is off
                        total = total + gamma * torch.clamp(parts["mi"], min=0.0)
                    return total

            loss = forward_backward(model, objective, "detector loss")
            adam_step(model, opt)
            curves.total.append(loss)
            for k in ("ce", "oe", "mi"):
                if k in parts:
                    getattr(curves, k).append(float(parts[k].detach()))
            step += 1
        if log_every and (epoch + 1) % log_every == 0:
            log(f"detector epoch {epoch + 1}/{cfg.epochs} loss {np.mean(curves.total[-steps_per_epoch:]):.4f}")
    model.eval()
    return curves


def accuracy(model: DetectorModel, images, targets) -> float:
    model.eval()
    pred = logits_of(model, images).argmax(1).numpy()
    return float((pred == np.asarray(targets)).mean())
