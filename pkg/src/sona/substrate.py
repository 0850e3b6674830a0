"""Differentiable-computation substrate.

Tensors, parameter blocks, reverse-mode gradients and the Adam optimizer come
from torch; this module adds the pieces the pipeline relies on around them:
seeded generators, a checked forward/backward pass that refuses non-finite
losses, a finite-difference gradient checker, and parameter checkpoints in the
shared tensor-archive format.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch
from torch import nn

from sona.archive import load_archive, save_archive

DTYPE = torch.float32


class NumericError(FloatingPointError):
    """A loss or intermediate value became NaN/Inf."""


class ConfigError(ValueError):
    """Invalid configuration or mismatched state."""


def make_generator(seed: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(int(seed) & 0xFFFF_FFFF_FFFF_FFFF)
    return gen


def derive_seed(*parts: int | str) -> int:
    """Stable 63-bit seed from a tuple of ints/strings (independent of PYTHONHASHSEED)."""
    words = []
    for p in parts:
        if isinstance(p, str):
            words.extend(p.encode("utf-8"))
        else:
            words.append(int(p) & 0xFFFF_FFFF)
    return int(np.random.SeedSequence(words).generate_state(2, dtype=np.uint64)[0] >> np.uint64(1))


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


def check_finite(t: torch.Tensor, where: str) -> torch.Tensor:
    if not bool(torch.isfinite(t).all()):
        raise NumericError(f"non-finite value produced by {where}")
    return t


def forward_backward(
    block: nn.Module, loss_fn: Callable[[], torch.Tensor], name: str = "loss"
) -> float:
    """Zero gradients, evaluate ``loss_fn`` and backpropagate into ``block``.

    Raises NumericError if the loss is not a finite scalar; gradients are left
    zeroed in that case.
    """
    block.zero_grad(set_to_none=False)
    for p in block.parameters():
        if p.grad is None:
            p.grad = torch.zeros_like(p)
    loss = loss_fn()
    if loss.numel() != 1:
        raise ValueError(f"{name} must be a scalar, got shape {tuple(loss.shape)}")
    check_finite(loss.detach(), name)
    loss.backward()
    for pname, p in block.named_parameters():
        if p.grad is not None and not bool(torch.isfinite(p.grad).all()):
            raise NumericError(f"non-finite gradient for {pname} from {name}")
    return float(loss.detach())


def make_adam(
    params: Iterable[torch.nn.Parameter],
    lr: float = 1e-3,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> torch.optim.Adam:
    return torch.optim.Adam(list(params), lr=lr, betas=betas, eps=eps)


def adam_step(block: nn.Module, opt: torch.optim.Optimizer) -> None:
    """Apply one optimizer update to ``block`` after validating state shapes."""
    block_params = {id(p): p for p in block.parameters()}
    for group in opt.param_groups:
        for p in group["params"]:
            if id(p) not in block_params:
                raise ConfigError("optimizer holds a parameter that is not part of the block")
            st = opt.state.get(p)
            if st:
                for key in ("exp_avg", "exp_avg_sq"):
                    if key in st and st[key].shape != p.shape:
                        raise ConfigError(
                            f"optimizer {key} shape {tuple(st[key].shape)} != parameter shape {tuple(p.shape)}"
                        )
    opt.step()


@dataclass
class GradCheckReport:
    tolerance: float
    max_rel_error: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.max_rel_error.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def _rel_err(a: torch.Tensor, b: torch.Tensor, floor: float) -> float:
    num = (a - b).abs()
    den = torch.maximum(a.abs(), b.abs()).clamp_min(floor)
    return float((num / den).max()) if num.numel() else 0.0


def gradient_check(
    block: nn.Module,
    loss_fn: Callable[[], torch.Tensor],
    tolerance: float = 1e-3,
    step: float = 1e-5,
    floor: float = 1e-6,
    max_entries: int | None = 64,
    analytic: dict[str, torch.Tensor] | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients to central finite differences.

    Run it on a float64 copy of the block (``block.double()``); in float32 a
    small step drowns in rounding error. The default step is kept small so the
    +/- perturbation rarely straddles a ReLU or max-pool kink. ``analytic`` overrides the gradients
    under test, which is how the negative control feeds a corrupted gradient.
    Large parameters are spot-checked on ``max_entries`` random coordinates.
    Relative error is ``|a-n| / max(|a|, |n|, floor)`` so parameters the loss does
    not depend on compare as 0 vs 0.
    """
    if analytic is None:
        forward_backward(block, loss_fn, "gradient_check")
        analytic = {n: p.grad.detach().clone() for n, p in block.named_parameters()}
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance)
    with torch.no_grad():
        for name, p in block.named_parameters():
            flat = p.view(-1)
            idx = np.arange(flat.numel())
            if max_entries is not None and flat.numel() > max_entries:
                idx = np.sort(rng.choice(flat.numel(), size=max_entries, replace=False))
            a = analytic[name].reshape(-1)[idx].to(torch.float64)
            n = torch.empty(len(idx), dtype=torch.float64)
            for j, i in enumerate(idx):
                orig = flat[i].item()
                flat[i] = orig + step
                hi = float(loss_fn())
                flat[i] = orig - step
                lo = float(loss_fn())
                flat[i] = orig
                n[j] = (hi - lo) / (2 * step)
            report.max_rel_error[name] = _rel_err(a, n, floor)
    return report


def save_checkpoint(module: nn.Module, path: str | Path, meta: dict) -> None:
    """One archive entry per parameter/buffer plus a JSON ``meta`` entry."""
    entries: dict[str, np.ndarray | str] = {}
    for name, t in module.state_dict().items():
        entries[f"param/{name}"] = t.detach().to(torch.float32).cpu().numpy()
    entries["meta"] = json.dumps(meta, sort_keys=True)
    save_archive(entries, path)


def load_checkpoint(module: nn.Module, path: str | Path) -> dict:
    entries = load_archive(path)
    state = {}
    for name, t in module.state_dict().items():
        key = f"param/{name}"
        if key not in entries:
            raise ConfigError(f"{path}: checkpoint lacks parameter {name}")
        arr = entries[key]
        if tuple(arr.shape) != tuple(t.shape):
            raise ConfigError(f"{path}: {name} has shape {arr.shape}, model expects {tuple(t.shape)}")
        state[name] = torch.from_numpy(np.array(arr)).to(t.dtype)
    module.load_state_dict(state)
    return json.loads(entries["meta"]) if "meta" in entries else {}


def read_meta(path: str | Path) -> dict:
    entries = load_archive(path)
    return json.loads(entries["meta"]) if "meta" in entries else {}


def sinusoidal_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb.to(DTYPE)
