"""SSIM / DSSIM, Lp distances and attack aggregates.

All image metrics treat the last two axes as (H, W) and broadcast over any
leading batch axes, so they double as differentiable training losses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.stats import binomtest

from .errors import EmptyInput, ShapeMismatch


@dataclass(frozen=True)
class SsimConfig:
    k1: float = 0.01
    k2: float = 0.03
    L: float = 1.0
    mode: str = "global"  # or "windowed"
    win_size: int = 7
    sigma: float = 1.5

    def __post_init__(self):
        if self.k1 <= 0 or self.k2 <= 0 or self.L <= 0:
            raise ValueError("k1, k2 and L must be positive")
        if self.mode not in ("global", "windowed"):
            raise ValueError(f"unknown ssim mode {self.mode!r}")

    @property
    def c1(self) -> float:
        return (self.k1 * self.L) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.L) ** 2


def _tensors(x, y) -> tuple[torch.Tensor, torch.Tensor]:
    x = torch.as_tensor(x)
    y = torch.as_tensor(y)
    if x.shape != y.shape:
        raise ShapeMismatch(f"shapes differ: {tuple(x.shape)} vs {tuple(y.shape)}")
    if not x.is_floating_point():
        x = x.double()
    return x, y.to(x.dtype)


def _ssim_formula(mx, my, vx, vy, cov, c1, c2):
    return ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))


def gaussian_window(size: int, sigma: float, dtype=torch.float64) -> torch.Tensor:
    r = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-(r ** 2) / (2 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(x, y, cfg: SsimConfig = SsimConfig()) -> torch.Tensor:
    x, y = _tensors(x, y)
    if cfg.mode == "global":
        dims = (-2, -1)
        mx, my = x.mean(dim=dims), y.mean(dim=dims)
        dx = x - mx[..., None, None]
        dy = y - my[..., None, None]
        vx, vy = (dx * dx).mean(dim=dims), (dy * dy).mean(dim=dims)
        cov = (dx * dy).mean(dim=dims)
        return _ssim_formula(mx, my, vx, vy, cov, cfg.c1, cfg.c2)

    lead = x.shape[:-2]
    h, w = x.shape[-2:]
    xs = x.reshape(-1, 1, h, w)
    ys = y.reshape(-1, 1, h, w)
    win = gaussian_window(cfg.win_size, cfg.sigma, x.dtype)[None, None]

    def filt(t):
        return F.conv2d(t, win)

    mx, my = filt(xs), filt(ys)
    vx = filt(xs * xs) - mx * mx
    vy = filt(ys * ys) - my * my
    cov = filt(xs * ys) - mx * my
    smap = _ssim_formula(mx, my, vx, vy, cov, cfg.c1, cfg.c2)
    return smap.mean(dim=(-3, -2, -1)).reshape(lead)


def dssim(x, y, cfg: SsimConfig = SsimConfig()) -> torch.Tensor:
    return 1.0 - ssim(x, y, cfg)


def lp_distance(x, y, norm: str = "l2", batch_dims: int = 0) -> torch.Tensor:
    """Norm of ``x - y`` flattened over all but the first ``batch_dims`` axes."""
    x, y = _tensors(x, y)
    d = (x - y).reshape(*x.shape[:batch_dims], -1)
    if norm == "l2":
        return d.pow(2).sum(-1).sqrt()
    if norm == "linf":
        return d.abs().amax(-1)
    raise ValueError(f"unknown norm {norm!r}")


def smooth_linf(x, y, temperature: float = 50.0, batch_dims: int = 0) -> torch.Tensor:
    """Log-sum-exp relaxation of the L-infinity distance; an upper bound within log(d)/temperature."""
    x, y = _tensors(x, y)
    d = (x - y).reshape(*x.shape[:batch_dims], -1).abs()
    return torch.logsumexp(temperature * d, dim=-1) / temperature


@dataclass(frozen=True)
class Rate:
    value: float
    low: float
    high: float
    k: int
    n: int

    def as_dict(self) -> dict:
        return {"value": self.value, "ci95": [self.low, self.high], "k": self.k, "n": self.n}


def binomial_rate(k: int, n: int) -> Rate:
    if n <= 0:
        raise EmptyInput("rate over zero trials")
    ci = binomtest(k, n).proportion_ci(confidence_level=0.95, method="wilson")
    return Rate(k / n, float(ci.low), float(ci.high), k, n)


def success_rate(records: Iterable) -> Rate:
    """Fraction of records whose ``success`` flag is set, with a Wilson 95% interval."""
    flags = [bool(r["success"] if isinstance(r, dict) else r.success) for r in records]
    if not flags:
        raise EmptyInput("success_rate needs at least one record")
    return binomial_rate(sum(flags), len(flags))


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return math.nan, math.nan
    return float(arr.mean()), float(arr.std())
