"""Joint continuous/discrete VAE: one Gaussian block z and one Gumbel-softmax categorical c."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import substrate
from .dataio import LabeledImageSet, batch_iter
from .errors import NonFiniteLoss

log = logging.getLogger(__name__)


@dataclass
class VaeConfig:
    m: int = 10
    n: int = 10
    beta: float = 4.0
    gumbel_tau: float = 0.67
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    # Capacity schedule of the original JointVAE; off by default.
    capacity: bool = False
    cap_z_max: float = 5.0
    cap_c_max: float = 5.0
    cap_gamma: float = 30.0
    cap_iters: int = 25_000

    def __post_init__(self):
        if self.m < 1 or self.n < 2 or self.beta < 0 or self.gumbel_tau <= 0:
            raise ValueError(f"invalid VaeConfig: {self}")


class PosteriorParams(NamedTuple):
    mu_z: torch.Tensor
    log_sigma_z: torch.Tensor
    c_logits: torch.Tensor


class LatentCode(NamedTuple):
    z: torch.Tensor
    c: torch.Tensor


class JointVAE(nn.Module):
    def __init__(self, m: int = 10, n: int = 10, hidden: int = 256):
        super().__init__()
        self.m, self.n = m, n
        self.encoder = nn.Sequential(
            nn.Conv2d(1, 32, 4, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(32, 64, 4, stride=2, padding=1), nn.ReLU(),
            nn.Flatten(),
            nn.Linear(64 * 7 * 7, hidden), nn.ReLU(),
        )
        self.head = nn.Linear(hidden, 2 * m + n)
        self.decoder = nn.Sequential(
            nn.Linear(m + n, hidden), nn.ReLU(),
            nn.Linear(hidden, 64 * 7 * 7), nn.ReLU(),
            nn.Unflatten(1, (64, 7, 7)),
            nn.ConvTranspose2d(64, 32, 4, stride=2, padding=1), nn.ReLU(),
            nn.ConvTranspose2d(32, 1, 4, stride=2, padding=1),
        )

    def encode(self, x: torch.Tensor) -> PosteriorParams:
        h = self.head(self.encoder(_as_nchw(x)))
        m = self.m
        return PosteriorParams(h[:, :m], h[:, m:2 * m], h[:, 2 * m:])

    def decode_logits(self, code: LatentCode) -> torch.Tensor:
        return self.decoder(torch.cat([code.z, code.c], dim=1))[:, 0]

    def decode(self, code: LatentCode) -> torch.Tensor:
        """Images in [0, 1], shape (N, 28, 28)."""
        return torch.sigmoid(self.decode_logits(code))

    def encode_mean(self, x: torch.Tensor) -> LatentCode:
        """Deterministic code: posterior mean and the softmax of the logits."""
        p = self.encode(x)
        return LatentCode(p.mu_z, torch.softmax(p.c_logits, dim=1))

    def reconstruct(self, x: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode_mean(x))


def _as_nchw(x: torch.Tensor) -> torch.Tensor:
    return x.unsqueeze(1) if x.dim() == 3 else x


def build_vae(cfg: VaeConfig) -> JointVAE:
    return substrate.init_module(JointVAE(cfg.m, cfg.n), substrate.derive_seed(cfg.seed, "vae.init"))


def encode(model: JointVAE, x) -> PosteriorParams:
    return model.encode(torch.as_tensor(x, dtype=next(model.parameters()).dtype))


def sample_latent(
    p: PosteriorParams,
    tau: float,
    generator: torch.Generator | None = None,
    eps: torch.Tensor | None = None,
    gumbel: torch.Tensor | None = None,
) -> LatentCode:
    """Reparameterized sample. Pass ``eps``/``gumbel`` to freeze the noise tape."""
    if eps is None:
        eps = torch.randn(p.mu_z.shape, generator=generator, dtype=p.mu_z.dtype)
    if gumbel is None:
        u = torch.rand(p.c_logits.shape, generator=generator, dtype=p.c_logits.dtype)
        gumbel = -torch.log(-torch.log(u.clamp(1e-20, 1.0)) + 1e-20)
    z = p.mu_z + torch.exp(p.log_sigma_z) * eps
    c = torch.softmax((p.c_logits + gumbel) / tau, dim=1)
    return LatentCode(z, c)


def decode(model: JointVAE, code: LatentCode) -> torch.Tensor:
    return model.decode(code)


def gaussian_kl(mu: torch.Tensor, log_sigma: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, sigma^2) || N(0, 1)) summed over the last axis."""
    return 0.5 * (mu.pow(2) + torch.exp(2 * log_sigma) - 1.0 - 2 * log_sigma).sum(-1)


def categorical_kl(logits: torch.Tensor) -> torch.Tensor:
    """KL(softmax(logits) || uniform) summed over the last axis."""
    logq = torch.log_softmax(logits, dim=-1)
    return (logq.exp() * (logq + math.log(logits.shape[-1]))).sum(-1)


def bernoulli_nll(x: torch.Tensor, recon: torch.Tensor) -> torch.Tensor:
    """Per-image summed BCE; ``recon`` holds probabilities."""
    r = recon.clamp(1e-7, 1 - 1e-7)
    nll = -(x * torch.log(r) + (1 - x) * torch.log1p(-r))
    return nll.reshape(nll.shape[0], -1).sum(-1)


class ElboTerms(NamedTuple):
    total: torch.Tensor
    recon: torch.Tensor
    kl: torch.Tensor


def elbo_loss(x, posterior: PosteriorParams, reconstruction, cfg: VaeConfig, step: int | None = None) -> ElboTerms:
    """Batch-mean negative ELBO: recon + beta * (KL_z + KL_c).

    With ``cfg.capacity`` the KL terms are replaced by gamma * |KL - C(step)| per block.
    """
    x = torch.as_tensor(x, dtype=reconstruction.dtype)
    recon = bernoulli_nll(x, reconstruction).mean()
    kl_z = gaussian_kl(posterior.mu_z, posterior.log_sigma_z).mean()
    kl_c = categorical_kl(posterior.c_logits).mean()
    kl = kl_z + kl_c
    if cfg.capacity:
        frac = min(1.0, (step or 0) / cfg.cap_iters)
        penalty = cfg.cap_gamma * ((kl_z - frac * cfg.cap_z_max).abs() + (kl_c - frac * cfg.cap_c_max).abs())
        return ElboTerms(recon + penalty, recon, kl)
    return ElboTerms(recon + cfg.beta * kl, recon, kl)


def vae_forward(model: JointVAE, x: torch.Tensor, cfg: VaeConfig, generator: torch.Generator | None = None):
    post = model.encode(x)
    code = sample_latent(post, cfg.gumbel_tau, generator)
    return post, model.decode(code)


@torch.no_grad()
def evaluate_vae(model: JointVAE, data: LabeledImageSet, cfg: VaeConfig, batch_size: int = 500) -> dict:
    """Mean (recon, kl, total) with frozen-zero noise: z = mu_z, c = softmax(logits / tau)."""
    model.eval()
    sums = np.zeros(3)
    for xb, _ in batch_iter(data, batch_size, shuffle=False):
        x = torch.from_numpy(xb)
        post = model.encode(x)
        code = sample_latent(post, cfg.gumbel_tau, eps=torch.zeros_like(post.mu_z), gumbel=torch.zeros_like(post.c_logits))
        t = elbo_loss(x, post, model.decode(code), cfg)
        sums += len(xb) * np.array([t.recon.item(), t.kl.item(), t.total.item()])
    recon, kl, total = sums / len(data)
    return {"recon": float(recon), "kl": float(kl), "total": float(total)}


def train_vae(
    train: LabeledImageSet,
    cfg: VaeConfig,
    val: LabeledImageSet | None = None,
    log_path: str | Path | None = None,
) -> tuple[JointVAE, list[dict]]:
    if train.split == "test" or (val is not None and val.split == "test"):
        raise ValueError("the VAE must never see the test split")
    model = build_vae(cfg)
    opt = substrate.Adam(model, lr=cfg.lr)
    gen = torch.Generator().manual_seed(substrate.derive_seed(cfg.seed, "vae.noise"))
    history = []
    log_fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            model.train()
            sums, count = np.zeros(3), 0
            for xb, _ in batch_iter(train, cfg.batch_size, seed=substrate.derive_seed(cfg.seed, f"vae.epoch{epoch}")):
                x = torch.from_numpy(xb)
                post, recon = vae_forward(model, x, cfg, gen)
                terms = elbo_loss(x, post, recon, cfg, step=opt.state.step)
                if not torch.isfinite(terms.total):
                    raise NonFiniteLoss(f"VAE loss became {terms.total.item()} at epoch {epoch}, step {opt.state.step}")
                opt.zero_grad()
                terms.total.backward()
                opt.step()
                sums += len(xb) * np.array([terms.recon.item(), terms.kl.item(), terms.total.item()])
                count += len(xb)
            row = {"epoch": epoch, "recon": float(sums[0] / count), "kl": float(sums[1] / count),
                   "total": float(sums[2] / count)}
            if val is not None:
                row.update({f"val_{k}": v for k, v in evaluate_vae(model, val, cfg).items()})
            history.append(row)
            log.info("vae epoch %d: %s", epoch, row)
            if log_fh:
                log_fh.write(json.dumps(row, sort_keys=True) + "\n")
                log_fh.flush()
    finally:
        if log_fh:
            log_fh.close()
    model.eval()
    return model, history


def save_vae(model: JointVAE, cfg: VaeConfig, path, extra: dict | None = None) -> Path:
    meta = {"model": "joint_vae", "config": asdict(cfg), **(extra or {})}
    return substrate.save_checkpoint(substrate.ParamStore.from_module(model), meta, path)


def load_vae(path) -> tuple[JointVAE, VaeConfig]:
    store, meta = substrate.load_checkpoint(path)
    cfg = VaeConfig(**meta["config"])
    model = JointVAE(cfg.m, cfg.n)
    store.load_into(model)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model, cfg


def interpolation_path(model: JointVAE, x1, x2, alphas) -> torch.Tensor:
    """Decodes of alpha * f(x1) + (1 - alpha) * f(x2) for each alpha."""
    from .attack import interpolate

    return torch.stack([interpolate(model, x1, x2, a, 1.0 - a) for a in alphas])
