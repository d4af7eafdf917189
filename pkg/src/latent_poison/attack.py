"""Latent-space poisoning.

Pipeline for one image x:

1. encode x to (z, c) with the frozen VAE (posterior mean, softmax of logits);
2. ask the inference classifier for soft labels and take the two most likely
   classes (top1, top2);
3. the noise learner maps (z, c, onehot(top2)) to (eta_z, eta_c); the
   target-class statistics turn these into z' = mu + eta * sigma (same for c');
4. mix Z = a * z + b * z', C = a * c + b * c', project C back onto the simplex;
5. decode (Z, C) to x'.

Training minimizes l0 * BCE(C1(x'), [top1 & top2]) + l1 * ||x - x'|| + l2 * DSSIM(x, x')
through the frozen decoder and inference classifier. The test classifier is
never touched here.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import metrics, substrate
from .dataio import LabeledImageSet, batch_iter
from .errors import NonFiniteLoss
from .latentstats import ClassLatentStats, sample_class_latent
from .vae import JointVAE, LatentCode

log = logging.getLogger(__name__)

TABLE2_GRID = ((0.6, 0.8), (0.5, 0.8), (0.3, 0.8), (0.1, 0.8), (0.0, 1.0))


@dataclass
class AttackConfig:
    lambda_org: float = 0.0
    lambda_noised: Union[float, str] = 1.0  # a float in [0, 1] or "learned"
    lambda0: float = 1.0
    lambda1: float = 1.0
    lambda2: float = 1.0
    norm_choice: str = "l2"
    param_budget: int = 12_000
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    target_mode: str = "multilabel"  # or "softmax" (0.5 / 0.5 cross entropy)
    linf_temperature: float = 50.0
    train_limit: int | None = None
    eta_bound: float | None = 1.0  # |eta| <= bound class-sigmas; None leaves eta unbounded

    def __post_init__(self):
        if not 0.0 <= self.lambda_org <= 1.0:
            raise ValueError(f"lambda_org must lie in [0, 1], got {self.lambda_org}")
        if isinstance(self.lambda_noised, str):
            if self.lambda_noised != "learned":
                self.lambda_noised = float(self.lambda_noised)
        if not isinstance(self.lambda_noised, str) and not 0.0 <= self.lambda_noised <= 1.0:
            raise ValueError(f"lambda_noised must lie in [0, 1] or be 'learned', got {self.lambda_noised}")
        weights = (self.lambda0, self.lambda1, self.lambda2)
        if min(weights) < 0 or max(weights) <= 0:
            raise ValueError("loss weights must be nonnegative with at least one positive")
        if self.norm_choice not in ("l2", "linf"):
            raise ValueError(f"norm_choice must be l2 or linf, got {self.norm_choice!r}")
        if self.target_mode not in ("multilabel", "softmax"):
            raise ValueError(f"unknown target_mode {self.target_mode!r}")
        if self.param_budget <= 0 or self.epochs < 0 or self.batch_size <= 0:
            raise ValueError("budgets must be positive")
        if self.eta_bound is not None and self.eta_bound <= 0:
            raise ValueError(f"eta_bound must be positive or None, got {self.eta_bound}")

    @property
    def learned(self) -> bool:
        return self.lambda_noised == "learned"


# -- targets -------------------------------------------------------------------

def select_target(soft_probs) -> tuple:
    """(top1, top2) by probability, ties going to the lower class index.

    Accepts a single probability vector or an (N, K) batch.
    """
    p = torch.as_tensor(soft_probs)
    order = torch.sort(p, dim=-1, descending=True, stable=True).indices
    top1, top2 = order[..., 0], order[..., 1]
    if p.dim() == 1:
        return int(top1), int(top2)
    return top1, top2


def make_target_softlabels(top1, top2, num_classes: int, mode: str = "multilabel") -> torch.Tensor:
    """1.0 at both classes (multi-label BCE), or 0.5 / 0.5 in softmax mode."""
    t1 = torch.as_tensor(top1)
    t2 = torch.as_tensor(top2)
    if torch.any(t1 == t2):
        raise ValueError("top1 and top2 must differ")
    value = 1.0 if mode == "multilabel" else 0.5
    target = value * (F.one_hot(t1, num_classes) + F.one_hot(t2, num_classes))
    return target.float()


# -- networks ------------------------------------------------------------------

def _mlp_params(inp: int, hidden: int, out: int) -> int:
    return inp * hidden + hidden + hidden * out + out


def solve_widths(budget: int, m: int, n: int, num_classes: int) -> tuple[int, int]:
    """Hidden widths (noise, coefficient) whose total parameter count lands closest to ``budget``.

    Both learners are single-hidden-layer MLPs over (z, c, onehot target); the
    coefficient learner is half as wide as the noise learner.
    """
    inp = m + n + num_classes
    best = None
    for h in range(2, 4096):
        h2 = max(2, h // 2)
        total = _mlp_params(inp, h, m + n) + _mlp_params(inp, h2, 1)
        gap = abs(total - budget)
        if best is None or gap < best[0]:
            best = (gap, h, h2)
        if total > budget:
            break
    return best[1], best[2]


class AttackNetworks(nn.Module):
    """Noise learner and coefficient learner over (z, c, onehot target).

    With ``eta_bound`` set, the noise is ``eta_bound * tanh(.)`` so the target
    sample stays within that many class standard deviations of the class mean.
    """

    def __init__(self, m: int, n: int, num_classes: int, noise_hidden: int, coef_hidden: int,
                 eta_bound: float | None = None):
        super().__init__()
        self.m, self.n, self.num_classes = m, n, num_classes
        self.eta_bound = eta_bound
        inp = m + n + num_classes
        self.noise_learner = nn.Sequential(nn.Linear(inp, noise_hidden), nn.Tanh(), nn.Linear(noise_hidden, m + n))
        self.coefficient_learner = nn.Sequential(nn.Linear(inp, coef_hidden), nn.Tanh(), nn.Linear(coef_hidden, 1))

    def forward(self, z, c, target_class):
        onehot = F.one_hot(torch.as_tensor(target_class), self.num_classes).to(z.dtype)
        h = torch.cat([z, c, onehot], dim=1)
        eta = self.noise_learner(h)
        if self.eta_bound is not None:
            eta = self.eta_bound * torch.tanh(eta)
        coef = torch.sigmoid(self.coefficient_learner(h))[:, 0]
        return eta[:, :self.m], eta[:, self.m:], coef


def build_networks(cfg: AttackConfig, m: int, n: int, num_classes: int) -> AttackNetworks:
    h, h2 = solve_widths(cfg.param_budget, m, n, num_classes)
    nets = AttackNetworks(m, n, num_classes, h, h2, cfg.eta_bound)
    return substrate.init_module(nets, substrate.derive_seed(cfg.seed, "attack.init"))


# -- mixing --------------------------------------------------------------------

def project_simplex(c: torch.Tensor) -> torch.Tensor:
    """Clamp at zero and renormalize; rows summing to <= 1e-8 become uniform."""
    c = c.clamp(min=0.0)
    s = c.sum(dim=-1, keepdim=True)
    uniform = torch.full_like(c, 1.0 / c.shape[-1])
    return torch.where(s > 1e-8, c / s.clamp(min=1e-8), uniform)


class Poisoned(NamedTuple):
    code: LatentCode
    eta_z: torch.Tensor
    eta_c: torch.Tensor
    lambda_noised: torch.Tensor


def poison_latents(
    z: torch.Tensor,
    c: torch.Tensor,
    stats,
    target_class,
    networks: AttackNetworks | None,
    cfg: AttackConfig,
    eta: tuple[torch.Tensor, torch.Tensor] | None = None,
) -> Poisoned:
    """Mix the original code with a target-class sample.

    ``eta`` overrides the noise learner output (used by the per-sample
    optimizer and by identity checks).
    """
    if isinstance(stats, ClassLatentStats):
        stats = stats.torch(z.dtype)
    if eta is None or cfg.learned:
        eta_z, eta_c, coef = networks(z, c, target_class)
    if eta is not None:
        eta_z, eta_c = eta
    z_prime, c_prime = sample_class_latent(stats, torch.as_tensor(target_class), eta_z, eta_c)
    lam = coef if cfg.learned else torch.full((z.shape[0],), float(cfg.lambda_noised), dtype=z.dtype)
    a = cfg.lambda_org
    Z = a * z + lam[:, None] * z_prime
    C = project_simplex(a * c + lam[:, None] * c_prime)
    return Poisoned(LatentCode(Z, C), eta_z, eta_c, lam)


def interpolate(vae: JointVAE, x1, x2, alpha: float, beta: float) -> torch.Tensor:
    """decode(alpha * f(x1) + beta * f(x2)) with the categorical part projected to the simplex."""
    dtype = next(vae.parameters()).dtype
    x1 = torch.tensor(np.asarray(x1), dtype=dtype)
    x2 = torch.tensor(np.asarray(x2), dtype=dtype)
    single = x1.dim() == 2
    if single:
        x1, x2 = x1[None], x2[None]
    with torch.no_grad():
        a, b = vae.encode_mean(x1), vae.encode_mean(x2)
        code = LatentCode(alpha * a.z + beta * b.z, project_simplex(alpha * a.c + beta * b.c))
        out = vae.decode(code)
    return out[0] if single else out


# -- losses --------------------------------------------------------------------

def bce_multilabel(pred_probs: torch.Tensor, target: torch.Tensor, weights=None) -> torch.Tensor:
    """Weighted binary cross entropy summed over classes (mean over a leading batch axis)."""
    x = pred_probs.clamp(1e-7, 1 - 1e-7)
    target = target.to(x.dtype)
    w = torch.ones_like(x) if weights is None else torch.as_tensor(weights, dtype=x.dtype)
    per = -w * (target * torch.log(x) + (1 - target) * torch.log(1 - x))
    per = per.sum(-1)
    return per.mean() if per.dim() else per


class LossTerms(NamedTuple):
    total: torch.Tensor
    l0: torch.Tensor
    l1: torch.Tensor
    l2: torch.Tensor


def composite_loss(x, x_adv, pred_probs, target, cfg: AttackConfig) -> LossTerms:
    """Batch-mean weighted sum of the classification, norm and DSSIM terms.

    ``pred_probs`` must come from the inference classifier on ``x_adv``.
    """
    if cfg.target_mode == "multilabel":
        l0 = bce_multilabel(pred_probs, target)
    else:
        l0 = -(target * torch.log(pred_probs.clamp_min(1e-7))).sum(-1).mean()
    if cfg.norm_choice == "l2":
        l1 = metrics.lp_distance(x, x_adv, "l2", batch_dims=1).mean()
    else:
        l1 = metrics.smooth_linf(x, x_adv, cfg.linf_temperature, batch_dims=1).mean()
    l2 = metrics.dssim(x, x_adv).mean()
    total = cfg.lambda0 * l0 + cfg.lambda1 * l1 + cfg.lambda2 * l2
    return LossTerms(total, l0, l1, l2)


# -- forward pass --------------------------------------------------------------

class AttackOutput(NamedTuple):
    x_adv: torch.Tensor
    top1: torch.Tensor
    top2: torch.Tensor
    probs_orig: torch.Tensor
    probs_adv: torch.Tensor
    target: torch.Tensor
    poisoned: Poisoned
    recon: torch.Tensor


def attack_forward(networks, vae, inference_clf, stats, x, cfg: AttackConfig, eta=None) -> AttackOutput:
    """encode -> select_target -> poison_latents -> decode -> inference classifier."""
    with torch.no_grad():
        code = vae.encode_mean(x)
        probs_orig = torch.softmax(inference_clf(x), dim=1)
        top1, top2 = select_target(probs_orig)
        recon = vae.decode(code)
    target = make_target_softlabels(top1, top2, probs_orig.shape[1], cfg.target_mode).to(x.dtype)
    poisoned = poison_latents(code.z, code.c, stats, top2, networks, cfg, eta=eta)
    x_adv = vae.decode(poisoned.code)
    probs_adv = torch.softmax(inference_clf(x_adv), dim=1)
    return AttackOutput(x_adv, top1, top2, probs_orig, probs_adv, target, poisoned, recon)


def _param_digest(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in module.named_parameters():
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def _freeze(module: nn.Module) -> None:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)


def attack_train(
    vae: JointVAE,
    inference_clf: nn.Module,
    stats: ClassLatentStats,
    train: LabeledImageSet,
    cfg: AttackConfig,
    log_path: str | Path | None = None,
) -> tuple[AttackNetworks, list[dict]]:
    """Amortized training of the noise and coefficient learners."""
    if train.split == "test":
        raise ValueError("attack networks are trained on the training split only")
    _freeze(vae)
    _freeze(inference_clf)
    before = (_param_digest(vae), _param_digest(inference_clf))
    data = train.subset(cfg.train_limit)
    nets = build_networks(cfg, vae.m, vae.n, data.num_classes)
    opt = substrate.Adam(nets, lr=cfg.lr)
    st = stats.torch(torch.float32)
    history = []
    log_fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            nets.train()
            sums, count = np.zeros(4), 0
            seed = substrate.derive_seed(cfg.seed, f"attack.epoch{epoch}")
            for xb, _ in batch_iter(data, cfg.batch_size, seed=seed):
                x = torch.from_numpy(xb)
                out = attack_forward(nets, vae, inference_clf, st, x, cfg)
                terms = composite_loss(x, out.x_adv, out.probs_adv, out.target, cfg)
                if not torch.isfinite(terms.total):
                    raise NonFiniteLoss(f"attack loss became {terms.total.item()} at epoch {epoch}")
                opt.zero_grad()
                terms.total.backward()
                opt.step()
                sums += len(xb) * np.array([t.item() for t in terms])
                count += len(xb)
            row = dict(zip(("total", "l0", "l1", "l2"), (sums / count).tolist()))
            row["epoch"] = epoch
            history.append(row)
            log.info("attack epoch %d: %s", epoch, row)
            if log_fh:
                log_fh.write(json.dumps(row, sort_keys=True) + "\n")
                log_fh.flush()
    finally:
        if log_fh:
            log_fh.close()
    assert (_param_digest(vae), _param_digest(inference_clf)) == before, "frozen models changed during attack training"
    nets.eval()
    return nets, history


def optimize_single(
    vae, inference_clf, stats, x: torch.Tensor, cfg: AttackConfig, steps: int = 200, lr: float = 0.05
) -> AttackOutput:
    """Per-sample fallback: optimize eta_z, eta_c (and lambda_noised when learned) directly."""
    _freeze(vae)
    _freeze(inference_clf)
    x = torch.as_tensor(x)
    with torch.no_grad():
        code = vae.encode_mean(x)
    eta_z = torch.zeros_like(code.z, requires_grad=True)
    eta_c = torch.zeros_like(code.c, requires_grad=True)
    logit_lam = torch.zeros(x.shape[0], requires_grad=True)
    params = [eta_z, eta_c] + ([logit_lam] if cfg.learned else [])
    opt = torch.optim.Adam(params, lr=lr)
    st = stats.torch(x.dtype) if isinstance(stats, ClassLatentStats) else stats

    class _Fixed(nn.Module):
        def forward(self, z, c, target_class):
            return eta_z, eta_c, torch.sigmoid(logit_lam)

    fixed = _Fixed()
    for _ in range(steps):
        out = attack_forward(fixed, vae, inference_clf, st, x, cfg)
        terms = composite_loss(x, out.x_adv, out.probs_adv, out.target, cfg)
        opt.zero_grad()
        terms.total.backward()
        opt.step()
    with torch.no_grad():
        return attack_forward(fixed, vae, inference_clf, st, x, cfg)


# -- records -------------------------------------------------------------------

def _encode_image(img: np.ndarray) -> str:
    q = np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    return base64.b64encode(q.tobytes()).decode("ascii")


def decode_image(s: str, shape=(28, 28)) -> np.ndarray:
    return np.frombuffer(base64.b64decode(s), dtype=np.uint8).reshape(shape).astype(np.float32) / 255.0


@dataclass
class AttackRecord:
    index: int
    original_label: int
    inference_top1: int
    inference_top2: int
    inference_top1_prob: float
    inference_top2_prob: float
    inference_pred_adv: int
    pair_inequality: bool  # P(top2) >= P(top1) on x' under the inference classifier
    lambda_noised: float
    ssim: float
    ssim_windowed: float
    ssim_recon: float
    l2: float
    linf: float
    original_image: str = ""  # base64 of uint8 pixels
    adversarial_image: str = ""
    test_pred_before: int | None = None
    test_pred_after: int | None = None
    success: bool | None = None

    def set_test_predictions(self, before: int, after: int) -> None:
        self.test_pred_before = int(before)
        self.test_pred_after = int(after)
        self.success = self.test_pred_after != self.original_label

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _round(v: float) -> float:
    return float(f"{float(v):.9g}")


@torch.no_grad()
def attack_apply(
    networks: AttackNetworks, vae, inference_clf, stats, x, labels, cfg: AttackConfig, start_index: int = 0, eta=None
) -> tuple[list[AttackRecord], torch.Tensor]:
    """Run the frozen pipeline on a batch; returns records (without test-classifier fields) and x'."""
    x = torch.as_tensor(x, dtype=torch.float32)
    out = attack_forward(networks, vae, inference_clf, stats, x, cfg, eta=eta)
    s_global = metrics.ssim(x, out.x_adv)
    s_window = metrics.ssim(x, out.x_adv, metrics.SsimConfig(mode="windowed"))
    s_recon = metrics.ssim(x, out.recon)
    l2 = metrics.lp_distance(x, out.x_adv, "l2", batch_dims=1)
    linf = metrics.lp_distance(x, out.x_adv, "linf", batch_dims=1)
    records = []
    for i in range(len(x)):
        t1, t2 = int(out.top1[i]), int(out.top2[i])
        records.append(
            AttackRecord(
                index=start_index + i,
                original_label=int(labels[i]),
                inference_top1=t1,
                inference_top2=t2,
                inference_top1_prob=_round(out.probs_orig[i, t1]),
                inference_top2_prob=_round(out.probs_orig[i, t2]),
                inference_pred_adv=int(out.probs_adv[i].argmax()),
                pair_inequality=bool(out.probs_adv[i, t2] >= out.probs_adv[i, t1]),
                lambda_noised=_round(out.poisoned.lambda_noised[i]),
                ssim=_round(s_global[i]),
                ssim_windowed=_round(s_window[i]),
                ssim_recon=_round(s_recon[i]),
                l2=_round(l2[i]),
                linf=_round(linf[i]),
                original_image=_encode_image(x[i].numpy()),
                adversarial_image=_encode_image(out.x_adv[i].numpy()),
            )
        )
    return records, out.x_adv


# -- persistence ---------------------------------------------------------------

def save_networks(nets: AttackNetworks, cfg: AttackConfig, path, extra: dict | None = None) -> Path:
    meta = {
        "model": "attack_networks",
        "config": asdict(cfg),
        "dims": {"m": nets.m, "n": nets.n, "num_classes": nets.num_classes},
        "widths": [nets.noise_learner[0].out_features, nets.coefficient_learner[0].out_features],
        "param_count": substrate.count_params(nets),
        **(extra or {}),
    }
    return substrate.save_checkpoint(substrate.ParamStore.from_module(nets), meta, path)


def load_networks(path) -> tuple[AttackNetworks, AttackConfig]:
    store, meta = substrate.load_checkpoint(path)
    cfg = AttackConfig(**meta["config"])
    d = meta["dims"]
    nets = AttackNetworks(d["m"], d["n"], d["num_classes"], *meta["widths"], cfg.eta_bound)
    store.load_into(nets)
    _freeze(nets)
    return nets, cfg
