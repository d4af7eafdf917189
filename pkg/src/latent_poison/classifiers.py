"""Inference (LeNet) and test (Madry) classifiers, PGD, adversarial training."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import substrate
from .dataio import LabeledImageSet, batch_iter
from .errors import BlackBoxViolation, NonFiniteLoss

log = logging.getLogger(__name__)

ARCHITECTURES = ("lenet-small", "madry-mnist")


class LeNet(nn.Module):
    def __init__(self, num_classes: int = 10):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(1, 6, 5, padding=2), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(6, 16, 5), nn.ReLU(), nn.MaxPool2d(2),
        )
        self.classifier = nn.Sequential(
            nn.Flatten(),
            nn.Linear(16 * 5 * 5, 120), nn.ReLU(),
            nn.Linear(120, 84), nn.ReLU(),
            nn.Linear(84, num_classes),
        )

    def forward(self, x):
        return self.classifier(self.features(_as_nchw(x)))


class MadryNet(nn.Module):
    def __init__(self, num_classes: int = 10):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(1, 32, 5, padding=2), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(32, 64, 5, padding=2), nn.ReLU(), nn.MaxPool2d(2),
        )
        self.classifier = nn.Sequential(
            nn.Flatten(),
            nn.Linear(64 * 7 * 7, 1024), nn.ReLU(),
            nn.Linear(1024, num_classes),
        )

    def forward(self, x):
        return self.classifier(self.features(_as_nchw(x)))


def _as_nchw(x: torch.Tensor) -> torch.Tensor:
    return x.unsqueeze(1) if x.dim() == 3 else x


def build_classifier(architecture: str, num_classes: int = 10, seed: int = 0) -> nn.Module:
    if architecture == "lenet-small":
        model = LeNet(num_classes)
    elif architecture == "madry-mnist":
        model = MadryNet(num_classes)
    else:
        raise ValueError(f"unknown architecture {architecture!r}; expected one of {ARCHITECTURES}")
    model.architecture = architecture
    model.num_classes = num_classes
    return substrate.init_module(model, substrate.derive_seed(seed, f"{architecture}.init"))


class Prediction(NamedTuple):
    logits: torch.Tensor
    probs: torch.Tensor


def classify(model: nn.Module, x) -> Prediction:
    x = torch.as_tensor(x, dtype=next(model.parameters()).dtype)
    logits = model(x)
    return Prediction(logits, torch.softmax(logits, dim=1))


def smoothed_ce_loss(logits: torch.Tensor, labels: torch.Tensor, eps_ls: float = 0.0) -> torch.Tensor:
    """Mean cross entropy against (1 - eps) * onehot + eps / K."""
    if not 0.0 <= eps_ls < 1.0:
        raise ValueError("label smoothing must lie in [0, 1)")
    k = logits.shape[1]
    target = F.one_hot(labels, k).to(logits.dtype) * (1 - eps_ls) + eps_ls / k
    return -(target * torch.log_softmax(logits, dim=1)).sum(1).mean()


@dataclass
class PgdConfig:
    epsilon: float = 0.3
    steps: int = 20
    step_size: float | None = None  # default 2.5 * epsilon / steps
    random_start: bool = True

    def __post_init__(self):
        if self.epsilon < 0 or self.steps < 0:
            raise ValueError("epsilon and steps must be nonnegative")
        if self.step_size is not None and self.steps > 0 and self.step_size <= 0:
            raise ValueError("step_size must be positive")

    @property
    def alpha(self) -> float:
        if self.step_size is not None:
            return self.step_size
        return 2.5 * self.epsilon / self.steps if self.steps else 0.0


def pgd_attack(
    model: nn.Module,
    x: torch.Tensor,
    labels: torch.Tensor,
    cfg: PgdConfig,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """L-infinity PGD on the cross-entropy loss; output stays in the eps-ball and in [0, 1]."""
    x = torch.as_tensor(x).detach()
    labels = torch.as_tensor(labels)
    eps = cfg.epsilon
    if eps == 0 or (cfg.steps == 0 and not cfg.random_start):
        return x.clone()
    was_training = model.training
    model.eval()
    req = [p.requires_grad for p in model.parameters()]
    for p in model.parameters():
        p.requires_grad_(False)
    try:
        if cfg.random_start:
            noise = torch.rand(x.shape, generator=generator, dtype=x.dtype) * 2 - 1
            x_adv = (x + eps * noise).clamp(0, 1)
        else:
            x_adv = x.clone()
        for _ in range(cfg.steps):
            x_adv.requires_grad_(True)
            loss = F.cross_entropy(model(x_adv), labels, reduction="sum")
            (grad,) = torch.autograd.grad(loss, x_adv)
            with torch.no_grad():
                x_adv = x_adv + cfg.alpha * grad.sign()
                x_adv = torch.min(torch.max(x_adv, x - eps), x + eps).clamp(0, 1)
    finally:
        for p, r in zip(model.parameters(), req):
            p.requires_grad_(r)
        model.train(was_training)
    x_adv = x_adv.detach()
    assert (x_adv - x).abs().max() <= eps + 1e-6, "PGD left the epsilon ball"
    assert x_adv.min() >= 0 and x_adv.max() <= 1, "PGD left the [0, 1] box"
    return x_adv


@dataclass
class TrainConfig:
    architecture: str = "lenet-small"
    epochs: int = 5
    batch_size: int = 64
    lr: float = 1e-3
    label_smoothing: float = 0.0
    seed: int = 0
    # adversarial training only
    pgd_epsilon: float = 0.3
    pgd_steps: int = 7
    eps_warmup_epochs: float = 0.0


def train_classifier(
    train: LabeledImageSet,
    cfg: TrainConfig,
    adversarial: bool = False,
    log_path: str | Path | None = None,
) -> tuple[nn.Module, list[dict]]:
    """Standard training, or PGD adversarial training when ``adversarial`` is set.

    Adversarial mode swaps every minibatch for its PGD counterpart before the step.
    ``eps_warmup_epochs`` ramps epsilon linearly from 0 over that many epochs.
    """
    if adversarial and cfg.pgd_epsilon <= 0:
        raise ValueError("adversarial training needs pgd_epsilon > 0")
    model = build_classifier(cfg.architecture, train.num_classes, cfg.seed)
    opt = substrate.Adam(model, lr=cfg.lr)
    gen = torch.Generator().manual_seed(substrate.derive_seed(cfg.seed, "pgd.train"))
    batches_per_epoch = -(-len(train) // cfg.batch_size)
    history = []
    log_fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            model.train()
            loss_sum, correct, count = 0.0, 0, 0
            seed = substrate.derive_seed(cfg.seed, f"clf.epoch{epoch}")
            for b, (xb, yb) in enumerate(batch_iter(train, cfg.batch_size, seed=seed)):
                x, y = torch.from_numpy(xb), torch.from_numpy(yb)
                if adversarial:
                    progress = (epoch - 1) + b / batches_per_epoch
                    ramp = min(1.0, progress / cfg.eps_warmup_epochs) if cfg.eps_warmup_epochs > 0 else 1.0
                    pgd = PgdConfig(cfg.pgd_epsilon * ramp, cfg.pgd_steps)
                    x = pgd_attack(model, x, y, pgd, gen)
                    model.train()
                logits = model(x)
                loss = smoothed_ce_loss(logits, y, cfg.label_smoothing)
                if not torch.isfinite(loss):
                    raise NonFiniteLoss(f"classifier loss became {loss.item()} at epoch {epoch}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                loss_sum += loss.item() * len(yb)
                correct += int((logits.argmax(1) == y).sum())
                count += len(yb)
            row = {"epoch": epoch, "loss": loss_sum / count, "train_acc": correct / count}
            history.append(row)
            log.info("%s epoch %d: %s", cfg.architecture, epoch, row)
            if log_fh:
                log_fh.write(json.dumps(row, sort_keys=True) + "\n")
                log_fh.flush()
    finally:
        if log_fh:
            log_fh.close()
    model.eval()
    return model, history


def adv_train(architecture: str, train: LabeledImageSet, pgd_cfg: PgdConfig, epochs: int, **kw):
    cfg = TrainConfig(architecture=architecture, epochs=epochs, pgd_epsilon=pgd_cfg.epsilon, pgd_steps=pgd_cfg.steps, **kw)
    return train_classifier(train, cfg, adversarial=True)


def predict_labels(model: nn.Module, x: torch.Tensor, batch_size: int = 1000) -> torch.Tensor:
    out = []
    with torch.no_grad():
        for i in range(0, len(x), batch_size):
            out.append(model(x[i:i + batch_size]).argmax(1))
    return torch.cat(out) if out else torch.empty(0, dtype=torch.long)


def eval_accuracy(
    model: nn.Module,
    data: LabeledImageSet,
    attack: PgdConfig | None = None,
    batch_size: int = 500,
    seed: int = 0,
) -> dict:
    """Standard accuracy, plus accuracy on PGD inputs when ``attack`` is given."""
    model.eval()
    gen = torch.Generator().manual_seed(seed)
    correct = robust = 0
    for xb, yb in batch_iter(data, batch_size, shuffle=False):
        x, y = torch.from_numpy(xb), torch.from_numpy(yb)
        with torch.no_grad():
            correct += int((model(x).argmax(1) == y).sum())
        if attack is not None:
            x_adv = pgd_attack(model, x, y, attack, gen)
            with torch.no_grad():
                robust += int((model(x_adv).argmax(1) == y).sum())
    out = {"standard_acc": correct / len(data), "n": len(data)}
    if attack is not None:
        out.update({"robust_acc": robust / len(data), "epsilon": attack.epsilon, "steps": attack.steps})
    return out


def save_classifier(model: nn.Module, cfg: TrainConfig, path, extra: dict | None = None) -> Path:
    meta = {"model": model.architecture, "num_classes": model.num_classes, "config": asdict(cfg), **(extra or {})}
    return substrate.save_checkpoint(substrate.ParamStore.from_module(model), meta, path)


def load_classifier(path) -> nn.Module:
    store, meta = substrate.load_checkpoint(path)
    model = build_classifier(meta["model"], meta["num_classes"])
    store.load_into(model)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


class BlackBoxClassifier:
    """Prediction-only view of the test classifier.

    Attack code receives this object (never the module). It answers with
    detached probabilities and counts any attempt to push a gradient-tracking
    input through it; such attempts raise.
    """

    def __init__(self, model: nn.Module):
        self._model = model
        self.queries = 0
        self.gradient_queries = 0

    def predict_proba(self, x) -> torch.Tensor:
        x = torch.as_tensor(x)
        if x.requires_grad:
            self.gradient_queries += 1
            raise BlackBoxViolation("gradient-tracking input passed to the black-box test classifier")
        self.queries += len(x)
        with torch.no_grad():
            return torch.softmax(self._model(x.to(next(self._model.parameters()).dtype)), dim=1)

    def predict(self, x) -> torch.Tensor:
        return self.predict_proba(x).argmax(1)
