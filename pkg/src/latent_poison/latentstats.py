"""Per-class latent statistics D(y) and Gaussian-sum helpers."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .dataio import LabeledImageSet, batch_iter
from .errors import EmptyClass, InvalidClass, VersionMismatch

STATS_VERSION = 1


class CompensatedSum:
    """Vectorized Neumaier summation, mergeable across shards."""

    def __init__(self, shape):
        self.total = np.zeros(shape, dtype=np.float64)
        self.comp = np.zeros(shape, dtype=np.float64)

    def add(self, value) -> None:
        value = np.asarray(value, dtype=np.float64)
        t = self.total + value
        big = np.abs(self.total) >= np.abs(value)
        self.comp += np.where(big, (self.total - t) + value, (value - t) + self.total)
        self.total = t

    def merge(self, other: "CompensatedSum") -> None:
        self.add(other.total)
        self.add(other.comp)

    @property
    def value(self) -> np.ndarray:
        return self.total + self.comp


class _ClassAccumulator:
    def __init__(self, num_classes: int, dim: int):
        self.n = np.zeros(num_classes, dtype=np.int64)
        self.s1 = [CompensatedSum(dim) for _ in range(num_classes)]
        self.s2 = [CompensatedSum(dim) for _ in range(num_classes)]

    def add(self, values: np.ndarray, labels: np.ndarray) -> None:
        values = np.asarray(values, dtype=np.float64)
        # per-sample adds keep the result independent of record order up to compensation error
        for v, y in zip(values, labels):
            self.n[y] += 1
            self.s1[y].add(v)
            self.s2[y].add(v * v)

    def merge(self, other: "_ClassAccumulator") -> None:
        self.n += other.n
        for a, b in zip(self.s1, other.s1):
            a.merge(b)
        for a, b in zip(self.s2, other.s2):
            a.merge(b)

    def finalize(self) -> tuple[np.ndarray, np.ndarray]:
        empty = np.flatnonzero(self.n == 0)
        if empty.size:
            raise EmptyClass(f"classes without samples: {empty.tolist()}")
        n = self.n[:, None].astype(np.float64)
        s1 = np.stack([s.value for s in self.s1])
        s2 = np.stack([s.value for s in self.s2])
        mu = s1 / n
        var = np.maximum(s2 / n - mu * mu, 0.0)
        sigma = np.sqrt(var)
        sigma[self.n == 1] = 0.0
        return mu, sigma


@dataclass
class ClassLatentStats:
    mu_z: np.ndarray  # (K, m)
    sigma_z: np.ndarray
    mu_c: np.ndarray  # (K, n)
    sigma_c: np.ndarray
    counts: np.ndarray  # (K,)

    @property
    def num_classes(self) -> int:
        return len(self.counts)

    def to_dict(self) -> dict:
        return {
            "version": STATS_VERSION,
            "classes": {
                str(k): {
                    "count": int(self.counts[k]),
                    "mu_z": self.mu_z[k].tolist(),
                    "sigma_z": self.sigma_z[k].tolist(),
                    "mu_c": self.mu_c[k].tolist(),
                    "sigma_c": self.sigma_c[k].tolist(),
                }
                for k in range(self.num_classes)
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClassLatentStats":
        if d.get("version") != STATS_VERSION:
            raise VersionMismatch(f"latent stats version {d.get('version')}, expected {STATS_VERSION}")
        keys = sorted(d["classes"], key=int)
        rows = [d["classes"][k] for k in keys]
        return cls(
            mu_z=np.array([r["mu_z"] for r in rows]),
            sigma_z=np.array([r["sigma_z"] for r in rows]),
            mu_c=np.array([r["mu_c"] for r in rows]),
            sigma_c=np.array([r["sigma_c"] for r in rows]),
            counts=np.array([r["count"] for r in rows], dtype=np.int64),
        )

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1))
        return path

    @classmethod
    def load(cls, path) -> "ClassLatentStats":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def torch(self, dtype=torch.float32) -> dict[str, torch.Tensor]:
        return {k: torch.as_tensor(getattr(self, k), dtype=dtype) for k in ("mu_z", "sigma_z", "mu_c", "sigma_c")}


def stats_from_codes(z: np.ndarray, c: np.ndarray, labels: np.ndarray, num_classes: int) -> ClassLatentStats:
    """Population mean/std per class over already-encoded latents."""
    acc_z = _ClassAccumulator(num_classes, z.shape[1])
    acc_c = _ClassAccumulator(num_classes, c.shape[1])
    acc_z.add(z, labels)
    acc_c.add(c, labels)
    mu_z, sigma_z = acc_z.finalize()
    mu_c, sigma_c = acc_c.finalize()
    return ClassLatentStats(mu_z, sigma_z, mu_c, sigma_c, acc_z.n.copy())


@torch.no_grad()
def fit_class_stats(
    vae, data: LabeledImageSet, batch_size: int = 500, sampled: bool = False, tau: float = 0.67, seed: int = 0
) -> ClassLatentStats:
    """One streaming pass of the encoder over ``data``.

    z statistics use posterior means and c statistics use softmax(c_logits),
    unless ``sampled`` asks for reparameterized samples instead.
    """
    from .vae import sample_latent

    k = data.num_classes
    acc_z = _ClassAccumulator(k, vae.m)
    acc_c = _ClassAccumulator(k, vae.n)
    gen = torch.Generator().manual_seed(seed)
    for xb, yb in batch_iter(data, batch_size, shuffle=False):
        post = vae.encode(torch.from_numpy(xb))
        if sampled:
            code = sample_latent(post, tau, gen)
            z, c = code.z, code.c
        else:
            z, c = post.mu_z, torch.softmax(post.c_logits, dim=1)
        acc_z.add(z.double().numpy(), yb)
        acc_c.add(c.double().numpy(), yb)
    mu_z, sigma_z = acc_z.finalize()
    mu_c, sigma_c = acc_c.finalize()
    return ClassLatentStats(mu_z, sigma_z, mu_c, sigma_c, acc_z.n.copy())


@dataclass(frozen=True)
class GaussianSpec:
    mu: float
    var: float

    def __post_init__(self):
        if not self.var > 0:
            raise ValueError("variance must be positive")


def gaussian_sum(a: GaussianSpec, b: GaussianSpec) -> GaussianSpec:
    """Distribution of X + Y for independent Gaussians."""
    return GaussianSpec(a.mu + b.mu, a.var + b.var)


def sample_class_latent(stats, class_id, eta_z, eta_c):
    """z' = mu_z[y] + eta_z * sigma_z[y] and the same for c; c' is left off the simplex.

    ``stats`` may be a :class:`ClassLatentStats` or the tensor dict from
    :meth:`ClassLatentStats.torch`; ``class_id`` may be an int or a batch of ints.
    """
    if isinstance(stats, ClassLatentStats):
        k = stats.num_classes
        get = lambda name: getattr(stats, name)  # noqa: E731
    else:
        k = stats["mu_z"].shape[0]
        get = stats.__getitem__
    ids = np.asarray(class_id.cpu() if isinstance(class_id, torch.Tensor) else class_id)
    if np.any(ids < 0) or np.any(ids >= k):
        raise InvalidClass(f"class id out of range [0, {k}): {ids}")
    idx = class_id if isinstance(class_id, torch.Tensor) else ids
    z = get("mu_z")[idx] + eta_z * get("sigma_z")[idx]
    c = get("mu_c")[idx] + eta_c * get("sigma_c")[idx]
    return z, c
