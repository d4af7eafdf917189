"""Parameter storage, Adam, checkpoints and finite-difference gradient checks.

Every trainable model in the package is a ``torch.nn.Module`` whose parameters
are viewed through a :class:`ParamStore`. Initialization, optimization and
serialization go through this module so that (seed, config) fully determines
the trained weights.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .errors import CorruptFile, NonFiniteGradient, VersionMismatch

CHECKPOINT_MAGIC = b"LPCKPT\x00\x01"
CHECKPOINT_VERSION = 1
_DTYPES = {"float32": torch.float32, "float64": torch.float64}


def derive_seed(root_seed: int, name: str) -> int:
    """Split a root seed into an independent 63-bit seed for a named component."""
    ss = np.random.SeedSequence(root_seed, spawn_key=(zlib.crc32(name.encode()),))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def seed_everything(seed: int) -> torch.Generator:
    torch.manual_seed(seed)
    return torch.Generator().manual_seed(seed)


@dataclass
class ParamStore:
    tensors: "OrderedDict[str, torch.Tensor]" = field(default_factory=OrderedDict)
    step: int = 0

    @classmethod
    def from_module(cls, module: nn.Module) -> "ParamStore":
        """View a module's parameters; the store shares storage with the module."""
        return cls(OrderedDict((n, p) for n, p in module.named_parameters()))

    def names(self) -> list[str]:
        return list(self.tensors)

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.tensors[name]

    def __len__(self) -> int:
        return len(self.tensors)

    def copy(self) -> "ParamStore":
        return ParamStore(OrderedDict((n, t.detach().clone()) for n, t in self.tensors.items()), self.step)

    def load_into(self, module: nn.Module) -> None:
        own = dict(module.named_parameters())
        if set(own) != set(self.tensors):
            missing = set(own) ^ set(self.tensors)
            raise KeyError(f"parameter names differ: {sorted(missing)}")
        with torch.no_grad():
            for name, p in own.items():
                src = self.tensors[name]
                if tuple(src.shape) != tuple(p.shape):
                    raise ValueError(f"shape mismatch for {name}: {tuple(src.shape)} vs {tuple(p.shape)}")
                p.copy_(src.to(p.dtype))


def model_spec(module: nn.Module) -> list[tuple[str, tuple[int, ...]]]:
    return [(n, tuple(p.shape)) for n, p in module.named_parameters()]


def _fan_in(shape: Sequence[int]) -> int:
    return int(np.prod(shape[1:])) if len(shape) > 1 else int(shape[0])


def init_params(
    spec: Iterable[tuple[str, Sequence[int]]], seed: int, dtype: torch.dtype = torch.float32
) -> ParamStore:
    """Fan-in scaled uniform weights, zero biases. Deterministic in ``seed``."""
    gen = torch.Generator().manual_seed(seed)
    store = ParamStore()
    for name, shape in spec:
        shape = tuple(int(s) for s in shape)
        if name.rsplit(".", 1)[-1] == "bias":
            store.tensors[name] = torch.zeros(shape, dtype=dtype)
        else:
            bound = 1.0 / math.sqrt(max(1, _fan_in(shape)))
            u = torch.rand(shape, generator=gen, dtype=torch.float64)
            store.tensors[name] = ((2.0 * u - 1.0) * bound).to(dtype)
    return store


def init_module(module: nn.Module, seed: int) -> nn.Module:
    dtype = next(module.parameters()).dtype if any(True for _ in module.parameters()) else torch.float32
    init_params(model_spec(module), seed, dtype).load_into(module)
    return module


def count_params(store: ParamStore | nn.Module) -> int:
    if isinstance(store, nn.Module):
        return sum(p.numel() for p in store.parameters())
    return sum(t.numel() for t in store.tensors.values())


@dataclass
class OptimState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


@torch.no_grad()
def adam_step(
    store: ParamStore, grads: Mapping[str, torch.Tensor], state: OptimState
) -> tuple[ParamStore, OptimState]:
    """One bias-corrected Adam update, applied in place."""
    if set(grads) != set(store.tensors):
        raise KeyError(f"gradients must cover exactly the trainable names; differing: {sorted(set(grads) ^ set(store.tensors))}")
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise NonFiniteGradient(f"non-finite gradient for {name}")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, p in store.tensors.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = torch.zeros_like(p)
            state.v[name] = torch.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
        v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
        denom = (v / bc2).sqrt_().add_(state.eps)
        p.addcdiv_(m, denom, value=-state.lr / bc1)
    store.step += 1
    return store, state


class Adam:
    """Convenience wrapper: collects ``.grad`` from a module and calls :func:`adam_step`."""

    def __init__(self, module: nn.Module, lr: float = 1e-3, betas=(0.9, 0.999)):
        self.store = ParamStore.from_module(module)
        self.state = OptimState(lr=lr, beta1=betas[0], beta2=betas[1])

    def zero_grad(self) -> None:
        for p in self.store.tensors.values():
            p.grad = None

    def step(self) -> None:
        grads = {
            n: (p.grad if p.grad is not None else torch.zeros_like(p)) for n, p in self.store.tensors.items()
        }
        adam_step(self.store, grads, self.state)


def finite_diff_check(
    loss_fn: Callable[[ParamStore], torch.Tensor],
    store: ParamStore,
    probes: int = 20,
    eps: float = 1e-6,
    seed: int = 0,
    atol: float = 1e-8,
    kink_tol: float | None = None,
    max_kink_fraction: float = 0.2,
) -> float:
    """Max relative error between autograd and central differences on random coordinates.

    ``loss_fn`` must be deterministic (sampling noise frozen by the caller).
    ``atol`` floors the denominator so gradients below the difference-quotient
    roundoff of a large loss do not dominate.

    With ``kink_tol`` set, a probe whose left and right second-order one-sided slopes differ
    by more than ``kink_tol`` times their magnitude straddles a nondifferentiable
    point (ReLU, max-pool, clamp) and is redrawn. More than
    ``max_kink_fraction`` of draws landing on kinks raises RuntimeError.
    """
    params = list(store.tensors.items())
    if not params:
        return 0.0
    for _, t in params:
        t.requires_grad_(True)
        t.grad = None
    loss = loss_fn(store)
    grads = torch.autograd.grad(loss, [t for _, t in params], allow_unused=True)
    grads = [torch.zeros_like(t) if g is None else g for (_, t), g in zip(params, grads)]

    rng = np.random.default_rng(seed)
    sizes = np.array([t.numel() for _, t in params])
    worst = 0.0
    accepted = kinks = 0
    with torch.no_grad():
        center = float(loss)
        while accepted < probes:
            k = int(rng.choice(len(params), p=sizes / sizes.sum()))
            t = params[k][1]
            flat = t.view(-1)
            i = int(rng.integers(flat.numel()))
            orig = flat[i].item()
            flat[i] = orig + eps
            up = float(loss_fn(store))
            flat[i] = orig - eps
            down = float(loss_fn(store))
            flat[i] = orig
            if kink_tol is not None:
                # second-order one-sided slopes agree to O(eps^2) unless a kink lies within 2 eps
                flat[i] = orig + 2 * eps
                up2 = float(loss_fn(store))
                flat[i] = orig - 2 * eps
                down2 = float(loss_fn(store))
                flat[i] = orig
                right = (-3 * center + 4 * up - up2) / (2 * eps)
                left = (3 * center - 4 * down + down2) / (2 * eps)
                if abs(right - left) > kink_tol * max(atol, abs(right) + abs(left)):
                    kinks += 1
                    if kinks > max_kink_fraction * probes:
                        raise RuntimeError(f"{kinks} of {accepted + kinks} probes straddled kinks")
                    continue
            accepted += 1
            g_fd = (up - down) / (2 * eps)
            g_an = float(grads[k].reshape(-1)[i])
            err = abs(g_an - g_fd) / max(atol, abs(g_an) + abs(g_fd))
            worst = max(worst, err)
    return worst


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(store: ParamStore, meta: Mapping, path: str | Path) -> Path:
    """Write a versioned, checksummed checkpoint plus a ``.meta.txt`` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, t in store.tensors.items():
        arr = t.detach().cpu().contiguous()
        if not torch.isfinite(arr).all():
            raise ValueError(f"refusing to checkpoint non-finite tensor {name}")
        dtype = str(arr.dtype).removeprefix("torch.")
        raw = arr.numpy().astype(arr.numpy().dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype, "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"tensors": entries, "step": store.step, "meta": meta}, sort_keys=True).encode()
    body = CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(header)) + header + b"".join(chunks)
    path.write_bytes(body + hashlib.sha256(body).digest())
    sidecar = "".join(f"{k} = {json.dumps(meta[k], sort_keys=True)}\n" for k in sorted(meta))
    Path(str(path) + ".meta.txt").write_text(sidecar)
    return path


def load_checkpoint(path: str | Path) -> tuple[ParamStore, dict]:
    data = Path(path).read_bytes()
    fixed = len(CHECKPOINT_MAGIC) + 8
    if len(data) < fixed + 32 or not data.startswith(CHECKPOINT_MAGIC):
        raise CorruptFile(f"{path}: not a checkpoint or truncated header")
    version, header_len = struct.unpack("<II", data[len(CHECKPOINT_MAGIC):fixed])
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptFile(f"{path}: checksum mismatch")
    try:
        header = json.loads(body[fixed:fixed + header_len])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFile(f"{path}: unreadable header") from exc
    payload = body[fixed + header_len:]
    store = ParamStore(step=int(header["step"]))
    for e in header["tensors"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CorruptFile(f"{path}: tensor {e['name']} truncated")
        np_dtype = np.dtype(e["dtype"]).newbyteorder("<")
        arr = np.frombuffer(raw, dtype=np_dtype).reshape(e["shape"]).astype(np.dtype(e["dtype"]))
        store.tensors[e["name"]] = torch.from_numpy(arr.copy())
    return store, header["meta"]


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
