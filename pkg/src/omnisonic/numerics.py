"""Dense-tensor helpers, seeded RNG, gradient oracles and the OSTN tensor format.

Tensors are ``torch.Tensor`` (float32 for training, float64 for checks).
Reverse-mode gradients come from ``torch.autograd``; :func:`finite_diff_grad`
is an independent central-difference oracle evaluated in float64.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

OSTN_MAGIC = b"OSTN"


class NonFiniteError(FloatingPointError):
    """Raised when a tensor contains NaN or Inf."""


def check_finite(x, name: str = "tensor"):
    arr = x.detach() if isinstance(x, torch.Tensor) else np.asarray(x)
    ok = bool(torch.isfinite(arr).all()) if isinstance(arr, torch.Tensor) else bool(np.isfinite(arr).all())
    if not ok:
        raise NonFiniteError(f"{name} contains non-finite values")
    return x


class Rng:
    """Deterministic generator: numpy Philox4x64 keyed by a SeedSequence.

    Philox is counter-based, so identical seeds give identical streams on
    every platform. ``child(*keys)`` derives an independent stream, e.g. one
    per dataset item.
    """

    algorithm = "philox4x64-10"

    def __init__(self, seed: int, *keys: int):
        if seed < 0 or seed >= 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.seed = int(seed)
        self.keys = tuple(int(k) for k in keys)
        ss = np.random.SeedSequence([self.seed, *self.keys])
        self.gen = np.random.Generator(np.random.Philox(ss))

    def child(self, *keys: int) -> "Rng":
        return Rng(self.seed, *self.keys, *keys)

    def normal(self, shape, scale: float = 1.0, dtype=np.float32) -> np.ndarray:
        return (self.gen.standard_normal(shape) * scale).astype(dtype)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def random(self, size=None):
        return self.gen.random(size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def choice(self, n, size=None, replace=True):
        return self.gen.choice(n, size=size, replace=replace)

    def randn_tensor(self, shape, dtype=torch.float32) -> torch.Tensor:
        return torch.from_numpy(self.gen.standard_normal(tuple(shape))).to(dtype)


def softmax(v, dim: int = -1):
    """Numerically stable softmax (max-subtracted). Accepts numpy or torch."""
    if isinstance(v, torch.Tensor):
        if v.numel() == 0:
            raise ValueError("softmax of an empty vector")
        z = v - v.amax(dim=dim, keepdim=True).detach()
        e = torch.exp(z)
        return e / e.sum(dim=dim, keepdim=True)
    a = np.asarray(v, dtype=np.float64)
    if a.size == 0:
        raise ValueError("softmax of an empty vector")
    e = np.exp(a - a.max(axis=dim, keepdims=True))
    return e / e.sum(axis=dim, keepdims=True)


def layer_norm(x, eps: float = 1e-6, dim: int = -1):
    """Affine-free layer norm over ``dim``; constant input maps to zeros."""
    if isinstance(x, torch.Tensor):
        mu = x.mean(dim=dim, keepdim=True)
        var = ((x - mu) ** 2).mean(dim=dim, keepdim=True)
        return (x - mu) / torch.sqrt(var + eps)
    a = np.asarray(x, dtype=np.float64)
    mu = a.mean(axis=dim, keepdims=True)
    var = ((a - mu) ** 2).mean(axis=dim, keepdims=True)
    return (a - mu) / np.sqrt(var + eps)


def grad(f: Callable[..., torch.Tensor], params: Sequence[torch.Tensor]) -> list[torch.Tensor]:
    """Reverse-mode gradient of the scalar ``f(*params)`` w.r.t. ``params``."""
    leaves = [p.detach().clone().requires_grad_(True) for p in params]
    out = f(*leaves)
    if out.numel() != 1:
        raise ValueError(f"objective must be scalar, got shape {tuple(out.shape)}")
    gs = torch.autograd.grad(out.reshape(()), leaves, allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(leaves, gs)]


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-4) -> np.ndarray:
    """Central differences ``(f(x+h e_i) - f(x-h e_i)) / 2h`` in float64."""
    if not 1e-5 <= h <= 1e-2:
        raise ValueError("step h must lie in [1e-5, 1e-2]")
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def finite_diff_at(f: Callable[[np.ndarray], float], x, coords, h: float = 1e-4) -> np.ndarray:
    """Central differences at selected flat indices only."""
    if not 1e-5 <= h <= 1e-2:
        raise ValueError("step h must lie in [1e-5, 1e-2]")
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = np.empty(len(coords))
    for k, i in enumerate(coords):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        out[k] = (fp - fm) / (2.0 * h)
    return out


def relative_error(a, b, floor: float = 1e-8) -> float:
    """max|a-b| / max(max|a|, max|b|, floor)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def matrix_sqrt_psd(a, sym_tol: float = 1e-6) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("expected a square matrix")
    if np.abs(a - a.T).max(initial=0.0) > sym_tol * max(1.0, np.abs(a).max(initial=0.0)):
        raise ValueError("matrix is not symmetric within tolerance")
    w, v = np.linalg.eigh((a + a.T) / 2.0)
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


# -- OSTN binary tensor format -------------------------------------------------

def write_ostn(path, array) -> None:
    """magic "OSTN", u32 rank, rank x u32 dims, f32 payload (all little-endian)."""
    if isinstance(array, torch.Tensor):
        array = array.detach().cpu().numpy()
    arr = np.asarray(array, dtype="<f4", order="C")
    with open(path, "wb") as fh:
        fh.write(ostn_bytes(arr))


def ostn_bytes(array) -> bytes:
    arr = np.asarray(array, dtype="<f4", order="C")
    head = OSTN_MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def read_ostn(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != OSTN_MAGIC:
        raise ValueError(f"{path}: not an OSTN file")
    (rank,) = struct.unpack_from("<I", data, 4)
    dims = struct.unpack_from(f"<{rank}I", data, 8)
    off = 8 + 4 * rank
    n = int(np.prod(dims)) if rank else 1
    payload = np.frombuffer(data, dtype="<f4", count=n, offset=off)
    if off + 4 * n != len(data):
        raise ValueError(f"{path}: payload size does not match header")
    return payload.reshape(dims).astype(np.float32)


def flatten_params(tensors: Iterable[torch.Tensor]) -> torch.Tensor:
    return torch.cat([t.reshape(-1) for t in tensors])
