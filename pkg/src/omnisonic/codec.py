"""Invertible patch codec standing in for a pretrained mel VAE.

Each non-overlapping ``p_t x p_f`` mel patch is flattened and rotated by a
fixed seeded orthonormal matrix; the rotated coordinates become latent
channels, standardised per channel with frozen constants.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import Rng


def orthonormal_matrix(n: int, seed: int) -> np.ndarray:
    a = Rng(seed, 0x0C0DEC).gen.standard_normal((n, n))
    q, r = np.linalg.qr(a)
    return q * np.sign(np.diag(r))


@dataclass
class LatentCodec:
    patch: tuple[int, int] = (4, 4)
    seed: int = 0
    keep: int | None = None  # full-size mode keeps the first 8 of 16 coordinates (lossy)
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    identity: bool = False
    q: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.patch = (int(self.patch[0]), int(self.patch[1]))
        d = self.patch[0] * self.patch[1]
        self.q = np.eye(d) if self.identity else orthonormal_matrix(d, self.seed)
        c = self.channels
        self.mean = np.zeros(c) if self.mean is None else np.asarray(self.mean, dtype=np.float64)
        self.std = np.ones(c) if self.std is None else np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != (c,) or self.std.shape != (c,):
            raise ValueError("standardisation constants do not match channel count")
        if np.any(self.std <= 0):
            raise ValueError("standard deviations must be positive")

    @property
    def channels(self) -> int:
        d = self.patch[0] * self.patch[1]
        return d if self.keep is None else self.keep

    def latent_shape(self, mel_shape) -> tuple[int, int, int]:
        t, f = mel_shape
        pt, pf = self.patch
        if t % pt or f % pf:
            raise ValueError(f"mel shape {mel_shape} not divisible by patch {self.patch}")
        return self.channels, t // pt, f // pf

    def project(self, mel) -> np.ndarray:
        """Rotated patch coordinates before standardisation, shape (C, T/pt, F/pf)."""
        mel = np.asarray(mel, dtype=np.float64)
        _, tl, fl = self.latent_shape(mel.shape[-2:])
        pt, pf = self.patch
        patches = mel.reshape(tl, pt, fl, pf).transpose(0, 2, 1, 3).reshape(tl, fl, pt * pf)
        y = patches @ self.q.T
        if self.keep is not None:
            y = y[..., : self.keep]
        return y.transpose(2, 0, 1)

    def encode(self, mel) -> np.ndarray:
        y = self.project(mel)
        return ((y - self.mean[:, None, None]) / self.std[:, None, None]).astype(np.float32)

    def decode(self, latent) -> np.ndarray:
        x = np.asarray(latent, dtype=np.float64)
        if x.ndim != 3 or x.shape[0] != self.channels:
            raise ValueError(f"latent has {x.shape[0] if x.ndim == 3 else '?'} channels, codec expects {self.channels}")
        c, tl, fl = x.shape
        pt, pf = self.patch
        y = x * self.std[:, None, None] + self.mean[:, None, None]
        y = y.transpose(1, 2, 0)
        if self.keep is not None:
            y = np.concatenate([y, np.zeros((tl, fl, pt * pf - self.keep))], axis=-1)
        patches = y @ self.q
        return patches.reshape(tl, fl, pt, pf).transpose(0, 2, 1, 3).reshape(tl * pt, fl * pf).astype(np.float32)

    def calibrate(self, mels) -> "LatentCodec":
        """Freeze per-channel mean/std from a calibration corpus of mel grids."""
        ys = np.stack([self.project(m) for m in mels])  # (n, C, T, F)
        self.mean = ys.mean(axis=(0, 2, 3))
        self.std = np.maximum(ys.std(axis=(0, 2, 3)), 1e-6)
        return self

    def to_dict(self) -> dict:
        return {
            "patch": list(self.patch),
            "seed": self.seed,
            "keep": self.keep,
            "identity": self.identity,
            "mean": [float(v) for v in self.mean],
            "std": [float(v) for v in self.std],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LatentCodec":
        return cls(patch=tuple(d["patch"]), seed=d["seed"], keep=d.get("keep"),
                   mean=np.array(d["mean"]), std=np.array(d["std"]), identity=d.get("identity", False))
