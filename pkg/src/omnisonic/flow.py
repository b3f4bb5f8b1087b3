"""Flow-matching training and guided Euler sampling."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .conditioners import DROP_OFF, DROP_ON, DROP_SP, ConditionSet
from .numerics import NonFiniteError, Rng

log = logging.getLogger(__name__)

VelocityFn = Callable[[torch.Tensor, torch.Tensor, ConditionSet], torch.Tensor]


@dataclass(frozen=True)
class CfgScales:
    on: float = 0.0
    off: float = 0.0
    sp: float = 0.0

    def __post_init__(self):
        if min(self.on, self.off, self.sp) < 0:
            raise ValueError("CFG scales must be nonnegative")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.on, self.off, self.sp)

    @classmethod
    def parse(cls, text: str) -> "CfgScales":
        parts = [float(v) for v in text.split(",")]
        if len(parts) != 3:
            raise ValueError("expected three comma-separated scales: on,off,sp")
        return cls(*parts)


PRESETS = {
    "s1": CfgScales(on=5.0, off=0.5, sp=2.5),
    "s2": CfgScales(on=0.5, off=2.5, sp=7.5),
    "s3": CfgScales(on=5.0, off=2.5, sp=2.5),
}


def interpolate(x0: torch.Tensor, x1: torch.Tensor, t) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=x0.dtype)
    if bool(((t < 0) | (t > 1)).any()):
        raise ValueError("t must lie in [0, 1]")
    t = t.reshape(-1, *([1] * (x0.dim() - 1))) if t.dim() else t
    return (1 - t) * x0 + t * x1


def fm_loss(model: VelocityFn, x1: torch.Tensor, x0: torch.Tensor, t: torch.Tensor,
            cond: ConditionSet) -> torch.Tensor:
    """Mean over batch and elements of (V(x_t, t, c) - (x1 - x0))^2."""
    xt = interpolate(x0, x1, t)
    v = model(xt, t, cond)
    return ((v - (x1 - x0).to(v.dtype)) ** 2).mean()


def dropout_conditions(cond: ConditionSet, p, rng: Rng) -> ConditionSet:
    """Independently drop each of the four conditions per sample with prob ``p``.

    ``p`` is a scalar or a length-4 sequence (on, off, sp, vis).
    """
    p = np.broadcast_to(np.asarray(p, dtype=np.float64), (4,))
    if np.any(p < 0) or np.any(p >= 1):
        raise ValueError("drop probabilities must lie in [0, 1)")
    draws = rng.random((cond.batch_size, 4))
    return cond.with_drops(torch.from_numpy(draws < p[None, :]))


# -- guidance and sampling -----------------------------------------------------

def cfg_velocity(model: VelocityFn, x_t: torch.Tensor, t, cond: ConditionSet,
                 scales: CfgScales, counter: list | None = None) -> torch.Tensor:
    """V(all) + sum_i lambda_i (V(only text i) - V(no text)); video kept in every branch."""
    t = torch.as_tensor(t, dtype=x_t.dtype).reshape(-1).expand(x_t.shape[0])

    def call(c):
        if counter is not None:
            counter.append(1)
        return model(x_t, t, c)

    v = call(cond)
    active = [(i, lam) for i, lam in zip((DROP_ON, DROP_OFF, DROP_SP), scales.as_tuple()) if lam != 0.0]
    if not active:
        return v
    null = cond.text_null()
    v_none = None
    out = v
    for i, lam in active:
        if bool(null[:, i].all()):
            continue  # branch identical to the no-text branch
        if v_none is None:
            v_none = call(cond.keep_only_text(None))
        diff = call(cond.keep_only_text(i)) - v_none
        keep = (~null[:, i]).reshape(-1, *([1] * (diff.dim() - 1)))
        out = out + lam * torch.where(keep, diff, torch.zeros_like(diff))
    return out


def euler_sample(model: VelocityFn, cond: ConditionSet, scales: CfgScales, steps: int = 50,
                 seed: int = 0, shape: tuple[int, ...] | None = None, x0: torch.Tensor | None = None,
                 trajectory: list | None = None) -> torch.Tensor:
    """Integrate dx/dt = guided V from t=0 to 1 on a uniform grid."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if x0 is None:
        if shape is None:
            c = model.cfg
            shape = (cond.batch_size, c.latent_channels, c.latent_t, c.latent_f)
        x0 = Rng(seed, 0x5A4).randn_tensor(shape)
    x = x0.clone()
    dt = 1.0 / steps
    if trajectory is not None:
        trajectory.append(x.clone())
    with torch.no_grad():
        for k in range(steps):
            t = torch.full((x.shape[0],), k * dt, dtype=x.dtype)
            x = x + dt * cfg_velocity(model, x, t, cond, scales).to(x.dtype)
            if trajectory is not None:
                trajectory.append(x.clone())
    return x


# -- training --------------------------------------------------------------------

@dataclass
class FlowDataset:
    latents: torch.Tensor  # (n, C, T, F)
    cond: ConditionSet
    manifests: list = field(default_factory=list)

    def __len__(self):
        return self.latents.shape[0]

    def speech_only(self) -> bool:
        return bool(self.cond.on_empty.all() and self.cond.off_empty.all())


@dataclass
class TrainConfig:
    steps: int = 1500
    batch_size: int = 16
    lr: float = 5e-5
    weight_decay: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    p_drop: float = 0.1
    seed: int = 0
    val_every: int = 250
    val_repeats: int = 4
    ckpt_every: int = 0
    log_csv: str | None = None


@dataclass
class TrainResult:
    model: torch.nn.Module
    losses: list[float]
    val_losses: list[tuple[int, float]]
    baseline: float | None = None

    @property
    def final_val(self) -> float:
        return self.val_losses[-1][1]


def validation_tensors(val: FlowDataset, repeats: int, seed: int):
    rng = Rng(seed, 0x7A1)
    n = len(val)
    idx = torch.arange(n).repeat(repeats)
    x0 = rng.randn_tensor((n * repeats, *val.latents.shape[1:]))
    t = torch.from_numpy(rng.random(n * repeats)).float()
    return idx, x0, t


@torch.no_grad()
def validation_loss(model, val: FlowDataset, repeats: int = 4, seed: int = 1234, chunk: int = 64) -> float:
    idx, x0, t = validation_tensors(val, repeats, seed)
    total = 0.0
    for s in range(0, idx.shape[0], chunk):
        sl = slice(s, s + chunk)
        b = idx[sl]
        loss = fm_loss(model, val.latents[b], x0[sl], t[sl], val.cond.select(b))
        total += float(loss) * b.shape[0]
    return total / idx.shape[0]


def zero_model_loss(val: FlowDataset, repeats: int = 4, seed: int = 1234) -> float:
    idx, x0, _ = validation_tensors(val, repeats, seed)
    return float(((val.latents[idx].double() - x0.double()) ** 2).mean())


def train(stage: int, model: torch.nn.Module, data: FlowDataset, cfg: TrainConfig,
          val: FlowDataset | None = None, on_checkpoint: Callable | None = None) -> TrainResult:
    """AdamW flow-matching training with per-condition dropout.

    Stage 1 requires a speech-only dataset (both env captions empty).
    """
    if stage not in (1, 2):
        raise ValueError("stage must be 1 or 2")
    if len(data) == 0:
        raise ValueError("empty dataset")
    if stage == 1 and not data.speech_only():
        raise ValueError("stage 1 trains on speech-only samples with empty environment captions")
    torch.manual_seed(cfg.seed)
    rng = Rng(cfg.seed, 0x7EA1, stage)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, betas=cfg.betas, eps=cfg.eps,
                            weight_decay=cfg.weight_decay)
    losses: list[float] = []
    vals: list[tuple[int, float]] = []
    writer = None
    fh = None
    if cfg.log_csv:
        Path(cfg.log_csv).parent.mkdir(parents=True, exist_ok=True)
        new = not Path(cfg.log_csv).exists()
        fh = open(cfg.log_csv, "a", newline="")
        writer = csv.writer(fh)
        if new:
            writer.writerow(["step", "stage", "loss", "val_loss"])
    model.train()
    t_start = time.time()
    try:
        for step in range(1, cfg.steps + 1):
            idx = torch.from_numpy(rng.integers(0, len(data), cfg.batch_size))
            x1 = data.latents[idx]
            x0 = torch.from_numpy(rng.normal(x1.shape))
            t = torch.from_numpy(rng.random(cfg.batch_size)).float()
            cond = data.cond.select(idx)
            if stage == 1:
                assert bool(cond.on_empty.all() and cond.off_empty.all()), "stage-1 batch has env captions"
            cond = dropout_conditions(cond, cfg.p_drop, rng)
            loss = fm_loss(model, x1, x0, t, cond)
            if not torch.isfinite(loss):
                raise NonFiniteError(
                    f"non-finite loss at stage {stage} step {step}; recent losses {losses[-5:]}"
                )
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
            v = None
            if val is not None and (step % cfg.val_every == 0 or step == cfg.steps):
                model.eval()
                v = validation_loss(model, val, cfg.val_repeats)
                model.train()
                vals.append((step, v))
                log.info("stage %d step %d loss %.4f val %.4f (%.1fs)", stage, step, losses[-1], v,
                         time.time() - t_start)
            if writer is not None:
                writer.writerow([step, stage, f"{losses[-1]:.6f}", "" if v is None else f"{v:.6f}"])
            if on_checkpoint is not None and cfg.ckpt_every and step % cfg.ckpt_every == 0:
                on_checkpoint(model, step)
    finally:
        if fh is not None:
            fh.close()
    model.eval()
    return TrainResult(model, losses, vals)
