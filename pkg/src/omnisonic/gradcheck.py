"""Finite-difference checks of the autograd gradients of the custom operators.

Every suite runs in float64 with non-zero (random) parameters so no branch is
trivially silent. Large tensors are checked on a seeded subset of coordinates.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
from torch.func import functional_call

from .conditioners import ConditionInputs, EnvCaptionEncoder, collate_conditions, durator, synth_visual_features
from .numerics import Rng, finite_diff_at, grad, layer_norm
from .triattn import CrossAttention, ModelConfig, MoEGate, TriAttnBlock, build_model, nearest_indices

TOLERANCE = 1e-4


@dataclass
class SuiteResult:
    name: str
    errors: dict[str, float]
    coords: int
    seconds: float
    tol: float = TOLERANCE

    @property
    def worst(self) -> tuple[str, float]:
        k = max(self.errors, key=self.errors.get)
        return k, self.errors[k]

    @property
    def passed(self) -> bool:
        return self.worst[1] <= self.tol


def check(name: str, f: Callable[..., torch.Tensor], tensors: dict[str, torch.Tensor], seed: int = 0,
          max_coords: int = 24, h: float = 1e-5, corrupt: bool = False) -> SuiteResult:
    """Compare autograd against central differences for each named input of ``f``.

    Per-tensor error is max|g_ad - g_fd| / max(max|g_ad|, max|g_fd|, floor) on the
    checked coordinates; the floor is 1e-6 of the largest gradient in the suite
    so tensors with vanishing gradients are judged on an absolute scale.
    """
    t0 = time.time()
    keys = list(tensors)
    values = [tensors[k].detach().to(torch.float64) for k in keys]
    analytic = [g.numpy().reshape(-1) for g in grad(lambda *ts: f(**dict(zip(keys, ts))), values)]
    rng = Rng(seed, 0x6C)
    picked, numeric = [], []
    for k, v in zip(keys, values):
        n = v.numel()
        coords = np.arange(n) if n <= max_coords else np.sort(rng.choice(n, max_coords, replace=False))
        picked.append(coords)

        def fk(arr, k=k, v=v):
            args = {kk: vv for kk, vv in zip(keys, values)}
            args[k] = torch.from_numpy(arr.reshape(v.shape))
            with torch.no_grad():
                return float(f(**args))

        numeric.append(finite_diff_at(fk, v.numpy(), coords, h))
    scale = max(max(np.abs(a).max(initial=0.0) for a in analytic), 1e-12)
    if corrupt:  # negative control: perturb one checked coordinate
        analytic[0] = analytic[0].copy()
        analytic[0][picked[0][0]] += 1e-2 * scale
    errors = {}
    for k, a, c, g in zip(keys, analytic, picked, numeric):
        ad = a[c]
        denom = max(np.abs(ad).max(initial=0.0), np.abs(g).max(initial=0.0), 1e-6 * scale)
        errors[k] = float(np.abs(ad - g).max(initial=0.0) / denom)
    return SuiteResult(name, errors, int(sum(len(c) for c in picked)), time.time() - t0)


def _randn(rng: Rng, *shape, scale: float = 1.0) -> torch.Tensor:
    return torch.from_numpy(rng.normal(shape, scale, np.float64))


def _module_tensors(module: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {n: p.detach().to(torch.float64) for n, p in module.named_parameters()}


# -- suites ---------------------------------------------------------------------

def suite_durator(seed: int = 0, corrupt: bool = False) -> SuiteResult:
    rng = Rng(seed, 1)
    hidden = _randn(rng, 2, 5, 3)
    dur = torch.from_numpy(rng.uniform(0.5, 3.0, (2, 5)))
    mask = torch.tensor([[True] * 5, [True, True, True, False, False]])
    w = _randn(rng, 2, 12, 3)

    def f(hidden, durations):
        return (w * durator(hidden, durations, 12, mask)).sum()

    return check("durator", f, {"hidden": hidden, "durations": dur}, seed, corrupt=corrupt)


def suite_adaln(seed: int = 0, corrupt: bool = False) -> SuiteResult:
    cfg = ModelConfig(latent_channels=2, latent_t=8, latent_f=4, hidden=8, heads=2, d_env=6, d_sp=6,
                      d_vis=4, n_visual=3, depth=1)
    block = TriAttnBlock(cfg).double()
    rng = Rng(seed, 2)
    ada = {"ada.weight": _randn(rng, 6 * cfg.hidden, cfg.hidden, scale=0.3),
           "ada.bias": _randn(rng, 6 * cfg.hidden, scale=0.1)}
    n_tok = cfg.t_tok * cfg.f_tok
    x = _randn(rng, 2, n_tok, cfg.hidden)
    c_vt = _randn(rng, 2, cfg.n_visual, cfg.hidden)
    w = _randn(rng, 2, 2, n_tok, cfg.hidden)
    idx = nearest_indices(cfg.n_visual, cfg.t_tok)

    def f(x, c_vt, **p):
        params = functional_call(block.ada, {k[4:]: v for k, v in p.items()}, (torch.nn.functional.silu(c_vt),))
        chunks = params[:, idx].chunk(6, dim=-1)
        z = layer_norm(x).reshape(2, cfg.t_tok, cfg.f_tok, cfg.hidden)
        out = 0.0
        for k in range(2):  # attention and MLP sublayer parameter triples
            a, b, g = (c[:, :, None, :] for c in chunks[3 * k: 3 * k + 3])
            y = (z * (1 + a) + b) * g
            out = out + (w[k] * y.reshape(2, n_tok, cfg.hidden)).sum()
        return out

    return check("adaln", f, {"x": x, "c_vt": c_vt, **ada}, seed, corrupt=corrupt)


def suite_rope_attention(seed: int = 0, corrupt: bool = False) -> SuiteResult:
    ca = CrossAttention(8, 6, 2).double()
    rng = Rng(seed, 3)
    params = {k: _randn(rng, *v.shape, scale=0.4) for k, v in _module_tensors(ca).items()}
    x = _randn(rng, 2, 6, 8)
    kv = _randn(rng, 2, 7, 6)
    q_pos = torch.arange(3, dtype=torch.float64).repeat_interleave(2)
    kv_pos = torch.tensor([0, 0, 0, 0.25, 0.75, 1.25, 1.75], dtype=torch.float64)
    rotate = torch.arange(7) >= 3
    mask = torch.ones(2, 7, dtype=torch.bool)
    mask[1, 2] = False
    w = _randn(rng, 2, 6, 8)

    def f(x, kv, **p):
        return (w * functional_call(ca, p, (x, q_pos, kv, kv_pos, rotate, mask))).sum()

    return check("rope_attention", f, {"x": x, "kv": kv, **params}, seed, corrupt=corrupt)


def suite_moe_gate(seed: int = 0, corrupt: bool = False) -> SuiteResult:
    gate = MoEGate(4, 5, 6).double()
    rng = Rng(seed, 4)
    params = {k: _randn(rng, *v.shape, scale=0.5) for k, v in _module_tensors(gate).items()}
    sp, on, off = _randn(rng, 3, 5), _randn(rng, 3, 4), _randn(rng, 3, 4)
    w = _randn(rng, 3, 3)

    def f(sp, on, off, **p):
        return (w * functional_call(gate, p, (sp, on, off))).sum()

    return check("moe_gate", f, {"sp": sp, "on": on, "off": off, **params}, seed, corrupt=corrupt)


def tiny_model_config() -> ModelConfig:
    return ModelConfig(latent_channels=2, latent_t=8, latent_f=4, hidden=8, heads=2, d_env=6, d_sp=6,
                       d_vis=4, n_visual=3, depth=2, max_chars=16)


def suite_full_model(seed: int = 0, corrupt: bool = False, cfg: ModelConfig | None = None) -> SuiteResult:
    """All parameters of a 2-block network plus the input latent."""
    cfg = cfg or tiny_model_config()
    model = build_model(cfg, seed=seed, zero_init=False, dtype=torch.float64)
    env = EnvCaptionEncoder(cfg.d_env, seed=seed)
    items = [
        ConditionInputs("dog barking", "", "hi there", synth_visual_features(1, cfg.n_visual, "dog", cfg.d_vis)),
        ConditionInputs("", "rain on a roof", "good day", synth_visual_features(2, cfg.n_visual, "speech", cfg.d_vis)),
    ]
    cond = collate_conditions(items, env, cfg.max_chars).to(torch.float64)
    rng = Rng(seed, 5)
    x = _randn(rng, 2, cfg.latent_channels, cfg.latent_t, cfg.latent_f)
    t = torch.tensor([0.3, 0.8], dtype=torch.float64)
    w = _randn(rng, *x.shape)
    params = _module_tensors(model)

    def f(x_t, **p):
        return (w * functional_call(model, p, (x_t, t, cond))).sum()

    return check("full_model", f, {"x_t": x, **params}, seed, max_coords=6, corrupt=corrupt)


SUITES = {
    "durator": suite_durator,
    "adaln": suite_adaln,
    "rope_attention": suite_rope_attention,
    "moe_gate": suite_moe_gate,
    "full_model": suite_full_model,
}


def run_all(seed: int = 0, corrupt: bool = False) -> list[SuiteResult]:
    return [fn(seed=seed, corrupt=corrupt) for fn in SUITES.values()]


def report(results: list[SuiteResult]) -> str:
    lines = [f"{'suite':<16}{'worst tensor':<40}{'rel err':>12}{'coords':>8}{'sec':>8}  status"]
    for r in results:
        k, e = r.worst
        lines.append(f"{r.name:<16}{k:<40}{e:>12.3e}{r.coords:>8d}{r.seconds:>8.2f}  "
                     f"{'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)
