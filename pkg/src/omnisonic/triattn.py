"""Velocity network: a DiT whose blocks cross-attend to three condition streams.

Blocks are modulated by frame-aligned adaLN parameters derived from the
visual features plus the time embedding, and fuse their three attention
outputs with a softmax gate predicted from the mean text embeddings.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .conditioners import DROP_SP, DROP_VIS, ConditionSet, TranscriptionEncoder
from .numerics import Rng, layer_norm


@dataclass(frozen=True)
class ModelConfig:
    latent_channels: int = 16
    latent_t: int = 64
    latent_f: int = 8
    patch: int = 2
    hidden: int = 64
    depth: int = 2
    heads: int = 4
    d_env: int = 32
    d_sp: int = 32
    d_vis: int = 16
    n_visual: int = 8
    mlp_ratio: int = 4
    max_chars: int = 128
    self_attn: bool = False
    share_env_attention: bool = True
    moe_gating: bool = True
    durator_mode: str = "predicted"
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.latent_t % self.patch or self.latent_f % self.patch:
            raise ValueError("latent dims must be divisible by the patch size")
        if self.hidden % self.heads or (self.hidden // self.heads) % 2:
            raise ValueError("head dim must be an even integer")

    @property
    def t_tok(self) -> int:
        return self.latent_t // self.patch

    @property
    def f_tok(self) -> int:
        return self.latent_f // self.patch

    @property
    def d_in(self) -> int:
        return self.latent_channels * self.patch * self.patch

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


FULL_MODEL = dict(latent_channels=8, latent_t=256, latent_f=16, patch=2, hidden=1152, depth=28,
                   heads=16, d_env=1024, d_sp=769, d_vis=512)


# -- shape helpers --------------------------------------------------------------

def patchify(x: torch.Tensor, p: int) -> torch.Tensor:
    """(B, C, T, F) -> (B, T/p * F/p, C*p*p), time-major token order."""
    b, c, t, f = x.shape
    if t % p or f % p:
        raise ValueError(f"latent dims {(t, f)} not divisible by patch {p}")
    x = x.reshape(b, c, t // p, p, f // p, p).permute(0, 2, 4, 1, 3, 5)
    return x.reshape(b, (t // p) * (f // p), c * p * p)


def unpatchify(tokens: torch.Tensor, c: int, t: int, f: int, p: int) -> torch.Tensor:
    b = tokens.shape[0]
    x = tokens.reshape(b, t // p, f // p, c, p, p).permute(0, 3, 1, 4, 2, 5)
    return x.reshape(b, c, t, f)


def rope(x: torch.Tensor, pos: torch.Tensor, base: float = 10000.0) -> torch.Tensor:
    """Rotate consecutive feature pairs of ``x`` (..., S, D) by pos * base^(-2i/D)."""
    d = x.shape[-1]
    if d % 2:
        raise ValueError("RoPE needs an even feature dimension")
    inv = base ** (-torch.arange(0, d, 2, dtype=x.dtype) / d)
    ang = pos.to(x.dtype)[..., None] * inv  # (..., S, D/2)
    cos, sin = torch.cos(ang), torch.sin(ang)
    x1, x2 = x[..., 0::2], x[..., 1::2]
    out = torch.stack([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)
    return out.flatten(-2)


def nearest_indices(n_src: int, n_dst: int) -> torch.Tensor:
    return torch.div(torch.arange(n_dst) * n_src, n_dst, rounding_mode="floor")


def visual_positions(n_visual: int, t_tok: int) -> torch.Tensor:
    """Centre of each video frame on the latent token time axis."""
    return (torch.arange(n_visual, dtype=torch.float64) + 0.5) * t_tok / n_visual - 0.5


# -- modules --------------------------------------------------------------------

class TimeEmbedding(nn.Module):
    def __init__(self, dim: int, freq_dim: int = 64):
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(nn.Linear(freq_dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def sinusoid(self, t: torch.Tensor) -> torch.Tensor:
        half = self.freq_dim // 2
        freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype) / half)
        args = (t * 1000.0)[:, None] * freqs[None]
        return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        if bool(((t < 0) | (t > 1)).any()):
            raise ValueError("time must lie in [0, 1]")
        return self.mlp(self.sinusoid(t))


class CrossAttention(nn.Module):
    """Multi-head cross-attention with RoPE on queries and on flagged key rows.

    Keys have no bias so zero placeholder rows produce zero keys.
    """

    def __init__(self, dim: int, kv_dim: int, heads: int, rope_base: float = 10000.0):
        super().__init__()
        self.heads, self.head_dim, self.rope_base = heads, dim // heads, rope_base
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(kv_dim, dim, bias=False)
        self.v = nn.Linear(kv_dim, dim)
        self.out = nn.Linear(dim, dim)

    def _split(self, x):
        b, s, _ = x.shape
        return x.reshape(b, s, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, x, q_pos, kv, kv_pos, rotate, key_mask):
        """x: (B,S,D); kv: (B,L,kv_dim); rotate: (L,) bool; key_mask: (B,L) bool."""
        q = rope(self._split(self.q(x)), q_pos, self.rope_base)
        k = self._split(self.k(kv))
        k = torch.where(rotate[None, None, :, None], rope(k, kv_pos, self.rope_base), k)
        v = self._split(self.v(kv))
        logits = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        logits = logits.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        att = torch.softmax(logits, dim=-1)
        y = (att @ v).transpose(1, 2).reshape(x.shape)
        return self.out(y)


class MoEGate(nn.Module):
    """Softmax weights (sp, on, off) from mean text embeddings."""

    def __init__(self, d_env: int, d_sp: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(d_sp + 2 * d_env, hidden)
        self.fc2 = nn.Linear(hidden, 3)

    def forward(self, mean_sp, mean_on, mean_off):
        h = F.silu(self.fc1(torch.cat([mean_sp, mean_on, mean_off], dim=-1)))
        return torch.softmax(self.fc2(h), dim=-1)


@dataclass
class ConditionStreams:
    on: torch.Tensor  # (B, L_on + N, d_env)
    on_mask: torch.Tensor
    off: torch.Tensor
    off_mask: torch.Tensor
    sp: torch.Tensor  # (B, L_sp + N, d_sp)
    sp_mask: torch.Tensor
    on_visual_start: int
    off_visual_start: int
    sp_visual_start: int
    mean_on: torch.Tensor
    mean_off: torch.Tensor
    mean_sp: torch.Tensor
    visual: torch.Tensor  # effective visual features (nulls substituted)


class TriAttnBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        h = cfg.hidden
        self.cfg = cfg
        self.ada = nn.Linear(h, 6 * h)
        self.ca_env = CrossAttention(h, cfg.d_env, cfg.heads, cfg.rope_base)
        self.ca_off = None if cfg.share_env_attention else CrossAttention(h, cfg.d_env, cfg.heads, cfg.rope_base)
        self.ca_sp = CrossAttention(h, cfg.d_sp, cfg.heads, cfg.rope_base)
        self.gate = MoEGate(cfg.d_env, cfg.d_sp, h)
        self.mlp = nn.Sequential(nn.Linear(h, cfg.mlp_ratio * h), nn.GELU(), nn.Linear(cfg.mlp_ratio * h, h))
        if cfg.self_attn:
            self.sa_qkv = nn.Linear(h, 3 * h)
            self.sa_out = nn.Linear(h, h)
        self.gate_override: torch.Tensor | None = None

    def adaln(self, c_vt: torch.Tensor) -> list[torch.Tensor]:
        """Frame-aligned params: project, nearest-upsample N -> T_tok, split in six."""
        params = self.ada(F.silu(c_vt))
        idx = nearest_indices(c_vt.shape[1], self.cfg.t_tok)
        return list(params[:, idx].chunk(6, dim=-1))

    def gate_weights(self, s: ConditionStreams) -> torch.Tensor:
        if self.gate_override is not None:
            return self.gate_override.to(s.mean_on.dtype).expand(s.mean_on.shape[0], 3)
        if not self.cfg.moe_gating:
            return torch.full((s.mean_on.shape[0], 3), 1.0 / 3.0, dtype=s.mean_on.dtype)
        return self.gate(s.mean_sp, s.mean_on, s.mean_off)

    def attend(self, y, s: ConditionStreams, q_pos):
        t_tok, n_vis = self.cfg.t_tok, s.visual.shape[1]
        vpos = visual_positions(n_vis, t_tok)

        def run(ca, kv, mask, start):
            rot = torch.arange(kv.shape[1]) >= start
            pos = torch.zeros(kv.shape[1], dtype=torch.float64)
            pos[start:] = vpos
            return ca(y, q_pos, kv, pos, rot, mask)

        x_on = run(self.ca_env, s.on, s.on_mask, s.on_visual_start)
        x_off = run(self.ca_off or self.ca_env, s.off, s.off_mask, s.off_visual_start)
        x_sp = run(self.ca_sp, s.sp, s.sp_mask, s.sp_visual_start)
        return x_on, x_off, x_sp

    def self_attention(self, x, q_pos):
        b, n, d = x.shape
        hd, heads = d // self.cfg.heads, self.cfg.heads
        q, k, v = self.sa_qkv(layer_norm(x)).reshape(b, n, 3, heads, hd).permute(2, 0, 3, 1, 4)
        q, k = rope(q, q_pos, self.cfg.rope_base), rope(k, q_pos, self.cfg.rope_base)
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(hd), dim=-1)
        return self.sa_out((att @ v).transpose(1, 2).reshape(b, n, d))

    def forward(self, x, s: ConditionStreams, ada, q_pos):
        cfg = self.cfg
        b, n, d = x.shape
        a1, b1, g1, a2, b2, g2 = (p[:, :, None, :] for p in ada)  # (B, T_tok, 1, D)

        def modulate(z, a, bb):
            z = layer_norm(z).reshape(b, cfg.t_tok, cfg.f_tok, d)
            return (z * (1 + a) + bb).reshape(b, n, d)

        def gated(z, g):
            return (z.reshape(b, cfg.t_tok, cfg.f_tok, d) * g).reshape(b, n, d)

        y = modulate(x, a1, b1)
        x_on, x_off, x_sp = self.attend(y, s, q_pos)
        w = self.gate_weights(s)
        fused = w[:, 0, None, None] * x_sp + w[:, 1, None, None] * x_on + w[:, 2, None, None] * x_off
        x = x + gated(fused, g1)
        if cfg.self_attn:
            x = x + self.self_attention(x, q_pos)
        y = modulate(x, a2, b2)
        return x + gated(self.mlp(y), g2)


class TriAttnDiT(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        h = cfg.hidden
        self.x_embed = nn.Linear(cfg.d_in, h)
        self.time_embed = TimeEmbedding(h)
        self.w_vt = nn.Linear(cfg.d_vis, h, bias=False)
        self.w_env = nn.Linear(cfg.d_vis, cfg.d_env, bias=False)
        self.w_sp = nn.Linear(cfg.d_vis, cfg.d_sp, bias=False)
        self.speech = TranscriptionEncoder(cfg.d_sp, cfg.max_chars, cfg.durator_mode)
        self.null_visual = nn.Parameter(torch.zeros(cfg.d_vis))
        self.blocks = nn.ModuleList(TriAttnBlock(cfg) for _ in range(cfg.depth))
        self.head = nn.Linear(h, cfg.d_in)

    # -- condition plumbing --------------------------------------------------

    def effective_visual(self, cond: ConditionSet) -> torch.Tensor:
        v = cond.visual.to(self.null_visual.dtype)
        dropped = cond.drop[:, DROP_VIS]
        return torch.where(dropped[:, None, None], self.null_visual.expand_as(v), v)

    def speech_tokens(self, cond: ConditionSet) -> torch.Tensor:
        sp = self.speech(cond.chars, cond.chars_mask, self.cfg.t_tok)
        dropped = cond.drop[:, DROP_SP]
        return torch.where(dropped[:, None, None], self.speech.empty.expand_as(sp), sp)

    def fuse_visual_time(self, c_v: torch.Tensor, t_emb: torch.Tensor) -> torch.Tensor:
        return self.w_vt(c_v) + t_emb[:, None, :]

    def assemble_streams(self, cond: ConditionSet) -> ConditionStreams:
        dtype = self.null_visual.dtype
        c_v = self.effective_visual(cond)
        speech_kind = cond.speech_kind[:, None, None]
        vis_env = self.w_env(c_v)
        vis_sp = self.w_sp(c_v)
        zero_env = torch.zeros_like(vis_env)
        zero_sp = torch.zeros_like(vis_sp)
        on_vis = torch.where(speech_kind, zero_env, vis_env)
        sp_vis = torch.where(speech_kind, vis_sp, zero_sp)
        on_txt, off_txt = cond.on_env.to(dtype), cond.off_env.to(dtype)
        sp_txt = self.speech_tokens(cond)
        b, n = c_v.shape[:2]
        ones = torch.ones(b, n, dtype=torch.bool)
        return ConditionStreams(
            on=torch.cat([on_txt, on_vis], 1), on_mask=torch.cat([cond.on_mask, ones], 1),
            off=torch.cat([off_txt, zero_env], 1), off_mask=torch.cat([cond.off_mask, ones], 1),
            sp=torch.cat([sp_txt, sp_vis], 1),
            sp_mask=torch.ones(b, sp_txt.shape[1] + n, dtype=torch.bool),
            on_visual_start=on_txt.shape[1], off_visual_start=off_txt.shape[1],
            sp_visual_start=sp_txt.shape[1],
            mean_on=_masked_mean(on_txt, cond.on_mask), mean_off=_masked_mean(off_txt, cond.off_mask),
            mean_sp=sp_txt.mean(dim=1), visual=c_v,
        )

    def moe_weights(self, cond: ConditionSet, block: int = 0) -> torch.Tensor:
        return self.blocks[block].gate_weights(self.assemble_streams(cond))

    def set_gate_override(self, weights) -> None:
        """Force fixed (sp, on, off) gate weights in every block; None restores the MLP."""
        w = None if weights is None else torch.as_tensor(weights, dtype=torch.float64)
        for blk in self.blocks:
            blk.gate_override = w

    # -- forward ---------------------------------------------------------------

    def forward(self, x_t: torch.Tensor, t: torch.Tensor, cond: ConditionSet) -> torch.Tensor:
        cfg = self.cfg
        expect = (cfg.latent_channels, cfg.latent_t, cfg.latent_f)
        if tuple(x_t.shape[1:]) != expect:
            raise ValueError(f"latent shape {tuple(x_t.shape[1:])} does not match config {expect}")
        dtype = self.null_visual.dtype
        x_t = x_t.to(dtype)
        t = torch.as_tensor(t, dtype=dtype).reshape(-1).expand(x_t.shape[0])
        s = self.assemble_streams(cond)
        c_vt = self.fuse_visual_time(s.visual, self.time_embed(t))
        q_pos = torch.arange(cfg.t_tok, dtype=dtype).repeat_interleave(cfg.f_tok)
        x = self.x_embed(patchify(x_t, cfg.patch))
        for blk in self.blocks:
            x = blk(x, s, blk.adaln(c_vt), q_pos)
        out = self.head(layer_norm(x))
        return unpatchify(out, cfg.latent_channels, cfg.latent_t, cfg.latent_f, cfg.patch)


def _masked_mean(x, mask):
    m = mask.to(x.dtype)[..., None]
    return (x * m).sum(dim=1) / m.sum(dim=1).clamp(min=1.0)


ZERO_INIT_SUFFIXES = ("ada.weight", "ada.bias", "head.weight", "head.bias", "gate.fc2.weight", "gate.fc2.bias")


def init_parameters(model: nn.Module, seed: int, zero_init: bool = True) -> nn.Module:
    """Deterministic init from the Philox stream, in sorted parameter-name order.

    Linear weights: uniform Xavier; embeddings and learned tokens: N(0, 0.5^2);
    biases zero; adaLN projections, gate output layer and final head zero when
    ``zero_init`` (otherwise they get the generic rule too).
    """
    rng = Rng(seed, 0x1A17)
    with torch.no_grad():
        for name, p in sorted(model.named_parameters(), key=lambda kv: kv[0]):
            if zero_init and name.endswith(ZERO_INIT_SUFFIXES):
                p.zero_()
            elif name.endswith("dur2.bias"):
                p.fill_(math.log(math.e - 1.0))  # softplus -> 1 frame per character
            elif name.endswith("bias"):
                p.copy_(torch.from_numpy(rng.normal(p.shape, 0.02, np.float64)) if not zero_init else torch.zeros_like(p))
            elif p.dim() == 2 and not name.endswith("_emb.weight"):
                fan_out, fan_in = p.shape
                bound = math.sqrt(6.0 / (fan_in + fan_out))
                p.copy_(torch.from_numpy(rng.gen.uniform(-bound, bound, p.shape)))
            else:
                p.copy_(torch.from_numpy(rng.normal(p.shape, 0.5, np.float64)))
    return model


def build_model(cfg: ModelConfig, seed: int = 0, zero_init: bool = True, dtype=torch.float32) -> TriAttnDiT:
    model = TriAttnDiT(cfg).to(dtype)
    return init_parameters(model, seed, zero_init)
