"""Condition encoders: hashed caption table, trainable transcription encoder
with a differentiable duration-based upsampler, and synthetic visual features.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .numerics import Rng

ENV_VOCAB = 4096
CHAR_ALPHABET = "abcdefghijklmnopqrstuvwxyz '.,?!-0123456789"
# index 0 is padding, last index is "unknown character"
N_CHARS = len(CHAR_ALPHABET) + 2

DROP_ON, DROP_OFF, DROP_SP, DROP_VIS = range(4)
CONDITION_NAMES = ("on", "off", "sp", "vis")

VISUAL_LABELS = (
    "speech", "dog", "rain", "bell", "engine", "birds", "wind", "waves", "clock", "gunshot",
    "siren", "drum",
)


def _bucket(token: str, vocab: int) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % vocab


class EnvCaptionEncoder:
    """Frozen hash-bucket embedding table; row ``vocab`` is the EMPTY token."""

    def __init__(self, dim: int = 32, vocab: int = ENV_VOCAB, seed: int = 0):
        self.dim, self.vocab, self.seed = dim, vocab, seed
        table = Rng(seed, 0xE4C).normal((vocab + 1, dim), scale=1.0, dtype=np.float64)
        self.table = torch.from_numpy(table.astype(np.float32))

    @property
    def empty(self) -> torch.Tensor:
        return self.table[self.vocab]

    def tokenize(self, text: str) -> list[int]:
        words = text.lower().split()
        return [_bucket(w, self.vocab) for w in words] or [self.vocab]

    def encode(self, text: str) -> torch.Tensor:
        """(L, dim) embedding; "" maps to the single EMPTY row."""
        return self.table[torch.tensor(self.tokenize(text))].clone()


def char_ids(text: str) -> list[int]:
    out = []
    for ch in text.lower():
        i = CHAR_ALPHABET.find(ch)
        out.append(i + 1 if i >= 0 else N_CHARS - 1)
    return out


def durator(hidden: torch.Tensor, durations: torch.Tensor, target_frames: int,
            mask: torch.Tensor | None = None, return_alignment: bool = False):
    """Upsample token states to ``target_frames`` frames with a Gaussian alignment.

    hidden: (B, L, d) or (L, d); durations: matching (B, L) / (L,), positive.
    Durations are rescaled to sum to ``target_frames``; token l is centred at
    its cumulative end minus half its duration and frame t attends with
    softmax_l(-(t + 0.5 - c_l)^2 / sigma^2), sigma = max(mean duration, 1).
    """
    squeeze = hidden.dim() == 2
    if squeeze:
        hidden, durations = hidden[None], durations[None]
        mask = None if mask is None else mask[None]
    b, n_tok, _ = hidden.shape
    if n_tok == 0:
        raise ValueError("durator needs at least one token")
    if mask is None:
        mask = torch.ones(b, n_tok, dtype=torch.bool)
    if not bool(mask.any(dim=1).all()):
        raise ValueError("durator needs at least one valid token per row")
    d = torch.where(mask, durations, torch.zeros_like(durations))
    total = d.sum(dim=1, keepdim=True)
    d = d * (target_frames / total)
    centers = torch.cumsum(d, dim=1) - d / 2
    count = mask.sum(dim=1, keepdim=True).to(d.dtype)
    sigma = torch.clamp(target_frames / count, min=1.0)  # mean rescaled duration
    t = torch.arange(target_frames, dtype=d.dtype)[None, :, None] + 0.5
    logits = -((t - centers[:, None, :]) ** 2) / sigma[:, :, None] ** 2
    logits = logits.masked_fill(~mask[:, None, :], float("-inf"))
    align = torch.softmax(logits, dim=-1)
    out = align @ hidden
    if squeeze:
        out, align = out[0], align[0]
    return (out, align) if return_alignment else out


class TranscriptionEncoder(nn.Module):
    """Character embeddings + learned positions -> hidden -> durations -> durator.

    ``mode='predicted'`` appends a learned silence token whose duration covers
    whatever the predicted token durations leave of the target length;
    ``mode='fill'`` stretches the tokens over the whole target.
    """

    def __init__(self, dim: int = 32, max_chars: int = 128, mode: str = "predicted"):
        super().__init__()
        if mode not in ("predicted", "fill"):
            raise ValueError(f"unknown durator mode {mode!r}")
        self.dim, self.max_chars, self.mode = dim, max_chars, mode
        self.char_emb = nn.Embedding(N_CHARS, dim)
        self.pos_emb = nn.Embedding(max_chars, dim)
        self.proj = nn.Linear(dim, dim)
        self.dur1 = nn.Linear(dim, dim)
        self.dur2 = nn.Linear(dim, 1)
        self.empty = nn.Parameter(torch.zeros(dim))  # EMPTY / null speech token
        self.silence = nn.Parameter(torch.zeros(dim))

    def hidden(self, ids: torch.Tensor) -> torch.Tensor:
        pos = torch.arange(ids.shape[1]).clamp(max=self.max_chars - 1)
        h = self.char_emb(ids) + self.pos_emb(pos)[None]
        return h + F.gelu(self.proj(h))

    def durations(self, h: torch.Tensor) -> torch.Tensor:
        return F.softplus(self.dur2(F.gelu(self.dur1(h)))).squeeze(-1) + 1e-3

    def forward(self, ids: torch.Tensor, mask: torch.Tensor, target_frames: int,
                return_alignment: bool = False):
        b = ids.shape[0]
        has_text = mask.any(dim=1)
        safe_mask = mask.clone()
        safe_mask[~has_text, 0] = True  # placeholder row; replaced below
        h = self.hidden(ids)
        d = self.durations(h)
        if self.mode == "predicted":
            spent = torch.where(safe_mask, d, torch.zeros_like(d)).sum(dim=1, keepdim=True)
            pad = F.softplus(target_frames - spent, beta=4.0) + 1e-3
            h = torch.cat([h, self.silence.expand(b, 1, -1)], dim=1)
            d = torch.cat([d, pad], dim=1)
            safe_mask = torch.cat([safe_mask, torch.ones(b, 1, dtype=torch.bool)], dim=1)
        out, align = durator(h, d, target_frames, safe_mask, return_alignment=True)
        out = torch.where(has_text[:, None, None], out, self.empty.expand(b, target_frames, -1))
        return (out, align) if return_alignment else out

    def encode(self, text: str, target_frames: int, return_alignment: bool = False):
        """Single transcription -> (target_frames, dim)."""
        ids = char_ids(text)[: self.max_chars] or [0]
        t = torch.tensor([ids])
        m = torch.tensor([[bool(text.strip())] * len(ids)])
        res = self(t, m, target_frames, return_alignment)
        if return_alignment:
            return res[0][0], res[1][0]
        return res[0]


def class_embedding(label: str, dim: int, seed: int = 0) -> np.ndarray:
    """Unit class vector; registered labels are mutually orthogonal when dim allows."""
    if label in VISUAL_LABELS and len(VISUAL_LABELS) <= dim:
        basis = Rng(seed, 0x715).gen.standard_normal((dim, dim))
        q, _ = np.linalg.qr(basis)
        return q[:, VISUAL_LABELS.index(label)].copy()
    v = Rng(seed, 0x716, _bucket(label, 2**31)).gen.standard_normal(dim)
    return v / np.linalg.norm(v)


def synth_visual_features(scenario_seed: int, n_frames: int, kind_label: str,
                          dim: int = 16, drift: float = 0.05) -> np.ndarray:
    """Near-constant per-frame features: class vector plus small seeded drift."""
    if n_frames < 1:
        raise ValueError("need at least one frame")
    base = class_embedding(kind_label, dim)
    noise = Rng(scenario_seed, 0x717).gen.standard_normal((n_frames, dim)) * drift
    return (base[None, :] + noise).astype(np.float32)


@dataclass
class ConditionInputs:
    """Raw conditions for one clip."""

    on_caption: str
    off_caption: str
    transcription: str
    visual: np.ndarray  # (N, d_vis)
    on_screen_kind: str | None = None

    def __post_init__(self):
        kind = "speech" if self.on_caption.strip() == "" else "environment"
        if self.on_screen_kind is None:
            self.on_screen_kind = kind
        elif self.on_screen_kind != kind:
            raise ValueError(
                f"on_screen_kind={self.on_screen_kind!r} contradicts on-screen caption {self.on_caption!r}"
            )


@dataclass
class ConditionSet:
    """Batched conditions. Env captions are embedded; speech stays as char ids
    because its encoder is trained with the velocity network."""

    on_env: torch.Tensor  # (B, L_on, d_env)
    on_mask: torch.Tensor  # (B, L_on) bool
    off_env: torch.Tensor
    off_mask: torch.Tensor
    chars: torch.Tensor  # (B, L_c) long
    chars_mask: torch.Tensor  # (B, L_c) bool; all False for empty transcription
    visual: torch.Tensor  # (B, N, d_vis)
    speech_kind: torch.Tensor  # (B,) bool: on-screen source is the speaker
    empty_env: torch.Tensor  # (d_env,) EMPTY caption row
    drop: torch.Tensor = None  # (B, 4) bool: on, off, sp, vis
    on_empty: torch.Tensor = None  # (B,) raw caption was ""
    off_empty: torch.Tensor = None

    def __post_init__(self):
        b = self.on_env.shape[0]
        if self.drop is None:
            self.drop = torch.zeros(b, 4, dtype=torch.bool)
        if self.on_empty is None:
            self.on_empty = self.speech_kind.clone()
        if self.off_empty is None:
            self.off_empty = torch.zeros(b, dtype=torch.bool)
        if not torch.equal(self.on_empty, self.speech_kind):
            raise ValueError("on_screen_kind must be speech exactly when the on-screen caption is empty")

    @property
    def batch_size(self) -> int:
        return self.on_env.shape[0]

    def text_null(self) -> torch.Tensor:
        """(B, 3) bool: on/off/sp condition carries no information (empty or dropped)."""
        sp_empty = ~self.chars_mask.any(dim=1)
        return torch.stack(
            [self.on_empty | self.drop[:, DROP_ON], self.off_empty | self.drop[:, DROP_OFF],
             sp_empty | self.drop[:, DROP_SP]],
            dim=1,
        )

    def with_drops(self, drop: torch.Tensor) -> "ConditionSet":
        """Return a copy with ``drop`` OR-ed in; dropped captions become EMPTY."""
        drop = self.drop | drop
        on_env, on_mask = _blank_env(self.on_env, self.on_mask, drop[:, DROP_ON], self.empty_env)
        off_env, off_mask = _blank_env(self.off_env, self.off_mask, drop[:, DROP_OFF], self.empty_env)
        return replace(self, on_env=on_env, on_mask=on_mask, off_env=off_env, off_mask=off_mask, drop=drop)

    def keep_only_text(self, which: int | None) -> "ConditionSet":
        """Drop every text condition except ``which`` (None drops all); visual kept."""
        b = self.batch_size
        drop = torch.zeros(b, 4, dtype=torch.bool)
        for i in (DROP_ON, DROP_OFF, DROP_SP):
            if i != which:
                drop[:, i] = True
        return self.with_drops(drop)

    def to(self, dtype) -> "ConditionSet":
        return replace(self, on_env=self.on_env.to(dtype), off_env=self.off_env.to(dtype),
                       visual=self.visual.to(dtype), empty_env=self.empty_env.to(dtype))

    def select(self, idx) -> "ConditionSet":
        idx = torch.as_tensor(idx)
        return ConditionSet(
            self.on_env[idx], self.on_mask[idx], self.off_env[idx], self.off_mask[idx],
            self.chars[idx], self.chars_mask[idx], self.visual[idx], self.speech_kind[idx],
            self.empty_env, self.drop[idx], self.on_empty[idx], self.off_empty[idx],
        )


def _blank_env(tokens, mask, which, empty):
    if not bool(which.any()):
        return tokens, mask
    tokens = tokens.clone()
    mask = mask.clone()
    tokens[which] = 0.0
    tokens[which, 0] = empty.to(tokens.dtype)
    mask[which] = False
    mask[which, 0] = True
    return tokens, mask


def _pad_stack(seqs: list[torch.Tensor]):
    n = max(s.shape[0] for s in seqs)
    out = torch.zeros(len(seqs), n, seqs[0].shape[1], dtype=seqs[0].dtype)
    mask = torch.zeros(len(seqs), n, dtype=torch.bool)
    for i, s in enumerate(seqs):
        out[i, : s.shape[0]] = s
        mask[i, : s.shape[0]] = True
    return out, mask


def collate_conditions(items: list[ConditionInputs], env: EnvCaptionEncoder,
                       max_chars: int = 128) -> ConditionSet:
    on, on_mask = _pad_stack([env.encode(c.on_caption) for c in items])
    off, off_mask = _pad_stack([env.encode(c.off_caption) for c in items])
    ids = [char_ids(c.transcription)[:max_chars] for c in items]
    n = max(1, max(len(i) for i in ids))
    chars = torch.zeros(len(items), n, dtype=torch.long)
    cmask = torch.zeros(len(items), n, dtype=torch.bool)
    for k, (i, c) in enumerate(zip(ids, items)):
        if c.transcription.strip():
            chars[k, : len(i)] = torch.tensor(i, dtype=torch.long)
            cmask[k, : len(i)] = True
    visual = torch.from_numpy(np.stack([np.asarray(c.visual, dtype=np.float32) for c in items]))
    kind = torch.tensor([c.on_screen_kind == "speech" for c in items])
    off_empty = torch.tensor([c.off_caption.strip() == "" for c in items])
    return ConditionSet(on, on_mask, off, off_mask, chars, cmask, visual, kind, env.empty.clone(),
                        on_empty=kind.clone(), off_empty=off_empty)
