"""Objective metrics over precomputed features, posteriors and token sequences,
plus the small deterministic feature extractors used at desk scale."""
from __future__ import annotations

import numpy as np

from .kernels import levenshtein
from .numerics import matrix_sqrt_psd

KL_FLOOR = 1e-10


def _features(x, name: str) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise ValueError(f"{name} must be an (M, D) matrix")
    if a.shape[0] < 2:
        raise ValueError(f"{name} needs at least two vectors for a covariance")
    return a


def frechet_distance(a, b) -> float:
    """||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2).

    Covariances use 1/(M-1). The symmetric form of the cross term has the same
    trace as sqrt(S_a S_b) and keeps the square root on a PSD matrix.
    """
    a, b = _features(a, "A"), _features(b, "B")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"feature dims differ: {a.shape[1]} vs {b.shape[1]}")
    mu = a.mean(0) - b.mean(0)
    sa = np.atleast_2d(np.cov(a, rowvar=False, ddof=1))
    sb = np.atleast_2d(np.cov(b, rowvar=False, ddof=1))
    ra = matrix_sqrt_psd(sa)
    cross = matrix_sqrt_psd(ra @ sb @ ra)
    d = float(mu @ mu + np.trace(sa) + np.trace(sb) - 2.0 * np.trace(cross))
    return max(d, 0.0)


def kl_divergence(p, q, floor: float = KL_FLOOR) -> float:
    p = np.maximum(np.asarray(p, dtype=np.float64), floor)
    q = np.maximum(np.asarray(q, dtype=np.float64), floor)
    return float(np.sum(p * np.log(p / q)))


def mean_kl(refs, gens, floor: float = KL_FLOOR) -> float:
    """Mean over pairs of KL(ref || gen)."""
    refs, gens = list(refs), list(gens)
    if len(refs) != len(gens):
        raise ValueError(f"{len(refs)} reference posteriors vs {len(gens)} generated")
    if not refs:
        raise ValueError("no posterior pairs")
    for p in refs + gens:
        if abs(float(np.sum(p)) - 1.0) > 1e-5:
            raise ValueError("posteriors must sum to 1")
    return float(np.mean([kl_divergence(p, q, floor) for p, q in zip(refs, gens)]))


def edit_error_rate(ref, hyp) -> float:
    """Levenshtein(ref, hyp) / len(ref) with unit costs."""
    ref, hyp = list(ref), list(hyp)
    if not ref:
        raise ValueError("reference sequence is empty")
    vocab: dict = {}
    ra = np.array([vocab.setdefault(tok, len(vocab)) for tok in ref], dtype=np.int64)
    ha = np.array([vocab.setdefault(tok, len(vocab)) for tok in hyp], dtype=np.int64)
    return levenshtein(ra, ha) / len(ref)


def cosine_alignment_score(audio_feats, cond_feats) -> float:
    """100 x mean cosine similarity between paired rows."""
    a = np.atleast_2d(np.asarray(audio_feats, dtype=np.float64))
    c = np.atleast_2d(np.asarray(cond_feats, dtype=np.float64))
    if a.shape != c.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {c.shape}")
    na, nc = np.linalg.norm(a, axis=1), np.linalg.norm(c, axis=1)
    if np.any(na == 0) or np.any(nc == 0):
        raise ValueError("cosine of a zero vector is undefined")
    return float(100.0 * np.mean(np.sum(a * c, axis=1) / (na * nc)))


# -- tokenizers -----------------------------------------------------------------

def words(text: str) -> list[str]:
    return text.lower().split()


def characters(text: str) -> list[str]:
    return list(" ".join(text.lower().split()))


# Rule-based letter-to-symbol map standing in for a phonemizer. Digraphs are
# matched before single letters; vowels collapse to a few classes.
PHONEME_DIGRAPHS = {
    "th": "TH", "sh": "SH", "ch": "CH", "ng": "NG", "ph": "F", "ck": "K", "qu": "KW", "wh": "W",
    "ee": "IY", "ea": "IY", "oo": "UW", "ou": "AW", "ow": "OW", "ai": "EY", "ay": "EY", "oi": "OY",
}
PHONEME_LETTERS = {
    "a": "AE", "b": "B", "c": "K", "d": "D", "e": "EH", "f": "F", "g": "G", "h": "HH", "i": "IH",
    "j": "JH", "k": "K", "l": "L", "m": "M", "n": "N", "o": "AA", "p": "P", "q": "K", "r": "R",
    "s": "S", "t": "T", "u": "AH", "v": "V", "w": "W", "x": "KS", "y": "Y", "z": "Z",
}


def phonemes(text: str) -> list[str]:
    out: list[str] = []
    for word in words(text):
        w = "".join(ch for ch in word if ch.isalpha())
        i = 0
        while i < len(w):
            pair = w[i:i + 2]
            if pair in PHONEME_DIGRAPHS:
                out.append(PHONEME_DIGRAPHS[pair])
                i += 2
                continue
            if w[i] == "e" and i == len(w) - 1 and len(w) > 2:
                i += 1  # silent final e
                continue
            sym = PHONEME_LETTERS[w[i]]
            if not out or out[-1] != sym or i == 0:
                out.append(sym)  # doubled consonants collapse within a word
            i += 1
    return out


TOKENIZERS = {"wer": words, "cer": characters, "per": phonemes}


def transcript_error_rates(ref: str, hyp: str) -> dict[str, float]:
    return {k: edit_error_rate(tok(ref), tok(hyp)) for k, tok in TOKENIZERS.items()}


# -- toy embedders over log-mel spectrograms --------------------------------------

def clip_embedding(log_mel: np.ndarray) -> np.ndarray:
    """Per-band mean and standard deviation of a (T, F) log-mel grid."""
    m = np.asarray(log_mel, dtype=np.float64)
    return np.concatenate([m.mean(0), m.std(0)])


def band_posterior(log_mel: np.ndarray, n_bins: int = 8) -> np.ndarray:
    """Share of spectral energy per coarse band, a stand-in for class posteriors."""
    energy = np.exp(np.asarray(log_mel, dtype=np.float64)).sum(0)
    bins = np.array([b.sum() for b in np.array_split(energy, n_bins)])
    return bins / bins.sum()


def band_tokens(log_mel: np.ndarray, n_bins: int = 8, min_run: int = 3) -> list[int]:
    """Dominant coarse band per frame, run-length collapsed; short runs dropped."""
    m = np.exp(np.asarray(log_mel, dtype=np.float64))
    dom = np.stack([b.sum(1) for b in np.array_split(m, n_bins, axis=1)], 1).argmax(1)
    out, run, cur = [], 0, None
    for tok in list(dom) + [None]:
        if tok == cur:
            run += 1
            continue
        if cur is not None and run >= min_run and (not out or out[-1] != cur):
            out.append(int(cur))
        cur, run = tok, 1
    return out
