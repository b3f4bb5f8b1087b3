"""Waveform I/O, log-mel analysis, Griffin-Lim inversion and SNR mixing."""
from __future__ import annotations

import logging
import wave
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

SAMPLE_RATE = 16000
FIXED_FRAMES = 1024
HOP = 160
FIXED_LENGTH = FIXED_FRAMES * HOP  # 163840 samples
LOG_EPS = 1e-5


@dataclass
class Waveform:
    samples: np.ndarray
    rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def power(self) -> float:
        return float(np.mean(self.samples**2)) if len(self) else 0.0


@dataclass(frozen=True)
class StftConfig:
    fft_size: int = 1024
    hop: int = HOP
    win_size: int = 1024
    n_mels: int = 64
    rate: int = SAMPLE_RATE
    fmin: float = 0.0
    fmax: float = 8000.0

    def __post_init__(self):
        if min(self.fft_size, self.hop, self.win_size, self.n_mels) <= 0:
            raise ValueError("STFT sizes must be positive")
        if self.win_size > self.fft_size:
            raise ValueError("win_size must not exceed fft_size")

    @property
    def n_freq(self) -> int:
        return self.fft_size // 2 + 1

    @property
    def pad(self) -> int:
        # frames centred on hop segments: T = len // hop
        return (self.fft_size - self.hop) // 2

    def num_frames(self, length: int) -> int:
        return 1 + (length + 2 * self.pad - self.fft_size) // self.hop


# -- I/O ------------------------------------------------------------------------

def read_wav(path, strict: bool = True, rate: int = SAMPLE_RATE) -> Waveform:
    with wave.open(str(path), "rb") as fh:
        channels, width, sr, n = fh.getnchannels(), fh.getsampwidth(), fh.getframerate(), fh.getnframes()
        raw = fh.readframes(n)
    if width != 2:
        raise ValueError(f"{path}: unsupported encoding ({8 * width}-bit); PCM16 required")
    if strict and sr != rate:
        raise ValueError(f"{path}: sample rate {sr} != {rate} (resampling is not supported)")
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if channels > 1:
        if strict:
            raise ValueError(f"{path}: {channels}-channel audio rejected in strict mode")
        log.warning("%s: averaging %d channels to mono", path, channels)
        data = data.reshape(-1, channels).mean(axis=1)
    return Waveform(data, sr)


def write_wav(path, w: Waveform) -> None:
    pcm = np.clip(np.round(np.clip(w.samples, -1.0, 1.0) * 32768.0), -32768, 32767).astype("<i2")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.rate)
        fh.writeframes(pcm.tobytes())


def fix_length(w: Waveform, length: int = FIXED_LENGTH) -> Waveform:
    s = w.samples[:length]
    if s.shape[0] < length:
        s = np.concatenate([s, np.zeros(length - s.shape[0])])
    return Waveform(s, w.rate)


# -- STFT / mel -----------------------------------------------------------------

def hann(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


@lru_cache(maxsize=8)
def _window(cfg: StftConfig) -> np.ndarray:
    w = np.zeros(cfg.fft_size)
    left = (cfg.fft_size - cfg.win_size) // 2
    w[left:left + cfg.win_size] = hann(cfg.win_size)
    return w


def stft(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Complex STFT, shape (frames, n_freq), reflect-padded by ``cfg.pad``."""
    x = np.asarray(x, dtype=np.float64)
    p = cfg.pad
    if x.shape[0] + 2 * p < cfg.fft_size:
        raise ValueError(f"{x.shape[0]} samples is shorter than one hop ({cfg.hop})")
    mode = "reflect" if x.shape[0] > p else "constant"
    xp = np.pad(x, (p, p), mode=mode)
    n_frames = cfg.num_frames(x.shape[0])
    frames = np.lib.stride_tricks.sliding_window_view(xp, cfg.fft_size)[:: cfg.hop][:n_frames]
    return np.fft.rfft(frames * _window(cfg), axis=-1)


def istft(spec: np.ndarray, cfg: StftConfig, length: int) -> np.ndarray:
    n_frames = spec.shape[0]
    win = _window(cfg)
    frames = np.fft.irfft(spec, n=cfg.fft_size, axis=-1) * win
    total = cfg.fft_size + cfg.hop * (n_frames - 1)
    out = np.zeros(total)
    norm = np.zeros(total)
    w2 = win**2
    for i in range(n_frames):
        s = i * cfg.hop
        out[s:s + cfg.fft_size] += frames[i]
        norm[s:s + cfg.fft_size] += w2
    out = np.where(norm > 1e-8, out / np.maximum(norm, 1e-8), 0.0)
    out = out[cfg.pad:cfg.pad + length]
    if out.shape[0] < length:
        out = np.concatenate([out, np.zeros(length - out.shape[0])])
    return out


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(cfg: StftConfig) -> np.ndarray:
    """HTK-scale triangular filters, area-normalised; shape (n_mels, n_freq)."""
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    freqs = np.arange(cfg.n_freq) * cfg.rate / cfg.fft_size
    fb = np.zeros((cfg.n_mels, cfg.n_freq))
    for m in range(cfg.n_mels):
        lo, c, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (freqs - lo) / (c - lo)
        down = (hi - freqs) / (hi - c)
        fb[m] = np.maximum(0.0, np.minimum(up, down)) * (2.0 / (hi - lo))
    fb.setflags(write=False)
    return fb


def mel_band_of(freq_hz: float, cfg: StftConfig) -> int:
    """Index of the filter with the largest response at ``freq_hz``."""
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    resp = [
        max(0.0, min((freq_hz - edges[m]) / (edges[m + 1] - edges[m]),
                     (edges[m + 2] - freq_hz) / (edges[m + 2] - edges[m + 1]))) * 2.0 / (edges[m + 2] - edges[m])
        for m in range(cfg.n_mels)
    ]
    return int(np.argmax(resp))


def mel_spectrogram(w: Waveform | np.ndarray, cfg: StftConfig = StftConfig()) -> np.ndarray:
    """Log-mel grid of shape (frames, n_mels): log(mel magnitude + 1e-5)."""
    x = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    mag = np.abs(stft(x, cfg))
    return np.log(mag @ mel_filterbank(cfg).T + LOG_EPS).astype(np.float32)


def mel_to_linear(mel: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Linear magnitude estimate via the filterbank pseudo-inverse, clamped at 0."""
    mag_mel = np.maximum(np.exp(np.asarray(mel, dtype=np.float64)) - LOG_EPS, 0.0)
    return np.maximum(mag_mel @ _pinv(cfg).T, 0.0)


@lru_cache(maxsize=8)
def _pinv(cfg: StftConfig) -> np.ndarray:
    return np.linalg.pinv(mel_filterbank(cfg))


def reanalysis_error(x: np.ndarray, target_mag: np.ndarray, cfg: StftConfig) -> float:
    """Relative Frobenius distance between |STFT(x)| and the target magnitude."""
    denom = max(np.linalg.norm(target_mag), 1e-12)
    return float(np.linalg.norm(np.abs(stft(x, cfg)) - target_mag) / denom)


def griffin_lim(mel: np.ndarray, cfg: StftConfig = StftConfig(), iters: int = 32,
                length: int | None = None, seed: int = 0, trace: list | None = None) -> Waveform:
    """Phase reconstruction from a log-mel grid.

    ``trace`` (if given) receives the re-analysis error after each iteration.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    target = mel_to_linear(mel, cfg)
    length = length if length is not None else target.shape[0] * cfg.hop
    rng = np.random.Generator(np.random.Philox(seed))
    phase = np.exp(2j * np.pi * rng.random(target.shape))
    x = istft(target * phase, cfg, length)
    for _ in range(iters):
        spec = stft(x, cfg)
        x = istft(target * np.exp(1j * np.angle(spec)), cfg, length)
        if trace is not None:
            trace.append(reanalysis_error(x, target, cfg))
    return Waveform(x, cfg.rate)


# -- SNR ------------------------------------------------------------------------

@dataclass
class Mix:
    wave: Waveform
    gains: list[float] = field(default_factory=list)
    scale: float = 1.0  # peak normalisation applied after summing


def snr_gain(primary: Waveform, interferer: Waveform, snr_db: float) -> float:
    p_i = interferer.power
    if p_i <= 0.0:
        raise ValueError("interferer has zero power; SNR is undefined")
    p_p = primary.power
    if p_p <= 0.0:
        raise ValueError("primary has zero power")
    return float(np.sqrt(p_p / (p_i * 10.0 ** (snr_db / 10.0))))


def mix_sources(primary: Waveform, interferers: list[tuple[Waveform, float]]) -> Mix:
    """Add each interferer at its own SNR relative to ``primary``."""
    out = primary.samples.copy()
    gains = []
    for w, snr in interferers:
        if len(w) != len(primary):
            raise ValueError("sources must have equal length (apply fix_length first)")
        g = snr_gain(primary, w, snr)
        gains.append(g)
        out = out + g * w.samples
    peak = float(np.max(np.abs(out))) if out.size else 0.0
    scale = 1.0 / peak if peak > 1.0 else 1.0
    return Mix(Waveform(out * scale, primary.rate), gains, scale)


def mix_at_snr(primary: Waveform, interferer: Waveform, snr_db: float) -> Mix:
    return mix_sources(primary, [(interferer, snr_db)])


def measure_snr(a: Waveform, b: Waveform) -> float:
    pa = float(np.mean(np.asarray(a.samples, dtype=np.float64) ** 2))
    pb = float(np.mean(np.asarray(b.samples, dtype=np.float64) ** 2))
    if pa <= 0.0 or pb <= 0.0:
        raise ValueError("zero-power input")
    return 10.0 * np.log10(pa / pb)


def spectrogram_csv(path, mel: np.ndarray) -> None:
    """One row per frame, one column per mel band."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, np.asarray(mel), delimiter=",", fmt="%.6f")


def spectrogram_pgm(path, mel: np.ndarray) -> None:
    """Portable graymap with frequency on the vertical axis (low at bottom)."""
    g = np.asarray(mel, dtype=np.float64).T[::-1]
    lo, hi = g.min(), g.max()
    img = np.zeros_like(g) if hi <= lo else (g - lo) / (hi - lo)
    data = (img * 255).round().astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode())
        fh.write(data.tobytes())
