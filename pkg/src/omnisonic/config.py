"""Run configuration: flat ``key = value`` sections read with configparser."""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

from .audio import SAMPLE_RATE, StftConfig
from .codec import LatentCodec
from .flow import PRESETS, CfgScales, TrainConfig
from .scenarios import DESK_BENCH_COUNTS, SNR_RANGE
from .triattn import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    library_seed: int = 0
    n_env: int = 120
    n_speech: int = 120
    snr_lo: float = SNR_RANGE[0]
    snr_hi: float = SNR_RANGE[1]
    n_train: int = 192
    n_val: int = 48
    bench_counts: tuple[int, int, int] = DESK_BENCH_COUNTS
    calibration_clips: int = 48


@dataclass
class RunConfig:
    stft: StftConfig = field(default_factory=lambda: StftConfig(n_mels=32))
    clip_frames: int = 256
    codec_patch: tuple[int, int] = (4, 8)
    codec_keep: int | None = None
    codec_seed: int = 0
    model: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    steps_stage1: int = 300
    steps_stage2: int = 700
    data: DataConfig = field(default_factory=DataConfig)
    sample_steps: int = 50
    gl_iters: int = 32
    presets: dict = field(default_factory=lambda: dict(PRESETS))
    seed: int = 0
    out: str = "runs/desk"
    source: str = "<defaults>"

    def setup(self, calibrate: bool = True):
        from .pipeline import Setup, calibrate_codec
        codec = LatentCodec(patch=self.codec_patch, seed=self.codec_seed, keep=self.codec_keep)
        c, t, f = codec.latent_shape((self.clip_frames, self.stft.n_mels))
        model = ModelConfig(latent_channels=c, latent_t=t, latent_f=f, **self.model)
        s = Setup(stft=self.stft, clip_frames=self.clip_frames, codec=codec, model=model,
                  library_seed=self.data.library_seed, n_env=self.data.n_env, n_speech=self.data.n_speech)
        if calibrate:
            s.codec = calibrate_codec(s, self.data.calibration_clips)
        return s

    @property
    def snr_range(self) -> tuple[float, float]:
        return (self.data.snr_lo, self.data.snr_hi)


def _convert(raw: str, like):
    text = raw.strip()
    if isinstance(like, bool):
        if text.lower() in ("true", "yes", "1", "on"):
            return True
        if text.lower() in ("false", "no", "0", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    if isinstance(like, tuple):
        parts = [p.strip() for p in text.split(",")]
        return tuple(type(like[0])(p) if like else float(p) for p in parts)
    if like is None:
        return None if text.lower() == "none" else int(text)
    return text


def _apply(obj, items: dict, name: str, skip=()):
    """Values from ``items`` converted to the types of ``obj``'s current fields."""
    known = {f.name for f in fields(obj)}
    out = {}
    for key, raw in items.items():
        if key in skip:
            continue
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in [{name}]")
        try:
            out[key] = _convert(raw, getattr(obj, key))
        except ValueError as e:
            raise ConfigError(f"[{name}] {key}: {e}") from None
    return out


_MODEL_DEFAULTS = ModelConfig()
_MODEL_KEYS = {f.name for f in fields(ModelConfig)} - {"latent_channels", "latent_t", "latent_f"}


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(str(e)) from None
    known = {"audio", "codec", "model", "train", "data", "sample", "guidance", "run"}
    extra = set(cp.sections()) - known
    if extra:
        raise ConfigError(f"unknown sections: {sorted(extra)}")
    rc = RunConfig(source=source)
    if cp.has_section("audio"):
        sec = dict(cp["audio"])
        if "sample_rate" in sec:
            sec["rate"] = sec.pop("sample_rate")
        if "clip_frames" in sec:
            rc.clip_frames = int(sec.pop("clip_frames"))
        rc.stft = StftConfig(**{**rc.stft.__dict__, **_apply(rc.stft, sec, "audio")})
        if rc.stft.rate != SAMPLE_RATE:
            raise ConfigError(f"only {SAMPLE_RATE} Hz audio is supported")
    if cp.has_section("codec"):
        sec = cp["codec"]
        if "patch" in sec:
            rc.codec_patch = tuple(int(v) for v in sec["patch"].split(","))
        if "keep" in sec:
            rc.codec_keep = _convert(sec["keep"], None)
        if "seed" in sec:
            rc.codec_seed = int(sec["seed"])
        unknown = set(sec) - {"patch", "keep", "seed"}
        if unknown:
            raise ConfigError(f"unknown key(s) {sorted(unknown)} in [codec]")
    if cp.has_section("model"):
        for key, raw in cp["model"].items():
            if key not in _MODEL_KEYS:
                raise ConfigError(f"unknown key {key!r} in [model]")
            rc.model[key] = _convert(raw, getattr(_MODEL_DEFAULTS, key))
    if cp.has_section("train"):
        sec = cp["train"]
        for key in ("steps_stage1", "steps_stage2"):
            if key in sec:
                setattr(rc, key, int(sec[key]))
        vals = _apply(rc.train, dict(sec), "train", skip=("steps_stage1", "steps_stage2", "beta1", "beta2"))
        betas = (float(sec.get("beta1", rc.train.betas[0])), float(sec.get("beta2", rc.train.betas[1])))
        rc.train = TrainConfig(**{**rc.train.__dict__, **vals, "betas": betas})
    if cp.has_section("data"):
        rc.data = DataConfig(**{**rc.data.__dict__, **_apply(rc.data, dict(cp["data"]), "data")})
    if cp.has_section("sample"):
        sec = cp["sample"]
        rc.sample_steps = int(sec.get("steps", rc.sample_steps))
        rc.gl_iters = int(sec.get("gl_iters", rc.gl_iters))
    if cp.has_section("guidance"):
        for key, raw in cp["guidance"].items():
            try:
                rc.presets[key] = CfgScales.parse(raw)
            except ValueError as e:
                raise ConfigError(f"[guidance] {key}: {e}") from None
    if cp.has_section("run"):
        sec = cp["run"]
        rc.seed = int(sec.get("seed", rc.seed))
        rc.out = sec.get("out", rc.out)
    return rc


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text(), str(p))


def builtin_config(name: str) -> RunConfig:
    """Shipped config by name: ``desk`` or ``full``."""
    try:
        text = resources.files("omnisonic").joinpath("data", f"{name}.cfg").read_text()
    except FileNotFoundError:
        raise ConfigError(f"no built-in config named {name!r}") from None
    return parse_config(text, f"<builtin:{name}>")


def resolve_config(arg: str | None) -> RunConfig:
    if arg is None:
        return builtin_config("desk")
    if arg in ("desk", "full"):
        return builtin_config(arg)
    return load_config(arg)
