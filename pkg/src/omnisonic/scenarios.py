"""Scenario sample construction and the desk benchmark generator.

Sources are synthetic: labelled environmental textures and a formant-style
speech synthesiser keyed by transcription. Every recipe is a small record
(id, params, seed) so a manifest reproduces its mixture exactly.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .audio import SAMPLE_RATE, Waveform, mix_sources, write_wav
from .conditioners import ConditionInputs, synth_visual_features
from .numerics import Rng

log = logging.getLogger(__name__)

SCHEMA = "omnisonic.manifest/1"
SPEECH_BLOCKLIST = ("speech", "voice", "say", "talk", "speak")
FULL_BENCH_COUNTS = (300, 401, 302)
DESK_BENCH_COUNTS = (12, 16, 12)
SNR_RANGE = (-5.0, 20.0)

# scenario id -> (on-screen kind, off-screen kinds); 0 is the speech-only stage-1 setup
SCENARIOS = {
    0: ("speech", ()),
    1: ("env", ("speech",)),
    2: ("speech", ("env",)),
    3: ("env", ("env", "speech")),
}

ENV_CAPTIONS = {
    "dog": ["a dog barking", "dogs bark and growl", "a small dog yapping"],
    "rain": ["rain falling on a roof", "heavy rain pouring", "steady rainfall"],
    "bell": ["a church bell ringing", "bells chiming", "a bell tolls"],
    "engine": ["an engine humming", "a truck engine idling", "a motor running"],
    "birds": ["birds chirping", "birds chirp in the trees", "a bird tweeting"],
    "wind": ["wind blowing", "strong wind gusts", "a gentle breeze"],
    "waves": ["waves crashing on the shore", "the sea breeze raising waves", "ocean surf"],
    "clock": ["a clock ticking", "a ticking wall clock", "clock ticks steadily"],
    "gunshot": ["the sound of machine gun shooting", "gunfire bursts", "rapid gunshots"],
    "siren": ["a siren wailing", "an ambulance siren", "a police siren passing"],
    "drum": ["the rhythmic beat of a bongo", "drums playing", "a steady drum beat"],
}
# present in the raw catalogue to exercise the keyword filter
BLOCKED_CAPTIONS = ["a man says hello", "a woman speaking with a soft voice", "people talk in a crowd",
                    "speech from a loudspeaker"]

WORDS = ("hello there how are you today the weather is nice we should go now please come "
         "here look at this thanks for joining me lets dive into your latest project and "
         "discuss next steps this ocean is a force wild untamed might birds chirp morning "
         "coffee time for lunch open the door good night see you soon").split()

VOWEL_FORMANTS = {
    "a": (730, 1090, 2440), "e": (530, 1840, 2480), "i": (390, 1990, 2550),
    "o": (570, 840, 2410), "u": (440, 1020, 2240), "y": (300, 2200, 2900),
}
FRICATIVES = set("fhsxzcjq")


def filter_env_captions(captions, blocklist=SPEECH_BLOCKLIST):
    """Drop captions containing any blocklisted keyword (case-insensitive substring).

    Returns (kept, removed).
    """
    kept, removed = [], []
    for c in captions:
        low = c.lower()
        (removed if any(k in low for k in blocklist) else kept).append(c)
    return kept, removed


# -- recipes ---------------------------------------------------------------------

@dataclass(frozen=True)
class EnvRecipe:
    id: str
    label: str
    caption: str
    seed: int
    base_hz: float
    rate_hz: float


@dataclass(frozen=True)
class SpeechRecipe:
    id: str
    transcription: str
    seed: int
    f0: float
    char_sec: float


def _env_signal(r: EnvRecipe, n: int, rate: int) -> np.ndarray:
    g = Rng(r.seed, 0xE5).gen
    t = np.arange(n) / rate
    noise = g.standard_normal(n)
    f, pr = r.base_hz, r.rate_hz
    phase = g.random()

    def pulses(period, width):
        return np.exp(-((((t + phase * period) % period) / width) ** 2))

    if r.label == "dog":
        env = pulses(1.0 / pr, 0.06)
        x = sum(np.sin(2 * np.pi * k * f * t) / k for k in range(1, 5)) * env
    elif r.label == "rain":
        x = kernels.resonator(noise, f, 0.8 * f, rate) * (1 + 0.3 * np.sin(2 * np.pi * pr * t))
    elif r.label == "bell":
        env = np.exp(-((t + phase / pr) % (1.0 / pr)) * 3.0)
        x = (np.sin(2 * np.pi * f * t) + 0.6 * np.sin(2 * np.pi * 2.76 * f * t)
             + 0.3 * np.sin(2 * np.pi * 5.4 * f * t)) * env
    elif r.label == "engine":
        x = sum(np.sin(2 * np.pi * k * f * t + k) / k for k in range(1, 12)) * (1 + 0.2 * np.sin(2 * np.pi * pr * t))
    elif r.label == "birds":
        env = pulses(1.0 / pr, 0.04)
        x = np.sin(2 * np.pi * f * t + 40 * np.sin(2 * np.pi * 12 * t)) * env
    elif r.label == "wind":
        sweep = f * (1 + 0.4 * np.sin(2 * np.pi * pr * t + 6 * phase))
        x = kernels.resonator(noise, sweep, 0.3 * f, rate)
    elif r.label == "waves":
        swell = 0.5 + 0.5 * np.sin(2 * np.pi * pr * t + 6 * phase) ** 2
        x = kernels.resonator(noise, f, 1.5 * f, rate) * swell
    elif r.label == "clock":
        x = kernels.resonator(noise * pulses(1.0 / pr, 0.004), f, 200.0, rate)
    elif r.label == "gunshot":
        x = kernels.resonator(noise * pulses(1.0 / pr, 0.02), f, 0.6 * f, rate)
    elif r.label == "siren":
        inst = f * (1 + 0.35 * np.sin(2 * np.pi * pr * t))
        x = np.sin(2 * np.pi * np.cumsum(inst) / rate)
    elif r.label == "drum":
        env = np.exp(-((t + phase / pr) % (1.0 / pr)) * 18.0)
        x = np.sin(2 * np.pi * f * t) * env + 0.2 * noise * env
    else:
        raise ValueError(f"unknown environmental label {r.label!r}")
    x = np.asarray(x, dtype=np.float64)
    return 0.1 * x / max(np.sqrt(np.mean(x**2)), 1e-12)


def _speech_signal(r: SpeechRecipe, n: int, rate: int) -> np.ndarray:
    """Formant-style speech: per-character targets, pulse/noise excitation."""
    g = Rng(r.seed, 0x5B).gen
    per = max(1, int(round(r.char_sec * rate)))
    text = r.transcription.lower()
    f1 = np.full(n, 500.0)
    f2 = np.full(n, 1500.0)
    f3 = np.full(n, 2500.0)
    voiced = np.zeros(n)
    unvoiced = np.zeros(n)
    for i, ch in enumerate(text):
        s, e = i * per, min((i + 1) * per, n)
        if s >= n:
            break
        ramp = np.sin(np.pi * (np.arange(e - s) + 0.5) / per)
        if ch in VOWEL_FORMANTS:
            a, b, c = VOWEL_FORMANTS[ch]
            f1[s:e], f2[s:e], f3[s:e] = a, b, c
            voiced[s:e] = ramp
        elif ch.isalpha():
            code = ord(ch) - ord("a")
            f1[s:e], f2[s:e], f3[s:e] = 300 + 15 * code, 1200 + 60 * code, 2600 + 40 * code
            if ch in FRICATIVES:
                unvoiced[s:e] = ramp
            else:
                voiced[s:e] = 0.6 * ramp
    k = np.ones(int(0.015 * rate)) / int(0.015 * rate)  # smooth formant transitions
    f1, f2, f3 = (np.convolve(f, k, mode="same") for f in (f1, f2, f3))
    t = np.arange(n) / rate
    f0 = r.f0 * (1 + 0.05 * np.sin(2 * np.pi * 3.0 * t + g.random() * 6))
    ph = np.cumsum(f0) / rate
    pulse = np.maximum(0.0, np.cos(2 * np.pi * ph)) ** 8
    exc = voiced * (pulse - pulse.mean()) * 4.0 + unvoiced * g.standard_normal(n) * 0.5
    x = (kernels.resonator(exc, f1, 80.0, rate) + 0.7 * kernels.resonator(exc, f2, 120.0, rate)
         + 0.4 * kernels.resonator(exc, f3, 160.0, rate))
    rms = np.sqrt(np.mean(x**2))
    return 0.1 * x / max(rms, 1e-12)


@dataclass
class SourceLibrary:
    env: list[EnvRecipe]
    speech: list[SpeechRecipe]
    rate: int = SAMPLE_RATE
    removed_captions: list[str] = field(default_factory=list)

    @classmethod
    def synthetic(cls, n_env: int = 120, n_speech: int = 120, seed: int = 0,
                  max_chars: int = 40, blocklist=SPEECH_BLOCKLIST) -> "SourceLibrary":
        rng = Rng(seed, 0x11B)
        labels = sorted(ENV_CAPTIONS)
        raw = []
        for i in range(n_env):
            label = labels[i % len(labels)]
            caps = ENV_CAPTIONS[label]
            raw.append((label, caps[int(rng.integers(len(caps)))]))
        raw += [("speech-like", c) for c in BLOCKED_CAPTIONS]
        kept, removed = filter_env_captions([c for _, c in raw], blocklist)
        kept_set = set(kept)
        base = {"dog": 450, "rain": 2500, "bell": 600, "engine": 60, "birds": 3500, "wind": 500,
                "waves": 800, "clock": 3000, "gunshot": 1200, "siren": 900, "drum": 110}
        env = []
        for i, (label, cap) in enumerate(raw):
            if cap not in kept_set or label not in base:
                continue
            env.append(EnvRecipe(
                id=f"env-{i:05d}", label=label, caption=cap, seed=int(rng.integers(2**62)),
                base_hz=float(base[label] * rng.uniform(0.8, 1.25)), rate_hz=float(rng.uniform(1.5, 4.0)),
            ))
        speech = []
        for i in range(n_speech):
            words = []
            n_words = int(rng.integers(2, 5))
            for _ in range(n_words):
                words.append(WORDS[int(rng.integers(len(WORDS)))])
            text = " ".join(words)[:max_chars].strip()
            speech.append(SpeechRecipe(
                id=f"sp-{i:05d}", transcription=text, seed=int(rng.integers(2**62)),
                f0=float(rng.uniform(100, 220)), char_sec=float(rng.uniform(0.06, 0.08)),
            ))
        return cls(env, speech, removed_captions=removed)

    def split(self, every: int = 5) -> tuple["SourceLibrary", "SourceLibrary"]:
        """(train, held-out) split: every ``every``-th recipe is held out."""
        tr_e = [r for i, r in enumerate(self.env) if i % every]
        ho_e = [r for i, r in enumerate(self.env) if i % every == 0]
        tr_s = [r for i, r in enumerate(self.speech) if i % every]
        ho_s = [r for i, r in enumerate(self.speech) if i % every == 0]
        return (SourceLibrary(tr_e, tr_s, self.rate), SourceLibrary(ho_e, ho_s, self.rate))

    def recipe(self, rid: str):
        for r in self.env if rid.startswith("env") else self.speech:
            if r.id == rid:
                return r
        raise KeyError(rid)

    def render(self, rid: str, n: int) -> Waveform:
        """Pulse-driven textures repeat at 1.5-4 Hz, so clips shorter than 0.67 s may be silent."""
        r = self.recipe(rid)
        fn = _env_signal if isinstance(r, EnvRecipe) else _speech_signal
        return Waveform(fn(r, n, self.rate), self.rate)


# -- samples ---------------------------------------------------------------------

@dataclass
class SampleManifest:
    scenario: int
    seed: int
    on_source: dict
    off_sources: list[dict]
    on_env_caption: str
    off_env_caption: str
    transcription: str
    visual_label: str
    n_visual: int
    scale: float = 1.0
    id: str = ""
    schema: str = SCHEMA

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "SampleManifest":
        return cls(**d)


def _pick(pool, rng: Rng, exclude=()):
    choices = [r for r in pool if r.id not in exclude]
    if not choices:
        raise ValueError("source library has no recipe left of the required kind")
    return choices[int(rng.integers(len(choices)))]


def build_training_sample(scenario: int, library: SourceLibrary, rng: Rng, length: int,
                          n_visual: int = 8, d_vis: int = 16, snr_range=SNR_RANGE,
                          on_recipe=None):
    """Draw one scenario instance -> (mixture, ConditionInputs, SampleManifest)."""
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario}")
    on_kind, off_kinds = SCENARIOS[scenario]
    for kind in (on_kind, *off_kinds):
        if not (library.env if kind == "env" else library.speech):
            raise ValueError(f"library has no {kind} sources")
    pools = {"env": library.env, "speech": library.speech}
    on = on_recipe or _pick(pools[on_kind], rng)
    used = {on.id}
    offs = []
    for kind in off_kinds:
        r = _pick(pools[kind], rng, exclude=used)
        used.add(r.id)
        offs.append((kind, r, float(rng.uniform(*snr_range))))
    primary = library.render(on.id, length)
    mix = mix_sources(primary, [(library.render(r.id, length), snr) for _, r, snr in offs])
    on_cap = on.caption if on_kind == "env" else ""
    off_env = [r for k, r, _ in offs if k == "env"]
    speech = on if on_kind == "speech" else next((r for k, r, _ in offs if k == "speech"), None)
    visual_seed = int(rng.integers(2**62))
    man = SampleManifest(
        scenario=scenario, seed=visual_seed,
        on_source={"kind": on_kind, "recipe": on.id},
        off_sources=[{"kind": k, "recipe": r.id, "snr_db": snr, "gain": g}
                     for (k, r, snr), g in zip(offs, mix.gains)],
        on_env_caption=on_cap,
        off_env_caption=off_env[0].caption if off_env else "",
        transcription=speech.transcription if speech else "",
        visual_label=on.label if on_kind == "env" else "speech",
        n_visual=n_visual, scale=mix.scale,
    )
    visual = synth_visual_features(visual_seed, n_visual, man.visual_label, d_vis)
    cond = ConditionInputs(man.on_env_caption, man.off_env_caption, man.transcription, visual)
    return mix.wave, cond, man


def reconstruct_mixture(man: SampleManifest, library: SourceLibrary, length: int) -> Waveform:
    out = library.render(man.on_source["recipe"], length).samples.copy()
    for src in man.off_sources:
        out = out + src["gain"] * library.render(src["recipe"], length).samples
    return Waveform(out * man.scale, library.rate)


def condition_inputs(man: SampleManifest, d_vis: int = 16) -> ConditionInputs:
    visual = synth_visual_features(man.seed, man.n_visual, man.visual_label, d_vis)
    return ConditionInputs(man.on_env_caption, man.off_env_caption, man.transcription, visual)


def draw_scenario(rng: Rng, stage: int) -> int:
    return 0 if stage == 1 else int(rng.integers(1, 4))


# -- benchmark -----------------------------------------------------------------

def bench_manifests(library: SourceLibrary, counts=DESK_BENCH_COUNTS, seed: int = 0, length: int = 40960,
                    n_visual: int = 8, d_vis: int = 16, render: bool = True, snr_range=SNR_RANGE):
    """Deterministic benchmark items; on-screen sources are never reused.

    With ``render=False`` only manifests are produced (no audio synthesis).
    """
    need_env = counts[0] + counts[2]
    if need_env > len(library.env) or counts[1] > len(library.speech):
        raise ValueError(
            f"library too small for disjoint on-screen draws: need {need_env} env / {counts[1]} speech, "
            f"have {len(library.env)} / {len(library.speech)}"
        )
    order_rng = Rng(seed, 0xBE)
    env_order = [library.env[i] for i in order_rng.gen.permutation(len(library.env))]
    sp_order = [library.speech[i] for i in order_rng.gen.permutation(len(library.speech))]
    items = []
    k = 0
    for scen, count in zip((1, 2, 3), counts):
        for _ in range(count):
            rng = Rng(seed, 0xBE5, k)
            on = sp_order.pop(0) if scen == 2 else env_order.pop(0)
            if render:
                wave, _, man = build_training_sample(scen, library, rng, length, n_visual, d_vis, snr_range,
                                                     on_recipe=on)
            else:
                wave, man = None, _manifest_only(scen, library, rng, n_visual, on, snr_range)
            man.id = f"s{scen}-{k:04d}"
            items.append((man, wave))
            k += 1
    return items


def _manifest_only(scen, library, rng, n_visual, on, snr_range=SNR_RANGE) -> SampleManifest:
    on_kind, off_kinds = SCENARIOS[scen]
    pools = {"env": library.env, "speech": library.speech}
    used, offs = {on.id}, []
    for kind in off_kinds:
        r = _pick(pools[kind], rng, exclude=used)
        used.add(r.id)
        offs.append({"kind": kind, "recipe": r.id, "snr_db": float(rng.uniform(*snr_range)), "gain": None})
    speech = on if on_kind == "speech" else next(
        (library.recipe(o["recipe"]) for o in offs if o["kind"] == "speech"), None)
    off_env = [library.recipe(o["recipe"]) for o in offs if o["kind"] == "env"]
    return SampleManifest(
        scenario=scen, seed=int(rng.integers(2**62)), on_source={"kind": on_kind, "recipe": on.id},
        off_sources=offs, on_env_caption=on.caption if on_kind == "env" else "",
        off_env_caption=off_env[0].caption if off_env else "",
        transcription=speech.transcription if speech else "",
        visual_label=on.label if on_kind == "env" else "speech", n_visual=n_visual,
    )


def write_manifest(path, manifests: list[SampleManifest]) -> None:
    doc = {"schema": SCHEMA, "items": [m.to_json() for m in manifests]}
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def read_manifest(path) -> list[SampleManifest]:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema") != SCHEMA:
        raise ValueError(f"{path}: unsupported manifest schema {doc.get('schema')!r}")
    return [SampleManifest.from_json(d) for d in doc["items"]]


def build_bench(library: SourceLibrary, out_dir, counts=DESK_BENCH_COUNTS, seed: int = 0,
                length: int = 40960, n_visual: int = 8, d_vis: int = 16, write_audio: bool = True,
                snr_range=SNR_RANGE):
    """Write ``manifest.json``, ``wav/<id>.wav`` mixtures and ``ref/<id>_<role>.wav`` stems.

    Stems carry the same gains and normalisation as they have inside the mixture.
    """
    out = Path(out_dir)
    items = bench_manifests(library, counts, seed, length, n_visual, d_vis, write_audio, snr_range)
    out.mkdir(parents=True, exist_ok=True)
    if write_audio:
        for man, wave in items:
            write_wav(out / "wav" / f"{man.id}.wav", wave)
            on = library.render(man.on_source["recipe"], length)
            write_wav(out / "ref" / f"{man.id}_on.wav", Waveform(on.samples * man.scale, library.rate))
            for j, src in enumerate(man.off_sources):
                stem = library.render(src["recipe"], length)
                write_wav(out / "ref" / f"{man.id}_off{j}_{src['kind']}.wav",
                          Waveform(stem.samples * src["gain"] * man.scale, library.rate))
    write_manifest(out / "manifest.json", [m for m, _ in items])
    return [m for m, _ in items]
