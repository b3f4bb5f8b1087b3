"""Glue between audio, codec, conditioners, model and flow: datasets,
checkpoint bundles and end-to-end generation."""
from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .audio import StftConfig, Waveform, fix_length, griffin_lim, mel_spectrogram, read_wav, write_wav
from . import metrics
from .codec import LatentCodec
from .conditioners import ConditionInputs, EnvCaptionEncoder, collate_conditions
from .flow import CfgScales, FlowDataset, TrainConfig, euler_sample, train, zero_model_loss
from .numerics import Rng, read_ostn, write_ostn
from .scenarios import (SNR_RANGE, SourceLibrary, build_training_sample, condition_inputs, draw_scenario,
                        read_manifest, write_manifest)
from .triattn import ModelConfig, TriAttnDiT, build_model

log = logging.getLogger(__name__)


@dataclass
class Setup:
    """Everything fixed before training: analysis, codec and model shapes."""

    stft: StftConfig = field(default_factory=lambda: StftConfig(n_mels=32))
    clip_frames: int = 256
    codec: LatentCodec = field(default_factory=lambda: LatentCodec(patch=(4, 8)))
    model: ModelConfig = None
    env_seed: int = 0
    library_seed: int = 0
    n_env: int = 120
    n_speech: int = 120

    def __post_init__(self):
        if self.model is None:
            c, t, f = self.latent_shape
            self.model = ModelConfig(latent_channels=c, latent_t=t, latent_f=f)
        if (self.model.latent_channels, self.model.latent_t, self.model.latent_f) != self.latent_shape:
            raise ValueError("model latent dims disagree with the codec/STFT configuration")

    @property
    def length(self) -> int:
        return self.clip_frames * self.stft.hop

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return self.codec.latent_shape((self.clip_frames, self.stft.n_mels))

    def env_encoder(self) -> EnvCaptionEncoder:
        return EnvCaptionEncoder(self.model.d_env, seed=self.env_seed)

    def library(self) -> SourceLibrary:
        return SourceLibrary.synthetic(self.n_env, self.n_speech, self.library_seed)

    def to_dict(self) -> dict:
        return {
            "stft": asdict(self.stft), "clip_frames": self.clip_frames, "codec": self.codec.to_dict(),
            "model": asdict(self.model), "env_seed": self.env_seed, "library_seed": self.library_seed,
            "n_env": self.n_env, "n_speech": self.n_speech,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Setup":
        return cls(stft=StftConfig(**d["stft"]), clip_frames=d["clip_frames"],
                   codec=LatentCodec.from_dict(d["codec"]), model=ModelConfig(**d["model"]),
                   env_seed=d["env_seed"], library_seed=d["library_seed"], n_env=d["n_env"],
                   n_speech=d["n_speech"])

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def calibrate_codec(setup: Setup, n: int = 48, seed: int = 0xCA1) -> LatentCodec:
    """Freeze codec standardisation from a fixed synthetic calibration corpus."""
    train_lib, _ = setup.library().split()
    mels = []
    for k in range(n):
        rng = Rng(seed, k)
        wave, _, _ = build_training_sample(k % 4, train_lib, rng, setup.length, setup.model.n_visual,
                                           setup.model.d_vis)
        mels.append(mel_spectrogram(wave, setup.stft))
    return setup.codec.calibrate(mels)


def make_dataset(setup: Setup, library: SourceLibrary, n: int, stage: int, seed: int,
                 scenario: int | None = None, snr_range=SNR_RANGE) -> FlowDataset:
    """Render ``n`` samples (stage 1: speech only; stage 2: random scenario)."""
    env = setup.env_encoder()
    latents, conds, mans = [], [], []
    for k in range(n):
        rng = Rng(seed, 0xDA7, stage, k)
        scen = scenario if scenario is not None else draw_scenario(rng, stage)
        wave, cond, man = build_training_sample(scen, library, rng, setup.length, setup.model.n_visual,
                                                setup.model.d_vis, snr_range)
        man.id = f"st{stage}-{k:05d}"
        latents.append(setup.codec.encode(mel_spectrogram(wave, setup.stft)))
        conds.append(cond)
        mans.append(man)
    cs = collate_conditions(conds, env, setup.model.max_chars)
    return FlowDataset(torch.from_numpy(np.stack(latents)), cs, mans)


# -- checkpoints -------------------------------------------------------------------

def save_checkpoint(path, model: TriAttnDiT, setup: Setup, meta: dict | None = None) -> str:
    """Directory bundle: manifest.json + params/<name>.ostn. Returns content hash."""
    out = Path(path)
    (out / "params").mkdir(parents=True, exist_ok=True)
    params = []
    for name, p in sorted(model.state_dict().items()):
        fname = f"{name}.ostn"
        write_ostn(out / "params" / fname, p.detach().float())
        params.append({"name": name, "shape": list(p.shape), "file": f"params/{fname}"})
    doc = {"format": "omnisonic.checkpoint/1", "setup": setup.to_dict(),
           "config_hash": setup.config_hash(), "params": params, "meta": meta or {}}
    (out / "manifest.json").write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")
    return checkpoint_hash(out)


def checkpoint_hash(path) -> str:
    root = Path(path)
    h = hashlib.sha256()
    doc = json.loads((root / "manifest.json").read_text())
    for p in doc["params"]:
        h.update(p["name"].encode())
        h.update((root / p["file"]).read_bytes())
    h.update(json.dumps(doc["setup"], sort_keys=True).encode())
    return h.hexdigest()


class CheckpointMismatch(ValueError):
    pass


def load_checkpoint(path, expect_hash: str | None = None) -> tuple[TriAttnDiT, Setup, dict]:
    root = Path(path)
    doc = json.loads((root / "manifest.json").read_text())
    try:
        setup = Setup.from_dict(doc["setup"])
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointMismatch(f"invalid setup in checkpoint: {e}") from None
    if doc.get("config_hash") != setup.config_hash():
        raise CheckpointMismatch("checkpoint config hash does not match its stored setup")
    if expect_hash is not None and doc["config_hash"] != expect_hash:
        raise CheckpointMismatch(f"config hash {doc['config_hash']} != expected {expect_hash}")
    model = build_model(setup.model)
    state = model.state_dict()
    for p in doc["params"]:
        if p["name"] not in state:
            raise CheckpointMismatch(f"unexpected parameter {p['name']}")
        arr = read_ostn(root / p["file"])
        if list(arr.shape) != list(state[p["name"]].shape):
            raise CheckpointMismatch(f"shape mismatch for {p['name']}")
        state[p["name"]] = torch.from_numpy(arr)
    model.load_state_dict(state)
    model.eval()
    return model, setup, doc.get("meta", {})


# -- generation --------------------------------------------------------------------

def entry_noise(setup: Setup, seed: int) -> torch.Tensor:
    """Prior sample for one clip; equals euler_sample's own draw for a batch of one."""
    return Rng(seed, 0x5A4).randn_tensor((1, *setup.latent_shape))[0]


def generate(model: TriAttnDiT, setup: Setup, conds: list[ConditionInputs], scales: CfgScales,
             steps: int = 50, seeds: list[int] | None = None, gl_iters: int = 32, batch: int = 16,
             workers: int = 1) -> list[tuple[Waveform, np.ndarray]]:
    """Conditions -> guided Euler sampling -> codec decode -> Griffin-Lim -> fixed length.

    Each clip's prior noise depends only on its own seed, so outputs do not
    change with batching or worker count.
    """
    seeds = list(range(len(conds))) if seeds is None else list(seeds)
    if len(seeds) != len(conds):
        raise ValueError("one seed per condition entry")
    env = setup.env_encoder()
    mels = []
    for s in range(0, len(conds), batch):
        cs = collate_conditions(conds[s:s + batch], env, setup.model.max_chars)
        x0 = torch.stack([entry_noise(setup, k) for k in seeds[s:s + batch]])
        lat = euler_sample(model, cs, scales, steps, x0=x0)
        mels += [setup.codec.decode(z) for z in lat.numpy()]

    def vocode(args):
        mel, k = args
        return fix_length(griffin_lim(mel, setup.stft, gl_iters, length=setup.length, seed=k), setup.length)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        waves = list(pool.map(vocode, zip(mels, seeds)))
    return list(zip(waves, mels))


# -- dataset directories -------------------------------------------------------------

def write_mix_dir(setup: Setup, library: SourceLibrary, n: int, stage: int, seed: int, out_dir,
                  snr_range=SNR_RANGE) -> list:
    """Training mixtures as ``manifest.json`` + ``wav/<id>.wav``."""
    out = Path(out_dir)
    mans = []
    for k in range(n):
        rng = Rng(seed, 0xDA7, stage, k)
        wave, _, man = build_training_sample(draw_scenario(rng, stage), library, rng, setup.length,
                                             setup.model.n_visual, setup.model.d_vis, snr_range)
        man.id = f"st{stage}-{k:05d}"
        write_wav(out / "wav" / f"{man.id}.wav", wave)
        mans.append(man)
    write_manifest(out / "manifest.json", mans)
    return mans


def dataset_from_dir(setup: Setup, data_dir) -> FlowDataset:
    """Load a mixture directory written by :func:`write_mix_dir` or the bench builder."""
    root = Path(data_dir)
    if not (root / "manifest.json").is_file():
        raise FileNotFoundError(f"no manifest.json in {root}")
    mans = read_manifest(root / "manifest.json")
    if not mans:
        raise ValueError(f"{root} holds no samples")
    latents, conds = [], []
    for man in mans:
        wave = fix_length(read_wav(root / "wav" / f"{man.id}.wav"), setup.length)
        latents.append(setup.codec.encode(mel_spectrogram(wave, setup.stft)))
        conds.append(condition_inputs(man, setup.model.d_vis))
    cs = collate_conditions(conds, setup.env_encoder(), setup.model.max_chars)
    return FlowDataset(torch.from_numpy(np.stack(latents)), cs, mans)


# -- toy two-stage experiment --------------------------------------------------------

@dataclass
class ToyData:
    stage1: FlowDataset
    stage2: FlowDataset
    val1: FlowDataset
    val2: FlowDataset


def toy_data(setup: Setup, n_train: int = 192, n_val: int = 48, seed: int = 0,
             snr_range=SNR_RANGE) -> ToyData:
    """Speech-only and mixed-scenario sets from the training split of the library."""
    train_lib, _ = setup.library().split()

    def ds(n, stage, s):
        return make_dataset(setup, train_lib, n, stage, s, snr_range=snr_range)

    return ToyData(ds(n_train, 1, seed), ds(n_train, 2, seed), ds(n_val, 1, seed + 1), ds(n_val, 2, seed + 1))


@dataclass
class ToyRun:
    seed: int
    moe_gating: bool
    baseline: float
    stage1_val: float
    stage2_val: float
    seconds: float
    model: TriAttnDiT = field(repr=False, default=None)

    @property
    def reduction(self) -> float:
        return 1.0 - self.stage2_val / self.baseline


DESK_TRAIN = TrainConfig(lr=2e-3, batch_size=16, val_every=100)


def toy_run(setup: Setup, data: ToyData, seed: int, moe_gating: bool = True, steps1: int = 300,
            steps2: int = 700, base: TrainConfig = DESK_TRAIN, log_csv: str | None = None) -> ToyRun:
    """Stage 1 on speech only, then stage 2 on mixed scenarios from the stage-1 weights.

    ``moe_gating=False`` freezes the fusion weights at 1/3 for both stages.
    """
    t0 = time.time()
    model = build_model(replace(setup.model, moe_gating=moe_gating), seed=seed)
    common = replace(base, seed=seed, log_csv=log_csv)
    r1 = train(1, model, data.stage1, replace(common, steps=steps1), val=data.val1)
    r2 = train(2, model, data.stage2, replace(common, steps=steps2), val=data.val2)
    return ToyRun(seed, moe_gating, zero_model_loss(data.val2), r1.final_val, r2.final_val,
                  time.time() - t0, model)


# -- evaluation over directories ------------------------------------------------------

class EvalInputError(ValueError):
    pass


def audio_scores(gen_mels: list[np.ndarray], ref_mels: list[np.ndarray]) -> dict[str, float]:
    """Distribution and paired scores between generated and reference log-mels."""
    if len(gen_mels) != len(ref_mels):
        raise EvalInputError(f"{len(gen_mels)} generated clips vs {len(ref_mels)} references")
    if len(gen_mels) < 2:
        raise EvalInputError("need at least two clips per side")
    ge = np.stack([metrics.clip_embedding(m) for m in gen_mels])
    re = np.stack([metrics.clip_embedding(m) for m in ref_mels])
    band_err = []
    for g, r in zip(gen_mels, ref_mels):
        ref_tok = metrics.band_tokens(r)
        if ref_tok:
            band_err.append(metrics.edit_error_rate(ref_tok, metrics.band_tokens(g)))
    return {
        "fad": metrics.frechet_distance(re, ge),
        "mkl": metrics.mean_kl([metrics.band_posterior(m) for m in ref_mels],
                               [metrics.band_posterior(m) for m in gen_mels]),
        "band_error": float(np.mean(band_err)) if band_err else float("nan"),
        "alignment": metrics.cosine_alignment_score(ge, re),
    }


def _load_eval_dir(root: Path, stft: StftConfig):
    if not (root / "manifest.json").is_file():
        raise EvalInputError(f"no manifest.json in {root}")
    mans = read_manifest(root / "manifest.json")
    mels = {}
    for man in mans:
        path = root / "wav" / f"{man.id}.wav"
        if not path.is_file():
            raise EvalInputError(f"missing audio {path}")
        mels[man.id] = mel_spectrogram(read_wav(path), stft)
    return mans, mels


def evaluate_dirs(gen_dir, ref_dir, stft: StftConfig) -> list[tuple[str, float, int]]:
    """(metric, value, n) rows comparing two directories with matching manifest ids.

    Transcript error rates need ``transcripts.json`` ({id: text}) in ``gen_dir``,
    typically written by an external recogniser.
    """
    gen_root, ref_root = Path(gen_dir), Path(ref_dir)
    gen_mans, gen_mels = _load_eval_dir(gen_root, stft)
    ref_mans, ref_mels = _load_eval_dir(ref_root, stft)
    ids = [m.id for m in ref_mans]
    if sorted(ids) != sorted(m.id for m in gen_mans):
        raise EvalInputError(f"entry ids differ: {len(gen_mans)} generated vs {len(ref_mans)} references")
    scores = audio_scores([gen_mels[i] for i in ids], [ref_mels[i] for i in ids])
    rows = [(k, v, len(ids)) for k, v in scores.items()]
    hyp_path = gen_root / "transcripts.json"
    if hyp_path.is_file():
        hyps = json.loads(hyp_path.read_text())
        pairs = [(m.transcription, hyps[m.id]) for m in ref_mans if m.transcription.strip() and m.id in hyps]
        for name in ("wer", "cer", "per"):
            tok = metrics.TOKENIZERS[name]
            vals = [metrics.edit_error_rate(tok(r), tok(h)) for r, h in pairs if tok(r)]
            rows.append((name, float(np.mean(vals)) if vals else float("nan"), len(vals)))
    return rows
