"""``omnisonic`` command line: train, sample, mix, bench, eval, gradcheck, sweep.

Exit codes: 0 success, 1 failed check, 2 config/data error, 3 checkpoint
mismatch, 4 evaluation input error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import torch

from . import __version__
from .audio import spectrogram_csv, spectrogram_pgm, write_wav
from .config import ConfigError, RunConfig, resolve_config
from .flow import CfgScales, TrainConfig, train
from .pipeline import (CheckpointMismatch, EvalInputError, Setup, audio_scores, checkpoint_hash,
                       dataset_from_dir, evaluate_dirs, generate, load_checkpoint, make_dataset,
                       save_checkpoint, write_mix_dir)
from .scenarios import build_bench, condition_inputs, read_manifest, write_manifest
from .triattn import build_model

log = logging.getLogger("omnisonic")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_CHECKPOINT, EXIT_EVAL = 0, 1, 2, 3, 4


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def worker_count() -> int:
    raw = os.environ.get("OMNISONIC_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise CliError(EXIT_CONFIG, f"OMNISONIC_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise CliError(EXIT_CONFIG, "OMNISONIC_THREADS must be >= 1")
    return n


def _config(args) -> RunConfig:
    rc = resolve_config(args.config)
    if getattr(args, "seed", None) is not None:
        rc.seed = args.seed
    return rc


def _out(args, rc: RunConfig) -> Path:
    return Path(args.out or rc.out)


def _scales(args, rc: RunConfig, scenario: int | None = None) -> CfgScales:
    if args.scales and args.preset:
        raise CliError(EXIT_CONFIG, "use either --preset or --scales, not both")
    if args.scales:
        try:
            return CfgScales.parse(args.scales)
        except ValueError as e:
            raise CliError(EXIT_CONFIG, str(e)) from None
    name = args.preset or (f"s{scenario}" if scenario in (1, 2, 3) else None)
    if name is None:
        return CfgScales()
    if name not in rc.presets:
        raise CliError(EXIT_CONFIG, f"unknown preset {name!r}")
    return rc.presets[name]


def _manifest_path(arg: str) -> Path:
    p = Path(arg)
    p = p / "manifest.json" if p.is_dir() else p
    if not p.is_file():
        raise CliError(EXIT_CONFIG, f"manifest not found: {arg}")
    return p


def _check_setup(setup: Setup, rc_setup: Setup | None):
    if rc_setup is not None and rc_setup.config_hash() != setup.config_hash():
        raise CliError(EXIT_CHECKPOINT,
                       f"checkpoint config hash {setup.config_hash()} does not match --config "
                       f"({rc_setup.config_hash()})")


def _load(path, rc_setup: Setup | None = None):
    if not (Path(path) / "manifest.json").is_file():
        raise CliError(EXIT_CONFIG, f"checkpoint not found: {path}")
    try:
        model, setup, meta = load_checkpoint(path)
    except CheckpointMismatch as e:
        raise CliError(EXIT_CHECKPOINT, str(e)) from None
    _check_setup(setup, rc_setup)
    return model, setup, meta


# -- commands --------------------------------------------------------------------

def cmd_train(args) -> int:
    rc = _config(args)
    out = _out(args, rc)
    setup = rc.setup()
    steps = args.steps or (rc.steps_stage1 if args.stage == 1 else rc.steps_stage2)
    if args.stage == 2 and not args.cold_start:
        init = Path(args.init) if args.init else out / "stage1"
        model, ck_setup, _ = _load(init, setup)
        log.info("stage 2 continues from %s", init)
    else:
        model = build_model(setup.model, seed=rc.seed)
    train_lib, _ = setup.library().split()
    if args.data:
        if not Path(args.data).is_dir():
            raise CliError(EXIT_CONFIG, f"data directory not found: {args.data}")
        data = dataset_from_dir(setup, args.data)
        if args.stage == 1:
            keep = [i for i, m in enumerate(data.manifests) if m.scenario == 0]
            if not keep:
                raise CliError(EXIT_CONFIG, "stage 1 needs speech-only samples in the data directory")
            data = type(data)(data.latents[keep], data.cond.select(keep), [data.manifests[i] for i in keep])
    else:
        data = make_dataset(setup, train_lib, rc.data.n_train, args.stage, rc.seed, snr_range=rc.snr_range)
    val = make_dataset(setup, train_lib, rc.data.n_val, args.stage, rc.seed + 1, snr_range=rc.snr_range)
    out.mkdir(parents=True, exist_ok=True)
    cfg = TrainConfig(**{**rc.train.__dict__, "steps": steps, "seed": rc.seed,
                         "log_csv": str(out / "loss.csv")})
    ckpt_dir = out / f"stage{args.stage}"

    def on_ckpt(m, step):
        save_checkpoint(out / f"stage{args.stage}-step{step:06d}", m, setup, {"stage": args.stage, "step": step})

    res = train(args.stage, model, data, cfg, val=val, on_checkpoint=on_ckpt)
    meta = {"stage": args.stage, "steps": steps, "seed": rc.seed, "final_loss": res.losses[-1],
            "final_val": res.final_val if res.val_losses else None, "config": rc.source}
    digest = save_checkpoint(ckpt_dir, model, setup, meta)
    print(json.dumps({"checkpoint": str(ckpt_dir), "hash": digest, "config_hash": setup.config_hash(),
                      **meta}, sort_keys=True))
    return EXIT_OK


def cmd_sample(args) -> int:
    rc = _config(args)
    model, setup, _ = _load(args.checkpoint, rc.setup() if args.config else None)
    mans = read_manifest(_manifest_path(args.manifest))
    if args.limit:
        mans = mans[: args.limit]
    out = _out(args, rc)
    steps = args.steps or rc.sample_steps
    groups: dict[CfgScales, list[int]] = {}
    for i, m in enumerate(mans):
        if m.n_visual != setup.model.n_visual:
            raise CliError(EXIT_CHECKPOINT, f"{m.id}: {m.n_visual} visual frames, checkpoint expects "
                                            f"{setup.model.n_visual}")
        groups.setdefault(_scales(args, rc, m.scenario), []).append(i)
    seeds = [rc.seed * 100003 + i for i in range(len(mans))]
    entries = [None] * len(mans)
    for scales, idx in groups.items():
        conds = [condition_inputs(mans[i], setup.model.d_vis) for i in idx]
        res = generate(model, setup, conds, scales, steps, [seeds[i] for i in idx], rc.gl_iters,
                       workers=worker_count())
        for i, (wave, mel) in zip(idx, res):
            m = mans[i]
            write_wav(out / "wav" / f"{m.id}.wav", wave)
            spectrogram_csv(out / "spec" / f"{m.id}.csv", mel)
            if args.pgm:
                spectrogram_pgm(out / "spec" / f"{m.id}.pgm", mel)
            entries[i] = {"id": m.id, "scenario": m.scenario, "seed": seeds[i], "scales": scales.as_tuple()}
    write_manifest(out / "manifest.json", mans)
    report = {"checkpoint": str(args.checkpoint), "checkpoint_hash": checkpoint_hash(args.checkpoint),
              "config_hash": setup.config_hash(), "steps": steps, "entries": entries}
    (out / "report.json").write_text(json.dumps(report, sort_keys=True, indent=1) + "\n")
    print(f"wrote {len(mans)} clips to {out}")
    return EXIT_OK


def cmd_mix(args) -> int:
    rc = _config(args)
    setup = rc.setup(calibrate=False)
    train_lib, _ = setup.library().split()
    n = args.n or rc.data.n_train
    out = _out(args, rc)
    mans = write_mix_dir(setup, train_lib, n, args.stage, rc.seed, out, rc.snr_range)
    print(f"wrote {len(mans)} stage-{args.stage} mixtures to {out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    rc = _config(args)
    setup = rc.setup(calibrate=False)
    _, held_out = setup.library().split()
    counts = rc.data.bench_counts
    if args.counts:
        counts = tuple(int(v) for v in args.counts.split(","))
        if len(counts) != 3:
            raise CliError(EXIT_CONFIG, "--counts takes three integers")
    out = _out(args, rc)
    try:
        mans = build_bench(held_out, out, counts, rc.seed, setup.length, setup.model.n_visual,
                           setup.model.d_vis, write_audio=not args.no_audio, snr_range=rc.snr_range)
    except ValueError as e:
        raise CliError(EXIT_CONFIG, str(e)) from None
    print(f"wrote {len(mans)} benchmark items {counts} to {out}")
    return EXIT_OK


def _write_rows(path: str | None, header, rows):
    fh = open(path, "w", newline="") if path else sys.stdout
    try:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    finally:
        if path:
            fh.close()


def cmd_eval(args) -> int:
    rc = _config(args)
    try:
        rows = evaluate_dirs(args.gen, args.ref, rc.stft)
    except EvalInputError as e:
        raise CliError(EXIT_EVAL, str(e)) from None
    _write_rows(args.out_csv, ["metric", "value", "n"], [(k, f"{v:.6f}", n) for k, v, n in rows])
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import report, run_all
    results = run_all(seed=args.seed or 0, corrupt=args.corrupt)
    print(report(results))
    ok = all(r.passed for r in results)
    print("gradcheck:", "PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_FAIL


def parse_grid(text: str) -> list[CfgScales]:
    points = [p for p in text.replace("\n", ";").split(";") if p.strip()]
    if not points:
        raise ValueError("empty grid")
    return [CfgScales.parse(p) for p in points]


def cmd_sweep(args) -> int:
    rc = _config(args)
    model, setup, _ = _load(args.checkpoint, rc.setup() if args.config else None)
    try:
        grid = parse_grid(Path(args.grid).read_text() if Path(args.grid).is_file() else args.grid)
    except ValueError as e:
        raise CliError(EXIT_CONFIG, f"bad --grid: {e}") from None
    bench = Path(args.bench)
    mans = read_manifest(_manifest_path(args.bench))
    if args.scenario:
        mans = [m for m in mans if m.scenario == args.scenario]
    if args.limit:
        mans = mans[: args.limit]
    from .audio import fix_length, mel_spectrogram, read_wav
    try:
        ref = [mel_spectrogram(fix_length(read_wav(bench / "wav" / f"{m.id}.wav"), setup.length), setup.stft)
               for m in mans]
    except FileNotFoundError as e:
        raise CliError(EXIT_EVAL, f"benchmark audio missing: {e}") from None
    conds = [condition_inputs(m, setup.model.d_vis) for m in mans]
    seeds = [rc.seed * 100003 + i for i in range(len(mans))]
    steps = args.steps or rc.sample_steps
    rows = []
    for scales in grid:
        res = generate(model, setup, conds, scales, steps, seeds, rc.gl_iters, workers=worker_count())
        try:
            sc = audio_scores([mel_spectrogram(w, setup.stft) for w, _ in res], ref)
        except EvalInputError as e:
            raise CliError(EXIT_EVAL, str(e)) from None
        rows.append((*scales.as_tuple(), sc["fad"], sc["alignment"], sc["band_error"]))
        log.info("sweep %s: %s", scales.as_tuple(), sc)
    _write_rows(args.out_csv, ["lambda_on", "lambda_off", "lambda_sp", "fad", "mean_alignment", "error_rate"],
                [tuple(f"{v:.6g}" for v in r) for r in rows])
    return EXIT_OK


# -- argument parsing -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="omnisonic", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"omnisonic {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", help="config file or built-in name (desk, full); default desk")
        sp.add_argument("--seed", type=int)
        if out:
            sp.add_argument("--out", help="output directory")

    def guidance(sp):
        sp.add_argument("--preset", choices=("s1", "s2", "s3"))
        sp.add_argument("--scales", help="lambda_on,lambda_off,lambda_sp")
        sp.add_argument("--steps", type=int, help="Euler steps")

    sp = sub.add_parser("train", help="train one stage")
    common(sp)
    sp.add_argument("--stage", type=int, choices=(1, 2), required=True)
    sp.add_argument("--steps", type=int, help="override the configured step count")
    sp.add_argument("--data", help="mixture directory from 'mix'; synthesised on the fly if omitted")
    sp.add_argument("--init", help="stage-1 checkpoint for stage 2 (default <out>/stage1)")
    sp.add_argument("--cold-start", action="store_true", help="stage 2 from fresh weights")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("sample", help="generate audio for manifest entries")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True, help="manifest.json or a directory holding one")
    guidance(sp)
    sp.add_argument("--limit", type=int)
    sp.add_argument("--pgm", action="store_true", help="also write grayscale PGM spectrograms")
    sp.set_defaults(fn=cmd_sample)

    sp = sub.add_parser("mix", help="write training mixtures")
    common(sp)
    sp.add_argument("--stage", type=int, choices=(1, 2), default=2)
    sp.add_argument("--n", type=int)
    sp.set_defaults(fn=cmd_mix)

    sp = sub.add_parser("bench", help="write the benchmark directory")
    common(sp)
    sp.add_argument("--counts", help="per-scenario counts, e.g. 300,401,302")
    sp.add_argument("--no-audio", action="store_true", help="manifest only")
    sp.set_defaults(fn=cmd_bench)

    sp = sub.add_parser("eval", help="metrics between generated and reference directories")
    common(sp, out=False)
    sp.add_argument("--gen", required=True)
    sp.add_argument("--ref", required=True)
    sp.add_argument("--out", dest="out_csv", help="CSV path (default stdout)")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    common(sp, out=False)
    sp.add_argument("--corrupt", action="store_true", help="perturb analytic gradients (negative control)")
    sp.set_defaults(fn=cmd_gradcheck)

    sp = sub.add_parser("sweep", help="guidance-scale grid on the benchmark")
    common(sp, out=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--bench", required=True)
    sp.add_argument("--grid", required=True, help="'on,off,sp;on,off,sp;...' or a file with one point per line")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--scenario", type=int, choices=(1, 2, 3))
    sp.add_argument("--limit", type=int)
    sp.add_argument("--out", dest="out_csv", help="CSV path (default stdout)")
    sp.set_defaults(fn=cmd_sweep)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        torch.set_num_threads(worker_count())
        return args.fn(args)
    except CliError as e:
        print(f"omnisonic: {e}", file=sys.stderr)
        return e.code
    except ConfigError as e:
        print(f"omnisonic: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointMismatch as e:
        print(f"omnisonic: checkpoint mismatch: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except EvalInputError as e:
        print(f"omnisonic: evaluation input error: {e}", file=sys.stderr)
        return EXIT_EVAL


if __name__ == "__main__":
    sys.exit(main())
