"""Command-line interface.

Subcommands: ``ingest``, ``train``, ``surprisal``, ``analyze``, ``simulate``.
Exit codes: 0 success, 1 validation error, 2 runtime or data error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .audio import (TooShortError, WavFormatError, chunk_blocks, decode_wav, mel_spectrogram,
                    read_melc, resample, write_melc)
from .config import RunConfig, load_config, override
from .denoiser import (ConfigError, TrainingDiverged, load_checkpoint, save_checkpoint, train,
                       write_loss_csv)
from .plot import wundt_svg
from .stats import (compare_models, read_covariate_csv, read_ratings_csv,
                    simulate_study, wundt_analysis, write_ratings_csv)
from .streams import stream
from .surprisal import (DuplicateClipError, batch_surprisal, read_manifest, read_surprisal_csv,
                        write_surprisal_csv)

log = logging.getLogger("diffsurprisal")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_RUNTIME):
        super().__init__(message)
        self.code = code


def _build_config(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None))
    cfg = override(cfg, None, "seed", getattr(args, "seed", None))
    for flag, section, key in [
        ("sample_rate", "mel", "sample_rate"), ("n_mels", "mel", "n_mels"),
        ("window", "mel", "window_len"), ("hop", "mel", "hop_len"),
        ("block_frames", "mel", "block_frames"), ("top_db", "mel", "top_db"),
        ("steps", "train", "steps"), ("batch_size", "train", "batch_size"),
        ("lr", "train", "learning_rate"), ("arch", "model", "arch"),
        ("mode", "elbo", "mode"), ("mc_samples", "elbo", "mc_samples"),
        ("alpha", "analysis", "alpha"), ("covariate", "analysis", "covariate"),
    ]:
        cfg = override(cfg, section, key, getattr(args, flag, None))
    cfg.validate()
    return cfg


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


def _clean(x):
    """Make floats JSON-safe (non-finite -> None) recursively."""
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, (float, np.floating)):
        return float(x) if math.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


# ---------------------------------------------------------------------------
# ingest
# ---------------------------------------------------------------------------

def cmd_ingest(args) -> int:
    cfg = _build_config(args)
    mel = cfg.mel_config()
    out = Path(args.out)
    try:
        manifest = read_manifest(args.manifest)
    except DuplicateClipError as exc:
        raise CliError(str(exc), EXIT_INVALID) from exc
    except (OSError, KeyError) as exc:
        raise CliError(f"cannot read manifest: {exc}", EXIT_INVALID) from exc
    if not manifest:
        log.warning("manifest is empty; nothing to do")
        return EXIT_OK
    targets = {cid: out / f"{cid}.melc" for cid, _ in manifest}
    if not args.force:
        clash = sorted(str(p) for p in targets.values() if p.exists())
        if clash:
            raise CliError(f"refusing to overwrite {len(clash)} file(s) without --force: "
                           f"{clash[:5]}", EXIT_INVALID)
    out.mkdir(parents=True, exist_ok=True)

    failed = 0
    for cid, path in manifest:
        try:
            w = decode_wav(path)
            if w.sample_rate != mel.sample_rate:
                w = resample(w, mel.sample_rate)
            clip = mel_spectrogram(w, mel, cid, cfg.block_frames)
        except (OSError, WavFormatError, TooShortError, ValueError) as exc:
            failed += 1
            print(f"{cid}\tFAILED\t{type(exc).__name__}: {exc}", file=sys.stderr)
            continue
        write_melc(targets[cid], clip)
        blocks = chunk_blocks(clip)
        print(f"{cid}\tframes={clip.n_frames}\tblocks={len(blocks)}"
              f"\tpadded={sum(b.padded for b in blocks)}")
    return EXIT_RUNTIME if failed else EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _training_blocks(data_dir: Path, block_frames: int, n_mels: int) -> np.ndarray:
    files = sorted(data_dir.glob("*.melc"))
    if not files:
        raise CliError(f"no .melc files in {data_dir}", EXIT_INVALID)
    clean, padded = [], []
    for f in files:
        clip = read_melc(f)
        if clip.n_mels != n_mels:
            raise CliError(f"{f}: n_mels {clip.n_mels} != configured {n_mels}", EXIT_INVALID)
        for b in chunk_blocks(clip, block_frames):
            (padded if b.padded else clean).append(b.values)
    return np.array(clean or padded)


def cmd_train(args) -> int:
    cfg = _build_config(args)
    mel = cfg.mel_config()
    sched = cfg.noise_schedule()
    arch = cfg.arch_config((mel.n_mels, cfg.block_frames))
    tcfg = cfg.train_config()
    blocks = _training_blocks(Path(args.data), cfg.block_frames, mel.n_mels)
    out = Path(args.out)
    try:
        params, losses = train(blocks, tcfg, sched, arch)
    except TrainingDiverged as exc:
        raise CliError(f"training diverged at step {exc.step}: loss={exc.loss}") from exc
    extra = {"mel": mel.to_dict(), "block_frames": cfg.block_frames, "seed": cfg.seed,
             "train": {k: getattr(tcfg, k) for k in tcfg.__dataclass_fields__},
             "n_blocks": int(len(blocks))}
    save_checkpoint(out, params, sched, step=tcfg.steps, extra=extra)
    write_loss_csv(out.with_suffix(".loss.csv"), losses)
    last = f"{losses[-1]:.6g}" if losses else "n/a"
    print(f"trained {arch.arch} ({params.param_count} params) on {len(blocks)} blocks "
          f"for {tcfg.steps} steps; final loss {last}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# surprisal
# ---------------------------------------------------------------------------

def cmd_surprisal(args) -> int:
    cfg = _build_config(args)
    try:
        params, sched, header = load_checkpoint(args.checkpoint)
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(f"cannot load checkpoint: {exc}", EXIT_INVALID) from exc
    if cfg.schedule and not cfg.noise_schedule().same_as(sched):
        raise CliError(f"schedule mismatch: checkpoint {sched.to_dict()} vs config "
                       f"{cfg.noise_schedule().to_dict()}", EXIT_INVALID)
    if cfg.model.get("arch", params.arch.arch) != params.arch.arch:
        raise CliError(f"architecture mismatch: checkpoint {params.arch.arch} vs config "
                       f"{cfg.model['arch']}", EXIT_INVALID)
    mel_d = {**header.get("mel", {}), **{k: v for k, v in cfg.mel.items() if k != "block_frames"}}
    mel = RunConfig(mel=mel_d).mel_config()
    block_frames = int(cfg.mel.get("block_frames", header.get("block_frames", 256)))
    if (mel.n_mels, block_frames) != params.arch.input_shape:
        raise CliError(f"block shape {(mel.n_mels, block_frames)} does not match model input "
                       f"{params.arch.input_shape}", EXIT_INVALID)
    try:
        manifest = read_manifest(args.manifest)
    except DuplicateClipError as exc:
        raise CliError(str(exc), EXIT_INVALID) from exc
    out = Path(args.out)
    existing = None
    if out.exists():
        if args.resume:
            existing = read_surprisal_csv(out)
        elif not args.force:
            raise CliError(f"{out} exists; pass --resume or --force", EXIT_INVALID)
    if args.detail_dir:
        Path(args.detail_dir).mkdir(parents=True, exist_ok=True)

    ecfg = cfg.elbo_config()
    rows, errors = batch_surprisal(manifest, params, sched, ecfg, mel, block_frames,
                                   existing=existing, model_id=params.fingerprint(),
                                   detail_dir=args.detail_dir)
    write_surprisal_csv(out, rows)
    for cid, msg in sorted(errors.items()):
        print(f"{cid}\tFAILED\t{msg}", file=sys.stderr)
    print(f"wrote {len(rows)} records to {out} ({len(errors)} failed)")
    return EXIT_RUNTIME if errors else EXIT_OK


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------

def _curve(report, s, n: int = 200):
    grid = np.linspace(float(np.min(s)), float(np.max(s)), n)
    return grid, report.predict(grid)


def cmd_analyze(args) -> int:
    cfg = _build_config(args)
    ratings = read_ratings_csv(args.ratings)
    if len(ratings) == 0:
        raise CliError("ratings table is empty", EXIT_INVALID)
    surprisal = read_surprisal_csv(args.surprisal)
    cov = {cid: float(r[cfg.covariate]) for cid, r in surprisal.items()}
    missing = sorted(set(ratings.clip_id) - set(cov))
    if missing:
        raise CliError(f"{len(missing)} rated clip(s) have no surprisal value: {missing}")
    baseline = None
    if args.baseline:
        baseline = read_covariate_csv(args.baseline)
        missing = sorted(set(ratings.clip_id) - set(baseline))
        if missing:
            raise CliError(f"{len(missing)} rated clip(s) have no baseline value: {missing}")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    main = wundt_analysis(ratings, cov, cfg.alpha)
    rep = main.report
    result = {
        "n": rep.n,
        "covariate": cfg.covariate,
        "alpha": cfg.alpha,
        "mixed_model": {"beta0": main.mixed.beta0, "sigma_b2": main.mixed.sigma_b2,
                        "sigma_e2": main.mixed.sigma_e2, "loglik": main.mixed.loglik,
                        "n_subjects": len(main.mixed.blup), "warning": main.mixed.warning,
                        "blup": main.mixed.blup},
        "models": {"diffusion": {"fit": rep.to_dict(),
                                 "verdict": main.verdict.label,
                                 "vertex_s": main.verdict.vertex_s}},
    }
    if baseline is not None:
        b = wundt_analysis(ratings, baseline, cfg.alpha)
        result["models"]["baseline"] = {"fit": b.report.to_dict(), "verdict": b.verdict.label,
                                        "vertex_s": b.verdict.vertex_s}
        rows = compare_models([("baseline", b.report), ("diffusion", rep)])
        result["comparison"] = rows
        with open(out / "comparison.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({k: (repr(float(v)) if isinstance(v, float) else v)
                            for k, v in r.items()})
    _write_json(out / "report.json", _clean(result))

    gx, gy = _curve(rep, main.covariate)
    with open(out / "curve.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["s", "fitted"])
        for a, b_ in zip(gx, gy):
            w.writerow([repr(float(a)), repr(float(b_))])
    vertex = None
    if rep.vertex_s is not None:
        vertex = (rep.vertex_s, float(rep.predict(rep.vertex_s)))
    svg = wundt_svg(main.covariate, main.adjusted.rating, gx, gy, vertex,
                    title=f"Wundt curve ({main.verdict.label}, R2={rep.r2:.3f})",
                    xlabel=f"surprisal: {cfg.covariate}")
    (out / "wundt.svg").write_text(svg)
    print(f"verdict: {main.verdict.label}  c2(std)={rep.coeffs[2]:.4g}  p={rep.p_values[2]:.3g}  "
          f"R2={rep.r2:.4f}  LL={rep.loglik:.2f}  AIC={rep.aic:.1f}  BIC={rep.bic:.1f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = _build_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table, s = simulate_study((args.c0, args.c1, args.c2), args.sigma_b, args.sigma_e,
                              args.subjects, args.clips, cfg.seed, (args.s_min, args.s_max))
    write_ratings_csv(out / "ratings.csv", table)
    rows = [{"clip_id": c, "n_blocks": 1, "total_nats": repr(v), "normalized_nats": repr(v),
             "padded_blocks": 0, "model_id": "simulated", "seed": cfg.seed}
            for c, v in s.items()]
    write_surprisal_csv(out / "surprisal.csv", rows)
    if args.baseline_noise is not None:
        rng = stream(cfg.seed, "simulate", "baseline")
        with open(out / "baseline.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["clip_id", "value"])
            for c, v in s.items():
                w.writerow([c, repr(float(v + args.baseline_noise * rng.standard_normal()))])
    print(f"simulated {args.subjects} subjects x {args.clips} clips into {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _version() -> str:
    return (f"diffsurprisal {__version__} (python {platform.python_version()}, "
            f"numpy {np.__version__}, {platform.system()} {platform.machine()})")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="diffsurprisal", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=_version())
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="TOML config file")
        sp.add_argument("--seed", type=int)

    def mel_flags(sp):
        sp.add_argument("--sample-rate", type=int)
        sp.add_argument("--n-mels", type=int)
        sp.add_argument("--window", type=int)
        sp.add_argument("--hop", type=int)
        sp.add_argument("--block-frames", type=int)
        sp.add_argument("--top-db", type=float)

    sp = sub.add_parser("ingest", help="WAV files -> MELC1 log-mel tensors")
    common(sp)
    mel_flags(sp)
    sp.add_argument("manifest")
    sp.add_argument("--out", required=True)
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_ingest)

    sp = sub.add_parser("train", help="train a denoiser on ingested blocks")
    common(sp)
    mel_flags(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--arch", choices=("mlp", "small_conv"))
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("surprisal", help="per-clip surprisal table")
    common(sp)
    mel_flags(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--mode", choices=("exact", "exact_sum", "mc"))
    sp.add_argument("--mc-samples", type=int)
    sp.add_argument("--resume", action="store_true")
    sp.add_argument("--force", action="store_true")
    sp.add_argument("--detail-dir")
    sp.set_defaults(func=cmd_surprisal)

    sp = sub.add_parser("analyze", help="mixed-model adjustment + quadratic fit + plot")
    common(sp)
    sp.add_argument("--ratings", required=True)
    sp.add_argument("--surprisal", required=True)
    sp.add_argument("--baseline")
    sp.add_argument("--covariate", choices=("total_nats", "normalized_nats"))
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("simulate", help="synthetic ratings study")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--c0", type=float, default=0.0)
    sp.add_argument("--c1", type=float, default=0.0)
    sp.add_argument("--c2", type=float, default=-1.0)
    sp.add_argument("--sigma-b", type=float, default=1.0)
    sp.add_argument("--sigma-e", type=float, default=1.0)
    sp.add_argument("--subjects", type=int, default=44)
    sp.add_argument("--clips", type=int, default=57)
    sp.add_argument("--s-min", type=float, default=-2.0)
    sp.add_argument("--s-max", type=float, default=2.0)
    sp.add_argument("--baseline-noise", type=float,
                    help="also write baseline.csv = surprisal + N(0, noise^2)")
    sp.set_defaults(func=cmd_simulate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "mode", None) == "exact":
        args.mode = "exact_sum"
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
