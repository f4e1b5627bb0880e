"""Command-line entry point: profiling tables, toy pretraining runs,
gradient-check suites, relabeling and probe evaluations.

Exit codes: 0 success, 1 verification failure, 2 config error,
3 missing artifact.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import autograd
from .binarize import PrecisionSpec
from .checkpoint import load_checkpoint, save_checkpoint
from .runconfig import (PAPER_SUITE, RunSpec, load_bundled_config, load_run_config,
                        parse_run_config, run_spec_to_dict)
from .costmodel import DEFAULT_DEVICE_PEAK, DEFAULT_FRAMES, profile_table
from .errors import BinaformerError, ConfigError
from .gradcheck import ALL_CHECKS, BLOCK_CHECKS, OP_CHECKS, THRESHOLD, run_suite
from .kmeans import KMeansModel
from .pretrain import (Labeler, PretrainModel, SynthConfig, fit_mfcc_labeler,
                       probe_eval, second_phase_relabel, synth_corpus, train)

EXIT_OK = 0
EXIT_VERIFICATION = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3

SEED_ENV = "BINAFORMER_SEED"


def _default_seed() -> int:
    try:
        return int(os.environ.get(SEED_ENV, "42"))
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer") from None


def _build_model(spec: RunSpec, seed: int) -> PretrainModel:
    return PretrainModel(spec.encoder, spec.prec, seed=seed,
                         input_dim=spec.input_dim,
                         extractor_channels=spec.extractor_channels,
                         n_clusters=spec.n_clusters)


def _load_model(path: str) -> tuple[PretrainModel, RunSpec, dict]:
    meta, arrays = load_checkpoint(path)
    spec = parse_run_config(meta["config"])
    model = _build_model(spec, seed=int(meta["seed"]))
    model.load_arrays({k: v for k, v in arrays.items() if not k.startswith("labeler.")})
    return model, spec, {**meta, "arrays": arrays}


def cmd_profile(args) -> int:
    entries = []
    if args.suite:
        if args.suite != "paper":
            raise ConfigError(f"unknown suite {args.suite!r} (only 'paper' is bundled)")
        for name in PAPER_SUITE:
            cfg = load_bundled_config(name).encoder
            for label in ("FP32", "FP32-W1A1"):
                entries.append((name, cfg, PrecisionSpec.from_label(label)))
        frames = args.frames if args.frames is not None else DEFAULT_FRAMES
        peak = args.device_peak if args.device_peak is not None else DEFAULT_DEVICE_PEAK
    else:
        if not args.config:
            raise ConfigError("profile needs --config FILE... or --suite paper")
        frames, peak = args.frames, args.device_peak
        for path in args.config:
            spec = load_run_config(path)
            entries.append((Path(path).stem, spec.encoder, spec.prec))
            if frames is None and spec.frames is not None:
                frames = spec.frames
            if peak is None and spec.device_peak is not None:
                peak = spec.device_peak
        frames = frames if frames is not None else DEFAULT_FRAMES
        peak = peak if peak is not None else DEFAULT_DEVICE_PEAK
    table = profile_table(entries, n=frames, device_peak=peak,
                          compare_paper=args.compare_paper, fmt=args.format)
    print(table)
    return EXIT_OK


def cmd_train(args) -> int:
    seed = args.seed
    spec = load_run_config(args.config)
    out_dir = Path(args.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    corpus = synth_corpus(SynthConfig(**spec.corpus_config()), seed=seed)
    model = _build_model(spec, seed=seed)
    labeler = fit_mfcc_labeler(corpus.batch, spec.n_clusters, seed=seed)
    settings = spec.train_settings(steps=args.steps)
    losses = train(model, corpus.batch, labeler, settings, seed=seed)
    csv_path = out_dir / "loss.csv"
    csv_path.write_text("".join(f"{i},{loss!r}\n" for i, loss in enumerate(losses)))
    arrays = model.named_arrays()
    arrays["labeler.centroids"] = labeler.kmeans.centroids
    meta = {"config": run_spec_to_dict(spec), "seed": seed,
            "steps": settings.steps, "labeler_source": "mfcc"}
    ckpt_path = out_dir / "model.ckpt"
    save_checkpoint(ckpt_path, meta, arrays)
    print(f"trained {settings.steps} steps; final loss {losses[-1]:.6f}")
    print(f"checkpoint: {ckpt_path}")
    print(f"loss curve: {csv_path}")
    return EXIT_OK


def cmd_relabel(args) -> int:
    model, spec, meta = _load_model(args.checkpoint)
    seed = args.seed
    corpus = synth_corpus(SynthConfig(**spec.corpus_config()), seed=int(meta["seed"]))
    labeler = second_phase_relabel(model, corpus.batch, layer_index=args.layer,
                                   k=spec.n_clusters, seed=seed)
    arrays = model.named_arrays()
    arrays["labeler.centroids"] = labeler.kmeans.centroids
    out_meta = {"config": meta["config"], "seed": meta["seed"],
                "steps": meta.get("steps", 0), "labeler_source": args.layer}
    out_path = Path(args.output) if args.output else Path(args.checkpoint)
    save_checkpoint(out_path, out_meta, arrays)
    print(f"relabeled from layer {args.layer}; centroids shape "
          f"{labeler.kmeans.centroids.shape}")
    print(f"checkpoint: {out_path}")
    return EXIT_OK


def cmd_probe(args) -> int:
    if args.checkpoint:
        model, _, _ = _load_model(args.checkpoint)
    elif args.config:
        spec = load_run_config(args.config)
        model = _build_model(spec, seed=args.seed)
    else:
        raise ConfigError("probe needs --checkpoint FILE or --config FILE")
    acc = probe_eval(model, task=args.task, seed=args.seed)
    print(f"accuracy {acc:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.op:
        if args.op not in OP_CHECKS:
            raise ConfigError(f"unknown op {args.op!r}; known: {sorted(OP_CHECKS)}")
        names = [args.op]
    elif args.block:
        if args.block not in BLOCK_CHECKS:
            raise ConfigError(f"unknown block {args.block!r}; known: {sorted(BLOCK_CHECKS)}")
        names = [args.block]
    else:
        names = list(ALL_CHECKS)
    if args.corrupt_op:
        autograd.GRADIENT_CORRUPTION[args.corrupt_op] = 1.01
    try:
        results = run_suite(names, seed=args.seed)
    finally:
        autograd.GRADIENT_CORRUPTION.clear()
    failures = []
    for name, err in results:
        status = "PASS" if err < THRESHOLD else "FAIL"
        print(f"{name:32s} max_rel_err {err:.3e}  {status}")
        if status == "FAIL":
            failures.append(name)
    if failures:
        print(f"gradient check failed for: {', '.join(failures)}")
        return EXIT_VERIFICATION
    print(f"all {len(results)} checks below {THRESHOLD:.0e}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="binaformer",
        description="Binarized speech-encoder toolkit: profiling, toy pretraining, "
                    "gradient checks and linear probes.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("profile", help="static storage/FLOP/BOP table")
    p.add_argument("--config", nargs="*", default=[], help="encoder config JSON file(s)")
    p.add_argument("--suite", help="bundled suite name ('paper': 5 encoders x 2 precisions)")
    p.add_argument("--frames", type=int, default=None, help="sequence length in frames")
    p.add_argument("--device-peak", type=float, default=None, help="device peak ops/s")
    p.add_argument("--compare-paper", "--paper-row", action="store_true",
                   dest="compare_paper", help="attach published reference columns")
    p.add_argument("--format", choices=("table", "tsv"), default="table")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("train", help="toy masked pseudo-label pretraining run")
    p.add_argument("--config", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--output", default="run", help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("relabel", help="refit acoustic units from encoder hidden states")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--layer", type=int, default=1, help="encoder layer index (0 = embedding)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--output", default=None, help="output checkpoint (default: in place)")
    p.set_defaults(func=cmd_relabel)

    p = sub.add_parser("probe", help="linear probe accuracy on synthetic tasks")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--config", default=None, help="probe a randomly initialized model")
    p.add_argument("--task", choices=("frame_cls", "seq_cls"), default="frame_cls")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--all", action="store_true", help="run every check (default)")
    p.add_argument("--op", default=None)
    p.add_argument("--block", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--corrupt-op", default=None,
                   help="verification hook: corrupt the named op's gradients")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if getattr(args, "seed", None) is None and hasattr(args, "seed"):
            args.seed = _default_seed()
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except BinaformerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VERIFICATION


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
