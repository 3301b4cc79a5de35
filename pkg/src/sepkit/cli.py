"""Command-line entry point: ``sepkit synth|train|eval|separate``."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import torch

from . import __version__
from .audio import AudioError, AudioSignal, read_wav, write_wav
from .config import ConfigError, RunConfig, dump_config, load_config
from .data import MixtureStore, by_split
from .evaluate import evaluate_known, evaluate_unknown
from .mixer import InsufficientSpeakers, build_dataset, read_manifest, render_record, write_rendered
from .model import Separator, load_checkpoint
from .toy_corpus import make_toy_corpus
from .train import train

log = logging.getLogger("sepkit")

EXIT_RUNTIME = 1
EXIT_USAGE = 2


class UsageError(Exception):
    pass


def _load(args) -> RunConfig:
    overrides = list(args.set or [])
    if getattr(args, "profile", None):
        overrides.append(f"run.profile={args.profile}")
    cfg = load_config(args.config, overrides)
    print("# resolved configuration")
    print(dump_config(cfg), end="")
    return cfg


def _render_one(args):
    record, out_dir = args
    write_rendered(record, render_record(record), out_dir)


def cmd_synth(args) -> int:
    cfg = _load(args)
    spec = cfg.dataset_spec()
    out = Path(args.out)
    records = build_dataset(spec, noisy=args.noisy, out_dir=out)
    (out / "config.ini").write_text(dump_config(cfg))
    if args.render:
        jobs = [(r, out) for r in records]
        if args.workers > 1:
            with ProcessPoolExecutor(args.workers) as pool:
                list(pool.map(_render_one, jobs, chunksize=8))
        else:
            for job in jobs:
                _render_one(job)
    digest = hashlib.sha256((out / "manifest.jsonl").read_bytes()).hexdigest()
    for split in ("train", "val", "test"):
        print(f"{split}: {len(by_split(records, split))} records")
    print(f"master seed: {spec.seed}")
    print(f"manifest: {out / 'manifest.jsonl'} sha256={digest}")
    return 0


def _manifest(path) -> list:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"manifest not found: {path}")
    return read_manifest(path)


def cmd_train(args) -> int:
    cfg = _load(args)
    records = _manifest(args.data)
    run_dir = Path(args.runs_dir) / args.run
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.ini").write_text(dump_config(cfg))
    torch.manual_seed(cfg.train.seed)
    model = Separator(cfg.model)
    store = MixtureStore(Path(args.data).parent)
    result = train(model, records, cfg.train, run_dir=run_dir, store=store, resume=args.resume)
    print(f"best epoch {result.best_epoch}: val loss {result.best_val_loss:.4f}")
    print(f"run directory: {run_dir}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load(args)
    mode = args.mode or cfg.eval.mode
    selector = args.selector or cfg.eval.selector
    if not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    model, _ = load_checkpoint(args.checkpoint)
    model.eval()
    records = by_split(_manifest(args.data), args.split or cfg.eval.split)
    if not records:
        raise UsageError("no records in the requested split")
    for rec in records:
        if rec.sample_rate_hz != model.config.sample_rate_hz:
            raise UsageError(
                f"checkpoint expects {model.config.sample_rate_hz} Hz, manifest has {rec.sample_rate_hz} Hz"
            )
    store = MixtureStore(Path(args.data).parent)
    if mode == "known":
        report = evaluate_known(model, records, store)
    else:
        report = evaluate_unknown(model, records, store, selector, cfg.eval.silence_threshold_db)
    out = Path(args.out)
    report.write(out, stem=f"{mode}" if mode == "known" else f"{mode}_{selector}")
    (out / "config.ini").write_text(dump_config(cfg))
    print(json.dumps(report.to_dict(), indent=2))
    return 0


def cmd_separate(args) -> int:
    if not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    model, _ = load_checkpoint(args.checkpoint)
    model.eval()
    print(f"# model config: {model.config}")
    signal = read_wav(args.input, model.config.sample_rate_hz)
    dtype = next(model.parameters()).dtype
    count, waves, probs = model.infer(torch.as_tensor(signal.samples, dtype=dtype))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for j, w in enumerate(waves, start=1):
        write_wav(out / f"s{j}.wav", AudioSignal(w.double().numpy(), signal.sample_rate_hz))
    sidecar = {
        "input": str(args.input),
        "predicted_count": count,
        "gate_probabilities": {f"{c}": float(p) for c, p in zip(model.config.counts, probs)},
    }
    (out / "count.json").write_text(json.dumps(sidecar, indent=2) + "\n")
    print(json.dumps(sidecar, indent=2))
    return 0


def cmd_toy_corpus(args) -> int:
    speech, noise = make_toy_corpus(
        args.out,
        num_speakers=args.speakers,
        utterances_per_speaker=args.utterances,
        num_noise=args.noise_files,
        seed=args.seed,
    )
    print(f"speech corpus: {speech}")
    print(f"noise corpus: {noise}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sepkit", description=__doc__)
    parser.add_argument("--version", action="version", version=f"sepkit {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="INI configuration file")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override a configuration value (repeatable)")
        return p

    p = with_config(sub.add_parser("synth", help="synthesize a mixture dataset"))
    p.add_argument("--noisy", action="store_true", help="noisy-reverberant setting")
    p.add_argument("--profile", choices=["desk", "paper"])
    p.add_argument("--out", required=True)
    p.add_argument("--render", action="store_true", help="write the WAV tree now instead of lazily")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_synth)

    p = with_config(sub.add_parser("train", help="train the separator"))
    p.add_argument("--data", required=True, help="manifest.jsonl")
    p.add_argument("--run", required=True, help="run name")
    p.add_argument("--runs-dir", default="runs")
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_train)

    p = with_config(sub.add_parser("eval", help="evaluate a checkpoint"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="manifest.jsonl")
    p.add_argument("--mode", choices=["known", "unknown"])
    p.add_argument("--selector", choices=["gate", "silent"])
    p.add_argument("--split")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("separate", help="separate one WAV file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("input")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_separate)

    p = sub.add_parser("toy-corpus", help="write a synthetic speech/noise corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--speakers", type=int, default=30)
    p.add_argument("--utterances", type=int, default=3)
    p.add_argument("--noise-files", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_toy_corpus)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError, InsufficientSpeakers, FileNotFoundError) as exc:
        print(f"sepkit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except AudioError as exc:
        print(f"sepkit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - top-level reporter
        log.debug("failure", exc_info=True)
        print(f"sepkit: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
