"""Command-line entry point: ``sdtts <subcommand> ...``.

Failures print one JSON line ``{"error": <kind>, "message": <text>}`` to
stderr and exit non-zero.  Every subcommand that writes into an output
directory also writes ``run_record.json`` (config, seeds, versions, argv).
``SDTTS_OUT_DIR`` overrides ``--out`` directories.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config, save_config

SUBCOMMANDS = (
    "make-corpus",
    "train-teacher",
    "gen-pairs",
    "train-student",
    "synth",
    "eval",
    "sweep-sigma",
    "bench-rtf",
    "count-params",
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _out_dir(args) -> Path:
    out = Path(os.environ.get("SDTTS_OUT_DIR") or args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args) -> RunConfig:
    overrides = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        try:
            overrides[key] = json.loads(value)
        except json.JSONDecodeError:
            overrides[key] = value
    for flag, key in (
        ("steps", "train.steps"),
        ("seed", "train.seed"),
        ("batch_size", "train.batch_size"),
        ("sigma", "distill.sigma"),
        ("pair_seed", "distill.pair_seed"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    return load_config(args.config, overrides)


def _write_text(path: Path, text: str) -> None:
    from .data import _atomic_write

    _atomic_write(path, text.encode())


def _record(out: Path, args, cfg: RunConfig | None) -> None:
    import torch

    rec = {
        "command": args.command,
        "argv": sys.argv[1:],
        "config": cfg.to_dict() if cfg is not None else None,
        "seeds": (
            {"train": cfg.train.seed, "pair": cfg.distill.pair_seed, "embedder": cfg.model.embedder_seed}
            if cfg is not None
            else {}
        ),
        "versions": {
            "sdtts": __version__,
            "python": platform.python_version(),
            "torch": torch.__version__,
            "numpy": np.__version__,
        },
    }
    _write_text(out / "run_record.json", json.dumps(rec, indent=2, sort_keys=True) + "\n")


def _corpus(path, cfg: RunConfig):
    from .data import load_corpus

    return load_corpus(path, n_mels=cfg.model.n_mels, vocab_size=cfg.model.vocab_size)


# --------------------------------------------------------------------------
# subcommands


def cmd_make_corpus(args):
    from .data import make_synthetic_corpus, write_corpus

    cfg = _config(args)
    c = cfg.corpus
    corpus = make_synthetic_corpus(
        args.n_speakers or c.get("n_speakers", 4),
        args.utts_per_speaker or c.get("utts_per_speaker", 8),
        c.get("seed", 0) if args.corpus_seed is None else args.corpus_seed,
        n_mels=cfg.model.n_mels,
        vocab_size=cfg.model.vocab_size,
        first_speaker=args.first_speaker,
    )
    out = _out_dir(args)
    path = write_corpus(corpus, out / "manifest.jsonl")
    save_config(cfg, out / "config.json")
    _record(out, args, cfg)
    print(json.dumps({"manifest": str(path), "utterances": len(corpus), "speakers": len(corpus.speakers)}))


def _train_common(args, stage):
    from .checkpoint import save_checkpoint
    from .distill import load_pairs, train_student, train_teacher

    cfg = _config(args)
    corpus = _corpus(args.corpus, cfg)
    out = _out_dir(args)
    log_path = out / f"{stage}_log.jsonl"
    if log_path.exists():
        log_path.unlink()
    if stage == "teacher":
        result = train_teacher(corpus, cfg, log_path=log_path)
    else:
        pairs = load_pairs(args.pairs, corpus)
        result = train_student(corpus, pairs, cfg, log_path=log_path)
    ckpt_path = save_checkpoint(result.checkpoint, out / f"{stage}.ckpt")
    save_config(cfg, out / "config.json")
    _record(out, args, cfg)
    last = result.reports[-1].to_dict() if result.reports else {}
    print(json.dumps({"checkpoint": str(ckpt_path), "steps": len(result.reports), "last": last}))


def cmd_train_teacher(args):
    _train_common(args, "teacher")


def cmd_train_student(args):
    _train_common(args, "student")


def cmd_gen_pairs(args):
    from .checkpoint import load_checkpoint
    from .distill import generate_parallel_pairs

    ckpt = load_checkpoint(args.teacher)
    cfg = ckpt.config
    if args.pair_seed is not None:
        cfg = dataclasses.replace(cfg, distill=dataclasses.replace(cfg.distill, pair_seed=args.pair_seed))
    corpus = _corpus(args.corpus, cfg)
    out = _out_dir(args)
    manifest = generate_parallel_pairs(ckpt, corpus, cfg.distill, out / "pairs.jsonl")
    _record(out, args, cfg)
    print(json.dumps({"pairs": str(out / "pairs.jsonl"), "count": len(manifest)}))


def cmd_synth(args):
    from .checkpoint import load_checkpoint
    from .data import CorpusError, read_mel, write_mel
    from .distill import synthesize

    ckpt = load_checkpoint(args.checkpoint)
    if args.prompt_mel:
        prompt = read_mel(args.prompt_mel)
    elif args.prompt_corpus and args.prompt_id:
        try:
            prompt = _corpus(args.prompt_corpus, ckpt.config).get(args.prompt_id).mel
        except KeyError:
            raise CorpusError(f"prompt id {args.prompt_id!r} not in {args.prompt_corpus}") from None
    else:
        raise UsageError("synth needs --prompt-mel or --prompt-corpus with --prompt-id")
    mel = synthesize(ckpt, args.phonemes, prompt, args.durations, seed=args.seed, noise_scale=args.noise_scale)
    write_mel(mel, args.out)
    _record(Path(args.out).parent, args, ckpt.config)
    print(json.dumps({"mel": args.out, "frames": mel.n_frames}))


def _eval_inputs(args, cfg):
    from .data import SyntheticVoices
    from .evaluation import SyntheticTranscriber
    from .speaker import build_embedder

    held = _corpus(args.corpus, cfg)
    prompts = list(held)[: args.max_prompts] if args.max_prompts else list(held)
    texts_src = _corpus(args.texts, cfg) if args.texts else held
    texts = [u.phonemes.ids for u in texts_src][: args.max_texts]
    embedder = build_embedder(cfg.model.embedder, n_mels=cfg.model.n_mels, dim=cfg.model.d_raw, seed=args.eval_embedder_seed)
    voices_seed = cfg.corpus.get("seed", 0) if args.voices_seed is None else args.voices_seed
    transcriber = SyntheticTranscriber(SyntheticVoices(cfg.model.n_mels, cfg.model.vocab_size, voices_seed))
    return prompts, texts, embedder, transcriber


def cmd_eval(args):
    from .checkpoint import load_checkpoint
    from .evaluation import evaluate, model_synthesizer

    ckpt = load_checkpoint(args.checkpoint)
    prompts, texts, embedder, transcriber = _eval_inputs(args, ckpt.config)
    report = evaluate(model_synthesizer(ckpt, seed=args.seed, noise_scale=args.noise_scale), prompts, texts, embedder, transcriber)
    out = _out_dir(args)
    _write_text(out / "eval.json", json.dumps(dataclasses.asdict(report), indent=2) + "\n")
    _record(out, args, ckpt.config)
    print(json.dumps(dataclasses.asdict(report)))


def cmd_sweep_sigma(args):
    from .checkpoint import load_checkpoint
    from .distill import load_pairs
    from .evaluation import sigma_sweep, write_sweep_table

    cfg = _config(args)
    corpus = _corpus(args.train_corpus, cfg)
    teacher = load_checkpoint(args.teacher) if args.teacher else None
    pairs = load_pairs(args.pairs, corpus) if args.pairs else None
    prompts, texts, embedder, transcriber = _eval_inputs(args, cfg)
    out = _out_dir(args)
    rows = sigma_sweep(
        corpus,
        args.sigmas,
        cfg,
        teacher=teacher,
        pairs=pairs,
        prompts=prompts,
        texts=texts,
        embedder=embedder,
        transcriber=transcriber,
        export_dir=out,
    )
    write_sweep_table(rows, out / "sweep.txt")
    _record(out, args, cfg)
    print(json.dumps([r.to_dict() for r in rows]))


def cmd_bench_rtf(args):
    from .checkpoint import load_checkpoint
    from .evaluation import measure_rtf, model_synthesizer

    ckpt = load_checkpoint(args.checkpoint)
    utts = list(_corpus(args.corpus, ckpt.config))[: args.items]
    items = [(u.phonemes.ids, u) for u in utts]
    m = measure_rtf(model_synthesizer(ckpt), items, repeats=args.repeats, warmup=args.warmup)
    out = _out_dir(args)
    _write_text(out / "rtf.json", json.dumps(dataclasses.asdict(m), indent=2) + "\n")
    _record(out, args, ckpt.config)
    print(json.dumps(dataclasses.asdict(m)))


def cmd_count_params(args):
    from .checkpoint import count_params, load_checkpoint
    from .model import ZeroShotTTS

    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        cfg, n = ckpt.config, count_params(ckpt)
    else:
        cfg = _config(args)
        n = ZeroShotTTS(cfg.model).count_parameters()
    _record(_out_dir(args), args, cfg)
    print(json.dumps({"trainable_parameters": n}))


# --------------------------------------------------------------------------


def _add_config(p):
    p.add_argument("--config", help="JSON config file (defaults preset when omitted)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a dotted config key")
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sdtts", description="Self-distilled zero-shot TTS at desk scale")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-corpus", help="write a synthetic corpus")
    _add_config(p)
    p.add_argument("--out", required=True)
    p.add_argument("--n-speakers", type=int)
    p.add_argument("--utts-per-speaker", type=int)
    p.add_argument("--corpus-seed", type=int)
    p.add_argument("--first-speaker", type=int, default=0)
    p.set_defaults(func=cmd_make_corpus)

    for name, func in (("train-teacher", cmd_train_teacher), ("train-student", cmd_train_student)):
        p = sub.add_parser(name)
        _add_config(p)
        p.add_argument("--corpus", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--steps", type=int)
        p.add_argument("--batch-size", type=int)
        if name == "train-student":
            p.add_argument("--pairs", required=True)
            p.add_argument("--sigma", type=float)
            p.add_argument("--pair-seed", type=int)
        p.set_defaults(func=func)

    p = sub.add_parser("gen-pairs")
    p.add_argument("--teacher", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pair-seed", type=int)
    p.set_defaults(func=cmd_gen_pairs)

    p = sub.add_parser("synth")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--phonemes", type=_ints, required=True)
    p.add_argument("--durations", type=_ints)
    p.add_argument("--prompt-mel")
    p.add_argument("--prompt-corpus")
    p.add_argument("--prompt-id")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise-scale", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    def eval_args(p):
        p.add_argument("--corpus", required=True, help="held-out prompt corpus manifest")
        p.add_argument("--texts", help="manifest whose phoneme sequences are synthesized (default: --corpus)")
        p.add_argument("--max-prompts", type=int, default=0)
        p.add_argument("--max-texts", type=int, default=8)
        p.add_argument("--eval-embedder-seed", type=int, default=999)
        p.add_argument("--voices-seed", type=int)
        p.add_argument("--out", required=True)

    p = sub.add_parser("eval")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise-scale", type=float, default=0.0)
    eval_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-sigma")
    _add_config(p)
    p.add_argument("--train-corpus", required=True)
    p.add_argument("--sigmas", type=_floats, required=True)
    p.add_argument("--teacher")
    p.add_argument("--pairs")
    p.add_argument("--steps", type=int)
    eval_args(p)
    p.set_defaults(func=cmd_sweep_sigma)

    p = sub.add_parser("bench-rtf")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--items", type=int, default=4)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--out", default=".", help="directory for rtf.json and the run record")
    p.set_defaults(func=cmd_bench_rtf)

    p = sub.add_parser("count-params")
    p.add_argument("--checkpoint")
    p.add_argument("--out", default=".", help="directory for the run record")
    _add_config(p)
    p.set_defaults(func=cmd_count_params)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        _fail("UsageError", exc)
        return 2
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 2
    try:
        args.func(args)
    except (UsageError, ConfigError) as exc:
        _fail(type(exc).__name__, exc)
        return 2
    except Exception as exc:  # noqa: BLE001 - reported as one machine-readable line
        _fail(type(exc).__name__, exc)
        return 1
    return 0


def _fail(kind, exc):
    print(json.dumps({"error": kind, "message": str(exc)}), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
