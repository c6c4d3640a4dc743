"""Command-line entry points: prepare / train / evaluate / summarize / serve.

Exit codes: 0 success, 1 data error (bad manifest, failed samples, corrupt
checkpoint), 2 usage or config error (bad flags, unknown config keys, missing
command-line paths).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from .rng import Stream
from .data import DataError, load_manifest, load_prepared, prepare, featurize_raw
from .decoder import beam_search
from .evaluation import as_percent, corpus_stats, mean_rouge
from . import features as ft
from .model import CheckpointError, Model, load_checkpoint
from .serve import CacheStore, serve_forever
from .training import ConfigError, TrainConfig, Trainer, TrainingError, parse_run_config, save_run_config

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_DATA = 1
EXIT_USAGE = 2


class UsageError(ValueError):
    pass


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _load_config(args) -> TrainConfig:
    if getattr(args, "config", None):
        config = parse_run_config(_require_file(args.config, "config file"))
    else:
        config = TrainConfig()
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
    return config


def _vocab_next_to(checkpoint: Path) -> ft.Vocabulary:
    vocab_path = checkpoint.parent / "vocab.txt"
    if not vocab_path.exists():
        raise UsageError(f"vocabulary not found next to checkpoint: {vocab_path}")
    return ft.Vocabulary.load(vocab_path)


def _decode_sample(model: Model, inputs, config: TrainConfig) -> list[int]:
    eps = Stream(model.seed, "eps", inputs.key)
    memory, _ = model.forward_memory(inputs, eps)
    return beam_search(model.decoder, memory, model.embedding, beams=config.beams,
                       max_len=config.max_len_test, block_trigrams=config.block_trigrams,
                       length_penalty=config.length_penalty)


# ---------------------------------------------------------------------------
# commands


def cmd_prepare(args) -> int:
    config = _load_config(args)
    samples = load_manifest(_require_file(args.manifest, "manifest"))
    report = prepare(samples, args.out, vocab_size=config.vocab_size)
    print(f"prepared {report.prepared}/{len(samples)} samples into {args.out}")
    for sample_id, err in report.failures:
        print(f"  FAILED {sample_id}: {err}")
    if report.train_failures:
        print(f"{report.train_failures} train-split samples failed; cache is unusable for training")
        return EXIT_DATA
    return EXIT_OK


def cmd_train(args) -> int:
    config = _load_config(args)
    manifest = load_manifest(_require_file(args.manifest, "manifest"))
    prepared_dir = Path(args.prepared) if args.prepared else Path(args.out) / "features"
    vocab_path = prepared_dir / "vocab.txt"
    if not vocab_path.exists():
        prepare(manifest, prepared_dir, vocab_size=config.vocab_size)
    vocab = ft.Vocabulary.load(vocab_path)
    config.vocab_size = len(vocab)
    by_split = load_prepared(prepared_dir, manifest, vocab, config.max_len_train)
    if not by_split["train"]:
        raise DataError("no prepared train-split samples")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vocab.save(out / "vocab.txt")
    save_run_config(out / "run-config.cfg", config)

    resume_path = out / "checkpoint.mtlg"
    if args.resume and resume_path.exists():
        trainer = Trainer.resume(resume_path, config, by_split["train"], by_split["valid"])
        print(f"resuming from step {trainer.state.step}")
    else:
        trainer = Trainer(Model(config.model_config(), config.seed), config,
                          by_split["train"], by_split["valid"])
    history = trainer.run(out)
    last = history[-1] if history else {}
    print(f"trained {trainer.state.step} steps; final nll={last.get('nll', float('nan')):.4f} "
          f"total={last.get('total', float('nan')):.4f}")
    print(f"checkpoint: {out / 'checkpoint.mtlg'}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    checkpoint = _require_file(args.checkpoint, "checkpoint")
    config = _load_config(args)
    model, _ = load_checkpoint(checkpoint)
    vocab = _vocab_next_to(checkpoint)
    manifest = load_manifest(_require_file(args.manifest, "manifest"))
    split = args.split
    chosen = [m for m in manifest if m.split == split]
    if not chosen:
        raise DataError(f"no samples in split {split!r}")

    prepared_dir = Path(args.prepared) if args.prepared else checkpoint.parent / "features"
    skipped = []
    records = []
    candidates = []
    references = []
    for m in chosen:
        try:
            text = Path(m.text_path).read_text(encoding="utf-8")
            inputs = None
            if prepared_dir.exists() and (prepared_dir / f"{m.id}.text.tnsr").exists():
                loaded = load_prepared(prepared_dir, [m], vocab, config.max_len_train)
                inputs = loaded[m.split][0]
            else:
                inputs = featurize_raw(m.id, text, vocab)
            ids = _decode_sample(model, inputs, config)
            candidates.append(vocab.decode(ids))
            references.append(m.target)
            records.append((text, m.target))
        except (OSError, ft.FeatureError) as exc:
            logger.warning("skipping sample %s: %s", m.id, exc)
            skipped.append(m.id)
    if not records:
        raise DataError("every sample was skipped")

    stats = corpus_stats(records)
    rouge = mean_rouge(candidates, references)
    report = {
        "split": split,
        "samples": stats.sample_count,
        "skipped": skipped,
        "avg_source_tokens": round(stats.avg_source_tokens, 2),
        "avg_target_tokens": round(stats.avg_target_tokens, 2),
        "novel_ngram_pct": round(stats.novel_pct, 2),
        "rouge": {name: {"precision": as_percent(s.precision),
                         "recall": as_percent(s.recall),
                         "f1": as_percent(s.f1)}
                  for name, s in rouge.items()},
    }
    if args.json:
        print(json.dumps(report, indent=2))
    else:
        print(f"split={split} samples={stats.sample_count} skipped={len(skipped)}")
        print(f"avg source tokens: {stats.avg_source_tokens:.2f}")
        print(f"avg target tokens: {stats.avg_target_tokens:.2f}")
        print(f"novel n-gram %:    {stats.novel_pct:.2f}")
        print(f"{'metric':<10}{'precision':>10}{'recall':>10}{'f1':>10}")
        for name, s in rouge.items():
            print(f"{name:<10}{as_percent(s.precision):>10.2f}{as_percent(s.recall):>10.2f}{as_percent(s.f1):>10.2f}")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write("metric,precision,recall,f1\n")
            for name, s in rouge.items():
                fh.write(f"{name},{as_percent(s.precision)},{as_percent(s.recall)},{as_percent(s.f1)}\n")
    if len(skipped) > 0.1 * len(chosen):
        print(f"more than 10% of samples skipped ({len(skipped)}/{len(chosen)})")
        return EXIT_DATA
    return EXIT_OK


def cmd_summarize(args) -> int:
    checkpoint = _require_file(args.checkpoint, "checkpoint")
    config = _load_config(args)
    model, _ = load_checkpoint(checkpoint)
    vocab = _vocab_next_to(checkpoint)
    text = _require_file(args.text, "text file").read_text(encoding="utf-8")
    audio = None
    if args.audio:
        audio = ft.read_wav(_require_file(args.audio, "audio file"))
    video_blocks = None
    if args.video:
        from . import tensor as tt

        video_blocks = tt.load_tensor(_require_file(args.video, "video feature file")).data
    started = time.monotonic()
    inputs = featurize_raw("cli", text, vocab, audio=audio, video_blocks=video_blocks)
    ids = _decode_sample(model, inputs, config)
    summary = vocab.decode(ids)
    elapsed_ms = int((time.monotonic() - started) * 1000)
    if args.json:
        print(json.dumps({"summary": summary, "elapsed_ms": elapsed_ms}))
    else:
        print(summary)
        print(f"[{elapsed_ms} ms]", file=sys.stderr)
    return EXIT_OK


def cmd_serve(args) -> int:
    checkpoint = _require_file(args.checkpoint, "checkpoint")
    config = _load_config(args)
    vocab_path = checkpoint.parent / "vocab.txt"
    _require_file(vocab_path, "vocabulary")
    cache_path = Path(args.cache) if args.cache else checkpoint.parent / "cache.jsonl"
    serve_forever(checkpoint, vocab_path, cache_path, args.port,
                  beams=config.beams, max_len=config.max_len_test,
                  block_trigrams=config.block_trigrams,
                  length_penalty=config.length_penalty)
    return EXIT_OK


def cmd_compact_cache(args) -> int:
    store = CacheStore(_require_file(args.cache, "cache file"))
    kept = store.compact()
    print(f"compacted cache to {kept} entries")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tldrsum",
                                     description="desk-scale multimodal extreme summarizer")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="cache features + vocabulary for a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(fn=cmd_prepare)

    p = sub.add_parser("train", help="train a model from prepared features")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--prepared", help="feature cache dir (default <out>/features)")
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", help="decode a split and score ROUGE")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--config")
    p.add_argument("--prepared")
    p.add_argument("--split", default="test", choices=("train", "valid", "test"))
    p.add_argument("--out", help="write the ROUGE table as CSV here")
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("summarize", help="summarize one sample")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--audio")
    p.add_argument("--video")
    p.add_argument("--config")
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_summarize)

    p = sub.add_parser("serve", help="run the caching inference service")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--cache")
    p.add_argument("--config")
    p.set_defaults(fn=cmd_serve)

    p = sub.add_parser("compact-cache", help="rewrite the cache log, one entry per hash")
    p.add_argument("--cache", required=True)
    p.set_defaults(fn=cmd_compact_cache)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, TrainingError, ft.FeatureError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
