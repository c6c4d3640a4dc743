"""Dataset manifests (JSON lines) and the prepare step that turns raw inputs
into cached feature tensors.

Cache layout under the output directory: vocab.txt plus, per sample,
<id>.text.tnsr (token ids), <id>.audio.tnsr (MFCC frames) and
<id>.video.tnsr (pooled 2048-dim block mean), all in the TNSR binary format.
prepared.jsonl records per-sample modality flags. Nothing in the cache is
time-stamped, so re-running prepare on unchanged inputs is byte-identical.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tt
from .tensor import Tensor
from . import features as ft
from .model import SampleInputs

logger = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")
METADATA_FIELDS = ("title", "authors", "keywords", "venue", "year")


class DataError(ValueError):
    pass


@dataclass
class SampleManifest:
    id: str
    text_path: str
    target: str
    split: str
    audio_path: str | None = None
    video_feat_path: str | None = None
    metadata: dict = field(default_factory=dict)


def _manifest_from_obj(obj: dict, lineno: int) -> SampleManifest:
    for key in ("id", "text_path", "target", "split"):
        if key not in obj:
            raise DataError(f"manifest line {lineno}: missing required field {key!r}")
    if obj["split"] not in SPLITS:
        raise DataError(f"manifest line {lineno}: bad split {obj['split']!r}")
    extras = set(obj) - {"id", "text_path", "target", "split", "audio_path",
                         "video_feat_path", "metadata"}
    if extras:
        raise DataError(f"manifest line {lineno}: unknown fields {sorted(extras)}")
    return SampleManifest(
        id=str(obj["id"]),
        text_path=str(obj["text_path"]),
        target=str(obj["target"]),
        split=str(obj["split"]),
        audio_path=obj.get("audio_path"),
        video_feat_path=obj.get("video_feat_path"),
        metadata=dict(obj.get("metadata") or {}),
    )


def load_manifest(path) -> list[SampleManifest]:
    """Parse and validate one JSON object per line; duplicate ids are fatal."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest {path} does not exist")
    samples: list[SampleManifest] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"manifest line {lineno}: malformed JSON ({exc.msg})") from None
            m = _manifest_from_obj(obj, lineno)
            if m.id in seen:
                raise DataError(f"duplicate sample id {m.id!r}")
            seen.add(m.id)
            samples.append(m)
    if not samples:
        logger.warning("manifest %s is empty", path)
    counts = {s: sum(1 for m in samples if m.split == s) for s in SPLITS}
    logger.info("manifest %s: %d samples (train=%d valid=%d test=%d)",
                path, len(samples), counts["train"], counts["valid"], counts["test"])
    return samples


def manifest_line(m: SampleManifest) -> str:
    obj = {"id": m.id, "text_path": m.text_path, "target": m.target, "split": m.split}
    if m.audio_path is not None:
        obj["audio_path"] = m.audio_path
    if m.video_feat_path is not None:
        obj["video_feat_path"] = m.video_feat_path
    if m.metadata:
        obj["metadata"] = {k: m.metadata[k] for k in METADATA_FIELDS if k in m.metadata}
    return json.dumps(obj, ensure_ascii=False, separators=(", ", ": "))


def save_manifest(path, samples: list[SampleManifest]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for m in samples:
            fh.write(manifest_line(m) + "\n")


# ---------------------------------------------------------------------------
# prepare


@dataclass
class PrepareReport:
    prepared: int = 0
    failures: list[tuple[str, str]] = field(default_factory=list)
    train_failures: int = 0


def _read_text(path) -> str:
    with open(path, "r", encoding="utf-8") as fh:
        return fh.read()


def prepare(samples: list[SampleManifest], out_dir, vocab_size: int = 4096,
            max_source_len: int = ft.MAX_SOURCE_LEN) -> PrepareReport:
    """Build the vocabulary from train-split text+targets only, then cache
    per-sample features. Per-sample failures are recorded, not fatal; the
    caller decides the exit code (train-split failures should be)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = PrepareReport()

    def train_corpus():
        for m in samples:
            if m.split == "train":
                try:
                    yield _read_text(m.text_path)
                except OSError:
                    pass  # recorded as a per-sample failure below
                yield m.target

    vocab = ft.build_vocab(train_corpus(), vocab_size)
    vocab.save(out / "vocab.txt")

    records = []
    for m in samples:
        record = {"id": m.id, "split": m.split, "has_audio": False,
                  "has_video": False, "block_count": 0}
        try:
            ids = ft.tokenize(_read_text(m.text_path), vocab, max_source_len)
            tt.save_tensor(out / f"{m.id}.text.tnsr", Tensor([float(i) for i in ids]))
            if m.audio_path:
                pcm, rate = ft.read_wav(m.audio_path)
                coeffs = ft.mfcc(ft.resample_mono(pcm, rate))
                tt.save_tensor(out / f"{m.id}.audio.tnsr", Tensor(coeffs))
                record["has_audio"] = True
            if m.video_feat_path:
                blocks = tt.load_tensor(m.video_feat_path)
                if blocks.data.ndim != 2 or blocks.shape[1] != ft.VIDEO_FEAT_DIM:
                    raise ft.FeatureError(
                        f"video features must be [B x {ft.VIDEO_FEAT_DIM}], got {blocks.shape}")
                tt.save_tensor(out / f"{m.id}.video.tnsr", Tensor(blocks.data.mean(axis=0)))
                record["has_video"] = True
                record["block_count"] = blocks.shape[0]
            report.prepared += 1
        except Exception as exc:  # per-sample isolation; summarized below
            logger.warning("sample %s failed to prepare: %s", m.id, exc)
            report.failures.append((m.id, str(exc)))
            if m.split == "train":
                report.train_failures += 1
            record["error"] = str(exc)
        records.append(record)

    with open(out / "prepared.jsonl", "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    return report


def featurize_raw(key: str, text: str, vocab: ft.Vocabulary,
                  audio: tuple[np.ndarray, int] | None = None,
                  video_blocks: np.ndarray | None = None,
                  target: str | None = None,
                  max_source_len: int = ft.MAX_SOURCE_LEN,
                  max_target_len: int = 36) -> SampleInputs:
    """Turn in-memory raw inputs into model-ready features (no file IO)."""
    token_ids = ft.tokenize(text, vocab, max_source_len)
    audio_mfcc = None
    if audio is not None:
        pcm, rate = audio
        audio_mfcc = ft.mfcc(ft.resample_mono(pcm, rate))
    video_mean = None
    if video_blocks is not None:
        blocks = np.asarray(video_blocks, dtype=np.float64)
        if blocks.ndim != 2 or blocks.shape[1] != ft.VIDEO_FEAT_DIM:
            raise ft.FeatureError(
                f"video features must be [B x {ft.VIDEO_FEAT_DIM}], got {blocks.shape}")
        video_mean = blocks.mean(axis=0)
    target_ids = ft.encode_target(target, vocab, max_target_len) if target is not None else None
    return SampleInputs(key=key, token_ids=token_ids, audio_mfcc=audio_mfcc,
                        video_mean=video_mean, target_ids=target_ids)


def load_prepared(prepared_dir, samples: list[SampleManifest], vocab: ft.Vocabulary,
                  max_target_len: int) -> dict[str, list[SampleInputs]]:
    """Read its cached features for every sample that prepared cleanly.

    Samples with a missing modality get None there (the model substitutes a
    zero placeholder); samples with no cached text are skipped with a warning.
    """
    prepared_dir = Path(prepared_dir)
    by_split: dict[str, list[SampleInputs]] = {s: [] for s in SPLITS}
    for m in samples:
        text_file = prepared_dir / f"{m.id}.text.tnsr"
        if not text_file.exists():
            logger.warning("sample %s has no prepared features; skipping", m.id)
            continue
        token_ids = [int(v) for v in tt.load_tensor(text_file).data]
        audio_file = prepared_dir / f"{m.id}.audio.tnsr"
        video_file = prepared_dir / f"{m.id}.video.tnsr"
        inputs = SampleInputs(
            key=m.id,
            token_ids=token_ids,
            audio_mfcc=tt.load_tensor(audio_file).data if audio_file.exists() else None,
            video_mean=tt.load_tensor(video_file).data if video_file.exists() else None,
            target_ids=ft.encode_target(m.target, vocab, max_target_len),
        )
        by_split[m.split].append(inputs)
    return by_split
