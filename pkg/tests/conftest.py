"""Shared fixtures: a synthetic multimodal corpus on disk and tiny model
builders."""

import json

import numpy as np
import pytest

from tldrsum import features as ft
from tldrsum import tensor as tt
from tldrsum.data import SampleManifest, save_manifest
from tldrsum.rng import Stream
from tldrsum.tensor import Tensor

TOPICS = ["plasma", "quorum", "lattice", "kernel", "magnon", "cohort",
          "tensor", "branch", "signal", "garden"]


def synthetic_corpus(root, n=10, with_audio=True, with_video=True, seed=71):
    """Write n samples (text file, sine-tone WAV, random video blocks) plus a
    manifest; returns (manifest_path, list[SampleManifest])."""
    root.mkdir(parents=True, exist_ok=True)
    stream = Stream(seed, "corpus")
    samples = []
    for i, topic in enumerate(TOPICS[:n]):
        text = (f"section one reviews the {topic} pipeline . "
                f"section two measures {topic} throughput under load . "
                f"the study of {topic} concludes with ablations .")
        text_path = root / f"{topic}.txt"
        text_path.write_text(text, encoding="utf-8")

        audio_path = None
        if with_audio:
            tone = 220.0 + 40.0 * i
            t = np.arange(8000) / 16000.0
            pcm = 0.4 * np.sin(2 * np.pi * tone * t)
            audio_path = root / f"{topic}.wav"
            ft.write_wav(audio_path, pcm, 16000)

        video_path = None
        if with_video:
            blocks = stream.derive("video", i).normal(3 * 2048).reshape(3, 2048)
            video_path = root / f"{topic}.video.tnsr"
            tt.save_tensor(video_path, Tensor(blocks))

        samples.append(SampleManifest(
            id=f"sample-{topic}",
            text_path=str(text_path),
            target=f"we analyze the {topic} pipeline",
            split="train",
            audio_path=str(audio_path) if audio_path else None,
            video_feat_path=str(video_path) if video_path else None,
            metadata={"title": f"{topic} study", "year": 2024},
        ))
    manifest_path = root / "manifest.jsonl"
    save_manifest(manifest_path, samples)
    return manifest_path, samples


@pytest.fixture
def corpus(tmp_path):
    return synthetic_corpus(tmp_path / "corpus", n=4)


@pytest.fixture
def tiny_run_config(tmp_path):
    """A desk-scale run config file for CLI-level tests."""
    path = tmp_path / "run.cfg"
    lines = {
        "d_model": 16, "n_heads": 2, "n_components": 2, "enc_depth": 1, "dec_depth": 1,
        "d_z": 4, "flow_depth": 2, "vocab_size": 160, "fixed_audio_len": 4, "ffn_mult": 2,
        "epochs": 60, "accum_steps": 1, "batch_size": 2, "max_lr": 5e-3, "warmup_steps": 10,
        "mle_weight": 1.0, "lambda_mmd": 0.1, "alpha_kld": 0.01, "seed": 5, "max_steps": 40,
        "beams": 2, "max_len_test": 16,
    }
    path.write_text("".join(f"{k}={v}\n" for k, v in lines.items()), encoding="utf-8")
    return path


def read_jsonl(path):
    with open(path, "r", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
