"""Full summarizer assembly and the MTLG checkpoint format.

The model runs two text encoders in parallel: the hyper-complex stack
conditioned on the pooled video vector, and the flow encoder conditioned on
the audio frames. Their outputs are concatenated into the decoder memory.
Per-sample randomness (posterior noise, prior draws) is keyed by
(seed, purpose, sample key, step) so batch order and accumulation grouping
can never change results.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, asdict

import numpy as np

from .rng import Stream
from . import tensor as tt
from .tensor import Tensor
from .layers import Linear, positional_encoding
from . import features as ft
from .dfhc import DfhcBlock, dfhc_encode
from .wret import WretParams, wret_encode, LatentState
from .fusion import FusionParams, FusedMemory, cross_modal_attention, fuse_streams
from .decoder import DecoderParams

CHECKPOINT_MAGIC = b"MTLG"
CHECKPOINT_VERSION = 1
SEGMENT_ORDER = ("meta", "embeddings", "dfhc", "wret", "fusion", "decoder", "optimizer")


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    d_model: int = 512
    n_heads: int = 8
    n_components: int = 4
    enc_depth: int = 2
    dec_depth: int = 2
    d_z: int = 64
    flow_depth: int = 4
    vocab_size: int = 4096
    fixed_audio_len: int = 256
    ffn_mult: int = 4
    use_video_stream: bool = True
    use_audio_stream: bool = True

    def validate(self) -> None:
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")
        if self.d_model % self.n_components:
            raise ValueError(f"d_model {self.d_model} not divisible by n={self.n_components}")
        if not (self.use_video_stream or self.use_audio_stream):
            raise ValueError("at least one encoder stream must be enabled")


@dataclass
class SampleInputs:
    """Model-ready features for one sample."""

    key: str                              # stable id for RNG stream derivation
    token_ids: list[int]
    audio_mfcc: np.ndarray | None = None  # [T x 40], None when modality missing
    video_mean: np.ndarray | None = None  # [2048] pooled blocks, None when missing
    target_ids: list[int] | None = None


class Model:
    def __init__(self, config: ModelConfig, seed: int):
        config.validate()
        self.config = config
        self.seed = seed
        root = Stream(seed, "model")
        d = config.d_model
        self.embedding = tt.gaussian_param(root.derive("embedding"), (config.vocab_size, d))
        self.audio_proj = Linear(root.derive("audio_proj"), ft.N_MFCC, d)
        self.video_proj = Linear(root.derive("video_proj"), ft.VIDEO_FEAT_DIM, d)
        self.dfhc_blocks = [
            DfhcBlock(root.derive("dfhc", i), d, config.n_heads, config.n_components,
                      config.ffn_mult)
            for i in range(config.enc_depth)
        ]
        self.wret = WretParams(root.derive("wret"), d, config.d_z, config.n_heads,
                               config.flow_depth, config.ffn_mult)
        self.fusion = FusionParams(root.derive("fusion"), d, d, d)
        self.decoder = DecoderParams(root.derive("decoder"), d, config.vocab_size,
                                     config.n_heads, config.dec_depth, config.ffn_mult)

    # -- parameters ---------------------------------------------------------

    def segments(self) -> dict[str, list[tuple[str, Tensor]]]:
        segs: dict[str, list[tuple[str, Tensor]]] = {
            "embeddings": [("token", self.embedding)]
            + list(self.audio_proj.named("audio_proj"))
            + list(self.video_proj.named("video_proj")),
            "dfhc": [nt for i, b in enumerate(self.dfhc_blocks) for nt in b.named(f"block{i}")],
            "wret": list(self.wret.named("wret")),
            "fusion": list(self.fusion.named("fusion")),
            "decoder": list(self.decoder.named("decoder")),
        }
        return segs

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [(f"{seg}/{name}", t) for seg, entries in self.segments().items()
                for name, t in entries]

    def enforce_constraints(self) -> None:
        """Post-update projections (flow invertibility)."""
        self.wret.flows.enforce_invertible()

    # -- forward ------------------------------------------------------------

    def embed_sequence(self, ids: list[int]) -> Tensor:
        x = tt.gather_rows(self.embedding, ids)
        return tt.add(x, Tensor(positional_encoding(len(ids), self.config.d_model)))

    def audio_frames(self, inputs: SampleInputs) -> Tensor:
        if inputs.audio_mfcc is None:
            return tt.zeros((self.config.fixed_audio_len, self.config.d_model))
        feats = ft.project_audio(inputs.audio_mfcc, self.audio_proj,
                                 self.config.fixed_audio_len)
        return feats.frames

    def video_vector(self, inputs: SampleInputs) -> Tensor:
        if inputs.video_mean is None:
            mean = tt.zeros((ft.VIDEO_FEAT_DIM,))
        else:
            mean = Tensor(inputs.video_mean)
        return self.video_proj.apply_vec(mean)

    def forward_memory(self, inputs: SampleInputs,
                       eps_stream: Stream | None = None) -> tuple[FusedMemory, LatentState | None]:
        """Encode one sample into decoder memory (+ the latent state when the
        audio stream is on). `eps_stream` supplies posterior noise; None
        decodes with a stream derived from the sample key alone."""
        cfg = self.config
        if eps_stream is None:
            eps_stream = Stream(self.seed, "eps", inputs.key)
        dfhc_out = None
        wret_out = None
        latent = None
        if cfg.use_video_stream:
            text_states = dfhc_encode(self.dfhc_blocks, inputs.token_ids, self.embedding)
            video = tt.reshape(self.video_vector(inputs), (1, cfg.d_model))
            dfhc_out = cross_modal_attention(text_states, video, self.fusion.video)
        if cfg.use_audio_stream:
            base = self.embed_sequence(inputs.token_ids)
            states, latent = wret_encode(self.wret, base, eps_stream)
            wret_out = cross_modal_attention(states, self.audio_frames(inputs),
                                             self.fusion.audio)
        memory = fuse_streams(self.fusion, dfhc_out, wret_out)
        return memory, latent


# ---------------------------------------------------------------------------
# checkpoint file


def _pack_name(name: str) -> bytes:
    raw = name.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def _meta_entries(model: Model) -> list[tuple[str, Tensor]]:
    entries = [("seed", tt.scalar(model.seed))]
    for key, value in asdict(model.config).items():
        entries.append((key, tt.scalar(float(value))))
    return entries


def save_checkpoint(path, model: Model, optimizer_entries: list[tuple[str, Tensor]] | None = None) -> None:
    segs = model.segments()
    ordered: list[tuple[str, list[tuple[str, Tensor]]]] = [("meta", _meta_entries(model))]
    for name in ("embeddings", "dfhc", "wret", "fusion", "decoder"):
        ordered.append((name, segs[name]))
    ordered.append(("optimizer", optimizer_entries or []))

    blob = bytearray()
    blob += struct.pack("<4sII", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(ordered))
    for seg_name, entries in ordered:
        blob += _pack_name(seg_name)
        blob += struct.pack("<I", len(entries))
        for name, t in entries:
            blob += _pack_name(name)
            blob += tt.tensor_to_bytes(t)
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def read_checkpoint(path) -> dict[str, dict[str, Tensor]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12:
        raise CheckpointError(f"checkpoint {path} is truncated")
    magic, version, n_segments = struct.unpack_from("<4sII", blob, 0)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} unsupported (expected {CHECKPOINT_VERSION})")
    offset = 12
    segments: dict[str, dict[str, Tensor]] = {}
    for _ in range(n_segments):
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        seg_name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (n_entries,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        entries: dict[str, Tensor] = {}
        for _ in range(n_entries):
            (elen,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            entry_name = blob[offset : offset + elen].decode("utf-8")
            offset += elen
            t, offset = tt.tensor_from_bytes(blob, offset)
            entries[entry_name] = t
        segments[seg_name] = entries
    return segments


def load_checkpoint(path) -> tuple[Model, dict[str, Tensor]]:
    """Rebuild a model from a checkpoint; returns (model, optimizer entries)."""
    segments = read_checkpoint(path)
    missing = [s for s in SEGMENT_ORDER if s not in segments]
    if missing:
        raise CheckpointError(f"checkpoint missing segments: {missing}")
    meta = segments["meta"]
    kwargs = {}
    for f in ModelConfig.__dataclass_fields__.values():
        if f.name not in meta:
            raise CheckpointError(f"checkpoint meta missing field {f.name}")
        raw = meta[f.name].item()
        if f.type == "bool":
            kwargs[f.name] = bool(raw)
        elif f.type == "int":
            kwargs[f.name] = int(raw)
        else:
            kwargs[f.name] = raw
    config = ModelConfig(**kwargs)
    model = Model(config, int(meta["seed"].item()))
    for seg_name in ("embeddings", "dfhc", "wret", "fusion", "decoder"):
        stored = segments[seg_name]
        live = dict(model.segments()[seg_name])
        if set(stored) != set(live):
            extra = set(stored) - set(live)
            lacking = set(live) - set(stored)
            raise CheckpointError(f"segment {seg_name} names mismatch: extra={extra} missing={lacking}")
        for name, t in stored.items():
            target = live[name]
            if target.shape != t.shape:
                raise CheckpointError(f"{seg_name}/{name} shape {t.shape} != model {target.shape}")
            target.data = t.data
    return model, segments["optimizer"]
