"""Cross-modal attention and decoder-memory assembly.

Text states query a modality's features (single head, no biases, exactly
Q K^T / sqrt(d) softmax-weighted values), land back on the text stream through
a residual + parameter-free layer norm. The two conditioned streams are then
concatenated along time with learned stream-tag vectors to form the memory
the decoder attends over.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import Stream
from . import tensor as tt
from .tensor import Tensor

TAG_DFHC_VIDEO = "dfhc-video"
TAG_WRET_AUDIO = "wret-audio"


class CrossModalWeights:
    """Projections for one text->modality attention pair."""

    def __init__(self, stream: Stream, d: int, d_mod: int):
        self.w_q = tt.gaussian_param(stream.derive("wq"), (d, d))
        self.w_k = tt.gaussian_param(stream.derive("wk"), (d_mod, d))
        self.w_v = tt.gaussian_param(stream.derive("wv"), (d_mod, d))

    def named(self, prefix: str):
        yield f"{prefix}.wq", self.w_q
        yield f"{prefix}.wk", self.w_k
        yield f"{prefix}.wv", self.w_v


def cross_modal_attention(x_text: Tensor, x_mod: Tensor, w: CrossModalWeights,
                          collect_weights: list | None = None) -> Tensor:
    """softmax(x_text W_q (x_mod W_k)^T / sqrt(d)) x_mod W_v, residual-added
    to the text stream and layer-normed (no learned affine)."""
    if x_mod.shape[1] != w.w_k.shape[0]:
        raise tt.ShapeError(f"modality width {x_mod.shape} does not match W_k {w.w_k.shape}")
    if x_text.shape[1] != w.w_q.shape[0]:
        raise tt.ShapeError(f"text width {x_text.shape} does not match W_q {w.w_q.shape}")
    d = w.w_q.shape[1]
    q = tt.matmul(x_text, w.w_q)
    k = tt.matmul(x_mod, w.w_k)
    v = tt.matmul(x_mod, w.w_v)
    scores = tt.scale(tt.matmul(q, tt.transpose(k)), 1.0 / np.sqrt(d))
    weights = tt.softmax_rows(scores)
    if collect_weights is not None:
        collect_weights.append(weights.data)
    ctx = tt.matmul(weights, v)
    return tt.layer_norm(tt.add(x_text, ctx), Tensor(np.ones(d)), Tensor(np.zeros(d)))


@dataclass
class FusedMemory:
    """Time-concatenated encoder states with per-position stream tags."""

    states: Tensor                 # [(T1+T2) x d]
    stream_tags: list[str]         # TAG_DFHC_VIDEO / TAG_WRET_AUDIO per row
    valid: np.ndarray              # bool per row; False rows get no attention

    def __len__(self) -> int:
        return self.states.shape[0]


class FusionParams:
    def __init__(self, stream: Stream, d: int, d_mod_video: int, d_mod_audio: int):
        self.video = CrossModalWeights(stream.derive("video"), d, d_mod_video)
        self.audio = CrossModalWeights(stream.derive("audio"), d, d_mod_audio)
        self.tag_video = tt.gaussian_param(stream.derive("tag_video"), (d,))
        self.tag_audio = tt.gaussian_param(stream.derive("tag_audio"), (d,))

    def named(self, prefix: str):
        yield from self.video.named(f"{prefix}.video")
        yield from self.audio.named(f"{prefix}.audio")
        yield f"{prefix}.tag_video", self.tag_video
        yield f"{prefix}.tag_audio", self.tag_audio


def fuse_streams(params: FusionParams,
                 dfhc_out: Tensor | None,
                 wret_out: Tensor | None,
                 valid_dfhc: np.ndarray | None = None,
                 valid_wret: np.ndarray | None = None) -> FusedMemory:
    """Concatenate the conditioned streams along time, adding each stream's
    learned tag vector. Either stream may be absent (modality ablations), but
    not both."""
    if dfhc_out is None and wret_out is None:
        raise ValueError("fuse_streams with both streams disabled")
    parts, tags, valids = [], [], []
    if dfhc_out is not None:
        parts.append(tt.add_bias(dfhc_out, params.tag_video))
        tags.extend([TAG_DFHC_VIDEO] * dfhc_out.shape[0])
        valids.append(np.ones(dfhc_out.shape[0], dtype=bool) if valid_dfhc is None else valid_dfhc)
    if wret_out is not None:
        parts.append(tt.add_bias(wret_out, params.tag_audio))
        tags.extend([TAG_WRET_AUDIO] * wret_out.shape[0])
        valids.append(np.ones(wret_out.shape[0], dtype=bool) if valid_wret is None else valid_wret)
    states = parts[0] if len(parts) == 1 else tt.concat_rows(parts)
    return FusedMemory(states=states, stream_tags=tags, valid=np.concatenate(valids))
