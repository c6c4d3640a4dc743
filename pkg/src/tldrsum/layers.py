"""Shared dense building blocks: linear maps, multi-head attention, and the
post-norm transformer block used by the flow encoder and the decoder.

Convention throughout: sequences are [T x d] matrices, residual connections
wrap each sublayer, and the layer norm is applied after the residual add
(zeroed sublayer weights reduce a block to layer_norm(x)).
"""

from __future__ import annotations

import numpy as np

from .rng import Stream
from . import tensor as tt
from .tensor import Tensor

NEG_INF = tt.NEG_INF


class Linear:
    """Affine map x -> x W^T + b with W of shape [d_out x d_in]."""

    def __init__(self, stream: Stream, d_in: int, d_out: int):
        self.w = tt.gaussian_param(stream.derive("w"), (d_out, d_in))
        self.b = tt.zeros((d_out,), requires_grad=True)

    def apply(self, x: Tensor) -> Tensor:
        return tt.add_bias(tt.matmul(x, tt.transpose(self.w)), self.b)

    def apply_vec(self, x: Tensor) -> Tensor:
        """Rank-1 input variant."""
        return tt.add(tt.reshape(tt.matmul(tt.reshape(x, (1, x.shape[0])), tt.transpose(self.w)), (self.w.shape[0],)), self.b)

    def named(self, prefix: str):
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b


class LayerNormParams:
    def __init__(self, n: int):
        self.gain = tt.ones((n,), requires_grad=True)
        self.bias = tt.zeros((n,), requires_grad=True)

    def apply(self, x: Tensor) -> Tensor:
        return tt.layer_norm(x, self.gain, self.bias)

    def named(self, prefix: str):
        yield f"{prefix}.gain", self.gain
        yield f"{prefix}.bias", self.bias


def causal_mask(t: int) -> np.ndarray:
    m = np.zeros((t, t))
    m[np.triu_indices(t, k=1)] = NEG_INF
    return m


def pad_mask_rows(key_valid: np.ndarray, t_query: int) -> np.ndarray:
    """Additive [t_query x t_key] mask blocking invalid key positions."""
    m = np.zeros((t_query, key_valid.shape[0]))
    m[:, ~key_valid] = NEG_INF
    return m


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None):
    """softmax(q k^T / sqrt(d_k)) v; returns (output, attention weights)."""
    d_k = q.shape[1]
    scores = tt.scale(tt.matmul(q, tt.transpose(k)), 1.0 / np.sqrt(d_k))
    if mask is not None:
        scores = tt.add(scores, Tensor(mask))
    weights = tt.softmax_rows(scores)
    return tt.matmul(weights, v), weights


class AttentionParams:
    """Dense multi-head attention projections (query/key/value/output)."""

    def __init__(self, stream: Stream, d: int, n_heads: int):
        if d % n_heads:
            raise ValueError(f"width {d} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.wq = Linear(stream.derive("q"), d, d)
        self.wk = Linear(stream.derive("k"), d, d)
        self.wv = Linear(stream.derive("v"), d, d)
        self.wo = Linear(stream.derive("o"), d, d)

    def apply(self, x_q: Tensor, x_kv: Tensor, mask: np.ndarray | None = None,
              collect_weights: list | None = None) -> Tensor:
        q = self.wq.apply(x_q)
        k = self.wk.apply(x_kv)
        v = self.wv.apply(x_kv)
        d = q.shape[1]
        dk = d // self.n_heads
        outs = []
        for h in range(self.n_heads):
            qh = tt.slice_cols(q, h * dk, (h + 1) * dk)
            kh = tt.slice_cols(k, h * dk, (h + 1) * dk)
            vh = tt.slice_cols(v, h * dk, (h + 1) * dk)
            oh, wh = scaled_dot_attention(qh, kh, vh, mask)
            if collect_weights is not None:
                collect_weights.append(wh.data)
            outs.append(oh)
        return self.wo.apply(tt.concat_cols(outs))

    def named(self, prefix: str):
        for tag, lin in (("q", self.wq), ("k", self.wk), ("v", self.wv), ("o", self.wo)):
            yield from lin.named(f"{prefix}.{tag}")


class FeedForward:
    """Two-layer ReLU sandwich, inner width mult*d."""

    def __init__(self, stream: Stream, d: int, mult: int = 4):
        self.inner = Linear(stream.derive("inner"), d, mult * d)
        self.outer = Linear(stream.derive("outer"), mult * d, d)

    def apply(self, x: Tensor) -> Tensor:
        return self.outer.apply(tt.relu(self.inner.apply(x)))

    def named(self, prefix: str):
        yield from self.inner.named(f"{prefix}.inner")
        yield from self.outer.named(f"{prefix}.outer")


class DenseBlock:
    """Post-norm transformer encoder block: attention then feed-forward."""

    def __init__(self, stream: Stream, d: int, n_heads: int, ffn_mult: int = 4):
        self.attn = AttentionParams(stream.derive("attn"), d, n_heads)
        self.ffn = FeedForward(stream.derive("ffn"), d, ffn_mult)
        self.ln1 = LayerNormParams(d)
        self.ln2 = LayerNormParams(d)

    def apply(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        h = self.ln1.apply(tt.add(x, self.attn.apply(x, x, mask)))
        return self.ln2.apply(tt.add(h, self.ffn.apply(h)))

    def named(self, prefix: str):
        yield from self.attn.named(f"{prefix}.attn")
        yield from self.ffn.named(f"{prefix}.ffn")
        yield from self.ln1.named(f"{prefix}.ln1")
        yield from self.ln2.named(f"{prefix}.ln2")


def positional_encoding(t: int, d: int) -> np.ndarray:
    """Fixed sinusoidal positions, [t x d]."""
    pos = np.arange(t)[:, None].astype(np.float64)
    dim = np.arange(d)[None, :].astype(np.float64)
    angle = pos / np.power(10000.0, 2.0 * np.floor(dim / 2.0) / d)
    enc = np.empty((t, d))
    enc[:, 0::2] = np.sin(angle[:, 0::2])
    enc[:, 1::2] = np.cos(angle[:, 1::2])
    return enc
