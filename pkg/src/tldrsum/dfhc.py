"""Hyper-complex transformer encoder.

Linear layers here ("HCL") carry their weight matrix as a sum of n Kronecker
products P_i (x) Q_i, cutting parameters roughly n-fold against a dense map.
The forward pass never materializes the full matrix; `HCLParams.materialize`
exists so tests can check the blockwise path against the dense equivalent.
"""

from __future__ import annotations

import numpy as np

from .rng import Stream
from . import tensor as tt
from .tensor import Tensor
from .layers import LayerNormParams, NEG_INF, positional_encoding, scaled_dot_attention


def hcl_param_count(d_in: int, d_out: int, n: int) -> int:
    """Weights in one sum-of-Kronecker layer (bias excluded)."""
    return n * (n * n + (d_in // n) * (d_out // n))


class HCLParams:
    """Sum-of-Kronecker linear layer: H = sum_i P_i (x) Q_i, plus bias."""

    def __init__(self, stream: Stream, d_in: int, d_out: int, n: int = 4):
        if d_in % n or d_out % n:
            raise tt.ShapeError(f"component count {n} must divide widths {d_in}->{d_out}")
        self.n = n
        self.d_in = d_in
        self.d_out = d_out
        self.p = [tt.gaussian_param(stream.derive("p", i), (n, n)) for i in range(n)]
        self.q = [
            tt.gaussian_param(stream.derive("q", i), (d_out // n, d_in // n))
            for i in range(n)
        ]
        self.b = tt.zeros((d_out,), requires_grad=True)

    def materialize(self) -> Tensor:
        """Dense [d_out x d_in] equivalent of the layer's weight matrix."""
        h = tt.kron(self.p[0], self.q[0])
        for i in range(1, self.n):
            h = tt.add(h, tt.kron(self.p[i], self.q[i]))
        return h

    def param_count(self) -> int:
        return hcl_param_count(self.d_in, self.d_out, self.n)

    def named(self, prefix: str):
        for i in range(self.n):
            yield f"{prefix}.p{i}", self.p[i]
            yield f"{prefix}.q{i}", self.q[i]
        yield f"{prefix}.b", self.b


def hcl_forward(params: HCLParams, x: Tensor) -> Tensor:
    """Apply the layer blockwise: reshape rows into [n x d_in/n] panels and
    push each Kronecker component as two small matmuls.

    Equals x @ materialize().T + b to float64 round-off.
    """
    if x.shape[-1] != params.d_in:
        raise tt.ShapeError(f"hcl_forward input width {x.shape} does not match d_in {params.d_in}")
    t = x.shape[0]
    n = params.n
    m_in = params.d_in // n
    m_out = params.d_out // n
    panels = tt.reshape(x, (t, n, m_in))
    total = None
    for p_i, q_i in zip(params.p, params.q):
        inner = tt.matmul(panels, tt.transpose(q_i))  # [t x n x m_out]
        outer = tt.matmul(p_i, inner)                 # [t x n x m_out]
        total = outer if total is None else tt.add(total, outer)
    return tt.add_bias(tt.reshape(total, (t, params.d_out)), params.b)


class DfhcBlock:
    """Encoder block with HCL projections everywhere.

    Attention: Q/K/V from three HCL layers, per-head scaled dot product,
    heads concatenated through an HCL output map. Feed-forward: HCL -> ReLU
    -> HCL with inner width 4d. Residual + layer norm after each sublayer.
    """

    def __init__(self, stream: Stream, d: int, n_heads: int = 8, n_components: int = 4,
                 ffn_mult: int = 4):
        if d % n_heads:
            raise tt.ShapeError(f"width {d} not divisible by {n_heads} heads")
        self.d = d
        self.n_heads = n_heads
        self.wq = HCLParams(stream.derive("wq"), d, d, n_components)
        self.wk = HCLParams(stream.derive("wk"), d, d, n_components)
        self.wv = HCLParams(stream.derive("wv"), d, d, n_components)
        self.wo = HCLParams(stream.derive("wo"), d, d, n_components)
        self.ffn1 = HCLParams(stream.derive("ffn1"), d, ffn_mult * d, n_components)
        self.ffn2 = HCLParams(stream.derive("ffn2"), ffn_mult * d, d, n_components)
        self.ln1 = LayerNormParams(d)
        self.ln2 = LayerNormParams(d)

    def named(self, prefix: str):
        for tag, part in (
            ("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo),
            ("ffn1", self.ffn1), ("ffn2", self.ffn2),
        ):
            yield from part.named(f"{prefix}.{tag}")
        yield from self.ln1.named(f"{prefix}.ln1")
        yield from self.ln2.named(f"{prefix}.ln2")


def hc_attention(block: DfhcBlock, x: Tensor, mask: np.ndarray | None = None,
                 collect_weights: list | None = None) -> Tensor:
    q = hcl_forward(block.wq, x)
    k = hcl_forward(block.wk, x)
    v = hcl_forward(block.wv, x)
    dk = block.d // block.n_heads
    heads = []
    for h in range(block.n_heads):
        qh = tt.slice_cols(q, h * dk, (h + 1) * dk)
        kh = tt.slice_cols(k, h * dk, (h + 1) * dk)
        vh = tt.slice_cols(v, h * dk, (h + 1) * dk)
        oh, wh = scaled_dot_attention(qh, kh, vh, mask)
        if collect_weights is not None:
            collect_weights.append(wh.data)
        heads.append(oh)
    out = hcl_forward(block.wo, tt.concat_cols(heads))
    return block.ln1.apply(tt.add(x, out))


def hc_ffn(block: DfhcBlock, x: Tensor) -> Tensor:
    out = hcl_forward(block.ffn2, tt.relu(hcl_forward(block.ffn1, x)))
    return block.ln2.apply(tt.add(x, out))


def apply_block(block: DfhcBlock, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    return hc_ffn(block, hc_attention(block, x, mask))


def dfhc_encode(blocks: list[DfhcBlock], token_ids, embed: Tensor,
                pad_id: int = 0, mask_pad: bool = True) -> Tensor:
    """Token embedding + sinusoidal positions, then the block stack.

    Returns the [T x d] text-stream states handed to fusion. PAD positions,
    when masking is on, contribute no attention weight anywhere.
    """
    ids = list(token_ids)
    if not ids:
        raise tt.ShapeError("dfhc_encode on empty token sequence")
    d = embed.shape[1]
    x = tt.gather_rows(embed, ids)
    x = tt.add(x, Tensor(positional_encoding(len(ids), d)))
    mask = None
    if mask_pad:
        valid = np.asarray(ids) != pad_id
        if not valid.all():
            mask = np.zeros((len(ids), len(ids)))
            mask[:, ~valid] = NEG_INF
    for block in blocks:
        x = apply_block(block, x, mask)
    return x
