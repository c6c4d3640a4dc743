"""Transformer decoder over the fused memory, with greedy and beam search.

Decoding recomputes the full prefix each step (cheap at this scale, and it
keeps one code path for stepwise and teacher-forced scoring). Hypotheses are
ranked by sum-of-logprobs divided by emitted-length^length_penalty; trigram
blocking removes any candidate token that would repeat a trigram already in
the hypothesis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import Stream
from . import tensor as tt
from .tensor import Tensor
from .layers import (AttentionParams, FeedForward, LayerNormParams, Linear,
                     causal_mask, pad_mask_rows, positional_encoding)
from .features import BOS_ID, EOS_ID
from .fusion import FusedMemory

MAX_POSITIONS = 512
LENGTH_PENALTY = 0.7


class DecoderBlock:
    """Masked self-attention, cross-attention over memory, feed-forward;
    residual + layer norm after each."""

    def __init__(self, stream: Stream, d: int, n_heads: int, ffn_mult: int = 4):
        self.self_attn = AttentionParams(stream.derive("self"), d, n_heads)
        self.cross_attn = AttentionParams(stream.derive("cross"), d, n_heads)
        self.ffn = FeedForward(stream.derive("ffn"), d, ffn_mult)
        self.ln1 = LayerNormParams(d)
        self.ln2 = LayerNormParams(d)
        self.ln3 = LayerNormParams(d)

    def apply(self, x: Tensor, memory: Tensor, self_mask: np.ndarray,
              mem_mask: np.ndarray | None, collect_cross: list | None = None) -> Tensor:
        h = self.ln1.apply(tt.add(x, self.self_attn.apply(x, x, self_mask)))
        h = self.ln2.apply(tt.add(h, self.cross_attn.apply(h, memory, mem_mask,
                                                           collect_weights=collect_cross)))
        return self.ln3.apply(tt.add(h, self.ffn.apply(h)))

    def named(self, prefix: str):
        yield from self.self_attn.named(f"{prefix}.self")
        yield from self.cross_attn.named(f"{prefix}.cross")
        yield from self.ffn.named(f"{prefix}.ffn")
        yield from self.ln1.named(f"{prefix}.ln1")
        yield from self.ln2.named(f"{prefix}.ln2")
        yield from self.ln3.named(f"{prefix}.ln3")


class DecoderParams:
    def __init__(self, stream: Stream, d: int, vocab_size: int, n_heads: int = 8,
                 depth: int = 2, ffn_mult: int = 4):
        self.d = d
        self.vocab_size = vocab_size
        self.blocks = [DecoderBlock(stream.derive("block", i), d, n_heads, ffn_mult)
                       for i in range(depth)]
        self.out_proj = Linear(stream.derive("out"), d, vocab_size)  # untied

    def named(self, prefix: str):
        for i, block in enumerate(self.blocks):
            yield from block.named(f"{prefix}.block{i}")
        yield from self.out_proj.named(f"{prefix}.out")


def _run_stack(params: DecoderParams, memory: FusedMemory, ids: list[int],
               embed: Tensor, collect_cross: list | None = None) -> Tensor:
    t = len(ids)
    x = tt.gather_rows(embed, ids)
    x = tt.add(x, Tensor(positional_encoding(t, params.d)))
    self_mask = causal_mask(t)
    mem_mask = None if memory.valid.all() else pad_mask_rows(memory.valid, t)
    for block in params.blocks:
        x = block.apply(x, memory.states, self_mask, mem_mask, collect_cross)
    return x


def decode_logits(params: DecoderParams, memory: FusedMemory, prefix: list[int],
                  embed: Tensor) -> Tensor:
    """Next-token logits `[vocab]` after `prefix`; causal, deterministic."""
    if not prefix or prefix[0] != BOS_ID:
        raise ValueError(f"decoder prefix must start with BOS, got {prefix[:3]}")
    if len(prefix) > MAX_POSITIONS:
        raise ValueError(f"prefix of {len(prefix)} exceeds {MAX_POSITIONS} positions")
    h = _run_stack(params, memory, prefix, embed)
    last = tt.slice_rows(h, len(prefix) - 1, len(prefix))
    return tt.reshape(params.out_proj.apply(last), (params.vocab_size,))


def batch_teacher_forced_logits(params: DecoderParams, memory: FusedMemory,
                                target: list[int], embed: Tensor,
                                max_len: int = 36) -> Tensor:
    """One causally-masked pass over the gold sequence.

    Row t carries the logits for position t+1 given target[:t+1]; the result
    has len(target)-1 rows, aligned with target[1:].
    """
    if len(target) < 2 or target[0] != BOS_ID or target[-1] != EOS_ID:
        raise ValueError("target must begin with BOS and end with EOS")
    if len(target) > max_len:
        raise ValueError(f"target length {len(target)} exceeds limit {max_len}")
    h = _run_stack(params, memory, target[:-1], embed)
    return params.out_proj.apply(h)


def _log_probs(logits: Tensor) -> np.ndarray:
    z = logits.data - logits.data.max()
    return z - np.log(np.exp(z).sum())


def _would_repeat_trigram(ids: list[int], token: int) -> bool:
    if len(ids) < 3:
        return False
    candidate = (ids[-2], ids[-1], token)
    return any((ids[i], ids[i + 1], ids[i + 2]) == candidate for i in range(len(ids) - 2))


def trigram_multiset_ok(ids: list[int]) -> bool:
    """True when no trigram occurs twice in the sequence."""
    trigrams = list(zip(ids, ids[1:], ids[2:]))
    return len(trigrams) == len(set(trigrams))


@dataclass
class BeamHypothesis:
    ids: list[int]
    score: float                   # sum of token log-probabilities
    finished: bool                 # last id is EOS or max length reached

    def normalized(self, length_penalty: float) -> float:
        emitted = max(len(self.ids) - 1, 1)
        return self.score / emitted**length_penalty


def _greedy_path(params: DecoderParams, memory: FusedMemory, embed: Tensor,
                 max_len: int, block_trigrams: bool) -> BeamHypothesis:
    ids = [BOS_ID]
    score = 0.0
    while len(ids) < max_len:
        logp = _log_probs(decode_logits(params, memory, ids, embed))
        order = np.argsort(-logp, kind="stable")  # ties resolve to lowest id
        chosen = None
        for tok in order:
            if block_trigrams and _would_repeat_trigram(ids, int(tok)):
                continue
            chosen = int(tok)
            break
        if chosen is None:
            break
        score += float(logp[chosen])
        ids.append(chosen)
        if chosen == EOS_ID:
            break
    return BeamHypothesis(ids=ids, score=score, finished=True)


def greedy_decode(params: DecoderParams, memory: FusedMemory, embed: Tensor,
                  max_len: int = 40) -> list[int]:
    """Argmax per step (ties to the lowest id); stops at EOS or max_len."""
    return _greedy_path(params, memory, embed, max_len, block_trigrams=False).ids


def beam_search(params: DecoderParams, memory: FusedMemory, embed: Tensor,
                beams: int = 4, max_len: int = 40, block_trigrams: bool = True,
                length_penalty: float = LENGTH_PENALTY) -> list[int]:
    """Length-normalized beam search.

    Standard semantics: every extension (EOS included) competes for the
    `beams` slots on raw score; kept EOS-terminated or cap-length hypotheses
    retire to their pools, the rest stay live. The best EOS-terminated
    hypothesis wins; if none was ever kept, the best hypothesis truncated at
    max_len does. A greedy rollout under the same blocking rule is always
    scored as a candidate, so the result never ranks below greedy.
    """
    if beams < 1:
        raise ValueError("beam count must be >= 1")
    live = [BeamHypothesis(ids=[BOS_ID], score=0.0, finished=False)]
    done: list[BeamHypothesis] = []
    capped: list[BeamHypothesis] = []
    # blocking can veto at most len(ids) tokens, so this many top tokens per
    # hypothesis are guaranteed to cover the global top `beams` extensions
    k_sel = min(params.vocab_size, beams + max_len + 2)
    while live and len(live[0].ids) < max_len:
        extensions: list[BeamHypothesis] = []
        for hyp in live:
            logp = _log_probs(decode_logits(params, memory, hyp.ids, embed))
            for tok in np.argsort(-logp, kind="stable")[:k_sel]:
                tok = int(tok)
                if block_trigrams and _would_repeat_trigram(hyp.ids, tok):
                    continue
                extensions.append(BeamHypothesis(ids=hyp.ids + [tok],
                                                 score=hyp.score + float(logp[tok]),
                                                 finished=False))
        extensions.sort(key=lambda h: (-h.score, h.ids))
        live = []
        for ext in extensions[:beams]:
            if ext.ids[-1] == EOS_ID:
                ext.finished = True
                done.append(ext)
            elif len(ext.ids) >= max_len:
                ext.finished = True
                capped.append(ext)
            else:
                live.append(ext)

    def best(pool: list[BeamHypothesis]) -> BeamHypothesis:
        return min(pool, key=lambda h: (-h.normalized(length_penalty), h.ids))

    greedy = _greedy_path(params, memory, embed, max_len, block_trigrams)
    greedy_pool = done if greedy.ids[-1] == EOS_ID else capped
    greedy_pool.append(greedy)
    chosen = best(done) if done else best(capped)
    return chosen.ids
