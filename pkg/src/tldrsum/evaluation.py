"""ROUGE-1/2/L scoring and corpus statistics (novel n-gram abstractness,
token-length averages).

Normalization: lowercase, split on non-alphanumerics, drop empties. Scores
are fractions in [0,1]; `as_percent` renders the two-decimal half-up x100
form the tables use.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from decimal import Decimal, ROUND_HALF_UP

_SPLIT = re.compile(r"[^0-9a-z]+")


def normalize(text: str) -> list[str]:
    return [t for t in _SPLIT.split(text.lower()) if t]


def ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


@dataclass
class RougeScore:
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_pr(cls, precision: float, recall: float) -> "RougeScore":
        denom = precision + recall
        f1 = 2.0 * precision * recall / denom if denom > 0 else 0.0
        return cls(precision=precision, recall=recall, f1=f1)


ZERO_SCORE = RougeScore(0.0, 0.0, 0.0)


def as_percent(fraction: float) -> float:
    """x100, rounded half-up to two decimals (table precision)."""
    cleaned = Decimal(str(round(fraction * 100.0, 9)))
    return float(cleaned.quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def rouge_n(candidate: str, reference: str, n: int) -> RougeScore:
    """Clipped n-gram overlap; precision over candidate grams, recall over
    reference grams. Empty reference scores zero."""
    cand = ngrams(normalize(candidate), n)
    ref = ngrams(normalize(reference), n)
    if not ref:
        return ZERO_SCORE
    overlap = sum(min(count, ref[gram]) for gram, count in cand.items())
    cand_total = sum(cand.values())
    precision = overlap / cand_total if cand_total else 0.0
    recall = overlap / sum(ref.values())
    return RougeScore.from_pr(precision, recall)


def lcs_length(a: list[str], b: list[str]) -> int:
    """Longest common subsequence via the classic DP table."""
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, 1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(candidate: str, reference: str) -> RougeScore:
    cand = normalize(candidate)
    ref = normalize(reference)
    if not ref:
        return ZERO_SCORE
    lcs = lcs_length(cand, ref)
    precision = lcs / len(cand) if cand else 0.0
    recall = lcs / len(ref)
    return RougeScore.from_pr(precision, recall)


def novel_ngram_pct(source: str, target: str, n_set=(1, 2, 3, 4)) -> float:
    """Percent of target n-gram occurrences (union over n_set) absent from the
    source's n-gram sets."""
    src = normalize(source)
    tgt = normalize(target)
    if not tgt:
        raise ValueError("novel_ngram_pct on empty target")
    total = 0
    novel = 0
    for n in n_set:
        seen = set(ngrams(src, n))
        for i in range(len(tgt) - n + 1):
            gram = tuple(tgt[i : i + n])
            total += 1
            if gram not in seen:
                novel += 1
    if total == 0:
        raise ValueError("target shorter than every n in n_set")
    return 100.0 * novel / total


@dataclass
class CorpusStats:
    sample_count: int
    avg_source_tokens: float
    avg_target_tokens: float
    novel_pct: float


def corpus_stats(pairs: list[tuple[str, str]]) -> CorpusStats:
    """Token-length averages and mean per-sample abstractness."""
    if not pairs:
        raise ValueError("empty corpus")
    src_tokens = [len(normalize(s)) for s, _ in pairs]
    tgt_tokens = [len(normalize(t)) for _, t in pairs]
    novel = [novel_ngram_pct(s, t) for s, t in pairs]
    n = len(pairs)
    return CorpusStats(
        sample_count=n,
        avg_source_tokens=sum(src_tokens) / n,
        avg_target_tokens=sum(tgt_tokens) / n,
        novel_pct=sum(novel) / n,
    )


def mean_rouge(candidates: list[str], references: list[str]) -> dict[str, RougeScore]:
    """Component-wise mean ROUGE-1/2/L over aligned candidate/reference lists,
    summed in index order for deterministic aggregation."""
    if len(candidates) != len(references) or not candidates:
        raise ValueError("candidate/reference lists must be aligned and non-empty")
    out: dict[str, RougeScore] = {}
    scorers = {
        "rouge1": lambda c, r: rouge_n(c, r, 1),
        "rouge2": lambda c, r: rouge_n(c, r, 2),
        "rougeL": rouge_l,
    }
    n = len(candidates)
    for name, fn in scorers.items():
        p = r = f = 0.0
        for cand, ref in zip(candidates, references):
            s = fn(cand, ref)
            p += s.precision
            r += s.recall
            f += s.f1
        out[name] = RougeScore(precision=p / n, recall=r / n, f1=f / n)
    return out
