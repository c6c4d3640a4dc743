"""Raw-modality ingestion: WAV audio to MFCC frames, precomputed video-block
vectors to a pooled global vector, and plain text to subword ids.

Audio chain: resample to 16 kHz mono, 30 ms Hann windows every 10 ms,
512-point magnitude DFT, 80 triangular mel filters up to 8 kHz, log with a
1e-10 floor, DCT-II keeping 40 coefficients. A learned 40->d affine then lifts
frames to model width, so the sequence the encoder sees is d-wide while the
DSP stays standard.

The tokenizer is a self-built byte-pair vocabulary; words are split on
whitespace and the first character of each word carries a "▁" marker so
decoding can restore spaces exactly.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .tensor import Tensor
from .layers import Linear

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3
SPECIAL_TOKENS = ["<pad>", "<s>", "</s>", "<unk>"]

MAX_SOURCE_LEN = 512
TARGET_RATE = 16000
FRAME_MS = 30
HOP_MS = 10
FRAME_LEN = TARGET_RATE * FRAME_MS // 1000   # 480
HOP_LEN = TARGET_RATE * HOP_MS // 1000       # 160
N_FFT = 512
N_MELS = 80
N_MFCC = 40
LOG_FLOOR = 1e-10
FIXED_AUDIO_LEN = 256
VIDEO_FEAT_DIM = 2048

SUPPORTED_RATES = {8000, 16000, 22050, 44100, 48000}

WORD_MARK = "▁"


class FeatureError(ValueError):
    pass


# ---------------------------------------------------------------------------
# audio


def read_wav(path) -> tuple[np.ndarray, int]:
    """16-bit PCM WAV -> (float samples in [-1, 1), rate). Stereo keeps both
    channels as columns."""
    with wave.open(str(path) if not hasattr(path, "read") else path, "rb") as wf:
        channels = wf.getnchannels()
        width = wf.getsampwidth()
        rate = wf.getframerate()
        n = wf.getnframes()
        raw = wf.readframes(n)
    if width != 2:
        raise FeatureError(f"expected 16-bit PCM, got sample width {width}")
    if channels not in (1, 2):
        raise FeatureError(f"expected 1 or 2 channels, got {channels}")
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if channels == 2:
        data = data.reshape(-1, 2)
    return data, rate


def write_wav(path, samples: np.ndarray, rate: int) -> None:
    pcm = np.clip(np.asarray(samples) * 32768.0, -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1 if pcm.ndim == 1 else pcm.shape[1])
        wf.setsampwidth(2)
        wf.setframerate(rate)
        wf.writeframes(pcm.tobytes())


def resample_mono(pcm: np.ndarray, rate: int) -> np.ndarray:
    """Average channels, then linear-interpolation resample to 16 kHz.

    Output length is round(len * 16000 / rate); 16 kHz mono input passes
    through untouched.
    """
    if rate not in SUPPORTED_RATES:
        raise FeatureError(f"unsupported sample rate {rate}")
    pcm = np.asarray(pcm, dtype=np.float64)
    if pcm.size == 0:
        raise FeatureError("empty audio signal")
    if pcm.ndim == 2:
        pcm = pcm.mean(axis=1)
    elif pcm.ndim != 1:
        raise FeatureError(f"audio must be rank 1 or 2, got rank {pcm.ndim}")
    if rate == TARGET_RATE:
        return pcm
    n = pcm.shape[0]
    out_len = int(round(n * TARGET_RATE / rate))
    positions = np.arange(out_len) * (rate / TARGET_RATE)
    return np.interp(positions, np.arange(n), pcm)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (np.power(10.0, np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT, rate: int = TARGET_RATE,
                   fmin: float = 0.0, fmax: float = 8000.0) -> np.ndarray:
    """Triangular filters [n_mels x (n_fft//2 + 1)] on equally spaced mel points."""
    points = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    bins = np.arange(n_fft // 2 + 1) * rate / n_fft
    bank = np.zeros((n_mels, bins.shape[0]))
    for m in range(n_mels):
        left, center, right = points[m], points[m + 1], points[m + 2]
        up = (bins - left) / max(center - left, 1e-12)
        down = (right - bins) / max(right - center, 1e-12)
        bank[m] = np.maximum(0.0, np.minimum(up, down))
    return bank


def filter_band(n_mels: int = N_MELS, fmin: float = 0.0, fmax: float = 8000.0):
    """(left, right) support edges in Hz for each mel filter."""
    points = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    return [(points[m], points[m + 2]) for m in range(n_mels)]


def dct_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Orthonormal DCT-II rows: C[k,n] = s_k cos(pi k (2n+1) / (2 N))."""
    k = np.arange(n_out)[:, None]
    n = np.arange(n_in)[None, :]
    c = np.cos(np.pi * k * (2 * n + 1) / (2 * n_in))
    c[0] *= np.sqrt(1.0 / n_in)
    c[1:] *= np.sqrt(2.0 / n_in)
    return c


def frame_signal(pcm: np.ndarray) -> np.ndarray:
    if pcm.shape[0] < FRAME_LEN:
        raise FeatureError(f"signal of {pcm.shape[0]} samples is shorter than one {FRAME_LEN}-sample window")
    t = (pcm.shape[0] - FRAME_LEN) // HOP_LEN + 1
    idx = np.arange(FRAME_LEN)[None, :] + HOP_LEN * np.arange(t)[:, None]
    return pcm[idx]


def mel_energies(pcm16k: np.ndarray) -> np.ndarray:
    """Per-frame mel filter outputs [T x 80] (pre-log, pre-DCT)."""
    frames = frame_signal(np.asarray(pcm16k, dtype=np.float64))
    windowed = frames * np.hanning(FRAME_LEN)
    mag = np.abs(np.fft.rfft(windowed, n=N_FFT, axis=1))
    return mag @ mel_filterbank().T


def mfcc(pcm16k: np.ndarray) -> np.ndarray:
    """[T x 40] cepstral frames; T = floor((len-480)/160) + 1."""
    logmel = np.log(np.maximum(mel_energies(pcm16k), LOG_FLOOR))
    return logmel @ dct_matrix(N_MFCC, N_MELS).T


@dataclass
class AudioFeatures:
    frames: Tensor            # [fixed_audio_len x d] after projection
    source_rate: int
    frame_ms: int = FRAME_MS
    hop_ms: int = HOP_MS


def project_audio(coeffs: np.ndarray, proj: Linear, fixed_len: int = FIXED_AUDIO_LEN,
                  source_rate: int = TARGET_RATE) -> AudioFeatures:
    """Affine-map each MFCC frame to model width, then zero-pad or clip the
    sequence to exactly `fixed_len` frames."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    frames = proj.apply(Tensor(coeffs))
    t = frames.shape[0]
    if t > fixed_len:
        frames = tt.slice_rows(frames, 0, fixed_len)
    elif t < fixed_len:
        frames = tt.concat_rows([frames, tt.zeros((fixed_len - t, frames.shape[1]))])
    return AudioFeatures(frames=frames, source_rate=source_rate)


# ---------------------------------------------------------------------------
# video


@dataclass
class VideoFeatures:
    global_vec: Tensor        # [d] pooled + projected
    block_count: int


def ingest_video(blocks, proj: Linear) -> VideoFeatures:
    """Mean-pool the per-block 2048-dim vectors, then project to model width."""
    data = blocks.data if isinstance(blocks, Tensor) else np.asarray(blocks, dtype=np.float64)
    if data.ndim != 2 or data.shape[1] != VIDEO_FEAT_DIM:
        raise FeatureError(f"video blocks must be [B x {VIDEO_FEAT_DIM}], got {data.shape}")
    if data.shape[0] < 1:
        raise FeatureError("video feature file holds no blocks")
    pooled = tt.mean_rows(blocks if isinstance(blocks, Tensor) else Tensor(data))
    return VideoFeatures(global_vec=proj.apply_vec(pooled), block_count=data.shape[0])


# ---------------------------------------------------------------------------
# text: byte-pair vocabulary


def word_symbols(word: str) -> tuple[str, ...]:
    return (WORD_MARK + word[0],) + tuple(word[1:])


def count_pairs(word_freqs: dict[tuple[str, ...], int]) -> dict[tuple[str, str], int]:
    """Adjacent-symbol pair frequencies, weighted by word frequency."""
    counts: dict[tuple[str, str], int] = {}
    for symbols, freq in word_freqs.items():
        for a, b in zip(symbols, symbols[1:]):
            counts[(a, b)] = counts.get((a, b), 0) + freq
    return counts


def _merge_word(symbols: tuple[str, ...], pair: tuple[str, str]) -> tuple[str, ...]:
    out, i = [], 0
    while i < len(symbols):
        if i + 1 < len(symbols) and (symbols[i], symbols[i + 1]) == pair:
            out.append(symbols[i] + symbols[i + 1])
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return tuple(out)


class Vocabulary:
    def __init__(self, tokens: list[str], merges: list[tuple[str, str]]):
        self.id_to_token = list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(tokens)}
        self.merges = list(merges)
        self.merge_rank = {pair: r for r, pair in enumerate(merges)}

    def __len__(self) -> int:
        return len(self.id_to_token)

    def encode_word(self, word: str) -> list[int]:
        symbols = list(word_symbols(word))
        while len(symbols) > 1:
            best_rank, best_idx = None, None
            for i in range(len(symbols) - 1):
                rank = self.merge_rank.get((symbols[i], symbols[i + 1]))
                if rank is not None and (best_rank is None or rank < best_rank):
                    best_rank, best_idx = rank, i
            if best_idx is None:
                break
            symbols[best_idx : best_idx + 2] = [symbols[best_idx] + symbols[best_idx + 1]]
        return [self.token_to_id.get(s, UNK_ID) for s in symbols]

    def encode(self, text: str) -> list[int]:
        ids: list[int] = []
        for word in text.split():
            ids.extend(self.encode_word(word))
        return ids

    def decode(self, ids) -> str:
        pieces = []
        for i in ids:
            if i in (PAD_ID, BOS_ID, EOS_ID):
                continue
            pieces.append(self.id_to_token[i] if 0 <= i < len(self.id_to_token) else SPECIAL_TOKENS[UNK_ID])
        return "".join(pieces).replace(WORD_MARK, " ").strip()

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i, tok in enumerate(self.id_to_token):
                fh.write(f"{tok}\t{i}\n")
            fh.write("#MERGES\n")
            for a, b in self.merges:
                fh.write(f"{a}\t{b}\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        tokens: list[str] = []
        merges: list[tuple[str, str]] = []
        in_merges = False
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if line == "#MERGES":
                    in_merges = True
                    continue
                if not line:
                    continue
                a, b = line.split("\t")
                if in_merges:
                    merges.append((a, b))
                else:
                    if int(b) != len(tokens):
                        raise FeatureError(f"vocabulary ids out of order at {b}")
                    tokens.append(a)
        return cls(tokens, merges)


def build_vocab(corpus, size: int) -> Vocabulary:
    """Greedy pair-frequency BPE over an iterable of texts.

    Deterministic given corpus order; frequency ties pick the
    lexicographically smallest pair.
    """
    if size < 64:
        raise FeatureError(f"vocabulary size {size} below the minimum of 64")
    word_freqs: dict[tuple[str, ...], int] = {}
    seen_any = False
    for text in corpus:
        for word in text.split():
            seen_any = True
            key = word_symbols(word)
            word_freqs[key] = word_freqs.get(key, 0) + 1
    if not seen_any:
        raise FeatureError("empty corpus")

    alphabet = sorted({s for symbols in word_freqs for s in symbols})
    tokens = SPECIAL_TOKENS + alphabet
    merges: list[tuple[str, str]] = []
    while len(tokens) < size:
        counts = count_pairs(word_freqs)
        if not counts:
            break
        top = max(counts.values())
        pair = min(p for p, c in counts.items() if c == top)
        merged: dict[tuple[str, ...], int] = {}
        for symbols, freq in word_freqs.items():
            key = _merge_word(symbols, pair)
            merged[key] = merged.get(key, 0) + freq
        word_freqs = merged
        merges.append(pair)
        tokens.append(pair[0] + pair[1])
    return Vocabulary(tokens, merges)


def tokenize(text: str, vocab: Vocabulary, max_len: int = MAX_SOURCE_LEN) -> list[int]:
    """BOS + subword ids + EOS, truncated at max_len (EOS dropped if truncated)."""
    ids = [BOS_ID] + vocab.encode(text) + [EOS_ID]
    return ids[:max_len]


def encode_target(text: str, vocab: Vocabulary, max_len: int) -> list[int]:
    """Target-side encoding: always BOS-prefixed and EOS-terminated, so the
    trailing ids are truncated (not the EOS) when the summary is too long."""
    ids = vocab.encode(text)
    return [BOS_ID] + ids[: max_len - 2] + [EOS_ID]
