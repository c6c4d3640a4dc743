"""Scikit-learn-style facade over the whole pipeline.

`TldrSummarizer` follows the estimator protocol (constructor params stored
verbatim, `fit` returns self, fitted state in trailing-underscore attributes,
`get_params`/`set_params` for cloning and grid search) without importing
sklearn, so the package composes with that ecosystem while staying
dependency-light.

X is a list of sample dicts: {"text": str, "audio": (samples, rate) | None,
"video": [B x 2048] array | None}; y is the list of target summaries.
"""

from __future__ import annotations

import hashlib
import inspect
from pathlib import Path


from .rng import Stream
from .data import featurize_raw
from .decoder import beam_search
from .evaluation import mean_rouge
from . import features as ft
from .model import Model, SampleInputs, load_checkpoint, save_checkpoint
from .training import TrainConfig, Trainer


def _sample_key(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


class TldrSummarizer:
    def __init__(self, d_model=64, n_heads=4, n_components=4, enc_depth=2, dec_depth=2,
                 d_z=16, flow_depth=4, vocab_size=512, fixed_audio_len=32, ffn_mult=4,
                 use_video_stream=True, use_audio_stream=True,
                 epochs=50, accum_steps=1, batch_size=4, max_lr=3e-3, warmup_steps=20,
                 mle_weight=1.0, lambda_mmd=0.1, alpha_kld=0.01, patience=5, max_steps=0,
                 beams=4, max_len_train=36, max_len_test=40, block_trigrams=True,
                 length_penalty=0.7, seed=0):
        # defaults are desk-scale; full-size values live in the CLI run config
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_components = n_components
        self.enc_depth = enc_depth
        self.dec_depth = dec_depth
        self.d_z = d_z
        self.flow_depth = flow_depth
        self.vocab_size = vocab_size
        self.fixed_audio_len = fixed_audio_len
        self.ffn_mult = ffn_mult
        self.use_video_stream = use_video_stream
        self.use_audio_stream = use_audio_stream
        self.epochs = epochs
        self.accum_steps = accum_steps
        self.batch_size = batch_size
        self.max_lr = max_lr
        self.warmup_steps = warmup_steps
        self.mle_weight = mle_weight
        self.lambda_mmd = lambda_mmd
        self.alpha_kld = alpha_kld
        self.patience = patience
        self.max_steps = max_steps
        self.beams = beams
        self.max_len_train = max_len_train
        self.max_len_test = max_len_test
        self.block_trigrams = block_trigrams
        self.length_penalty = length_penalty
        self.seed = seed

    # -- estimator protocol ---------------------------------------------------

    @classmethod
    def _param_names(cls) -> list[str]:
        sig = inspect.signature(cls.__init__)
        return [p for p in sig.parameters if p != "self"]

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params) -> "TldrSummarizer":
        valid = set(self._param_names())
        for name, value in params.items():
            if name not in valid:
                raise ValueError(f"invalid parameter {name!r} for TldrSummarizer")
            setattr(self, name, value)
        return self

    def __repr__(self) -> str:
        shown = ", ".join(f"{k}={v!r}" for k, v in sorted(self.get_params().items()))
        return f"TldrSummarizer({shown})"

    # -- input validation -------------------------------------------------------

    @staticmethod
    def _check_X(X) -> list[dict]:
        if not isinstance(X, (list, tuple)) or not X:
            raise ValueError("X must be a non-empty list of sample dicts")
        out = []
        for i, x in enumerate(X):
            if isinstance(x, str):
                x = {"text": x}
            if not isinstance(x, dict) or "text" not in x:
                raise ValueError(f"X[{i}] must be a dict with a 'text' key (or a plain string)")
            if not isinstance(x["text"], str):
                raise ValueError(f"X[{i}]['text'] must be a string")
            out.append(x)
        return out

    def _config(self) -> TrainConfig:
        params = {k: getattr(self, k) for k in TrainConfig.__dataclass_fields__
                  if hasattr(self, k)}
        config = TrainConfig(**params)
        config.validate()
        return config

    def _featurize(self, x: dict, target: str | None) -> SampleInputs:
        return featurize_raw(
            key=_sample_key(x["text"]),
            text=x["text"],
            vocab=self.vocab_,
            audio=x.get("audio"),
            video_blocks=x.get("video"),
            target=target,
            max_target_len=self.max_len_train,
        )

    # -- fit / predict ----------------------------------------------------------

    def fit(self, X, y, validation=None) -> "TldrSummarizer":
        """Train on (sample dicts, target summaries); returns self.

        `validation`, when given, is the same (X, y) structure and drives the
        early-stop patience; otherwise training runs to the epoch/step cap.
        """
        X = self._check_X(X)
        if not isinstance(y, (list, tuple)) or len(y) != len(X):
            raise ValueError("y must be a list of target strings aligned with X")
        config = self._config()
        corpus = [x["text"] for x in X] + [str(t) for t in y]
        self.vocab_ = ft.build_vocab(corpus, self.vocab_size)
        config.vocab_size = len(self.vocab_)
        train_samples = [self._featurize(x, str(t)) for x, t in zip(X, y)]
        valid_samples = None
        if validation is not None:
            vx, vy = validation
            vx = self._check_X(vx)
            valid_samples = [self._featurize(x, str(t)) for x, t in zip(vx, vy)]
        model = Model(config.model_config(), self.seed)
        trainer = Trainer(model, config, train_samples, valid_samples)
        self.history_ = trainer.run()
        self.model_ = model
        return self

    def _require_fitted(self) -> None:
        if not hasattr(self, "model_"):
            raise RuntimeError("this TldrSummarizer instance is not fitted yet")

    def predict_sample(self, inputs: SampleInputs) -> str:
        self._require_fitted()
        eps = Stream(self.model_.seed, "eps", inputs.key)
        memory, _ = self.model_.forward_memory(inputs, eps)
        ids = beam_search(self.model_.decoder, memory, self.model_.embedding,
                          beams=self.beams, max_len=self.max_len_test,
                          block_trigrams=self.block_trigrams,
                          length_penalty=self.length_penalty)
        return self.vocab_.decode(ids)

    def predict(self, X) -> list[str]:
        self._require_fitted()
        return [self.predict_sample(self._featurize(x, None)) for x in self._check_X(X)]

    def score(self, X, y) -> float:
        """Mean ROUGE-1 F1 (fraction in [0,1]) of predictions against y."""
        preds = self.predict(X)
        return mean_rouge(preds, [str(t) for t in y])["rouge1"].f1

    # -- persistence --------------------------------------------------------------

    def save(self, run_dir) -> None:
        self._require_fitted()
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(run_dir / "checkpoint.mtlg", self.model_)
        self.vocab_.save(run_dir / "vocab.txt")

    @classmethod
    def load(cls, run_dir, **params) -> "TldrSummarizer":
        run_dir = Path(run_dir)
        est = cls(**params)
        est.model_, _ = load_checkpoint(run_dir / "checkpoint.mtlg")
        est.vocab_ = ft.Vocabulary.load(run_dir / "vocab.txt")
        for name in ModelFieldMirror:
            setattr(est, name, getattr(est.model_.config, name))
        est.seed = est.model_.seed
        est.history_ = []
        return est


ModelFieldMirror = ("d_model", "n_heads", "n_components", "enc_depth", "dec_depth",
                    "d_z", "flow_depth", "vocab_size", "fixed_audio_len", "ffn_mult",
                    "use_video_stream", "use_audio_stream")
