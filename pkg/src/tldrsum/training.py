"""Loss assembly, warmup/inverse-sqrt learning rate, gradient accumulation,
and the epoch loop.

Determinism contract: sample order is a pure function of (seed, epoch),
posterior noise and MMD prior draws are pure functions of
(seed, purpose, sample key, optimizer step). Resuming from a checkpoint
therefore replays the exact trajectory of an uninterrupted run.
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import Stream
from . import tensor as tt
from .tensor import Tensor, GradTape
from .features import PAD_ID
from .decoder import batch_teacher_forced_logits
from .model import Model, ModelConfig, SampleInputs, save_checkpoint, load_checkpoint
from .wret import wret_objective


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    # optimization
    epochs: int = 55
    accum_steps: int = 5
    max_lr: float = 3e-5
    warmup_steps: int = 10000
    mle_weight: float = 0.1
    lambda_mmd: float = 18.0
    alpha_kld: float = 0.1
    seed: int = 0
    batch_size: int = 4
    patience: int = 5
    max_steps: int = 0              # 0 = epochs/patience decide
    ranking_loss_margin: float = 0.001  # reserved knob; no loss consumes it
    # generation
    beams: int = 4
    max_len_train: int = 36
    max_len_test: int = 40
    block_trigrams: bool = True
    length_penalty: float = 0.7
    # model
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
        for name in ("epochs", "accum_steps", "batch_size", "patience"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.warmup_steps < 1:
            raise ConfigError("warmup_steps must be >= 1")
        if self.max_lr <= 0:
            raise ConfigError("max_lr must be positive")
        if self.mle_weight < 0 or self.lambda_mmd < 0 or self.alpha_kld < 0:
            raise ConfigError("loss weights must be non-negative")

    def model_config(self) -> ModelConfig:
        names = ModelConfig.__dataclass_fields__.keys()
        return ModelConfig(**{n: getattr(self, n) for n in names})


def parse_run_config(path) -> TrainConfig:
    """UTF-8 key=value file; '#' comments; unknown keys are errors."""
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, raw = line.partition("=")
            key = key.strip()
            raw = raw.strip()
            if key not in fields:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            ftype = fields[key].type
            if ftype == "bool":
                if raw.lower() not in ("true", "false", "1", "0"):
                    raise ConfigError(f"{path}:{lineno}: bad boolean {raw!r}")
                values[key] = raw.lower() in ("true", "1")
            elif ftype == "int":
                values[key] = int(raw)
            elif ftype == "float":
                values[key] = float(raw)
            else:
                values[key] = raw
    config = TrainConfig(**values)
    config.validate()
    return config


def save_run_config(path, config: TrainConfig) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for f in dataclasses.fields(TrainConfig):
            value = getattr(config, f.name)
            if f.type == "bool":
                value = "true" if value else "false"
            fh.write(f"{f.name}={value}\n")


# ---------------------------------------------------------------------------
# losses and schedule


def nll_loss(logits: Tensor, target: list[int]) -> Tensor:
    """Mean over non-PAD target positions of -log softmax(logits)[target]."""
    if logits.shape[0] != len(target):
        raise ValueError(f"{logits.shape[0]} logit rows vs {len(target)} targets")
    keep = [t != PAD_ID for t in target]
    n_keep = sum(keep)
    if n_keep == 0:
        raise ValueError("all-PAD target")
    picks = np.zeros(logits.shape)
    for row, (tok, k) in enumerate(zip(target, keep)):
        if k:
            picks[row, tok] = 1.0 / n_keep
    logp = tt.log_softmax_rows(logits)
    return tt.scale(tt.sum_all(tt.mul(logp, Tensor(picks))), -1.0)


def total_loss(nll: Tensor, wret_loss: Tensor | None, config: TrainConfig) -> Tensor:
    """mle_weight * nll + wret objective, composed exactly in that order."""
    weighted = tt.scale(nll, config.mle_weight)
    return weighted if wret_loss is None else tt.add(weighted, wret_loss)


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warmup to max_lr, then inverse-square-root decay."""
    if step < 0:
        raise ValueError("negative step")
    if step <= config.warmup_steps:
        return config.max_lr * step / config.warmup_steps
    return config.max_lr * np.sqrt(config.warmup_steps / step)


class Adam:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def apply(self, params: list[tuple[str, Tensor]], grads: dict[str, np.ndarray],
              lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in params:
            g = grads.get(name)
            if g is None:
                continue
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.m[name] = m
            self.v[name] = v
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# trainer


@dataclass
class TrainState:
    step: int = 0          # optimizer updates applied
    epoch: int = 0
    pos: int = 0           # samples consumed within the current epoch
    best_val: float = float("inf")
    bad_epochs: int = 0


METRIC_COLUMNS = ["step", "epoch", "lr", "nll", "rec", "mmd", "kld", "logdet", "total", "val_total"]


class Trainer:
    def __init__(self, model: Model, config: TrainConfig,
                 train_samples: list[SampleInputs],
                 valid_samples: list[SampleInputs] | None = None):
        if not train_samples:
            raise TrainingError("empty training set")
        config.validate()
        self.model = model
        self.config = config
        self.train_samples = train_samples
        self.valid_samples = valid_samples or []
        self.params = model.parameters()
        self.adam = Adam()
        self.state = TrainState()

    # -- loss ---------------------------------------------------------------

    def _batch_loss(self, batch: list[SampleInputs], step: int):
        cfg = self.config
        seed = cfg.seed
        nll_sum = None
        latents = []
        pooleds = []
        for sample in batch:
            eps = Stream(seed, "eps", sample.key, step)
            memory, latent = self.model.forward_memory(sample, eps)
            logits = batch_teacher_forced_logits(self.model.decoder, memory,
                                                 sample.target_ids, self.model.embedding,
                                                 cfg.max_len_train)
            piece = nll_loss(logits, sample.target_ids[1:])
            nll_sum = piece if nll_sum is None else tt.add(nll_sum, piece)
            if latent is not None:
                latents.append(latent)
                pooleds.append(latent.pooled)
        nll = tt.scale(nll_sum, 1.0 / len(batch))

        wret_loss = None
        comps = {"rec": 0.0, "mmd": 0.0, "kld": 0.0, "logdet": 0.0}
        if latents:
            d_z = self.model.config.d_z
            prior_rows = [Stream(seed, "prior", s.key, step).normal(d_z)
                          for s in batch]
            priors = Tensor(np.stack(prior_rows))
            wret_loss, comps = wret_objective(pooleds, latents, self.model.wret,
                                              cfg.lambda_mmd, cfg.alpha_kld, priors)
        loss = total_loss(nll, wret_loss, self.config)
        comps = dict(comps, nll=nll.item(), total=loss.item())
        return loss, comps

    # -- stepping -----------------------------------------------------------

    def _next_micro_batches(self, order: np.ndarray) -> list[list[SampleInputs]]:
        batches = []
        for _ in range(self.config.accum_steps):
            if self.state.pos >= len(order):
                break
            idx = order[self.state.pos : self.state.pos + self.config.batch_size]
            self.state.pos += len(idx)
            batches.append([self.train_samples[i] for i in idx])
        return batches

    def optimizer_step(self, batches: list[list[SampleInputs]]) -> dict:
        step = self.state.step + 1
        acc: dict[str, np.ndarray] = {}
        sums = {k: 0.0 for k in ("nll", "rec", "mmd", "kld", "logdet", "total")}
        for batch in batches:
            with GradTape() as tape:
                loss, comps = self._batch_loss(batch, step)
            if not np.isfinite(loss.item()):
                raise TrainingError(f"non-finite loss at step {step}: {comps}")
            tape.backward(loss)
            for name, p in self.params:
                if p.grad is not None:
                    prev = acc.get(name)
                    acc[name] = p.grad if prev is None else prev + p.grad
                    p.zero_grad()
            for k in sums:
                sums[k] += comps[k]
        n = len(batches)
        grads = {name: g / n for name, g in acc.items()}
        lr = lr_at(step, self.config)
        self.adam.apply(self.params, grads, lr)
        self.model.enforce_constraints()
        self.state.step = step
        row = {k: sums[k] / n for k in sums}
        row.update(step=step, epoch=self.state.epoch, lr=lr, val_total="")
        return row

    def validate(self) -> float:
        total = 0.0
        for sample in self.valid_samples:
            eps = Stream(self.config.seed, "val-eps", sample.key)
            memory, latent = self.model.forward_memory(sample, eps)
            logits = batch_teacher_forced_logits(self.model.decoder, memory,
                                                 sample.target_ids, self.model.embedding,
                                                 self.config.max_len_train)
            nll = nll_loss(logits, sample.target_ids[1:])
            wret_loss = None
            if latent is not None:
                wret_loss, _ = wret_objective([latent.pooled], [latent], self.model.wret,
                                              self.config.lambda_mmd, self.config.alpha_kld,
                                              tt.zeros((1, self.model.config.d_z)))
            total += total_loss(nll, wret_loss, self.config).item()
        return total / len(self.valid_samples)

    # -- epochs -------------------------------------------------------------

    def run(self, out_dir=None) -> list[dict]:
        """Epoch loop: validate after each epoch, retain the best checkpoint,
        stop at the epoch cap, the step cap, or `patience` stale validations."""
        cfg = self.config
        out_path = Path(out_dir) if out_dir is not None else None
        if out_path is not None:
            out_path.mkdir(parents=True, exist_ok=True)
            if self.state.step == 0:
                with open(out_path / "metrics.csv", "w", encoding="utf-8", newline="") as fh:
                    csv.DictWriter(fh, fieldnames=METRIC_COLUMNS).writeheader()
        history: list[dict] = []
        stop = False
        saved = False
        while self.state.epoch < cfg.epochs and not stop:
            order = Stream(cfg.seed, "order", self.state.epoch).permutation(len(self.train_samples))
            epoch_rows: list[dict] = []
            while self.state.pos < len(order):
                row = self.optimizer_step(self._next_micro_batches(order))
                epoch_rows.append(row)
                history.append(row)
                if cfg.max_steps and self.state.step >= cfg.max_steps:
                    stop = True
                    break
            if not stop:
                self.state.epoch += 1
                self.state.pos = 0
                if self.valid_samples:
                    val = self.validate()
                    epoch_rows[-1]["val_total"] = val
                    if val < self.state.best_val - 1e-12:
                        self.state.best_val = val
                        self.state.bad_epochs = 0
                        if out_path is not None:
                            self.save(out_path / "checkpoint.mtlg")
                            saved = True
                    else:
                        self.state.bad_epochs += 1
                        if self.state.bad_epochs >= cfg.patience:
                            stop = True
            if out_path is not None and epoch_rows:
                with open(out_path / "metrics.csv", "a", encoding="utf-8", newline="") as fh:
                    csv.DictWriter(fh, fieldnames=METRIC_COLUMNS).writerows(epoch_rows)
        if out_path is not None and (not self.valid_samples or not saved):
            self.save(out_path / "checkpoint.mtlg")
        return history

    # -- checkpointing ------------------------------------------------------

    def _optimizer_entries(self) -> list[tuple[str, Tensor]]:
        st = self.state
        entries = [
            ("state", Tensor([float(st.step), float(st.epoch), float(st.pos),
                              st.best_val, float(st.bad_epochs), float(self.adam.t)])),
        ]
        for name, _ in self.params:
            m = self.adam.m.get(name)
            if m is not None:
                entries.append((f"m:{name}", Tensor(m)))
                entries.append((f"v:{name}", Tensor(self.adam.v[name])))
        return entries

    def save(self, path) -> None:
        save_checkpoint(path, self.model, self._optimizer_entries())

    @classmethod
    def resume(cls, path, config: TrainConfig, train_samples: list[SampleInputs],
               valid_samples: list[SampleInputs] | None = None) -> "Trainer":
        model, opt = load_checkpoint(path)
        trainer = cls(model, config, train_samples, valid_samples)
        if "state" in opt:
            vals = opt["state"].data
            trainer.state = TrainState(step=int(vals[0]), epoch=int(vals[1]),
                                       pos=int(vals[2]), best_val=float(vals[3]),
                                       bad_epochs=int(vals[4]))
            trainer.adam.t = int(vals[5])
        for name, t in opt.items():
            if name.startswith("m:"):
                trainer.adam.m[name[2:]] = t.data.copy()
            elif name.startswith("v:"):
                trainer.adam.v[name[2:]] = t.data.copy()
        return trainer
