"""Frozen-backbone fine-tuning: AdamW, linear warmup into cosine decay, cross-entropy."""
from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional

import numpy as np

from . import model as mdl
from .adapters import ConfigError, HtaAdapter
from .autodiff import Tape
from .linalg import NonFiniteError

EPOCH_CSV_HEADER = ("epoch", "lr", "train_loss", "train_acc", "eval_acc")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    warmup_epochs: int = 10
    base_lr: float = 1e-2
    weight_decay: float = 1e-4
    batch_size: int = 64
    adapter_dropout: float = 0.0
    seed: int = 0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    decay_head: bool = False

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        if self.epochs < 0 or not 0 <= self.warmup_epochs <= max(self.epochs, 0):
            raise ConfigError("need 0 <= warmup_epochs <= epochs")
        if not 0.0 <= self.adapter_dropout < 1.0:
            raise ConfigError("adapter_dropout must be in [0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        return cls(**d)


def warmup_steps(config: TrainConfig, total_steps: int) -> int:
    if config.epochs == 0:
        return 0
    return total_steps * config.warmup_epochs // config.epochs


def lr_at(config: TrainConfig, step: int, total_steps: int) -> float:
    """Linear ramp from 0 over the warmup steps, then half-cosine decay towards 0."""
    w = warmup_steps(config, total_steps)
    if step < w:
        return config.base_lr * step / w
    span = total_steps - w
    return config.base_lr * 0.5 * (1.0 + math.cos(math.pi * (step - w) / span))


@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamWState,
    lr: float,
    config: TrainConfig,
    decay: Optional[Mapping[str, bool]] = None,
) -> AdamWState:
    """One in-place AdamW update.

    Decoupled decay ``p <- p * (1 - lr * wd)`` is applied first, only to
    names flagged in ``decay`` (all names when ``decay`` is None).
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name}")
    state.step += 1
    b1, b2 = config.betas
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        if config.weight_decay and (decay is None or decay.get(name, False)):
            p *= 1.0 - lr * config.weight_decay
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + config.eps)
    return state


@dataclass
class EpochStats:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    eval_acc: float


@dataclass
class RunRecord:
    epochs: list[EpochStats] = field(default_factory=list)
    lr_trace: list[float] = field(default_factory=list)
    loss_trace: list[float] = field(default_factory=list)
    init_eval_acc: float = float("nan")
    init_train_loss: float = float("nan")
    best_eval_acc: float = float("nan")
    final_eval_acc: float = float("nan")
    final_train_loss: float = float("nan")
    trainable_params: int = 0
    wall_time: float = 0.0
    aborted: bool = False
    abort_reason: str = ""

    def epoch_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(EPOCH_CSV_HEADER)
        for e in self.epochs:
            w.writerow([e.epoch, repr(e.lr), repr(e.train_loss), repr(e.train_acc), repr(e.eval_acc)])
        return buf.getvalue()

    def summary(self, config: Optional[TrainConfig] = None, extra: Optional[dict] = None) -> dict:
        out = {
            "init_eval_acc": self.init_eval_acc,
            "init_train_loss": self.init_train_loss,
            "best_eval_acc": self.best_eval_acc,
            "final_eval_acc": self.final_eval_acc,
            "final_train_loss": self.final_train_loss,
            "trainable_params": self.trainable_params,
            "wall_time": self.wall_time,
            "aborted": self.aborted,
            "abort_reason": self.abort_reason,
        }
        if config is not None:
            out["train_config"] = config.to_dict()
        if extra:
            out.update(extra)
        return out

    def summary_json(self, config: Optional[TrainConfig] = None, extra: Optional[dict] = None) -> str:
        return json.dumps(self.summary(config, extra), indent=2, sort_keys=True)


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def _epoch_rng(seed: int, stream: int, counter: int) -> np.random.Generator:
    # counter-based: (seed, stream) is the key, the epoch/step the counter
    return np.random.Generator(np.random.Philox(key=[seed, stream], counter=[counter, 0, 0, 0]))


def batch_loss(b: mdl.Backbone, x_emb: np.ndarray, y: np.ndarray) -> float:
    """Mean cross-entropy of the (numpy-path) model on an embedded batch."""
    logits = mdl.forward(b, x_emb)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(y)), y].mean())


def train(b: mdl.Backbone, task, config: TrainConfig) -> RunRecord:
    """Train the adapters and head of ``b`` in place on ``task`` (a harness Dataset)."""
    t0 = time.perf_counter()
    params = mdl.trainable_parameters(b)
    decay = {n: mdl.decays(n, config.decay_head) for n in params}
    hta = [
        blk.layers[s].adapter
        for blk in b.blocks
        for s in mdl.SITES
        if isinstance(blk.layers[s].adapter, HtaAdapter) and blk.layers[s].adapter.normalize_v
    ]
    rec = RunRecord(trainable_params=int(sum(p.size for p in params.values())))

    x_train = mdl.embed(b, task.train_x)
    x_eval = mdl.embed(b, task.eval_x)
    y_train, y_eval = task.train_y, task.eval_y
    n = len(y_train)
    steps_per_epoch = math.ceil(n / config.batch_size) if n else 0
    total = steps_per_epoch * config.epochs

    rec.init_eval_acc = accuracy(mdl.forward(b, x_eval), y_eval)
    rec.init_train_loss = batch_loss(b, x_train, y_train) if n else float("nan")
    rec.best_eval_acc = rec.init_eval_acc
    rec.final_eval_acc = rec.init_eval_acc
    rec.final_train_loss = rec.init_train_loss

    state = AdamWState()
    step = 0
    for epoch in range(config.epochs):
        order = _epoch_rng(config.seed, 0, epoch).permutation(n)
        loss_sum, correct = 0.0, 0
        epoch_lr = lr_at(config, step, total)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            tape = Tape()
            nodes = {name: tape.param(name, arr) for name, arr in params.items()}
            drop_rng = _epoch_rng(config.seed, 1, step) if config.adapter_dropout > 0 else None
            logits = mdl.forward_tape(tape, b, x_train[idx], nodes, config.adapter_dropout, drop_rng)
            loss = tape.cross_entropy(logits, y_train[idx])
            lval = float(loss.value)
            if not math.isfinite(lval):
                rec.aborted, rec.abort_reason = True, f"non-finite loss at epoch {epoch} step {step}"
                break
            grads = tape.backward(loss)
            lr = lr_at(config, step, total)
            try:
                adamw_step(params, grads, state, lr, config, decay)
            except NonFiniteError as exc:
                rec.aborted, rec.abort_reason = True, f"epoch {epoch} step {step}: {exc}"
                break
            for a in hta:
                a.renormalize()
            rec.lr_trace.append(lr)
            rec.loss_trace.append(lval)
            loss_sum += lval * len(idx)
            correct += int(np.sum(np.argmax(logits.value, axis=1) == y_train[idx]))
            step += 1
        if rec.aborted:
            break
        eval_acc = accuracy(mdl.forward(b, x_eval), y_eval)
        rec.epochs.append(EpochStats(epoch + 1, epoch_lr, loss_sum / n, correct / n, eval_acc))
        rec.best_eval_acc = max(rec.best_eval_acc, eval_acc)
        rec.final_eval_acc = eval_acc
    if rec.epochs and not rec.aborted:
        rec.final_train_loss = batch_loss(b, x_train, y_train)
    rec.wall_time = time.perf_counter() - t0
    return rec
