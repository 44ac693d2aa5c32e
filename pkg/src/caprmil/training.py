"""Training recipe: cross-entropy, AdamW, warm-up + cosine schedule, early stopping."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence, TextIO

import numpy as np

from .attention import TAU_MIN
from .errors import ConfigError, DataError
from .metrics import evaluate
from .model import ModelState, forward
from .numerics import ops
from .numerics.rng import Rng

LOG_COLUMNS = ("epoch", "lr", "train_loss", "val_loss", "val_metric", "seconds")


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 30
    base_lr: float = 2e-4
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    warmup_epochs: int = 6
    warmup_start_lr: float = 1e-5
    min_lr: float = 1e-7
    early_stop_patience: int = 20
    early_stop_min_delta: float = 1e-4
    seed: int = 0
    grad_accum_bags: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if not 0 <= self.warmup_epochs < self.max_epochs:
            raise ConfigError("warmup_epochs must satisfy 0 <= warmup_epochs < max_epochs")
        for name in ("base_lr", "warmup_start_lr", "min_lr", "adam_eps"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not self.min_lr <= self.warmup_start_lr <= self.base_lr:
            raise ConfigError("learning rates must satisfy min_lr <= warmup_start_lr <= base_lr")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.early_stop_patience < 1:
            raise ConfigError("early_stop_patience must be >= 1")
        if self.early_stop_min_delta < 0:
            raise ConfigError("early_stop_min_delta must be >= 0")
        if self.grad_accum_bags < 1:
            raise ConfigError("grad_accum_bags must be >= 1")

    def replace(self, **changes) -> "TrainConfig":
        return replace(self, **changes)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Per-epoch learning rate.

    Linear ramp from ``warmup_start_lr`` (epoch 0) to ``base_lr`` (epoch
    ``warmup_epochs``), then a half cosine that reaches ``min_lr`` at epoch
    ``max_epochs``.
    """
    if not 0 <= epoch <= cfg.max_epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {cfg.max_epochs}]")
    if epoch < cfg.warmup_epochs:
        return cfg.warmup_start_lr + (cfg.base_lr - cfg.warmup_start_lr) * epoch / cfg.warmup_epochs
    progress = (epoch - cfg.warmup_epochs) / (cfg.max_epochs - cfg.warmup_epochs)
    return cfg.min_lr + (cfg.base_lr - cfg.min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(state: ModelState, opt: OptimizerState, lr: float, cfg: TrainConfig) -> None:
    """One AdamW update with decoupled weight decay and bias-corrected moments.

    Temperatures are clamped to ``TAU_MIN`` afterwards.
    """
    opt.step += 1
    t = opt.step
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for name, p in state.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if name not in opt.m:
            opt.m[name] = np.zeros_like(p.data)
            opt.v[name] = np.zeros_like(p.data)
        m, v = opt.m[name], opt.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        if cfg.weight_decay:
            p.data *= 1.0 - lr * cfg.weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        if name.endswith(".tau"):
            np.maximum(p.data, TAU_MIN, out=p.data)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    val_metric: float
    seconds: float

    def line(self) -> str:
        return "\t".join([str(self.epoch), f"{self.lr:.6e}", f"{self.train_loss:.6f}",
                          f"{self.val_loss:.6f}", f"{self.val_metric:.6f}", f"{self.seconds:.3f}"])


@dataclass
class History:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False

    def losses(self) -> list[float]:
        return [r.train_loss for r in self.records]

    def header(self) -> str:
        return "\t".join(LOG_COLUMNS)


def default_validation(state: ModelState, bags: Sequence) -> tuple[float, float]:
    """Validation loss and AUC (NaN when the split holds a single class)."""
    result = evaluate(state, bags)
    return result.loss, result.auc


def train_epoch(state: ModelState, opt: OptimizerState, bags: Sequence, cfg: TrainConfig,
                epoch: int, lr: float) -> float:
    root = Rng(cfg.seed)
    order = root.spawn("shuffle", epoch).permutation(len(bags))
    total = 0.0
    state.zero_grad()
    pending = 0
    for step, idx in enumerate(order):
        bag = bags[int(idx)]
        logits, _ = forward(bag.features, state, root.spawn("dropout", epoch, step), training=True)
        try:
            loss = ops.cross_entropy(logits, [bag.label])
        except ValueError as exc:
            raise DataError(f"bag {bag.id}: {exc}") from None
        total += loss.item()
        ops.mul(loss, 1.0 / cfg.grad_accum_bags).backward()
        pending += 1
        if pending == cfg.grad_accum_bags or step == len(order) - 1:
            adamw_step(state, opt, lr, cfg)
            state.zero_grad()
            pending = 0
    return total / len(order)


def train(state: ModelState, train_set: Sequence, val_set: Sequence, cfg: TrainConfig,
          log: TextIO | None = None,
          validate: Callable[[ModelState, Sequence], tuple[float, float]] = default_validation,
          ) -> tuple[ModelState, History]:
    """Fit ``state`` in place; return a copy of the best-validation-loss state and the history.

    Training stops once the validation loss has not improved by more than
    ``early_stop_min_delta`` for ``early_stop_patience`` consecutive epochs.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ConfigError("train and validation splits must be non-empty")
    opt = OptimizerState()
    history = History()
    best_loss = math.inf
    best_state = state.copy()
    wait = 0
    if log is not None:
        log.write(history.header() + "\n")
    for epoch in range(cfg.max_epochs):
        start = time.perf_counter()
        lr = lr_at(epoch, cfg)
        train_loss = train_epoch(state, opt, train_set, cfg, epoch, lr)
        val_loss, val_metric = validate(state, val_set)
        rec = EpochRecord(epoch, lr, train_loss, val_loss, val_metric, time.perf_counter() - start)
        history.records.append(rec)
        if log is not None:
            log.write(rec.line() + "\n")
            log.flush()
        if val_loss < best_loss - cfg.early_stop_min_delta:
            best_loss = val_loss
            best_state = state.copy()
            history.best_epoch = epoch
            wait = 0
        else:
            wait += 1
            if wait >= cfg.early_stop_patience:
                history.stopped_early = True
                break
    return best_state, history


def parse_log(text: str) -> list[EpochRecord]:
    lines = [l for l in text.splitlines() if l.strip()]
    if not lines or tuple(lines[0].split("\t")) != LOG_COLUMNS:
        raise ValueError("training log header does not match the expected columns")
    out = []
    for line in lines[1:]:
        e, lr, tl, vl, vm, s = line.split("\t")
        out.append(EpochRecord(int(e), float(lr), float(tl), float(vl), float(vm), float(s)))
    return out

