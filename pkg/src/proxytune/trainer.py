"""Seeded training loops: pretraining, plain fine-tuning and CPT tuning.

All three share one loop. The only difference is a constant logit offset
added before the cross-entropy: none for plain training, ``alpha_train``
times the frozen large/small logit gap for CPT. Shuffling draws from a
generator seeded by ``TrainConfig.seed`` and nothing else, so a run is a
pure function of (seed, config, data, initial parameters).
"""

from __future__ import annotations

import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from .data import Dataset
from .errors import ConfigError
from .models import Checkpoint, Model
from .proxy import ProxyTriple, ensemble_with_offset, proxy_predict

log = logging.getLogger(__name__)


class NonFiniteLoss(ArithmeticError):
    def __init__(self, epoch: int, batch: int, detail: str = ""):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}" + (f": {detail}" if detail else ""))
        self.epoch = epoch
        self.batch = batch


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    alpha_train: float = 0.0
    weight_decay: float = 0.0

    def __post_init__(self):
        if int(self.epochs) != self.epochs or self.epochs < 1:
            raise ConfigError(f"epochs must be an integer >= 1, got {self.epochs}")
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise ConfigError(f"batch_size must be an integer >= 1, got {self.batch_size}")
        if not (math.isfinite(self.learning_rate) and self.learning_rate >= 0):
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if not (math.isfinite(self.alpha_train) and self.alpha_train >= 0):
            raise ConfigError(f"alpha_train must be finite and >= 0, got {self.alpha_train}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")

    def replace(self, **kw) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **kw})


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    eval_accuracy: list[float | None] = field(default_factory=list)
    wall_time: float = 0.0
    checkpoint_digest: str = ""

    def to_text(self) -> str:
        buf = io.StringIO()
        buf.write("epoch,loss,eval_acc\n")
        for i, (l, a) in enumerate(zip(self.train_loss, self.eval_accuracy), start=1):
            buf.write(f"{i},{l:.10g},{'' if a is None else f'{a:.6f}'}\n")
        return buf.getvalue()


class _Adam:
    def __init__(self, params, cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for k in params:
            g = grads[k]
            self.m[k] = c.beta1 * self.m[k] + (1.0 - c.beta1) * g
            self.v[k] = c.beta2 * self.v[k] + (1.0 - c.beta2) * g * g
            upd = (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + c.eps)
            if c.weight_decay:
                upd = upd + c.weight_decay * params[k]  # decoupled, AdamW-style
            params[k] = params[k] - c.learning_rate * upd


class _Sgd:
    def __init__(self, params, cfg: TrainConfig):
        self.cfg = cfg
        self.buf = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads):
        c = self.cfg
        for k in params:
            g = grads[k]
            if c.weight_decay:
                g = g + c.weight_decay * params[k]
            self.buf[k] = c.momentum * self.buf[k] + g
            params[k] = params[k] - c.learning_rate * self.buf[k]


def _optimizer(params, cfg):
    return (_Adam if cfg.optimizer == "adam" else _Sgd)(params, cfg)


def batch_loss_and_grads(model: Model, X, y, offset=None, alpha: float = 0.0):
    """Loss on one batch and its gradient for every tunable parameter."""
    tape = dc.Tape()
    leaves = {k: tape.watch(v) for k, v in model.params.items()}
    z = model.forward(X, leaves)
    if offset is not None:
        z = ensemble_with_offset(z, offset, alpha)
    loss = dc.cross_entropy(z, y)
    g = tape.backward(loss)
    return loss.item(), {k: g[id(t)] for k, t in leaves.items()}


def _fit(model: Model, data: Dataset, cfg: TrainConfig, offset=None, alpha=0.0,
         evaluate=None) -> TrainReport:
    if data.input_dim != model.input_dim:
        raise dc.ShapeMismatch(f"data dim {data.input_dim} != model input dim {model.input_dim}")
    if data.n_classes != model.output_dim:
        raise dc.ShapeMismatch(f"data has {data.n_classes} classes, model outputs {model.output_dim}")
    if len(data) == 0:
        raise ConfigError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    opt = _optimizer(model.params, cfg)
    report = TrainReport()
    t0 = time.perf_counter()
    n = len(data)
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[start:start + cfg.batch_size]
            off = None if offset is None else offset[idx]
            try:
                loss, grads = batch_loss_and_grads(model, data.X[idx], data.y[idx], off, alpha)
            except dc.NonFinite as e:
                raise NonFiniteLoss(epoch, b, str(e)) from e
            if not math.isfinite(loss):
                raise NonFiniteLoss(epoch, b)
            opt.step(model.params, grads)
            total += loss * len(idx)
        report.train_loss.append(total / n)
        report.eval_accuracy.append(evaluate(model) if evaluate else None)
        log.debug("epoch %d loss %.6f", epoch, report.train_loss[-1])
    for k, v in model.params.items():
        if not np.all(np.isfinite(v)):
            raise NonFiniteLoss(cfg.epochs, -1, f"parameter {k} became non-finite")
    report.wall_time = time.perf_counter() - t0
    return report


def _finish(model: Model, cfg: TrainConfig, data: Dataset, kind: str, report: TrainReport,
            **extra) -> Checkpoint:
    meta = {"kind": kind, "seed": cfg.seed, "epochs": cfg.epochs,
            "dataset": f"{data.provenance}#{data.fingerprint()}",
            "config": asdict(cfg), "train_loss": report.train_loss, **extra}
    ckpt = model.checkpoint(meta)
    report.checkpoint_digest = ckpt.digest()
    ckpt.report = report
    return ckpt


def _own_accuracy(data: Dataset | None):
    if data is None:
        return None
    return lambda m: float(np.mean(np.argmax(m.logits(data.X), axis=1) == data.y))


def pretrain(model: Model, data: Dataset, cfg: TrainConfig,
             eval_data: Dataset | None = None) -> Checkpoint:
    """Ordinary supervised training, producing weights to freeze later.

    ``model`` is left untouched; training happens on a copy.
    """
    m = model.copy()
    report = _fit(m, data, cfg, evaluate=_own_accuracy(eval_data))
    return _finish(m, cfg, data, "pretrain", report)


def finetune_plain(model: Model, data: Dataset, cfg: TrainConfig,
                   eval_data: Dataset | None = None) -> Checkpoint:
    m = model.copy()
    report = _fit(m, data, cfg, evaluate=_own_accuracy(eval_data))
    return _finish(m, cfg, data, "finetune", report, alpha_train=0.0)


def frozen_offsets(triple: ProxyTriple, data: Dataset) -> np.ndarray:
    """Frozen large minus frozen small logits for every example, computed once."""
    return triple.offset(data.X)


def cpt_tune(triple: ProxyTriple, data: Dataset, cfg: TrainConfig,
             eval_data: Dataset | None = None, cache_frozen: bool = True) -> Checkpoint:
    """Train the tuned model under the ensembled objective.

    Frozen logits are evaluated once per dataset when ``cache_frozen`` is set
    (the default) and per batch otherwise; both give identical trajectories.
    """
    m = triple.tuned.model.copy()
    if cache_frozen:
        offset = frozen_offsets(triple, data)
    else:
        offset = _LazyOffset(triple, data)
    report = _fit(m, data, cfg, offset=offset, alpha=cfg.alpha_train,
                  evaluate=_proxy_accuracy(triple, eval_data, cfg.alpha_train))
    return _finish(m, cfg, data, "cpt", report, alpha_train=cfg.alpha_train)


def _proxy_accuracy(triple: ProxyTriple, data: Dataset | None, alpha: float):
    if data is None:
        return None
    off = frozen_offsets(triple, data)

    def acc(m):
        _, pred = proxy_predict(triple.with_tuned(m), data.X, alpha, off)
        return float(np.mean(pred == data.y))
    return acc


class _LazyOffset:
    """Indexable view that evaluates the frozen models on demand."""

    def __init__(self, triple: ProxyTriple, data: Dataset):
        self.triple, self.X = triple, data.X

    def __getitem__(self, idx):
        return self.triple.offset(self.X[idx])
