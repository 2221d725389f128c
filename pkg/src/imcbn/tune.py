"""Pretraining, evaluation and BN-only recovery (statistics adaptation, gamma/beta fine-tuning)."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .tensor import Network, NetworkSpec, softmax_cross_entropy

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class AdaptConfig:
    num_samples: Optional[int] = None  # None: one full pass over the training set
    batch_size: int = 32
    momentum: float = 0.1
    cumulative: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.num_samples is not None and self.num_samples < self.batch_size:
            raise ValueError("num_samples must be >= batch_size")
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 5
    lr0: float = 0.01
    decay_factor: float = 5.0
    decay_every: int = 2
    batch_size: int = 32
    seed: int = 0
    update_running: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr0 < 0:
            raise ValueError("lr0 must be >= 0")
        if self.decay_factor < 1:
            raise ValueError("decay_factor must be >= 1")
        if self.decay_every < 1 or self.batch_size < 1:
            raise ValueError("decay_every and batch_size must be >= 1")


def lr_schedule(cfg: FinetuneConfig) -> list[float]:
    """Per-epoch step sizes: ``lr0`` divided by ``decay_factor`` every ``decay_every`` epochs."""
    return [cfg.lr0 / cfg.decay_factor ** (e // cfg.decay_every) for e in range(cfg.epochs)]


def _batches(n: int, batch_size: int, rng: Optional[np.random.Generator] = None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def evaluate(model: Network, x: np.ndarray, y: np.ndarray, batch_size: int = 256) -> float:
    """Top-1 accuracy in eval mode."""
    y = np.asarray(y)
    if len(x) != len(y) or len(y) == 0:
        raise ValueError(f"{len(x)} images vs {len(y)} labels")
    if y.min() < 0 or y.max() >= model.spec.classes:
        raise ValueError(f"labels must lie in [0, {model.spec.classes})")
    return float(np.mean(model.predict(x, batch_size) == y))


def bn_adapt(model: Network, x: np.ndarray, cfg: AdaptConfig = AdaptConfig()) -> Network:
    """Re-estimate BN running statistics from the deployed network's activations.

    Only ``running_mean`` / ``running_var`` change; gamma, beta and all
    weights are left bit-identical. Modifies ``model`` in place and returns it.
    """
    if len(x) == 0:
        raise ValueError("bn_adapt needs at least one training sample")
    if not model.bn:
        raise ValueError("model has no BN layers")
    n = len(x) if cfg.num_samples is None else min(cfg.num_samples, len(x))
    for st in model.bn.values():
        st.momentum = cfg.momentum
    acc = {} if cfg.cumulative else None
    for idx in _batches(n, cfg.batch_size):
        model.forward(x[idx], mode="adapt", cumulative=acc)
    return model


def _write_log(path, rows):
    with Path(path).open("w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(["epoch", "lr", "train_loss", "test_accuracy"])
        for r in rows:
            wr.writerow([r[0], repr(float(r[1])), repr(float(r[2])), "" if r[3] is None else repr(float(r[3]))])


def bn_finetune(model: Network, x: np.ndarray, y: np.ndarray, cfg: FinetuneConfig = FinetuneConfig(),
                test: Optional[tuple] = None, log_path=None) -> Network:
    """Plain SGD on every BN layer's gamma and beta; weights stay frozen.

    Running statistics follow each training forward unless
    ``cfg.update_running`` is false. ``test`` is an optional ``(x, y)`` pair
    evaluated after each epoch for the log.
    """
    if not model.bn:
        raise ValueError("bn_finetune needs a model with BN layers")
    rng = np.random.default_rng(cfg.seed)
    history = []
    for epoch, lr in enumerate(lr_schedule(cfg)):
        losses = []
        for idx in _batches(len(x), cfg.batch_size, rng):
            logits = model.forward(x[idx], mode="train", update_running=cfg.update_running, keep_cache=True)
            loss, dlogits = softmax_cross_entropy(logits, y[idx])
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss in fine-tuning epoch {epoch}")
            grads = model.backward(dlogits, weight_grads=False)
            if lr:
                for name, st in model.bn.items():
                    st.gamma = (st.gamma - lr * grads.dgamma[name]).astype(np.float32)
                    st.beta = (st.beta - lr * grads.dbeta[name]).astype(np.float32)
            losses.append(loss)
        acc = evaluate(model, *test) if test is not None else None
        history.append((epoch, lr, float(np.mean(losses)), acc))
        log.info("finetune epoch %d lr %.2g loss %.4f acc %s", epoch, lr, history[-1][2], acc)
    if log_path is not None:
        _write_log(log_path, history)
    model.history = history
    return model


def pretrain(spec: NetworkSpec, x: np.ndarray, y: np.ndarray, epochs: int = 10, lr: float = 0.05,
             seed: int = 0, batch_size: int = 32, momentum: float = 0.9,
             test: Optional[tuple] = None, log_path=None) -> Network:
    """Full-precision SGD with momentum over every parameter."""
    model = Network.init(spec, seed)
    rng = np.random.default_rng([seed, 7])
    vel = {k: np.zeros_like(v) for k, v in model.weights.items()}
    vel.update({f"{k}.gamma": np.zeros_like(s.gamma) for k, s in model.bn.items()})
    vel.update({f"{k}.beta": np.zeros_like(s.beta) for k, s in model.bn.items()})

    def step(key, param, grad):
        vel[key] = (momentum * vel[key] + grad).astype(np.float32)
        return (param - lr * vel[key]).astype(np.float32)

    history = []
    for epoch in range(epochs):
        losses = []
        for idx in _batches(len(x), batch_size, rng):
            logits = model.forward(x[idx], mode="train", keep_cache=True)
            loss, dlogits = softmax_cross_entropy(logits, y[idx])
            if not np.isfinite(loss):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch} (lr={lr}, batch_size={batch_size}); "
                    f"max |logit| = {np.nanmax(np.abs(logits)):.3g}")
            g = model.backward(dlogits, weight_grads=True)
            for k in model.weights:
                model.weights[k] = step(k, model.weights[k], g.dweights[k])
            for k, st in model.bn.items():
                st.gamma = step(f"{k}.gamma", st.gamma, g.dgamma[k])
                st.beta = step(f"{k}.beta", st.beta, g.dbeta[k])
            bad = [k for k, v in model.weights.items() if not np.isfinite(v).all()]
            if bad:
                raise DivergenceError(f"non-finite weights {bad} at epoch {epoch} (lr={lr})")
            losses.append(loss)
        acc = evaluate(model, *test) if test is not None else None
        history.append((epoch, lr, float(np.mean(losses)), acc))
        log.info("pretrain epoch %d loss %.4f acc %s", epoch, history[-1][2], acc)
    if log_path is not None:
        _write_log(log_path, history)
    model.history = history
    return model
