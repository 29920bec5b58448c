"""Optimizers, the early-stopped training loop, evaluation, features and probes."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .model import ModelConfig, build_graph, forward_base, forward_noisy, loss_and_grads
from .noisegen import frobenius_norm
from .textpipe import LabeledDataset

log = logging.getLogger(__name__)

EVAL_CHUNK = 512


# ------------------------------------------------------------ optimizers

def adadelta_step(param, grad, state, rho=0.95, eps=1e-6):
    """One in-place Adadelta update; `state` holds the running averages.

    E[g^2] <- rho E[g^2] + (1-rho) g^2
    dx = -sqrt(E[dx^2] + eps) / sqrt(E[g^2] + eps) * g
    E[dx^2] <- rho E[dx^2] + (1-rho) dx^2
    """
    if param.shape != grad.shape:
        raise ValueError(f"shape mismatch: param {param.shape} vs grad {grad.shape}")
    if not state:
        state["sq_grad"] = np.zeros_like(param)
        state["sq_delta"] = np.zeros_like(param)
    sg, sd = state["sq_grad"], state["sq_delta"]
    sg *= rho
    sg += (1.0 - rho) * grad * grad
    delta = -np.sqrt(sd + eps) / np.sqrt(sg + eps) * grad
    sd *= rho
    sd += (1.0 - rho) * delta * delta
    param += delta
    return param


def sgd_step(param, grad, state, lr=0.1, momentum=0.0):
    """Heavy-ball SGD: v <- momentum v + g; param -= lr v."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    if "velocity" not in state:
        state["velocity"] = np.zeros_like(param)
    v = state["velocity"]
    v *= momentum
    v += grad
    param -= lr * v
    return param


class Optimizer:
    """Per-tensor state keyed by parameter name."""

    def __init__(self, kind="adadelta", rho=0.95, eps=1e-6, lr=0.1, momentum=0.0):
        if kind not in ("adadelta", "sgd"):
            raise ValueError(f"unknown optimizer {kind!r}")
        if kind == "adadelta" and not 0.0 < rho < 1.0:
            raise ValueError("rho must lie in (0, 1)")
        self.kind, self.rho, self.eps, self.lr, self.momentum = kind, rho, eps, lr, momentum
        self.state: dict[str, dict] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name in params:
            st = self.state.setdefault(name, {})
            if self.kind == "adadelta":
                adadelta_step(params[name], grads[name], st, self.rho, self.eps)
            else:
                sgd_step(params[name], grads[name], st, self.lr, self.momentum)


# ---------------------------------------------------------- configuration

@dataclass
class TrainConfig:
    optimizer: str = "adadelta"
    rho: float = 0.95
    eps: float = 1e-6
    lr: float = 0.1
    momentum: float = 0.0
    batch_size: int = 50
    max_epochs: int = 50
    patience: int = 10

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be non-negative")
        if self.optimizer == "adadelta" and not 0.0 < self.rho < 1.0:
            raise ValueError("rho must lie in (0, 1)")
        if self.optimizer not in ("adadelta", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def make_optimizer(self) -> Optimizer:
        return Optimizer(self.optimizer, self.rho, self.eps, self.lr, self.momentum)


@dataclass
class RunRecord:
    history: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    psi: np.ndarray | None = None

    def to_jsonl(self) -> str:
        keys = ("epoch", "train_loss", "dev_acc", "test_acc", "psi_fro")
        return "".join(json.dumps({k: row[k] for k in keys}) + "\n" for row in self.history)

    @property
    def best(self) -> dict | None:
        return None if self.best_epoch is None else self.history[self.best_epoch]


# ------------------------------------------------------------ evaluation

def _chunks(n, size=EVAL_CHUNK):
    for start in range(0, n, size):
        yield slice(start, min(n, start + size))


def accuracy(pred, labels) -> float:
    pred, labels = np.asarray(pred), np.asarray(labels)
    if labels.size == 0:
        raise ValueError("accuracy of an empty set")
    return float(np.mean(pred == labels))


def predict_base(dataset: LabeledDataset, params, cfg) -> np.ndarray:
    return np.concatenate([np.argmax(forward_base(dataset.tokens[s], params, cfg), axis=-1)
                           for s in _chunks(len(dataset))])


def evaluate_clean(test_set: LabeledDataset, params, cfg) -> float:
    """Accuracy of the base network alone against the clean labels."""
    if len(test_set) == 0:
        raise ValueError("empty test set")
    return accuracy(predict_base(test_set, params, cfg), test_set.labels)


def evaluate_noisy(dev_set: LabeledDataset, params, psi, cfg) -> float:
    """Accuracy of the noisy-label head against the (possibly corrupted) dev labels."""
    if len(dev_set) == 0:
        raise ValueError("empty dev set")
    if psi is None:
        pred = predict_base(dev_set, params, cfg)
    else:
        pred = np.concatenate([np.argmax(forward_noisy(dev_set.tokens[s], params, psi, cfg), axis=-1)
                               for s in _chunks(len(dev_set))])
    return accuracy(pred, dev_set.targets())


def extract_features(dataset: LabeledDataset, params, cfg, kind="pooled") -> np.ndarray:
    """Pooled penultimate vectors (n, F * #windows), or the K logits with kind="logits"."""
    if kind not in ("pooled", "logits"):
        raise ValueError("kind must be 'pooled' or 'logits'")
    width = cfg.n_features if kind == "pooled" else cfg.k
    if len(dataset) == 0:
        return np.zeros((0, width))
    rows = []
    for s in _chunks(len(dataset)):
        g = build_graph(dataset.tokens[s], params, cfg, train=False)
        rows.append(g.pooled.value if kind == "pooled" else g.logits.value)
    return np.concatenate(rows)


# --------------------------------------------------------------- training

def _copy(params):
    return {k: v.copy() for k, v in params.items()}


def train(train_set: LabeledDataset, dev_set: LabeledDataset, tcfg: TrainConfig, mcfg: ModelConfig,
          params: dict, psi: np.ndarray | None, shuffle_rng: np.random.Generator,
          dropout_rng: np.random.Generator, test_set: LabeledDataset | None = None):
    """Minibatch training with early stopping on noisy-dev accuracy.

    Parameters are updated in place; the returned (params, psi) are copies
    of the best-dev snapshot. `psi=None` trains the base network alone.
    """
    if len(train_set) == 0:
        raise ValueError("empty training set")
    targets = train_set.targets()
    opt = tcfg.make_optimizer()
    record = RunRecord(psi=None if psi is None else psi.copy())
    best = (_copy(params), None if psi is None else psi.copy())
    best_acc, stale = -1.0, 0
    n = len(train_set)
    for epoch in range(tcfg.max_epochs):
        order = shuffle_rng.permutation(n)
        total = 0.0
        for start in range(0, n, tcfg.batch_size):
            idx = order[start:start + tcfg.batch_size]
            loss, grads = loss_and_grads(train_set.tokens[idx], targets[idx], params, mcfg,
                                         psi=psi, lam=mcfg.lam, rng=dropout_rng, train=True)
            total += loss * len(idx)
            if psi is not None:
                opt.step({**params, "noise.psi": psi}, grads)
            else:
                opt.step(params, grads)
        dev_acc = evaluate_noisy(dev_set, params, psi, mcfg)
        row = {
            "epoch": epoch,
            "train_loss": total / n,
            "dev_acc": dev_acc,
            "test_acc": None if test_set is None else evaluate_clean(test_set, params, mcfg),
            "psi_fro": None if psi is None else frobenius_norm(psi),
        }
        record.history.append(row)
        log.info("epoch %d loss %.4f dev %.4f test %s", epoch, row["train_loss"], dev_acc, row["test_acc"])
        if dev_acc > best_acc:
            best_acc, stale = dev_acc, 0
            record.best_epoch = epoch
            best = (_copy(params), None if psi is None else psi.copy())
        else:
            stale += 1
            if stale >= tcfg.patience:
                break
    record.psi = None if best[1] is None else best[1].copy()
    return best[0], best[1], record


# ---------------------------------------------------------------- probes

def fit_linear_probe(features, targets, k, C=1.0, epochs=30, rng=None, batch_size=32):
    """One-vs-rest linear SVMs by minibatch subgradient descent.

    Minimizes, per class, (1/(2 C n)) ||w||^2 + mean_i max(0, 1 - y_i (w.x_i + b))
    with step size 1/(1+t) at epoch t. Features are standardized with the
    training statistics. Returns a callable mapping features to classes.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(targets, dtype=np.int64)
    if len(np.unique(y)) < 2:
        raise ValueError("probe targets contain a single class")
    if rng is None:
        raise ValueError("linear probe needs an rng")
    n = len(X)
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd[sd == 0] = 1.0
    Z = (X - mu) / sd
    Y = np.where(y[:, None] == np.arange(k)[None, :], 1.0, -1.0)  # (n, k)
    W = np.zeros((k, Z.shape[1]))
    b = np.zeros(k)
    reg = 1.0 / (C * n)
    for t in range(epochs):
        lr = 1.0 / (1.0 + t)
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            zb, yb = Z[idx], Y[idx]
            active = (yb * (zb @ W.T + b) < 1.0) * yb  # (m, k)
            gW = reg * W - active.T @ zb / len(idx)
            gb = -active.sum(axis=0) / len(idx)
            W -= lr * gW
            b -= lr * gb

    def predict(feats):
        s = ((np.asarray(feats, dtype=np.float64) - mu) / sd) @ W.T + b
        return np.argmax(s, axis=1)

    return predict


def linear_probe(train_features, train_targets, test_features, test_labels, k, C=1.0, epochs=30, rng=None) -> float:
    """Accuracy on clean test features of a hinge-loss probe fitted to the training features."""
    predict = fit_linear_probe(train_features, train_targets, k, C, epochs, rng)
    return accuracy(predict(test_features), test_labels)
