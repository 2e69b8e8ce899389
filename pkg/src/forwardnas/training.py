"""Minibatch SGD over a graph with cosine learning-rate decay."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .graphcore import Batch, ComputationGraph, ParameterStore, backward, cosine_lr, forward, sgd_step

log = logging.getLogger(__name__)


@dataclass
class L1Penalty:
    """``sum_g lambda_g * ||alpha_g||_1`` over groups of scalar keys.

    The subgradient at exactly zero is taken as zero.
    """

    groups: list[tuple[float, list[str]]] = field(default_factory=list)

    def add(self, lam, keys):
        self.groups.append((float(lam), list(keys)))

    def keys(self):
        return [k for _, keys in self.groups for k in keys]

    def value(self, params) -> float:
        return float(sum(lam * sum(abs(float(params[k])) for k in keys) for lam, keys in self.groups))

    def grad(self, params) -> dict[str, np.ndarray]:
        out = {}
        for lam, keys in self.groups:
            for k in keys:
                g = lam * np.sign(params[k])
                out[k] = out[k] + g if k in out else g
        return out


@dataclass
class TrainResult:
    params: ParameterStore
    epoch_objective: list[float]  # mean over steps of loss + penalty
    steps: int
    examples: int  # example-passes, for compute accounting


def minibatches(n, batch_size, rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start: start + batch_size]
        if len(idx) >= 2:  # batch-norm needs at least two rows
            yield idx


def train_step(graph, params, batch, lr, weight_decay=0.0, penalty=None, frozen=()):
    acts, loss = forward(graph, params, batch, "train")
    grads = backward(graph, params, acts)
    if penalty is not None:
        loss += penalty.value(params)
        for k, g in penalty.grad(params).items():
            grads[k] = grads[k] + g
    if frozen:
        grads = {k: g for k, g in grads.items() if k not in frozen}
    new = sgd_step(params, grads, lr, weight_decay)
    for k, v in acts.stat_updates.items():
        new[k] = v
    return new, loss


def train(graph: ComputationGraph, params: ParameterStore, X, y, epochs, lr0, batch_size,
          rng: np.random.Generator, weight_decay=0.0, penalty: L1Penalty | None = None,
          frozen=(), horizon_offset=0, horizon=None) -> TrainResult:
    """Run ``epochs`` passes of minibatch SGD.

    The cosine schedule spans ``horizon`` steps (default: this call's
    steps), starting at step ``horizon_offset``.
    """
    n = len(X)
    per_epoch = sum(1 for _ in minibatches(n, batch_size, np.random.default_rng(0)))
    total = max(1, horizon if horizon is not None else epochs * per_epoch)
    frozen = frozenset(frozen)
    step = 0
    history = []
    examples = 0
    for epoch in range(epochs):
        acc = []
        for idx in minibatches(n, batch_size, rng):
            lr = cosine_lr(min(horizon_offset + step, total), total, lr0)
            params, obj = train_step(graph, params, Batch(X[idx], y[idx]), lr, weight_decay, penalty, frozen)
            acc.append(obj)
            step += 1
            examples += len(idx)
        history.append(float(np.mean(acc)) if acc else float("nan"))
        log.debug("epoch %d objective %.5f", epoch, history[-1])
    return TrainResult(params, history, step, examples)


def predict(graph: ComputationGraph, params: ParameterStore, X, batch_size=256):
    """Eval-mode outputs of the prediction node."""
    outs = []
    for start in range(0, len(X), batch_size):
        acts, _ = forward(graph, params, Batch(X[start: start + batch_size]), "eval")
        outs.append(acts[graph.output_id])
    return np.concatenate(outs, axis=0)
