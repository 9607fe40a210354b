"""Synchronous data-parallel SGD with momentum and a step learning-rate schedule.

Workers are simulated in-process: the batch is split into shards, each shard
gets its own loss/gradient evaluation against the same parameter snapshot,
and the shard gradients are combined by batch-size-weighted averaging before
a single update.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from dla.errors import ConfigError, NumericalError, ShapeMismatchError
from dla.nn import Architecture, Params, forward, init_params, loss_and_grad, softmax
from dla.patches import BalancedBatchSampler

__all__ = [
    "PAPER_LR_POINTS",
    "TrainConfig",
    "TrainHistory",
    "lr_at",
    "sgd_step",
    "sync_aggregate",
    "train",
]

log = logging.getLogger(__name__)

# (epoch fraction at which the rate starts, rate)
PAPER_LR_POINTS: Tuple[Tuple[float, float], ...] = ((0.0, 1e-3), (1.0, 1e-4), (1.5, 1e-5))


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 512
    momentum: float = 0.9
    lr_points: Tuple[Tuple[float, float], ...] = PAPER_LR_POINTS
    max_iterations: int = 2000
    n_workers: int = 2
    eval_interval: int = 100
    patience: int = 5
    min_delta: float = 0.0
    val_subsample: int = 600
    seed: int = 0

    def __post_init__(self):
        points = tuple((float(e), float(r)) for e, r in self.lr_points)
        object.__setattr__(self, "lr_points", points)
        if self.batch_size < 1 or self.n_workers < 1:
            raise ConfigError("batch_size and n_workers must be positive")
        if self.batch_size % self.n_workers:
            raise ConfigError(
                f"batch_size {self.batch_size} is not divisible by n_workers {self.n_workers}"
            )
        if not points or points[0][0] != 0.0:
            raise ConfigError("lr_points must start at epoch 0")
        for (e0, r0), (e1, r1) in zip(points, points[1:]):
            if not e1 > e0:
                raise ConfigError("lr_points epochs must increase")
            if r1 > r0:
                raise ConfigError("learning rates must be non-increasing")
        if any(r <= 0 for _, r in points):
            raise ConfigError("learning rates must be positive")
        if self.max_iterations < 1 or self.eval_interval < 1 or self.patience < 1:
            raise ConfigError("max_iterations, eval_interval and patience must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")


@dataclass
class TrainHistory:
    iters_per_epoch: float
    records: List[Tuple[int, float, float, float, float]] = field(default_factory=list)
    stop_reason: str = ""
    best_iteration: int = 0

    def add(self, iteration, lr, train_loss, val_loss, val_acc):
        if self.records and iteration <= self.records[-1][0]:
            raise ValueError("history iterations must increase")
        self.records.append((int(iteration), float(lr), float(train_loss), float(val_loss), float(val_acc)))

    def to_tsv(self) -> str:
        lines = [
            f"# iters_per_epoch\t{self.iters_per_epoch!r}",
            f"# stop_reason\t{self.stop_reason}",
            f"# best_iteration\t{self.best_iteration}",
            "iteration\tlr\ttrain_loss\tval_loss\tval_acc",
        ]
        for it, lr, tl, vl, va in self.records:
            lines.append(f"{it}\t{lr!r}\t{tl!r}\t{vl!r}\t{va!r}")
        return "\n".join(lines) + "\n"


def lr_at(iteration, iters_per_epoch, lr_points=PAPER_LR_POINTS) -> float:
    """Learning rate of the step schedule at ``iteration``.

    The epoch fraction is ``iteration / iters_per_epoch``; the rate is that of
    the last point whose epoch is not after the fraction.
    """
    if iteration < 0 or iters_per_epoch <= 0:
        raise ValueError("iteration must be >= 0 and iters_per_epoch > 0")
    fraction = iteration / iters_per_epoch
    rate = lr_points[0][1]
    for epoch, r in lr_points:
        if fraction >= epoch:
            rate = r
    return rate


def _check_congruent(a: Params, b: Params, what):
    if list(a) != list(b) or any(a[k].shape != b[k].shape for k in a):
        raise ShapeMismatchError(f"{what} are not shape-congruent")


def sgd_step(params: Params, velocity: Params, grads: Params, lr: float, momentum: float):
    """Classical momentum: ``v' = mu v - lr g`` then ``p' = p + v'``."""
    _check_congruent(params, velocity, "params and velocity")
    _check_congruent(params, grads, "params and gradients")
    new_v = {k: momentum * velocity[k] - lr * grads[k] for k in params}
    new_p = {k: params[k] + new_v[k] for k in params}
    return new_p, new_v


def sync_aggregate(worker_grads: Sequence[Params], worker_batch_sizes: Sequence[int]) -> Params:
    """Batch-size-weighted mean of per-worker mean gradients.

    Because each worker returns the gradient of a mean loss, this equals the
    gradient of the mean loss over the union of the shards.
    """
    if not worker_grads or len(worker_grads) != len(worker_batch_sizes):
        raise ValueError("need one batch size per worker gradient")
    if any(n <= 0 for n in worker_batch_sizes):
        raise ValueError("worker batch sizes must be positive")
    first = worker_grads[0]
    for g in worker_grads[1:]:
        _check_congruent(first, g, "worker gradients")
    total = float(sum(worker_batch_sizes))
    out = {}
    for k in first:
        acc = worker_batch_sizes[0] * worker_grads[0][k]
        for g, n in zip(worker_grads[1:], worker_batch_sizes[1:]):
            acc = acc + n * g[k]
        out[k] = acc / total
    return out


def _evaluate(params, arch, x_val, y_val):
    logits = forward(params, arch, x_val)
    p = softmax(logits)
    t = y_val.astype(np.intp) - 1
    loss = float(-np.mean(np.log(np.maximum(p[np.arange(t.size), t], 1e-300))))
    acc = float(np.mean(np.argmax(logits, axis=1) == t))
    return loss, acc


def train(cfg: TrainConfig, arch: Architecture, train_source, val_source, init: Optional[Params] = None):
    """Train the classifier; returns the best-validation parameters and history.

    ``train_source`` and ``val_source`` expose ``labels`` (class code per row)
    and ``take(rows)`` returning float64 patches in HU.
    """
    if len(train_source) == 0 or len(val_source) == 0:
        raise ValueError("training and validation sets must be non-empty")
    sampler = BalancedBatchSampler(train_source.labels, seed=cfg.seed)
    ipe = sampler.iterations_per_epoch(cfg.batch_size)
    params = init_params(arch, cfg.seed) if init is None else {k: v.copy() for k, v in init.items()}
    velocity = {k: np.zeros_like(v) for k, v in params.items()}

    rng = np.random.default_rng([cfg.seed, 1])
    n_val = min(cfg.val_subsample, len(val_source))
    val_rows = np.sort(rng.choice(len(val_source), size=n_val, replace=False))
    x_val = val_source.take(val_rows)
    y_val = np.asarray(val_source.labels)[val_rows]

    history = TrainHistory(iters_per_epoch=ipe)
    val_loss, val_acc = _evaluate(params, arch, x_val, y_val)
    history.add(0, lr_at(0, ipe, cfg.lr_points), float("nan"), val_loss, val_acc)
    best_loss, best_params, stale = val_loss, params, 0
    shard_edges = np.linspace(0, cfg.batch_size, cfg.n_workers + 1).astype(int)
    running = []

    for it in range(cfg.max_iterations):
        lr = lr_at(it, ipe, cfg.lr_points)
        batch = sampler.next_batch(cfg.batch_size)
        grads, sizes, losses = [], [], []
        for a, b in zip(shard_edges[:-1], shard_edges[1:]):
            rows = batch.rows[a:b]
            loss, g = loss_and_grad(params, arch, train_source.take(rows), batch.labels[a:b])
            grads.append(g)
            sizes.append(b - a)
            losses.append(loss)
        loss = sum(n * l for n, l in zip(sizes, losses)) / cfg.batch_size
        if not math.isfinite(loss):
            raise NumericalError(f"non-finite training loss at iteration {it} (lr={lr})")
        running.append(loss)
        params, velocity = sgd_step(params, velocity, sync_aggregate(grads, sizes), lr, cfg.momentum)

        done = it + 1
        if done % cfg.eval_interval == 0 or done == cfg.max_iterations:
            val_loss, val_acc = _evaluate(params, arch, x_val, y_val)
            if not math.isfinite(val_loss):
                raise NumericalError(f"non-finite validation loss at iteration {done}")
            history.add(done, lr, float(np.mean(running)), val_loss, val_acc)
            log.info("iter %d lr %.1e train %.4f val %.4f acc %.4f",
                     done, lr, np.mean(running), val_loss, val_acc)
            running = []
            if val_loss < best_loss - cfg.min_delta:
                best_loss, best_params, stale = val_loss, params, 0
                history.best_iteration = done
            else:
                stale += 1
                if stale >= cfg.patience:
                    history.stop_reason = "early_stopping"
                    break
    if not history.stop_reason:
        history.stop_reason = "max_iterations"
    return best_params, history
