"""Mini-batch training loop with an order-fixed gradient reduction.

Each mini-batch is cut into fixed-size chunks. Chunk gradients may be computed
on worker threads, but they are always summed in chunk order, so a run with
any thread count reproduces the single-threaded run bit for bit.
"""
from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from threadpoolctl import threadpool_limits

from . import checkpoint
from .data import Dataset
from .layers import softmax_cross_entropy
from .metrics import batched_forward, predict
from .model import Model
from .optim import AdamState, adam_step, sgd_step, step_schedule
from .tensor import Rng

log = logging.getLogger(__name__)

LOG_HEADER = ("iteration", "epoch", "split", "loss", "accuracy")
SHUFFLE_STREAM = 0xD5F1


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 128
    optimizer: str = "adam"
    lr: float = 1e-3
    lr_milestones: tuple = ()
    seed: int = 0
    threads: int = 1
    chunk_size: int = 32
    log_interval: int = 10
    stop_at_accuracy: Optional[float] = None
    out_dir: Optional[Path] = None


@dataclass
class History:
    rows: list = field(default_factory=list)
    test_accuracy: list = field(default_factory=list)
    epoch_seconds: list = field(default_factory=list)
    best_accuracy: float = -1.0
    epochs_run: int = 0
    iteration: int = 0
    state: Optional[AdamState] = None

    def losses(self, split="batch"):
        return [r[3] for r in self.rows if r[2] == split]


def batch_gradients(model: Model, x, y, chunk_size: int = 32, pool: ThreadPoolExecutor = None):
    """Mean loss, per-sample predictions and mean gradients over one mini-batch."""
    n = len(y)
    bounds = [(s, min(s + chunk_size, n)) for s in range(0, n, chunk_size)]

    def work(b):
        return model.loss_and_grads(x[b[0]:b[1]], y[b[0]:b[1]], reduction="sum")

    results = list(pool.map(work, bounds)) if pool is not None else [work(b) for b in bounds]
    loss = 0.0
    grads = None
    preds = []
    for chunk_loss, logits, g, tape in results:
        loss += chunk_loss
        preds.append(predict(logits))
        model.update_running_stats(tape)
        if grads is None:
            grads = g
        else:
            for k in grads:
                grads[k] += g[k]
    for k in grads:
        grads[k] /= n
    return loss / n, np.concatenate(preds), grads


def evaluate_split(model: Model, ds: Dataset, batch_size: int = 500):
    logits, _ = batched_forward(model, ds.images, batch_size)
    loss, _ = softmax_cross_entropy(logits, ds.labels)
    return loss, float(np.mean(predict(logits) == ds.labels))


def train(model: Model, train_set: Dataset, test_set: Optional[Dataset], cfg: TrainConfig,
          state: Optional[AdamState] = None, start_epoch: int = 0, start_iteration: int = 0,
          best_accuracy: float = -1.0, log_path=None) -> History:
    """Run epochs ``start_epoch .. cfg.epochs - 1`` and return the metric history.

    Rows ``(iteration, epoch, split, loss, accuracy)`` are appended to
    ``log_path`` when given: one ``batch`` row per iteration, and ``train`` and
    ``test`` rows at the end of every epoch. With ``cfg.out_dir`` set,
    ``last.dpnc`` is written after every epoch and ``best.dpnc`` whenever the
    test accuracy improves.
    """
    params = model.named_parameters()
    if cfg.optimizer == "adam":
        state = state or AdamState(lr=cfg.lr)
    elif cfg.optimizer != "sgd":
        raise ValueError(f"unknown optimizer {cfg.optimizer!r}")
    schedule = step_schedule(cfg.lr, cfg.lr_milestones)
    hist = History(best_accuracy=best_accuracy)
    iteration = start_iteration
    n = len(train_set)
    out_dir = Path(cfg.out_dir) if cfg.out_dir else None
    log_file = None
    if log_path is not None:
        new = not Path(log_path).exists() or Path(log_path).stat().st_size == 0
        log_file = open(log_path, "a", newline="")
        writer = csv.writer(log_file)
        if new:
            writer.writerow(LOG_HEADER)

    def emit(row):
        hist.rows.append(row)
        if log_file is not None:
            writer.writerow([row[0], row[1], row[2], repr(row[3]), repr(row[4])])

    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    try:
        with threadpool_limits(limits=1):
            for epoch in range(start_epoch, cfg.epochs):
                t0 = time.perf_counter()
                order = Rng(cfg.seed, SHUFFLE_STREAM, epoch).permutation(n)
                ep_loss, ep_correct = 0.0, 0
                for start in range(0, n, cfg.batch_size):
                    idx = order[start:start + cfg.batch_size]
                    x, y = train_set.images[idx], train_set.labels[idx]
                    loss, pred, grads = batch_gradients(model, x, y, cfg.chunk_size, pool)
                    if cfg.optimizer == "adam":
                        state.lr = schedule(iteration)
                        adam_step(params, grads, state)
                    else:
                        sgd_step(params, grads, schedule, iteration)
                    iteration += 1
                    correct = int(np.sum(pred == y))
                    ep_loss += loss * len(y)
                    ep_correct += correct
                    emit((iteration, epoch, "batch", loss, correct / len(y)))
                    if cfg.log_interval and iteration % cfg.log_interval == 0:
                        log.info("epoch %d iter %d loss %.4f", epoch, iteration, loss)
                emit((iteration, epoch, "train", ep_loss / n, ep_correct / n))
                acc = None
                if test_set is not None:
                    t_loss, acc = evaluate_split(model, test_set)
                    emit((iteration, epoch, "test", t_loss, acc))
                    hist.test_accuracy.append(acc)
                hist.epoch_seconds.append(time.perf_counter() - t0)
                hist.epochs_run += 1
                log.info("epoch %d done in %.1fs, test accuracy %s", epoch,
                         hist.epoch_seconds[-1], "n/a" if acc is None else f"{acc:.4f}")
                improved = acc is not None and acc > hist.best_accuracy
                if improved:
                    hist.best_accuracy = acc
                if out_dir is not None:
                    extra = {"epoch": epoch + 1, "iteration": iteration,
                             "best_accuracy": hist.best_accuracy, "seed": cfg.seed}
                    if improved:
                        checkpoint.save(out_dir / "best.dpnc", model, state, extra)
                    checkpoint.save(out_dir / "last.dpnc", model, state, extra)
                if log_file is not None:
                    log_file.flush()
                if cfg.stop_at_accuracy is not None and acc is not None and acc >= cfg.stop_at_accuracy:
                    break
    finally:
        if pool is not None:
            pool.shutdown()
        if log_file is not None:
            log_file.close()
    hist.state = state
    hist.iteration = iteration
    return hist
