"""Operation counts and wall-clock comparison of DM against depthwise convolution."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from . import layers as L
from .tensor import Rng

# DM keeps a running argmax and the winning input next to the running max,
# so each window step makes several more passes over memory than a depthwise
# multiply-add. On one core the best-of ratio was about 2.5-3.5x for a single
# image and 5-7x for a batch of 8; the bound leaves headroom for busy hosts.
WALL_CLOCK_FACTOR = 10.0

DEFAULT_SHAPES = (
    (1, 8, 28, 28, 3),
    (1, 16, 14, 14, 3),
    (1, 32, 7, 7, 3),
    (8, 8, 28, 28, 3),
    (8, 16, 14, 14, 5),
)


@dataclass
class BenchRow:
    shape: tuple  # (N, C, H, W, k)
    expected_ops: int
    dm_ops: int
    depthwise_ops: int
    dm_seconds: float
    depthwise_seconds: float

    @property
    def ratio(self) -> float:
        return self.dm_seconds / self.depthwise_seconds if self.depthwise_seconds > 0 else float("inf")

    @property
    def counts_match(self) -> bool:
        return self.dm_ops == self.expected_ops == self.depthwise_ops


def count_ops(shape, seed: int = 0):
    """(dm count, depthwise count) for one forward pass on an ``(N,C,H,W,k)`` shape."""
    n, c, h, w, k = shape
    rng = Rng(seed, *shape)
    x = rng.normal((n, c, h, w))
    p = L.DmParams(rng.normal((c, k, k)), rng.normal((c, k, k)))
    with L.op_counter.counting() as counts:
        L.dm_forward(x, p)
        L.depthwise_conv2d_forward(x, p.alpha)
    return counts["dm"], counts["depthwise"]


def _best_time(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def run_bench(shapes=DEFAULT_SHAPES, repeats: int = 5, seed: int = 0) -> list:
    rows = []
    with threadpool_limits(limits=1):
        for shape in shapes:
            n, c, h, w, k = shape
            dm_ops, dw_ops = count_ops(shape, seed)
            rng = Rng(seed, *shape)
            x = rng.normal((n, c, h, w))
            p = L.DmParams(rng.normal((c, k, k)), rng.normal((c, k, k)))
            t_dm = _best_time(lambda: L.dm_forward(x, p), repeats)
            t_dw = _best_time(lambda: L.depthwise_conv2d_forward(x, p.alpha), repeats)
            rows.append(BenchRow(tuple(shape), n * c * h * w * k * k, dm_ops, dw_ops, t_dm, t_dw))
    return rows


def format_table(rows) -> str:
    head = (f"{'N':>3} {'C':>4} {'H':>4} {'W':>4} {'k':>2} {'expected':>10} {'dm ops':>10} "
            f"{'dw ops':>10} {'dm ms':>9} {'dw ms':>9} {'ratio':>6}")
    lines = [head, "-" * len(head)]
    for r in rows:
        n, c, h, w, k = r.shape
        lines.append(f"{n:>3} {c:>4} {h:>4} {w:>4} {k:>2} {r.expected_ops:>10} {r.dm_ops:>10} "
                     f"{r.depthwise_ops:>10} {1e3 * r.dm_seconds:>9.3f} {1e3 * r.depthwise_seconds:>9.3f} "
                     f"{r.ratio:>6.2f}")
    ok = all(r.counts_match for r in rows)
    worst = max((r.ratio for r in rows), default=float("nan"))
    lines.append(f"op counts match N*C*H*W*k^2 for both kernels: {'yes' if ok else 'NO'}")
    lines.append(f"worst wall-clock ratio dm/depthwise: {worst:.2f} (documented bound {WALL_CLOCK_FACTOR:g})")
    return "\n".join(lines)


def time_training_step(model, batch, labels, repeats: int = 3) -> float:
    """Best-of seconds for one forward+backward over ``batch``."""
    with threadpool_limits(limits=1):
        return _best_time(lambda: model.loss_and_grads(np.asarray(batch), np.asarray(labels)), repeats)
