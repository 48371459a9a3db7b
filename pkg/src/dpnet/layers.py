"""Differentiable layers with explicit forward/backward passes.

Every ``*_forward`` returns ``(output, tape)``; the matching ``*_backward``
consumes that tape. Spatial layers accept a single sample ``[C, H, W]`` or a
batch ``[N, C, H, W]`` and return the same rank they were given.

Max-type operators (deformable maxout, branch maxout, pooling, global max)
break ties by scan order: the first candidate wins. For deformable maxout the
scan is row-major over window offsets, for branch maxout it is the lowest
branch index, for pixels it is row-major.

Reductions inside ``dm_backward`` are strictly sequential (row-major over
``(n, h, w)``) so the result can be reproduced bit-for-bit by a plain loop.
"""
from __future__ import annotations

import contextlib
from collections import Counter
from dataclasses import dataclass, field
from itertools import product
from typing import Any

import numpy as np

from .tensor import DTYPE

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ContractViolation(RuntimeError):
    """A backward pass was handed a tape it cannot have produced."""


@dataclass
class TapeRecord:
    op: str
    saved: dict = field(default_factory=dict)
    params: Any = None
    batched: bool = True


def _expect(tape: TapeRecord, op: str, params=None):
    if not isinstance(tape, TapeRecord) or tape.op != op:
        got = getattr(tape, "op", type(tape).__name__)
        raise ContractViolation(f"{op} backward got a tape from {got!r}")
    if params is not None and tape.params is not params:
        raise ContractViolation(f"{op} tape was recorded with different parameters")


def _batch(x):
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim == 3:
        return x[None], False
    if x.ndim == 4:
        return x, True
    raise ValueError(f"expected [C,H,W] or [N,C,H,W], got shape {x.shape}")


def _unbatch(x, batched):
    return x if batched else x[0]


def _check_grad_shape(grad, tape, expected_shape):
    grad = np.asarray(grad, dtype=DTYPE)
    if not tape.batched:
        grad = grad[None]
    if grad.shape != tuple(expected_shape):
        raise ContractViolation(
            f"{tape.op} backward: grad shape {grad.shape} does not match tape {tuple(expected_shape)}")
    return grad


# ---------------------------------------------------------------------------
# operation counting

class OpCounter:
    """Counts inner-loop steps of instrumented kernels while enabled."""

    def __init__(self):
        self.counts = Counter()
        self.enabled = False

    def add(self, name, n):
        if self.enabled:
            self.counts[name] += int(n)

    @contextlib.contextmanager
    def counting(self):
        prev = self.enabled
        self.enabled = True
        self.counts.clear()
        try:
            yield self.counts
        finally:
            self.enabled = prev


op_counter = OpCounter()


# ---------------------------------------------------------------------------
# deformable maxout

@dataclass
class DmParams:
    """Per-channel multiplicative (alpha) and additive (beta) window penalties."""

    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=DTYPE)
        self.beta = np.asarray(self.beta, dtype=DTYPE)
        if self.alpha.shape != self.beta.shape:
            raise ValueError(f"alpha {self.alpha.shape} and beta {self.beta.shape} differ")
        if self.alpha.ndim != 3 or self.alpha.shape[1] != self.alpha.shape[2]:
            raise ValueError(f"DM penalties must be [C, k, k], got {self.alpha.shape}")
        if self.alpha.shape[1] % 2 != 1:
            raise ValueError(f"DM window must be odd, got {self.alpha.shape[1]}")

    @property
    def window(self) -> int:
        return self.alpha.shape[1]

    @property
    def channels(self) -> int:
        return self.alpha.shape[0]

    @classmethod
    def identity(cls, channels: int, window: int = 3) -> "DmParams":
        """alpha=1, beta=0: a plain max filter."""
        return cls(np.ones((channels, window, window)), np.zeros((channels, window, window)))


def dm_forward(x, p: DmParams):
    """out[c,i] = max over window offsets of alpha*x_padded + beta (zero padding)."""
    xb, batched = _batch(x)
    n, c, h, w = xb.shape
    if c != p.channels:
        raise ValueError(f"DM expects {p.channels} channels, got {c}")
    k = p.window
    r = k // 2
    xp = np.pad(xb, ((0, 0), (0, 0), (r, r), (r, r)))
    best = None
    arg = np.zeros((n, c, h, w), dtype=np.int16)
    cand = np.empty((n, c, h, w), dtype=DTYPE)
    win = np.empty((n, c, h, w), dtype=bool)
    step = np.empty((n, c, h, w), dtype=np.int16)
    for o, (u, v) in enumerate(product(range(k), range(k))):
        src = xp[:, :, u:u + h, v:v + w]
        np.multiply(src, p.alpha[:, u, v][None, :, None, None], out=cand)
        cand += p.beta[:, u, v][None, :, None, None]
        if best is None:
            best, xwin = cand.copy(), src.copy()  # xwin: input value under each winner
            continue
        np.greater(cand, best, out=win)
        np.copyto(best, cand, where=win)
        # offsets arrive in increasing order, so a winner's index is always the largest so far
        np.multiply(win, o, out=step)
        np.maximum(arg, step, out=arg)
        np.copyto(xwin, src, where=win)
    op_counter.add("dm", n * c * h * w * k * k)
    tape = TapeRecord("dm", {"arg": arg, "xwin": xwin, "shape": xb.shape},
                      params=p, batched=batched)
    return _unbatch(best, batched), tape


def dm_backward(grad_out, tape: TapeRecord, p: DmParams):
    """Subgradient routed through the winning window offset of each output."""
    _expect(tape, "dm", p)
    n, c, h, w = tape.saved["shape"]
    g = _check_grad_shape(grad_out, tape, (n, c, h, w))
    arg, xwin = tape.saved["arg"], tape.saved["xwin"]
    k = p.window
    kk = k * k
    r = k // 2
    # bins (c, offset); bincount accumulates sequentially over (n, h, w) per channel
    bins = (np.arange(c, dtype=np.intp)[:, None, None, None] * kk
            + arg.transpose(1, 0, 2, 3)).ravel()
    gt = g.transpose(1, 0, 2, 3).ravel()
    grad_beta = np.bincount(bins, weights=gt, minlength=c * kk).reshape(p.beta.shape)
    grad_alpha = np.bincount(bins, weights=gt * xwin.transpose(1, 0, 2, 3).ravel(),
                             minlength=c * kk).reshape(p.alpha.shape)
    alpha_win = p.alpha.reshape(c, kk)[np.arange(c)[None, :, None, None], arg]
    g_alpha = g * alpha_win
    grad_xp = np.zeros((n, c, h + 2 * r, w + 2 * r), dtype=DTYPE)
    for o, (u, v) in enumerate(product(range(k), range(k))):
        grad_xp[:, :, u:u + h, v:v + w] += np.where(arg == o, g_alpha, 0.0)
    grad_in = grad_xp[:, :, r:r + h, r:r + w]
    return _unbatch(np.ascontiguousarray(grad_in), tape.batched), grad_alpha, grad_beta


def dm_offsets(tape: TapeRecord) -> np.ndarray:
    """Winning window offsets as (dy, dx) relative to the center, shape [..., 2]."""
    arg = tape.saved["arg"]
    k = tape.params.window
    dy, dx = np.divmod(arg.astype(np.int64), k)
    out = np.stack([dy - k // 2, dx - k // 2], axis=-1)
    return out if tape.batched else out[0]


def depthwise_conv2d_forward(x, weight):
    """Per-channel k x k zero-padded cross-correlation, instrumented like DM."""
    xb, batched = _batch(x)
    n, c, h, w = xb.shape
    weight = np.asarray(weight, dtype=DTYPE)
    if weight.shape[0] != c:
        raise ValueError(f"depthwise weight has {weight.shape[0]} channels, input {c}")
    k = weight.shape[-1]
    r = k // 2
    xp = np.pad(xb, ((0, 0), (0, 0), (r, r), (r, r)))
    out = np.zeros((n, c, h, w), dtype=DTYPE)
    for u, v in product(range(k), range(k)):
        out += weight[:, u, v][None, :, None, None] * xp[:, :, u:u + h, v:v + w]
    op_counter.add("depthwise", n * c * h * w * k * k)
    return _unbatch(out, batched)


# ---------------------------------------------------------------------------
# convolution

@dataclass
class ConvParams:
    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=DTYPE)
        self.bias = np.asarray(self.bias, dtype=DTYPE)
        if self.weight.ndim != 4 or self.weight.shape[2] != self.weight.shape[3]:
            raise ValueError(f"conv weight must be [Co, Ci, k, k], got {self.weight.shape}")
        if self.weight.shape[2] % 2 != 1:
            raise ValueError("conv kernel size must be odd")
        if self.bias.shape != (self.weight.shape[0],):
            raise ValueError(f"conv bias must be [{self.weight.shape[0]}], got {self.bias.shape}")

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]


def _im2col(xp, k, h, w):
    # [N, Ci, H+2r, W+2r] -> [N*H*W, Ci*k*k]
    n, ci = xp.shape[:2]
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, ci * k * k)


def conv2d_forward(x, p: ConvParams):
    """Stride-1, same-size, zero-padded cross-correlation plus bias."""
    xb, batched = _batch(x)
    n, ci, h, w = xb.shape
    co, wci, k, _ = p.weight.shape
    if ci != wci:
        raise ValueError(f"conv expects {wci} input channels, got {ci}")
    r = k // 2
    xp = np.pad(xb, ((0, 0), (0, 0), (r, r), (r, r)))
    cols = _im2col(xp, k, h, w)
    out = cols @ p.weight.reshape(co, -1).T + p.bias
    out = out.reshape(n, h, w, co).transpose(0, 3, 1, 2)
    tape = TapeRecord("conv", {"xp": xp, "cols": cols, "shape": xb.shape}, params=p, batched=batched)
    return _unbatch(np.ascontiguousarray(out), batched), tape


def conv2d_backward(grad_out, tape: TapeRecord, p: ConvParams):
    _expect(tape, "conv", p)
    n, ci, h, w = tape.saved["shape"]
    co, _, k, _ = p.weight.shape
    r = k // 2
    g = _check_grad_shape(grad_out, tape, (n, co, h, w))
    gmat = g.transpose(0, 2, 3, 1).reshape(-1, co)
    cols = tape.saved["cols"]
    grad_w = (gmat.T @ cols).reshape(p.weight.shape)
    grad_b = gmat.sum(axis=0)
    gcols = (gmat @ p.weight.reshape(co, -1)).reshape(n, h, w, ci, k, k)
    grad_xp = np.zeros((n, ci, h + 2 * r, w + 2 * r), dtype=DTYPE)
    for u, v in product(range(k), range(k)):
        grad_xp[:, :, u:u + h, v:v + w] += gcols[:, :, :, :, u, v].transpose(0, 3, 1, 2)
    grad_in = np.ascontiguousarray(grad_xp[:, :, r:r + h, r:r + w])
    return _unbatch(grad_in, tape.batched), grad_w, grad_b


# ---------------------------------------------------------------------------
# branch maxout, global max, pooling

def branch_maxout_forward(branches):
    """Entry-wise max across same-shaped branches; lowest index wins ties."""
    if len(branches) == 0:
        raise ValueError("branch maxout needs at least one branch")
    arrs = [np.asarray(b, dtype=DTYPE) for b in branches]
    shape = arrs[0].shape
    for a in arrs[1:]:
        if a.shape != shape:
            raise ValueError(f"branch shapes differ: {shape} vs {a.shape}")
    if len(arrs) == 1:
        return arrs[0].copy(), TapeRecord("maxout", {"arg": np.zeros(shape, np.int16), "count": 1})
    stack = np.stack(arrs)
    arg = np.argmax(stack, axis=0).astype(np.int16)
    out = np.take_along_axis(stack, arg[None].astype(np.intp), axis=0)[0]
    return out, TapeRecord("maxout", {"arg": arg, "count": len(arrs)})


def branch_maxout_backward(grad_out, tape: TapeRecord):
    _expect(tape, "maxout")
    arg = tape.saved["arg"]
    g = np.asarray(grad_out, dtype=DTYPE)
    if g.shape != arg.shape:
        raise ContractViolation(f"maxout grad shape {g.shape} != {arg.shape}")
    return [np.where(arg == b, g, 0.0) for b in range(tape.saved["count"])]


def global_spatial_max_forward(x):
    """Per-channel max over all pixels: [C,H,W] -> [C] (or batched)."""
    xb, batched = _batch(x)
    n, c, h, w = xb.shape
    if h < 1 or w < 1:
        raise ValueError("global max needs a non-empty spatial domain")
    flat = xb.reshape(n, c, h * w)
    arg = np.argmax(flat, axis=2)
    out = np.take_along_axis(flat, arg[..., None], axis=2)[..., 0]
    tape = TapeRecord("gmax", {"arg": arg, "shape": xb.shape}, batched=batched)
    return _unbatch(out, batched), tape


def global_spatial_max_backward(grad_out, tape: TapeRecord):
    _expect(tape, "gmax")
    n, c, h, w = tape.saved["shape"]
    g = np.asarray(grad_out, dtype=DTYPE)
    if not tape.batched:
        g = g[None]
    if g.shape != (n, c):
        raise ContractViolation(f"global max grad shape {g.shape} != {(n, c)}")
    grad = np.zeros((n, c, h * w), dtype=DTYPE)
    np.put_along_axis(grad, tape.saved["arg"][..., None], g[..., None], axis=2)
    return _unbatch(grad.reshape(n, c, h, w), tape.batched)


def global_max_pixels(tape: TapeRecord) -> np.ndarray:
    """Winning (row, col) per channel, shape [..., C, 2]."""
    w = tape.saved["shape"][3]
    rc = np.stack(np.divmod(tape.saved["arg"], w), axis=-1)
    return rc if tape.batched else rc[0]


def maxpool2_forward(x):
    """2x2 stride-2 max pooling; odd sizes are first edge-replicated to even."""
    xb, batched = _batch(x)
    n, c, h, w = xb.shape
    ph, pw = h % 2, w % 2
    if ph or pw:
        xb = np.pad(xb, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge")
    hh, ww = xb.shape[2] // 2, xb.shape[3] // 2
    blocks = xb.reshape(n, c, hh, 2, ww, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, hh, ww, 4)
    arg = np.argmax(blocks, axis=-1).astype(np.int8)
    out = np.take_along_axis(blocks, arg[..., None].astype(np.intp), axis=-1)[..., 0]
    tape = TapeRecord("pool", {"arg": arg, "shape": (n, c, h, w)}, batched=batched)
    return _unbatch(out, batched), tape


def maxpool2_backward(grad_out, tape: TapeRecord):
    _expect(tape, "pool")
    n, c, h, w = tape.saved["shape"]
    arg = tape.saved["arg"]
    g = _check_grad_shape(grad_out, tape, arg.shape)
    hh, ww = arg.shape[2:]
    blocks = np.zeros((n, c, hh, ww, 4), dtype=DTYPE)
    np.put_along_axis(blocks, arg[..., None].astype(np.intp), g[..., None], axis=-1)
    grad = blocks.reshape(n, c, hh, ww, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * hh, 2 * ww)
    # replicated edge rows/cols hand their gradient back to the source row/col
    if 2 * hh != h:
        grad[:, :, h - 1, :] += grad[:, :, h, :]
    if 2 * ww != w:
        grad[:, :, :, w - 1] += grad[:, :, :, w]
    return _unbatch(np.ascontiguousarray(grad[:, :, :h, :w]), tape.batched)


def pool_source_pixel(tape: TapeRecord, sample: int, channel: int, row: int, col: int):
    """Pre-pooling pixel that won pooled output (row, col)."""
    n, c, h, w = tape.saved["shape"]
    a = int(tape.saved["arg"][sample, channel, row, col])
    r, s = 2 * row + a // 2, 2 * col + a % 2
    return min(r, h - 1), min(s, w - 1)


# ---------------------------------------------------------------------------
# pointwise and dense layers

def relu_forward(x):
    x = np.asarray(x, dtype=DTYPE)
    return np.maximum(x, 0.0), TapeRecord("relu", {"x": x})


def relu_backward(grad_out, tape: TapeRecord):
    # subgradient at exactly 0 is 0
    _expect(tape, "relu")
    x = tape.saved["x"]
    g = np.asarray(grad_out, dtype=DTYPE)
    if g.shape != x.shape:
        raise ContractViolation(f"relu grad shape {g.shape} != {x.shape}")
    return np.where(x > 0, g, 0.0)


@dataclass
class FcParams:
    weight: np.ndarray  # [D_out, D_in]
    bias: np.ndarray

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=DTYPE)
        self.bias = np.asarray(self.bias, dtype=DTYPE)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError("fc weight must be [D_out, D_in] with bias [D_out]")


def fc_forward(x, p: FcParams):
    x = np.asarray(x, dtype=DTYPE)
    batched = x.ndim == 2
    xb = x if batched else x[None]
    if xb.ndim != 2 or xb.shape[1] != p.weight.shape[1]:
        raise ValueError(f"fc expects input dim {p.weight.shape[1]}, got shape {x.shape}")
    out = xb @ p.weight.T + p.bias
    return _unbatch(out, batched), TapeRecord("fc", {"x": xb}, params=p, batched=batched)


def fc_backward(grad_out, tape: TapeRecord, p: FcParams):
    _expect(tape, "fc", p)
    x = tape.saved["x"]
    g = np.asarray(grad_out, dtype=DTYPE)
    if not tape.batched:
        g = g[None]
    if g.shape != (x.shape[0], p.weight.shape[0]):
        raise ContractViolation(f"fc grad shape {g.shape} mismatches tape")
    grad_in = g @ p.weight
    return _unbatch(grad_in, tape.batched), g.T @ x, g.sum(axis=0)


@dataclass
class BnParams:
    gamma: np.ndarray
    shift: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def fresh(cls, channels: int) -> "BnParams":
        return cls(np.ones(channels), np.zeros(channels), np.zeros(channels), np.ones(channels))


def batchnorm_forward(x, p: BnParams, train: bool = True):
    """Per-channel normalization over batch and space of a [N, C, H, W] batch.

    Running statistics are not touched here; the caller applies the batch
    statistics stored on the tape through :func:`batchnorm_update_running`.
    """
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 4:
        raise ValueError(f"batch norm expects [N, C, H, W], got {x.shape}")
    n = x.shape[0]
    view = (1, -1, 1, 1)
    if train:
        if n < 2:
            raise ValueError("batch norm in training mode needs a batch of at least 2")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
    else:
        mean, var = p.running_mean, p.running_var
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean.reshape(view)) * inv_std.reshape(view)
    out = p.gamma.reshape(view) * xhat + p.shift.reshape(view)
    tape = TapeRecord("bn", {"xhat": xhat, "inv_std": inv_std, "mean": mean, "var": var,
                             "train": train}, params=p)
    return out, tape


def batchnorm_update_running(p: BnParams, tape: TapeRecord, momentum: float = BN_MOMENTUM):
    _expect(tape, "bn", p)
    if tape.saved["train"]:
        m = tape.saved["xhat"]
        count = m.shape[0] * m.shape[2] * m.shape[3]
        unbiased = tape.saved["var"] * count / max(count - 1, 1)
        p.running_mean[...] = (1 - momentum) * p.running_mean + momentum * tape.saved["mean"]
        p.running_var[...] = (1 - momentum) * p.running_var + momentum * unbiased


def batchnorm_backward(grad_out, tape: TapeRecord, p: BnParams):
    _expect(tape, "bn", p)
    xhat, inv_std = tape.saved["xhat"], tape.saved["inv_std"]
    g = np.asarray(grad_out, dtype=DTYPE)
    if g.shape != xhat.shape:
        raise ContractViolation(f"bn grad shape {g.shape} != {xhat.shape}")
    view = (1, -1, 1, 1)
    grad_gamma = (g * xhat).sum(axis=(0, 2, 3))
    grad_shift = g.sum(axis=(0, 2, 3))
    gx = g * p.gamma.reshape(view)
    if not tape.saved["train"]:
        return gx * inv_std.reshape(view), grad_gamma, grad_shift
    m = xhat.shape[0] * xhat.shape[2] * xhat.shape[3]
    grad_in = (inv_std.reshape(view) / m) * (
        m * gx - gx.sum(axis=(0, 2, 3)).reshape(view)
        - xhat * (gx * xhat).sum(axis=(0, 2, 3)).reshape(view))
    return grad_in, grad_gamma, grad_shift


def softmax_cross_entropy(logits, label):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits.

    ``logits`` is ``[K]`` with an integer label, or ``[N, K]`` with ``N`` labels.
    """
    z = np.asarray(logits, dtype=DTYPE)
    batched = z.ndim == 2
    zb = z if batched else z[None]
    labels = np.atleast_1d(np.asarray(label))
    k = zb.shape[1]
    if labels.shape != (zb.shape[0],):
        raise ValueError(f"need one label per row, got {labels.shape} for {zb.shape}")
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"labels must lie in [0, {k}), got {labels}")
    labels = labels.astype(np.intp)
    shifted = zb - zb.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(zb.shape[0])
    losses = log_norm - shifted[rows, labels]
    probs = np.exp(shifted - log_norm[:, None])
    grad = probs
    grad[rows, labels] -= 1.0
    n = zb.shape[0]
    loss = float(losses.sum() / n)
    grad = grad / n
    return loss, (grad if batched else grad[0])
