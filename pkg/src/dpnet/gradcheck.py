"""Finite-difference verification of every backward pass.

Each case draws a random instance, builds a scalar objective (a random linear
functional of the layer output, or the loss itself), and compares every
analytic gradient the layer returns with central differences.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import layers as L
from .model import Model, ModelConfig
from .optim import finite_diff_check
from .tensor import Rng

LAYER_TOL = 1e-5
MODEL_TOL = 1e-4


def _case_dm(rng):
    k = (1, 3, 5)[int(rng.integers(0, 2))]
    x = rng.normal((2, 3, 5, 5))
    alpha, beta = rng.normal((3, k, k)), rng.normal((3, k, k))
    r = rng.normal((2, 3, 5, 5))

    def f(x, alpha, beta):
        return np.sum(L.dm_forward(x, L.DmParams(alpha, beta))[0] * r)

    p = L.DmParams(alpha, beta)
    _, t = L.dm_forward(x, p)
    gx, ga, gb = L.dm_backward(r, t, p)
    return f, {"x": x, "alpha": alpha, "beta": beta}, {"x": gx, "alpha": ga, "beta": gb}


def _case_conv(rng):
    x, w, b = rng.normal((2, 3, 5, 5)), rng.normal((4, 3, 3, 3)), rng.normal(4)
    r = rng.normal((2, 4, 5, 5))

    def f(x, w, b):
        return np.sum(L.conv2d_forward(x, L.ConvParams(w, b))[0] * r)

    p = L.ConvParams(w, b)
    _, t = L.conv2d_forward(x, p)
    gx, gw, gb = L.conv2d_backward(r, t, p)
    return f, {"x": x, "w": w, "b": b}, {"x": gx, "w": gw, "b": gb}


def _case_maxout(rng):
    xs = {f"b{i}": rng.normal((2, 3, 4, 4)) for i in range(3)}
    r = rng.normal((2, 3, 4, 4))

    def f(**kw):
        return np.sum(L.branch_maxout_forward([kw[k] for k in sorted(kw)])[0] * r)

    _, t = L.branch_maxout_forward([xs[k] for k in sorted(xs)])
    grads = L.branch_maxout_backward(r, t)
    return f, xs, {k: g for k, g in zip(sorted(xs), grads)}


def _case_gmax(rng):
    x, r = rng.normal((2, 3, 4, 4)), rng.normal((2, 3))

    def f(x):
        return np.sum(L.global_spatial_max_forward(x)[0] * r)

    _, t = L.global_spatial_max_forward(x)
    return f, {"x": x}, {"x": L.global_spatial_max_backward(r, t)}


def _case_pool(rng):
    x = rng.normal((2, 3, 5, 6))
    r = rng.normal((2, 3, 3, 3))

    def f(x):
        return np.sum(L.maxpool2_forward(x)[0] * r)

    _, t = L.maxpool2_forward(x)
    return f, {"x": x}, {"x": L.maxpool2_backward(r, t)}


def _case_relu(rng):
    x, r = rng.normal((3, 4, 4)), rng.normal((3, 4, 4))

    def f(x):
        return np.sum(L.relu_forward(x)[0] * r)

    _, t = L.relu_forward(x)
    return f, {"x": x}, {"x": L.relu_backward(r, t)}


def _case_fc(rng):
    x, w, b, r = rng.normal((3, 5)), rng.normal((4, 5)), rng.normal(4), rng.normal((3, 4))

    def f(x, w, b):
        return np.sum(L.fc_forward(x, L.FcParams(w, b))[0] * r)

    p = L.FcParams(w, b)
    _, t = L.fc_forward(x, p)
    gx, gw, gb = L.fc_backward(r, t, p)
    return f, {"x": x, "w": w, "b": b}, {"x": gx, "w": gw, "b": gb}


def _case_bn(rng):
    x = rng.normal((4, 3, 3, 3))
    gamma, shift = 1 + 0.2 * rng.normal(3), rng.normal(3)
    r = rng.normal((4, 3, 3, 3))

    def params(gamma, shift):
        return L.BnParams(gamma, shift, np.zeros(3), np.ones(3))

    def f(x, gamma, shift):
        return np.sum(L.batchnorm_forward(x, params(gamma, shift))[0] * r)

    p = params(gamma, shift)
    _, t = L.batchnorm_forward(x, p)
    gx, gg, gs = L.batchnorm_backward(r, t, p)
    return f, {"x": x, "gamma": gamma, "shift": shift}, {"x": gx, "gamma": gg, "shift": gs}


def _case_loss(rng):
    z = 2 * rng.normal((4, 10))
    labels = rng.integers(0, 9, 4)

    def f(z):
        return L.softmax_cross_entropy(z, labels)[0]

    return f, {"z": z}, {"z": L.softmax_cross_entropy(z, labels)[1]}


TINY_GRADCHECK_MODEL = ModelConfig(channels=(2, 2), width=3, downsample_after=(0,),
                                   input_shape=(1, 6, 6), num_classes=4)


def _case_model(rng, max_coords=12):
    model = Model(TINY_GRADCHECK_MODEL, rng.child(1))
    # move DM penalties off alpha=1, beta=0 so max ties are not the norm
    for name, p in model.named_parameters().items():
        if name.endswith(".alpha"):
            p += 0.2 * rng.normal(p.shape)
        elif name.endswith(".beta") or name.endswith("bias"):
            p += 0.2 * rng.normal(p.shape)
    x = rng.uniform(0.0, 1.0, (2, 1, 6, 6))
    labels = rng.integers(0, 3, 2)
    params = model.named_parameters()

    def f(**kw):
        saved = {}
        for k, v in kw.items():
            if k != "input":
                saved[k] = params[k].copy()
                params[k][...] = v
        try:
            logits, _ = model.forward(kw.get("input", x))
            return L.softmax_cross_entropy(logits, labels)[0]
        finally:
            for k, v in saved.items():
                params[k][...] = v

    logits, tape = model.forward(x)
    _, g = L.softmax_cross_entropy(logits, labels)
    grads = model.backward(g, tape)
    inputs = {k: v.copy() for k, v in params.items()}
    inputs["input"] = x
    coords = {k: rng.permutation(v.size)[:max_coords] for k, v in inputs.items()}
    return f, inputs, grads, coords


CASES = {
    "dm": (_case_dm, LAYER_TOL),
    "conv": (_case_conv, LAYER_TOL),
    "maxout": (_case_maxout, LAYER_TOL),
    "global_max": (_case_gmax, LAYER_TOL),
    "pool": (_case_pool, LAYER_TOL),
    "relu": (_case_relu, LAYER_TOL),
    "fc": (_case_fc, LAYER_TOL),
    "batchnorm": (_case_bn, LAYER_TOL),
    "loss": (_case_loss, LAYER_TOL),
    "model": (_case_model, MODEL_TOL),
}


@dataclass
class GradcheckRow:
    layer: str
    instances: int
    checked: int
    excluded: int
    max_rel_error: float
    tol: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_rel_error <= self.tol


def check_instance(case, rng):
    out = case(rng)
    f, inputs, grads = out[:3]
    coords = out[3] if len(out) > 3 else {}
    worst, checked, excluded = 0.0, 0, 0
    for key, x in inputs.items():
        def fk(v, key=key):
            return f(**{**inputs, key: v})

        res = finite_diff_check(fk, x, grads[key], coords=coords.get(key))
        worst = max(worst, res.max_rel_error)
        checked += res.checked
        excluded += len(res.excluded)
    return worst, checked, excluded


def run_gradcheck(layers=None, instances: int = 20, seed: int = 0) -> list:
    rows = []
    for name in layers or CASES:
        case, tol = CASES[name]
        t0 = time.perf_counter()
        worst, checked, excluded = 0.0, 0, 0
        for i in range(instances):
            w, c, e = check_instance(case, Rng(seed, i))
            worst, checked, excluded = max(worst, w), checked + c, excluded + e
        rows.append(GradcheckRow(name, instances, checked, excluded, worst, tol,
                                 time.perf_counter() - t0))
    return rows


def format_table(rows) -> str:
    head = (f"{'layer':<11} {'inst':>4} {'checked':>8} {'excluded':>8} {'max rel err':>12} "
            f"{'tol':>8} {'sec':>6}  result")
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{r.layer:<11} {r.instances:>4} {r.checked:>8} {r.excluded:>8} "
                     f"{r.max_rel_error:>12.3e} {r.tol:>8.0e} {r.seconds:>6.1f}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
