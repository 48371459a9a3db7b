"""Acceptance checks; one pass/fail line per criterion is printed in the terminal summary.

Criteria 5, 6 and parts of 7 and 8 need the official MNIST files (see
``DPN_MNIST_DIR``); they are skipped, not failed, when the files are absent.
"""
import time

import numpy as np
import pytest

import oracles
from dpnet import bench, checkpoint, gradcheck
from dpnet import layers as L
from dpnet.data import (AffineParams, Dataset, affine_warp, load_mnist, make_affine_testset,
                        make_translation_trainset, read_idx, shift_image)
from dpnet.metrics import class_distances, evaluate
from dpnet.model import ModelConfig, build_baseline_cnn, build_dpn
from dpnet.tensor import Rng
from dpnet.training import TrainConfig, evaluate_split, train

criterion = pytest.mark.criterion


def _same_bytes(a, b):
    return a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()


# ---------------------------------------------------------------------------
@criterion(1, "gradient suite: every layer <= 1e-5, 2-unit model <= 1e-4, 20 instances, < 2 min")
def test_gradient_suite():
    t0 = time.perf_counter()
    rows = gradcheck.run_gradcheck(instances=20, seed=0)
    elapsed = time.perf_counter() - t0
    print("\n" + gradcheck.format_table(rows) + f"\ntotal {elapsed:.1f}s")
    assert {r.layer for r in rows} == {"dm", "conv", "maxout", "global_max", "pool", "relu", "fc",
                                       "batchnorm", "loss", "model"}
    assert all(r.instances == 20 for r in rows)
    assert all(r.passed for r in rows), gradcheck.format_table(rows)
    assert elapsed < 120.0


# ---------------------------------------------------------------------------
@criterion(2, "dm_forward/dm_backward bit-exact vs naive loops on 100 configs, < 10 s")
def test_dm_matches_naive_oracle_bit_exactly():
    t0 = time.perf_counter()
    windows = set()
    for i in range(100):
        rng = Rng(2024, i)
        n = int(rng.integers(1, 2))
        c, h, w = (int(v) for v in rng.integers(1, [4, 8, 8]))
        k = (1, 3, 5)[int(rng.integers(0, 2))]
        windows.add(k)
        x = rng.normal((n, c, h, w))
        if i % 4 == 0:
            x = np.round(x)  # plenty of exact ties
        p = L.DmParams(rng.normal((c, k, k)), rng.normal((c, k, k)))
        g = rng.normal((n, c, h, w))
        out, tape = L.dm_forward(x, p)
        gx, ga, gb = L.dm_backward(g, tape, p)
        ref_out, ref_arg, _ = oracles.dm_forward(x, p.alpha, p.beta)
        rx, ra, rb = oracles.dm_backward(g, x, p.alpha, p.beta)
        assert _same_bytes(out, ref_out), f"forward differs on config {i}"
        assert np.array_equal(tape.saved["arg"], ref_arg)
        assert _same_bytes(gx, rx) and _same_bytes(ga, ra) and _same_bytes(gb, rb), \
            f"backward differs on config {i}"
    assert windows == {1, 3, 5}
    assert time.perf_counter() - t0 < 10.0


# ---------------------------------------------------------------------------
@criterion(3, "two identity 3x3 DMs == one 5x5 max filter, bit-exact, 50 inputs")
def test_stacked_dm_equals_5x5_max_filter():
    for i in range(50):
        rng = Rng(77, i)
        c, h, w = (int(v) for v in rng.integers(1, [4, 9, 9]))
        x = rng.normal((1, c, h, w))
        p1, p2 = L.DmParams.identity(c, 3), L.DmParams.identity(c, 3)
        y, _ = L.dm_forward(L.dm_forward(x, p1)[0], p2)
        assert _same_bytes(y, oracles.max_filter(x, 5)), f"input {i}"


# ---------------------------------------------------------------------------
@criterion(4, "DM op count == C*H*W*k^2 == depthwise conv count on 10 shapes")
def test_dm_op_count_matches_depthwise():
    shapes = [(1, 1, 1, 1, 1), (1, 1, 28, 28, 3), (1, 8, 28, 28, 3), (1, 16, 14, 14, 3),
              (1, 32, 7, 7, 3), (1, 3, 5, 9, 5), (1, 4, 8, 8, 1), (1, 64, 4, 4, 3),
              (1, 2, 13, 11, 7), (1, 5, 6, 6, 5)]
    for shape in shapes:
        _, c, h, w, k = shape
        dm, dw = bench.count_ops(shape)
        assert dm == c * h * w * k * k == dw, shape


# ---------------------------------------------------------------------------
@pytest.mark.slow
@criterion(5, "tiny DPN, Adam 1e-3, batch 128, 5k MNIST: >= 90% on 10k test within 20 epochs, 30 min")
def test_tiny_dpn_reaches_90_percent(mnist_dir):
    x, y = load_mnist(mnist_dir, "train", 5000)
    xt, yt = load_mnist(mnist_dir, "test")
    model = build_dpn(ModelConfig.tiny(), Rng(0))
    cfg = TrainConfig(epochs=20, batch_size=128, optimizer="adam", lr=1e-3, seed=0,
                      stop_at_accuracy=0.90, log_interval=0)
    t0 = time.perf_counter()
    hist = train(model, Dataset(x, y), Dataset(xt, yt), cfg)
    elapsed = time.perf_counter() - t0
    print(f"\ntest accuracy per epoch: {[round(a, 4) for a in hist.test_accuracy]}; {elapsed:.0f}s")
    assert len(yt) == 10000
    assert hist.best_accuracy >= 0.90
    assert hist.epochs_run <= 20
    assert elapsed < 30 * 60


# ---------------------------------------------------------------------------
# budget for the generalization comparison; both models get exactly the same
GEN_TRAIN, GEN_TEST, GEN_EPOCHS, GEN_SEEDS = 5000, 2000, 20, (0, 1, 2)


@pytest.mark.slow
@criterion(6, "translation-trained DPN beats matched width-1 CNN on affine test set, >= 2 of 3 seeds")
def test_dpn_generalizes_better_than_matched_cnn(mnist_dir):
    x, y = load_mnist(mnist_dir, "train", GEN_TRAIN)
    xt, yt = load_mnist(mnist_dir, "test", GEN_TEST)
    affine = make_affine_testset(xt, yt, seed=1234)
    cfg = ModelConfig.tiny()
    wins, lines = 0, []
    for seed in GEN_SEEDS:
        trainset = make_translation_trainset(x, y, seed=seed)
        accs = {}
        for name, model in (("dpn", build_dpn(cfg, Rng(seed))),
                            ("cnn", build_baseline_cnn(cfg, Rng(seed), match_params=True))):
            train(model, trainset, None, TrainConfig(epochs=GEN_EPOCHS, seed=seed, log_interval=0))
            accs[name] = evaluate_split(model, affine)[1]
        wins += accs["dpn"] > accs["cnn"]
        lines.append(f"seed {seed}: dpn {accs['dpn']:.4f}  cnn {accs['cnn']:.4f}")
    print("\n" + "\n".join(lines))
    assert build_baseline_cnn(cfg, Rng(0), match_params=True).config.width == 1
    assert wins >= 2, "\n".join(lines)


# ---------------------------------------------------------------------------
SMALL = ModelConfig.tiny(channels=(4, 8), downsample_after=(0, 1))


def _small_sets(mnist_dir, n_train=256, n_test=128):
    x, y = load_mnist(mnist_dir, "train", n_train)
    xt, yt = load_mnist(mnist_dir, "test", n_test)
    return Dataset(x, y), Dataset(xt, yt)


@criterion(7, "identical runs give identical CSVs; resume is bit-exact; checkpoint round-trip is byte-identical")
def test_determinism_resume_and_round_trip(mnist_dir, tmp_path):
    tr, te = _small_sets(mnist_dir)
    cfg = dict(batch_size=64, chunk_size=32, seed=3, log_interval=0)

    logs = []
    for run in ("a", "b"):
        out = tmp_path / run
        out.mkdir()
        train(build_dpn(SMALL, Rng(3)), tr, te, TrainConfig(epochs=3, out_dir=out, **cfg),
              log_path=out / "log.csv")
        logs.append((out / "log.csv").read_bytes())
    assert logs[0] == logs[1]

    # interrupted after one epoch, resumed from the checkpoint for the rest
    out = tmp_path / "c"
    out.mkdir()
    train(build_dpn(SMALL, Rng(3)), tr, te, TrainConfig(epochs=1, out_dir=out, **cfg),
          log_path=out / "log.csv")
    model, state, extra = checkpoint.load(out / "last.dpnc")
    train(model, tr, te, TrainConfig(epochs=3, out_dir=out, **cfg), state=state,
          start_epoch=extra["epoch"], start_iteration=extra["iteration"],
          best_accuracy=extra["best_accuracy"], log_path=out / "log.csv")
    assert (out / "log.csv").read_bytes() == logs[0]
    assert (out / "last.dpnc").read_bytes() == (tmp_path / "a" / "last.dpnc").read_bytes()

    m2, s2, e2 = checkpoint.load(tmp_path / "a" / "last.dpnc")
    again = checkpoint.save(tmp_path / "again.dpnc", m2, s2, e2)
    assert again.read_bytes() == (tmp_path / "a" / "last.dpnc").read_bytes()


# ---------------------------------------------------------------------------
@criterion(8, "IDX: 60000/10000 images of 28x28; identity affine passthrough; integer shifts exact")
def test_data_pipeline(mnist_dir):
    sizes = {}
    for split, prefix in (("train", "train"), ("test", "t10k")):
        imgs = read_idx(next(mnist_dir.glob(f"{prefix}-images-idx3-ubyte*")))
        labs = read_idx(next(mnist_dir.glob(f"{prefix}-labels-idx1-ubyte*")))
        assert imgs.dims[1:] == (28, 28) and labs.dims == (imgs.dims[0],)
        sizes[split] = imgs.dims[0]
    assert sizes == {"train": 60000, "test": 10000}

    x, y = load_mnist(mnist_dir, "test", 50)
    for img in x:
        assert _same_bytes(affine_warp(img, AffineParams()), img)
    rng = Rng(8)
    for img in x[:20]:
        dx, dy = (int(v) for v in rng.integers(-4, 4, 2))
        shifted = shift_image(img, dx, dy)
        # an exact pixel shift: every surviving pixel moved, nothing resampled
        h, w = img.shape[-2:]
        src = img[0, max(0, -dy):h - max(0, dy), max(0, -dx):w - max(0, dx)]
        dst = shifted[0, max(0, dy):h - max(0, -dy), max(0, dx):w - max(0, -dx)]
        assert _same_bytes(src, dst)
        assert _same_bytes(affine_warp(img, AffineParams(tx=dx, ty=dy)), shifted)
    ds = make_translation_trainset(x, y, seed=1)
    for src, out, p in zip(x, ds.images, ds.params):
        assert _same_bytes(out, shift_image(src, int(p.tx), int(p.ty)))


# ---------------------------------------------------------------------------
HAND_CASES = [
    (np.array([[0.0, 0.0], [2.0, 0.0], [10.0, 0.0], [10.0, 4.0]]), np.array([0, 0, 1, 1])),
    (np.array([[1.0], [3.0], [-2.0], [7.0], [8.0], [9.0]]), np.array([0, 0, 1, 2, 2, 2])),
    (np.array([[1.0, 2.0, 3.0], [1.0, 2.0, 3.0], [0.0, 0.0, 0.0]]), np.array([1, 1, 0])),
    (np.array([[0.5, -1.5], [2.25, 0.0], [-3.0, 1.0], [0.0, 0.0], [4.0, 4.0]]), np.array([2, 0, 2, 1, 0])),
]


@criterion(9, "class_distances == brute force within 1e-12; failure bins of all six parameters share one total")
def test_metrics(tmp_path):
    for feats, labels in HAND_CASES:
        got = class_distances(feats, labels)
        want = oracles.class_distances(feats.tolist(), labels.tolist())
        for a, b in zip(got, want):
            assert abs(a - b) <= 1e-12

    rng = Rng(9)
    x = np.zeros((200, 1, 28, 28))
    for i in range(200):
        r, c = rng.integers(6, 16, 2)
        x[i, 0, r:r + 8, c:c + 3] = 1.0
    ds = make_affine_testset(x, rng.integers(0, 9, 200), seed=5)
    report = evaluate(build_dpn(ModelConfig.tiny(), Rng(0)), ds)
    totals = {name: int(counts.sum()) for name, (_, counts) in report.failure_bins.items()}
    assert set(totals) == {"rotation", "shear", "sx", "sy", "tx", "ty"}
    failures = int(report.count - np.trace(report.confusion))
    assert failures > 0 and set(totals.values()) == {failures}
