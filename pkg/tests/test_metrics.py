import json
import math

import numpy as np
import pytest

import oracles
from dpnet.data import AffineParams, Dataset
from dpnet.metrics import (bin_index, class_distances, evaluate, export_features, failure_bins,
                           predict, report_from_predictions)
from dpnet.model import ModelConfig, build_dpn
from dpnet.tensor import Rng


def test_predict_ties_go_to_lowest_class():
    assert predict(np.array([[1.0, 3.0, 3.0], [2.0, 2.0, 0.0]])).tolist() == [1, 0]


def test_report_hand_built_three_samples():
    r = report_from_predictions([0, 1, 1], [0, 1, 2], num_classes=3)
    assert r.accuracy == pytest.approx(2 / 3)
    assert r.per_class_accuracy == [1.0, 1.0, 0.0]
    assert r.confusion.tolist() == [[1, 0, 0], [0, 1, 0], [0, 1, 0]]
    assert r.confusion.sum() == r.count == 3


def test_report_missing_class_is_none():
    r = report_from_predictions([0], [0], num_classes=2)
    assert r.per_class_accuracy == [1.0, None]
    assert "class_1_accuracy: nan" in r.to_text()


def test_class_distances_hand_case():
    f = np.array([[0.0, 0.0], [2.0, 0.0], [10.0, 0.0], [10.0, 4.0]])
    intra, inter, ratio = class_distances(f, np.array([0, 0, 1, 1]))
    assert intra == pytest.approx(1.5, abs=1e-12)
    assert inter == pytest.approx(math.hypot(9, 2), abs=1e-12)
    assert ratio == pytest.approx(1.5 / math.hypot(9, 2), abs=1e-12)


def test_class_distances_degenerate_cases():
    # a single class has no inter distance; identical centroids give inf
    assert class_distances(np.ones((3, 2)), np.zeros(3))[2] == math.inf
    f = np.array([[1.0], [-1.0], [1.0], [-1.0]])
    intra, inter, ratio = class_distances(f, np.array([0, 0, 1, 1]))
    assert intra == 1.0 and inter == 0.0 and ratio == math.inf


def test_class_distances_empty_class_warns(caplog):
    f = Rng(0).normal((6, 3))
    with caplog.at_level("WARNING"):
        got = class_distances(f, np.array([0, 0, 2, 2, 2, 0]), num_classes=3)
    assert "no samples" in caplog.text
    assert got == pytest.approx(class_distances(f, np.array([0, 0, 2, 2, 2, 0])))


def test_class_distances_match_brute_force_random():
    rng = Rng(3)
    f, y = rng.normal((30, 4)), rng.integers(0, 4, 30)
    got = class_distances(f, y)
    want = oracles.class_distances(f.tolist(), y.tolist())
    for a, b in zip(got, want):
        assert abs(a - b) <= 1e-12 * max(1.0, abs(b))


def test_bin_index_edges():
    v = np.array([-1.0, -0.5, 0.0, 0.5, 0.99, 1.0])
    assert bin_index(v, -1, 1, 4).tolist() == [0, 1, 2, 3, 3, 3]
    assert bin_index(v, 1, 1).tolist() == [0] * 6


def test_failure_bins_totals_match():
    rng = Rng(1)
    params = [AffineParams(*rng.uniform(-1, 1, 6)) for _ in range(50)]
    correct = rng.uniform(0, 1, 50) > 0.4
    bins = failure_bins(correct, params, {"rotation": (-1, 1)})
    totals = {k: int(c.sum()) for k, (_, c) in bins.items()}
    assert set(totals.values()) == {int((~correct).sum())}
    assert bins["rotation"][0][0] == -1 and bins["rotation"][0][-1] == 1


def test_evaluate_untrained_model_and_report_files(tmp_path):
    rng = Rng(0)
    x = rng.uniform(0, 1, (40, 1, 28, 28))
    y = rng.integers(0, 9, 40)
    params = [AffineParams(rotation=float(r)) for r in rng.uniform(-20, 20, 40)]
    ds = Dataset(x, y, params, ranges={"rotation": (-20, 20)})
    m = build_dpn(ModelConfig.tiny(), Rng(1))
    rep = evaluate(m, ds, batch_size=16)
    assert 0.0 <= rep.accuracy <= 0.4  # roughly chance for an untrained net
    assert rep.confusion.sum() == 40 and rep.intra is not None
    assert int(rep.failure_bins["rotation"][1].sum()) == 40 - int(np.trace(rep.confusion))
    txt, js = rep.write(tmp_path / "rep")
    assert txt.read_text().startswith("count: 40\naccuracy: ")
    assert json.loads(js.read_text())["count"] == 40


def test_export_features_csv(tmp_path):
    rng = Rng(0)
    ds = Dataset(rng.uniform(0, 1, (3, 1, 28, 28)), np.array([1, 2, 3]))
    m = build_dpn(ModelConfig.tiny(), Rng(1))
    lines = export_features(m, ds, tmp_path / "f.csv").read_text().splitlines()
    assert lines[0].split(",")[:3] == ["index", "label", "f0"] and len(lines[0].split(",")) == 34
    feats = m.features(ds.images)
    assert float(lines[2].split(",")[2]) == pytest.approx(feats[1, 0], rel=1e-8)
