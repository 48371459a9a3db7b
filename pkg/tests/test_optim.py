import numpy as np
import pytest

from dpnet.optim import AdamState, adam_step, finite_diff_check, relative_error, sgd_step, step_schedule


def test_adam_first_step_moves_by_lr_times_sign():
    p = {"w": np.array([1.0, -2.0, 3.0])}
    g = {"w": np.array([0.5, -4.0, 0.0])}
    adam_step(p, g, AdamState(lr=0.1))
    # bias-corrected first step is lr * g / (|g| + eps)
    np.testing.assert_allclose(p["w"], [0.9, -1.9, 3.0], rtol=1e-6)


def test_adam_matches_reference_recursion():
    rng = np.random.default_rng(0)
    p = {"w": rng.normal(size=4)}
    w, m, v = p["w"].copy(), np.zeros(4), np.zeros(4)
    st = AdamState(lr=1e-2)
    for t in range(1, 6):
        g = rng.normal(size=4)
        adam_step(p, {"w": g}, st)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 1e-2 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p["w"], w, rtol=1e-12)
    assert st.t == 5


def test_adam_minimizes_quadratic():
    p = {"w": np.array([5.0, -3.0])}
    st = AdamState(lr=0.1)
    for _ in range(500):
        adam_step(p, {"w": 2 * p["w"]}, st)
    assert np.abs(p["w"]).max() < 1e-2


def test_shape_mismatch_and_missing_grad():
    with pytest.raises(ValueError):
        adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState())
    with pytest.raises(ValueError):
        sgd_step({"w": np.zeros(2)}, {}, 0.1)


def test_step_schedule_divides_at_milestones():
    lr = step_schedule(0.1, [20000, 30000])
    assert lr(0) == 0.1 and lr(19999) == 0.1
    assert lr(20000) == pytest.approx(0.01) and lr(30000) == pytest.approx(0.001)


def test_sgd_with_schedule():
    p = {"w": np.array([1.0])}
    sgd_step(p, {"w": np.array([1.0])}, step_schedule(1.0, [1]), iteration=1)
    assert p["w"][0] == pytest.approx(0.9)


def test_relative_error_floor():
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1.0, 1.0 + 1e-9) < 1e-9


def test_finite_diff_smooth_function_passes():
    x = np.array([0.3, -1.2, 2.0])
    res = finite_diff_check(lambda v: float(np.sum(np.sin(v) * v)), x, np.cos(x) * x + np.sin(x))
    assert res.passed(1e-7) and res.checked == 3 and not res.excluded


def test_finite_diff_catches_wrong_gradient():
    x = np.array([0.3, -1.2])
    res = finite_diff_check(lambda v: float(np.sum(v ** 2)), x, 3 * x)
    assert not res.passed(1e-5)


def test_finite_diff_excludes_kinks():
    x = np.array([0.0, 1.0, 2.0])  # |.| has a kink at 0
    res = finite_diff_check(lambda v: float(np.sum(np.abs(v))), x, np.sign(x))
    assert res.excluded == [0] and res.passed(1e-9)
    # a max tie is a kink too
    y = np.array([1.0, 1.0])
    res = finite_diff_check(lambda v: float(np.max(v)), y, np.array([1.0, 0.0]))
    assert res.excluded == [0, 1]


def test_finite_diff_rejects_nonfinite_objective():
    with pytest.raises(FloatingPointError):
        finite_diff_check(lambda v: float("nan"), np.zeros(1), np.zeros(1))
