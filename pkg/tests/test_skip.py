import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from esdllm.errors import ConfigurationError
from esdllm.skip import (
    SkipSchedule,
    importance_scores,
    keep_count,
    select_topk,
    variation_term,
    variation_terms,
)


def _oracle_topk(scores, ratio, active):
    k = max(1, math.floor((1 - ratio) * len(active) + 0.5))
    ranked = sorted(zip(scores, active), key=lambda sa: (-sa[0], sa[1]))
    return sorted(p for _, p in ranked[:k])


def test_variation_identical_is_zero():
    a = np.array([1.0, -2.0, 3.0])
    assert variation_term(a, a) == 0.0


def test_variation_hand_example():
    assert variation_term([1, 0.2, 0, 0], [1, 0, 0, 0]) == pytest.approx(0.1, abs=1e-12)
    assert variation_term([10, 2, 0, 0], [10, 0, 0, 0]) == pytest.approx(0.1, abs=1e-12)


def test_variation_zero_previous():
    assert variation_term([1.0, 1.0], [0.0, 0.0]) == 0.0


@settings(max_examples=200, deadline=None)
@given(
    st.integers(1, 16),
    st.floats(1e-3, 1e3),
    st.integers(0, 2**32 - 1),
)
def test_variation_scale_homogeneous(d, c, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=d), rng.normal(size=d)
    assert variation_term(c * a, c * b) == pytest.approx(variation_term(a, b), rel=1e-6, abs=1e-12)


def test_importance_limits_and_example():
    conf = np.array([0.2, 0.7])
    now = np.array([[1.0, 2.0], [3.0, 4.0]])
    prev = np.array([[1.0, 1.0], [0.0, 4.0]])
    np.testing.assert_array_equal(importance_scores(conf, now, prev, 1.0), conf)
    np.testing.assert_array_equal(importance_scores(conf, now, now, 0.0), [0.0, 0.0])
    # c=0.6, variation=0.1, alpha=0.5
    got = importance_scores([0.6], [[1, 0.2, 0, 0]], [[1, 0, 0, 0]], 0.5)
    assert got[0] == pytest.approx(0.35, abs=1e-12)


def test_importance_matches_straight_line():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n, d = rng.integers(1, 9), rng.integers(1, 17)
        alpha = rng.random()
        c = rng.random(n)
        hn = rng.normal(size=(n, d)).astype(np.float32)
        hp = rng.normal(size=(n, d)).astype(np.float32)
        got = importance_scores(c, hn, hp, alpha)
        for i in range(n):
            l1 = sum(abs(float(hn[i, j]) - float(hp[i, j])) for j in range(d))
            l2 = math.sqrt(sum(float(hp[i, j]) ** 2 for j in range(d)))
            want = alpha * c[i] + (1 - alpha) * l1 / (math.sqrt(d) * l2)
            assert abs(got[i] - want) <= 1e-6


def test_variation_terms_shape_mismatch():
    with pytest.raises(ConfigurationError):
        variation_terms(np.zeros((2, 3)), np.zeros((3, 3)))


def test_keep_count_rounding():
    assert keep_count(5, 0.405) == 3
    assert keep_count(4, 0.5) == 2
    assert keep_count(1, 0.9) == 1
    assert keep_count(3, 0.5) == 2  # 1.5 rounds up
    assert keep_count(8, 0.0) == 8


def test_select_topk_examples():
    pos = np.array([0, 1, 2, 3])
    np.testing.assert_array_equal(select_topk([0.3, 0.1, 0.9, 0.2], 0.0, pos), pos)
    np.testing.assert_array_equal(select_topk([0.9, 0.1, 0.5, 0.5], 0.5, pos), [0, 2])


def test_select_topk_tie_uses_absolute_position():
    active = np.array([10, 20, 30])
    np.testing.assert_array_equal(select_topk([0.5, 0.5, 0.5], 0.5, active), [10, 20])


def test_select_topk_random_oracle():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        n = int(rng.integers(1, 20))
        active = np.sort(rng.choice(200, size=n, replace=False))
        scores = rng.integers(0, 4, size=n) / 4.0  # plenty of duplicates
        r = float(rng.choice([0.0, 0.25, 0.405, 0.5, 0.75, 0.9, rng.random() * 0.99]))
        got = select_topk(scores, r, active)
        assert got.tolist() == _oracle_topk(scores.tolist(), r, active.tolist())
        assert len(got) == max(1, math.floor((1 - r) * n + 0.5))
        assert set(got.tolist()) <= set(active.tolist())


def test_alpha_limits_select_by_single_criterion():
    rng = np.random.default_rng(2)
    n, d = 8, 6
    active = np.arange(n)
    conf = rng.random(n)
    hn, hp = rng.normal(size=(n, d)), rng.normal(size=(n, d))
    by_conf = select_topk(importance_scores(conf, hn, hp, 1.0), 0.5, active)
    np.testing.assert_array_equal(by_conf, _oracle_topk(conf.tolist(), 0.5, active.tolist()))
    var = variation_terms(hn, hp)
    by_var = select_topk(importance_scores(conf, hn, hp, 0.0), 0.5, active)
    np.testing.assert_array_equal(by_var, _oracle_topk(var.tolist(), 0.5, active.tolist()))


def test_select_topk_preconditions():
    with pytest.raises(ConfigurationError):
        select_topk([], 0.5, [])
    with pytest.raises(ConfigurationError):
        select_topk([1.0], 1.0, [0])


def test_schedule_validation_and_roundtrip():
    s = SkipSchedule.from_dict({"ratios": {"4": 0.5, "8": 0.5}, "alpha": 0.5, "indicator": "hidden"})
    assert s.ratios == {4: 0.5, 8: 0.5}
    assert SkipSchedule.from_dict(s.to_dict()) == s
    assert SkipSchedule.from_dict({"3": 0.25}).ratios == {3: 0.25}
    assert SkipSchedule.default(32).ratios == {4: 0.5, 8: 0.5}
    with pytest.raises(ConfigurationError):
        SkipSchedule({1: 1.0})
    with pytest.raises(ConfigurationError):
        SkipSchedule({1: 0.5}, indicator="output")
    with pytest.raises(ConfigurationError):
        SkipSchedule({1: 0.5}, alpha=1.5)
    with pytest.raises(ConfigurationError):
        SkipSchedule({40: 0.5}).check_layers(32)
    with pytest.raises(ConfigurationError):
        SkipSchedule.from_dict({"ratios": {}, "extra": 1})
