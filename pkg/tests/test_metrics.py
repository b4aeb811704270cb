import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emm.exceptions import ConfigError, UndefinedMetric
from emm.metrics import ablation_table, auc, average_ranks, gain_report

from .helpers import pairwise_auc

labelled = st.integers(2, 60).flatmap(lambda n: st.tuples(
    st.lists(st.integers(-4, 4).map(float), min_size=n, max_size=n),
    st.lists(st.sampled_from([0, 1]), min_size=n, max_size=n),
)).filter(lambda t: 0 < sum(t[1]) < len(t[1]))


def test_perfect_ranking():
    assert auc([0.9, 0.8, 0.3, 0.1], [1, 1, 0, 0]) == 1.0
    assert auc([0.1, 0.3, 0.8, 0.9], [1, 1, 0, 0]) == 0.0


def test_all_ties_give_one_half():
    assert auc(np.full(10, 0.3), [0, 1] * 5) == 0.5


def test_average_ranks():
    np.testing.assert_array_equal(average_ranks([3.0, 1.0, 3.0, 2.0]), [3.5, 1.0, 3.5, 2.0])


def test_single_class_is_undefined():
    with pytest.raises(UndefinedMetric):
        auc([0.1, 0.2], [1, 1])
    with pytest.raises(UndefinedMetric):
        auc([0.1, 0.2], [0, 0])


def test_bad_inputs():
    with pytest.raises(ValueError):
        auc([0.1, 0.2], [0, 2])
    with pytest.raises(ValueError):
        auc([0.1, 0.2, 0.3], [0, 1])


def test_two_hundred_random_pairs_match_pairwise_oracle():
    rng = np.random.default_rng(0)
    s = rng.integers(0, 20, 200) / 20.0
    y = rng.integers(0, 2, 200)
    assert auc(s, y) == pairwise_auc(s, y)


@settings(max_examples=200, deadline=None)
@given(labelled)
def test_rank_formula_equals_pairwise_oracle(case):
    s, y = case
    assert auc(s, y) == pairwise_auc(s, y)


@settings(max_examples=100, deadline=None)
@given(labelled)
def test_invariant_under_increasing_transform(case):
    s, y = np.asarray(case[0]), case[1]
    assert auc(s, y) == auc(np.exp(s) * 3 + 1, y)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 80), st.integers(0, 2 ** 16))
def test_complement_symmetry_without_ties(n, seed):
    rng = np.random.default_rng(seed)
    s = rng.permutation(n).astype(float)
    y = rng.integers(0, 2, n)
    if 0 < y.sum() < n:
        assert auc(s, y) + auc(-s, y) == pytest.approx(1.0, abs=1e-15)


def test_published_census_gains():
    tms = {"T1": [0.93009, 0.90739]}
    ours = gain_report({"T1": 0.94108}, tms)
    assert ours.tasks[0].gain == pytest.approx(0.02234, abs=5e-6)
    other = gain_report({"T1": 0.94527}, tms)
    assert other.tasks[0].gain == pytest.approx(0.02653, abs=5e-6)


def test_gain_is_exact_difference():
    r = gain_report({"a": 0.8, "b": 0.7}, {"a": [0.75, 0.85], "b": [0.6, 0.65]})
    for t in r.tasks:
        assert t.gain == t.auc - t.reference_auc
    assert r.tasks[0].gain == 0.0


def test_task_mismatch():
    with pytest.raises(ConfigError):
        gain_report({"a": 0.8}, {"b": [0.7]})
    with pytest.raises(ConfigError):
        gain_report({"a": 0.8}, {"a": []})


def test_report_json_schema():
    r = gain_report({"a": 0.8}, {"a": [0.7, 0.9]}, dataset="d", seed=3, variant="full")
    d = json.loads(r.to_json())
    assert d == {"dataset": "d", "seed": 3, "variant": "full",
                 "tasks": [{"name": "a", "auc": 0.8, "reference_auc": 0.8, "gain": 0.0}]}
    table = r.to_table().splitlines()
    assert table[0].split() == ["task", "AUC", "reference", "gain"]
    assert table[2].split() == ["a", "0.80000", "0.80000", "+0.00000"]


def test_ablation_table_gains_against_baseline():
    text = ablation_table({"baseline": {"a": 0.7}, "full": {"a": 0.75}}, ["a"])
    rows = [line.split() for line in text.splitlines()[2:]]
    assert rows == [["baseline", "0.70000", "-"], ["full", "0.75000", "+0.05000"]]
