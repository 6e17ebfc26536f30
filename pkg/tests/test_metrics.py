import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pcp.metrics import (
    MetricsReport,
    ablation_diagnostics,
    class_macro_f1,
    classify,
    concept_metrics,
    csv_row,
    fit_cbm_head,
    prior_match_classify,
)
from pcp.network import BatchTrace, ParamSet
from pcp.priors import PriorTable


def oracle_concept_metrics(c_hat, truth, threshold=0.5):
    """Cell-by-cell confusion counting in plain Python."""
    n, m = len(truth), len(truth[0])
    correct = 0
    f1s = []
    for j in range(m):
        tp = fp = fn = 0
        for i in range(n):
            p = 1 if c_hat[i][j] >= threshold else 0
            t = int(truth[i][j])
            correct += p == t
            if p and t:
                tp += 1
            elif p and not t:
                fp += 1
            elif t and not p:
                fn += 1
        f1s.append(1.0 if tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn))
    return correct / (n * m), sum(f1s) / m


def test_perfect_predictions():
    truth = np.array([[1, 0, 1], [0, 1, 1]])
    assert concept_metrics(truth.astype(float), truth) == (1.0, 1.0)


def test_all_half_counts_as_positive():
    truth = np.array([[1, 0, 1], [0, 0, 1], [1, 1, 0], [0, 0, 0]])
    acc, _ = concept_metrics(np.full(truth.shape, 0.5), truth)
    assert acc == truth.mean()


def test_small_case_against_oracle():
    c_hat = np.array([[0.9, 0.2, 0.5], [0.1, 0.8, 0.4], [0.6, 0.6, 0.7], [0.3, 0.1, 0.2]])
    truth = np.array([[1, 0, 0], [0, 1, 1], [0, 1, 1], [1, 0, 0]])
    acc, f1 = concept_metrics(c_hat, truth)
    # concept 0: tp1 fp1 fn1 -> 0.5; concept 1: tp2 -> 1; concept 2: tp1 fp1 fn1 -> 0.5
    assert acc == pytest.approx(8 / 12)
    assert f1 == pytest.approx((0.5 + 1.0 + 0.5) / 3)
    assert (acc, f1) == pytest.approx(oracle_concept_metrics(c_hat, truth))


@pytest.mark.parametrize("n, m", [(1, 1), (1, 2), (2, 1), (2, 2), (3, 2), (2, 3)])
def test_exhaustive_binarizations(n, m):
    cells = n * m
    for pred_bits in itertools.product([0.0, 1.0], repeat=cells):
        pred = np.array(pred_bits).reshape(n, m)
        for true_bits in itertools.product([0, 1], repeat=cells):
            truth = np.array(true_bits).reshape(n, m)
            assert concept_metrics(pred, truth) == pytest.approx(oracle_concept_metrics(pred, truth))


@given(st.integers(1, 10), st.integers(1, 5), st.data())
@settings(max_examples=300, deadline=None)
def test_random_instances_match_oracle(n, m, data):
    c_hat = np.array(data.draw(st.lists(st.lists(st.sampled_from([0.0, 0.2, 0.5, 0.7, 1.0]), min_size=m, max_size=m), min_size=n, max_size=n)))
    truth = np.array(data.draw(st.lists(st.lists(st.integers(0, 1), min_size=m, max_size=m), min_size=n, max_size=n)))
    assert concept_metrics(c_hat, truth) == pytest.approx(oracle_concept_metrics(c_hat, truth))


def test_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        concept_metrics(np.zeros((2, 3)), np.zeros((3, 2)))


def test_prior_match_orthogonal_columns():
    table = PriorTable(["a", "b", "c"], ["p", "q", "r"], np.eye(3))
    for k in range(3):
        assert prior_match_classify(np.eye(3)[k], table) == k


def test_prior_match_ties_go_low():
    table = PriorTable(["a", "b"], ["p", "q", "r"], np.full((2, 3), 0.4))
    assert prior_match_classify(np.array([0.3, 0.9]), table) == 0


def brute_force_match(c_hat, probs):
    best, best_k = None, None
    for k in range(probs.shape[1]):
        s = sum(c_hat[m] * probs[m, k] for m in range(len(c_hat)))
        if best is None or s > best:
            best, best_k = s, k
    return best_k


@given(st.integers(2, 5), st.integers(1, 6), st.integers(0, 2**31 - 1))
@settings(max_examples=200, deadline=None)
def test_prior_match_brute_force(L, M, seed):
    rng = np.random.default_rng(seed)
    probs = rng.uniform(0, 1, (M, L))
    table = PriorTable([f"c{i}" for i in range(M)], [f"y{i}" for i in range(L)], probs)
    c_hat = rng.uniform(0, 1, M)
    assert prior_match_classify(c_hat, table) == brute_force_match(c_hat, probs)
    assert prior_match_classify(c_hat * rng.uniform(0.1, 10), table) == brute_force_match(c_hat, probs)


def test_cbm_separable_clusters():
    rng = np.random.default_rng(0)
    centers = np.array([[0.9, 0.1, 0.1], [0.1, 0.9, 0.1], [0.1, 0.1, 0.9]])
    y = np.repeat(np.arange(3), 40)
    X = centers[y] + rng.uniform(-0.05, 0.05, (120, 3))
    head = fit_cbm_head(X, y)
    assert np.mean(classify(head, X) == y) == 1.0
    assert isinstance(classify(head, X[0]), int)


def test_cbm_shuffled_labels_near_chance():
    rng = np.random.default_rng(1)
    X = rng.uniform(0, 1, (1200, 6))
    y = rng.integers(0, 3, 1200)
    head = fit_cbm_head(X[:900], y[:900])
    f1 = class_macro_f1(classify(head, X[900:]), y[900:], 3)
    assert abs(f1 - 1 / 3) <= 0.1


def test_cbm_deterministic_and_needs_two_classes():
    rng = np.random.default_rng(2)
    X = rng.uniform(0, 1, (50, 4))
    y = rng.integers(0, 2, 50)
    a, b = fit_cbm_head(X, y), fit_cbm_head(X, y)
    assert np.array_equal(a.weight, b.weight) and np.array_equal(a.bias, b.bias)
    with pytest.raises(ValueError):
        fit_cbm_head(X, np.zeros(50, dtype=int))


def _trace(gamma, c_hat):
    z = np.zeros_like(c_hat)
    return BatchTrace(z, np.ones_like(z), gamma, z, c_hat, ParamSet({"W1": np.eye(1), "W2": np.eye(1), "Wc": np.eye(1)}))


def test_diagnostics():
    table = PriorTable(["a", "b"], ["p", "q"], np.array([[0.8, 0.1], [0.3, 0.6]]))
    onehot = np.array([[1.0, 0.0], [0.0, 1.0]])
    ent, tv = ablation_diagnostics(_trace(onehot, table.probs.T.copy()), [0, 1], table)
    assert ent == 0.0 and tv == {"p": 0.0, "q": 0.0}
    c_hat = np.array([[0.6, 0.5], [0.2, 0.9]])
    _, tv = ablation_diagnostics(_trace(onehot, c_hat), [0, 1], table)
    assert tv["p"] == pytest.approx((abs(0.6 - 0.8) + abs(0.5 - 0.3)) / 2)
    assert tv["q"] == pytest.approx((abs(0.2 - 0.1) + abs(0.9 - 0.6)) / 2)
    with pytest.raises(ValueError, match="no samples"):
        ablation_diagnostics(_trace(onehot, c_hat), [0, 0], table)


def test_report_serialization():
    r = MetricsReport(0.9, 0.8, 0.95, 0.3, {"p": 0.1, "q": 0.2})
    assert r.to_dict()["tv_mean"] == pytest.approx(0.15)
    assert r.to_json().endswith("\n")
    row = csv_row("synthetic", 0, r)
    assert row.split(",")[:2] == ["synthetic", "0"] and len(row.split(",")) == 7
