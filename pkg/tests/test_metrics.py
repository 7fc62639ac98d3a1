from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from taco.errors import DataError
from taco.metrics import roc_auc, roc_auc_binary, roc_auc_ovo


def brute_binary(s, y):
    pos, neg = s[y == 1], s[y == 0]
    wins = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a in pos for b in neg)
    return wins / (len(pos) * len(neg))


def brute_ovo(P, y):
    classes = [c for c in range(P.shape[1]) if (y == c).any()]
    vals = []
    for i, j in itertools.permutations(classes, 2):
        rows = (y == i) | (y == j)
        s = P[rows, i] / (P[rows, i] + P[rows, j])
        vals.append(brute_binary(s, (y[rows] == i).astype(int)))
    return float(np.mean(vals))


def random_instance(rng, n_classes):
    n = int(rng.integers(n_classes, 25))
    y = rng.integers(0, n_classes, n)
    y[:n_classes] = np.arange(n_classes)
    # coarse scores so ties are common
    P = rng.integers(1, 6, (n, n_classes)).astype(float)
    return P / P.sum(1, keepdims=True), y


def test_hand_example():
    assert roc_auc_binary([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75


def test_separated_and_reversed():
    assert roc_auc_binary([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert roc_auc_binary([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0
    assert roc_auc_binary([0.5, 0.5, 0.5], [0, 1, 1]) == 0.5


def test_binary_matches_brute_force_on_200_instances():
    rng = np.random.default_rng(0)
    for _ in range(200):
        P, y = random_instance(rng, 2)
        assert abs(roc_auc_binary(P[:, 1], y) - brute_binary(P[:, 1], y)) < 1e-12


def test_ovo_matches_brute_force_on_200_instances():
    rng = np.random.default_rng(1)
    for _ in range(200):
        P, y = random_instance(rng, int(rng.integers(3, 6)))
        assert abs(roc_auc_ovo(P, y) - brute_ovo(P, y)) < 1e-12


def test_ovo_skips_absent_classes_and_prevalence_weighting():
    P = np.array([[0.7, 0.2, 0.1], [0.2, 0.7, 0.1], [0.6, 0.3, 0.1], [0.3, 0.6, 0.1]])
    y = np.array([0, 1, 0, 1])
    assert roc_auc_ovo(P, y) == 1.0
    assert roc_auc_ovo(P, y, weighting="prevalence") == 1.0
    with pytest.raises(ValueError):
        roc_auc_ovo(P, y, weighting="bogus")


def test_roc_auc_dispatches_on_class_count():
    P = np.array([[0.8, 0.2], [0.3, 0.7], [0.6, 0.4]])
    y = np.array([0, 1, 1])
    assert roc_auc(P, y) == roc_auc_binary(P[:, 1], y)


@pytest.mark.parametrize(
    "scores,labels",
    [([0.1, 0.2], [1, 1]), ([0.1, 0.2], [0, 2]), ([0.1], [0, 1])],
    ids=["single-class", "non-binary", "length"],
)
def test_binary_errors(scores, labels):
    with pytest.raises(DataError):
        roc_auc_binary(scores, labels)


@given(st.lists(st.integers(0, 20), min_size=4, max_size=30), st.integers(0, 2**31))
def test_auc_is_invariant_to_monotone_transforms(scores, seed):
    s = np.array(scores) / 20.0  # a coarse grid keeps the transforms strictly monotone in floating point
    y = np.random.default_rng(seed).integers(0, 2, s.size)
    y[:2] = [0, 1]
    a = roc_auc_binary(s, y)
    assert 0.0 <= a <= 1.0
    assert roc_auc_binary(np.exp(3 * s) - 7, y) == pytest.approx(a, abs=1e-12)
    assert roc_auc_binary(-s, y) == pytest.approx(1 - a, abs=1e-12)
