import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dsgeom.core import DistanceMatrix, TransferMatrix
from dsgeom.errors import DataError, ZeroVarianceError
from dsgeom.protocols import (
    DecisionReport,
    augmentation_gain,
    covering_objective,
    gap_recovered,
    kmedoids_exhaustive,
    kmedoids_select,
    oracle_source,
    random_baseline,
    rank_auxiliaries,
    select_source,
    source_selection_payoff,
    subset_regret,
    subset_report,
)


def _sym(values, ids=None):
    v = np.asarray(values, dtype=float)
    ids = ids or tuple(f"d{i}" for i in range(len(v)))
    return DistanceMatrix(v, "symmetric", "t", tuple(ids))


def _euclid(points, ids=None):
    pts = np.asarray(points, dtype=float)
    return _sym(np.linalg.norm(pts[:, None] - pts[None], axis=-1), ids)


def planted_instance(seed):
    """Random clustered 2-D points, N in [4, 8]."""
    rng = np.random.default_rng(seed)
    N = int(rng.integers(4, 9))
    centers = rng.uniform(-10, 10, size=(int(rng.integers(1, 4)), 2))
    pts = centers[rng.integers(0, len(centers), N)] + rng.standard_normal((N, 2))
    return _euclid(pts)


# ---------------------------------------------------------------- source selection

def test_select_source_examples():
    D = _sym([[0, 0.7, 0.5], [0.7, 0, 0.2], [0.5, 0.2, 0]], ("a", "b", "t"))
    assert select_source(D, "t") == [("b", 0.2)]
    assert [i for i, _ in select_source(D, "t", k=2)] == ["b", "a"]
    E = _sym(np.ones((4, 4)) - np.eye(4), ("t", "c", "a", "b"))
    assert [i for i, _ in select_source(E, "t", k=3)] == ["a", "b", "c"]


def test_select_source_directed_uses_source_row():
    v = np.array([[0, 9.0, 1.0], [2.0, 0, 9.0], [5.0, 1.0, 0]])
    D = DistanceMatrix(v, "directed", "dsw", ("a", "b", "t"))
    # candidates for t are read from column t: D[a, t] = 1, D[b, t] = 9
    assert select_source(D, "t")[0][0] == "a"


def test_select_source_errors():
    D = _sym([[0, 1], [1, 0]], ("a", "b"))
    with pytest.raises(DataError):
        select_source(D, "zz")
    with pytest.raises(ValueError):
        select_source(D, "a", k=2)
    with pytest.raises(DataError):
        rank_auxiliaries(_sym([[0.0]], ("a",)), "a")


@given(st.integers(0, 10_000))
def test_select_source_invariant_to_monotone_transform(seed):
    rng = np.random.default_rng(seed)
    v = rng.random((6, 6))
    v = v + v.T
    np.fill_diagonal(v, 0)
    D, E = _sym(v), _sym(np.exp(3 * v) - 1)
    for t in D.dataset_ids:
        assert [i for i, _ in select_source(D, t, 5)] == [i for i, _ in select_source(E, t, 5)]


def test_oracle_source():
    P = TransferMatrix([[0.0, 9, 0.3], [9, 0.0, 0.1], [9, 9, 0.0]], ("a", "b", "t"))
    assert oracle_source(P, "t") == "b"
    Q = TransferMatrix([[0.0, 9, 0.1], [9, 0.0, 0.1], [9, 9, 0.0]], ("b", "a", "t"))
    assert oracle_source(Q, "t") == "a"
    R = TransferMatrix([[0.0, 0.4], [0.2, 0.0]], ("a", "b"))
    assert oracle_source(R, "b") == "a"


def test_gap_recovered_examples():
    assert gap_recovered(0.861, 0.773, 0.959) == pytest.approx(0.473, abs=5e-4)
    assert gap_recovered(0.959, 0.773, 0.959) == 1.0
    assert gap_recovered(0.773, 0.773, 0.959) == 0.0
    assert gap_recovered(0.1, 0.3, 0.05, higher_is_better=False) == pytest.approx(0.8)
    with pytest.raises(ZeroVarianceError):
        gap_recovered(0.5, 0.5, 0.5)
    with pytest.raises(DataError):
        gap_recovered(0.5, 0.9, 0.4)


@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0.1, 10), st.floats(-5, 5))
def test_gap_recovered_affine_invariant(p, r, o, a, b):
    if abs(o - r) < 1e-3:
        return
    hib = o > r
    assert gap_recovered(a * p + b, a * r + b, a * o + b, hib) == pytest.approx(gap_recovered(p, r, o, hib), abs=1e-6)


def test_source_selection_payoff():
    D = _sym([[0, 0.7, 0.5], [0.7, 0, 0.2], [0.5, 0.2, 0]], ("a", "b", "t"))
    P = TransferMatrix([[0, 0, 0.4], [0, 0, 0.1], [0, 0, 0]], ("a", "b", "t"))
    rep = source_selection_payoff(D, P, "t")
    assert rep.oracle_id == "b" and rep.ranked_ids == ["b"]
    assert rep.payoff["gap_recovered"] == pytest.approx(1.0)
    assert rep.to_dict()["payoff"]["random_mean"] == pytest.approx(0.25)


def test_rank_aux_equals_select_source():
    D = planted_instance(3)
    for t in D.dataset_ids:
        assert rank_auxiliaries(D, t) == select_source(D, t, D.N - 1)
        assert rank_auxiliaries(D, t, 1) == select_source(D, t, 1)


def test_augmentation_gain():
    np.testing.assert_allclose(augmentation_gain([0.8, 0.7], 0.75)["gains"], [0.05, -0.05], atol=1e-15)
    assert np.all(augmentation_gain([0.6, 0.6, 0.6], 0.6)["gains"] == 0)
    dist = np.array([0.1, 0.4, 0.2, 0.9])
    out = augmentation_gain(0.8 - 0.3 * dist ** 2, 0.5, dist)
    assert out["spearman"] == pytest.approx(1.0)


# ---------------------------------------------------------------- k-medoids

def test_k1_is_global_medoid():
    for seed in range(50):
        D = planted_instance(seed)
        res = kmedoids_select(D, 1)
        sums = D.values.sum(axis=0)
        best = min(range(D.N), key=lambda j: (sums[j], D.dataset_ids[j]))
        assert res.ids == (D.dataset_ids[best],)
        assert res.objective == pytest.approx(sums[best])


def test_k_equals_n():
    D = planted_instance(1)
    res = kmedoids_select(D, D.N)
    assert res.ids == tuple(sorted(D.dataset_ids)) and res.objective == 0.0


def test_three_clusters_match_exhaustive():
    rng = np.random.default_rng(0)
    pts = np.concatenate([c + 0.3 * rng.standard_normal((n, 2)) for c, n in (((0, 0), 3), ((8, 0), 2), ((0, 8), 2))])
    D = _euclid(pts)
    assert D.N == 7
    res, ex = kmedoids_select(D, 3), kmedoids_exhaustive(D, 3)
    assert res.objective == pytest.approx(ex.objective) and res.ids == ex.ids


def test_history_monotone_and_below_build():
    for seed in range(60):
        D = planted_instance(seed)
        for k in (1, 2, 3):
            if k > D.N:
                continue
            res = kmedoids_select(D, k)
            assert np.all(np.diff(res.history) < 0)
            assert res.objective <= res.build_objective
            assert res.objective == pytest.approx(covering_objective(D.values, [D.index_of(i) for i in res.ids]))


def test_directed_input_symmetrized(caplog):
    v = np.array([[0, 1.0, 4.0], [3.0, 0, 1.0], [2.0, 5.0, 0]])
    D = DistanceMatrix(v, "directed", "dsw", ("a", "b", "c"))
    with caplog.at_level(logging.WARNING):
        res = kmedoids_select(D, 1)
    assert "symmetrizing" in caplog.text
    S = _sym(0.5 * (v + v.T), ("a", "b", "c"))
    assert res.ids == kmedoids_select(S, 1).ids


def test_kmedoids_errors():
    D = planted_instance(2)
    with pytest.raises(ValueError):
        kmedoids_select(D, 0)
    with pytest.raises(ValueError):
        kmedoids_exhaustive(D, D.N + 1)


# ---------------------------------------------------------------- regret and baselines

def test_regret_examples():
    scores = {("a",): 0.9, ("b",): 0.7}
    assert subset_regret(scores, ["a"])["regret"] == 0.0
    assert subset_regret(scores, ["b"])["regret"] == pytest.approx(0.2)
    rev = subset_regret(scores, ["a"], objectives={("a",): 5.0, ("b",): 1.0})
    assert rev["kendall_tau"] == -1.0
    with pytest.raises(DataError):
        subset_regret(scores, ["c"])


def test_regret_planted_agreement():
    D = planted_instance(5)
    subsets = [tuple(sorted(s)) for s in random_baseline(D.dataset_ids, 2, trials=30, seed=1)]
    subsets = sorted(set(subsets))
    Dv = D.values
    scores = {s: -covering_objective(Dv, [D.index_of(i) for i in s]) for s in subsets}
    out = subset_regret(scores, subsets[0], D=D)
    assert out["kendall_tau"] == pytest.approx(1.0)


def test_random_baseline():
    ids = ["a", "b", "c", "d"]
    assert random_baseline(ids, 4, trials=1) == [("a", "b", "c", "d")]
    assert random_baseline(ids, 2, trials=5, seed=3) == random_baseline(ids, 2, trials=5, seed=3)
    with pytest.raises(ValueError):
        random_baseline(ids, 5)


def test_subset_report():
    D = planted_instance(7)
    rep = subset_report(D, 2, trials=10)
    assert rep.protocol == "subset_selection" and len(rep.ranked) == 2
    assert rep.payoff["objective"] <= rep.payoff["random_mean_objective"] + 1e-12
    assert [r["rank"] for r in rep.rows()] == [1, 2]
    with pytest.raises(ValueError):
        DecisionReport("pick", None, [])
