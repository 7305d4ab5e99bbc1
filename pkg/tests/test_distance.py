import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dsgeom import distance
from dsgeom.core import EmbeddingSet
from dsgeom.distance import (
    SwConfig,
    balanced_sample,
    centroid_distance,
    class_rng,
    distance_matrix,
    exact_w2_small,
    label_agnostic_sw,
    label_aware_sw,
    pair_distance,
    random_directions,
    sliced_w2,
)
from dsgeom.errors import DuplicateIdError, EmptyLibraryError, NoSharedClassesError, ShapeMismatchError
from dsgeom.robustness import strip_labels

from conftest import gaussian_set
from oracles import w2_1d_quantile, w2_assignment


# ---------------------------------------------------------------- centroid

def test_centroid_identity():
    A = gaussian_set("a", [[0, 0], [3, 3]], 20)
    assert centroid_distance(A, A) == 0.0


def test_centroid_single_class():
    A = EmbeddingSet("a", [[0.0, 0.0]], [0])
    B = EmbeddingSet("b", [[3.0, 4.0]], [0])
    assert centroid_distance(A, B) == 5.0


def test_centroid_two_classes_mean_of_gaps():
    A = EmbeddingSet("a", [[0.0, 0.0], [10.0, 0.0]], [0, 1])
    B = EmbeddingSet("b", [[2.0, 0.0], [10.0, 4.0]], [0, 1])
    assert centroid_distance(A, B) == 3.0


def test_centroid_no_shared_classes():
    with pytest.raises(NoSharedClassesError):
        centroid_distance(EmbeddingSet("a", [[0.0]], [0]), EmbeddingSet("b", [[0.0]], [1]))


# ---------------------------------------------------------------- sliced W2 core

def test_sliced_identical_sets_zero():
    Z = np.random.default_rng(0).standard_normal((10, 3))
    assert sliced_w2(Z, Z) == 0.0


@pytest.mark.parametrize("L", [1, 5, 64])
def test_sliced_single_point_1d(L):
    assert sliced_w2([[0.0]], [[2.0]], SwConfig(L=L)) == 2.0


def test_sliced_bounded_by_exact_small():
    rng = np.random.default_rng(1)
    for seed in range(50):
        ZA, ZB = rng.standard_normal((4, 2)), rng.standard_normal((4, 2))
        assert sliced_w2(ZA, ZB, SwConfig(L=16, seed=seed)) <= exact_w2_small(ZA, ZB) + 1e-9


def test_sliced_1d_single_projection_equals_exact_1d():
    rng = np.random.default_rng(2)
    for _ in range(50):
        n = int(rng.integers(1, 30))
        a, b = rng.standard_normal((n, 1)), rng.standard_normal((n, 1))
        assert abs(sliced_w2(a, b, SwConfig(L=1)) - w2_1d_quantile(a[:, 0], b[:, 0])) < 1e-12


def test_sliced_shape_errors():
    with pytest.raises(ShapeMismatchError):
        sliced_w2(np.zeros((3, 2)), np.zeros((4, 2)))
    with pytest.raises(ShapeMismatchError):
        sliced_w2(np.zeros((3, 2)), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        SwConfig(L=0)


def test_random_directions_unit_norm():
    U = random_directions(5, 100, np.random.default_rng(0))
    np.testing.assert_allclose(np.linalg.norm(U, axis=1), 1.0, atol=1e-12)


# ---------------------------------------------------------------- exact W2

def test_exact_examples():
    Z = np.random.default_rng(3).standard_normal((5, 2))
    assert exact_w2_small(Z, Z) == 0.0
    assert exact_w2_small([[0.0], [1.0]], [[1.0], [2.0]]) == 1.0
    assert exact_w2_small([[0.0, 0.0]], [[3.0, 4.0]]) == 5.0
    with pytest.raises(ValueError):
        exact_w2_small(np.zeros((9, 1)), np.zeros((9, 1)))


def test_exact_matches_assignment_solver():
    rng = np.random.default_rng(4)
    for _ in range(40):
        n, d = int(rng.integers(1, 8)), int(rng.integers(1, 4))
        ZA, ZB = rng.standard_normal((n, d)), rng.standard_normal((n, d))
        assert abs(exact_w2_small(ZA, ZB) - w2_assignment(ZA, ZB)) < 1e-12


# ---------------------------------------------------------------- label-aware

def test_label_aware_identity():
    A = gaussian_set("a", [[0, 0], [4, 0]], 30)
    assert label_aware_sw(A, A, SwConfig()) == 0.0
    P = EmbeddingSet("p", [[1.0, 2.0]], [0])
    Q = EmbeddingSet("q", [[1.0, 2.0]], [0])
    assert label_aware_sw(P, Q, SwConfig()) == 0.0


def test_label_aware_is_mean_of_class_values():
    cfg = SwConfig(L=32, M=15, seed=7)
    A = gaussian_set("a", [[0, 0], [5, 0]], 40, seed=1)
    B = gaussian_set("b", [[1, 0], [5, 2]], 25, seed=2)
    vals = []
    for c in (0, 1):
        rng = class_rng(cfg.seed, "a", "b", c)
        sa, sb = balanced_sample(A.class_matrix(c), B.class_matrix(c), "a", "b", 15, rng)
        vals.append(sliced_w2(sa, sb, directions=random_directions(2, cfg.L, rng)))
    assert label_aware_sw(A, B, cfg) == pytest.approx((vals[0] + vals[1]) / 2, abs=1e-15)


def test_pair_symmetry_bit_exact():
    cfg = SwConfig(L=16, M=10, seed=3)
    A = gaussian_set("alpha", [[0, 0], [3, 0]], 30, seed=4)
    B = gaussian_set("beta", [[1, 1], [3, 2]], 17, seed=5)
    for metric in ("sw", "centroid"):
        for mode in ("on", "off", "auto"):
            assert pair_distance(A, B, metric, cfg, mode) == pair_distance(B, A, metric, cfg, mode)


def test_auto_fallback_and_on_error(caplog):
    A = EmbeddingSet("a", np.random.default_rng(0).standard_normal((10, 2)), np.zeros(10))
    B = EmbeddingSet("b", np.random.default_rng(1).standard_normal((10, 2)), np.ones(10))
    cfg = SwConfig(L=8)
    with caplog.at_level(logging.WARNING):
        v = pair_distance(A, B, "sw", cfg, "auto")
    assert v == label_agnostic_sw(A, B, cfg)
    assert "no shared classes" in caplog.text
    with pytest.raises(NoSharedClassesError):
        pair_distance(A, B, "sw", cfg, "on")


def test_stripped_library_uses_full_set_sw():
    lib = [strip_labels(gaussian_set(f"d{i}", [[i, 0], [0, i]], 20, seed=i)) for i in range(3)]
    cfg = SwConfig(L=8, M=50)
    D = distance_matrix(lib, "sw", cfg)
    for i in range(3):
        for j in range(i + 1, 3):
            assert D.values[i, j] == label_agnostic_sw(lib[i], lib[j], cfg)


# ---------------------------------------------------------------- matrices

def test_identical_library_zero_matrix():
    base = gaussian_set("x", [[0, 0], [2, 2]], 20)
    lib = [base.replace(dataset_id=f"d{i}") for i in range(4)]
    D = distance_matrix(lib, "sw", SwConfig(L=8))
    assert np.all(D.values == 0)
    assert np.all(distance_matrix(lib, "centroid").values == 0)


def test_pair_count(monkeypatch):
    calls = []
    real = distance.pair_distance

    def counting(*args, **kw):
        calls.append(1)
        return real(*args, **kw)

    monkeypatch.setattr(distance, "pair_distance", counting)
    lib = [gaussian_set(f"d{i}", [[i, 0]], 10, seed=i) for i in range(3)]
    distance_matrix(lib, "sw", SwConfig(L=4))
    assert len(calls) == 3


def test_monotone_in_separation():
    lib = [gaussian_set(f"d{i}", [[2.0 * i, 0.0], [2.0 * i, 5.0]], 200, sigma=0.5, seed=i) for i in range(4)]
    for metric in ("sw", "centroid"):
        row = distance_matrix(lib, metric, SwConfig(L=64, M=200)).values[0]
        assert np.all(np.diff(row) > 0)


def test_matrix_errors():
    a = gaussian_set("a", [[0, 0]], 5)
    with pytest.raises(EmptyLibraryError):
        distance_matrix([a])
    with pytest.raises(DuplicateIdError):
        distance_matrix([a, a])
    with pytest.raises(ValueError):
        distance_matrix([a, a.replace(dataset_id="b")], "l2")


def test_matrix_independent_of_threads_and_order():
    lib = [gaussian_set(f"d{i}", [[i, 0], [0, 2 * i]], 30, seed=i) for i in range(5)]
    cfg = SwConfig(L=16, M=20, seed=2)
    D1 = distance_matrix(lib, "sw", cfg, threads=1)
    D4 = distance_matrix(lib, "sw", cfg, threads=4)
    np.testing.assert_array_equal(D1.values, D4.values)
    rev = distance_matrix(lib[::-1], "sw", cfg)
    np.testing.assert_array_equal(rev.reindex(D1.dataset_ids).values, D1.values)


def test_fallback_warned_once(caplog):
    lib = [EmbeddingSet(f"d{i}", np.random.default_rng(i).standard_normal((6, 2)), np.full(6, i)) for i in range(4)]
    with caplog.at_level(logging.WARNING):
        distance_matrix(lib, "sw", SwConfig(L=4))
    assert len([r for r in caplog.records if r.levelno == logging.WARNING]) == 1
    assert "6 of 6 pairs" in caplog.text


# ---------------------------------------------------------------- properties

def test_convergence_in_projection_count():
    rng = np.random.default_rng(11)
    ZA, ZB = rng.standard_normal((50, 6)), rng.standard_normal((50, 6)) + 0.3
    L = 16
    s1 = np.std([sliced_w2(ZA, ZB, SwConfig(L=L, seed=s)) for s in range(20)])
    s4 = np.std([sliced_w2(ZA, ZB, SwConfig(L=4 * L, seed=s)) for s in range(20)])
    assert s1 / s4 >= 1.5


@given(st.integers(0, 10_000), st.floats(0.01, 100.0))
def test_scale_equivariance(seed, s):
    rng = np.random.default_rng(seed)
    A = EmbeddingSet("a", rng.standard_normal((12, 3)), rng.integers(0, 2, 12))
    B = EmbeddingSet("b", rng.standard_normal((9, 3)) + 1.0, rng.integers(0, 2, 9))
    cfg = SwConfig(L=8, M=6, seed=seed)
    for metric in ("sw", "centroid"):
        for mode in ("auto", "off"):
            base = pair_distance(A, B, metric, cfg, mode, warn=False)
            scaled = pair_distance(A.replace(Z=s * A.Z), B.replace(Z=s * B.Z), metric, cfg, mode, warn=False)
            assert scaled == pytest.approx(s * base, rel=1e-6, abs=1e-12)


@given(st.integers(0, 10_000))
def test_symmetry_and_identity_property(seed):
    rng = np.random.default_rng(seed)
    A = EmbeddingSet("a", rng.standard_normal((10, 2)), rng.integers(0, 3, 10))
    B = EmbeddingSet("b", rng.standard_normal((7, 2)), rng.integers(0, 3, 7))
    cfg = SwConfig(L=4, M=5, seed=seed)
    for metric in ("sw", "centroid"):
        d_ab = pair_distance(A, B, metric, cfg, "auto", warn=False)
        assert d_ab == pair_distance(B, A, metric, cfg, "auto", warn=False)
        assert d_ab >= 0
        assert pair_distance(A, A.replace(dataset_id="a2"), metric, cfg, "auto", warn=False) == 0.0
