import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dsgeom.align import align_symmetric
from dsgeom.core import UNLABELED, EmbeddingSet
from dsgeom.distance import SwConfig, distance_matrix, label_agnostic_sw
from dsgeom.errors import DataError
from dsgeom.robustness import corrupt_library, corruption_sweep, drop_labels, flip_labels, strip_labels
from dsgeom.synth import SynthSpec, gen_library, gen_transfer_matrix


def _labeled(n=100, C=2, seed=0):
    rng = np.random.default_rng(seed)
    return EmbeddingSet("a", rng.standard_normal((n, 3)), rng.integers(0, C, n))


def test_flip_examples():
    A = _labeled()
    assert np.array_equal(flip_labels(A, 0.0, seed=1).labels, A.labels)
    np.testing.assert_array_equal(flip_labels(A, 1.0, seed=1).labels, 1 - A.labels)


def test_flip_rate_binomial():
    A = _labeled(n=10_000)
    flipped = np.mean(flip_labels(A, 0.5, seed=3).labels != A.labels)
    assert abs(flipped - 0.5) < 3 * np.sqrt(0.25 / 10_000)


def test_flip_always_moves_to_another_class():
    A = _labeled(n=2000, C=5, seed=1)
    B = flip_labels(A, 1.0, seed=2)
    assert np.all(B.labels != A.labels)
    counts = np.bincount(B.labels[A.labels == 0], minlength=5)
    assert counts[0] == 0 and counts[1:].min() > 0


def test_flip_uses_library_vocabulary_and_keeps_unlabeled():
    A = EmbeddingSet("a", np.zeros((4, 1)), [0, 0, UNLABELED, 0])
    B = flip_labels(A, 1.0, seed=0, classes=[0, 1])
    assert B.labels.tolist() == [1, 1, UNLABELED, 1]
    with pytest.raises(DataError):
        flip_labels(A, 0.5)       # a single class cannot be flipped


def test_drop_examples():
    A = _labeled()
    assert drop_labels(A, 0.0).n == 100
    B = drop_labels(A, 0.5, seed=4)
    assert B.n == 50
    C = drop_labels(A, 0.5, seed=4, labels_only=True)
    assert C.n == 100 and np.sum(C.labels == UNLABELED) == 50


def test_drop_expected_class_balance():
    # 90/10 class split: the expected surviving minority count is preserved on average
    labels = np.array([0] * 90 + [1] * 10)
    A = EmbeddingSet("a", np.arange(100.0)[:, None], labels)
    kept = [np.sum(drop_labels(A, 0.5, seed=s).labels == 1) for s in range(400)]
    se = np.std(kept, ddof=1) / np.sqrt(len(kept))
    assert abs(np.mean(kept) - 5.0) < 3 * se


def test_drop_all_labels_warns(caplog):
    A = _labeled(n=10)
    with caplog.at_level(logging.WARNING):
        out = drop_labels(A, 1.0, labels_only=True)
    assert not out.is_labeled and "label-agnostic" in caplog.text
    with pytest.raises(DataError):
        drop_labels(A, 1.0)


def test_strip_examples():
    A = _labeled()
    B = strip_labels(A)
    assert B.labels is None
    np.testing.assert_array_equal(B.Z, A.Z)
    assert strip_labels(B) is B


@given(st.integers(0, 10_000), st.floats(0, 0.9), st.sampled_from(["noise", "drop", "strip"]))
def test_corruption_is_pure_and_seeded(seed, level, mode):
    lib = [_labeled(n=30, C=3, seed=i).replace(dataset_id=f"d{i}") for i in range(4)]
    before = [(ds.Z.copy(), ds.labels.copy()) for ds in lib]
    a = corrupt_library(lib, mode, level, seed)
    b = corrupt_library(lib, mode, level, seed)
    for (Z, y), ds in zip(before, lib):
        np.testing.assert_array_equal(ds.Z, Z)
        np.testing.assert_array_equal(ds.labels, y)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.Z, y.Z)
        assert (x.labels is None and y.labels is None) or np.array_equal(x.labels, y.labels)
    if mode == "noise":
        assert all(x.n == ds.n for x, ds in zip(a, lib))
    if mode == "drop":
        for x, ds in zip(a, lib):
            survivors = {tuple(r) for r in ds.Z}
            assert all(tuple(r) in survivors for r in x.Z)


def test_strip_level_is_dataset_fraction():
    lib = [_labeled(n=10, seed=i).replace(dataset_id=f"d{i}") for i in range(10)]
    out = corrupt_library(lib, "strip", 0.3, seed=1)
    assert sum(ds.labels is None for ds in out) == 3
    with pytest.raises(ValueError):
        corrupt_library(lib, "shuffle", 0.1)
    with pytest.raises(ValueError):
        corrupt_library(lib, "noise", 1.5)


def test_stripped_library_distance_dispatch():
    lib = [_labeled(n=20, seed=i).replace(dataset_id=f"d{i}") for i in range(3)]
    out = corrupt_library(lib, "strip", 1.0, seed=0)
    cfg = SwConfig(L=8)
    D = distance_matrix(out, "sw", cfg)
    assert D.values[0, 1] == label_agnostic_sw(out[0], out[1], cfg)


def _planted(seed=0, **kw):
    lib = gen_library(SynthSpec(n=300, seed=seed, **kw))
    return lib, gen_transfer_matrix(lib.G, ids=lib.ids)


def test_level_zero_reproduces_clean_alignment():
    lib, P = _planted(1)
    cfg = SwConfig(L=16, M=100)
    clean = align_symmetric(distance_matrix(lib.datasets, "sw", cfg), P)
    rows = corruption_sweep(lib.datasets, P, [(m, 0.0) for m in ("noise", "drop", "strip")], trials=2, cfg=cfg)
    for r in rows:
        assert r["sym_spearman_mean"] == clean.spearman and r["sym_spearman_std"] == 0.0
        assert r["trials"] == 2


@pytest.mark.slow
def test_directed_degrades_at_least_as_fast():
    d_sym, d_dir = [], []
    for seed in range(5):
        lib, P = _planted(seed, spread_lo=0.3, spread_hi=3.0)
        rows = corruption_sweep(lib.datasets, P, [("noise", 0.0), ("noise", 0.5)], trials=3, seed=seed,
                                cfg=SwConfig(L=32, M=100), directed=True)
        d_sym.append(rows[0]["sym_spearman_mean"] - rows[1]["sym_spearman_mean"])
        d_dir.append(rows[0]["dir_spearman_mean"] - rows[1]["dir_spearman_mean"])
    assert np.mean(d_dir) >= np.mean(d_sym)
