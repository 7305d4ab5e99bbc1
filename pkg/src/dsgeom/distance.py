"""Symmetric dataset distances: label-aware centroid and sliced Wasserstein-2.

All randomness in a pair computation (balanced subsamples, projection
directions) comes from a generator seeded by the global seed, the *unordered*
pair of dataset ids and the class, so ``d(A, B) == d(B, A)`` bit-exactly and
a distance matrix does not depend on the order in which pairs are evaluated.
"""
from __future__ import annotations

import hashlib
import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from .core import DistanceMatrix, EmbeddingSet, shared_classes
from .errors import DuplicateIdError, EmptyLibraryError, NoSharedClassesError, ShapeMismatchError

log = logging.getLogger(__name__)

EXACT_W2_MAX_N = 8
_AGNOSTIC_TAG = 0


@dataclass(frozen=True)
class SwConfig:
    """Sliced-Wasserstein settings: ``L`` projections, per-class cap ``M``."""

    L: int = 64
    M: int = 200
    seed: int = 0
    label_aware: bool = True

    def __post_init__(self):
        if self.L < 1 or self.M < 1:
            raise ValueError(f"need L >= 1 and M >= 1, got L={self.L}, M={self.M}")

    def digest(self) -> str:
        blob = ",".join(f"{k}={v}" for k, v in sorted(asdict(self).items()))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


def pair_seed(seed: int, id_a: str, id_b: str) -> int:
    a, b = sorted((id_a, id_b))
    digest = hashlib.sha256(f"{seed}\x1f{a}\x1f{b}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def class_rng(seed: int, id_a: str, id_b: str, c: int | None) -> np.random.Generator:
    """Generator for one (unordered pair, class) cell; ``c=None`` is the label-agnostic cell."""
    tag = _AGNOSTIC_TAG if c is None else int(c) + 1
    return np.random.default_rng([pair_seed(seed, id_a, id_b), tag])


def random_directions(d: int, L: int, rng: np.random.Generator) -> np.ndarray:
    """``L x d`` matrix of directions uniform on the unit sphere (normalized Gaussians)."""
    U = rng.standard_normal((L, d))
    return U / np.linalg.norm(U, axis=1, keepdims=True)


def _check_pair(ZA, ZB):
    ZA = np.asarray(ZA, dtype=np.float64)
    ZB = np.asarray(ZB, dtype=np.float64)
    if ZA.ndim != 2 or ZB.ndim != 2:
        raise ShapeMismatchError("sample sets must be 2-D matrices")
    if ZA.shape[0] != ZB.shape[0]:
        raise ShapeMismatchError(f"row counts differ ({ZA.shape[0]} vs {ZB.shape[0]}); subsample first")
    if ZA.shape[1] != ZB.shape[1]:
        raise ShapeMismatchError(f"dimensions differ ({ZA.shape[1]} vs {ZB.shape[1]})")
    return ZA, ZB


def sliced_w2(ZA, ZB, cfg: SwConfig | None = None, *, directions=None, rng=None) -> float:
    """Monte-Carlo sliced W2 between two equal-size sample sets.

    ``sqrt(mean_l (1/n) || sort(ZA u_l) - sort(ZB u_l) ||^2)``. Directions are
    taken from ``directions`` if given, else drawn from ``rng`` (default: a
    generator seeded with ``cfg.seed``).
    """
    ZA, ZB = _check_pair(ZA, ZB)
    if directions is None:
        cfg = cfg or SwConfig()
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        directions = random_directions(ZA.shape[1], cfg.L, rng)
    pa = np.sort(ZA @ directions.T, axis=0, kind="stable")
    pb = np.sort(ZB @ directions.T, axis=0, kind="stable")
    return float(np.sqrt(np.mean((pa - pb) ** 2)))


def exact_w2_small(ZA, ZB) -> float:
    """Exact W2 between equal-weight empirical measures by enumerating all n! matchings."""
    ZA, ZB = _check_pair(ZA, ZB)
    n = ZA.shape[0]
    if n > EXACT_W2_MAX_N:
        raise ValueError(f"exact_w2_small enumerates n! matchings; n={n} exceeds {EXACT_W2_MAX_N}")
    cost = ((ZA[:, None, :] - ZB[None, :, :]) ** 2).sum(axis=2)
    perms = np.array(list(itertools.permutations(range(n))), dtype=np.intp)
    totals = cost[np.arange(n), perms].sum(axis=1)
    return float(np.sqrt(totals.min() / n))


def balanced_sample(XA, XB, id_a: str, id_b: str, k: int, rng: np.random.Generator):
    """Draw ``k`` rows from each side without replacement.

    The side with the lexicographically smaller id draws first, so the result
    does not depend on argument order. Sides with equal row counts share one
    index draw, which keeps ``d(A, A) == 0`` when a class exceeds the cap.
    """
    first_is_a = id_a <= id_b
    first, second = (XA, XB) if first_is_a else (XB, XA)
    idx = np.sort(rng.choice(first.shape[0], size=k, replace=False))
    s1 = first[idx]
    if second.shape[0] != first.shape[0]:
        idx = np.sort(rng.choice(second.shape[0], size=k, replace=False))
    s2 = second[idx]
    return (s1, s2) if first_is_a else (s2, s1)


def _cell_sw(XA, XB, id_a, id_b, cfg: SwConfig, c) -> float:
    rng = class_rng(cfg.seed, id_a, id_b, c)
    k = min(XA.shape[0], XB.shape[0], cfg.M)
    sa, sb = balanced_sample(XA, XB, id_a, id_b, k, rng)
    U = random_directions(XA.shape[1], cfg.L, rng)
    # (a - b)^2 == (b - a)^2 exactly, so argument order cannot change the value
    return sliced_w2(sa, sb, directions=U)


def per_class_sw(A: EmbeddingSet, B: EmbeddingSet, cfg: SwConfig) -> dict[int, float]:
    """Sliced W2 per shared class with ``k_c = min(m_A^c, m_B^c, M)`` balanced subsamples."""
    shared = shared_classes(A, B)
    if not shared:
        raise NoSharedClassesError(f"{A.dataset_id} and {B.dataset_id} share no classes")
    return {c: _cell_sw(A.class_matrix(c), B.class_matrix(c), A.dataset_id, B.dataset_id, cfg, c) for c in shared}


def label_aware_sw(A: EmbeddingSet, B: EmbeddingSet, cfg: SwConfig) -> float:
    vals = per_class_sw(A, B, cfg)
    return float(np.mean([vals[c] for c in sorted(vals)]))


def label_agnostic_sw(A: EmbeddingSet, B: EmbeddingSet, cfg: SwConfig) -> float:
    return _cell_sw(A.Z, B.Z, A.dataset_id, B.dataset_id, cfg, None)


def centroid_distance(A: EmbeddingSet, B: EmbeddingSet) -> float:
    """Mean over shared classes of the Euclidean gap between (unnormalized) class means."""
    shared = shared_classes(A, B)
    if not shared:
        raise NoSharedClassesError(f"{A.dataset_id} and {B.dataset_id} share no classes")
    gaps = [np.linalg.norm(A.class_matrix(c).mean(axis=0) - B.class_matrix(c).mean(axis=0)) for c in shared]
    return float(np.mean(gaps))


def mean_distance(A: EmbeddingSet, B: EmbeddingSet) -> float:
    return float(np.linalg.norm(A.Z.mean(axis=0) - B.Z.mean(axis=0)))


def pair_distance(A: EmbeddingSet, B: EmbeddingSet, metric: str, cfg: SwConfig, label_aware: str = "auto",
                  warn: bool = True) -> float:
    """One symmetric distance.

    ``label_aware``: ``"on"`` requires shared classes, ``"off"`` ignores labels,
    ``"auto"`` uses labels when possible and otherwise falls back to
    label-agnostic sliced W2 on the full sets.
    """
    if metric not in ("sw", "centroid"):
        raise ValueError(f"unknown metric {metric!r}")
    if label_aware not in ("on", "off", "auto"):
        raise ValueError(f"label_aware must be on/off/auto, got {label_aware!r}")
    if label_aware == "off":
        return label_agnostic_sw(A, B, cfg) if metric == "sw" else mean_distance(A, B)
    if label_aware == "auto" and not shared_classes(A, B):
        if warn:
            log.warning("no shared classes for (%s, %s); using label-agnostic sliced W2", A.dataset_id, B.dataset_id)
        return label_agnostic_sw(A, B, cfg)
    return label_aware_sw(A, B, cfg) if metric == "sw" else centroid_distance(A, B)


def check_library(library) -> list[EmbeddingSet]:
    library = list(library)
    if len(library) < 2:
        raise EmptyLibraryError("need at least two datasets")
    ids = [ds.dataset_id for ds in library]
    if len(set(ids)) != len(ids):
        raise DuplicateIdError("duplicate dataset ids in library")
    return library


def warn_fallbacks(library, pairs) -> int:
    """Log one warning for all pairs that will fall back to label-agnostic sliced W2."""
    bad = [(i, j) for i, j in pairs if not shared_classes(library[i], library[j])]
    if bad:
        i, j = bad[0]
        log.warning("%d of %d pairs share no classes (first: %s, %s); using label-agnostic sliced W2 for them",
                    len(bad), len(pairs), library[i].dataset_id, library[j].dataset_id)
    return len(bad)


def map_pairs(fn, pairs, threads: int = 1) -> list:
    """Evaluate ``fn`` over pairs; results come back in input order for any thread count."""
    if threads <= 1:
        return [fn(p) for p in pairs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, pairs))


def distance_matrix(library, metric: str = "sw", cfg: SwConfig | None = None, *,
                    label_aware: str | None = None, threads: int = 1) -> DistanceMatrix:
    """Symmetric distance matrix; each unordered pair is evaluated once."""
    cfg = cfg or SwConfig()
    library = check_library(library)
    mode = label_aware or ("auto" if cfg.label_aware else "off")
    N = len(library)
    pairs = [(i, j) for i in range(N) for j in range(i + 1, N)]
    if mode == "auto":
        warn_fallbacks(library, pairs)
    vals = map_pairs(lambda ij: pair_distance(library[ij[0]], library[ij[1]], metric, cfg, mode, warn=False),
                     pairs, threads)
    D = np.zeros((N, N))
    for (i, j), v in zip(pairs, vals):
        D[i, j] = D[j, i] = v
    tag = f"{metric}-{mode}"
    return DistanceMatrix(D, "symmetric", tag, tuple(ds.dataset_id for ds in library), f"{tag}-{cfg.digest()}")
