"""Directed source -> target distance (DSW).

``DSW(A -> B) = sum_c pi_A(c) * [ SW_c(A, B) + alpha * max(0, log(sigma_B^c / sigma_A^c)) ]``
over classes shared by A and B. The per-class SW term is the same balanced,
pair-seeded estimate used by the symmetric label-aware distance.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import DistanceMatrix, EmbeddingSet, shared_classes
from .distance import SwConfig, check_library, label_agnostic_sw, map_pairs, per_class_sw, warn_fallbacks
from .errors import DataError


SIGMA_FLOOR = 1e-8


@dataclass(frozen=True)
class ClassStats:
    priors: dict[int, float]
    spreads: dict[int, float]


def class_stats(A: EmbeddingSet) -> ClassStats:
    """Class priors over labeled samples and per-class RMS distance to the class mean."""
    if not A.is_labeled:
        raise DataError(f"{A.dataset_id} has no labels")
    m = sum(len(idx) for idx in A.class_index.values())
    priors, spreads = {}, {}
    for c in A.classes:
        X = A.class_matrix(c)
        priors[c] = len(X) / m
        spreads[c] = float(np.sqrt(np.mean(np.sum((X - X.mean(axis=0)) ** 2, axis=1))))
    return ClassStats(priors, spreads)


def spread_penalty(sigma_src: float, sigma_tgt: float, eps: float = SIGMA_FLOOR) -> float:
    if sigma_src <= 0 and sigma_tgt <= 0:
        return 0.0
    return max(0.0, math.log(max(sigma_tgt, eps) / max(sigma_src, eps)))


def combine_directed(src: ClassStats, tgt: ClassStats, sw_by_class: dict[int, float], alpha: float = 1.0,
                     renormalize_priors: bool = False) -> float:
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    classes = sorted(sw_by_class)
    weights = np.array([src.priors[c] for c in classes])
    if renormalize_priors:
        weights = weights / weights.sum()
    terms = np.array([sw_by_class[c] + alpha * spread_penalty(src.spreads[c], tgt.spreads[c]) for c in classes])
    return float(np.dot(weights, terms))


def dsw(A: EmbeddingSet, B: EmbeddingSet, cfg: SwConfig | None = None, alpha: float = 1.0, *,
        renormalize_priors: bool = False) -> float:
    """Directed distance from source ``A`` to target ``B``.

    Priors are not renormalized over shared classes by default, so source
    classes missing from the target shrink the distance.
    """
    cfg = cfg or SwConfig()
    per_class = per_class_sw(A, B, cfg)
    return combine_directed(class_stats(A), class_stats(B), per_class, alpha, renormalize_priors)


def directed_distance_matrix(library, cfg: SwConfig | None = None, alpha: float = 1.0, *,
                             renormalize_priors: bool = False, threads: int = 1) -> DistanceMatrix:
    """``values[i, j] = DSW(i -> j)``; per-class SW is computed once per unordered pair.

    Pairs without shared classes (or unlabeled datasets) fall back to
    label-agnostic sliced W2 in both directions.
    """
    cfg = cfg or SwConfig()
    library = check_library(library)
    N = len(library)
    stats = [class_stats(ds) if ds.is_labeled else None for ds in library]

    def both_ways(ij):
        i, j = ij
        A, B = library[i], library[j]
        if stats[i] is None or stats[j] is None or not shared_classes(A, B):
            v = label_agnostic_sw(A, B, cfg)
            return v, v
        per_class = per_class_sw(A, B, cfg)
        return (combine_directed(stats[i], stats[j], per_class, alpha, renormalize_priors),
                combine_directed(stats[j], stats[i], per_class, alpha, renormalize_priors))

    pairs = [(i, j) for i in range(N) for j in range(i + 1, N)]
    warn_fallbacks(library, pairs)
    D = np.zeros((N, N))
    for (i, j), (fwd, bwd) in zip(pairs, map_pairs(both_ways, pairs, threads)):
        D[i, j], D[j, i] = fwd, bwd
    tag = f"dsw-a{alpha:g}" + ("-renorm" if renormalize_priors else "")
    return DistanceMatrix(D, "directed", tag, tuple(ds.dataset_id for ds in library), f"{tag}-{cfg.digest()}")

