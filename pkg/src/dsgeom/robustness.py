"""Label-corruption harness.

Corruptions touch only the inputs of the distance computation; the transfer
matrix keeps its clean values. Every function returns a new ``EmbeddingSet``
and leaves its argument alone.
"""
from __future__ import annotations

import logging

import numpy as np

from .align import align_directed, align_symmetric
from .core import UNLABELED, EmbeddingSet, TransferMatrix
from .directed import directed_distance_matrix
from .distance import SwConfig, distance_matrix
from .errors import DataError

log = logging.getLogger(__name__)

MODES = ("noise", "drop", "strip")
_MODE_CODE = {m: i for i, m in enumerate(MODES)}


def _check_level(level, name):
    if not 0.0 <= level <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {level}")


def flip_labels(A: EmbeddingSet, eta: float, seed=0, classes=None) -> EmbeddingSet:
    """Replace each label, with probability ``eta``, by a uniform draw from the *other* classes.

    ``classes`` is the label vocabulary to draw from (defaults to the classes
    present in ``A``). Unlabeled samples stay unlabeled.
    """
    _check_level(eta, "eta")
    if not A.is_labeled:
        raise DataError(f"{A.dataset_id} has no labels to flip")
    classes = np.array(sorted(A.classes if classes is None else set(classes)), dtype=np.int64)
    C = classes.size
    if C < 2:
        raise DataError(f"{A.dataset_id}: flipping needs at least 2 classes, got {C}")
    rng = np.random.default_rng(seed)
    labels = A.labels.copy()
    mask = labels != UNLABELED
    pos = np.searchsorted(classes, labels[mask])
    flip = rng.random(pos.size) < eta
    offset = rng.integers(1, C, size=pos.size)
    pos = np.where(flip, (pos + offset) % C, pos)
    labels[mask] = classes[pos]
    return A.replace(labels=labels)


def drop_labels(A: EmbeddingSet, rho: float, seed=0, labels_only: bool = False) -> EmbeddingSet:
    """Remove ``floor(rho * n_labeled)`` labeled samples chosen uniformly at random.

    With ``labels_only`` the samples stay but are marked unlabeled, so they
    still count for label-agnostic distances. Survivors keep their order and
    their exact values.
    """
    _check_level(rho, "rho")
    if not A.is_labeled:
        raise DataError(f"{A.dataset_id} has no labels to drop")
    labeled = np.flatnonzero(A.labels != UNLABELED)
    k = int(np.floor(rho * labeled.size))
    rng = np.random.default_rng(seed)
    gone = np.sort(rng.choice(labeled, size=k, replace=False)) if k else np.empty(0, dtype=np.intp)
    if labels_only:
        labels = A.labels.copy()
        labels[gone] = UNLABELED
        out = A.replace(labels=labels)
    else:
        keep = np.ones(A.n, dtype=bool)
        keep[gone] = False
        if not keep.any():
            raise DataError(f"{A.dataset_id}: dropping every sample leaves nothing to compare")
        out = A.replace(Z=A.Z[keep], labels=A.labels[keep])
    if not out.classes:
        log.warning("%s has no labeled samples left; distances will use the label-agnostic path", A.dataset_id)
    return out


def strip_labels(A: EmbeddingSet) -> EmbeddingSet:
    return A if not A.is_labeled else A.replace(labels=None, label_names=None)


def corrupt_library(library, mode: str, level: float, seed=0, labels_only: bool = False) -> list[EmbeddingSet]:
    """Apply one corruption to every dataset with per-dataset seeds derived from ``seed``.

    For ``strip`` the level is the fraction of datasets (chosen at random)
    whose labels are removed.
    """
    if mode not in MODES:
        raise ValueError(f"unknown corruption mode {mode!r}")
    _check_level(level, "level")
    library = list(library)
    if mode == "strip":
        rng = np.random.default_rng([*np.atleast_1d(seed), _MODE_CODE[mode]])
        k = int(np.floor(level * len(library)))
        chosen = set(rng.choice(len(library), size=k, replace=False).tolist()) if k else set()
        return [strip_labels(ds) if i in chosen else ds for i, ds in enumerate(library)]
    vocab = sorted(set().union(*(ds.classes for ds in library if ds.is_labeled)))
    out = []
    for i, ds in enumerate(library):
        ds_seed = [*np.atleast_1d(seed), _MODE_CODE[mode], i]
        if mode == "noise":
            out.append(flip_labels(ds, level, ds_seed, classes=vocab))
        else:
            out.append(drop_labels(ds, level, ds_seed, labels_only=labels_only))
    return out


def _mean_std(vals):
    vals = np.asarray([v for v in vals if v is not None], dtype=np.float64)
    if vals.size == 0:
        return None, None
    return float(vals.mean()), float(vals.std(ddof=1)) if vals.size > 1 else 0.0


def corruption_sweep(library, P: TransferMatrix, grid, trials: int = 10, seed: int = 0, cfg: SwConfig | None = None,
                     *, directed: bool = False, alpha: float = 1.0, labels_only: bool = False,
                     threads: int = 1) -> list[dict]:
    """Alignment under label corruption, one row per ``(mode, level)`` cell.

    The distance seed (``cfg.seed``) is held fixed; trial ``t`` uses
    corruption seed ``[seed, t]``, so level 0 reproduces the clean alignment
    exactly. Each row holds mean and standard deviation over trials of the
    symmetric (and optionally directed) statistics.
    """
    cfg = cfg or SwConfig()
    library = list(library)
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rows = []
    for mode, level in grid:
        stats = {}
        for t in range(trials):
            lib = corrupt_library(library, mode, level, [seed, t], labels_only)
            res = {"sym": align_symmetric(distance_matrix(lib, "sw", cfg, threads=threads), P)}
            if directed:
                res["dir"] = align_directed(directed_distance_matrix(lib, cfg, alpha, threads=threads), P)
            for key, r in res.items():
                for name in ("pearson", "spearman", "kendall"):
                    stats.setdefault(f"{key}_{name}", []).append(getattr(r, name))
        row = {"mode": mode, "level": float(level), "trials": trials}
        for key, vals in stats.items():
            row[f"{key}_mean"], row[f"{key}_std"] = _mean_std(vals)
        rows.append(row)
    return rows
