"""Distance/transfer alignment statistics.

Distances are expected to correlate *positively* with transfer error: a
larger distance should mean a worse transfer. Reported values keep their sign.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

from .core import DistanceMatrix, TransferMatrix, symmetrize, upper_triangle
from .errors import ShapeMismatchError, ZeroVarianceError


def _pair(x, y):
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ShapeMismatchError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise ZeroVarianceError(f"correlation needs at least 2 points, got {x.size}")
    return x, y


def pearson(x, y) -> float:
    x, y = _pair(x, y)
    xc, yc = x - x.mean(), y - y.mean()
    sxx, syy = np.dot(xc, xc), np.dot(yc, yc)
    if sxx <= 0 or syy <= 0:
        raise ZeroVarianceError("pearson correlation undefined for a constant input")
    r = np.dot(xc, yc) / np.sqrt(sxx * syy)
    return float(np.clip(r, -1.0, 1.0))


def ranks(x) -> np.ndarray:
    """Fractional ranks (ties share their average rank)."""
    return rankdata(np.asarray(x, dtype=np.float64), method="average")


def spearman(x, y) -> float:
    x, y = _pair(x, y)
    return pearson(ranks(x), ranks(y))


def kendall_tau(x, y) -> float:
    """Kendall tau-b from exact concordant/discordant pair counts."""
    x, y = _pair(x, y)
    n = x.size
    s = n_tx = n_ty = 0
    for i in range(n - 1):
        dx = np.sign(x[i + 1:] - x[i]).astype(np.int64)
        dy = np.sign(y[i + 1:] - y[i]).astype(np.int64)
        s += int(np.dot(dx, dy))
        n_tx += int(np.count_nonzero(dx == 0))
        n_ty += int(np.count_nonzero(dy == 0))
    n0 = n * (n - 1) // 2
    denom = (n0 - n_tx) * (n0 - n_ty)
    if denom == 0:
        raise ZeroVarianceError("kendall tau undefined: one input is all ties")
    return s / np.sqrt(float(denom))


@dataclass
class AlignmentResult:
    pearson: float
    spearman: float
    kendall: float
    n_pairs: int
    mode: str = "symmetric"
    std_pearson: float | None = None
    std_spearman: float | None = None
    std_kendall: float | None = None
    uncertainty: str | None = None

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


def _stats(x, y, mode) -> AlignmentResult:
    return AlignmentResult(pearson(x, y), spearman(x, y), kendall_tau(x, y), int(x.size), mode)


def _aligned_P(D: DistanceMatrix, P: TransferMatrix) -> TransferMatrix:
    return P if P.dataset_ids == D.dataset_ids else P.reindex(D.dataset_ids)


def symmetric_pairs(D: DistanceMatrix, P: TransferMatrix):
    P = _aligned_P(D, P)
    return upper_triangle(D.values), upper_triangle(symmetrize(P).values)


def directed_pairs(D: DistanceMatrix, P: TransferMatrix):
    P = _aligned_P(D, P)
    off = ~np.eye(D.N, dtype=bool)
    return D.values[off], P.values[off]


def align_symmetric(D: DistanceMatrix, P: TransferMatrix) -> AlignmentResult:
    """Correlate the distance upper triangle with the symmetrized transfer matrix."""
    x, y = symmetric_pairs(D, P)
    return _stats(x, y, "symmetric")


def align_directed(D: DistanceMatrix, P: TransferMatrix) -> AlignmentResult:
    """Correlate all ordered off-diagonal pairs of D with the unsymmetrized P."""
    x, y = directed_pairs(D, P)
    return _stats(x, y, "directed")


_STATS = {"pearson": pearson, "spearman": spearman, "kendall": kendall_tau}


def bootstrap_ci(D: DistanceMatrix, P: TransferMatrix, stat: str = "spearman", resamples: int = 200,
                 seed: int = 0, directed: bool = False) -> dict:
    """Mean/std of an alignment statistic over dataset-level bootstrap resamples.

    Datasets are drawn with replacement; pairs that pair a dataset with a copy
    of itself are dropped. Resamples with a degenerate statistic are skipped
    and counted.
    """
    fn = _STATS[stat]
    if D.N < 4:
        raise ValueError(f"bootstrap needs at least 4 datasets, got {D.N}")
    if resamples < 1:
        raise ValueError("resamples must be >= 1")
    P = _aligned_P(D, P)
    Pv = P.values if directed else symmetrize(P).values
    rng = np.random.default_rng(seed)
    a, b = (np.nonzero(~np.eye(D.N, dtype=bool)) if directed else np.triu_indices(D.N, 1))
    vals, skipped = [], 0
    for _ in range(resamples):
        idx = rng.integers(0, D.N, size=D.N)
        ia, ib = idx[a], idx[b]
        keep = ia != ib
        try:
            vals.append(fn(D.values[ia[keep], ib[keep]], Pv[ia[keep], ib[keep]]))
        except ZeroVarianceError:
            skipped += 1
    if not vals:
        raise ZeroVarianceError("every bootstrap resample was degenerate")
    vals = np.array(vals)
    std = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
    return {"mean": float(vals.mean()), "std": std, "resamples": len(vals), "skipped": skipped}


def align_with_uncertainty(D: DistanceMatrix, P: TransferMatrix, directed: bool = False, resamples: int = 0,
                           seed: int = 0) -> AlignmentResult:
    res = align_directed(D, P) if directed else align_symmetric(D, P)
    if resamples > 0:
        for name in _STATS:
            ci = bootstrap_ci(D, P, name, resamples, seed, directed)
            setattr(res, f"std_{name}", ci["std"])
        res.uncertainty = f"dataset bootstrap, {resamples} resamples"
    return res
