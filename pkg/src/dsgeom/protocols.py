"""Decision protocols built on a dataset distance matrix.

Source selection, auxiliary ranking for augmentation and budgeted subset
selection by k-medoids, plus the scores used to judge them (gap recovered,
regret, Kendall tau). Ties are always broken by dataset id so every answer is
deterministic.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from .align import kendall_tau, spearman
from .core import DistanceMatrix, TransferMatrix
from .errors import DataError, ShapeMismatchError, ZeroVarianceError

log = logging.getLogger(__name__)

PROTOCOLS = ("source_selection", "augmentation", "subset_selection")


@dataclass
class DecisionReport:
    protocol: str
    target_id: str | None
    ranked: list                      # [(id, score), ...] ascending by score
    oracle_id: str | None = None
    payoff: dict = field(default_factory=dict)   # random_mean, picked, oracle, gap_recovered

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"unknown protocol {self.protocol!r}")

    @property
    def ranked_ids(self) -> list[str]:
        return [i for i, _ in self.ranked]

    def to_dict(self) -> dict:
        out = {"protocol": self.protocol, "target_id": self.target_id,
               "ranked": [{"id": i, "score": float(s)} for i, s in self.ranked]}
        if self.oracle_id is not None:
            out["oracle_id"] = self.oracle_id
        if self.payoff:
            out["payoff"] = {k: float(v) for k, v in self.payoff.items()}
        return out

    def rows(self) -> list[dict]:
        """One flat record per ranked id (for CSV output)."""
        return [{"protocol": self.protocol, "target_id": self.target_id or "", "rank": r + 1, "id": i,
                 "score": float(s)} for r, (i, s) in enumerate(self.ranked)]


def _ranked_column(D: DistanceMatrix, target: str, k: int | None):
    if target not in D.dataset_ids:
        raise DataError(f"unknown target {target!r}")
    if D.N < 2:
        raise DataError("no candidate datasets besides the target")
    t = D.index_of(target)
    k = D.N - 1 if k is None else int(k)
    if not 1 <= k <= D.N - 1:
        raise ValueError(f"k must lie in [1, {D.N - 1}], got {k}")
    # rows are sources: D[s, t] is the distance from source s to target t
    cand = [(float(D.values[s, t]), D.dataset_ids[s]) for s in range(D.N) if s != t]
    cand.sort()
    return [(i, v) for v, i in cand[:k]]


def select_source(D: DistanceMatrix, target: str, k: int = 1) -> list:
    """The ``k`` candidate sources closest to ``target`` as ``[(id, distance), ...]``."""
    return _ranked_column(D, target, k)


def rank_auxiliaries(D: DistanceMatrix, target: str, k: int | None = None) -> list:
    """Auxiliary datasets for augmenting ``target``, closest first (same ranking as source selection)."""
    return _ranked_column(D, target, k)


def oracle_source(P: TransferMatrix, target: str) -> str:
    """Source with the best measured transfer into ``target``."""
    if target not in P.dataset_ids:
        raise DataError(f"unknown target {target!r}")
    if P.N < 2:
        raise DataError("no candidate sources besides the target")
    t = P.index_of(target)
    # transfer matrices hold errors, so the best source has the smallest entry
    cand = sorted((float(P.values[s, t]), P.dataset_ids[s]) for s in range(P.N) if s != t)
    return cand[0][1]


def gap_recovered(picked: float, random: float, oracle: float, higher_is_better: bool = True) -> float:
    """Fraction of the random-to-oracle gap closed by ``picked``.

    The value is the same for either orientation; ``higher_is_better`` only
    checks that the oracle really beats the random baseline.
    """
    gap = oracle - random
    if gap == 0:
        raise ZeroVarianceError("oracle and random performance coincide; gap recovered is undefined")
    if (gap < 0) == bool(higher_is_better):
        raise DataError("oracle performance is worse than the random baseline")
    return float((picked - random) / gap)


def source_selection_payoff(D: DistanceMatrix, P: TransferMatrix, target: str, k: int = 1) -> DecisionReport:
    """Rank sources for ``target`` and score the top pick against random and oracle choices on ``P``."""
    ranked = select_source(D, target, k)
    P = P if P.dataset_ids == D.dataset_ids else P.reindex(D.dataset_ids)
    t = P.index_of(target)
    col = {P.dataset_ids[s]: float(P.values[s, t]) for s in range(P.N) if s != t}
    oracle = oracle_source(P, target)
    payoff = {"random_mean": float(np.mean(list(col.values()))), "picked": col[ranked[0][0]], "oracle": col[oracle]}
    try:
        payoff["gap_recovered"] = gap_recovered(payoff["picked"], payoff["random_mean"], payoff["oracle"],
                                                higher_is_better=False)
    except ZeroVarianceError:
        log.warning("all sources transfer equally well to %s; gap recovered undefined", target)
    return DecisionReport("source_selection", target, ranked, oracle, payoff)


def augmentation_gain(A_aug, A_base: float, distances=None) -> dict:
    """Gains ``A_aug - A_base`` per candidate, with their Spearman against ``-distance`` if given."""
    A_aug = np.asarray(A_aug, dtype=np.float64).ravel()
    gains = A_aug - float(A_base)
    out = {"gains": gains}
    if distances is not None:
        dist = np.asarray(distances, dtype=np.float64).ravel()
        if dist.shape != gains.shape:
            raise ShapeMismatchError(f"{gains.size} gains vs {dist.size} distances")
        out["spearman"] = spearman(gains, -dist)
    return out


# ---------------------------------------------------------------------------
# budgeted subset selection


@dataclass
class KMedoidsResult:
    ids: tuple                 # selected dataset ids, sorted
    objective: float
    build_objective: float
    history: list              # objective after BUILD and after every accepted swap
    n_swaps: int


def covering_objective(Dv: np.ndarray, medoids) -> float:
    medoids = list(medoids)
    return float(Dv[:, medoids].min(axis=1).sum())


def _symmetric_values(D: DistanceMatrix) -> np.ndarray:
    if D.kind == "directed":
        log.warning("k-medoids needs an undirected distance; symmetrizing the directed matrix")
        v = np.asarray(D.values)
        return 0.5 * (v + v.T)
    return np.asarray(D.values)


def _build(Dv, order, k):
    chosen = []
    nearest = np.full(Dv.shape[0], np.inf)
    for _ in range(k):
        best = None
        for j in order:
            if j in chosen:
                continue
            obj = np.minimum(nearest, Dv[:, j]).sum()
            if best is None or obj < best[0]:
                best = (obj, j)
        chosen.append(best[1])
        nearest = np.minimum(nearest, Dv[:, best[1]])
    return chosen


def kmedoids_select(D: DistanceMatrix, k: int, seed: int = 0, max_passes: int = 100) -> KMedoidsResult:
    """Greedy BUILD followed by eager first-improvement swaps to a local optimum.

    Candidates are scanned in id order and a swap is applied as soon as it
    strictly lowers the covering objective (the FasterPAM strategy), so the
    objective history is strictly decreasing. For ``k = 1`` BUILD already
    returns the exact global medoid. ``seed`` is accepted for interface
    symmetry; the solver itself is deterministic.
    """
    if not 1 <= k <= D.N:
        raise ValueError(f"k must lie in [1, {D.N}], got {k}")
    Dv = _symmetric_values(D)
    ids = D.dataset_ids
    order = sorted(range(D.N), key=lambda i: ids[i])
    medoids = _build(Dv, order, k)
    obj = covering_objective(Dv, medoids)
    history = [obj]
    n_swaps = 0
    for _ in range(max_passes):
        improved = False
        for c in order:
            if c in medoids:
                continue
            best = None
            for slot in sorted(range(k), key=lambda s: ids[medoids[s]]):
                trial = medoids[:slot] + [c] + medoids[slot + 1:]
                t_obj = covering_objective(Dv, trial)
                if best is None or t_obj < best[0]:
                    best = (t_obj, slot)
            if best[0] < obj - 1e-12 * max(1.0, abs(obj)):
                medoids[best[1]] = c
                obj = best[0]
                history.append(obj)
                n_swaps += 1
                improved = True
        if not improved:
            break
    else:
        log.warning("k-medoids stopped after %d passes without converging", max_passes)
    sel = tuple(sorted(ids[m] for m in medoids))
    return KMedoidsResult(sel, obj, history[0], history, n_swaps)


def kmedoids_exhaustive(D: DistanceMatrix, k: int) -> KMedoidsResult:
    """Global optimum by enumerating every size-``k`` subset (small N only)."""
    if not 1 <= k <= D.N:
        raise ValueError(f"k must lie in [1, {D.N}], got {k}")
    Dv = _symmetric_values(D)
    ids = D.dataset_ids
    best = None
    for combo in itertools.combinations(range(D.N), k):
        key = (covering_objective(Dv, combo), tuple(sorted(ids[i] for i in combo)))
        if best is None or key < best:
            best = key
    return KMedoidsResult(best[1], best[0], best[0], [best[0]], 0)


def _subset_key(s):
    return tuple(sorted(s))


def subset_regret(scores: dict, selected, D: DistanceMatrix | None = None, objectives: dict | None = None) -> dict:
    """Regret of ``selected`` within a universe of scored subsets.

    ``scores`` maps each evaluated subset (any iterable of ids) to a measured
    score, higher is better. Regret is ``best - score(selected)``. The Kendall
    tau compares the ranking by ``-objective`` with the ranking by score; the
    covering objective comes from ``objectives`` or is computed from ``D``.
    """
    table = {_subset_key(s): float(v) for s, v in scores.items()}
    key = _subset_key(selected)
    if key not in table:
        raise DataError(f"selected subset {list(key)} has no measured score")
    out = {"regret": max(table.values()) - table[key], "kendall_tau": None}
    if objectives is None and D is not None:
        Dv = _symmetric_values(D)
        objectives = {s: covering_objective(Dv, [D.index_of(i) for i in s]) for s in table}
    if objectives is not None:
        obj = {_subset_key(s): float(v) for s, v in objectives.items()}
        universe = sorted(table)
        missing = [s for s in universe if s not in obj]
        if missing:
            raise DataError(f"no objective value for subset {list(missing[0])}")
        try:
            out["kendall_tau"] = float(kendall_tau([-obj[s] for s in universe], [table[s] for s in universe]))
        except ZeroVarianceError:
            log.warning("objective or score is constant over the universe; kendall tau undefined")
    return out


def random_baseline(ids, k: int, trials: int = 20, seed: int = 0) -> list[tuple]:
    """``trials`` uniform random ``k``-subsets (each returned sorted by id)."""
    ids = list(ids)
    if not 1 <= k <= len(ids):
        raise ValueError(f"k must lie in [1, {len(ids)}], got {k}")
    rng = np.random.default_rng(seed)
    return [tuple(sorted(ids[i] for i in rng.choice(len(ids), size=k, replace=False))) for _ in range(trials)]


def subset_report(D: DistanceMatrix, k: int, seed: int = 0, trials: int = 20) -> DecisionReport:
    """k-medoids selection; medoids ranked by mean distance to the library (most central first)."""
    res = kmedoids_select(D, k, seed)
    Dv = _symmetric_values(D)
    ranked = sorted((float(Dv[:, D.index_of(i)].mean()), i) for i in res.ids)
    rand = [covering_objective(Dv, [D.index_of(i) for i in s]) for s in random_baseline(D.dataset_ids, k, trials, seed)]
    payoff = {"objective": res.objective, "build_objective": res.build_objective,
              "random_mean_objective": float(np.mean(rand))}
    return DecisionReport("subset_selection", None, [(i, v) for v, i in ranked], None, payoff)
