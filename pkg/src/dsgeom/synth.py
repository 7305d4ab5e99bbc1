"""Synthetic labeled libraries with a known ground-truth transfer geometry.

Every dataset is a mixture of isotropic Gaussian classes. Class means drift
across datasets as independent random walks (optionally confined to the
leading ``informative_dims`` coordinates), per-class spreads scale with a
per-dataset factor, and class priors come from a Dirichlet draw. The planted
directed distance ``G`` applies the DSW functional to the *population*
parameters; for isotropic Gaussians the sliced W2 has the closed form
``sqrt(||m_i - m_j||^2 / d + (s_i - s_j)^2)``, so the gap between an estimate
and ``G`` is purely statistical. A transfer matrix is then any strictly
increasing function of ``G`` plus noise.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import (
    EmbeddingSet,
    LibraryManifest,
    ManifestEntry,
    TransferMatrix,
    write_embeddings,
    write_labels,
    write_manifest,
    write_matrix_csv,
    write_transfer_matrix,
)
from .errors import DataError


@dataclass(frozen=True)
class SynthSpec:
    N: int = 10
    C: int = 3
    d: int = 16
    n: int = 1000
    shift: float = 1.0            # random-walk step of each class mean between consecutive datasets
    informative_dims: int | None = None  # leading coordinates that carry the drift (None: all d)
    class_sep: float = 3.0        # scale of the shared base class means
    spread_lo: float = 0.8        # per-dataset spread factor, log-uniform in [lo, hi]
    spread_hi: float = 1.25
    spread_jitter: float = 0.0    # per-class log-uniform jitter half-width
    concentration: float | None = 50.0  # Dirichlet concentration; None gives uniform priors
    alpha: float = 1.0
    distortion: str = "none"      # "none" or "linear"
    distortion_strength: float = 0.5    # informative-coordinate log-scales drawn from U(-s, s)
    distortion_gain: float = 10.0       # scale applied to non-informative coordinates
    min_class_count: int = 5
    holdout: int = 0              # last `holdout` datasets get split tag "holdout"
    seed: int = 0

    def __post_init__(self):
        if self.N < 3 or self.C < 1 or self.d < 1 or self.n < 1:
            raise DataError("need N >= 3, C >= 1, d >= 1, n >= 1")
        if self.shift < 0 or self.class_sep < 0 or self.spread_jitter < 0:
            raise DataError("scales must be nonnegative")
        if not 0 < self.spread_lo <= self.spread_hi:
            raise DataError("need 0 < spread_lo <= spread_hi")
        if self.concentration is not None and self.concentration <= 0:
            raise DataError("Dirichlet concentration must be positive")
        if self.informative_dims is not None and not 1 <= self.informative_dims <= self.d:
            raise DataError("informative_dims must lie in [1, d]")
        if self.distortion_gain <= 0:
            raise DataError("distortion_gain must be positive")
        if self.distortion not in ("none", "linear"):
            raise DataError(f"unknown distortion {self.distortion!r}")
        if self.C * self.min_class_count > self.n:
            raise DataError("n too small for the per-class minimum count")
        if not 0 <= self.holdout <= self.N - 3:
            raise DataError("holdout must leave at least 3 training datasets")


@dataclass
class SynthLibrary:
    spec: SynthSpec
    datasets: list
    G: np.ndarray                  # planted directed distances, G[i, j] = source i -> target j
    means: np.ndarray              # (N, C, d) population class means (undistorted)
    sigmas: np.ndarray             # (N, C) per-coordinate class standard deviations
    priors: np.ndarray             # (N, C) realized class priors
    distortion: np.ndarray | None  # (d, d) map applied to emitted embeddings: z -> A z

    @property
    def ids(self) -> list[str]:
        return [ds.dataset_id for ds in self.datasets]

    @property
    def split_tags(self) -> dict:
        if not self.spec.holdout:
            return {}
        k = self.spec.N - self.spec.holdout
        return {did: ("train" if i < k else "holdout") for i, did in enumerate(self.ids)}


def population_sw(m_a, s_a, m_b, s_b) -> float:
    """Sliced W2 between N(m_a, s_a^2 I) and N(m_b, s_b^2 I)."""
    m_a, m_b = np.asarray(m_a, dtype=np.float64), np.asarray(m_b, dtype=np.float64)
    return float(np.sqrt(np.sum((m_a - m_b) ** 2) / m_a.size + (s_a - s_b) ** 2))


def population_dsw(means, sigmas, priors, alpha: float = 1.0) -> np.ndarray:
    """Directed distance matrix evaluated on population parameters."""
    means = np.asarray(means, dtype=np.float64)
    N, C, _ = means.shape
    G = np.zeros((N, N))
    for i in range(N):
        for j in range(N):
            if i == j:
                continue
            total = 0.0
            for c in range(C):
                sw = population_sw(means[i, c], sigmas[i, c], means[j, c], sigmas[j, c])
                pen = max(0.0, float(np.log(sigmas[j, c] / sigmas[i, c])))
                total += priors[i, c] * (sw + alpha * pen)
            G[i, j] = total
    return G


def random_distortion(d: int, strength: float, rng, gain: float = 1.0, informative_dims: int | None = None) -> np.ndarray:
    """Per-coordinate scaling followed by a random rotation (invertible).

    Informative coordinates get log-uniform scales in ``[-strength, strength]``;
    the remaining coordinates are multiplied by ``gain``, which inflates
    within-class noise relative to the drift that determines transfer.
    """
    k = d if informative_dims is None else informative_dims
    Q, R = np.linalg.qr(rng.standard_normal((d, d)))
    Q = Q * np.sign(np.diag(R))
    scales = np.concatenate([np.exp(rng.uniform(-strength, strength, size=k)), np.full(d - k, gain)])
    return Q @ np.diag(scales)


def _class_counts(priors, n, min_count):
    raw = priors * n
    counts = np.floor(raw).astype(int)
    rest = n - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:rest]] += 1
    while counts.min() < min_count:
        lo, hi = int(np.argmin(counts)), int(np.argmax(counts))
        counts[lo] += 1
        counts[hi] -= 1
    return counts


def gen_library(spec: SynthSpec) -> SynthLibrary:
    rng = np.random.default_rng(spec.seed)
    N, C, d = spec.N, spec.C, spec.d
    base = spec.class_sep * rng.standard_normal((C, d))
    steps = spec.shift * rng.standard_normal((N, C, d))
    steps[0] = 0.0
    if spec.informative_dims is not None:
        steps[:, :, spec.informative_dims:] = 0.0
    means = base[None] + np.cumsum(steps, axis=0)
    factor = np.exp(rng.uniform(np.log(spec.spread_lo), np.log(spec.spread_hi), size=N))
    jitter = np.exp(rng.uniform(-spec.spread_jitter, spec.spread_jitter, size=(N, C)))
    sigmas = factor[:, None] * jitter
    if spec.concentration is None:
        raw_priors = np.full((N, C), 1.0 / C)
    else:
        raw_priors = rng.dirichlet(np.full(C, spec.concentration), size=N)
    A = None
    if spec.distortion == "linear":
        A = random_distortion(d, spec.distortion_strength, rng, spec.distortion_gain, spec.informative_dims)

    datasets, priors = [], np.zeros((N, C))
    for i in range(N):
        ds_rng = np.random.default_rng([spec.seed, i + 1])
        counts = _class_counts(raw_priors[i], spec.n, spec.min_class_count)
        priors[i] = counts / spec.n
        labels = np.repeat(np.arange(C), counts)
        Z = means[i, labels] + sigmas[i, labels][:, None] * ds_rng.standard_normal((spec.n, d))
        perm = ds_rng.permutation(spec.n)
        Z, labels = Z[perm], labels[perm]
        if A is not None:
            Z = Z @ A.T
        datasets.append(EmbeddingSet(f"ds{i:02d}", Z, labels))
    G = population_dsw(means, sigmas, priors, spec.alpha)
    return SynthLibrary(spec, datasets, G, means, sigmas, priors, A)


def gen_transfer_matrix(G, link: str = "affine", noise_std: float = 0.0, seed: int = 0, ids=None,
                        slope: float = 0.1, intercept: float = 0.05) -> TransferMatrix:
    """Planted transfer errors ``P = link(G) + N(0, noise_std^2)`` (diagonal included).

    ``affine``: ``intercept + slope * G``. ``logistic``: a sigmoid centred on the
    median off-diagonal distance with width equal to their standard deviation.
    """
    G = np.asarray(G, dtype=np.float64)
    if not np.all(np.isfinite(G)):
        raise DataError("G has non-finite entries")
    if link == "affine":
        if slope <= 0:
            raise DataError("affine link needs a positive slope")
        P = intercept + slope * G
    elif link == "logistic":
        off = G[~np.eye(len(G), dtype=bool)]
        width = float(off.std()) or 1.0
        P = 1.0 / (1.0 + np.exp(-(G - float(np.median(off))) / width))
    else:
        raise DataError(f"unknown link {link!r}")
    if noise_std > 0:
        P = P + noise_std * np.random.default_rng(seed).standard_normal(P.shape)
    ids = ids or [f"ds{i:02d}" for i in range(len(G))]
    return TransferMatrix(P, tuple(ids))


def write_library(out_dir, lib: SynthLibrary, P: TransferMatrix) -> Path:
    """Write manifest, embeddings, labels, P and G; return the manifest path."""
    out = Path(out_dir)
    (out / "emb").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(exist_ok=True)
    entries = []
    for ds in lib.datasets:
        emb = Path("emb") / f"{ds.dataset_id}.dge"
        lab = Path("labels") / f"{ds.dataset_id}.txt"
        write_embeddings(out / emb, ds.Z)
        write_labels(out / lab, ds.labels)
        entries.append(ManifestEntry(ds.dataset_id, embedding_path=emb, labels_path=lab))
    manifest = out / "manifest.json"
    write_manifest(manifest, LibraryManifest(tuple(entries), lib.split_tags, out))
    write_transfer_matrix(out / "P.csv", P)
    write_matrix_csv(out / "G.csv", lib.G, lib.ids, {"kind": "directed", "metric": "planted"})
    return manifest
