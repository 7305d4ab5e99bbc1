"""Contrastive refinement of the metric head.

Four dataset-level terms are combined with weights ``lambdas``:

* ``list``    -- KL(q_i || p_i), teacher ``q_ij ~ exp(-P_ij / tau)``, model
  ``p_ij ~ exp(<u_i, u_j> / tau)`` over ``j != i``;
* ``cons``    -- symmetrized KL between the row distributions of two
  stochastic views;
* ``corr``    -- one minus the Pearson correlation between the upper
  triangles of the batch SW matrix and the symmetrized transfer matrix;
* ``distill`` -- KL(t_i || p_i) with a constant SW teacher ``t_ij ~ exp(-D_ij / tau)``.

Teachers built from P and from the SW matrix are constants. The SW matrix
does receive gradients through the correlation term (sort permutations are
frozen per step, which gives an exact gradient almost everywhere).
Everything is plain numpy with hand-written backward passes.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .core import TransferMatrix, symmetrize, upper_triangle
from .distance import SwConfig, random_directions
from .encoder import MetricHead, ViewConfig, centroid_backward, dataset_centroid, head_backward, head_forward
from .errors import DataError, DivergedTrainingError, NonFiniteError, ShapeMismatchError, ZeroVarianceError

log = logging.getLogger(__name__)

TERMS = ("list", "cons", "corr", "distill")
DEFAULT_LAMBDAS = {"list": 1.0, "cons": 0.3, "corr": 0.3, "distill": 0.3}


@dataclass
class CdeConfig:
    lambdas: dict = field(default_factory=lambda: dict(DEFAULT_LAMBDAS))
    tau: float = 0.1
    lr: float = 1e-3
    clip_norm: float = 1.0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    epochs: int = 50
    batch_datasets: int = 8
    samples_per_dataset: int = 256
    view: ViewConfig = field(default_factory=ViewConfig)
    sw: SwConfig = field(default_factory=lambda: SwConfig(L=64, M=64))
    seed: int = 0

    def __post_init__(self):
        lam = dict(DEFAULT_LAMBDAS)
        lam.update(self.lambdas or {})
        unknown = set(lam) - set(TERMS)
        if unknown:
            raise ValueError(f"unknown loss terms {sorted(unknown)}")
        if any(v < 0 for v in lam.values()):
            raise ValueError("loss weights must be nonnegative")
        self.lambdas = {k: float(lam[k]) for k in TERMS}
        if self.tau <= 0 or self.lr <= 0 or self.clip_norm <= 0:
            raise ValueError("tau, lr and clip_norm must be positive")
        if self.batch_datasets < 3:
            raise ValueError("batch_datasets must be >= 3")
        if self.epochs < 0 or self.samples_per_dataset < 1:
            raise ValueError("epochs must be >= 0 and samples_per_dataset >= 1")
        self.betas = tuple(float(b) for b in self.betas)

    @classmethod
    def from_dict(cls, obj: dict) -> "CdeConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown config fields {sorted(unknown)}")
        kw = dict(obj)
        if isinstance(kw.get("view"), dict):
            kw["view"] = ViewConfig(**kw["view"])
        if isinstance(kw.get("sw"), dict):
            kw["sw"] = SwConfig(**kw["sw"])
        return cls(**kw)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["betas"] = list(self.betas)
        return out


@dataclass
class LossBreakdown:
    list: float = 0.0
    cons: float = 0.0
    corr: float = 0.0
    distill: float = 0.0
    total: float = 0.0
    rows: dict = field(default_factory=dict)
    skipped: tuple = ()

    def weighted_total(self, lambdas) -> float:
        return sum(lambdas[k] * getattr(self, k) for k in TERMS)


# --------------------------------------------------------------------------
# row distributions over j != i

def _offdiag_log_softmax(logits):
    A = np.array(logits, dtype=np.float64)
    N = A.shape[0]
    np.fill_diagonal(A, -np.inf)
    m = A.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(A - m).sum(axis=1, keepdims=True))
    out = A - lse
    np.fill_diagonal(out, 0.0)  # masked entries: probability 0, log kept finite
    return out


def _probs(logp):
    p = np.exp(logp)
    np.fill_diagonal(p, 0.0)
    return p


def _kl_rows(logq, logp):
    return (_probs(logq) * (logq - logp)).sum(axis=1)


def _check_centroids(U, name="centroids"):
    U = np.asarray(U, dtype=np.float64)
    if U.ndim != 2 or U.shape[0] < 2:
        raise ShapeMismatchError(f"{name} must be an N x d matrix with N >= 2, got shape {U.shape}")
    return U


def _sim_backward(G, U):
    # S = U U^T, dL/dS = G (zero diagonal)
    return (G + G.T) @ U


def _teacher_kl(teacher_logits, U, tau):
    """Per-row KL(teacher || model) and its gradient w.r.t. U (teacher constant)."""
    U = _check_centroids(U)
    N = U.shape[0]
    logq = _offdiag_log_softmax(teacher_logits)
    logp = _offdiag_log_softmax(U @ U.T / tau)
    rows = _kl_rows(logq, logp)
    G = (_probs(logp) - _probs(logq)) / (N * tau)
    return rows, _sim_backward(G, U)


def listwise_loss(P, centroids, tau: float = 0.1):
    """KL from the transfer-error teacher to the centroid-similarity model, averaged over rows."""
    Pv = np.asarray(getattr(P, "values", P), dtype=np.float64)
    U = _check_centroids(centroids)
    if Pv.shape != (U.shape[0], U.shape[0]):
        raise ShapeMismatchError(f"P is {Pv.shape} but there are {U.shape[0]} centroids")
    rows, g = _teacher_kl(-Pv / tau, U, tau)
    return float(rows.mean()), g


def distill_loss(Dsw, centroids, tau: float = 0.1):
    """KL from the SW-distance teacher (treated as constant) to the centroid model."""
    Dv = np.asarray(getattr(Dsw, "values", Dsw), dtype=np.float64)
    U = _check_centroids(centroids)
    if Dv.shape != (U.shape[0], U.shape[0]):
        raise ShapeMismatchError(f"Dsw is {Dv.shape} but there are {U.shape[0]} centroids")
    rows, g = _teacher_kl(-Dv / tau, U, tau)
    return float(rows.mean()), g


def _consistency(U1, U2, tau):
    U1 = _check_centroids(U1, "view-1 centroids")
    U2 = _check_centroids(U2, "view-2 centroids")
    if U1.shape != U2.shape:
        raise ShapeMismatchError("view centroids differ in shape")
    N = U1.shape[0]
    lp1 = _offdiag_log_softmax(U1 @ U1.T / tau)
    lp2 = _offdiag_log_softmax(U2 @ U2.T / tau)
    p1, p2 = _probs(lp1), _probs(lp2)
    kl12 = (p1 * (lp1 - lp2)).sum(axis=1, keepdims=True)
    kl21 = (p2 * (lp2 - lp1)).sum(axis=1, keepdims=True)
    rows = (kl12 + kl21).ravel()
    # d KL(a||b)/d logits_a = a (log a - log b - KL(a||b)); d KL(b||a)/d logits_a = a - b
    G1 = (p1 * (lp1 - lp2 - kl12) + p1 - p2) / (2 * N * tau)
    G2 = (p2 * (lp2 - lp1 - kl21) + p2 - p1) / (2 * N * tau)
    return rows, _sim_backward(G1, U1), _sim_backward(G2, U2)


def consistency_loss(centroids_v1, centroids_v2, tau: float = 0.1):
    rows, g1, g2 = _consistency(centroids_v1, centroids_v2, tau)
    return float(rows.sum() / (2 * rows.size)), (g1, g2)


def corr_loss(Dsw_upper, P_upper):
    """``1 - pearson(Dsw_upper, P_upper)`` and its gradient w.r.t. ``Dsw_upper``."""
    x = np.asarray(Dsw_upper, dtype=np.float64).ravel()
    y = np.asarray(P_upper, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ShapeMismatchError(f"corr_loss inputs differ in length: {x.size} vs {y.size}")
    if x.size < 2:
        raise ZeroVarianceError("correlation over fewer than 2 pairs is undefined")
    xc, yc = x - x.mean(), y - y.mean()
    nx, ny = np.linalg.norm(xc), np.linalg.norm(yc)
    if nx <= 1e-12 or ny <= 1e-12:
        raise ZeroVarianceError("zero variance in correlation loss input")
    rho = float(np.dot(xc, yc) / (nx * ny))
    drho = yc / (nx * ny) - rho * xc / (nx * nx)
    return 1.0 - rho, -drho


def sw_with_grads(ZA, ZB, directions):
    """Sliced W2 and its gradients w.r.t. both sample sets for fixed directions.

    The stable sort permutations of the forward pass are held fixed; the
    gradient is zero when the two sets coincide.
    """
    ZA = np.asarray(ZA, dtype=np.float64)
    ZB = np.asarray(ZB, dtype=np.float64)
    if ZA.shape != ZB.shape:
        raise ShapeMismatchError(f"sample sets differ in shape: {ZA.shape} vs {ZB.shape}")
    n, L = ZA.shape[0], directions.shape[0]
    pa, pb = ZA @ directions.T, ZB @ directions.T
    oa = np.argsort(pa, axis=0, kind="stable")
    ob = np.argsort(pb, axis=0, kind="stable")
    diff = np.take_along_axis(pa, oa, axis=0) - np.take_along_axis(pb, ob, axis=0)
    val = float(np.sqrt(np.mean(diff ** 2)))
    if val == 0.0:
        return 0.0, np.zeros_like(ZA), np.zeros_like(ZB)
    coef = diff / (n * L * val)  # d sqrt(S) = dS / (2 sqrt(S)), dS/d proj = 2 diff / (n L)
    ga = np.zeros_like(pa)
    gb = np.zeros_like(pb)
    np.put_along_axis(ga, oa, coef, axis=0)
    np.put_along_axis(gb, ob, -coef, axis=0)
    return val, ga @ directions, gb @ directions


def sw_subgradient(ZA, ZB, cfg: SwConfig | None = None, *, directions=None, rng=None):
    """Gradient of :func:`dsgeom.distance.sliced_w2` w.r.t. ``ZA`` (same direction draw)."""
    ZA = np.asarray(ZA, dtype=np.float64)
    if directions is None:
        cfg = cfg or SwConfig()
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        directions = random_directions(ZA.shape[1], cfg.L, rng)
    return sw_with_grads(ZA, ZB, directions)[1]


# --------------------------------------------------------------------------
# optimizer

def global_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_by_global_norm(grads, max_norm: float):
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        grads = [g * scale for g in grads]
    return grads, norm


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.lr, (self.b1, self.b2), self.eps = lr, betas, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        """Update ``params`` in place."""
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# --------------------------------------------------------------------------
# training

@dataclass
class _ViewPass:
    X1: np.ndarray
    X2: np.ndarray
    tape1: object
    tape2: object
    labels: np.ndarray | None
    g1: np.ndarray = None
    g2: np.ndarray = None


def _sample_rows(rng, n, m):
    if m >= n:
        return np.arange(n)
    return np.sort(rng.choice(n, size=m, replace=False))


def _batch_sw(passes, sw: SwConfig, rng):
    """Label-aware SW matrix on view-1 outputs plus what is needed to backprop it."""
    B = len(passes)
    D = np.zeros((B, B))
    cells = {}
    d = passes[0].X1.shape[1]
    for a in range(B):
        for b in range(a + 1, B):
            pa, pb = passes[a], passes[b]
            groups = []
            if pa.labels is not None and pb.labels is not None:
                shared = sorted(set(np.unique(pa.labels)) & set(np.unique(pb.labels)) - {-1})
                groups = [(np.flatnonzero(pa.labels == c), np.flatnonzero(pb.labels == c)) for c in shared]
            if not groups:
                groups = [(np.arange(pa.X1.shape[0]), np.arange(pb.X1.shape[0]))]
            vals, back = [], []
            for ia, ib in groups:
                k = min(len(ia), len(ib), sw.M)
                ra = ia[np.sort(rng.choice(len(ia), size=k, replace=False))]
                rb = ib[np.sort(rng.choice(len(ib), size=k, replace=False))]
                U = random_directions(d, sw.L, rng)
                v, ga, gb = sw_with_grads(pa.X1[ra], pb.X1[rb], U)
                vals.append(v)
                back.append((ra, rb, ga, gb))
            D[a, b] = D[b, a] = float(np.mean(vals))
            cells[a, b] = back
    return D, cells


def batch_objective(head: MetricHead, batch, Pb, cfg: CdeConfig, rng):
    """Loss breakdown and parameter gradients for one batch of datasets."""
    lam = cfg.lambdas
    tau = cfg.tau
    passes = []
    for ds in batch:
        idx = _sample_rows(rng, ds.n, cfg.samples_per_dataset)
        X = ds.Z[idx]
        X1, t1 = head_forward(head, X, cfg.view, rng, tape=True)
        X2, t2 = head_forward(head, X, cfg.view, rng, tape=True)
        labels = None if ds.labels is None else ds.labels[idx]
        passes.append(_ViewPass(X1, X2, t1, t2, labels, np.zeros_like(X1), np.zeros_like(X2)))
    U = np.stack([dataset_centroid(p.X1) for p in passes])
    V = np.stack([dataset_centroid(p.X2) for p in passes])
    gU = np.zeros_like(U)
    gV = np.zeros_like(V)
    out = LossBreakdown()
    skipped = []

    if lam["list"] > 0:
        rows, g = _teacher_kl(-Pb / tau, U, tau)
        out.list = float(rows.mean())
        out.rows["list"] = rows
        gU += lam["list"] * g
    if lam["cons"] > 0:
        rows, g1, g2 = _consistency(U, V, tau)
        out.cons = float(rows.sum() / (2 * rows.size))
        out.rows["cons"] = rows
        gU += lam["cons"] * g1
        gV += lam["cons"] * g2
    if lam["corr"] > 0 or lam["distill"] > 0:
        Dsw, cells = _batch_sw(passes, cfg.sw, rng)
        if lam["distill"] > 0:
            rows, g = _teacher_kl(-Dsw / tau, U, tau)
            out.distill = float(rows.mean())
            out.rows["distill"] = rows
            gU += lam["distill"] * g
        if lam["corr"] > 0:
            try:
                val, gx = corr_loss(upper_triangle(Dsw), upper_triangle(symmetrize_values(Pb)))
            except ZeroVarianceError:
                log.warning("zero variance in correlation term; skipping it for this step")
                skipped.append("corr")
            else:
                out.corr = val
                iu = np.triu_indices(len(passes), 1)
                for (a, b), g_ab in zip(zip(*iu), gx):
                    back = cells[a, b]
                    w = lam["corr"] * g_ab / len(back)
                    for ra, rb, ga, gb in back:
                        np.add.at(passes[a].g1, ra, w * ga)
                        np.add.at(passes[b].g1, rb, w * gb)
    out.skipped = tuple(skipped)
    out.total = out.weighted_total(lam)

    grads = [np.zeros_like(p) for p in head.params()]
    for i, p in enumerate(passes):
        p.g1 += centroid_backward(p.X1, gU[i])
        p.g2 += centroid_backward(p.X2, gV[i])
        for tape, g in ((p.tape1, p.g1), (p.tape2, p.g2)):
            if np.any(g):
                for acc, gi in zip(grads, head_backward(head, tape, g)):
                    acc += gi
    return out, grads


def symmetrize_values(Pv):
    Pv = np.asarray(Pv, dtype=np.float64)
    return 0.5 * (Pv + Pv.T)


def _batches(order, size):
    return np.array_split(order, math.ceil(len(order) / size))


def train(library, P: TransferMatrix, head: MetricHead, cfg: CdeConfig | None = None, *, callback=None):
    """Refine ``head`` on ``library`` against transfer matrix ``P``.

    Each epoch shuffles the datasets into batches of about
    ``cfg.batch_datasets``; each batch is one Adam step with global-norm
    clipping. Returns the trained copy of the head and one log record per
    step. Deterministic for a fixed config and seed.
    """
    cfg = cfg or CdeConfig()
    library = list(library)
    ids = [ds.dataset_id for ds in library]
    if len(library) < 3:
        raise DataError(f"training needs at least 3 datasets, got {len(library)}")
    P = P if list(P.dataset_ids) == ids else P.reindex(ids)
    for ds in library:
        if ds.d != head.in_dim:
            raise ShapeMismatchError(f"{ds.dataset_id}: embedding dim {ds.d} != head input dim {head.in_dim}")
    head = head.copy()
    records = []
    if cfg.epochs == 0:
        return head, records
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(head.params(), cfg.lr, cfg.betas, cfg.eps)
    step = 0
    for epoch in range(cfg.epochs):
        for batch in _batches(rng.permutation(len(library)), cfg.batch_datasets):
            batch = np.sort(batch)
            try:
                losses, grads = batch_objective(head, [library[i] for i in batch],
                                                P.values[np.ix_(batch, batch)], cfg, rng)
            except NonFiniteError as exc:
                raise DivergedTrainingError(f"epoch {epoch} step {step}: {exc}") from exc
            grads, norm = clip_by_global_norm(grads, cfg.clip_norm)
            if not (math.isfinite(losses.total) and math.isfinite(norm)):
                raise DivergedTrainingError(f"epoch {epoch} step {step}: non-finite loss or gradient")
            opt.step(head.params(), grads)
            rec = {"epoch": epoch, "step": step, "list": losses.list, "cons": losses.cons, "corr": losses.corr,
                   "distill": losses.distill, "total": losses.total, "grad_norm": norm}
            if losses.skipped:
                rec["skipped"] = list(losses.skipped)
            records.append(rec)
            if callback is not None:
                callback(rec, head)
            step += 1
    return head, records


def evaluation_config(cfg: CdeConfig) -> CdeConfig:
    """Same config with stochastic views switched off."""
    return replace(cfg, view=ViewConfig(0.0, 0.0, cfg.view.seed))


def probe_loss(head: MetricHead, library, P: TransferMatrix, cfg: CdeConfig | None = None, seed: int = 0) -> LossBreakdown:
    """Objective on the whole library with views off and a fixed sampling seed.

    Unlike the per-step training losses this is a deterministic function of
    the head, so it is the quantity to watch for a learning-curve trend.
    """
    cfg = evaluation_config(cfg or CdeConfig())
    library = list(library)
    ids = [ds.dataset_id for ds in library]
    P = P if list(P.dataset_ids) == ids else P.reindex(ids)
    out, _ = batch_objective(head, library, P.values, cfg, np.random.default_rng(seed))
    return out
