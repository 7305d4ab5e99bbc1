"""Per-sample encoders and the trainable metric head.

The encoder is frozen: either embeddings are read from ``DGE1`` files or a
toy linear projection stands in for a pretrained model. The metric head is a
small MLP (affine + activation per hidden layer, affine output) whose forward
pass can record a tape for manual backpropagation.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import EmbeddingSet, read_embeddings
from .errors import DegenerateCentroidError, NonFiniteError, ParseError, ShapeMismatchError

HEAD_MAGIC = b"DGH1"
_ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True, eq=False)
class EncoderSpec:
    kind: str = "file_backed"
    W: np.ndarray | None = None
    seed: int | None = None

    def __post_init__(self):
        if self.kind not in ("file_backed", "toy_linear"):
            raise ParseError(f"unknown encoder kind {self.kind!r}")
        if self.kind == "toy_linear":
            if self.W is None:
                raise ParseError("toy_linear encoder needs a projection matrix W")
            W = np.array(self.W, dtype=np.float64)
            if W.ndim != 2 or W.shape[1] < 1:
                raise ShapeMismatchError(f"W must be d_raw x d_emb, got shape {W.shape}")
            if not np.all(np.isfinite(W)):
                raise NonFiniteError("encoder W has non-finite entries")
            W.setflags(write=False)
            object.__setattr__(self, "W", W)

    @classmethod
    def toy_linear(cls, d_raw: int, d_emb: int, seed: int = 0) -> "EncoderSpec":
        rng = np.random.default_rng(seed)
        W = rng.standard_normal((d_raw, d_emb)) / np.sqrt(d_raw)
        return cls("toy_linear", W, seed)

    @classmethod
    def from_dict(cls, obj: dict) -> "EncoderSpec":
        kind = obj.get("kind", "file_backed")
        if kind == "toy_linear" and "W" not in obj:
            return cls.toy_linear(int(obj["d_raw"]), int(obj["d_emb"]), int(obj.get("seed", 0)))
        return cls(kind, obj.get("W"), obj.get("seed"))

    def digest(self) -> str:
        h = hashlib.sha256(self.kind.encode())
        if self.W is not None:
            h.update(struct.pack("<II", *self.W.shape))
            h.update(np.ascontiguousarray(self.W, dtype="<f8").tobytes())
        return h.hexdigest()[:16]


def encode(spec: EncoderSpec, raw) -> np.ndarray:
    """Map raw samples (array or ``DGE1`` path) to embeddings; deterministic."""
    X = read_embeddings(raw) if isinstance(raw, (str, Path)) else np.asarray(raw, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeMismatchError(f"raw input must be 2-D, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise NonFiniteError("raw input contains non-finite values")
    if spec.kind == "file_backed":
        return X
    if X.shape[1] != spec.W.shape[0]:
        raise ShapeMismatchError(f"raw dim {X.shape[1]} does not match encoder input dim {spec.W.shape[0]}")
    return X @ spec.W


@dataclass(frozen=True)
class ViewConfig:
    dropout_p: float = 0.1
    noise_sigma: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")


@dataclass(eq=False)
class MetricHead:
    """MLP parameters. ``weights[k]`` has shape ``(in_k, out_k)``; inputs are row vectors."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ParseError(f"activation must be one of {_ACTIVATIONS}")
        if not self.weights or len(self.weights) != len(self.biases):
            raise ShapeMismatchError("head needs matching, non-empty weight and bias lists")
        self.weights = [np.array(W, dtype=np.float64) for W in self.weights]
        self.biases = [np.array(b, dtype=np.float64).reshape(-1) for b in self.biases]
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape[0] != W.shape[1]:
                raise ShapeMismatchError(f"layer {k}: W {W.shape} and b {b.shape} do not fit")
            if k and W.shape[0] != self.weights[k - 1].shape[1]:
                raise ShapeMismatchError(f"layer {k} input {W.shape[0]} != previous output {self.weights[k - 1].shape[1]}")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise NonFiniteError(f"layer {k} has non-finite parameters")

    @classmethod
    def init(cls, in_dim: int, hidden=(64,), out_dim: int | None = None, activation: str = "relu",
             init: str = "identity", seed: int = 0) -> "MetricHead":
        """Build a head.

        ``init="identity"`` makes the untrained head an exact identity map
        (each coordinate routed through a ReLU pair, ``relu(x) - relu(-x)``),
        so training starts from the frozen geometry. It needs ``out_dim ==
        in_dim`` and every hidden width ``>= 2 * in_dim``; spare hidden units
        get small random input weights and zero output weights.
        ``init="random"`` uses He-normal weights and zero biases.
        """
        out_dim = in_dim if out_dim is None else out_dim
        dims = [in_dim, *hidden, out_dim]
        rng = np.random.default_rng(seed)
        if init == "random":
            Ws = [rng.standard_normal((a, b)) * np.sqrt(2.0 / a) for a, b in zip(dims[:-1], dims[1:])]
            return cls(Ws, [np.zeros(b) for b in dims[1:]], activation)
        if init != "identity":
            raise ParseError(f"unknown init {init!r}")
        if activation != "relu" or out_dim != in_dim or any(h < 2 * in_dim for h in hidden):
            raise ParseError("identity init needs relu, out_dim == in_dim and hidden widths >= 2 * in_dim")
        if not hidden:
            return cls([np.eye(in_dim)], [np.zeros(in_dim)], activation)
        d = in_dim
        pair = np.hstack([np.eye(d), -np.eye(d)])
        Ws = []
        W0 = np.zeros((d, hidden[0]))
        W0[:, : 2 * d] = pair
        W0[:, 2 * d:] = 0.01 * rng.standard_normal((d, hidden[0] - 2 * d))
        Ws.append(W0)
        for a, b in zip(hidden[:-1], hidden[1:]):
            Wk = np.zeros((a, b))
            Wk[: 2 * d, : 2 * d] = np.eye(2 * d)
            Wk[:, 2 * d:] = 0.01 * rng.standard_normal((a, b - 2 * d))
            Ws.append(Wk)
        Wl = np.zeros((hidden[-1], d))
        Wl[: 2 * d] = pair.T
        Ws.append(Wl)
        return cls(Ws, [np.zeros(b) for b in dims[1:]], activation)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def params(self) -> list[np.ndarray]:
        """Parameters in a fixed order: W0, b0, W1, b1, ..."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def set_params(self, params) -> None:
        params = list(params)
        self.weights = [np.array(p, dtype=np.float64) for p in params[0::2]]
        self.biases = [np.array(p, dtype=np.float64) for p in params[1::2]]

    def copy(self) -> "MetricHead":
        return MetricHead([W.copy() for W in self.weights], [b.copy() for b in self.biases], self.activation)

    def digest(self) -> str:
        h = hashlib.sha256(self.activation.encode())
        for p in self.params():
            h.update(struct.pack("<I", p.ndim) + struct.pack(f"<{p.ndim}I", *p.shape))
            h.update(np.ascontiguousarray(p, dtype="<f8").tobytes())
        return h.hexdigest()[:16]


def _act(name, a):
    return np.maximum(a, 0.0) if name == "relu" else np.tanh(a)


def _act_grad(name, a, h):
    # h = act(a), reused for tanh
    return (a > 0).astype(a.dtype) if name == "relu" else 1.0 - h * h


@dataclass
class HeadTape:
    inputs: list = field(default_factory=list)    # per-layer input (after additive noise)
    pre: list = field(default_factory=list)       # hidden pre-activations
    post: list = field(default_factory=list)      # hidden activations before dropout
    masks: list = field(default_factory=list)     # inverted-dropout scale masks, or None


def head_forward(h: MetricHead, Z, view: ViewConfig | None = None, rng=None, tape: bool = False):
    """Forward pass, optionally stochastic and optionally taped.

    With a view config, each layer's input gets additive N(0, noise_sigma^2)
    noise and each hidden activation gets an inverted-dropout mask; random
    numbers are drawn only for nonzero settings so the noiseless path is
    bit-identical to :func:`apply_head`.
    """
    X = np.asarray(Z, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != h.in_dim:
        raise ShapeMismatchError(f"input of shape {X.shape} does not fit head input dim {h.in_dim}")
    p = view.dropout_p if view is not None else 0.0
    sigma = view.noise_sigma if view is not None else 0.0
    rec = HeadTape() if tape else None
    last = h.n_layers - 1
    for k, (W, b) in enumerate(zip(h.weights, h.biases)):
        if sigma > 0:
            X = X + sigma * rng.standard_normal(X.shape)
        if rec is not None:
            rec.inputs.append(X)
        a = X @ W + b
        if k == last:
            X = a
            break
        act = _act(h.activation, a)
        mask = None
        if p > 0:
            mask = (rng.random(act.shape) >= p) / (1.0 - p)
            X = act * mask
        else:
            X = act
        if rec is not None:
            rec.pre.append(a)
            rec.post.append(act)
            rec.masks.append(mask)
    if not np.all(np.isfinite(X)):
        raise NonFiniteError("metric head produced non-finite output (diverged parameters?)")
    return (X, rec) if tape else X


def head_backward(h: MetricHead, rec: HeadTape, grad_out) -> list[np.ndarray]:
    """Gradients of a scalar w.r.t. ``h.params()`` given its gradient w.r.t. the head output."""
    g = np.asarray(grad_out, dtype=np.float64)
    grads = [None] * (2 * h.n_layers)
    for k in range(h.n_layers - 1, -1, -1):
        X = rec.inputs[k]
        grads[2 * k] = X.T @ g
        grads[2 * k + 1] = g.sum(axis=0)
        if k == 0:
            break
        g = g @ h.weights[k].T
        if rec.masks[k - 1] is not None:
            g = g * rec.masks[k - 1]
        g = g * _act_grad(h.activation, rec.pre[k - 1], rec.post[k - 1])
    return grads


def apply_head(h: MetricHead, Z) -> np.ndarray:
    return head_forward(h, Z)


def stochastic_views(h: MetricHead, Z, cfg: ViewConfig):
    """Two independent stochastic forward passes, reproducible from ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    return head_forward(h, Z, cfg, rng), head_forward(h, Z, cfg, rng)


def dataset_centroid(Z) -> np.ndarray:
    m = np.asarray(Z, dtype=np.float64).mean(axis=0)
    norm = np.linalg.norm(m)
    if not norm > 1e-12:
        raise DegenerateCentroidError("dataset mean is the zero vector; centroid direction undefined")
    return m / norm


def centroid_backward(Z, grad_u) -> np.ndarray:
    """Per-row gradient of a scalar through ``dataset_centroid``."""
    Z = np.asarray(Z, dtype=np.float64)
    m = Z.mean(axis=0)
    norm = np.linalg.norm(m)
    u = m / norm
    gm = (grad_u - u * (u @ grad_u)) / norm
    return np.broadcast_to(gm / Z.shape[0], Z.shape).copy()


def embed_library(library, head: MetricHead | None) -> list[EmbeddingSet]:
    if head is None:
        return list(library)
    return [ds.replace(Z=apply_head(head, ds.Z)) for ds in library]


# --------------------------------------------------------------------------
# checkpoint: "DGH1", u32 layer count, u32 activation code, per-layer (u32 in,
# u32 out), then per layer W (row-major) and b as little-endian float32

def save_head(path, h: MetricHead) -> None:
    with open(path, "wb") as fh:
        fh.write(HEAD_MAGIC)
        fh.write(struct.pack("<II", h.n_layers, _ACTIVATIONS.index(h.activation)))
        for W in h.weights:
            fh.write(struct.pack("<II", *W.shape))
        for W, b in zip(h.weights, h.biases):
            fh.write(np.ascontiguousarray(W, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f4").tobytes())


def load_head(path) -> MetricHead:
    data = Path(path).read_bytes()
    if data[:4] != HEAD_MAGIC:
        raise ParseError(f"{path}: not a DGH1 head checkpoint")
    try:
        n_layers, act = struct.unpack_from("<II", data, 4)
        off = 12
        dims = []
        for _ in range(n_layers):
            dims.append(struct.unpack_from("<II", data, off))
            off += 8
        Ws, bs = [], []
        for a, b in dims:
            Ws.append(np.frombuffer(data, "<f4", a * b, off).reshape(a, b).astype(np.float64))
            off += 4 * a * b
            bs.append(np.frombuffer(data, "<f4", b, off).astype(np.float64))
            off += 4 * b
    except (struct.error, ValueError) as exc:
        raise ParseError(f"{path}: truncated head checkpoint") from exc
    if off != len(data):
        raise ParseError(f"{path}: trailing bytes in head checkpoint")
    return MetricHead(Ws, bs, _ACTIVATIONS[act])
