"""Data model and file formats shared by every other module.

Embedding files use a small binary layout (``DGE1`` magic, ``u32 n``,
``u32 d``, then ``n*d`` little-endian float32 values, row-major). Matrices
travel as CSV with dataset ids in the first row and first column; the
top-left cell is either ``.`` or a ``key=value;key=value`` metadata string.
"""
from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    DuplicateIdError,
    EmptyLibraryError,
    IdMismatchError,
    MissingFieldError,
    NonFiniteError,
    NonSquareError,
    ParseError,
    ShapeMismatchError,
)

EMBEDDING_MAGIC = b"DGE1"
ERROR_CONVENTION = "error_low_is_better"
SPLIT_TAGS = ("train", "holdout")

# labels equal to this value mark samples that keep their embedding but carry
# no class (see robustness.drop_labels(labels_only=True))
UNLABELED = -1


def _frozen(a, dtype=np.float64) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


def check_dataset_id(dataset_id: str) -> str:
    if not isinstance(dataset_id, str) or not dataset_id.strip():
        raise ParseError(f"dataset id must be a non-empty string, got {dataset_id!r}")
    if dataset_id == "." or any(ch in dataset_id for ch in ",\n\r\""):
        raise ParseError(f"dataset id {dataset_id!r} is not allowed")
    return dataset_id


@dataclass(frozen=True, eq=False)
class EmbeddingSet:
    """One dataset: an ``n x d`` embedding matrix with optional class labels."""

    dataset_id: str
    Z: np.ndarray
    labels: np.ndarray | None = None
    label_names: tuple[str, ...] | None = None

    def __post_init__(self):
        check_dataset_id(self.dataset_id)
        Z = np.asarray(self.Z, dtype=np.float64)
        if Z.ndim != 2 or Z.shape[0] < 1 or Z.shape[1] < 1:
            raise ShapeMismatchError(f"{self.dataset_id}: Z must be a non-empty 2-D matrix, got shape {Z.shape}")
        if not np.all(np.isfinite(Z)):
            raise NonFiniteError(f"{self.dataset_id}: embeddings contain non-finite values")
        object.__setattr__(self, "Z", _frozen(Z))
        if self.labels is not None:
            raw = np.asarray(self.labels)
            if raw.ndim != 1 or raw.shape[0] != Z.shape[0]:
                raise ShapeMismatchError(
                    f"{self.dataset_id}: {raw.shape[0] if raw.ndim == 1 else raw.shape} labels for {Z.shape[0]} samples"
                )
            if raw.size and not np.all(np.equal(np.mod(raw, 1), 0)):
                raise ParseError(f"{self.dataset_id}: labels must be integers")
            lab = raw.astype(np.int64)
            if np.any(lab < UNLABELED):
                raise ParseError(f"{self.dataset_id}: labels must be >= 0 (or -1 for unlabeled)")
            object.__setattr__(self, "labels", _frozen(lab, dtype=np.int64))
        if self.label_names is not None:
            object.__setattr__(self, "label_names", tuple(str(x) for x in self.label_names))

    @property
    def n(self) -> int:
        return self.Z.shape[0]

    @property
    def d(self) -> int:
        return self.Z.shape[1]

    @property
    def is_labeled(self) -> bool:
        return self.labels is not None and bool(np.any(self.labels != UNLABELED))

    @cached_property
    def class_index(self) -> dict[int, np.ndarray]:
        """Map class id -> sorted sample indices (unlabeled samples excluded)."""
        if self.labels is None:
            return {}
        out = {}
        for c in np.unique(self.labels):
            if c == UNLABELED:
                continue
            idx = np.flatnonzero(self.labels == c)
            idx.setflags(write=False)
            out[int(c)] = idx
        return out

    @property
    def classes(self) -> list[int]:
        return sorted(self.class_index)

    def class_matrix(self, c: int) -> np.ndarray:
        return self.Z[self.class_index[c]]

    def replace(self, **changes) -> "EmbeddingSet":
        kw = dict(dataset_id=self.dataset_id, Z=self.Z, labels=self.labels, label_names=self.label_names)
        kw.update(changes)
        return EmbeddingSet(**kw)


def shared_classes(A: EmbeddingSet, B: EmbeddingSet) -> list[int]:
    return sorted(set(A.class_index) & set(B.class_index))


@dataclass(frozen=True, eq=False)
class TransferMatrix:
    """Directed ``N x N`` transfer-error matrix: entry (i, j) is the error of a
    model trained on dataset i and evaluated on dataset j (lower is better)."""

    values: np.ndarray
    dataset_ids: tuple[str, ...]
    convention: str = ERROR_CONVENTION

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise NonSquareError(f"transfer matrix must be square, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise NonFiniteError("transfer matrix contains non-finite entries")
        ids = tuple(check_dataset_id(i) for i in self.dataset_ids)
        if len(ids) != v.shape[0]:
            raise ShapeMismatchError(f"{len(ids)} ids for a {v.shape[0]}x{v.shape[0]} matrix")
        if len(set(ids)) != len(ids):
            raise DuplicateIdError("duplicate dataset ids in transfer matrix")
        if self.convention != ERROR_CONVENTION:
            raise ParseError(f"unsupported convention {self.convention!r}")
        object.__setattr__(self, "values", _frozen(v))
        object.__setattr__(self, "dataset_ids", ids)

    @property
    def N(self) -> int:
        return len(self.dataset_ids)

    def index_of(self, dataset_id: str) -> int:
        try:
            return self.dataset_ids.index(dataset_id)
        except ValueError:
            raise IdMismatchError(f"unknown dataset id {dataset_id!r}") from None

    def reindex(self, ids: Sequence[str]) -> "TransferMatrix":
        perm = _permutation(self.dataset_ids, ids)
        return TransferMatrix(self.values[np.ix_(perm, perm)], tuple(ids), self.convention)

    def subset(self, idx: Sequence[int]) -> "TransferMatrix":
        idx = list(idx)
        return TransferMatrix(self.values[np.ix_(idx, idx)], tuple(self.dataset_ids[i] for i in idx))


@dataclass(frozen=True, eq=False)
class DistanceMatrix:
    """Nonnegative ``N x N`` dataset distances with a zero diagonal.

    ``kind="directed"`` matrices are read source-row, target-column.
    """

    values: np.ndarray
    kind: str
    metric_tag: str
    dataset_ids: tuple[str, ...]
    cfg_hash: str = ""

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise NonSquareError(f"distance matrix must be square, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise NonFiniteError("distance matrix contains non-finite entries")
        if np.any(v < 0):
            raise ParseError("distance matrix has negative entries")
        if np.any(np.diag(v) != 0):
            raise ParseError("distance matrix diagonal must be zero")
        if self.kind not in ("symmetric", "directed"):
            raise ParseError(f"unknown distance kind {self.kind!r}")
        if self.kind == "symmetric" and not np.array_equal(v, v.T):
            raise ParseError("symmetric distance matrix is not exactly symmetric")
        ids = tuple(check_dataset_id(i) for i in self.dataset_ids)
        if len(ids) != v.shape[0]:
            raise ShapeMismatchError(f"{len(ids)} ids for a {v.shape[0]}x{v.shape[0]} matrix")
        if len(set(ids)) != len(ids):
            raise DuplicateIdError("duplicate dataset ids in distance matrix")
        object.__setattr__(self, "values", _frozen(v))
        object.__setattr__(self, "dataset_ids", ids)

    @property
    def N(self) -> int:
        return len(self.dataset_ids)

    def index_of(self, dataset_id: str) -> int:
        try:
            return self.dataset_ids.index(dataset_id)
        except ValueError:
            raise IdMismatchError(f"unknown dataset id {dataset_id!r}") from None

    def reindex(self, ids: Sequence[str]) -> "DistanceMatrix":
        perm = _permutation(self.dataset_ids, ids)
        return DistanceMatrix(self.values[np.ix_(perm, perm)], self.kind, self.metric_tag, tuple(ids), self.cfg_hash)


def _permutation(have: Sequence[str], want: Sequence[str]) -> list[int]:
    if len(set(want)) != len(want):
        raise DuplicateIdError("duplicate ids in requested order")
    if set(have) != set(want) or len(have) != len(want):
        missing = sorted(set(want) - set(have))
        extra = sorted(set(have) - set(want))
        raise IdMismatchError(f"dataset ids differ (missing {missing}, unexpected {extra})")
    pos = {k: i for i, k in enumerate(have)}
    return [pos[k] for k in want]


def symmetrize(P: TransferMatrix) -> TransferMatrix:
    v = P.values
    return TransferMatrix(0.5 * (v + v.T), P.dataset_ids, P.convention)


def upper_triangle(M) -> np.ndarray:
    """Entries ``M[i, j]`` with ``i < j`` in row-major order."""
    M = np.asarray(getattr(M, "values", M))
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise NonSquareError(f"upper_triangle needs a square matrix, got shape {M.shape}")
    iu = np.triu_indices(M.shape[0], k=1)
    return M[iu]


# --------------------------------------------------------------------------
# manifest

@dataclass(frozen=True)
class ManifestEntry:
    dataset_id: str
    embedding_path: Path | None = None
    raw_path: Path | None = None
    labels_path: Path | None = None

    @property
    def data_path(self) -> Path:
        return self.embedding_path if self.embedding_path is not None else self.raw_path


@dataclass(frozen=True)
class LibraryManifest:
    entries: tuple[ManifestEntry, ...]
    split_tags: Mapping[str, str] = field(default_factory=dict)
    root: Path = Path(".")

    @property
    def ids(self) -> list[str]:
        return [e.dataset_id for e in self.entries]

    def split(self, tag: str) -> list[ManifestEntry]:
        """Entries tagged ``tag``; untagged manifests count every entry as train."""
        if not self.split_tags:
            return list(self.entries) if tag == "train" else []
        return [e for e in self.entries if self.split_tags.get(e.dataset_id) == tag]


def _check_path(value, what: str) -> Path:
    if not isinstance(value, str) or not value or "\x00" in value:
        raise ParseError(f"{what} must be a non-empty path string, got {value!r}")
    return Path(value)


def parse_manifest(obj, root: Path | str = ".") -> LibraryManifest:
    root = Path(root)
    if not isinstance(obj, dict) or "entries" not in obj:
        raise MissingFieldError("manifest needs an 'entries' list")
    raw_entries = obj["entries"]
    if not isinstance(raw_entries, list):
        raise ParseError("'entries' must be a list")
    if not raw_entries:
        raise EmptyLibraryError("manifest lists no datasets")
    entries, seen = [], set()
    for k, item in enumerate(raw_entries):
        if not isinstance(item, dict):
            raise ParseError(f"entry {k} is not an object")
        if "dataset_id" not in item:
            raise MissingFieldError(f"entry {k} has no dataset_id")
        did = check_dataset_id(item["dataset_id"])
        if did in seen:
            raise DuplicateIdError(f"duplicate dataset_id {did!r}")
        seen.add(did)
        emb, raw = item.get("embedding_path"), item.get("raw_path")
        if emb is None and raw is None:
            raise MissingFieldError(f"entry {did!r} needs embedding_path or raw_path")
        lab = item.get("labels_path")
        entries.append(ManifestEntry(
            dataset_id=did,
            embedding_path=None if emb is None else _check_path(emb, "embedding_path"),
            raw_path=None if raw is None else _check_path(raw, "raw_path"),
            labels_path=None if lab is None else _check_path(lab, "labels_path"),
        ))
    tags = obj.get("split_tags") or {}
    if not isinstance(tags, dict):
        raise ParseError("split_tags must be an object")
    for did, tag in tags.items():
        if did not in seen:
            raise IdMismatchError(f"split tag for unknown dataset {did!r}")
        if tag not in SPLIT_TAGS:
            raise ParseError(f"split tag {tag!r} for {did!r} is not one of {SPLIT_TAGS}")
    return LibraryManifest(tuple(entries), dict(tags), root)


def load_manifest(path) -> LibraryManifest:
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    return parse_manifest(obj, root=path.parent)


def manifest_to_dict(m: LibraryManifest) -> dict:
    entries = []
    for e in m.entries:
        item = {"dataset_id": e.dataset_id}
        if e.embedding_path is not None:
            item["embedding_path"] = e.embedding_path.as_posix()
        if e.raw_path is not None:
            item["raw_path"] = e.raw_path.as_posix()
        if e.labels_path is not None:
            item["labels_path"] = e.labels_path.as_posix()
        entries.append(item)
    out = {"entries": entries}
    if m.split_tags:
        out["split_tags"] = dict(m.split_tags)
    return out


def write_manifest(path, m: LibraryManifest) -> None:
    Path(path).write_text(json.dumps(manifest_to_dict(m), indent=2) + "\n")


# --------------------------------------------------------------------------
# binary embeddings and label files

def write_embeddings(path, Z) -> None:
    Z = np.asarray(Z)
    if Z.ndim != 2:
        raise ShapeMismatchError(f"embeddings must be 2-D, got shape {Z.shape}")
    n, d = Z.shape
    with open(path, "wb") as fh:
        fh.write(EMBEDDING_MAGIC)
        fh.write(struct.pack("<II", n, d))
        fh.write(np.ascontiguousarray(Z, dtype="<f4").tobytes())


def read_embeddings(path) -> np.ndarray:
    """Read a ``DGE1`` file as float64 (the float32 -> float64 widening is exact)."""
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != EMBEDDING_MAGIC:
        raise ParseError(f"{path}: not a DGE1 embedding file")
    n, d = struct.unpack("<II", data[4:12])
    expected = 12 + 4 * n * d
    if len(data) != expected:
        raise ParseError(f"{path}: expected {expected} bytes for {n}x{d}, found {len(data)}")
    return np.frombuffer(data, dtype="<f4", offset=12).reshape(n, d).astype(np.float64)


UNLABELED_TOKEN = str(UNLABELED)


def read_label_tokens(path) -> list[str]:
    lines = Path(path).read_text().splitlines()
    return [ln.strip() for ln in lines if ln.strip()]


def write_labels(path, labels: Iterable) -> None:
    Path(path).write_text("".join(f"{int(x)}\n" for x in labels))


def label_vocabulary(token_lists: Iterable[Sequence[str]]) -> list[str]:
    """Library-wide sorted label vocabulary (numeric order when all tokens are integers)."""
    vocab = set()
    for toks in token_lists:
        vocab.update(toks)
    vocab.discard(UNLABELED_TOKEN)
    try:
        return [str(v) for v in sorted(vocab, key=int)]
    except ValueError:
        return sorted(vocab)


def library_labels(manifest: LibraryManifest, entries: Sequence[ManifestEntry] | None = None):
    """Integer labels per dataset id under one library-wide vocabulary, plus that vocabulary."""
    entries = list(manifest.entries if entries is None else entries)
    tokens = {}
    for e in entries:
        if e.labels_path is not None:
            tokens[e.dataset_id] = read_label_tokens(manifest.root / e.labels_path)
    vocab = label_vocabulary(tokens.values())
    code = {tok: i for i, tok in enumerate(vocab)}
    code[UNLABELED_TOKEN] = UNLABELED
    codes = {did: np.array([code[t] for t in toks], dtype=np.int64) for did, toks in tokens.items()}
    return codes, vocab


def load_library(manifest: LibraryManifest, entries: Sequence[ManifestEntry] | None = None) -> list[EmbeddingSet]:
    """Load file-backed embedding sets; labels are remapped to one shared 0-based index."""
    entries = list(manifest.entries if entries is None else entries)
    codes, vocab = library_labels(manifest, entries)
    out = []
    for e in entries:
        if e.embedding_path is None:
            raise MissingFieldError(f"{e.dataset_id}: no embedding_path (raw data needs an encoder)")
        Z = read_embeddings(manifest.root / e.embedding_path)
        labels = codes.get(e.dataset_id)
        out.append(EmbeddingSet(e.dataset_id, Z, labels, tuple(vocab) if labels is not None else None))
    return out


# --------------------------------------------------------------------------
# matrix CSV

def _format_meta(meta: Mapping[str, str] | None) -> str:
    if not meta:
        return "."
    return ";".join(f"{k}={v}" for k, v in meta.items())


def _parse_meta(cell: str) -> dict[str, str]:
    cell = cell.strip()
    if cell in ("", "."):
        return {}
    out = {}
    for part in cell.split(";"):
        if not part:
            continue
        if "=" not in part:
            raise ParseError(f"malformed header flag {part!r}")
        k, v = part.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def write_matrix_csv(path, values, ids: Sequence[str], meta: Mapping[str, str] | None = None) -> None:
    """Write with shortest round-trip float repr so reloading is exact."""
    values = np.asarray(values, dtype=np.float64)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([_format_meta(meta), *ids])
    for i, did in enumerate(ids):
        w.writerow([did, *(repr(float(x)) for x in values[i])])
    Path(path).write_text(buf.getvalue())


def read_matrix_csv(path) -> tuple[np.ndarray, list[str], list[str], dict[str, str]]:
    """Return ``(values, row_ids, col_ids, meta)`` without reordering."""
    try:
        rows = list(csv.reader(io.StringIO(Path(path).read_text())))
    except csv.Error as exc:
        raise ParseError(f"{path}: {exc}") from exc
    rows = [r for r in rows if r]
    if len(rows) < 2:
        raise ParseError(f"{path}: matrix CSV needs a header and at least one row")
    meta = _parse_meta(rows[0][0])
    col_ids = [c.strip() for c in rows[0][1:]]
    row_ids, vals = [], []
    for r in rows[1:]:
        row_ids.append(r[0].strip())
        try:
            vals.append([float(x) for x in r[1:]])
        except ValueError as exc:
            raise ParseError(f"{path}: {exc}") from exc
    widths = {len(v) for v in vals}
    if len(widths) != 1 or widths.pop() != len(col_ids):
        raise ParseError(f"{path}: ragged rows")
    values = np.array(vals, dtype=np.float64)
    if values.shape[0] != values.shape[1]:
        raise NonSquareError(f"{path}: matrix is {values.shape[0]}x{values.shape[1]}")
    for did in row_ids + col_ids:
        check_dataset_id(did)
    if len(set(row_ids)) != len(row_ids) or len(set(col_ids)) != len(col_ids):
        raise DuplicateIdError(f"{path}: duplicate ids")
    if set(row_ids) != set(col_ids):
        raise IdMismatchError(f"{path}: row and column ids differ")
    return values, row_ids, col_ids, meta


def _aligned(values, row_ids, col_ids, ids):
    ids = list(row_ids if ids is None else ids)
    r = _permutation(row_ids, ids)
    c = _permutation(col_ids, ids)
    return values[np.ix_(r, c)], ids


def load_transfer_matrix(path, ids: Sequence[str] | None = None, accuracy: bool | None = None) -> TransferMatrix:
    """Load a transfer matrix permuted into ``ids`` order.

    Accuracy-type files (header flag ``convention=accuracy``)
    are converted to errors with ``e = 1 - a``.
    """
    values, row_ids, col_ids, meta = read_matrix_csv(path)
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"{path}: non-finite entry")
    values, ids = _aligned(values, row_ids, col_ids, ids)
    if accuracy is None:
        conv = meta.get("convention", "error")
        if conv not in ("error", "accuracy", ERROR_CONVENTION):
            raise ParseError(f"{path}: unknown convention {conv!r}")
        accuracy = conv == "accuracy"
    if accuracy:
        values = 1.0 - values
    return TransferMatrix(values, tuple(ids))


def write_transfer_matrix(path, P: TransferMatrix) -> None:
    write_matrix_csv(path, P.values, P.dataset_ids)


def load_distance_matrix(path, ids: Sequence[str] | None = None) -> DistanceMatrix:
    values, row_ids, col_ids, meta = read_matrix_csv(path)
    values, ids = _aligned(values, row_ids, col_ids, ids)
    kind = meta.get("kind") or ("symmetric" if np.array_equal(values, values.T) else "directed")
    return DistanceMatrix(values, kind, meta.get("metric", ""), tuple(ids), meta.get("cfg", ""))


def write_distance_matrix(path, D: DistanceMatrix) -> None:
    meta = {"kind": D.kind, "metric": D.metric_tag or "unknown"}
    if D.cfg_hash:
        meta["cfg"] = D.cfg_hash
    write_matrix_csv(path, D.values, D.dataset_ids, meta)
