"""Embedding/distance caches and the embed-then-distance cost decomposition.

Every dataset is embedded once per (encoder, head) pair and the result is
reused by all pairs that involve it, so the total cost splits into an
embedding stage linear in the number of datasets and a distance stage over
pairs.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .core import (
    DistanceMatrix,
    EmbeddingSet,
    LibraryManifest,
    library_labels,
    read_matrix_csv,
    write_distance_matrix,
)
from .encoder import EncoderSpec, MetricHead, apply_head, encode
from .errors import MissingFieldError

log = logging.getLogger(__name__)


class StageTimer:
    """Wall-clock accumulator for the ``embed`` and ``dist`` stages."""

    def __init__(self):
        self.t0 = time.perf_counter()
        self.stages = {"embed": 0.0, "dist": 0.0}

    @contextmanager
    def stage(self, name):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.stages[name] = self.stages.get(name, 0.0) + time.perf_counter() - start

    def report(self) -> dict:
        return {"t_embed": self.stages["embed"], "t_dist": self.stages["dist"],
                "t_total": time.perf_counter() - self.t0}


def _file_stamp(path: Path) -> str:
    st = os.stat(path)
    return f"{st.st_size}:{st.st_mtime_ns}"


def _sha(*parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(str(p).encode())
        h.update(b"\x1f")
    return h.hexdigest()[:24]


class Cache:
    """On-disk cache of embeddings (``.npy``, float64) and distance matrices (CSV).

    Keys hash the encoder digest, dataset id, head digest and the size and
    mtime of the source file; distance keys add the metric tag, the config
    hash and every member's embedding key. ``root=None`` disables caching.
    """

    def __init__(self, root=None):
        self.root = None if root is None else Path(root)
        self.hits = 0
        self.misses = 0
        if self.root is not None:
            (self.root / "emb").mkdir(parents=True, exist_ok=True)
            (self.root / "dist").mkdir(parents=True, exist_ok=True)

    @staticmethod
    def embedding_key(encoder_digest, dataset_id, head_digest, stamp) -> str:
        return _sha("emb", encoder_digest, dataset_id, head_digest, stamp)

    @staticmethod
    def distance_key(metric_tag, cfg_hash, emb_keys) -> str:
        return _sha("dist", metric_tag, cfg_hash, *emb_keys)

    def get_embedding(self, key):
        if self.root is None:
            return None
        path = self.root / "emb" / f"{key}.npy"
        if not path.exists():
            self.misses += 1
            return None
        self.hits += 1
        return np.load(path)

    def put_embedding(self, key, Z) -> None:
        if self.root is not None:
            tmp = self.root / "emb" / f"{key}.tmp.npy"
            np.save(tmp, np.ascontiguousarray(Z, dtype=np.float64))
            tmp.replace(self.root / "emb" / f"{key}.npy")

    def get_distance(self, key):
        if self.root is None:
            return None
        path = self.root / "dist" / f"{key}.csv"
        if not path.exists():
            return None
        values, rows, _, meta = read_matrix_csv(path)
        return DistanceMatrix(values, meta.get("kind", "symmetric"), meta.get("metric", ""), tuple(rows),
                              meta.get("cfg", ""))

    def put_distance(self, key, D: DistanceMatrix) -> None:
        if self.root is not None:
            write_distance_matrix(self.root / "dist" / f"{key}.csv", D)


def embed_manifest(manifest: LibraryManifest, encoder: EncoderSpec | None = None, head: MetricHead | None = None,
                   cache: Cache | None = None, timer: StageTimer | None = None, entries=None):
    """Embed (or load) every entry once; returns ``(library, embedding_keys)``.

    Entries with ``embedding_path`` are already embedded and only pass
    through the head; entries with ``raw_path`` go through ``encoder`` first.
    """
    entries = list(manifest.entries if entries is None else entries)
    cache = cache or Cache(None)
    timer = timer or StageTimer()
    enc_digest = "none" if encoder is None else encoder.digest()
    head_digest = "none" if head is None else head.digest()
    codes, vocab = library_labels(manifest, entries)
    library, keys = [], []
    with timer.stage("embed"):
        for e in entries:
            src = manifest.root / e.data_path
            key = Cache.embedding_key(enc_digest if e.embedding_path is None else "file", e.dataset_id,
                                      head_digest, _file_stamp(src))
            Z = cache.get_embedding(key)
            if Z is None:
                if e.embedding_path is not None:
                    Z = encode(EncoderSpec("file_backed"), src)
                elif encoder is None:
                    raise MissingFieldError(f"{e.dataset_id}: raw_path entries need an encoder")
                else:
                    Z = encode(encoder, src)
                if head is not None:
                    Z = apply_head(head, Z)
                cache.put_embedding(key, Z)
            labels = codes.get(e.dataset_id)
            library.append(EmbeddingSet(e.dataset_id, Z, labels, tuple(vocab) if labels is not None else None))
            keys.append(key)
    return library, keys


def cached_distance(library, emb_keys, compute, metric_tag: str, cfg_hash: str, cache: Cache | None = None,
                    timer: StageTimer | None = None) -> DistanceMatrix:
    """Run ``compute(library)`` unless an identical matrix is cached."""
    cache = cache or Cache(None)
    timer = timer or StageTimer()
    key = Cache.distance_key(metric_tag, cfg_hash, emb_keys)
    with timer.stage("dist"):
        D = cache.get_distance(key)
        if D is None:
            D = compute(library)
            cache.put_distance(key, D)
    return D


def load_encoder(path) -> EncoderSpec:
    """Encoder description from a JSON file (``kind``, optional ``W`` or ``d_raw``/``d_emb``/``seed``)."""
    return EncoderSpec.from_dict(json.loads(Path(path).read_text()))
