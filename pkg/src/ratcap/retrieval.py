"""Knowledge retriever: embed feature grids, search the external memory, return captions."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .hnsw import HnswIndex
from .metrics import METRIC_NAMES, IdfTable, sentence_scores

log = logging.getLogger(__name__)

AGGREGATIONS = ("mean", "max", "l2norm_sum")
DATASTORE_FORMAT = "ratcap-datastore v1"


class RetrievalError(ValueError):
    pass


def embed_aggregate(grid, method: str = "mean") -> np.ndarray:
    """Collapse a ``[P, d_feat]`` feature grid into one retrieval embedding."""
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim != 2 or g.shape[0] == 0:
        raise RetrievalError(f"feature grid must be a non-empty [P, d] array, got shape {g.shape}")
    if method == "mean":
        return g.mean(axis=0)
    if method == "max":
        return g.max(axis=0)
    if method == "l2norm_sum":
        norms = np.linalg.norm(g, axis=1)
        keep = norms > 0
        if not keep.any():
            raise RetrievalError("l2norm_sum of an all-zero grid has no direction")
        s = (g[keep] / norms[keep, None]).sum(axis=0)
        n = np.linalg.norm(s)
        if n == 0:
            raise RetrievalError("l2norm_sum: normalized rows cancel to a zero embedding")
        return s / n
    raise RetrievalError(f"unknown aggregation {method!r}; expected one of {AGGREGATIONS}")


def relevance(a, b) -> float:
    """Inner-product similarity between two embeddings."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise RetrievalError(f"embedding dims differ: {a.shape} vs {b.shape}")
    return float(a @ b)


@dataclass
class Datastore:
    """External memory: image id -> (embedding, captions), in insertion order."""

    ids: list[str]
    embeddings: np.ndarray
    captions: list[list[str]]
    aggregation: str = "mean"
    _row: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.aggregation not in AGGREGATIONS:
            raise RetrievalError(f"unknown aggregation {self.aggregation!r}")
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] != len(self.ids):
            raise RetrievalError("embeddings must be [n_items, dim] matching ids")
        if len(self.captions) != len(self.ids):
            raise RetrievalError("one caption list per image required")
        self._row = {}
        for i, image_id in enumerate(self.ids):
            if image_id in self._row:
                raise RetrievalError(f"duplicate image id {image_id!r}")
            if not self.captions[i]:
                raise RetrievalError(f"image {image_id!r} has no captions")
            self._row[image_id] = i
        if not np.all(np.isfinite(self.embeddings)):
            raise RetrievalError("non-finite embedding entries")

    @classmethod
    def from_grids(cls, items: Iterable[tuple[str, np.ndarray, Sequence[str]]], aggregation: str = "mean"):
        ids, embs, caps = [], [], []
        for image_id, grid, captions in items:
            ids.append(image_id)
            embs.append(embed_aggregate(grid, aggregation))
            caps.append(list(captions))
        if not ids:
            raise RetrievalError("datastore needs at least one item")
        dims = {e.shape for e in embs}
        if len(dims) != 1:
            raise RetrievalError(f"mixed embedding dims {sorted(dims)}")
        return cls(ids, np.stack(embs), caps, aggregation)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def row(self, image_id: str) -> int:
        return self._row[image_id]

    def captions_of(self, image_id: str) -> list[str]:
        return self.captions[self._row[image_id]]

    # -- persistence: JSON lines, header first -----------------------------------
    def to_jsonl(self) -> str:
        lines = [json.dumps({"format": DATASTORE_FORMAT, "aggregation": self.aggregation, "dim": self.dim, "count": len(self)})]
        for image_id, emb, caps in zip(self.ids, self.embeddings, self.captions):
            lines.append(json.dumps({"image_id": image_id, "embedding": emb.tolist(), "captions": caps}))
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Datastore":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        head = json.loads(lines[0])
        if head.get("format") != DATASTORE_FORMAT:
            raise RetrievalError(f"{path}: not a ratcap datastore")
        rows = [json.loads(line) for line in lines[1:] if line.strip()]
        return cls(
            [r["image_id"] for r in rows],
            np.array([r["embedding"] for r in rows], dtype=np.float64).reshape(len(rows), head["dim"]),
            [r["captions"] for r in rows],
            head["aggregation"],
        )

    def checksum(self) -> str:
        return hashlib.sha256(self.to_jsonl().encode("utf-8")).hexdigest()


@dataclass
class Neighbors:
    ids: list[str]
    scores: list[float]
    short: bool = False  # fewer results than requested

    def __iter__(self):
        return iter(self.ids)

    def __len__(self) -> int:
        return len(self.ids)


def _rank(store: Datastore, rows: np.ndarray, scores: np.ndarray) -> list[int]:
    """Sort rows by descending score, ties by image id."""
    return sorted(range(len(rows)), key=lambda i: (-scores[i], store.ids[rows[i]]))


def exact_knn(query, store: Datastore, k: int) -> Neighbors:
    """Brute-force top-k by inner product; ties broken by image id."""
    q = np.asarray(query, dtype=np.float64)
    if q.shape != (store.dim,):
        raise RetrievalError(f"query dim {q.shape} != datastore dim {store.dim}")
    if k < 1:
        raise RetrievalError("k must be >= 1")
    scores = store.embeddings @ q
    rows = np.arange(len(store))
    order = _rank(store, rows, scores)[:k]
    return Neighbors([store.ids[i] for i in order], [float(scores[i]) for i in order], short=k > len(store))


def build_index(store: Datastore, m: int = 32, ef_construction: int = 128, seed: int = 0) -> HnswIndex:
    return HnswIndex.build(store.embeddings, m=m, ef_construction=ef_construction, seed=seed)


def hnsw_knn(query, store: Datastore, index: HnswIndex, k: int, ef_search: int = 64) -> Neighbors:
    if len(index) != len(store):
        raise RetrievalError(f"index has {len(index)} vertices, datastore {len(store)} entries")
    kk = min(k, len(store))
    rows, sims = index.search(query, kk, max(ef_search, kk))
    order = _rank(store, rows, sims)
    return Neighbors([store.ids[rows[i]] for i in order], [float(sims[i]) for i in order], short=k > len(store))


@dataclass
class RetrievalConfig:
    k: int = 10
    aggregation: str = "mean"
    exact: bool = False
    ef_search: int = 64
    ef_construction: int = 128
    m: int = 32
    k_unit: str = "captions"  # "captions": k captions total; "images": all captions of k images

    def __post_init__(self):
        if self.k < 1:
            raise RetrievalError("k must be >= 1")
        if self.aggregation not in AGGREGATIONS:
            raise RetrievalError(f"unknown aggregation {self.aggregation!r}")
        if self.k_unit not in ("captions", "images"):
            raise RetrievalError(f"k_unit must be 'captions' or 'images', got {self.k_unit!r}")


@dataclass
class Retrieved:
    captions: list[str]
    image_ids: list[str]
    short: bool = False

    def __iter__(self):
        return iter(self.captions)

    def __len__(self) -> int:
        return len(self.captions)


def _search(q, store, index, cfg, n_images, ef) -> Neighbors:
    if cfg.exact or index is None:
        return exact_knn(q, store, n_images)
    return hnsw_knn(q, store, index, n_images, max(ef, n_images))


def retrieve_captions(
    query_grid,
    store: Datastore,
    index: HnswIndex | None,
    cfg: RetrievalConfig,
    exclude_id: str | None = None,
    k: int | None = None,
) -> Retrieved:
    """Captions of the most relevant stored images, best image first.

    ``exclude_id`` is dropped before truncation.  With ``k_unit="captions"``
    captions are taken image by image until ``k`` are collected.
    """
    if store.aggregation != cfg.aggregation:
        raise RetrievalError(
            f"datastore built with {store.aggregation!r} aggregation, query uses {cfg.aggregation!r}"
        )
    k = cfg.k if k is None else k
    q = embed_aggregate(query_grid, cfg.aggregation)
    # k images always cover k captions (every image holds at least one)
    n_images = min(k + (exclude_id is not None), len(store))
    while True:
        hits = [i for i in _search(q, store, index, cfg, n_images, cfg.ef_search).ids if i != exclude_id]
        captions, used = _collect(store, hits, k, cfg.k_unit)
        enough = len(used) == k if cfg.k_unit == "images" else len(captions) == k
        if enough or n_images >= len(store):
            break
        n_images = min(2 * n_images, len(store))
    if not enough:
        log.debug("retrieval short: %d captions from %d images for k=%d", len(captions), len(used), k)
    return Retrieved(captions, used, short=not enough)


def _collect(store: Datastore, hits: list[str], k: int, unit: str):
    captions: list[str] = []
    used: list[str] = []
    for image_id in hits:
        if unit == "images":
            if len(used) == k:
                break
            captions.extend(store.captions_of(image_id))
            used.append(image_id)
        else:
            if len(captions) >= k:
                break
            take = store.captions_of(image_id)[: k - len(captions)]
            captions.extend(take)
            used.append(image_id)
    return captions, used


@dataclass
class NNReport:
    """Per-k mean and oracle (best retrieved caption) scores for every metric."""

    ks: list[int]
    mean: dict[int, dict[str, float]]
    oracle: dict[int, dict[str, float]]
    skipped: int = 0

    def to_table(self) -> str:
        head = ["k"] + [f"{m} mean" for m in METRIC_NAMES] + [f"{m} oracle" for m in METRIC_NAMES]
        rows = ["\t".join(head)]
        for k in self.ks:
            vals = [self.mean[k][m] for m in METRIC_NAMES] + [self.oracle[k][m] for m in METRIC_NAMES]
            rows.append("\t".join([str(k)] + [f"{v:.4f}" for v in vals]))
        return "\n".join(rows)

    def to_dict(self) -> dict:
        return {
            "ks": self.ks,
            "mean": {str(k): v for k, v in self.mean.items()},
            "oracle": {str(k): v for k, v in self.oracle.items()},
            "skipped": self.skipped,
        }


def nn_quality_report(
    test_set: Sequence[tuple[str, np.ndarray, Sequence[str]]],
    store: Datastore,
    index: HnswIndex | None,
    cfg: RetrievalConfig,
    ks: Sequence[int] = (5, 10, 20, 40),
    idf: IdfTable | None = None,
) -> NNReport:
    """Score retrieved captions against each test image's ground truth.

    Captions are retrieved once at the largest k and prefixes are used for
    smaller k, so retrieved sets are nested and oracle scores cannot drop.
    """
    ks = sorted(set(int(k) for k in ks))
    if idf is None:
        idf = IdfTable.build(refs for _, _, refs in test_set)
    sums = {k: dict.fromkeys(METRIC_NAMES, 0.0) for k in ks}
    counts = dict.fromkeys(ks, 0)
    best_sums = {k: dict.fromkeys(METRIC_NAMES, 0.0) for k in ks}
    n_images = dict.fromkeys(ks, 0)
    skipped = 0
    for image_id, grid, refs in test_set:
        got = retrieve_captions(grid, store, index, cfg, exclude_id=image_id, k=max(ks))
        if not got.captions:
            skipped += 1
            continue
        scored = [sentence_scores(c, refs, idf) for c in got.captions]
        for k in ks:
            part = scored[:k] if cfg.k_unit == "captions" else scored[: _images_prefix(store, got.image_ids, k)]
            if not part:
                continue
            n_images[k] += 1
            counts[k] += len(part)
            for m in METRIC_NAMES:
                sums[k][m] += sum(s[m] for s in part)
                best_sums[k][m] += max(s[m] for s in part)
    mean = {k: {m: sums[k][m] / max(counts[k], 1) for m in METRIC_NAMES} for k in ks}
    oracle = {k: {m: best_sums[k][m] / max(n_images[k], 1) for m in METRIC_NAMES} for k in ks}
    return NNReport(ks, mean, oracle, skipped)


def _images_prefix(store: Datastore, image_ids: list[str], k: int) -> int:
    return sum(len(store.captions_of(i)) for i in image_ids[:k])
