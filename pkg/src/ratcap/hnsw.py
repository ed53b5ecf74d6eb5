"""Hierarchical navigable small-world graph for maximum inner-product search.

Layout: ``links[level, vertex, :counts[level, vertex]]`` are the out-neighbours
of ``vertex`` at ``level``.  Upper layers keep at most ``M`` links per vertex,
the base layer at most ``2 * M`` (the usual HNSW32 layout: ``M = 32`` means
64 base-layer links).  Vectors are stored as float32 values (upcast to
float64 for arithmetic) so that a saved index searches identically after load.

Hot loops are compiled with numba.
"""

from __future__ import annotations

import math
import struct
from collections import deque
from heapq import heappop, heappush
from pathlib import Path

import numpy as np
from numba import njit

MAGIC = b"RHNSW1"
MAX_LEVEL_CAP = 16


class IndexError_(ValueError):
    """Raised for invalid index operations (empty index, bad file)."""


@njit(cache=True)
def _dot(a, b):
    s = 0.0
    for i in range(a.shape[0]):
        s += a[i] * b[i]
    return s


@njit(cache=True)
def _search_layer(data, links, counts, q, entries, ef, visited, tag):
    """Best-first search on one layer; returns (ids, sims) sorted by descending sim."""
    cand = [(0.0, np.int64(0))]
    cand.pop()
    res = [(0.0, np.int64(0))]
    res.pop()
    for e in entries:
        e = np.int64(e)
        if visited[e] == tag:
            continue
        visited[e] = tag
        s = _dot(data[e], q)
        heappush(cand, (-s, e))
        heappush(res, (s, e))
        if len(res) > ef:
            heappop(res)
    while len(cand) > 0:
        negs, c = heappop(cand)
        if len(res) >= ef and -negs < res[0][0]:
            break
        for j in range(counts[c]):
            n = np.int64(links[c, j])
            if visited[n] == tag:
                continue
            visited[n] = tag
            s = _dot(data[n], q)
            if len(res) < ef or s > res[0][0]:
                heappush(cand, (-s, n))
                heappush(res, (s, n))
                if len(res) > ef:
                    heappop(res)
    m = len(res)
    ids = np.empty(m, dtype=np.int64)
    sims = np.empty(m, dtype=np.float64)
    for i in range(m - 1, -1, -1):
        s, n = heappop(res)
        ids[i] = n
        sims[i] = s
    return ids, sims


@njit(cache=True)
def _select_neighbors(data, cand_ids, cand_sims, m, heuristic=True):
    """Diversity heuristic: keep a candidate unless it is closer to an already kept one
    than to the base point; pruned candidates back-fill up to ``m``."""
    n = cand_ids.shape[0]
    out = np.empty(min(n, m), dtype=np.int64)
    pruned = np.empty(n, dtype=np.int64)
    k = 0
    p = 0
    for i in range(n):
        if k >= m:
            break
        e = cand_ids[i]
        good = True
        for j in range(k if heuristic else 0):
            if _dot(data[e], data[out[j]]) > cand_sims[i]:
                good = False
                break
        if good:
            out[k] = e
            k += 1
        else:
            pruned[p] = e
            p += 1
    i = 0
    while k < out.shape[0] and i < p:
        out[k] = pruned[i]
        k += 1
        i += 1
    return out[:k]


@njit(cache=True)
def _connect(data, links, counts, level, src, dst, m, heuristic):
    """Add link src->dst at ``level``, shrinking src's list when it overflows."""
    c = counts[level, src]
    for j in range(c):
        if links[level, src, j] == dst:
            return
    if c < m:
        links[level, src, c] = dst
        counts[level, src] = c + 1
        return
    ids = np.empty(c + 1, dtype=np.int64)
    sims = np.empty(c + 1, dtype=np.float64)
    for j in range(c):
        ids[j] = links[level, src, j]
    ids[c] = dst
    for j in range(c + 1):
        sims[j] = _dot(data[src], data[ids[j]])
    order = np.argsort(-sims, kind="mergesort")
    kept = _select_neighbors(data, ids[order], sims[order], m, heuristic)
    for j in range(kept.shape[0]):
        links[level, src, j] = kept[j]
    counts[level, src] = kept.shape[0]


@njit(cache=True)
def _build(data, levels, m, m0, ef_construction, links, counts, heuristic):
    n = data.shape[0]
    visited = np.zeros(n, dtype=np.int64)
    tag = 0
    entry = 0
    max_level = levels[0]
    for i in range(1, n):
        q = data[i]
        lvl = levels[i]
        ep = np.array([entry], dtype=np.int64)
        for lc in range(max_level, lvl, -1):
            tag += 1
            ids, _ = _search_layer(data, links[lc], counts[lc], q, ep, 1, visited, tag)
            ep = ids[:1]
        for lc in range(min(lvl, max_level), -1, -1):
            tag += 1
            ids, sims = _search_layer(data, links[lc], counts[lc], q, ep, ef_construction, visited, tag)
            cap = m0 if lc == 0 else m
            chosen = _select_neighbors(data, ids, sims, cap, heuristic)
            for j in range(chosen.shape[0]):
                links[lc, i, j] = chosen[j]
            counts[lc, i] = chosen.shape[0]
            for j in range(chosen.shape[0]):
                _connect(data, links, counts, lc, chosen[j], i, cap, heuristic)
            ep = ids
        if lvl > max_level:
            max_level = lvl
            entry = i
    return entry, max_level


@njit(cache=True)
def _query(data, links, counts, entry, max_level, q, k, ef):
    n = data.shape[0]
    visited = np.zeros(n, dtype=np.int64)
    ep = np.array([entry], dtype=np.int64)
    tag = 0
    for lc in range(max_level, 0, -1):
        tag += 1
        ids, _ = _search_layer(data, links[lc], counts[lc], q, ep, 1, visited, tag)
        ep = ids[:1]
    tag += 1
    ids, sims = _search_layer(data, links[0], counts[0], q, ep, max(ef, k), visited, tag)
    return ids[:k], sims[:k]


class HnswIndex:
    """Approximate top-k inner-product search over the rows of a matrix.

    Vertex ``i`` is row ``i`` of the indexed matrix (the datastore's entry order).
    """

    def __init__(self, vectors, links, counts, levels, entry: int, max_level: int, m: int):
        self.vectors = vectors
        self.links = links
        self.counts = counts
        self.levels = levels
        self.entry = int(entry)
        self.max_level = int(max_level)
        self.m = int(m)

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def base_m(self) -> int:
        return 2 * self.m

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @classmethod
    def build(
        cls, vectors, m: int = 32, ef_construction: int = 128, seed: int = 0, heuristic: bool = True
    ) -> "HnswIndex":
        vecs = np.asarray(vectors, dtype=np.float32).astype(np.float64)
        if vecs.ndim != 2 or vecs.shape[0] == 0:
            raise IndexError_("cannot build an index over an empty set of vectors")
        n = vecs.shape[0]
        rng = np.random.default_rng(seed)
        ml = 1.0 / math.log(m)
        u = rng.uniform(size=n)
        levels = np.minimum(np.floor(-np.log(1.0 - u) * ml), MAX_LEVEL_CAP).astype(np.int64)
        top = int(levels.max())
        m0 = 2 * m
        links = np.full((top + 1, n, m0), -1, dtype=np.int64)
        counts = np.zeros((top + 1, n), dtype=np.int64)
        entry, max_level = _build(vecs, levels, m, m0, ef_construction, links, counts, heuristic)
        index = cls(vecs, links, counts, levels, entry, max_level, m)
        index._repair_connectivity()
        return index

    def _repair_connectivity(self) -> None:
        """Link any base-layer vertex unreachable from the entry point."""
        reach = self.reachable()
        while not reach.all():
            v = int(np.flatnonzero(~reach)[0])
            sims = self.vectors @ self.vectors[v]
            donors = np.flatnonzero(reach)
            donors = donors[np.argsort(-sims[donors], kind="stable")]
            spare = donors[self.counts[0, donors] < self.base_m]
            if spare.size:
                u = spare[0]
                self.links[0, u, self.counts[0, u]] = v
                self.counts[0, u] += 1
            else:
                self.links[0, donors[0], self.base_m - 1] = v
            reach = self.reachable()

    def reachable(self) -> np.ndarray:
        """Boolean mask of base-layer vertices reachable from the entry point (BFS)."""
        seen = np.zeros(len(self), dtype=bool)
        seen[self.entry] = True
        queue = deque([self.entry])
        while queue:
            u = queue.popleft()
            for v in self.links[0, u, : self.counts[0, u]]:
                if not seen[v]:
                    seen[v] = True
                    queue.append(v)
        return seen

    def search(self, query, k: int, ef_search: int = 64) -> tuple[np.ndarray, np.ndarray]:
        """Row ids and inner products of the approximate top-k, best first."""
        if len(self) == 0:
            raise IndexError_("search on an empty index")
        if ef_search < k:
            raise ValueError(f"ef_search ({ef_search}) must be >= k ({k})")
        q = np.asarray(query, dtype=np.float64)
        if q.shape != (self.dim,):
            raise ValueError(f"query dim {q.shape} != index dim {self.dim}")
        k = min(k, len(self))
        ef = max(ef_search, k)
        ids, sims = _query(self.vectors, self.links, self.counts, self.entry, self.max_level, q, k, ef)
        if ids.shape[0] < k:
            # base layer search can under-fill when ef is tiny relative to a repaired graph
            extra = np.setdiff1d(np.arange(len(self)), ids)
            es = self.vectors[extra] @ q
            order = np.argsort(-es, kind="stable")[: k - ids.shape[0]]
            ids = np.concatenate([ids, extra[order]])
            sims = np.concatenate([sims, es[order]])
            o = np.argsort(-sims, kind="stable")
            ids, sims = ids[o], sims[o]
        return ids, sims

    def max_out_degree(self, level: int = 0) -> int:
        return int(self.counts[level].max()) if level < self.counts.shape[0] else 0

    # -- persistence ---------------------------------------------------------
    def to_bytes(self) -> bytes:
        n, d = self.vectors.shape
        parts = [MAGIC, struct.pack("<5I", n, d, self.m, self.entry, self.max_level)]
        for v in range(n):
            lvl = int(self.levels[v])
            parts.append(struct.pack("<I", lvl))
            for lc in range(lvl + 1):
                c = int(self.counts[lc, v])
                parts.append(struct.pack("<I", c))
                parts.append(self.links[lc, v, :c].astype("<u4").tobytes())
        parts.append(self.vectors.astype("<f4").tobytes())
        return b"".join(parts)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, buf: bytes) -> "HnswIndex":
        if buf[: len(MAGIC)] != MAGIC:
            raise IndexError_("not an RHNSW1 index file")
        off = len(MAGIC)
        n, d, m, entry, max_level = struct.unpack_from("<5I", buf, off)
        off += 20
        levels = np.zeros(n, dtype=np.int64)
        links = np.full((max_level + 1, n, 2 * m), -1, dtype=np.int64)
        counts = np.zeros((max_level + 1, n), dtype=np.int64)
        for v in range(n):
            (lvl,) = struct.unpack_from("<I", buf, off)
            off += 4
            levels[v] = lvl
            for lc in range(lvl + 1):
                (c,) = struct.unpack_from("<I", buf, off)
                off += 4
                links[lc, v, :c] = np.frombuffer(buf, dtype="<u4", count=c, offset=off)
                counts[lc, v] = c
                off += 4 * c
        vecs = np.frombuffer(buf, dtype="<f4", count=n * d, offset=off).reshape(n, d).astype(np.float64)
        if off + 4 * n * d != len(buf):
            raise IndexError_("trailing or missing bytes in index file")
        return cls(vecs, links, counts, levels, entry, max_level, m)

    @classmethod
    def load(cls, path) -> "HnswIndex":
        return cls.from_bytes(Path(path).read_bytes())
