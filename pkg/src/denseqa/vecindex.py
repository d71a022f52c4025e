"""k-means clustering and maximum inner product search.

Provides an exact flat scan and an IVF-flat index: vectors are assigned to
Voronoi cells by L2 k-means, and a query probes only the ``nprobe`` cells
whose centroids have the largest inner product with it. Stored vectors are
float32; every distance and inner product accumulates in float64.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .binio import Reader, array_bytes, read_framed, write_framed

VECTOR_MAGIC = b"PQVE"
INDEX_MAGIC = b"PQIV"
FORMAT_VERSION = 1

DEFAULT_NCELLS = 100
DEFAULT_NPROBE = 20
DEFAULT_KMEANS_ITERS = 25

DenseVectorLike = Sequence | np.ndarray


@dataclass
class VectorStore:
    """Contiguous float32 vectors with aligned integer ids."""

    data: np.ndarray  # [count, dim] float32
    ids: np.ndarray  # [count] int64
    _row_index: dict[int, int] | None = field(default=None, repr=False)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, np.float32)
        self.ids = np.ascontiguousarray(self.ids, np.int64)
        if self.data.ndim != 2:
            raise ValueError("data must be a 2-D array")
        if len(self.ids) != len(self.data):
            raise ValueError("ids must align with data rows")
        if not np.isfinite(self.data).all():
            raise ValueError("vectors must be finite")

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    @property
    def count(self) -> int:
        return self.data.shape[0]

    def row_of(self, vec_id: int) -> int:
        if self._row_index is None:
            self._row_index = {int(v): i for i, v in enumerate(self.ids)}
        return self._row_index[int(vec_id)]

    def rows_of(self, vec_ids: np.ndarray) -> np.ndarray:
        return np.array([self.row_of(v) for v in vec_ids], np.int64)

    def save(self, path: str | Path) -> None:
        header = struct.pack("<IIQ", FORMAT_VERSION, self.dim, self.count)
        payload = header + array_bytes(self.ids, "<u8") + array_bytes(self.data, "<f4")
        write_framed(path, VECTOR_MAGIC, payload)

    @classmethod
    def load(cls, path: str | Path) -> "VectorStore":
        reader = Reader(read_framed(path, VECTOR_MAGIC), name=str(path))
        version, dim, count = reader.unpack("<IIQ")
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported vector file version {version}")
        ids = reader.array("<u8", count).astype(np.int64)
        data = reader.array("<f4", count * dim).reshape(count, dim)
        reader.expect_end()
        return cls(data=data, ids=ids)


@dataclass
class RetrievalResult:
    """Ranked ids with inner-product scores, optionally answer-annotated."""

    ids: np.ndarray  # int64, descending score
    scores: np.ndarray  # float64
    answer_hits: frozenset[int] | None = None  # ids whose chunk covers an answer
    answer_spans: dict[int, list] | None = None  # id -> matching Span list

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def covered(self) -> bool:
        """True when at least one retrieved paragraph covers an answer."""
        return bool(self.answer_hits)


@dataclass
class KMeansResult:
    centroids: np.ndarray  # [k, dim] float64
    assignments: np.ndarray  # [count] int64
    inertia: float


def _sq_distances(data64: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Squared L2 distances [count, k], clamped at zero, float64 math."""
    x2 = np.einsum("nd,nd->n", data64, data64)
    c2 = np.einsum("kd,kd->k", centroids, centroids)
    cross = np.einsum("nd,kd->nk", data64, centroids)
    return np.maximum(x2[:, None] - 2.0 * cross + c2[None, :], 0.0)


def _kmeanspp_init(
    data64: np.ndarray, k: int, rng: np.random.Generator
) -> np.ndarray:
    """Seeded k-means++ (D^2 sampling) initial centroids."""
    n = len(data64)
    centroids = np.empty((k, data64.shape[1]), np.float64)
    first = int(rng.integers(n))
    centroids[0] = data64[first]
    if k == 1:
        return centroids
    best_d2 = _sq_distances(data64, centroids[:1])[:, 0]
    for j in range(1, k):
        total = best_d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=best_d2 / total))
        else:
            # all points coincide with chosen centroids; fall back to uniform
            idx = int(rng.integers(n))
        centroids[j] = data64[idx]
        d2_new = _sq_distances(data64, centroids[j : j + 1])[:, 0]
        best_d2 = np.minimum(best_d2, d2_new)
    return centroids


def _assign(data64: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d2 = _sq_distances(data64, centroids)
    assign = d2.argmin(axis=1)  # argmin takes the lowest index on ties
    return assign, d2[np.arange(len(data64)), assign]


def _fix_empty_clusters(
    data64: np.ndarray,
    centroids: np.ndarray,
    assign: np.ndarray,
    d2min: np.ndarray,
    k: int,
) -> None:
    """Reseed each empty cluster to the point farthest from its centroid."""
    counts = np.bincount(assign, minlength=k)
    for j in np.flatnonzero(counts == 0):
        far = int(d2min.argmax())
        centroids[j] = data64[far]
        assign[far] = j
        d2min[far] = 0.0
        counts[j] = 1


def _lloyd(data64: np.ndarray, k: int, max_iters: int, rng: np.random.Generator) -> KMeansResult:
    """One k-means++ init plus Lloyd iterations to an assignment fixpoint."""
    n = len(data64)
    centroids = _kmeanspp_init(data64, k, rng)
    prev_assign: np.ndarray | None = None
    prev_inertia = np.inf
    assign = np.zeros(n, np.int64)
    inertia = 0.0
    for _ in range(max_iters):
        assign, d2min = _assign(data64, centroids)
        _fix_empty_clusters(data64, centroids, assign, d2min, k)
        inertia = float(d2min.sum())
        assert inertia <= prev_inertia + 1e-9 * max(1.0, prev_inertia if np.isfinite(prev_inertia) else 1.0), (
            f"k-means inertia increased: {prev_inertia} -> {inertia}"
        )
        prev_inertia = inertia
        if prev_assign is not None and np.array_equal(assign, prev_assign):
            break
        prev_assign = assign
        centroids = np.stack([data64[assign == j].mean(axis=0) for j in range(k)])
    else:
        # ran out of iterations right after a centroid update; realign
        assign, d2min = _assign(data64, centroids)
        _fix_empty_clusters(data64, centroids, assign, d2min, k)
        inertia = float(d2min.sum())
    return KMeansResult(centroids=centroids, assignments=assign, inertia=inertia)


def _auto_n_init(n: int) -> int:
    """Restart budget: small problems get solved to (near) optimality, large
    training clusterings keep restarts cheap since local optima are fine."""
    if n <= 64:
        return 100
    if n <= 1024:
        return 10
    return 3


def kmeans(
    store: VectorStore | np.ndarray,
    k: int,
    max_iters: int = DEFAULT_KMEANS_ITERS,
    seed: int = 0,
    n_init: int | None = None,
) -> KMeansResult:
    """Best of ``n_init`` seeded k-means++ / Lloyd runs by final inertia.

    Within each run inertia is non-increasing across iterations (asserted),
    an empty cluster is reseeded to the point currently farthest from its
    assigned centroid, and ties on the nearest centroid go to the lowest
    centroid id. Restarts draw from one seeded stream, so the result is a
    pure function of (data, k, max_iters, seed, n_init); ``n_init=None``
    picks a budget from the point count.
    """
    data = store.data if isinstance(store, VectorStore) else np.asarray(store)
    data64 = np.asarray(data, np.float64)
    n = len(data64)
    if not 1 <= k <= n:
        raise ValueError(f"k must satisfy 1 <= k <= {n}, got {k}")
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    if n_init is None:
        n_init = _auto_n_init(n)
    if n_init < 1:
        raise ValueError("n_init must be >= 1")
    rng = np.random.default_rng(seed)
    best: KMeansResult | None = None
    for _ in range(n_init):
        result = _lloyd(data64, k, max_iters, rng)
        if best is None or result.inertia < best.inertia:
            best = result
    return best


# --- search ---


def _top_ranked(ids: np.ndarray, scores: np.ndarray, topk: int) -> RetrievalResult:
    order = np.lexsort((ids, -scores))
    take = order[: min(topk, len(order))]
    return RetrievalResult(ids=ids[take].copy(), scores=scores[take].copy())


def inner_product_scores(data: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Inner products of each row against the query, float64 accumulation."""
    return np.einsum("nd,d->n", np.asarray(data, np.float64), np.asarray(query, np.float64))


def flat_search(store: VectorStore, query: DenseVectorLike, topk: int) -> RetrievalResult:
    """Exact MIPS: the ``topk`` largest inner products, ties to the lowest id."""
    query = np.asarray(query, np.float64)
    if query.ndim != 1 or query.shape[0] != store.dim:
        raise ValueError(f"query dim {query.shape} does not match store dim {store.dim}")
    if topk < 1:
        raise ValueError("topk must be >= 1")
    scores = inner_product_scores(store.data, query)
    return _top_ranked(store.ids, scores, topk)


@dataclass
class IvfIndex:
    """Coarse quantizer: per-cell posting lists of vector ids."""

    centroids: np.ndarray  # [ncells, dim] float32
    cells: list[np.ndarray]  # per cell, int64 vector ids
    nprobe_default: int = DEFAULT_NPROBE

    def __post_init__(self):
        self.centroids = np.ascontiguousarray(self.centroids, np.float32)
        self.cells = [np.ascontiguousarray(c, np.int64) for c in self.cells]
        if len(self.cells) != len(self.centroids):
            raise ValueError("one posting list per centroid required")

    @property
    def ncells(self) -> int:
        return len(self.cells)

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def save(self, path: str | Path) -> None:
        offsets = np.zeros(self.ncells + 1, np.int64)
        for i, cell in enumerate(self.cells):
            offsets[i + 1] = offsets[i] + len(cell)
        all_ids = (
            np.concatenate(self.cells) if self.ncells and offsets[-1] else np.empty(0, np.int64)
        )
        header = struct.pack(
            "<IIII", FORMAT_VERSION, self.ncells, self.dim, self.nprobe_default
        )
        payload = (
            header
            + array_bytes(self.centroids, "<f4")
            + array_bytes(offsets, "<u8")
            + array_bytes(all_ids, "<u8")
        )
        write_framed(path, INDEX_MAGIC, payload)

    @classmethod
    def load(cls, path: str | Path) -> "IvfIndex":
        reader = Reader(read_framed(path, INDEX_MAGIC), name=str(path))
        version, ncells, dim, nprobe_default = reader.unpack("<IIII")
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported index version {version}")
        centroids = reader.array("<f4", ncells * dim).reshape(ncells, dim)
        offsets = reader.array("<u8", ncells + 1).astype(np.int64)
        all_ids = reader.array("<u8", int(offsets[-1])).astype(np.int64)
        reader.expect_end()
        cells = [all_ids[offsets[i] : offsets[i + 1]] for i in range(ncells)]
        return cls(centroids=centroids, cells=cells, nprobe_default=nprobe_default)


def ivf_build(
    store: VectorStore,
    ncells: int = DEFAULT_NCELLS,
    seed: int = 0,
    nprobe_default: int = DEFAULT_NPROBE,
    max_iters: int = DEFAULT_KMEANS_ITERS,
) -> IvfIndex:
    """Train L2 k-means centroids and post each vector to its nearest cell."""
    if ncells > store.count:
        raise ValueError(f"ncells ({ncells}) must be <= vector count ({store.count})")
    result = kmeans(store, ncells, max_iters=max_iters, seed=seed)
    cells = [store.ids[result.assignments == j] for j in range(ncells)]
    return IvfIndex(
        centroids=result.centroids.astype(np.float32),
        cells=cells,
        nprobe_default=min(nprobe_default, ncells),
    )


def ivf_search(
    index: IvfIndex,
    store: VectorStore,
    query: DenseVectorLike,
    topk: int,
    nprobe: int | None = None,
) -> RetrievalResult:
    """Probe the ``nprobe`` cells with the largest centroid inner product,
    then scan those cells exhaustively. With nprobe == ncells this matches
    :func:`flat_search` exactly."""
    query = np.asarray(query, np.float64)
    if query.ndim != 1 or query.shape[0] != index.dim or index.dim != store.dim:
        raise ValueError("query/index/store dimension mismatch")
    if nprobe is None:
        nprobe = index.nprobe_default
    if not 1 <= nprobe <= index.ncells:
        raise ValueError(f"nprobe must satisfy 1 <= nprobe <= {index.ncells}")
    cell_scores = inner_product_scores(index.centroids, query)
    probe_order = np.lexsort((np.arange(index.ncells), -cell_scores))[:nprobe]
    candidates = [index.cells[c] for c in probe_order if len(index.cells[c])]
    if not candidates:
        return RetrievalResult(ids=np.empty(0, np.int64), scores=np.empty(0, np.float64))
    cand_ids = np.concatenate(candidates)
    rows = store.rows_of(cand_ids)
    scores = inner_product_scores(store.data[rows], query)
    return _top_ranked(cand_ids, scores, topk)
