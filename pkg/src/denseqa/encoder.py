"""Dual-encoder towers: hashed char-n-gram featurization, mean-pool embedding,
linear projection to the index space, and exact gradients for losses built on
inner-product matching scores.

The question tower and the paragraph tower are isomorphic but (by default)
do not share parameters. All training math runs in float64; checkpoints and
index vectors are stored as float32.

Matrix products use ``np.einsum`` without the optimize path on purpose: it
never dispatches to BLAS, so results are bit-identical regardless of thread
count.
"""

from __future__ import annotations

import struct
import zlib
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .binio import Reader, array_bytes, read_framed, write_framed
from .corpus import Token

CHECKPOINT_MAGIC = b"PQEN"
CHECKPOINT_VERSION = 1

QUESTION = "question"
PARAGRAPH = "paragraph"
_TOWER_CODES = {QUESTION: 0, PARAGRAPH: 1}
_TOWER_NAMES = {v: k for k, v in _TOWER_CODES.items()}

# A dense index-space vector is just a 1-D float array.
DenseVector = np.ndarray


@dataclass(frozen=True)
class EncoderConfig:
    """Shapes and featurization settings shared by both towers."""

    n_buckets: int = 1 << 16
    ngram_min: int = 3
    ngram_max: int = 5
    hidden_dim: int = 64
    index_dim: int = 32
    seed: int = 0
    share_towers: bool = False

    def __post_init__(self):
        if self.n_buckets < 1:
            raise ValueError("n_buckets must be >= 1")
        if not self.ngram_min <= self.ngram_max:
            raise ValueError("ngram_min must be <= ngram_max")
        if self.ngram_min < 1:
            raise ValueError("ngram_min must be >= 1")
        if not self.index_dim <= self.hidden_dim:
            raise ValueError("index_dim must be <= hidden_dim")
        if self.index_dim < 1:
            raise ValueError("index_dim must be >= 1")


@dataclass
class EncoderParams:
    """All trainable weights of one tower."""

    embedding: np.ndarray  # [n_buckets, hidden_dim] float64
    projection: np.ndarray  # [hidden_dim, index_dim] float64
    tower: str

    def validate(self, config: EncoderConfig) -> None:
        if self.embedding.shape != (config.n_buckets, config.hidden_dim):
            raise ValueError("embedding shape does not match config")
        if self.projection.shape != (config.hidden_dim, config.index_dim):
            raise ValueError("projection shape does not match config")
        if not (np.isfinite(self.embedding).all() and np.isfinite(self.projection).all()):
            raise ValueError("parameters contain non-finite values")

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.embedding.copy(), self.projection.copy(), self.tower)

    def arrays(self) -> dict[str, np.ndarray]:
        return {"embedding": self.embedding, "projection": self.projection}


@dataclass
class TowerGrads:
    """Gradients with the same shapes as one tower's parameters."""

    embedding: np.ndarray
    projection: np.ndarray

    @classmethod
    def zeros_like(cls, params: EncoderParams) -> "TowerGrads":
        return cls(np.zeros_like(params.embedding), np.zeros_like(params.projection))

    def add_(self, other: "TowerGrads", scale: float = 1.0) -> None:
        self.embedding += scale * other.embedding
        self.projection += scale * other.projection

    def scale_(self, scale: float) -> None:
        self.embedding *= scale
        self.projection *= scale

    def arrays(self) -> dict[str, np.ndarray]:
        return {"embedding": self.embedding, "projection": self.projection}


def init_params(
    config: EncoderConfig, tower: str, rng: np.random.Generator
) -> EncoderParams:
    """Fan-in uniform init: embedding ±1/sqrt(hidden), projection ±1/sqrt(index)."""
    if tower not in _TOWER_CODES:
        raise ValueError(f"unknown tower {tower!r}")
    emb_scale = 1.0 / np.sqrt(config.hidden_dim)
    proj_scale = 1.0 / np.sqrt(config.index_dim)
    embedding = rng.uniform(-emb_scale, emb_scale, size=(config.n_buckets, config.hidden_dim))
    projection = rng.uniform(-proj_scale, proj_scale, size=(config.hidden_dim, config.index_dim))
    return EncoderParams(embedding, projection, tower)


# --- featurization ---


def _token_texts(tokens: Iterable) -> list[str]:
    return [t.text if isinstance(t, Token) else str(t) for t in tokens]


def hash_ngram(ngram: str, n_buckets: int) -> int:
    """Stable bucket of a character n-gram (CRC32 of its UTF-8 bytes)."""
    return zlib.crc32(ngram.encode("utf-8")) % n_buckets


def featurize(tokens: Sequence, config: EncoderConfig) -> Counter:
    """Hashed counts of all char n-grams (sizes ngram_min..ngram_max) of each
    lowercased token. Tokens shorter than ngram_min contribute nothing."""
    counts: Counter = Counter()
    for text in _token_texts(tokens):
        text = text.lower()
        for size in range(config.ngram_min, config.ngram_max + 1):
            for i in range(len(text) - size + 1):
                counts[hash_ngram(text[i : i + size], config.n_buckets)] += 1
    return counts


@dataclass(frozen=True)
class FeatureRow:
    """Sparse hashed-feature counts for one text row."""

    buckets: np.ndarray  # int64, sorted ascending
    counts: np.ndarray  # float64
    total: float

    @classmethod
    def from_counter(cls, counter: Counter) -> "FeatureRow":
        if not counter:
            return cls(np.empty(0, np.int64), np.empty(0, np.float64), 0.0)
        buckets = np.fromiter(counter.keys(), np.int64, len(counter))
        counts = np.fromiter(counter.values(), np.float64, len(counter))
        order = np.argsort(buckets, kind="stable")
        buckets, counts = buckets[order], counts[order]
        return cls(buckets, counts, float(counts.sum()))

    @classmethod
    def from_tokens(cls, tokens: Sequence, config: EncoderConfig) -> "FeatureRow":
        return cls.from_counter(featurize(tokens, config))


@dataclass
class FeatureBatch:
    """Several FeatureRows stacked into flat arrays for vectorized encoding."""

    rows: list[FeatureRow]
    row_ids: np.ndarray  # int64 per nonzero, which row each entry belongs to
    buckets: np.ndarray
    counts: np.ndarray
    totals: np.ndarray  # float64 [n_rows]

    @classmethod
    def stack(cls, rows: Sequence[FeatureRow]) -> "FeatureBatch":
        rows = list(rows)
        if rows:
            row_ids = np.concatenate(
                [np.full(len(r.buckets), i, np.int64) for i, r in enumerate(rows)]
            ) if any(len(r.buckets) for r in rows) else np.empty(0, np.int64)
            buckets = np.concatenate([r.buckets for r in rows]) if any(
                len(r.buckets) for r in rows
            ) else np.empty(0, np.int64)
            counts = np.concatenate([r.counts for r in rows]) if any(
                len(r.counts) for r in rows
            ) else np.empty(0, np.float64)
        else:
            row_ids = np.empty(0, np.int64)
            buckets = np.empty(0, np.int64)
            counts = np.empty(0, np.float64)
        totals = np.array([r.total for r in rows], np.float64)
        return cls(rows, row_ids, buckets, counts, totals)

    def __len__(self) -> int:
        return len(self.rows)


@dataclass
class EncodeResult:
    """Forward-pass cache: pooled token features and projected vectors."""

    pooled: np.ndarray  # [n, hidden] float64
    vectors: np.ndarray  # [n, index] float64


def pool_batch(batch: FeatureBatch, embedding: np.ndarray) -> np.ndarray:
    """Count-weighted mean of embedding rows per feature row.

    Rows with no features (total count 0) pool to the zero vector.
    """
    pooled = np.zeros((len(batch), embedding.shape[1]), np.float64)
    if len(batch.buckets):
        contrib = embedding[batch.buckets] * batch.counts[:, None]
        np.add.at(pooled, batch.row_ids, contrib)
        nonzero = batch.totals > 0
        pooled[nonzero] /= batch.totals[nonzero, None]
    return pooled


def pool_backprop(
    batch: FeatureBatch, d_pooled: np.ndarray, embedding_shape: tuple[int, int]
) -> np.ndarray:
    """Gradient wrt the embedding table given d(loss)/d(pooled)."""
    d_embedding = np.zeros(embedding_shape, np.float64)
    if len(batch.buckets):
        weights = batch.counts / batch.totals[batch.row_ids]
        np.add.at(
            d_embedding, batch.buckets, d_pooled[batch.row_ids] * weights[:, None]
        )
    return d_embedding


def encode_batch(batch: FeatureBatch, params: EncoderParams) -> EncodeResult:
    """Mean-pool embedding rows by hashed counts, then project."""
    pooled = pool_batch(batch, params.embedding)
    vectors = np.einsum("nh,hi->ni", pooled, params.projection)
    return EncodeResult(pooled=pooled, vectors=vectors)


def backprop_batch(
    batch: FeatureBatch,
    cache: EncodeResult,
    d_vectors: np.ndarray,
    params: EncoderParams,
) -> TowerGrads:
    """Exact gradients of a loss wrt one tower, given d(loss)/d(vectors)."""
    grads = TowerGrads.zeros_like(params)
    grads.projection += np.einsum("nh,ni->hi", cache.pooled, d_vectors)
    d_pooled = np.einsum("ni,hi->nh", d_vectors, params.projection)
    grads.embedding += pool_backprop(batch, d_pooled, params.embedding.shape)
    return grads


def encode(tokens: Sequence, params: EncoderParams, config: EncoderConfig) -> DenseVector:
    """Encode one token sequence to a dense index-space vector."""
    batch = FeatureBatch.stack([FeatureRow.from_tokens(tokens, config)])
    return encode_batch(batch, params).vectors[0]


# --- matching scores ---


def score_matrix(hq: np.ndarray, hp: np.ndarray) -> np.ndarray:
    """All pairwise inner products: S[i, j] = <question i, paragraph j>."""
    hq = np.asarray(hq, np.float64)
    hp = np.asarray(hp, np.float64)
    if hq.ndim != 2 or hp.ndim != 2 or hq.shape[1] != hp.shape[1]:
        raise ValueError(
            f"dimension mismatch: questions {hq.shape} vs paragraphs {hp.shape}"
        )
    return np.einsum("id,jd->ij", hq, hp)


def retrieval_softmax(scores: Sequence[float]) -> np.ndarray:
    """Numerically stable softmax over retrieval scores (max subtraction)."""
    arr = np.asarray(scores, np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError("retrieval_softmax requires a non-empty 1-D score list")
    if not np.isfinite(arr).all():
        raise ValueError("retrieval_softmax requires finite scores")
    shifted = arr - arr.max()
    exp = np.exp(shifted)
    return exp / exp.sum()


def log_softmax(scores: np.ndarray) -> np.ndarray:
    arr = np.asarray(scores, np.float64)
    shifted = arr - arr.max()
    return shifted - np.log(np.exp(shifted).sum())


# --- checkpoints ---


def save_params(path: str | Path, params: EncoderParams, config: EncoderConfig) -> None:
    """Write one tower's weights: PQEN header, float32 matrices, CRC32 trailer."""
    params.validate(config)
    header = struct.pack(
        "<IBIIIIIQB",
        CHECKPOINT_VERSION,
        _TOWER_CODES[params.tower],
        config.n_buckets,
        config.ngram_min,
        config.ngram_max,
        config.hidden_dim,
        config.index_dim,
        config.seed,
        1 if config.share_towers else 0,
    )
    payload = header + array_bytes(params.embedding, "<f4") + array_bytes(
        params.projection, "<f4"
    )
    write_framed(path, CHECKPOINT_MAGIC, payload)


def load_params(path: str | Path) -> tuple[EncoderParams, EncoderConfig]:
    """Read a tower checkpoint back into float64 parameters."""
    reader = Reader(read_framed(path, CHECKPOINT_MAGIC), name=str(path))
    (version, tower_code, n_buckets, ngram_min, ngram_max, hidden, index, seed, share) = (
        reader.unpack("<IBIIIIIQB")
    )
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    config = EncoderConfig(
        n_buckets=n_buckets,
        ngram_min=ngram_min,
        ngram_max=ngram_max,
        hidden_dim=hidden,
        index_dim=index,
        seed=seed,
        share_towers=bool(share),
    )
    embedding = reader.array("<f4", n_buckets * hidden).astype(np.float64)
    projection = reader.array("<f4", hidden * index).astype(np.float64)
    reader.expect_end()
    params = EncoderParams(
        embedding.reshape(n_buckets, hidden),
        projection.reshape(hidden, index),
        _TOWER_NAMES[tower_code],
    )
    params.validate(config)
    return params, config
