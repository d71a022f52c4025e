"""Clustering-based progressive pretraining of the dual-encoder retriever.

The loop alternates between reclustering the paired chunks with the current
paragraph tower and running a fixed number of parameter updates where every
batch is drawn from a single cluster, so in-batch negatives stay hard. The
per-batch objective is the in-batch contrastive loss: each question must pick
its own paragraph out of the batch.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence, TypeVar

import numpy as np

from .binio import Reader, array_bytes, read_framed, write_framed
from .corpus import Chunk, tokenize
from .datagen import QPPair
from .encoder import (
    EncoderConfig,
    EncoderParams,
    FeatureBatch,
    FeatureRow,
    TowerGrads,
    backprop_batch,
    encode_batch,
    init_params,
    save_params,
    score_matrix,
)
from .parallel import parallel_map
from .seeding import (
    STREAM_BATCH_SAMPLER,
    STREAM_CLUSTERING,
    STREAM_TOWER_INIT_P,
    STREAM_TOWER_INIT_Q,
    derive_rng,
    derive_seed,
)
from .vecindex import VectorStore, kmeans

OPTIMIZER_MAGIC = b"PQOP"
OPTIMIZER_VERSION = 1

T = TypeVar("T")


@dataclass(frozen=True)
class PretrainConfig:
    """Progressive pretraining knobs; defaults are full-scale settings."""

    batch_size: int = 80
    accum_steps: int = 8
    total_updates: int = 90_000
    recluster_every: int = 20_000
    num_clusters: int = 20
    learning_rate: float = 1e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    clustering_enabled: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.accum_steps < 1:
            raise ValueError("accum_steps must be >= 1")
        if self.num_clusters < 1:
            raise ValueError("num_clusters must be >= 1")
        if self.total_updates < 0:
            raise ValueError("total_updates must be >= 0")
        if self.recluster_every < 1:
            raise ValueError("recluster_every must be >= 1")


# --- Adam ---


@dataclass
class AdamState:
    """Bias-corrected Adam moment buffers over a named parameter tree."""

    step_count: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def for_params(cls, params: Mapping[str, np.ndarray]) -> "AdamState":
        return cls(
            step_count=0,
            m={k: np.zeros_like(a) for k, a in params.items()},
            v={k: np.zeros_like(a) for k, a in params.items()},
        )


def adam_update(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One in-place Adam step. Non-finite gradients fail fast."""
    if set(params) != set(grads):
        raise ValueError("parameter and gradient trees differ")
    for key, grad in grads.items():
        if grad.shape != params[key].shape:
            raise ValueError(f"gradient shape mismatch for {key!r}")
        if not np.isfinite(grad).all():
            raise ValueError(f"non-finite gradient for {key!r}")
    state.step_count += 1
    t = state.step_count
    for key, grad in grads.items():
        m = state.m[key]
        v = state.v[key]
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        params[key] -= lr * m_hat / (np.sqrt(v_hat) + eps)


def save_adam_state(path: str | Path, state: AdamState) -> None:
    parts = [struct.pack("<IQI", OPTIMIZER_VERSION, state.step_count, len(state.m))]
    for key in sorted(state.m):
        kb = key.encode("utf-8")
        arr_m, arr_v = state.m[key], state.v[key]
        parts.append(struct.pack("<H", len(kb)))
        parts.append(kb)
        parts.append(struct.pack("<B", arr_m.ndim))
        parts.append(struct.pack(f"<{arr_m.ndim}I", *arr_m.shape))
        parts.append(array_bytes(arr_m, "<f8"))
        parts.append(array_bytes(arr_v, "<f8"))
    write_framed(path, OPTIMIZER_MAGIC, b"".join(parts))


def load_adam_state(path: str | Path) -> AdamState:
    reader = Reader(read_framed(path, OPTIMIZER_MAGIC), name=str(path))
    version, step_count, n_arrays = reader.unpack("<IQI")
    if version != OPTIMIZER_VERSION:
        raise ValueError(f"{path}: unsupported optimizer state version {version}")
    m: dict[str, np.ndarray] = {}
    v: dict[str, np.ndarray] = {}
    for _ in range(n_arrays):
        (klen,) = reader.unpack("<H")
        key = bytes(reader.array("u1", klen)).decode("utf-8")
        (ndim,) = reader.unpack("<B")
        shape = reader.unpack(f"<{ndim}I")
        size = int(np.prod(shape)) if ndim else 1
        m[key] = reader.array("<f8", size).reshape(shape)
        v[key] = reader.array("<f8", size).reshape(shape)
    reader.expect_end()
    return AdamState(step_count=step_count, m=m, v=v)


# --- in-batch contrastive loss ---


def inbatch_loss_from_features(
    params_q: EncoderParams,
    params_p: EncoderParams,
    q_rows: Sequence[FeatureRow],
    p_rows: Sequence[FeatureRow],
) -> tuple[float, TowerGrads, TowerGrads]:
    """Mean negative log-likelihood of the diagonal under row-wise softmax
    over the batch score matrix, with exact gradients for both towers."""
    if len(q_rows) != len(p_rows) or not q_rows:
        raise ValueError("need equal, non-empty question and paragraph rows")
    batch_q = FeatureBatch.stack(q_rows)
    batch_p = FeatureBatch.stack(p_rows)
    enc_q = encode_batch(batch_q, params_q)
    enc_p = encode_batch(batch_p, params_p)
    scores = score_matrix(enc_q.vectors, enc_p.vectors)
    n = len(q_rows)
    row_max = scores.max(axis=1)
    log_z = row_max + np.log(np.exp(scores - row_max[:, None]).sum(axis=1))
    loss = float(np.mean(log_z - np.diagonal(scores)))
    probs = np.exp(scores - log_z[:, None])
    d_scores = (probs - np.eye(n)) / n
    d_hq = np.einsum("ij,jd->id", d_scores, enc_p.vectors)
    d_hp = np.einsum("ij,id->jd", d_scores, enc_q.vectors)
    grad_q = backprop_batch(batch_q, enc_q, d_hq, params_q)
    grad_p = backprop_batch(batch_p, enc_p, d_hp, params_p)
    return loss, grad_q, grad_p


def positive_tokens(pair: QPPair, chunks: Mapping[int, Chunk]):
    """Tokens of the pair's positive side (chunk text, or its override)."""
    if pair.positive_text is not None:
        return tokenize(pair.positive_text)
    return chunks[pair.chunk_id].tokens


def inbatch_loss(
    params_q: EncoderParams,
    params_p: EncoderParams,
    batch: Sequence[QPPair],
    chunks: Mapping[int, Chunk],
    config: EncoderConfig,
) -> tuple[float, TowerGrads, TowerGrads]:
    """In-batch contrastive loss over question/paragraph pairs.

    Pairs duplicating an earlier pair's chunk_id are dropped before the loss,
    so the diagonal is the unique gold label.
    """
    seen: set[int] = set()
    kept: list[QPPair] = []
    for pair in batch:
        if pair.chunk_id in seen:
            continue
        seen.add(pair.chunk_id)
        kept.append(pair)
    q_rows = [FeatureRow.from_tokens(tokenize(p.question), config) for p in kept]
    p_rows = [FeatureRow.from_tokens(positive_tokens(p, chunks), config) for p in kept]
    return inbatch_loss_from_features(params_q, params_p, q_rows, p_rows)


# --- training data with precomputed features ---


@dataclass
class TrainingData:
    """Pairs plus cached hashed features for every question and positive."""

    pairs: list[QPPair]
    q_features: list[FeatureRow]
    p_features: list[FeatureRow]
    chunk_ids: list[int]  # sorted unique chunk ids that carry >= 1 pair
    chunk_features: dict[int, FeatureRow]
    pairs_by_chunk: dict[int, list[int]]  # chunk id -> pair indices

    @classmethod
    def build(
        cls,
        pairs: Sequence[QPPair],
        chunks: Mapping[int, Chunk],
        config: EncoderConfig,
        threads: int = 1,
    ) -> "TrainingData":
        pairs = list(pairs)
        for pair in pairs:
            if pair.chunk_id not in chunks:
                raise ValueError(f"pair references unknown chunk_id {pair.chunk_id}")
        chunk_ids = sorted({p.chunk_id for p in pairs})
        chunk_feats = parallel_map(
            lambda cid: FeatureRow.from_tokens(chunks[cid].tokens, config),
            chunk_ids,
            threads,
        )
        chunk_features = dict(zip(chunk_ids, chunk_feats))
        q_features = parallel_map(
            lambda p: FeatureRow.from_tokens(tokenize(p.question), config),
            pairs,
            threads,
        )

        def positive_row(pair: QPPair) -> FeatureRow:
            if pair.positive_text is None:
                return chunk_features[pair.chunk_id]
            return FeatureRow.from_tokens(tokenize(pair.positive_text), config)

        p_features = parallel_map(positive_row, pairs, threads)
        pairs_by_chunk: dict[int, list[int]] = {cid: [] for cid in chunk_ids}
        for i, pair in enumerate(pairs):
            pairs_by_chunk[pair.chunk_id].append(i)
        return cls(pairs, q_features, p_features, chunk_ids, chunk_features, pairs_by_chunk)


def encode_chunks(
    chunks: Sequence[Chunk],
    params_p: EncoderParams,
    config: EncoderConfig,
    threads: int = 1,
) -> VectorStore:
    """Encode chunks with the paragraph tower into a float32 vector store."""
    rows = parallel_map(
        lambda ch: FeatureRow.from_tokens(ch.tokens, config), list(chunks), threads
    )
    vectors = encode_batch(FeatureBatch.stack(rows), params_p).vectors.astype(np.float32)
    if not len(chunks):
        vectors = vectors.reshape(0, config.index_dim)
    return VectorStore(
        data=vectors, ids=np.array([c.id for c in chunks], np.int64)
    )


# --- cluster map and batch sampling ---


@dataclass
class ClusterMap:
    """Partition of the paired chunks, with centroids for neighbor lookup."""

    members: list[np.ndarray]  # per cluster, sorted chunk ids
    centroids: np.ndarray | None  # [n_clusters, index_dim] float64; None if trivial
    built_at_step: int = 0

    @property
    def num_clusters(self) -> int:
        return len(self.members)

    def sizes(self) -> np.ndarray:
        return np.array([len(m) for m in self.members], np.float64)


def trivial_cluster_map(chunk_ids: Sequence[int], built_at_step: int = 0) -> ClusterMap:
    """Single cluster holding every paired chunk (uniform sampling mode)."""
    return ClusterMap(
        members=[np.asarray(sorted(chunk_ids), np.int64)],
        centroids=None,
        built_at_step=built_at_step,
    )


def build_cluster_map(
    data: TrainingData,
    params_p: EncoderParams,
    num_clusters: int,
    seed: int,
    built_at_step: int = 0,
) -> ClusterMap:
    """Encode every paired chunk with the paragraph tower and k-means them."""
    if num_clusters > len(data.chunk_ids):
        raise ValueError(
            f"num_clusters ({num_clusters}) exceeds paired chunk count ({len(data.chunk_ids)})"
        )
    batch = FeatureBatch.stack([data.chunk_features[cid] for cid in data.chunk_ids])
    vectors = encode_batch(batch, params_p).vectors.astype(np.float32)
    store = VectorStore(data=vectors, ids=np.asarray(data.chunk_ids, np.int64))
    result = kmeans(store, num_clusters, seed=seed)
    members = [store.ids[result.assignments == j] for j in range(num_clusters)]
    return ClusterMap(
        members=members, centroids=result.centroids, built_at_step=built_at_step
    )


def _neighbor_order(cluster_map: ClusterMap, cluster: int) -> list[int]:
    if cluster_map.centroids is None:
        return []
    deltas = cluster_map.centroids - cluster_map.centroids[cluster]
    d2 = np.einsum("cd,cd->c", deltas, deltas)
    order = np.lexsort((np.arange(len(d2)), d2))
    return [int(c) for c in order if c != cluster]


def sample_batch(
    cluster_map: ClusterMap,
    rng: np.random.Generator,
    batch_size: int,
    pairs_by_chunk: Mapping[int, Sequence[T]],
) -> list[T]:
    """Draw one batch: a size-proportional cluster, ``batch_size`` distinct
    chunks from it (topping up from nearest-centroid neighbors when the
    cluster is small), and one uniformly chosen pair per chunk."""
    if cluster_map.num_clusters == 0:
        raise ValueError("cluster map is empty")
    sizes = cluster_map.sizes()
    total = sizes.sum()
    if total == 0:
        raise ValueError("cluster map has no members")
    cluster = int(rng.choice(cluster_map.num_clusters, p=sizes / total))

    chosen: list[int] = []
    own = cluster_map.members[cluster]
    perm = rng.permutation(len(own))
    chosen.extend(int(own[i]) for i in perm[:batch_size])
    if len(chosen) < batch_size:
        for neighbor in _neighbor_order(cluster_map, cluster):
            need = batch_size - len(chosen)
            if need <= 0:
                break
            pool = cluster_map.members[neighbor]
            perm = rng.permutation(len(pool))
            chosen.extend(int(pool[i]) for i in perm[:need])

    batch: list[T] = []
    for chunk_id in chosen:
        options = pairs_by_chunk[chunk_id]
        batch.append(options[int(rng.integers(len(options)))])
    return batch


# --- the progressive loop ---


@dataclass
class TrainResult:
    params_q: EncoderParams
    params_p: EncoderParams
    adam: AdamState
    checkpoint_steps: list[int]
    log_entries: list[dict]
    out_dir: Path


def _param_tree(
    params_q: EncoderParams, params_p: EncoderParams, shared: bool
) -> dict[str, np.ndarray]:
    tree = {"q.embedding": params_q.embedding, "q.projection": params_q.projection}
    if not shared:
        tree["p.embedding"] = params_p.embedding
        tree["p.projection"] = params_p.projection
    return tree


def _grad_tree(
    grad_q: TowerGrads, grad_p: TowerGrads, shared: bool
) -> dict[str, np.ndarray]:
    if shared:
        return {
            "q.embedding": grad_q.embedding + grad_p.embedding,
            "q.projection": grad_q.projection + grad_p.projection,
        }
    return {
        "q.embedding": grad_q.embedding,
        "q.projection": grad_q.projection,
        "p.embedding": grad_p.embedding,
        "p.projection": grad_p.projection,
    }


def checkpoint_paths(out_dir: str | Path, step: int) -> dict[str, Path]:
    out = Path(out_dir)
    return {
        "question": out / f"step{step:07d}.question.ckpt",
        "paragraph": out / f"step{step:07d}.paragraph.ckpt",
        "optimizer": out / f"step{step:07d}.optimizer.ckpt",
    }


def final_checkpoint_paths(out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    return {
        "question": out / "question.ckpt",
        "paragraph": out / "paragraph.ckpt",
        "optimizer": out / "optimizer.ckpt",
    }


def progressive_train(
    config: PretrainConfig,
    pairs: Sequence[QPPair],
    chunks: Mapping[int, Chunk],
    encoder_config: EncoderConfig,
    out_dir: str | Path,
    threads: int = 1,
) -> TrainResult:
    """Run the full progressive loop and emit checkpoints plus a JSONL log.

    Checkpoints are written at step 0, at every reclustering boundary, and at
    the end. With ``clustering_enabled`` off the sampler sees a single trivial
    cluster, which makes sampling uniform over paired chunks.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = TrainingData.build(pairs, chunks, encoder_config, threads=threads)
    if config.clustering_enabled and config.num_clusters > len(data.chunk_ids):
        raise ValueError(
            f"num_clusters ({config.num_clusters}) exceeds paired chunk count "
            f"({len(data.chunk_ids)})"
        )

    params_q = init_params(
        encoder_config, "question", derive_rng(config.seed, STREAM_TOWER_INIT_Q)
    )
    if encoder_config.share_towers:
        params_p = EncoderParams(params_q.embedding, params_q.projection, "paragraph")
    else:
        params_p = init_params(
            encoder_config, "paragraph", derive_rng(config.seed, STREAM_TOWER_INIT_P)
        )
    tree = _param_tree(params_q, params_p, encoder_config.share_towers)
    adam = AdamState.for_params(tree)
    sampler_rng = derive_rng(config.seed, STREAM_BATCH_SAMPLER)

    checkpoint_steps: list[int] = []
    log_entries: list[dict] = []

    def emit(step: int) -> None:
        paths = checkpoint_paths(out, step)
        save_params(paths["question"], params_q, encoder_config)
        save_params(paths["paragraph"], params_p, encoder_config)
        save_adam_state(paths["optimizer"], adam)
        checkpoint_steps.append(step)

    step = 0
    epoch = 0
    emit(step)
    while step < config.total_updates:
        if config.clustering_enabled:
            cluster_map = build_cluster_map(
                data,
                params_p,
                config.num_clusters,
                seed=derive_seed(config.seed, STREAM_CLUSTERING, epoch),
                built_at_step=step,
            )
        else:
            cluster_map = trivial_cluster_map(data.chunk_ids, built_at_step=step)
        updates_this_epoch = min(config.recluster_every, config.total_updates - step)
        for _ in range(updates_this_epoch):
            acc: dict[str, np.ndarray] = {k: np.zeros_like(a) for k, a in tree.items()}
            batch_losses = []
            for _ in range(config.accum_steps):
                idxs = sample_batch(
                    cluster_map, sampler_rng, config.batch_size, data.pairs_by_chunk
                )
                loss, grad_q, grad_p = inbatch_loss_from_features(
                    params_q,
                    params_p,
                    [data.q_features[i] for i in idxs],
                    [data.p_features[i] for i in idxs],
                )
                batch_losses.append(loss)
                for key, grad in _grad_tree(
                    grad_q, grad_p, encoder_config.share_towers
                ).items():
                    acc[key] += grad
            # one update per accumulation window; gradients averaged over it
            for key in acc:
                acc[key] /= config.accum_steps
            adam_update(
                tree,
                acc,
                adam,
                lr=config.learning_rate,
                beta1=config.adam_beta1,
                beta2=config.adam_beta2,
                eps=config.adam_eps,
            )
            step += 1
            log_entries.append(
                {
                    "step": step,
                    "loss": float(np.mean(batch_losses)),
                    "cluster_epoch": epoch,
                }
            )
        epoch += 1
        emit(step)

    final = final_checkpoint_paths(out)
    save_params(final["question"], params_q, encoder_config)
    save_params(final["paragraph"], params_p, encoder_config)
    save_adam_state(final["optimizer"], adam)

    log_path = out / "train_log.jsonl"
    with open(log_path, "w", encoding="utf-8") as fh:
        for entry in log_entries:
            fh.write(json.dumps(entry) + "\n")

    return TrainResult(
        params_q=params_q,
        params_p=params_p,
        adam=adam,
        checkpoint_steps=checkpoint_steps,
        log_entries=log_entries,
        out_dir=out,
    )
