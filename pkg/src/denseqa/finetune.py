"""QA finetuning: on-the-fly top-k retrieval, the span reader with shared
normalization, the retrieval-only loss over answer-bearing candidates, the
optional joint objective, and inference-time answer selection.

The paragraph tower and the corpus index are frozen throughout; only the
question tower and the reader train, so one corpus encoding serves every run.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .binio import Reader, array_bytes, read_framed, write_framed
from .corpus import Chunk, Span, find_answer_spans, normalize_answer, tokenize
from .encoder import (
    EncoderConfig,
    EncoderParams,
    FeatureBatch,
    FeatureRow,
    backprop_batch,
    encode_batch,
    pool_backprop,
    pool_batch,
)
from .parallel import parallel_map
from .pretrain import AdamState, adam_update
from .seeding import STREAM_FINETUNE_ORDER, STREAM_READER_INIT, derive_rng
from .vecindex import IvfIndex, RetrievalResult, VectorStore, flat_search, ivf_search

READER_MAGIC = b"PQRD"
READER_VERSION = 1

DEFAULT_TOPK = 5
DEFAULT_EARLY_CANDIDATES = 5000
DEFAULT_CACHE_DEPTH = 10000
WEIGHT_GRID = tuple(round(0.1 * i, 1) for i in range(11))


@dataclass(frozen=True)
class QAExample:
    """One QA dataset record: a question and its gold answer strings."""

    question: str
    answers: tuple[str, ...]


def read_qa_file(path: str | Path) -> list[QAExample]:
    """Newline-delimited JSON {"question": ..., "answers": [...]}."""
    examples: list[QAExample] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from exc
            if "question" not in rec or "answers" not in rec:
                raise ValueError(f"{path}: line {lineno}: missing question/answers")
            examples.append(
                QAExample(str(rec["question"]), tuple(str(a) for a in rec["answers"]))
            )
    return examples


def write_qa_file(examples: Sequence[QAExample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(
                json.dumps(
                    {"question": ex.question, "answers": list(ex.answers)},
                    ensure_ascii=False,
                )
                + "\n"
            )


@dataclass(frozen=True)
class FinetuneConfig:
    """Finetuning knobs; loss variants cover every objective combination."""

    topk: int = DEFAULT_TOPK
    early_candidates: int = DEFAULT_EARLY_CANDIDATES
    cache_depth: int = DEFAULT_CACHE_DEPTH
    max_answer_len: int = 10
    epochs: int = 4
    batch_questions: int = 8
    learning_rate: float = 1e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    shared_norm: bool = True
    joint: bool = False
    reader_updates_question: bool = False
    train_reader_embedding: bool = False
    nprobe: int | None = None  # None => flat search for training retrieval

    def __post_init__(self):
        if self.topk < 1:
            raise ValueError("topk must be >= 1")
        if self.cache_depth < self.early_candidates:
            raise ValueError("cache_depth must be >= early_candidates")
        if self.max_answer_len < 1:
            raise ValueError("max_answer_len must be >= 1")


# --- reader parameters ---


@dataclass
class ReaderParams:
    """Two bilinear maps scoring span starts and ends against the question.

    ``embedding`` is a trainable copy of the paragraph tower's token-embedding
    table; when None the frozen paragraph table is used directly.
    """

    start_map: np.ndarray  # [index_dim, hidden_dim] float64
    end_map: np.ndarray  # [index_dim, hidden_dim] float64
    embedding: np.ndarray | None = None

    def copy(self) -> "ReaderParams":
        return ReaderParams(
            self.start_map.copy(),
            self.end_map.copy(),
            None if self.embedding is None else self.embedding.copy(),
        )


def init_reader(
    config: EncoderConfig,
    rng: np.random.Generator,
    paragraph_embedding: np.ndarray | None = None,
) -> ReaderParams:
    """Fan-in uniform init; pass the paragraph table to train a copy of it."""
    scale = 1.0 / np.sqrt(config.hidden_dim)
    start = rng.uniform(-scale, scale, size=(config.index_dim, config.hidden_dim))
    end = rng.uniform(-scale, scale, size=(config.index_dim, config.hidden_dim))
    emb = None if paragraph_embedding is None else paragraph_embedding.copy()
    return ReaderParams(start_map=start, end_map=end, embedding=emb)


def save_reader(path: str | Path, reader: ReaderParams) -> None:
    index_dim, hidden_dim = reader.start_map.shape
    has_emb = reader.embedding is not None
    n_buckets = reader.embedding.shape[0] if has_emb else 0
    header = struct.pack("<IIIBI", READER_VERSION, index_dim, hidden_dim, has_emb, n_buckets)
    payload = header + array_bytes(reader.start_map, "<f4") + array_bytes(
        reader.end_map, "<f4"
    )
    if has_emb:
        payload += array_bytes(reader.embedding, "<f4")
    write_framed(path, READER_MAGIC, payload)


def load_reader(path: str | Path) -> ReaderParams:
    reader = Reader(read_framed(path, READER_MAGIC), name=str(path))
    version, index_dim, hidden_dim, has_emb, n_buckets = reader.unpack("<IIIBI")
    if version != READER_VERSION:
        raise ValueError(f"{path}: unsupported reader checkpoint version {version}")
    start = reader.array("<f4", index_dim * hidden_dim).astype(np.float64)
    end = reader.array("<f4", index_dim * hidden_dim).astype(np.float64)
    emb = None
    if has_emb:
        emb = (
            reader.array("<f4", n_buckets * hidden_dim)
            .astype(np.float64)
            .reshape(n_buckets, hidden_dim)
        )
    reader.expect_end()
    return ReaderParams(
        start_map=start.reshape(index_dim, hidden_dim),
        end_map=end.reshape(index_dim, hidden_dim),
        embedding=emb,
    )


# --- retrieval with answer annotation ---


def encode_question(
    question: str, params_q: EncoderParams, config: EncoderConfig
) -> tuple[FeatureBatch, np.ndarray, np.ndarray]:
    """Returns (feature batch, pooled, vector) for one question string."""
    batch = FeatureBatch.stack([FeatureRow.from_tokens(tokenize(question), config)])
    enc = encode_batch(batch, params_q)
    return batch, enc.pooled, enc.vectors[0]


def search_store(
    store: VectorStore,
    query: np.ndarray,
    topk: int,
    index: IvfIndex | None = None,
    nprobe: int | None = None,
) -> RetrievalResult:
    if index is None:
        return flat_search(store, query, topk)
    return ivf_search(index, store, query, topk, nprobe)


def annotate_answers(
    result: RetrievalResult,
    chunks: Mapping[int, Chunk],
    answers: Sequence[str],
    max_answer_len: int,
) -> RetrievalResult:
    """Attach the answer-covering subset and its matching spans."""
    hits = set()
    spans: dict[int, list[Span]] = {}
    for cid in result.ids:
        cid = int(cid)
        matched = find_answer_spans(chunks[cid], answers, max_answer_len)
        if matched:
            hits.add(cid)
            spans[cid] = matched
    result.answer_hits = frozenset(hits)
    result.answer_spans = spans
    return result


def retrieve_topk(
    question: str,
    params_q: EncoderParams,
    config: EncoderConfig,
    store: VectorStore,
    chunks: Mapping[int, Chunk],
    answers: Sequence[str],
    k: int = DEFAULT_TOPK,
    index: IvfIndex | None = None,
    nprobe: int | None = None,
    max_answer_len: int = 10,
) -> RetrievalResult:
    """Top-k retrieval annotated with answer-covering chunks and spans.

    ``result.covered`` is False when no retrieved paragraph matches an answer,
    which is the signal to skip the question during training.
    """
    _, _, h_q = encode_question(question, params_q, config)
    result = search_store(store, h_q, k, index=index, nprobe=nprobe)
    return annotate_answers(result, chunks, answers, max_answer_len)


# --- span scoring ---


def enumerate_spans(n_tokens: int, max_answer_len: int) -> np.ndarray:
    """All (start, end) pairs with start <= end and length <= max_answer_len,
    ordered by (start, end)."""
    spans = [
        (s, e)
        for s in range(n_tokens)
        for e in range(s, min(n_tokens, s + max_answer_len))
    ]
    return np.asarray(spans, np.int64).reshape(-1, 2)


def token_feature_batch(chunk: Chunk, config: EncoderConfig) -> FeatureBatch:
    """Per-token hashed features; row t holds token t's n-grams."""
    return FeatureBatch.stack(
        [FeatureRow.from_tokens([tok], config) for tok in chunk.tokens]
    )


def reader_token_scores(
    question: str,
    chunk: Chunk,
    params_q: EncoderParams,
    reader: ReaderParams,
    paragraph_embedding: np.ndarray,
    config: EncoderConfig,
) -> tuple[np.ndarray, np.ndarray]:
    """Start and end scores per token: two bilinear forms between the question
    vector and each token's pooled n-gram embedding."""
    _, _, h_q = encode_question(question, params_q, config)
    table = reader.embedding if reader.embedding is not None else paragraph_embedding
    embeds = pool_batch(token_feature_batch(chunk, config), table)
    start = np.einsum("h,th->t", np.einsum("i,ih->h", h_q, reader.start_map), embeds)
    end = np.einsum("h,th->t", np.einsum("i,ih->h", h_q, reader.end_map), embeds)
    return start, end


@dataclass
class TopKContext:
    """Everything the span losses need about one question's top-k retrieval."""

    result: RetrievalResult
    chunk_ids: list[int]
    token_batches: list[FeatureBatch]
    token_embeds: list[np.ndarray]  # [T_i, hidden] float64
    spans: list[np.ndarray]  # [m_i, 2]
    gold_masks: list[np.ndarray]  # bool [m_i]
    span_logits: list[np.ndarray]  # start + end scores per span
    h_q: np.ndarray

    @property
    def has_gold(self) -> bool:
        return any(m.any() for m in self.gold_masks)


def build_topk_context(
    result: RetrievalResult,
    h_q: np.ndarray,
    chunks: Mapping[int, Chunk],
    reader: ReaderParams,
    paragraph_embedding: np.ndarray,
    config: EncoderConfig,
    max_answer_len: int,
    token_batch_cache: dict[int, FeatureBatch] | None = None,
) -> TopKContext:
    """Score every candidate span of every retrieved chunk."""
    table = reader.embedding if reader.embedding is not None else paragraph_embedding
    chunk_ids = [int(c) for c in result.ids]
    token_batches = []
    token_embeds = []
    spans_per_chunk = []
    gold_masks = []
    span_logits = []
    u_start = np.einsum("i,ih->h", h_q, reader.start_map)
    u_end = np.einsum("i,ih->h", h_q, reader.end_map)
    answer_spans = result.answer_spans or {}
    for cid in chunk_ids:
        chunk = chunks[cid]
        if token_batch_cache is not None and cid in token_batch_cache:
            batch = token_batch_cache[cid]
        else:
            batch = token_feature_batch(chunk, config)
            if token_batch_cache is not None:
                token_batch_cache[cid] = batch
        embeds = pool_batch(batch, table)
        spans = enumerate_spans(len(chunk.tokens), max_answer_len)
        start_scores = np.einsum("h,th->t", u_start, embeds)
        end_scores = np.einsum("h,th->t", u_end, embeds)
        logits = start_scores[spans[:, 0]] + end_scores[spans[:, 1]]
        gold = np.zeros(len(spans), bool)
        for span in answer_spans.get(cid, ()):
            match = (spans[:, 0] == span.start) & (spans[:, 1] == span.end)
            gold |= match
        token_batches.append(batch)
        token_embeds.append(embeds)
        spans_per_chunk.append(spans)
        gold_masks.append(gold)
        span_logits.append(logits)
    return TopKContext(
        result=result,
        chunk_ids=chunk_ids,
        token_batches=token_batches,
        token_embeds=token_embeds,
        spans=spans_per_chunk,
        gold_masks=gold_masks,
        span_logits=span_logits,
        h_q=h_q,
    )


def _logsumexp(values: np.ndarray) -> float:
    m = values.max()
    return float(m + np.log(np.exp(values - m).sum()))


def shared_norm_span_probs(ctx: TopKContext) -> list[np.ndarray]:
    """Span probabilities normalized jointly across all top-k chunks; the
    returned per-chunk arrays sum to 1 overall."""
    flat = np.concatenate(ctx.span_logits)
    if flat.size == 0:
        return [np.empty(0, np.float64) for _ in ctx.span_logits]
    log_z = _logsumexp(flat)
    probs = [np.exp(l - log_z) for l in ctx.span_logits]
    return probs


@dataclass
class SpanLossResult:
    loss: float
    d_start_map: np.ndarray
    d_end_map: np.ndarray
    d_embedding: np.ndarray | None  # set when the reader trains its own table
    d_h_q: np.ndarray | None  # set when gradients couple into the question tower
    d_retrieval_scores: np.ndarray | None  # set by the joint objective


def _backprop_span_logits(
    ctx: TopKContext,
    d_logits: list[np.ndarray],
    reader: ReaderParams,
    want_embedding_grad: bool,
    want_question_grad: bool,
) -> tuple[np.ndarray, np.ndarray, np.ndarray | None, np.ndarray | None]:
    """Push d(loss)/d(span logit) back to the reader maps, the (optional)
    reader embedding table, and the (optional) question vector."""
    index_dim, hidden_dim = reader.start_map.shape
    d_start = np.zeros_like(reader.start_map)
    d_end = np.zeros_like(reader.end_map)
    d_emb = np.zeros_like(reader.embedding) if want_embedding_grad else None
    d_h = np.zeros(index_dim) if want_question_grad else None
    u_start = np.einsum("i,ih->h", ctx.h_q, reader.start_map)
    u_end = np.einsum("i,ih->h", ctx.h_q, reader.end_map)
    for ci in range(len(ctx.chunk_ids)):
        dz = d_logits[ci]
        if dz.size == 0:
            continue
        spans = ctx.spans[ci]
        embeds = ctx.token_embeds[ci]
        n_tokens = embeds.shape[0]
        w_start = np.zeros(n_tokens)
        w_end = np.zeros(n_tokens)
        np.add.at(w_start, spans[:, 0], dz)
        np.add.at(w_end, spans[:, 1], dz)
        vec_start = np.einsum("t,th->h", w_start, embeds)
        vec_end = np.einsum("t,th->h", w_end, embeds)
        d_start += np.einsum("i,h->ih", ctx.h_q, vec_start)
        d_end += np.einsum("i,h->ih", ctx.h_q, vec_end)
        if d_h is not None:
            d_h += np.einsum("ih,h->i", reader.start_map, vec_start)
            d_h += np.einsum("ih,h->i", reader.end_map, vec_end)
        if d_emb is not None:
            d_pooled = np.einsum("t,h->th", w_start, u_start)
            d_pooled += np.einsum("t,h->th", w_end, u_end)
            d_emb += pool_backprop(ctx.token_batches[ci], d_pooled, d_emb.shape)
    return d_start, d_end, d_emb, d_h


def reader_loss(
    ctx: TopKContext,
    reader: ReaderParams,
    shared_norm: bool = True,
    want_embedding_grad: bool = False,
    want_question_grad: bool = False,
) -> SpanLossResult:
    """Negative log marginal probability of all gold spans in the top-k.

    With ``shared_norm`` the span softmax runs over all chunks jointly;
    otherwise each chunk normalizes its own spans and the gold mass is summed
    across answer-covering chunks. Raises when no gold span exists (the caller
    must have skipped such questions).
    """
    if not ctx.has_gold:
        raise ValueError("reader_loss requires at least one gold span in the top-k")
    d_logits: list[np.ndarray]
    if shared_norm:
        flat = np.concatenate(ctx.span_logits)
        gold = np.concatenate(ctx.gold_masks)
        log_z = _logsumexp(flat)
        log_gold = _logsumexp(flat[gold])
        loss = log_z - log_gold
        probs = np.exp(flat - log_z)
        dz = probs.copy()
        dz[gold] -= np.exp(flat[gold] - log_gold)
        d_logits = []
        offset = 0
        for logits in ctx.span_logits:
            d_logits.append(dz[offset : offset + len(logits)])
            offset += len(logits)
    else:
        total = 0.0
        per_chunk: list[tuple[np.ndarray, np.ndarray, float]] = []
        for logits, gold in zip(ctx.span_logits, ctx.gold_masks):
            if logits.size == 0 or not gold.any():
                per_chunk.append((np.zeros_like(logits), gold, 0.0))
                continue
            log_z = _logsumexp(logits)
            probs = np.exp(logits - log_z)
            gold_mass = float(probs[gold].sum())
            total += gold_mass
            per_chunk.append((probs, gold, gold_mass))
        loss = -np.log(total)
        d_logits = []
        for probs, gold, gold_mass in per_chunk:
            if gold_mass == 0.0:
                d_logits.append(np.zeros_like(probs))
                continue
            dz = probs * (gold_mass - gold.astype(np.float64)) / total
            d_logits.append(dz)
    d_start, d_end, d_emb, d_h = _backprop_span_logits(
        ctx, d_logits, reader, want_embedding_grad, want_question_grad
    )
    return SpanLossResult(
        loss=float(loss),
        d_start_map=d_start,
        d_end_map=d_end,
        d_embedding=d_emb,
        d_h_q=d_h,
        d_retrieval_scores=None,
    )


def joint_loss(
    ctx: TopKContext,
    reader: ReaderParams,
    shared_norm: bool = False,
    want_embedding_grad: bool = False,
    want_question_grad: bool = False,
) -> SpanLossResult:
    """Marginal over answer-covering paragraphs weighted by their retrieval
    probability: the retrieved set acts as a latent variable.

    Retrieval probabilities are a softmax over the top-k scores; span
    probabilities normalize per paragraph by default or globally with
    ``shared_norm``. ``d_retrieval_scores`` carries the question-tower signal
    through the retrieval path.
    """
    if not ctx.has_gold:
        raise ValueError("joint_loss requires at least one gold span in the top-k")
    retr = np.asarray(ctx.result.scores, np.float64)
    alpha = np.exp(retr - _logsumexp(retr))
    k = len(ctx.chunk_ids)

    if shared_norm:
        flat = np.concatenate(ctx.span_logits)
        log_z = _logsumexp(flat)
        probs = [np.exp(l - log_z) for l in ctx.span_logits]
    else:
        probs = []
        for logits in ctx.span_logits:
            if logits.size == 0:
                probs.append(np.empty(0, np.float64))
            else:
                probs.append(np.exp(logits - _logsumexp(logits)))
    beta = np.array(
        [float(p[g].sum()) if p.size else 0.0 for p, g in zip(probs, ctx.gold_masks)]
    )
    covered = np.array([bool(g.any()) for g in ctx.gold_masks])
    z_total = float((alpha * beta * covered).sum())
    loss = -np.log(z_total)

    d_retr = alpha - np.where(covered, alpha * beta, 0.0) / z_total
    d_logits: list[np.ndarray] = []
    if shared_norm:
        flat_probs = np.concatenate(probs) if probs else np.empty(0)
        # d z_total / d logit_i = alpha_p(i) * gold_i * P_i - P_i * z_total
        contrib = np.concatenate(
            [
                np.where(g, a * p, 0.0)
                for a, p, g in zip(alpha, probs, ctx.gold_masks)
            ]
        )
        dz_flat = flat_probs - contrib / z_total
        offset = 0
        for logits in ctx.span_logits:
            d_logits.append(dz_flat[offset : offset + len(logits)])
            offset += len(logits)
    else:
        for ci in range(k):
            p, g = probs[ci], ctx.gold_masks[ci]
            if p.size == 0 or not covered[ci]:
                d_logits.append(np.zeros_like(p))
                continue
            gamma = alpha[ci] * beta[ci] / z_total
            d_logits.append(gamma * (p - np.where(g, p / beta[ci], 0.0)))

    d_start, d_end, d_emb, d_h = _backprop_span_logits(
        ctx, d_logits, reader, want_embedding_grad, want_question_grad
    )
    return SpanLossResult(
        loss=float(loss),
        d_start_map=d_start,
        d_end_map=d_end,
        d_embedding=d_emb,
        d_h_q=d_h,
        d_retrieval_scores=d_retr,
    )


# --- retrieval-only loss over answer-bearing candidates ---


@dataclass
class EarlyLossResult:
    loss: float
    d_h_q: np.ndarray | None
    skipped: bool
    candidate_ids: np.ndarray


def early_loss(
    h_q: np.ndarray,
    store: VectorStore,
    answer_ids: set[int] | frozenset[int],
    candidates: int = DEFAULT_EARLY_CANDIDATES,
) -> EarlyLossResult:
    """Negative log probability mass of answer-covering paragraphs among the
    top candidates, normalized over those candidates; gradient flows to the
    question vector only (the paragraph side is frozen).

    When no candidate covers an answer the question contributes zero loss and
    is reported as skipped.
    """
    m = min(candidates, store.count)
    top = flat_search(store, h_q, m)
    gold = np.array([int(cid) in answer_ids for cid in top.ids], bool)
    if not gold.any():
        return EarlyLossResult(0.0, None, True, top.ids)
    scores = top.scores
    log_z = _logsumexp(scores)
    log_gold = _logsumexp(scores[gold])
    loss = log_z - log_gold
    probs = np.exp(scores - log_z)
    d_scores = probs.copy()
    d_scores[gold] -= np.exp(scores[gold] - log_gold)
    rows = store.rows_of(top.ids)
    d_h = np.einsum("n,nd->d", d_scores, np.asarray(store.data[rows], np.float64))
    return EarlyLossResult(float(loss), d_h, False, top.ids)


# --- answer-set cache ---


@dataclass
class AnswerSetCache:
    """Per question: the answer-covering chunk ids among the top candidates
    retrieved by the untuned question tower."""

    fingerprint: str
    depth: int
    sets: list[frozenset[int]]

    def save(self, path: str | Path) -> None:
        payload = {
            "fingerprint": self.fingerprint,
            "depth": self.depth,
            "sets": [sorted(s) for s in self.sets],
        }
        Path(path).write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "AnswerSetCache":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(
            fingerprint=str(payload["fingerprint"]),
            depth=int(payload["depth"]),
            sets=[frozenset(int(c) for c in s) for s in payload["sets"]],
        )


def build_answer_cache(
    questions: Sequence[QAExample],
    params_q: EncoderParams,
    config: EncoderConfig,
    store: VectorStore,
    chunks: Mapping[int, Chunk],
    depth: int = DEFAULT_CACHE_DEPTH,
    max_answer_len: int = 10,
    fingerprint: str = "",
    threads: int = 1,
) -> AnswerSetCache:
    """Pre-annotate each question's top candidates under the untuned tower."""
    m = min(depth, store.count)

    def annotate(example: QAExample) -> frozenset[int]:
        _, _, h_q = encode_question(example.question, params_q, config)
        top = flat_search(store, h_q, m)
        hits = set()
        for cid in top.ids:
            cid = int(cid)
            if find_answer_spans(chunks[cid], example.answers, max_answer_len):
                hits.add(cid)
        return frozenset(hits)

    sets = parallel_map(annotate, list(questions), threads)
    return AnswerSetCache(fingerprint=fingerprint, depth=m, sets=sets)


# --- the finetuning loop ---


@dataclass
class FinetuneResult:
    params_q: EncoderParams
    reader: ReaderParams
    skipped_questions: int
    early_skipped: int
    losses: list[float]  # mean combined loss per update


def finetune(
    config: FinetuneConfig,
    train_questions: Sequence[QAExample],
    chunks: Mapping[int, Chunk],
    store: VectorStore,
    params_q: EncoderParams,
    params_p: EncoderParams,
    enc_config: EncoderConfig,
    cache: AnswerSetCache | None = None,
    index: IvfIndex | None = None,
) -> FinetuneResult:
    """Train the question tower and the reader on QA supervision.

    Per question: retrieve top-k on the fly, skip it when the top-k misses
    every answer, then accumulate the retrieval loss over answer-bearing
    candidates plus the span loss (shared-norm, per-paragraph, or joint per
    config). The paragraph tower and corpus vectors never change.
    """
    if cache is not None and len(cache.sets) != len(train_questions):
        raise ValueError("answer cache does not align with the question list")
    params_q = params_q.copy()
    reader = init_reader(
        enc_config,
        derive_rng(config.seed, STREAM_READER_INIT),
        paragraph_embedding=params_p.embedding if config.train_reader_embedding else None,
    )
    tree: dict[str, np.ndarray] = {
        "q.embedding": params_q.embedding,
        "q.projection": params_q.projection,
        "reader.start": reader.start_map,
        "reader.end": reader.end_map,
    }
    if reader.embedding is not None:
        tree["reader.embedding"] = reader.embedding
    adam = AdamState.for_params(tree)
    order_rng = derive_rng(config.seed, STREAM_FINETUNE_ORDER)
    token_batch_cache: dict[int, FeatureBatch] = {}

    skipped = 0
    early_skipped = 0
    losses: list[float] = []
    question_list = list(train_questions)

    for _ in range(config.epochs):
        perm = order_rng.permutation(len(question_list))
        for lo in range(0, len(perm), config.batch_questions):
            group = perm[lo : lo + config.batch_questions]
            acc = {k: np.zeros_like(a) for k, a in tree.items()}
            contributing = 0
            group_losses = []
            for qi in group:
                example = question_list[int(qi)]
                q_batch = FeatureBatch.stack(
                    [FeatureRow.from_tokens(tokenize(example.question), enc_config)]
                )
                enc = encode_batch(q_batch, params_q)
                h_q = enc.vectors[0]
                result = search_store(
                    store, h_q, config.topk, index=index, nprobe=config.nprobe
                )
                annotate_answers(result, chunks, example.answers, config.max_answer_len)
                if not result.covered:
                    skipped += 1
                    continue
                ctx = build_topk_context(
                    result,
                    h_q,
                    chunks,
                    reader,
                    params_p.embedding,
                    enc_config,
                    config.max_answer_len,
                    token_batch_cache if reader.embedding is None else None,
                )
                if config.joint:
                    span_res = joint_loss(
                        ctx,
                        reader,
                        shared_norm=config.shared_norm,
                        want_embedding_grad=reader.embedding is not None,
                        want_question_grad=config.reader_updates_question,
                    )
                else:
                    span_res = reader_loss(
                        ctx,
                        reader,
                        shared_norm=config.shared_norm,
                        want_embedding_grad=reader.embedding is not None,
                        want_question_grad=config.reader_updates_question,
                    )

                if cache is not None:
                    answer_ids = cache.sets[int(qi)]
                else:
                    answer_ids = _fresh_answer_ids(
                        h_q, store, chunks, example.answers,
                        config.early_candidates, config.max_answer_len,
                    )
                early = early_loss(
                    h_q, store, answer_ids, candidates=config.early_candidates
                )
                if early.skipped:
                    early_skipped += 1

                d_h = np.zeros_like(h_q)
                if early.d_h_q is not None:
                    d_h += early.d_h_q
                if span_res.d_h_q is not None:
                    d_h += span_res.d_h_q
                if span_res.d_retrieval_scores is not None:
                    rows = store.rows_of(result.ids)
                    d_h += np.einsum(
                        "n,nd->d",
                        span_res.d_retrieval_scores,
                        np.asarray(store.data[rows], np.float64),
                    )
                grads_q = backprop_batch(q_batch, enc, d_h[None, :], params_q)
                acc["q.embedding"] += grads_q.embedding
                acc["q.projection"] += grads_q.projection
                acc["reader.start"] += span_res.d_start_map
                acc["reader.end"] += span_res.d_end_map
                if span_res.d_embedding is not None:
                    acc["reader.embedding"] += span_res.d_embedding
                group_losses.append(early.loss + span_res.loss)
                contributing += 1
            if contributing == 0:
                continue
            for key in acc:
                acc[key] /= contributing
            adam_update(
                tree,
                acc,
                adam,
                lr=config.learning_rate,
                beta1=config.adam_beta1,
                beta2=config.adam_beta2,
                eps=config.adam_eps,
            )
            losses.append(float(np.mean(group_losses)))
    return FinetuneResult(
        params_q=params_q,
        reader=reader,
        skipped_questions=skipped,
        early_skipped=early_skipped,
        losses=losses,
    )


def _fresh_answer_ids(
    h_q: np.ndarray,
    store: VectorStore,
    chunks: Mapping[int, Chunk],
    answers: Sequence[str],
    candidates: int,
    max_answer_len: int,
) -> set[int]:
    m = min(candidates, store.count)
    top = flat_search(store, h_q, m)
    return {
        int(cid)
        for cid in top.ids
        if find_answer_spans(chunks[int(cid)], answers, max_answer_len)
    }


# --- inference ---


@dataclass
class SpanPrediction:
    """One scored answer span; combined = weight * retrieval + span score."""

    span: Span
    span_score: float
    retrieval_score: float
    combined: float


def answer_inference(
    question: str,
    params_q: EncoderParams,
    config: EncoderConfig,
    store: VectorStore,
    chunks: Mapping[int, Chunk],
    reader: ReaderParams,
    params_p: EncoderParams,
    k: int = DEFAULT_TOPK,
    retrieval_weight: float = 1.0,
    max_answer_len: int = 10,
    index: IvfIndex | None = None,
    nprobe: int | None = None,
) -> tuple[str, str, SpanPrediction]:
    """Best answer span over the top-k by combined score.

    Ties break by lower chunk id, then lower start, then lower end. Returns
    (raw surface text, normalized text, prediction).
    """
    if store.count == 0:
        raise ValueError("cannot run inference over an empty corpus")
    _, _, h_q = encode_question(question, params_q, config)
    result = search_store(store, h_q, k, index=index, nprobe=nprobe)
    ctx = build_topk_context(
        result, h_q, chunks, reader, params_p.embedding, config, max_answer_len
    )
    best: tuple[float, int, int, int] | None = None
    best_pred: SpanPrediction | None = None
    for ci, cid in enumerate(ctx.chunk_ids):
        retr = float(result.scores[ci])
        for si in range(len(ctx.spans[ci])):
            span_score = float(ctx.span_logits[ci][si])
            combined = retrieval_weight * retr + span_score
            key = (-combined, cid, int(ctx.spans[ci][si, 0]), int(ctx.spans[ci][si, 1]))
            if best is None or key < best:
                best = key
                best_pred = SpanPrediction(
                    span=Span(cid, int(ctx.spans[ci][si, 0]), int(ctx.spans[ci][si, 1])),
                    span_score=span_score,
                    retrieval_score=retr,
                    combined=combined,
                )
    if best_pred is None:
        raise ValueError("no candidate spans; corpus chunks are empty")
    raw = chunks[best_pred.span.chunk_id].span_text(best_pred.span)
    return raw, normalize_answer(raw), best_pred


def select_retrieval_weight(
    val_questions: Sequence[QAExample],
    predict: Callable[[str, float], str],
    grid: Sequence[float] = WEIGHT_GRID,
) -> tuple[float, dict[float, float]]:
    """Sweep the retrieval weight over a grid and keep the best validation
    exact match (ties go to the smaller weight)."""
    if not val_questions:
        raise ValueError("empty validation set")
    em_by_weight: dict[float, float] = {}
    for weight in grid:
        hits = 0
        for ex in val_questions:
            pred = normalize_answer(predict(ex.question, weight))
            if any(pred == normalize_answer(g) for g in ex.answers):
                hits += 1
        em_by_weight[float(weight)] = hits / len(val_questions)
    best = max(em_by_weight, key=lambda w: (em_by_weight[w], -w))
    return best, em_by_weight
