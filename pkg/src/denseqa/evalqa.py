"""Retrieval and QA metrics: recall at k, exact match, and ablation tables."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .corpus import Chunk, find_answer_spans, normalize_answer
from .encoder import EncoderConfig, EncoderParams
from .finetune import QAExample, encode_question, search_store
from .parallel import parallel_map
from .vecindex import IvfIndex, VectorStore


@dataclass
class EvalReport:
    """Aggregate metrics plus per-question records for error inspection."""

    recall_at: dict[int, float] = field(default_factory=dict)
    em: float | None = None
    skipped: int = 0
    config_fingerprint: str = ""
    per_question: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        payload = {
            "recall_at": {str(k): v for k, v in sorted(self.recall_at.items())},
            "em": self.em,
            "skipped": self.skipped,
            "config_fingerprint": self.config_fingerprint,
            "per_question": self.per_question,
        }
        return json.dumps(payload, sort_keys=True, ensure_ascii=False)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")


def first_hit_rank(
    question: QAExample,
    params_q: EncoderParams,
    config: EncoderConfig,
    store: VectorStore,
    chunks: Mapping[int, Chunk],
    depth: int,
    max_answer_len: int = 10,
    index: IvfIndex | None = None,
    nprobe: int | None = None,
) -> int | None:
    """1-based rank of the first answer-covering chunk in the top ``depth``."""
    _, _, h_q = encode_question(question.question, params_q, config)
    result = search_store(store, h_q, depth, index=index, nprobe=nprobe)
    for rank, cid in enumerate(result.ids, 1):
        if find_answer_spans(chunks[int(cid)], question.answers, max_answer_len):
            return rank
    return None


def recall_at_k(
    questions: Sequence[QAExample],
    params_q: EncoderParams,
    config: EncoderConfig,
    store: VectorStore,
    chunks: Mapping[int, Chunk],
    ks: Sequence[int],
    max_answer_len: int = 10,
    index: IvfIndex | None = None,
    nprobe: int | None = None,
    threads: int = 1,
) -> tuple[dict[int, float], list[dict]]:
    """Fraction of questions whose top-k holds an answer-covering chunk.

    Returns the recall map plus per-question records (first hit rank or null).
    """
    if not questions:
        raise ValueError("empty evaluation set")
    ks = sorted(set(int(k) for k in ks))
    if any(k < 1 for k in ks):
        raise ValueError("every k must be >= 1")
    depth = max(ks)

    ranks = parallel_map(
        lambda q: first_hit_rank(
            q, params_q, config, store, chunks, depth,
            max_answer_len=max_answer_len, index=index, nprobe=nprobe,
        ),
        list(questions),
        threads,
    )
    records = [
        {"question": q.question, "first_hit_rank": rank}
        for q, rank in zip(questions, ranks)
    ]
    recall = {
        k: float(np.mean([rank is not None and rank <= k for rank in ranks]))
        for k in ks
    }
    return recall, records


def exact_match(predictions: Sequence[str], gold_answers: Sequence[Sequence[str]]) -> float:
    """Mean of per-question normalized equality against any gold answer."""
    if len(predictions) != len(gold_answers):
        raise ValueError(
            f"got {len(predictions)} predictions for {len(gold_answers)} questions"
        )
    if not predictions:
        raise ValueError("empty evaluation set")
    hits = 0
    for pred, golds in zip(predictions, gold_answers):
        norm = normalize_answer(pred)
        if any(norm == normalize_answer(g) for g in golds):
            hits += 1
    return hits / len(predictions)


@dataclass
class AblationRun:
    """One pretraining strategy's towers plus its own corpus encoding."""

    name: str
    params_q: EncoderParams
    config: EncoderConfig
    store: VectorStore


ABLATION_ORDER = ("progressive", "no_clustering", "ict")


def ablation_report(
    runs: Mapping[str, AblationRun],
    questions: Sequence[QAExample],
    chunks: Mapping[int, Chunk],
    ks: Sequence[int],
    max_answer_len: int = 10,
    threads: int = 1,
) -> tuple[dict[str, dict[int, float]], str]:
    """Side-by-side recall table across pretraining strategies.

    Returns (rows keyed by strategy, aligned text rendering). Raises when a
    strategy named in ABLATION_ORDER is missing from ``runs``.
    """
    missing = [name for name in ABLATION_ORDER if name not in runs]
    if missing:
        raise ValueError(f"missing checkpoints for: {', '.join(missing)}")
    rows: dict[str, dict[int, float]] = {}
    for name in ABLATION_ORDER:
        run = runs[name]
        recall, _ = recall_at_k(
            questions,
            run.params_q,
            run.config,
            run.store,
            chunks,
            ks,
            max_answer_len=max_answer_len,
            threads=threads,
        )
        rows[name] = recall
    return rows, render_recall_table(rows, sorted(set(int(k) for k in ks)))


def render_recall_table(rows: Mapping[str, Mapping[int, float]], ks: Sequence[int]) -> str:
    """Aligned text table, one strategy per row."""
    headers = ["method"] + [f"R@{k}" for k in ks]
    lines = [[name] + [f"{rows[name][k]:.3f}" for k in ks] for name in rows]
    widths = [
        max(len(headers[c]), *(len(line[c]) for line in lines)) if lines else len(headers[c])
        for c in range(len(headers))
    ]
    def fmt(cells: Sequence[str]) -> str:
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    return "\n".join([fmt(headers)] + [fmt(line) for line in lines])
