"""Pretraining pair generation: answer-candidate detection, template questions,
inverse-cloze pseudo pairs, and ingestion of externally generated pairs.

Detection is rule-based (date patterns plus capitalization runs) so the engine
has no model dependencies; higher-fidelity pairs from a learned question
generator enter through the same pair-file format via :func:`ingest_pairs`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .corpus import Chunk, Span, Token, normalize_answer, sentence_spans

DATE = "date"
ENTITY = "entity"

MAX_ENTITY_RUN = 6

_MONTHS = {
    "january", "february", "march", "april", "may", "june", "july",
    "august", "september", "october", "november", "december",
    "jan", "feb", "mar", "apr", "jun", "jul", "aug", "sep", "sept",
    "oct", "nov", "dec",
}

# auxiliaries fronted when a template question inverts subject and verb
_AUX = {
    "is", "are", "was", "were", "am", "be", "been", "being",
    "do", "does", "did", "has", "have", "had",
    "will", "would", "can", "could", "shall", "should", "may", "might", "must",
}


class PairFormatError(ValueError):
    """Raised for malformed or inconsistent pair files."""


@dataclass(frozen=True)
class AnswerCandidate:
    """A potential answer span plus the rule family that produced it."""

    span: Span
    kind: str  # DATE or ENTITY


@dataclass(frozen=True)
class QPPair:
    """A (question, paragraph, answer) training triple.

    ``positive_text`` overrides the chunk text as the positive side; inverse
    cloze pairs use it to drop the pseudo-question sentence.
    """

    question: str
    chunk_id: int
    answer: str
    source: str  # template | ict | external
    positive_text: str | None = None


def _is_year(text: str) -> bool:
    return len(text) == 4 and text.isdigit() and 1000 <= int(text) <= 2999


def _is_day(text: str) -> bool:
    return text.isdigit() and 1 <= len(text) <= 2 and 1 <= int(text) <= 31


def _is_month(text: str) -> bool:
    return text.lower() in _MONTHS


def _date_run_length(texts: list[str], i: int) -> int:
    """Longest date pattern starting at token i, or 0.

    Patterns: bare year; month [day] [[,] year]; day month year.
    """

    def tok(offset: int) -> str | None:
        j = i + offset
        return texts[j] if j < len(texts) else None

    t0, t1, t2, t3 = tok(0), tok(1), tok(2), tok(3)
    if t0 is not None and _is_month(t0):
        if t1 is not None and _is_day(t1):
            if t2 == "," and t3 is not None and _is_year(t3):
                return 4  # month day , year
            if t2 is not None and _is_year(t2):
                return 3  # month day year
            return 2  # month day
        if t1 == "," and t2 is not None and _is_year(t2):
            return 3  # month , year
        if t1 is not None and _is_year(t1):
            return 2  # month year
        return 1  # bare month
    if t0 is not None and _is_day(t0) and t1 is not None and _is_month(t1):
        if t2 is not None and _is_year(t2):
            return 3  # day month year
    if t0 is not None and _is_year(t0):
        return 1  # bare year
    return 0


def _entity_eligible(tok: Token, sentence_initial: bool) -> bool:
    text = tok.text
    return not sentence_initial and text[:1].isalpha() and text[:1].isupper()


def detect_candidates(chunk: Chunk) -> list[AnswerCandidate]:
    """Date runs plus capitalized entity runs, sorted by start position.

    Dates win overlaps: entity runs are built only over tokens no date
    consumed. Sentence-initial tokens are not entity-eligible (their
    capitalization is uninformative). Entity runs longer than
    ``MAX_ENTITY_RUN`` tokens are discarded, and candidates whose surface
    normalizes to the empty string are dropped.
    """
    texts = chunk.token_texts()
    n = len(texts)
    taken = [False] * n
    candidates: list[AnswerCandidate] = []

    i = 0
    while i < n:
        run = _date_run_length(texts, i)
        if run:
            candidates.append(AnswerCandidate(Span(chunk.id, i, i + run - 1), DATE))
            for j in range(i, i + run):
                taken[j] = True
            i += run
        else:
            i += 1

    sentence_starts = {lo for lo, _ in sentence_spans(chunk.tokens)}
    run_start: int | None = None
    for i in range(n + 1):
        eligible = (
            i < n
            and not taken[i]
            and _entity_eligible(chunk.tokens[i], i in sentence_starts)
        )
        if eligible and run_start is None:
            run_start = i
        elif not eligible and run_start is not None:
            length = i - run_start
            if length <= MAX_ENTITY_RUN:
                span = Span(chunk.id, run_start, i - 1)
                if normalize_answer(chunk.span_text(span)):
                    candidates.append(AnswerCandidate(span, ENTITY))
            run_start = None

    candidates.sort(key=lambda c: (c.span.start, c.span.end))
    return candidates


def _wh_tokens(kind: str) -> list[str]:
    return ["when"] if kind == DATE else ["who", "or", "what"]


def make_template_question(chunk: Chunk, candidate: AnswerCandidate) -> QPPair:
    """Turn a candidate's containing sentence into a wh-question.

    The answer tokens are removed, punctuation is dropped, everything is
    lowercased, subject and auxiliary are inverted when the second remaining
    token is an auxiliary, and the wh-word is fronted. Deterministic.
    """
    span = candidate.span
    sentences = sentence_spans(chunk.tokens)
    lo, hi = next(
        ((lo, hi) for lo, hi in sentences if lo <= span.start <= hi),
        (0, len(chunk.tokens) - 1),
    )
    remaining = [
        chunk.tokens[i].text.lower()
        for i in range(lo, hi + 1)
        if not span.start <= i <= span.end and chunk.tokens[i].text.isalnum()
    ]
    if len(remaining) >= 2 and remaining[1] in _AUX:
        remaining[0], remaining[1] = remaining[1], remaining[0]
    question = " ".join(_wh_tokens(candidate.kind) + remaining)
    return QPPair(
        question=question,
        chunk_id=chunk.id,
        answer=chunk.span_text(span),
        source="template",
    )


def generate_template_pairs(
    chunks: Iterable[Chunk], per_chunk_cap: int | None = None
) -> list[QPPair]:
    """All template pairs, ordered by (chunk id, candidate start)."""
    pairs: list[QPPair] = []
    for chunk in chunks:
        made = 0
        for candidate in detect_candidates(chunk):
            if per_chunk_cap is not None and made >= per_chunk_cap:
                break
            pairs.append(make_template_question(chunk, candidate))
            made += 1
    return pairs


def make_ict_pair(
    chunk: Chunk, rng: np.random.Generator, drop_prob: float = 0.9
) -> QPPair | None:
    """Inverse cloze pair: one sentence becomes the pseudo-question.

    With probability ``drop_prob`` the sentence is removed from the paragraph
    text used as the positive. Chunks with fewer than two sentences yield no
    pair (returns None).
    """
    sentences = sentence_spans(chunk.tokens)
    if len(sentences) < 2:
        return None
    idx = int(rng.integers(len(sentences)))
    lo, hi = sentences[idx]
    q_start = chunk.tokens[lo].char_start
    q_end = chunk.tokens[hi].char_end
    question = chunk.text[q_start:q_end]
    drop = bool(rng.random() < drop_prob)
    positive = None
    if drop:
        positive = (chunk.text[:q_start] + chunk.text[q_end:]).strip()
    return QPPair(
        question=question,
        chunk_id=chunk.id,
        answer="",
        source="ict",
        positive_text=positive,
    )


def generate_ict_pairs(
    chunks: Iterable[Chunk], rng: np.random.Generator, drop_prob: float = 0.9
) -> list[QPPair]:
    """One inverse cloze pair per chunk where possible, in chunk order."""
    pairs = []
    for chunk in chunks:
        pair = make_ict_pair(chunk, rng, drop_prob=drop_prob)
        if pair is not None:
            pairs.append(pair)
    return pairs


# --- pair files ---


def write_pairs(pairs: Iterable[QPPair], path: str | Path) -> None:
    """Newline-delimited JSON pair records."""
    with open(path, "w", encoding="utf-8") as fh:
        for pair in pairs:
            rec: dict = {
                "question": pair.question,
                "chunk_id": pair.chunk_id,
                "answer": pair.answer,
            }
            if pair.source != "external":
                rec["source"] = pair.source
            if pair.positive_text is not None:
                rec["positive_text"] = pair.positive_text
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def _parse_pair_lines(path: str | Path) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise PairFormatError(f"{path}: line {lineno}: {exc}") from exc
            for key in ("question", "chunk_id", "answer"):
                if key not in rec:
                    raise PairFormatError(f"{path}: line {lineno}: missing {key!r}")
            yield lineno, rec


def read_pairs(path: str | Path, valid_chunk_ids: set[int] | None = None) -> list[QPPair]:
    """Load a pair file, preserving a recorded source (default external)."""
    pairs: list[QPPair] = []
    for lineno, rec in _parse_pair_lines(path):
        chunk_id = int(rec["chunk_id"])
        if valid_chunk_ids is not None and chunk_id not in valid_chunk_ids:
            raise PairFormatError(
                f"{path}: line {lineno}: unknown chunk_id {chunk_id}"
            )
        pairs.append(
            QPPair(
                question=str(rec["question"]),
                chunk_id=chunk_id,
                answer=str(rec["answer"]),
                source=str(rec.get("source", "external")),
                positive_text=rec.get("positive_text"),
            )
        )
    return pairs


def ingest_pairs(path: str | Path, valid_chunk_ids: set[int]) -> list[QPPair]:
    """Load externally generated pairs; every record becomes source=external.

    Unknown chunk ids and malformed JSON are rejected with the offending line
    number.
    """
    pairs: list[QPPair] = []
    for lineno, rec in _parse_pair_lines(path):
        chunk_id = int(rec["chunk_id"])
        if chunk_id not in valid_chunk_ids:
            raise PairFormatError(f"{path}: line {lineno}: unknown chunk_id {chunk_id}")
        pairs.append(
            QPPair(
                question=str(rec["question"]),
                chunk_id=chunk_id,
                answer=str(rec["answer"]),
                source="external",
            )
        )
    return pairs
