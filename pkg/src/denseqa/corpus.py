"""Corpus handling: tokenization, document chunking, and answer-span matching.

Documents arrive as JSONL records of paragraph strings, get tokenized with a
whitespace + punctuation splitter, and are packed into token-budgeted chunks
that reuse paragraph boundaries. Chunks keep their source text and character
offsets so any token span's surface form can be recovered exactly.
"""

from __future__ import annotations

import json
import re
import string
import struct
import unicodedata
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

DEFAULT_CHUNK_LEN = 256
DEFAULT_MAX_ANSWER_LEN = 10

_ASCII_PUNCT = frozenset(string.punctuation)
_ARTICLES_RE = re.compile(r"\b(a|an|the)\b")
_SENTENCE_END = frozenset({".", "!", "?"})


class CorpusFormatError(ValueError):
    """Raised for malformed corpus or chunk-store files."""


def _is_punct(ch: str) -> bool:
    return ch in _ASCII_PUNCT or unicodedata.category(ch).startswith("P")


@dataclass(frozen=True)
class Token:
    """One token plus its character offsets into the source text."""

    text: str
    char_start: int
    char_end: int

    def __post_init__(self):
        if not self.char_start < self.char_end:
            raise ValueError("token offsets must satisfy char_start < char_end")


@dataclass(frozen=True)
class Span:
    """An inclusive token index range inside one chunk."""

    chunk_id: int
    start: int
    end: int

    def __post_init__(self):
        if not 0 <= self.start <= self.end:
            raise ValueError("span must satisfy 0 <= start <= end")

    @property
    def length(self) -> int:
        return self.end - self.start + 1


@dataclass
class Chunk:
    """A tokenized corpus passage with document provenance."""

    id: int
    doc_id: str
    tokens: list[Token]
    text: str

    def span_text(self, span: Span) -> str:
        """Surface form of ``span``, sliced from the original text."""
        first = self.tokens[span.start]
        last = self.tokens[span.end]
        return self.text[first.char_start : last.char_end]

    def token_texts(self) -> list[str]:
        return [t.text for t in self.tokens]


def tokenize(text: str) -> list[Token]:
    """Split on whitespace, detaching each punctuation character as its own token.

    Case is preserved and every token's offsets cover exactly the characters
    it came from, so ``text[t.char_start:t.char_end] == t.text``.
    """
    tokens: list[Token] = []
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch.isspace():
            i += 1
        elif _is_punct(ch):
            tokens.append(Token(ch, i, i + 1))
            i += 1
        else:
            j = i + 1
            while j < n and not text[j].isspace() and not _is_punct(text[j]):
                j += 1
            tokens.append(Token(text[i:j], i, j))
            i = j
    return tokens


def normalize_answer(text: str) -> str:
    """Lowercase, strip punctuation, drop articles (a/an/the), collapse spaces."""
    lowered = text.lower()
    no_punct = "".join(ch for ch in lowered if not _is_punct(ch))
    no_articles = _ARTICLES_RE.sub(" ", no_punct)
    return " ".join(no_articles.split())


def sentence_spans(tokens: Sequence[Token]) -> list[tuple[int, int]]:
    """Inclusive token ranges of sentences; a sentence ends at '.', '!' or '?'.

    The terminal punctuation token belongs to its sentence. A trailing run
    without terminal punctuation still counts as a sentence.
    """
    spans: list[tuple[int, int]] = []
    lo = 0
    for i, tok in enumerate(tokens):
        if tok.text in _SENTENCE_END:
            spans.append((lo, i))
            lo = i + 1
    if lo < len(tokens):
        spans.append((lo, len(tokens) - 1))
    return spans


def _hard_split(tokens: list[Token], max_len: int) -> list[list[Token]]:
    return [tokens[i : i + max_len] for i in range(0, len(tokens), max_len)]


def _greedy_groups(lengths: Sequence[int], max_len: int) -> list[list[int]]:
    """Group piece indices greedily, closing a group once its size reaches max_len."""
    groups: list[list[int]] = []
    current: list[int] = []
    size = 0
    for idx, length in enumerate(lengths):
        current.append(idx)
        size += length
        if size >= max_len:
            groups.append(current)
            current, size = [], 0
    if current:
        groups.append(current)
    return groups


def chunk_document(
    paragraphs: Sequence[Sequence[Token]], max_len: int = DEFAULT_CHUNK_LEN
) -> list[list[Token]]:
    """Pack tokenized paragraphs into chunk token groups.

    Paragraphs are appended in order and a chunk closes as soon as its length
    reaches or exceeds ``max_len`` after an append, so a chunk may overshoot by
    at most one paragraph. A single paragraph longer than ``max_len`` is first
    split hard at multiples of ``max_len``. Concatenating the returned groups
    reproduces the input tokens exactly.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    pieces: list[list[Token]] = []
    for para in paragraphs:
        toks = list(para)
        if not toks:
            continue
        if len(toks) > max_len:
            pieces.extend(_hard_split(toks, max_len))
        else:
            pieces.append(toks)
    groups = _greedy_groups([len(p) for p in pieces], max_len)
    return [[tok for i in group for tok in pieces[i]] for group in groups]


def build_chunks(
    doc_id: str,
    paragraphs: Sequence[str],
    max_len: int = DEFAULT_CHUNK_LEN,
    first_id: int = 0,
) -> list[Chunk]:
    """Tokenize paragraph strings and chunk them, preserving source text.

    A chunk's text is its piece texts joined by newlines; token offsets are
    rebased into that joined text. Ids are assigned sequentially from
    ``first_id`` in document order.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    pieces: list[tuple[str, list[Token]]] = []
    for text in paragraphs:
        toks = tokenize(text)
        if not toks:
            continue
        if len(toks) <= max_len:
            pieces.append((text, toks))
        else:
            for part in _hard_split(toks, max_len):
                base = part[0].char_start
                piece_text = text[base : part[-1].char_end]
                rebased = [
                    Token(t.text, t.char_start - base, t.char_end - base)
                    for t in part
                ]
                pieces.append((piece_text, rebased))
    groups = _greedy_groups([len(p[1]) for p in pieces], max_len)
    chunks: list[Chunk] = []
    for gi, group in enumerate(groups):
        tokens: list[Token] = []
        shift = 0
        texts: list[str] = []
        for i in group:
            ptext, ptoks = pieces[i]
            tokens.extend(
                Token(t.text, t.char_start + shift, t.char_end + shift)
                for t in ptoks
            )
            texts.append(ptext)
            shift += len(ptext) + 1
        chunks.append(
            Chunk(id=first_id + gi, doc_id=doc_id, tokens=tokens, text="\n".join(texts))
        )
    return chunks


def _punct_only(text: str) -> bool:
    return all(_is_punct(ch) or ch.isspace() for ch in text)


def find_answer_spans(
    chunk: Chunk,
    answers: Sequence[str],
    max_answer_len: int = DEFAULT_MAX_ANSWER_LEN,
) -> list[Span]:
    """Every token span whose normalized surface equals a normalized answer.

    Spans longer than ``max_answer_len`` tokens are excluded, as are spans
    starting or ending on a punctuation-only token (those merely duplicate
    their trimmed core). Answers that normalize to the empty string never
    match. Result is sorted by (start, end).
    """
    targets = {normalize_answer(a) for a in answers}
    targets.discard("")
    if not targets:
        return []
    spans: list[Span] = []
    toks = chunk.tokens
    punct = [_punct_only(t.text) for t in toks]
    for start in range(len(toks)):
        if punct[start]:
            continue
        limit = min(len(toks), start + max_answer_len)
        lo = toks[start].char_start
        for end in range(start, limit):
            if punct[end]:
                continue
            surface = chunk.text[lo : toks[end].char_end]
            if normalize_answer(surface) in targets:
                spans.append(Span(chunk.id, start, end))
    return spans


# --- corpus and chunk-store files ---


def read_corpus(path: str | Path) -> Iterator[tuple[str, list[str]]]:
    """Yield (doc_id, paragraphs) from a JSONL corpus file."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"{path}: line {lineno}: {exc}") from exc
            if not isinstance(rec, dict) or "doc_id" not in rec or "paragraphs" not in rec:
                raise CorpusFormatError(
                    f"{path}: line {lineno}: expected object with doc_id and paragraphs"
                )
            yield str(rec["doc_id"]), [str(p) for p in rec["paragraphs"]]


def chunk_corpus(
    records: Iterable[tuple[str, list[str]]], max_len: int = DEFAULT_CHUNK_LEN
) -> list[Chunk]:
    """Chunk every document, assigning ids by (document order, chunk order)."""
    chunks: list[Chunk] = []
    for doc_id, paragraphs in records:
        new = build_chunks(doc_id, paragraphs, max_len=max_len, first_id=len(chunks))
        chunks.extend(new)
    return chunks


def _sidecar_path(jsonl_path: str | Path) -> Path:
    return Path(f"{jsonl_path}.tok")


def write_chunk_store(chunks: Sequence[Chunk], jsonl_path: str | Path) -> None:
    """Write chunks as JSONL plus a binary token-offset sidecar (LE u32 pairs)."""
    with open(jsonl_path, "w", encoding="utf-8") as fh:
        for chunk in chunks:
            fh.write(
                json.dumps(
                    {"id": chunk.id, "doc_id": chunk.doc_id, "text": chunk.text},
                    ensure_ascii=False,
                )
                + "\n"
            )
    with open(_sidecar_path(jsonl_path), "wb") as fh:
        for chunk in chunks:
            fh.write(struct.pack("<I", len(chunk.tokens)))
            for tok in chunk.tokens:
                fh.write(struct.pack("<II", tok.char_start, tok.char_end))


def read_chunk_store(jsonl_path: str | Path) -> list[Chunk]:
    """Reload chunks written by :func:`write_chunk_store`."""
    records: list[dict] = []
    with open(jsonl_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"{jsonl_path}: line {lineno}: {exc}") from exc
    blob = _sidecar_path(jsonl_path).read_bytes()
    chunks: list[Chunk] = []
    pos = 0
    for rec in records:
        if pos + 4 > len(blob):
            raise CorpusFormatError(f"{jsonl_path}: token sidecar truncated")
        (count,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        if pos + 8 * count > len(blob):
            raise CorpusFormatError(f"{jsonl_path}: token sidecar truncated")
        text = rec["text"]
        tokens = []
        for _ in range(count):
            start, end = struct.unpack_from("<II", blob, pos)
            pos += 8
            tokens.append(Token(text[start:end], start, end))
        chunks.append(
            Chunk(id=int(rec["id"]), doc_id=str(rec["doc_id"]), tokens=tokens, text=text)
        )
    if pos != len(blob):
        raise CorpusFormatError(f"{jsonl_path}: token sidecar has trailing bytes")
    return chunks
