"""Single command-line entry point exposing the pipeline as subcommands.

Stages form a DAG: chunk -> gen-data -> pretrain -> encode-corpus ->
build-index -> finetune -> eval-retrieval / eval-qa / query / ablation.
Settings resolve as CLI flag > config file > built-in default, and every run
records a config fingerprint in a manifest next to its artifacts.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import os
import sys
from dataclasses import fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import corpus as corpus_mod
from . import datagen, evalqa, finetune as finetune_mod, pretrain as pretrain_mod
from .encoder import EncoderConfig, load_params, save_params
from .finetune import (
    AnswerSetCache,
    FinetuneConfig,
    answer_inference,
    build_answer_cache,
    load_reader,
    read_qa_file,
    save_reader,
)
from .pretrain import PretrainConfig, encode_chunks, progressive_train
from .seeding import STREAM_ICT, STREAM_INDEX_BUILD, derive_rng, derive_seed
from .vecindex import IvfIndex, VectorStore, ivf_build

CONFIG_ENV_VAR = "DENSEQA_CONFIG"


class CliError(ValueError):
    """A runtime failure reported as a single machine-parseable line."""


# --- config resolution ---


class ConfigSource:
    """key = value sections from an INI-style config file."""

    def __init__(self, path: str | None):
        self._parser = configparser.ConfigParser()
        if path:
            if not Path(path).exists():
                raise CliError(f"config file not found: {path}")
            self._parser.read(path, encoding="utf-8")

    def get(self, section: str, key: str) -> str | None:
        return self._parser.get(section, key, fallback=None)


def _cast_bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in {"1", "true", "yes", "on"}:
        return True
    if lowered in {"0", "false", "no", "off"}:
        return False
    raise CliError(f"cannot parse boolean value {raw!r}")


def resolve(args, cfg: ConfigSource, section: str, name: str, default, cast=None):
    """CLI flag > config file > default."""
    flag_value = getattr(args, name, None)
    if flag_value is not None:
        return flag_value
    raw = cfg.get(section, name)
    if raw is not None:
        if cast is bool or isinstance(default, bool):
            return _cast_bool(raw)
        caster = cast or (type(default) if default is not None else str)
        return caster(raw)
    return default


def _dataclass_from(args, cfg: ConfigSource, section: str, cls, overrides: dict | None = None):
    values = dict(overrides or {})
    for f in fields(cls):
        if f.name in values:
            continue
        default = getattr(cls, f.name, f.default)
        values[f.name] = resolve(args, cfg, section, f.name, f.default)
    return cls(**values)


def _fingerprint(command: str, settings: dict) -> str:
    canon = json.dumps({"command": command, "settings": settings}, sort_keys=True, default=str)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def _sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def record_manifest(artifacts: Sequence[Path], fingerprint: str) -> None:
    """Map each artifact to its config fingerprint and content hash in a
    manifest.json stored beside it."""
    by_dir: dict[Path, list[Path]] = {}
    for artifact in artifacts:
        by_dir.setdefault(artifact.parent, []).append(artifact)
    for directory, paths in by_dir.items():
        manifest_path = directory / "manifest.json"
        entries: dict = {}
        if manifest_path.exists():
            entries = json.loads(manifest_path.read_text(encoding="utf-8"))
        for path in paths:
            entries[path.name] = {
                "config_fingerprint": fingerprint,
                "sha256": _sha256_file(path),
            }
        manifest_path.write_text(
            json.dumps(entries, sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )


# --- shared loading helpers ---


def _load_chunks(path: str) -> tuple[list, dict[int, corpus_mod.Chunk]]:
    chunks = corpus_mod.read_chunk_store(path)
    return chunks, {c.id: c for c in chunks}


def _require(path_value: str | None, flag: str) -> str:
    if not path_value:
        raise CliError(f"missing required path: {flag}")
    return path_value


def _parse_ks(raw: str) -> list[int]:
    try:
        return [int(p) for p in raw.split(",") if p.strip()]
    except ValueError as exc:
        raise CliError(f"cannot parse k list {raw!r}") from exc


# --- subcommands ---


def cmd_chunk(args) -> int:
    cfg = ConfigSource(args.config)
    max_len = resolve(args, cfg, "corpus", "max_chunk_len", corpus_mod.DEFAULT_CHUNK_LEN, int)
    corpus_path = _require(args.corpus, "--corpus")
    out = Path(_require(args.out, "--out"))
    chunks = corpus_mod.chunk_corpus(corpus_mod.read_corpus(corpus_path), max_len=max_len)
    out.parent.mkdir(parents=True, exist_ok=True)
    corpus_mod.write_chunk_store(chunks, out)
    fp = _fingerprint("chunk", {"max_chunk_len": max_len, "seed": args.seed})
    record_manifest([out, Path(f"{out}.tok")], fp)
    print(f"wrote {len(chunks)} chunks to {out}")
    return 0


def cmd_gen_data(args) -> int:
    cfg = ConfigSource(args.config)
    generator = resolve(args, cfg, "datagen", "generator", "template")
    drop_prob = resolve(args, cfg, "datagen", "ict_drop_prob", 0.9, float)
    cap = resolve(args, cfg, "datagen", "per_chunk_cap", None, int)
    chunks, _ = _load_chunks(_require(args.chunks, "--chunks"))
    out = Path(_require(args.out, "--out"))
    if generator == "template":
        pairs = datagen.generate_template_pairs(chunks, per_chunk_cap=cap)
    elif generator == "ict":
        rng = derive_rng(args.seed, STREAM_ICT)
        pairs = datagen.generate_ict_pairs(chunks, rng, drop_prob=drop_prob)
    else:
        raise CliError(f"unknown generator {generator!r} (expected template or ict)")
    out.parent.mkdir(parents=True, exist_ok=True)
    datagen.write_pairs(pairs, out)
    fp = _fingerprint(
        "gen-data",
        {"generator": generator, "ict_drop_prob": drop_prob, "per_chunk_cap": cap,
         "seed": args.seed},
    )
    record_manifest([out], fp)
    print(f"wrote {len(pairs)} pairs to {out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = ConfigSource(args.config)
    enc_config = _dataclass_from(args, cfg, "encoder", EncoderConfig, {"seed": args.seed})
    train_config = _dataclass_from(args, cfg, "pretrain", PretrainConfig, {"seed": args.seed})
    chunks, by_id = _load_chunks(_require(args.chunks, "--chunks"))
    pairs = datagen.read_pairs(_require(args.pairs, "--pairs"), {c.id for c in chunks})
    out = Path(_require(args.out, "--out"))
    result = progressive_train(
        train_config, pairs, by_id, enc_config, out, threads=args.threads
    )
    fp = _fingerprint(
        "pretrain",
        {"encoder": enc_config.__dict__, "pretrain": train_config.__dict__},
    )
    artifacts = [out / "train_log.jsonl"]
    for step in result.checkpoint_steps:
        artifacts.extend(pretrain_mod.checkpoint_paths(out, step).values())
    artifacts.extend(pretrain_mod.final_checkpoint_paths(out).values())
    record_manifest(artifacts, fp)
    print(
        f"pretrained for {train_config.total_updates} updates; "
        f"checkpoints at steps {result.checkpoint_steps} in {out}"
    )
    return 0


def cmd_encode_corpus(args) -> int:
    chunks, _ = _load_chunks(_require(args.chunks, "--chunks"))
    params_p, enc_config = load_params(_require(args.checkpoint, "--checkpoint"))
    out = Path(_require(args.out, "--out"))
    store = encode_chunks(chunks, params_p, enc_config, threads=args.threads)
    out.parent.mkdir(parents=True, exist_ok=True)
    store.save(out)
    fp = _fingerprint("encode-corpus", {"encoder": enc_config.__dict__})
    record_manifest([out], fp)
    print(f"encoded {store.count} chunks into {out}")
    return 0


def cmd_build_index(args) -> int:
    cfg = ConfigSource(args.config)
    ncells = resolve(args, cfg, "index", "ncells", 100, int)
    nprobe = resolve(args, cfg, "index", "nprobe", 20, int)
    store = VectorStore.load(_require(args.vectors, "--vectors"))
    out = Path(_require(args.out, "--out"))
    index = ivf_build(
        store,
        ncells=ncells,
        seed=derive_seed(args.seed, STREAM_INDEX_BUILD),
        nprobe_default=nprobe,
    )
    out.parent.mkdir(parents=True, exist_ok=True)
    index.save(out)
    fp = _fingerprint("build-index", {"ncells": ncells, "nprobe": nprobe, "seed": args.seed})
    record_manifest([out], fp)
    print(f"built IVF index with {index.ncells} cells into {out}")
    return 0


def cmd_finetune(args) -> int:
    cfg = ConfigSource(args.config)
    ft_config = _dataclass_from(args, cfg, "finetune", FinetuneConfig, {"seed": args.seed})
    chunks, by_id = _load_chunks(_require(args.chunks, "--chunks"))
    store = VectorStore.load(_require(args.vectors, "--vectors"))
    params_q, enc_config = load_params(_require(args.question_ckpt, "--question-ckpt"))
    params_p, _ = load_params(_require(args.paragraph_ckpt, "--paragraph-ckpt"))
    questions = read_qa_file(_require(args.questions, "--questions"))
    out = Path(_require(args.out, "--out"))
    out.mkdir(parents=True, exist_ok=True)

    cache_fp = _fingerprint(
        "answer-cache",
        {
            "vectors": _sha256_file(Path(args.vectors)),
            "question_ckpt": _sha256_file(Path(args.question_ckpt)),
            "questions": _sha256_file(Path(args.questions)),
            "depth": ft_config.cache_depth,
            "max_answer_len": ft_config.max_answer_len,
        },
    )
    cache_path = Path(args.cache) if args.cache else out / "answer_cache.json"
    if cache_path.exists():
        cache = AnswerSetCache.load(cache_path)
        if cache.fingerprint != cache_fp:
            raise CliError(
                f"answer cache {cache_path} was built for a different corpus/checkpoint"
            )
    else:
        cache = build_answer_cache(
            questions,
            params_q,
            enc_config,
            store,
            by_id,
            depth=ft_config.cache_depth,
            max_answer_len=ft_config.max_answer_len,
            fingerprint=cache_fp,
            threads=args.threads,
        )
        cache.save(cache_path)

    result = finetune_mod.finetune(
        ft_config, questions, by_id, store, params_q, params_p, enc_config, cache=cache
    )
    q_path = out / "question.ckpt"
    r_path = out / "reader.ckpt"
    save_params(q_path, result.params_q, enc_config)
    save_reader(r_path, result.reader)
    fp = _fingerprint("finetune", {"finetune": ft_config.__dict__})
    record_manifest([q_path, r_path, cache_path], fp)
    print(
        f"finetuned on {len(questions)} questions "
        f"(skipped {result.skipped_questions}); wrote {q_path} and {r_path}"
    )
    return 0


def cmd_eval_retrieval(args) -> int:
    cfg = ConfigSource(args.config)
    ks = _parse_ks(resolve(args, cfg, "eval", "ks", "5,10,20"))
    max_answer_len = resolve(args, cfg, "finetune", "max_answer_len", 10, int)
    chunks, by_id = _load_chunks(_require(args.chunks, "--chunks"))
    store = VectorStore.load(_require(args.vectors, "--vectors"))
    params_q, enc_config = load_params(_require(args.question_ckpt, "--question-ckpt"))
    questions = read_qa_file(_require(args.questions, "--questions"))
    index = IvfIndex.load(args.index) if args.index else None
    recall, records = evalqa.recall_at_k(
        questions, params_q, enc_config, store, by_id, ks,
        max_answer_len=max_answer_len, index=index, nprobe=args.nprobe,
        threads=args.threads,
    )
    fp = _fingerprint("eval-retrieval", {"ks": ks, "max_answer_len": max_answer_len})
    report = evalqa.EvalReport(
        recall_at=recall, config_fingerprint=fp, per_question=records
    )
    out = Path(_require(args.out, "--out"))
    out.parent.mkdir(parents=True, exist_ok=True)
    report.save(out)
    record_manifest([out], fp)
    print("  ".join(f"R@{k}={recall[k]:.3f}" for k in sorted(recall)))
    return 0


def cmd_eval_qa(args) -> int:
    cfg = ConfigSource(args.config)
    weight = resolve(args, cfg, "finetune", "retrieval_weight", 1.0, float)
    topk = resolve(args, cfg, "finetune", "topk", 5, int)
    max_answer_len = resolve(args, cfg, "finetune", "max_answer_len", 10, int)
    chunks, by_id = _load_chunks(_require(args.chunks, "--chunks"))
    store = VectorStore.load(_require(args.vectors, "--vectors"))
    params_q, enc_config = load_params(_require(args.question_ckpt, "--question-ckpt"))
    params_p, _ = load_params(_require(args.paragraph_ckpt, "--paragraph-ckpt"))
    reader = load_reader(_require(args.reader_ckpt, "--reader-ckpt"))
    questions = read_qa_file(_require(args.questions, "--questions"))
    index = IvfIndex.load(args.index) if args.index else None

    predictions = []
    records = []
    for ex in questions:
        raw, _, pred = answer_inference(
            ex.question, params_q, enc_config, store, by_id, reader, params_p,
            k=topk, retrieval_weight=weight, max_answer_len=max_answer_len,
            index=index, nprobe=args.nprobe,
        )
        predictions.append(raw)
        records.append(
            {
                "question": ex.question,
                "prediction": raw,
                "combined_score": pred.combined,
                "chunk_id": pred.span.chunk_id,
            }
        )
    em = evalqa.exact_match(predictions, [ex.answers for ex in questions])
    fp = _fingerprint(
        "eval-qa", {"retrieval_weight": weight, "topk": topk, "max_answer_len": max_answer_len}
    )
    report = evalqa.EvalReport(em=em, config_fingerprint=fp, per_question=records)
    out = Path(_require(args.out, "--out"))
    out.parent.mkdir(parents=True, exist_ok=True)
    report.save(out)
    artifacts = [out]
    if args.predictions:
        pred_path = Path(args.predictions)
        pred_path.parent.mkdir(parents=True, exist_ok=True)
        with open(pred_path, "w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
        artifacts.append(pred_path)
    record_manifest(artifacts, fp)
    print(f"EM={em:.4f} over {len(questions)} questions")
    return 0


def cmd_query(args) -> int:
    cfg = ConfigSource(args.config)
    weight = resolve(args, cfg, "finetune", "retrieval_weight", 1.0, float)
    topk = resolve(args, cfg, "finetune", "topk", 5, int)
    max_answer_len = resolve(args, cfg, "finetune", "max_answer_len", 10, int)
    chunks, by_id = _load_chunks(_require(args.chunks, "--chunks"))
    store = VectorStore.load(_require(args.vectors, "--vectors"))
    params_q, enc_config = load_params(_require(args.question_ckpt, "--question-ckpt"))
    params_p, _ = load_params(_require(args.paragraph_ckpt, "--paragraph-ckpt"))
    reader = load_reader(_require(args.reader_ckpt, "--reader-ckpt"))
    index = IvfIndex.load(args.index) if args.index else None
    for line in sys.stdin:
        question = line.strip()
        if not question:
            continue
        raw, _, pred = answer_inference(
            question, params_q, enc_config, store, by_id, reader, params_p,
            k=topk, retrieval_weight=weight, max_answer_len=max_answer_len,
            index=index, nprobe=args.nprobe,
        )
        print(
            json.dumps(
                {
                    "question": question,
                    "prediction": raw,
                    "combined_score": pred.combined,
                    "chunk_id": pred.span.chunk_id,
                },
                ensure_ascii=False,
            )
        )
    return 0


def cmd_ablation(args) -> int:
    cfg = ConfigSource(args.config)
    ks = _parse_ks(resolve(args, cfg, "eval", "ks", "5,10,20"))
    max_answer_len = resolve(args, cfg, "finetune", "max_answer_len", 10, int)
    chunks, by_id = _load_chunks(_require(args.chunks, "--chunks"))
    questions = read_qa_file(_require(args.questions, "--questions"))
    run_dirs = {
        "progressive": args.progressive,
        "no_clustering": args.no_clustering,
        "ict": args.ict,
    }
    runs = {}
    for name, run_dir in run_dirs.items():
        if not run_dir:
            raise CliError(f"missing checkpoint directory for --{name.replace('_', '-')}")
        final = pretrain_mod.final_checkpoint_paths(run_dir)
        if not final["question"].exists() or not final["paragraph"].exists():
            raise CliError(f"missing checkpoint files under {run_dir}")
        params_q, enc_config = load_params(final["question"])
        params_p, _ = load_params(final["paragraph"])
        store = encode_chunks(chunks, params_p, enc_config, threads=args.threads)
        runs[name] = evalqa.AblationRun(
            name=name, params_q=params_q, config=enc_config, store=store
        )
    rows, table = evalqa.ablation_report(
        runs, questions, by_id, ks, max_answer_len=max_answer_len, threads=args.threads
    )
    fp = _fingerprint("ablation", {"ks": ks, "max_answer_len": max_answer_len})
    out = Path(_require(args.out, "--out"))
    out.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "rows": {name: {str(k): v for k, v in r.items()} for name, r in rows.items()},
        "table": table,
        "config_fingerprint": fp,
    }
    out.write_text(json.dumps(payload, sort_keys=True) + "\n", encoding="utf-8")
    record_manifest([out], fp)
    print(table)
    return 0


# --- parser ---


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", default=os.environ.get(CONFIG_ENV_VAR) or None,
                     help="INI config file [default: $DENSEQA_CONFIG if set]")
    sub.add_argument("--seed", type=int, default=0, help="root random seed [default: 0]")
    sub.add_argument("--threads", type=int, default=1,
                     help="worker thread cap; results are identical for any value [default: 1]")


def _int_flag(sub, name, help_text):
    sub.add_argument(name, type=int, default=None, help=help_text)


def _float_flag(sub, name, help_text):
    sub.add_argument(name, type=float, default=None, help=help_text)


def _bool_flag(sub, name, help_text):
    sub.add_argument(name, type=_cast_bool, default=None, metavar="BOOL", help=help_text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="denseqa",
        description="Dense retrieval pretraining and open-domain QA pipeline",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("chunk", help="split a corpus into token-budgeted chunks")
    _add_common(p)
    p.add_argument("--corpus", help="JSONL corpus of {doc_id, paragraphs}")
    p.add_argument("--out", help="output chunk store (JSONL + .tok sidecar)")
    _int_flag(p, "--max-chunk-len", "chunk token budget [default: 256]")
    p.set_defaults(func=cmd_chunk, max_chunk_len=None)

    p = subs.add_parser("gen-data", help="generate pretraining pairs from chunks")
    _add_common(p)
    p.add_argument("--chunks", help="chunk store path")
    p.add_argument("--out", help="output pair file (JSONL)")
    p.add_argument("--generator", choices=["template", "ict"], default=None,
                   help="pair generator [default: template]")
    _float_flag(p, "--ict-drop-prob",
                "probability of removing the pseudo-question sentence [default: 0.9]")
    _int_flag(p, "--per-chunk-cap", "max template pairs per chunk [default: unlimited]")
    p.set_defaults(func=cmd_gen_data)

    p = subs.add_parser("pretrain", help="progressive contrastive pretraining")
    _add_common(p)
    p.add_argument("--chunks", help="chunk store path")
    p.add_argument("--pairs", help="pair file path")
    p.add_argument("--out", help="checkpoint output directory")
    _int_flag(p, "--batch-size", "in-batch size [default: 80]")
    _int_flag(p, "--accum-steps", "batches per parameter update [default: 8]")
    _int_flag(p, "--total-updates", "parameter updates to run [default: 90000]")
    _int_flag(p, "--recluster-every", "updates between reclusterings [default: 20000]")
    _int_flag(p, "--num-clusters", "clusters per reclustering [default: 20]")
    _float_flag(p, "--learning-rate", "Adam learning rate [default: 1e-5]")
    _float_flag(p, "--adam-beta1", "Adam beta1 [default: 0.9]")
    _float_flag(p, "--adam-beta2", "Adam beta2 [default: 0.999]")
    _float_flag(p, "--adam-eps", "Adam epsilon [default: 1e-8]")
    _bool_flag(p, "--clustering-enabled",
               "draw each batch from one cluster; off = uniform sampling [default: true]")
    _int_flag(p, "--n-buckets", "feature hash buckets [default: 65536]")
    _int_flag(p, "--ngram-min", "smallest char n-gram [default: 3]")
    _int_flag(p, "--ngram-max", "largest char n-gram [default: 5]")
    _int_flag(p, "--hidden-dim", "embedding width [default: 64]")
    _int_flag(p, "--index-dim", "projection width [default: 32]")
    _bool_flag(p, "--share-towers", "share weights between towers [default: false]")
    p.set_defaults(func=cmd_pretrain)

    p = subs.add_parser("encode-corpus", help="encode all chunks with a paragraph tower")
    _add_common(p)
    p.add_argument("--chunks", help="chunk store path")
    p.add_argument("--checkpoint", help="paragraph tower checkpoint")
    p.add_argument("--out", help="output vector file")
    p.set_defaults(func=cmd_encode_corpus)

    p = subs.add_parser("build-index", help="build an IVF index over corpus vectors")
    _add_common(p)
    p.add_argument("--vectors", help="vector file path")
    p.add_argument("--out", help="output index file")
    _int_flag(p, "--ncells", "number of Voronoi cells [default: 100]")
    _int_flag(p, "--nprobe", "default cells probed per query [default: 20]")
    p.set_defaults(func=cmd_build_index)

    p = subs.add_parser("finetune", help="finetune question tower and reader on QA data")
    _add_common(p)
    p.add_argument("--chunks", help="chunk store path")
    p.add_argument("--vectors", help="corpus vector file")
    p.add_argument("--questions", help="QA dataset (JSONL question/answers)")
    p.add_argument("--question-ckpt", help="pretrained question tower checkpoint")
    p.add_argument("--paragraph-ckpt", help="pretrained paragraph tower checkpoint")
    p.add_argument("--out", help="output directory")
    p.add_argument("--cache", default=None,
                   help="answer-set cache path [default: <out>/answer_cache.json]")
    _int_flag(p, "--topk", "paragraphs retrieved per question [default: 5]")
    _int_flag(p, "--early-candidates",
              "candidate pool for the retrieval-only loss [default: 5000]")
    _int_flag(p, "--cache-depth", "pre-annotation depth [default: 10000]")
    _int_flag(p, "--max-answer-len", "answer span cap in tokens [default: 10]")
    _int_flag(p, "--epochs", "passes over the questions [default: 4]")
    _int_flag(p, "--batch-questions", "questions per update [default: 8]")
    _float_flag(p, "--learning-rate", "Adam learning rate [default: 1e-5]")
    _bool_flag(p, "--shared-norm",
               "normalize span scores across the whole top-k [default: true]")
    _bool_flag(p, "--joint", "weight span mass by retrieval probability [default: false]")
    _bool_flag(p, "--reader-updates-question",
               "let span losses update the question tower [default: false]")
    _bool_flag(p, "--train-reader-embedding",
               "train a reader-private copy of the token table [default: false]")
    p.set_defaults(func=cmd_finetune)

    p = subs.add_parser("eval-retrieval", help="recall@k for a question tower")
    _add_common(p)
    p.add_argument("--chunks", help="chunk store path")
    p.add_argument("--vectors", help="corpus vector file")
    p.add_argument("--question-ckpt", help="question tower checkpoint")
    p.add_argument("--questions", help="QA dataset path")
    p.add_argument("--out", help="output report JSON")
    p.add_argument("--index", default=None, help="optional IVF index path [default: flat search]")
    _int_flag(p, "--nprobe", "cells probed when --index is set [default: index default]")
    p.add_argument("--ks", default=None, help="comma-separated k values [default: 5,10,20]")
    p.set_defaults(func=cmd_eval_retrieval)

    p = subs.add_parser("eval-qa", help="exact match for a finetuned system")
    _add_common(p)
    p.add_argument("--chunks", help="chunk store path")
    p.add_argument("--vectors", help="corpus vector file")
    p.add_argument("--question-ckpt", help="finetuned question tower checkpoint")
    p.add_argument("--paragraph-ckpt", help="paragraph tower checkpoint")
    p.add_argument("--reader-ckpt", help="reader checkpoint")
    p.add_argument("--questions", help="QA dataset path")
    p.add_argument("--out", help="output report JSON")
    p.add_argument("--predictions", default=None,
                   help="optional predictions JSONL output [default: none]")
    p.add_argument("--index", default=None, help="optional IVF index path [default: flat search]")
    _int_flag(p, "--nprobe", "cells probed when --index is set [default: index default]")
    _int_flag(p, "--topk", "paragraphs considered per question [default: 5]")
    _float_flag(p, "--retrieval-weight",
                "weight on the retrieval score at inference [default: 1.0]")
    _int_flag(p, "--max-answer-len", "answer span cap in tokens [default: 10]")
    p.set_defaults(func=cmd_eval_qa)

    p = subs.add_parser("query", help="answer questions from standard input")
    _add_common(p)
    p.add_argument("--chunks", help="chunk store path")
    p.add_argument("--vectors", help="corpus vector file")
    p.add_argument("--question-ckpt", help="finetuned question tower checkpoint")
    p.add_argument("--paragraph-ckpt", help="paragraph tower checkpoint")
    p.add_argument("--reader-ckpt", help="reader checkpoint")
    p.add_argument("--index", default=None, help="optional IVF index path [default: flat search]")
    _int_flag(p, "--nprobe", "cells probed when --index is set [default: index default]")
    _int_flag(p, "--topk", "paragraphs considered per question [default: 5]")
    _float_flag(p, "--retrieval-weight",
                "weight on the retrieval score at inference [default: 1.0]")
    _int_flag(p, "--max-answer-len", "answer span cap in tokens [default: 10]")
    p.set_defaults(func=cmd_query)

    p = subs.add_parser("ablation", help="recall table across pretraining strategies")
    _add_common(p)
    p.add_argument("--chunks", help="chunk store path")
    p.add_argument("--questions", help="QA dataset path")
    p.add_argument("--progressive", help="checkpoint dir for the progressive run")
    p.add_argument("--no-clustering", dest="no_clustering",
                   help="checkpoint dir for the uniform-sampling run")
    p.add_argument("--ict", help="checkpoint dir for the inverse-cloze run")
    p.add_argument("--out", help="output report JSON")
    p.add_argument("--ks", default=None, help="comma-separated k values [default: 5,10,20]")
    _int_flag(p, "--max-answer-len", "answer span cap in tokens [default: 10]")
    p.set_defaults(func=cmd_ablation)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ValueError, OSError, KeyError) as exc:
        print(json.dumps({"error": f"{type(exc).__name__}: {exc}"}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
