import numpy as np
import pytest

from denseqa.corpus import Chunk, Span, normalize_answer, tokenize
from denseqa.encoder import (
    EncoderConfig,
    EncoderParams,
    FeatureBatch,
    FeatureRow,
    encode_batch,
    hash_ngram,
    init_params,
    pool_batch,
)
from denseqa.finetune import (
    AnswerSetCache,
    FinetuneConfig,
    QAExample,
    ReaderParams,
    answer_inference,
    build_answer_cache,
    build_topk_context,
    early_loss,
    enumerate_spans,
    finetune,
    init_reader,
    joint_loss,
    load_reader,
    read_qa_file,
    reader_loss,
    reader_token_scores,
    retrieve_topk,
    save_reader,
    select_retrieval_weight,
    shared_norm_span_probs,
    token_feature_batch,
    write_qa_file,
)
from denseqa.pretrain import encode_chunks
from denseqa.vecindex import RetrievalResult, VectorStore, flat_search
from oracles import (
    assert_grads_close,
    bilinear_scores_oracle,
    early_loss_oracle,
    finite_difference_grad,
    joint_loss_oracle,
    reader_loss_oracle,
    shared_norm_probs_oracle,
)

TINY = EncoderConfig(n_buckets=64, ngram_min=3, ngram_max=5, hidden_dim=8, index_dim=4)


def make_chunk(text, chunk_id=0):
    return Chunk(id=chunk_id, doc_id="d", tokens=tokenize(text), text=text)


def micro_setup(seed, n_chunks=3, n_tokens=4, gold_rate=0.3, max_answer_len=3):
    """Random chunks, params, and injected gold spans for oracle comparisons."""
    rng = np.random.default_rng(seed)
    words = ["alpha", "bravo", "china", "delta", "echo", "foxtrot", "golf", "hotel"]
    chunks = {}
    for cid in range(n_chunks):
        n = int(rng.integers(1, n_tokens + 1))
        text = " ".join(words[int(rng.integers(len(words)))] for _ in range(n))
        chunks[cid] = make_chunk(text, cid)
    params_q = init_params(TINY, "question", rng)
    params_p = init_params(TINY, "paragraph", rng)
    reader = init_reader(TINY, rng)
    h_q = rng.normal(size=TINY.index_dim)
    scores = rng.normal(size=n_chunks)
    answer_spans = {}
    for cid, chunk in chunks.items():
        spans = enumerate_spans(len(chunk.tokens), max_answer_len)
        mask = rng.random(len(spans)) < gold_rate
        chosen = [Span(cid, int(s), int(e)) for (s, e), m in zip(spans, mask) if m]
        if chosen:
            answer_spans[cid] = chosen
    result = RetrievalResult(
        ids=np.arange(n_chunks, dtype=np.int64),
        scores=np.asarray(scores, np.float64),
        answer_hits=frozenset(answer_spans),
        answer_spans=answer_spans,
    )
    ctx = build_topk_context(
        result, h_q, chunks, reader, params_p.embedding, TINY, max_answer_len
    )
    return rng, chunks, params_q, params_p, reader, ctx, max_answer_len


def oracle_inputs(ctx, reader, params_p):
    """Recompute token scores through the naive triple-loop oracle."""
    start_scores, end_scores, gold = [], [], []
    for ci in range(len(ctx.chunk_ids)):
        embeds = ctx.token_embeds[ci]
        start_scores.append(bilinear_scores_oracle(ctx.h_q, reader.start_map, embeds))
        end_scores.append(bilinear_scores_oracle(ctx.h_q, reader.end_map, embeds))
        gold.append(
            {(int(s), int(e)) for (s, e), g in zip(ctx.spans[ci], ctx.gold_masks[ci]) if g}
        )
    return start_scores, end_scores, gold


# --- reader token scores ---


def test_reader_scores_zero_matrices():
    chunk = make_chunk("alpha bravo china")
    params_q = init_params(TINY, "question", np.random.default_rng(0))
    reader = ReaderParams(
        start_map=np.zeros((TINY.index_dim, TINY.hidden_dim)),
        end_map=np.zeros((TINY.index_dim, TINY.hidden_dim)),
    )
    start, end = reader_token_scores(
        "what alpha", chunk, params_q, reader, params_q.embedding, TINY
    )
    assert np.all(start == 0.0) and np.all(end == 0.0)


def test_reader_scores_match_triple_loop_oracle():
    rng = np.random.default_rng(3)
    chunk = make_chunk("alpha bravo china delta")
    params_q = init_params(TINY, "question", rng)
    params_p = init_params(TINY, "paragraph", rng)
    reader = init_reader(TINY, rng)
    start, end = reader_token_scores(
        "which bravo", chunk, params_q, reader, params_p.embedding, TINY
    )
    from denseqa.finetune import encode_question

    _, _, h_q = encode_question("which bravo", params_q, TINY)
    embeds = pool_batch(token_feature_batch(chunk, TINY), params_p.embedding)
    assert np.allclose(start, bilinear_scores_oracle(h_q, reader.start_map, embeds), atol=1e-12)
    assert np.allclose(end, bilinear_scores_oracle(h_q, reader.end_map, embeds), atol=1e-12)


def test_enumerate_spans_counts():
    spans = enumerate_spans(4, 2)
    assert spans.tolist() == [[0, 0], [0, 1], [1, 1], [1, 2], [2, 2], [2, 3], [3, 3]]


# --- shared-norm span probabilities ---


def test_shared_norm_uniform_scores():
    _, chunks, _, params_p, reader, ctx, L = micro_setup(0)
    reader.start_map[:] = 0.0
    reader.end_map[:] = 0.0
    ctx2 = build_topk_context(
        ctx.result, ctx.h_q, chunks, reader, params_p.embedding, TINY, L
    )
    probs = shared_norm_span_probs(ctx2)
    n_spans = sum(len(p) for p in probs)
    flat = np.concatenate(probs)
    assert np.allclose(flat, 1.0 / n_spans, atol=1e-12)


def test_shared_norm_single_token_single_chunk():
    chunk = make_chunk("alpha", 0)
    rng = np.random.default_rng(1)
    reader = init_reader(TINY, rng)
    params_p = init_params(TINY, "paragraph", rng)
    result = RetrievalResult(
        ids=np.array([0]), scores=np.array([0.5]), answer_hits=frozenset(),
        answer_spans={},
    )
    ctx = build_topk_context(
        result, rng.normal(size=TINY.index_dim), {0: chunk}, reader,
        params_p.embedding, TINY, 3,
    )
    probs = shared_norm_span_probs(ctx)
    assert probs[0].shape == (1,)
    assert probs[0][0] == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("seed", range(8))
def test_shared_norm_matches_oracle(seed):
    _, chunks, _, params_p, reader, ctx, L = micro_setup(seed)
    probs = shared_norm_span_probs(ctx)
    start_scores, end_scores, _ = oracle_inputs(ctx, reader, params_p)
    expected = shared_norm_probs_oracle(start_scores, end_scores, L)
    for ci in range(len(ctx.chunk_ids)):
        for (s, e), p in zip(ctx.spans[ci], probs[ci]):
            assert p == pytest.approx(expected[ci][(int(s), int(e))], abs=1e-12)
    assert sum(float(p.sum()) for p in probs) == pytest.approx(1.0, abs=1e-10)


# --- reader loss ---


def test_reader_loss_full_gold_mass_is_zero():
    _, chunks, _, params_p, reader, ctx, L = micro_setup(2, n_chunks=1, gold_rate=2.0)
    res = reader_loss(ctx, reader, shared_norm=True)
    assert res.loss == pytest.approx(0.0, abs=1e-12)


def test_reader_loss_uniform_single_gold():
    chunk = make_chunk("alpha bravo china delta", 0)
    spans = enumerate_spans(4, 2)
    reader = ReaderParams(
        start_map=np.zeros((TINY.index_dim, TINY.hidden_dim)),
        end_map=np.zeros((TINY.index_dim, TINY.hidden_dim)),
    )
    params_p = init_params(TINY, "paragraph", np.random.default_rng(0))
    result = RetrievalResult(
        ids=np.array([0]), scores=np.array([0.0]),
        answer_hits=frozenset({0}), answer_spans={0: [Span(0, 1, 1)]},
    )
    ctx = build_topk_context(
        result, np.zeros(TINY.index_dim), {0: chunk}, reader, params_p.embedding, TINY, 2
    )
    res = reader_loss(ctx, reader, shared_norm=True)
    assert res.loss == pytest.approx(np.log(len(spans)), abs=1e-12)


@pytest.mark.parametrize("shared", [True, False])
@pytest.mark.parametrize("seed", range(6))
def test_reader_loss_matches_oracle(seed, shared):
    _, chunks, _, params_p, reader, ctx, L = micro_setup(seed, gold_rate=0.4)
    res = reader_loss(ctx, reader, shared_norm=shared)
    start_scores, end_scores, gold = oracle_inputs(ctx, reader, params_p)
    expected = reader_loss_oracle(start_scores, end_scores, gold, L, shared_norm=shared)
    assert res.loss == pytest.approx(expected, abs=1e-10)


def test_reader_loss_requires_gold():
    _, chunks, _, params_p, reader, ctx, L = micro_setup(4, gold_rate=0.0)
    with pytest.raises(ValueError):
        reader_loss(ctx, reader)


def test_reader_loss_nonnegative_shared_norm():
    for seed in range(10):
        _, _, _, _, reader, ctx, _ = micro_setup(seed + 50, gold_rate=0.5)
        if not ctx.has_gold:
            continue
        assert reader_loss(ctx, reader, shared_norm=True).loss >= 0.0


@pytest.mark.parametrize("shared", [True, False])
def test_reader_loss_gradients_match_finite_differences(shared):
    rng, chunks, params_q, params_p, reader, ctx, L = micro_setup(7, gold_rate=0.4)
    reader.embedding = params_p.embedding.copy()

    def loss_fn():
        ctx2 = build_topk_context(
            ctx.result, ctx.h_q, chunks, reader, params_p.embedding, TINY, L
        )
        return reader_loss(ctx2, reader, shared_norm=shared).loss

    ctx3 = build_topk_context(
        ctx.result, ctx.h_q, chunks, reader, params_p.embedding, TINY, L
    )
    res = reader_loss(
        ctx3, reader, shared_norm=shared, want_embedding_grad=True,
        want_question_grad=True,
    )
    numeric = finite_difference_grad(
        loss_fn,
        {"start": reader.start_map, "end": reader.end_map,
         "emb": reader.embedding, "h": ctx.h_q},
    )
    assert_grads_close(
        {"start": res.d_start_map, "end": res.d_end_map,
         "emb": res.d_embedding, "h": res.d_h_q},
        numeric,
    )


# --- early loss ---


def early_setup(seed, count=12, gold=(1, 4)):
    rng = np.random.default_rng(seed)
    store = VectorStore(
        data=rng.normal(size=(count, TINY.index_dim)).astype(np.float32),
        ids=np.arange(count),
    )
    return rng, store, set(gold)


def test_early_loss_all_gold_is_zero():
    rng, store, _ = early_setup(0)
    res = early_loss(rng.normal(size=TINY.index_dim), store, set(range(store.count)))
    assert res.loss == pytest.approx(0.0, abs=1e-12)
    assert not res.skipped


def test_early_loss_uniform_single_gold():
    _, store, _ = early_setup(1)
    res = early_loss(np.zeros(TINY.index_dim), store, {5})
    assert res.loss == pytest.approx(np.log(store.count), abs=1e-12)


def test_early_loss_empty_gold_skips():
    rng, store, _ = early_setup(2)
    res = early_loss(rng.normal(size=TINY.index_dim), store, set())
    assert res.skipped and res.loss == 0.0 and res.d_h_q is None


@pytest.mark.parametrize("seed", range(6))
def test_early_loss_matches_oracle(seed):
    rng, store, gold = early_setup(seed)
    h_q = rng.normal(size=TINY.index_dim)
    res = early_loss(h_q, store, gold)
    top = flat_search(store, h_q, store.count)
    mask = [int(cid) in gold for cid in top.ids]
    assert res.loss == pytest.approx(early_loss_oracle(top.scores, mask), abs=1e-10)


def test_early_loss_gradient_matches_finite_differences():
    rng, store, gold = early_setup(9)
    h_q = rng.normal(size=TINY.index_dim)
    res = early_loss(h_q, store, gold)
    numeric = finite_difference_grad(lambda: early_loss(h_q, store, gold).loss, {"h": h_q})
    assert_grads_close({"h": res.d_h_q}, numeric)


def test_early_loss_respects_candidate_cap():
    rng, store, _ = early_setup(3)
    h_q = rng.normal(size=TINY.index_dim)
    top3 = flat_search(store, h_q, 3)
    gold = {int(top3.ids[-1])}
    res = early_loss(h_q, store, gold, candidates=3)
    assert res.loss == pytest.approx(early_loss_oracle(top3.scores, [False, False, True]), abs=1e-10)


# --- joint loss ---


def test_joint_loss_single_covered_paragraph_full_mass():
    _, chunks, _, params_p, reader, ctx, L = micro_setup(11, n_chunks=1, gold_rate=2.0)
    res = joint_loss(ctx, reader, shared_norm=False)
    assert res.loss == pytest.approx(0.0, abs=1e-12)


def test_joint_loss_uniform_closed_form():
    # retrieval uniform over k, reader uniform, every paragraph gold with 1 span of N
    k, tokens = 3, 4
    chunks = {i: make_chunk("alpha bravo china delta", i) for i in range(k)}
    reader = ReaderParams(
        start_map=np.zeros((TINY.index_dim, TINY.hidden_dim)),
        end_map=np.zeros((TINY.index_dim, TINY.hidden_dim)),
    )
    params_p = init_params(TINY, "paragraph", np.random.default_rng(0))
    answer_spans = {i: [Span(i, 0, 0)] for i in range(k)}
    result = RetrievalResult(
        ids=np.arange(k), scores=np.zeros(k),
        answer_hits=frozenset(range(k)), answer_spans=answer_spans,
    )
    ctx = build_topk_context(
        result, np.zeros(TINY.index_dim), chunks, reader, params_p.embedding, TINY, 2
    )
    n_spans = len(enumerate_spans(tokens, 2))
    res = joint_loss(ctx, reader, shared_norm=False)
    start, end, gold = oracle_inputs(ctx, reader, params_p)
    expected = joint_loss_oracle(ctx.result.scores, start, end, gold, 2, shared_norm=False)
    assert res.loss == pytest.approx(expected, abs=1e-12)
    assert res.loss == pytest.approx(np.log(n_spans), abs=1e-12)


@pytest.mark.parametrize("shared", [True, False])
@pytest.mark.parametrize("seed", range(6))
def test_joint_loss_matches_oracle(seed, shared):
    _, chunks, _, params_p, reader, ctx, L = micro_setup(seed + 20, gold_rate=0.4)
    res = joint_loss(ctx, reader, shared_norm=shared)
    start, end, gold = oracle_inputs(ctx, reader, params_p)
    expected = joint_loss_oracle(ctx.result.scores, start, end, gold, L, shared_norm=shared)
    assert res.loss == pytest.approx(expected, abs=1e-10)


@pytest.mark.parametrize("shared", [True, False])
def test_joint_loss_gradients_match_finite_differences(shared):
    seed = 33
    rng, chunks, params_q, params_p, reader, ctx, L = micro_setup(seed, gold_rate=0.5)
    reader.embedding = params_p.embedding.copy()
    retr_scores = np.asarray(ctx.result.scores, np.float64)

    def rebuild():
        result = RetrievalResult(
            ids=ctx.result.ids, scores=retr_scores,
            answer_hits=ctx.result.answer_hits, answer_spans=ctx.result.answer_spans,
        )
        return build_topk_context(
            result, ctx.h_q, chunks, reader, params_p.embedding, TINY, L
        )

    def loss_fn():
        return joint_loss(rebuild(), reader, shared_norm=shared).loss

    res = joint_loss(
        rebuild(), reader, shared_norm=shared,
        want_embedding_grad=True, want_question_grad=True,
    )
    numeric = finite_difference_grad(
        loss_fn,
        {"start": reader.start_map, "end": reader.end_map,
         "emb": reader.embedding, "h": ctx.h_q, "retr": retr_scores},
    )
    assert_grads_close(
        {"start": res.d_start_map, "end": res.d_end_map, "emb": res.d_embedding,
         "h": res.d_h_q, "retr": res.d_retrieval_scores},
        numeric,
    )


# --- retrieval with annotations ---


def corpus_setup(seed=0):
    rng = np.random.default_rng(seed)
    texts = [
        "the lighthouse keeper saw Velmar Girn in August 1993 . storms came later .",
        "a market opened near Oswel Pond selling fish . trade was brisk .",
        "the observatory logged a comet in March 1921 . astronomers cheered .",
        "a bakery run by Tessa Brook opened quietly . bread sold out fast .",
    ]
    chunks = {i: make_chunk(t, i) for i, t in enumerate(texts)}
    params_q = init_params(TINY, "question", rng)
    params_p = init_params(TINY, "paragraph", rng)
    ordered = [chunks[i] for i in sorted(chunks)]
    store = encode_chunks(ordered, params_p, TINY)
    return chunks, params_q, params_p, store


def test_retrieve_topk_full_corpus():
    chunks, params_q, params_p, store = corpus_setup()
    res = retrieve_topk(
        "who ran the bakery", params_q, TINY, store, chunks,
        ["Tessa Brook"], k=len(chunks),
    )
    assert len(res.ids) == len(chunks)
    assert res.answer_hits == frozenset({3})
    assert 3 in res.answer_spans


def test_retrieve_topk_no_answer_flags_skip():
    chunks, params_q, params_p, store = corpus_setup()
    res = retrieve_topk(
        "anything", params_q, TINY, store, chunks, ["zzz missing"], k=4
    )
    assert not res.covered


def test_retrieve_topk_hand_built_two_chunk_store():
    chunks, params_q, params_p, store = corpus_setup()
    res = retrieve_topk(
        "who ran the bakery", params_q, TINY, store, chunks, ["Tessa Brook"], k=2
    )
    assert len(res.ids) == 2
    assert list(res.scores) == sorted(res.scores, reverse=True)


# --- answer cache ---


def test_cache_roundtrip(tmp_path):
    cache = AnswerSetCache("fp", 10, [frozenset({1, 2}), frozenset()])
    path = tmp_path / "cache.json"
    cache.save(path)
    loaded = AnswerSetCache.load(path)
    assert loaded == cache


def test_cache_backed_early_loss_equals_fresh():
    chunks, params_q, params_p, store = corpus_setup()
    questions = [
        QAExample("when did the keeper see the visitor", ("August 1993",)),
        QAExample("who ran the bakery", ("Tessa Brook",)),
        QAExample("nothing matches this", ("qqqq",)),
    ]
    cache = build_answer_cache(
        questions, params_q, TINY, store, chunks, depth=store.count
    )
    from denseqa.finetune import _fresh_answer_ids, encode_question

    for qi, ex in enumerate(questions):
        _, _, h_q = encode_question(ex.question, params_q, TINY)
        fresh = _fresh_answer_ids(h_q, store, chunks, ex.answers, store.count, 10)
        assert set(cache.sets[qi]) == fresh
        a = early_loss(h_q, store, cache.sets[qi])
        b = early_loss(h_q, store, fresh)
        assert a.loss == pytest.approx(b.loss, abs=1e-12)
        assert a.skipped == b.skipped


def test_cache_question_with_no_match_is_empty():
    chunks, params_q, params_p, store = corpus_setup()
    cache = build_answer_cache(
        [QAExample("void", ("absent absent",))], params_q, TINY, store, chunks,
        depth=store.count,
    )
    assert cache.sets == [frozenset()]


# --- finetune loop ---


def qa_for_corpus():
    return [
        QAExample("when did the keeper see velmar girn", ("August 1993",)),
        QAExample("who ran the bakery quietly", ("Tessa Brook",)),
        QAExample("when was the comet logged", ("March 1921",)),
    ]


def ft_config(**over):
    base = dict(
        topk=3, early_candidates=4, cache_depth=4, epochs=2, batch_questions=2,
        learning_rate=0.05, seed=5,
    )
    base.update(over)
    return FinetuneConfig(**base)


def test_finetune_all_skipped_leaves_question_tower():
    chunks, params_q, params_p, store = corpus_setup()
    questions = [QAExample("q one", ("no match here",)), QAExample("q two", ("missing",))]
    before_emb = params_q.embedding.copy()
    result = finetune(
        ft_config(), questions, chunks, store, params_q, params_p, TINY
    )
    assert result.skipped_questions == len(questions) * 2  # skipped in both epochs
    assert np.array_equal(result.params_q.embedding, before_emb)


def test_finetune_frozen_paragraph_tower_and_store():
    chunks, params_q, params_p, store = corpus_setup()
    p_emb = params_p.embedding.copy()
    p_proj = params_p.projection.copy()
    data_before = store.data.copy()
    finetune(ft_config(), qa_for_corpus(), chunks, store, params_q, params_p, TINY)
    assert np.array_equal(params_p.embedding, p_emb)
    assert np.array_equal(params_p.projection, p_proj)
    assert np.array_equal(store.data, data_before)


def test_finetune_objective_flag_coverage():
    chunks, params_q, params_p, store = corpus_setup()
    questions = qa_for_corpus()
    for shared, joint in [(True, False), (False, False), (True, True), (False, True)]:
        config = ft_config(shared_norm=shared, joint=joint, epochs=1)
        result = finetune(config, questions, chunks, store, params_q, params_p, TINY)
        assert result.losses, (shared, joint)
        assert np.isfinite(result.losses).all()


def test_finetune_improves_training_loss():
    chunks, params_q, params_p, store = corpus_setup()
    config = ft_config(epochs=12, learning_rate=0.05, batch_questions=3)
    result = finetune(config, qa_for_corpus(), chunks, store, params_q, params_p, TINY)
    assert np.mean(result.losses[-3:]) < np.mean(result.losses[:3])


def test_finetune_with_cache_matches_without(tmp_path):
    chunks, params_q, params_p, store = corpus_setup()
    questions = qa_for_corpus()
    cache = build_answer_cache(
        questions, params_q, TINY, store, chunks, depth=4
    )
    with_cache = finetune(
        ft_config(), questions, chunks, store, params_q, params_p, TINY, cache=cache
    )
    without = finetune(
        ft_config(), questions, chunks, store, params_q, params_p, TINY, cache=None
    )
    assert with_cache.losses == pytest.approx(without.losses, abs=1e-9)


# --- inference ---


def crafted_inference_setup():
    """Two one-token chunks with controlled retrieval and span scores."""
    config = EncoderConfig(n_buckets=1 << 16, ngram_min=3, ngram_max=5,
                           hidden_dim=2, index_dim=2)
    question = "abc"
    chunk_a = make_chunk("alpha", 0)
    chunk_b = make_chunk("beta", 1)

    def buckets(word):
        return {
            hash_ngram(word[i : i + n], config.n_buckets)
            for n in range(3, 6)
            for i in range(len(word) - n + 1)
        }

    qb, ab, bb = buckets("abc"), buckets("alpha"), buckets("beta")
    assert not (qb & ab) and not (qb & bb) and not (ab & bb)

    params_q = EncoderParams(
        embedding=np.zeros((config.n_buckets, 2)),
        projection=np.eye(2),
        tower="question",
    )
    for b in qb:
        params_q.embedding[b] = [1.0, 0.0]  # h_q = [1, 0]
    params_p = EncoderParams(
        embedding=np.zeros((config.n_buckets, 2)),
        projection=np.eye(2),
        tower="paragraph",
    )
    for b in ab:
        params_p.embedding[b] = [1.0, 0.0]  # e_alpha = [1, 0]
    for b in bb:
        params_p.embedding[b] = [0.0, 1.0]  # e_beta = [0, 1]

    store = VectorStore(
        data=np.array([[1.0, 0.0], [3.0, 0.0]], np.float32), ids=np.array([0, 1])
    )
    reader = ReaderParams(
        start_map=np.array([[2.0, 0.0], [0.0, 0.0]]),
        end_map=np.array([[2.0, 0.0], [0.0, 0.0]]),
    )
    chunks = {0: chunk_a, 1: chunk_b}
    # retrieval scores: A=1, B=3; span scores: A=4, B=0; crossover at w = 2
    return config, question, chunks, store, params_q, params_p, reader


def test_answer_inference_weight_crossover():
    config, question, chunks, store, params_q, params_p, reader = crafted_inference_setup()
    raw_low, _, pred_low = answer_inference(
        question, params_q, config, store, chunks, reader, params_p,
        k=2, retrieval_weight=1.9,
    )
    raw_high, _, pred_high = answer_inference(
        question, params_q, config, store, chunks, reader, params_p,
        k=2, retrieval_weight=2.1,
    )
    assert raw_low == "alpha" and pred_low.span.chunk_id == 0
    assert raw_high == "beta" and pred_high.span.chunk_id == 1


def test_answer_inference_weight_zero_uses_span_score_only():
    config, question, chunks, store, params_q, params_p, reader = crafted_inference_setup()
    raw, norm, pred = answer_inference(
        question, params_q, config, store, chunks, reader, params_p,
        k=2, retrieval_weight=0.0,
    )
    assert raw == "alpha"
    assert norm == normalize_answer("alpha")
    assert pred.combined == pred.span_score


def test_answer_inference_single_chunk_single_token():
    config, question, chunks, store, params_q, params_p, reader = crafted_inference_setup()
    raw, _, pred = answer_inference(
        question, params_q, config,
        VectorStore(data=store.data[:1], ids=store.ids[:1]),
        {0: chunks[0]}, reader, params_p, k=1,
    )
    assert raw == "alpha"
    assert pred.span == Span(0, 0, 0)


def test_answer_inference_retrieval_shift_invariance():
    config, question, chunks, store, params_q, params_p, reader = crafted_inference_setup()
    shift = 7.5  # h_q = [1, 0]: adding shift to dim 0 adds shift to every score
    shifted = VectorStore(
        data=store.data + np.array([shift, 0.0], np.float32), ids=store.ids
    )
    for w in (0.5, 1.9, 2.1):
        _, _, a = answer_inference(
            question, params_q, config, store, chunks, reader, params_p,
            k=2, retrieval_weight=w,
        )
        _, _, b = answer_inference(
            question, params_q, config, shifted, chunks, reader, params_p,
            k=2, retrieval_weight=w,
        )
        assert a.span == b.span


def test_answer_inference_empty_corpus_errors():
    config, question, chunks, store, params_q, params_p, reader = crafted_inference_setup()
    empty = VectorStore(data=np.zeros((0, 2), np.float32), ids=np.zeros(0, np.int64))
    with pytest.raises(ValueError):
        answer_inference(
            question, params_q, config, empty, {}, reader, params_p, k=1
        )


def test_combined_score_identity():
    config, question, chunks, store, params_q, params_p, reader = crafted_inference_setup()
    _, _, pred = answer_inference(
        question, params_q, config, store, chunks, reader, params_p,
        k=2, retrieval_weight=0.7,
    )
    assert pred.combined == pytest.approx(
        0.7 * pred.retrieval_score + pred.span_score, abs=1e-12
    )


def test_select_retrieval_weight_picks_best():
    def predict(question, weight):
        return "right" if weight >= 0.5 else "wrong"

    questions = [QAExample("q", ("right",))]
    best, table = select_retrieval_weight(questions, predict)
    assert best == 0.5  # ties break toward the smaller weight
    assert table[0.0] == 0.0 and table[1.0] == 1.0


# --- reader checkpoint and QA files ---


def test_reader_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    reader = init_reader(TINY, rng, paragraph_embedding=rng.normal(size=(8, TINY.hidden_dim)))
    path = tmp_path / "reader.ckpt"
    save_reader(path, reader)
    loaded = load_reader(path)
    assert np.array_equal(loaded.start_map, reader.start_map.astype(np.float32))
    assert np.array_equal(loaded.end_map, reader.end_map.astype(np.float32))
    assert loaded.embedding is not None
    assert loaded.embedding.shape == reader.embedding.shape


def test_reader_checkpoint_without_embedding(tmp_path):
    reader = init_reader(TINY, np.random.default_rng(1))
    path = tmp_path / "reader.ckpt"
    save_reader(path, reader)
    assert load_reader(path).embedding is None


def test_qa_file_roundtrip(tmp_path):
    examples = [QAExample("who", ("a", "b")), QAExample("when", ("1993",))]
    path = tmp_path / "qa.jsonl"
    write_qa_file(examples, path)
    assert read_qa_file(path) == examples


def test_config_validation():
    with pytest.raises(ValueError):
        FinetuneConfig(cache_depth=10, early_candidates=20)
