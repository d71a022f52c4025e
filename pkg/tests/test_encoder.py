import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from denseqa.binio import CorruptFileError
from denseqa.corpus import tokenize
from denseqa.encoder import (
    EncoderConfig,
    EncoderParams,
    FeatureBatch,
    FeatureRow,
    backprop_batch,
    encode,
    encode_batch,
    featurize,
    hash_ngram,
    init_params,
    load_params,
    pool_batch,
    retrieval_softmax,
    save_params,
    score_matrix,
)
from oracles import assert_grads_close, finite_difference_grad, score_matrix_oracle

TINY = EncoderConfig(n_buckets=64, ngram_min=3, ngram_max=5, hidden_dim=8, index_dim=4)


def rand_params(config, seed=0):
    return init_params(config, "question", np.random.default_rng(seed))


# --- featurize ---


def test_featurize_empty():
    assert featurize([], TINY) == {}


def test_featurize_token_shorter_than_min_ngram():
    assert featurize(["ab"], TINY) == {}


def test_featurize_counts_duplicates():
    counts = featurize(["abc", "abc"], TINY)
    bucket = zlib.crc32(b"abc") % TINY.n_buckets
    assert counts[bucket] == 2


def test_featurize_lowercases():
    assert featurize(["ABC"], TINY) == featurize(["abc"], TINY)


def test_featurize_accepts_tokens():
    toks = tokenize("abc def")
    assert featurize(toks, TINY) == featurize(["abc", "def"], TINY)


def test_featurize_ngram_window_sizes():
    counts = featurize(["abcd"], EncoderConfig(n_buckets=1 << 16, ngram_min=3, ngram_max=5,
                                               hidden_dim=8, index_dim=4))
    # "abcd": 3-grams abc, bcd and the 4-gram abcd
    expected = {hash_ngram(g, 1 << 16) for g in ("abc", "bcd", "abcd")}
    assert set(counts) == expected


# --- encode ---


def test_encode_zero_projection_gives_zero():
    params = rand_params(TINY)
    params.projection[:] = 0.0
    vec = encode(["abc"], params, TINY)
    assert np.all(vec == 0.0)


def test_encode_identity_block_projection():
    params = rand_params(TINY, seed=3)
    params.projection[:] = 0.0
    params.projection[: TINY.index_dim, : TINY.index_dim] = np.eye(TINY.index_dim)
    bucket = hash_ngram("abc", TINY.n_buckets)
    vec = encode(["abc"], params, TINY)
    assert np.allclose(vec, params.embedding[bucket, : TINY.index_dim])


def test_encode_hand_sized_instance():
    # 2 buckets, hidden 2, index 1: worked out with a 3-line matrix product
    params = EncoderParams(
        embedding=np.array([[1.0, 2.0], [3.0, 4.0]]),
        projection=np.array([[0.5], [-1.0]]),
        tower="question",
    )
    row = FeatureRow(
        buckets=np.array([0, 1]), counts=np.array([1.0, 2.0]), total=3.0
    )
    enc = encode_batch(FeatureBatch.stack([row]), params)
    pooled = (1 * np.array([1.0, 2.0]) + 2 * np.array([3.0, 4.0])) / 3
    assert np.allclose(enc.pooled[0], pooled)
    assert np.allclose(enc.vectors[0], 0.5 * pooled[0] - 1.0 * pooled[1])


def test_encode_empty_input_is_zero():
    params = rand_params(TINY)
    assert np.all(encode([], params, TINY) == 0.0)


@given(st.integers(min_value=0, max_value=2**31))
@settings(max_examples=25, deadline=None)
def test_encode_linear_in_embedding(seed):
    rng = np.random.default_rng(seed)
    a = rand_params(TINY, seed=seed)
    b = rand_params(TINY, seed=seed + 1)
    summed = EncoderParams(a.embedding + b.embedding, a.projection, "question")
    b_same_proj = EncoderParams(b.embedding, a.projection, "question")
    tokens = ["alpha", "beta", "gamma"]
    lhs = encode(tokens, summed, TINY)
    rhs = encode(tokens, a, TINY) + encode(tokens, b_same_proj, TINY)
    assert np.allclose(lhs, rhs, atol=1e-12)


# --- score matrix ---


def test_score_matrix_identity_rows():
    eye = np.eye(3)
    assert np.allclose(score_matrix(eye, eye), np.eye(3))


def test_score_matrix_simple():
    hq = np.array([[1.0, 0.0]])
    hp = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert np.allclose(score_matrix(hq, hp), [[1.0, 0.0]])


def test_score_matrix_matches_oracle():
    rng = np.random.default_rng(11)
    hq = rng.normal(size=(3, 4))
    hp = rng.normal(size=(5, 4))
    assert np.allclose(score_matrix(hq, hp), score_matrix_oracle(hq, hp), atol=1e-12)


def test_score_matrix_dim_mismatch():
    with pytest.raises(ValueError):
        score_matrix(np.zeros((2, 3)), np.zeros((2, 4)))


@given(st.integers(min_value=0, max_value=2**31))
@settings(max_examples=25, deadline=None)
def test_score_matrix_transpose_symmetry(seed):
    rng = np.random.default_rng(seed)
    hq = rng.normal(size=(3, 5))
    hp = rng.normal(size=(4, 5))
    assert np.array_equal(score_matrix(hq, hp).T, score_matrix(hp, hq))


# --- retrieval softmax ---


def test_softmax_uniform():
    assert np.allclose(retrieval_softmax([0.0, 0.0, 0.0]), [1 / 3] * 3)


def test_softmax_analytic():
    probs = retrieval_softmax([np.log(2.0), 0.0])
    assert np.allclose(probs, [2 / 3, 1 / 3])


def test_softmax_large_scores_stable():
    probs = retrieval_softmax([1000.0, 1000.0])
    assert np.allclose(probs, [0.5, 0.5])


def test_softmax_empty_errors():
    with pytest.raises(ValueError):
        retrieval_softmax([])


@given(st.lists(st.floats(min_value=-50, max_value=50), min_size=1, max_size=10),
       st.floats(min_value=-100, max_value=100))
def test_softmax_sum_and_shift_invariance(scores, shift):
    base = retrieval_softmax(scores)
    assert abs(base.sum() - 1.0) <= 1e-12
    shifted = retrieval_softmax([s + shift for s in scores])
    assert np.allclose(base, shifted, atol=1e-12)


@given(st.lists(st.floats(min_value=-50, max_value=50), min_size=1, max_size=10))
def test_softmax_argmax_matches_scores(scores):
    # distinctions below float-exp resolution necessarily tie after softmax
    arr = np.asarray(scores)
    gaps = arr.max() - arr
    if np.any((gaps > 0) & (gaps < 1e-9)):
        return
    probs = retrieval_softmax(scores)
    assert int(np.argmax(probs)) == int(np.argmax(scores))


# --- gradients through encode ---


def encode_loss_setup(seed):
    """A small scalar loss: sum of weighted batch vectors."""
    rng = np.random.default_rng(seed)
    params = rand_params(TINY, seed=seed)
    rows = [
        FeatureRow.from_tokens([f"word{seed}a", "shared"], TINY),
        FeatureRow.from_tokens(["other", "shared", "xyz"], TINY),
    ]
    weights = rng.normal(size=(2, TINY.index_dim))
    return params, FeatureBatch.stack(rows), weights


@pytest.mark.parametrize("seed", range(5))
def test_backprop_matches_finite_differences(seed):
    params, batch, weights = encode_loss_setup(seed)

    def loss_fn():
        return float(np.sum(encode_batch(batch, params).vectors * weights))

    cache = encode_batch(batch, params)
    grads = backprop_batch(batch, cache, weights, params)
    numeric = finite_difference_grad(
        loss_fn, {"embedding": params.embedding, "projection": params.projection}
    )
    assert_grads_close(
        {"embedding": grads.embedding, "projection": grads.projection}, numeric
    )


def test_backprop_zero_loss_gives_zero_grads():
    params, batch, _ = encode_loss_setup(0)
    cache = encode_batch(batch, params)
    grads = backprop_batch(batch, cache, np.zeros((2, TINY.index_dim)), params)
    assert np.all(grads.embedding == 0.0)
    assert np.all(grads.projection == 0.0)


# --- checkpoints ---


def test_checkpoint_roundtrip(tmp_path):
    params = rand_params(TINY, seed=9)
    path = tmp_path / "tower.ckpt"
    save_params(path, params, TINY)
    loaded, config = load_params(path)
    assert config == TINY
    assert loaded.tower == "question"
    # float32 storage: round trip through f32 exactly
    assert np.array_equal(loaded.embedding, params.embedding.astype(np.float32))
    assert np.array_equal(loaded.projection, params.projection.astype(np.float32))


def test_checkpoint_detects_corruption(tmp_path):
    params = rand_params(TINY)
    path = tmp_path / "tower.ckpt"
    save_params(path, params, TINY)
    blob = bytearray(path.read_bytes())
    blob[20] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(CorruptFileError):
        load_params(path)


def test_checkpoint_bytes_deterministic(tmp_path):
    params = rand_params(TINY, seed=4)
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_params(a, params, TINY)
    save_params(b, params, TINY)
    assert a.read_bytes() == b.read_bytes()


def test_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(index_dim=65, hidden_dim=64)
    with pytest.raises(ValueError):
        EncoderConfig(ngram_min=4, ngram_max=3)
    with pytest.raises(ValueError):
        EncoderConfig(n_buckets=0)
