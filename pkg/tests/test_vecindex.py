import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from denseqa.binio import CorruptFileError
from denseqa.vecindex import (
    IvfIndex,
    VectorStore,
    flat_search,
    ivf_build,
    ivf_search,
    kmeans,
)
from oracles import best_two_partition_inertia


def store_1d(values, ids=None):
    arr = np.asarray(values, np.float32).reshape(-1, 1)
    ids = np.arange(len(arr)) if ids is None else np.asarray(ids)
    return VectorStore(data=arr, ids=ids)


def random_store(rng, count, dim):
    return VectorStore(
        data=rng.normal(size=(count, dim)).astype(np.float32),
        ids=np.arange(count),
    )


# --- kmeans ---


def test_kmeans_two_well_separated_groups():
    result = kmeans(store_1d([0.0, 1.0, 10.0, 11.0]), 2, seed=0)
    assert sorted(result.centroids[:, 0]) == [0.5, 10.5]
    assert result.inertia == pytest.approx(1.0, abs=1e-12)


def test_kmeans_k_equals_count():
    result = kmeans(store_1d([3.0, 7.0, 9.0]), 3, seed=1)
    assert result.inertia == pytest.approx(0.0, abs=1e-12)
    assert sorted(result.assignments) == [0, 1, 2]


def test_kmeans_k_one_is_mean():
    result = kmeans(store_1d([2.0, 4.0, 6.0]), 1, seed=2)
    assert result.centroids[0, 0] == pytest.approx(4.0)


def test_kmeans_k_too_large_errors():
    with pytest.raises(ValueError):
        kmeans(store_1d([1.0, 2.0]), 3)


def test_kmeans_assignments_are_nearest_centroid():
    rng = np.random.default_rng(5)
    store = random_store(rng, 40, 3)
    result = kmeans(store, 5, seed=5)
    d2 = ((store.data[:, None, :].astype(np.float64) - result.centroids[None]) ** 2).sum(axis=2)
    assert np.array_equal(result.assignments, d2.argmin(axis=1))


@pytest.mark.parametrize("seed", range(12))
def test_kmeans_matches_brute_force_on_tiny_1d(seed):
    rng = np.random.default_rng(seed + 77)
    xs = rng.uniform(-5, 5, size=8)
    result = kmeans(store_1d(xs), 2, seed=seed)
    best = best_two_partition_inertia(store_1d(xs).data[:, 0])
    assert result.inertia == pytest.approx(best, rel=1e-9, abs=1e-9)


def test_kmeans_handles_duplicate_points():
    result = kmeans(store_1d([1.0, 1.0, 1.0, 5.0]), 2, seed=0)
    assert result.inertia == pytest.approx(0.0, abs=1e-12)


# --- flat search ---


def test_flat_search_hand_example():
    store = VectorStore(
        data=np.array([[1, 0], [0, 1], [0.7, 0.7]], np.float32), ids=np.arange(3)
    )
    res = flat_search(store, np.array([1.0, 0.0]), topk=2)
    assert list(res.ids) == [0, 2]
    assert res.scores[0] == pytest.approx(1.0, abs=1e-6)
    assert res.scores[1] == pytest.approx(0.7, abs=1e-6)


def test_flat_search_orthogonal_ties_break_by_id():
    store = VectorStore(
        data=np.zeros((4, 2), np.float32), ids=np.array([7, 3, 9, 1])
    )
    res = flat_search(store, np.array([1.0, 1.0]), topk=4)
    assert list(res.ids) == [1, 3, 7, 9]
    assert np.all(res.scores == 0.0)


def test_flat_search_topk_exceeds_count():
    store = store_1d([3.0, 1.0, 2.0])
    res = flat_search(store, np.array([1.0]), topk=10)
    assert list(res.ids) == [0, 2, 1]


def test_flat_search_dim_mismatch():
    with pytest.raises(ValueError):
        flat_search(store_1d([1.0]), np.array([1.0, 2.0]), topk=1)


@given(st.integers(min_value=0, max_value=2**31))
@settings(max_examples=30, deadline=None)
def test_flat_search_scores_descending(seed):
    rng = np.random.default_rng(seed)
    store = random_store(rng, 20, 4)
    res = flat_search(store, rng.normal(size=4), topk=20)
    assert np.all(np.diff(res.scores) <= 0)


# --- ivf ---


def test_ivf_single_cell_contains_everything():
    store = store_1d([0.0, 1.0, 10.0, 11.0])
    index = ivf_build(store, ncells=1, seed=0)
    assert sorted(index.cells[0]) == [0, 1, 2, 3]


def test_ivf_two_cells_partition_like_kmeans():
    store = store_1d([0.0, 1.0, 10.0, 11.0])
    index = ivf_build(store, ncells=2, seed=0)
    cells = sorted(sorted(c.tolist()) for c in index.cells)
    assert cells == [[0, 1], [2, 3]]


def test_ivf_every_cell_singleton_when_ncells_is_count():
    store = store_1d([0.0, 5.0, 9.0])
    index = ivf_build(store, ncells=3, seed=0)
    assert sorted(len(c) for c in index.cells) == [1, 1, 1]


def test_ivf_nprobe_one_probes_nearest_cell():
    store = store_1d([0.0, 1.0, 10.0, 11.0])
    index = ivf_build(store, ncells=2, seed=0)
    res = ivf_search(index, store, np.array([10.5]), topk=4, nprobe=1)
    assert sorted(res.ids) == [2, 3]


def test_ivf_full_probe_equals_flat():
    rng = np.random.default_rng(0)
    store = random_store(rng, 50, 8)
    index = ivf_build(store, ncells=5, seed=1)
    query = rng.normal(size=8)
    flat = flat_search(store, query, topk=10)
    ivf = ivf_search(index, store, query, topk=10, nprobe=5)
    assert np.array_equal(flat.ids, ivf.ids)
    assert np.array_equal(flat.scores, ivf.scores)


@given(st.integers(min_value=0, max_value=2**31))
@settings(max_examples=20, deadline=None)
def test_ivf_full_probe_equals_flat_property(seed):
    rng = np.random.default_rng(seed)
    store = random_store(rng, 30, 4)
    ncells = int(rng.integers(1, 8))
    index = ivf_build(store, ncells=ncells, seed=seed)
    query = rng.normal(size=4)
    flat = flat_search(store, query, topk=7)
    ivf = ivf_search(index, store, query, topk=7, nprobe=ncells)
    assert np.array_equal(flat.ids, ivf.ids)
    assert np.array_equal(flat.scores, ivf.scores)


def test_ivf_recall_monotone_in_nprobe():
    rng = np.random.default_rng(7)
    store = random_store(rng, 200, 8)
    index = ivf_build(store, ncells=20, seed=3)
    queries = rng.normal(size=(10, 8))
    previous = -1.0
    for nprobe in (1, 2, 5, 10, 20):
        hits = 0
        for q in queries:
            truth = set(flat_search(store, q, topk=5).ids.tolist())
            got = set(ivf_search(index, store, q, topk=5, nprobe=nprobe).ids.tolist())
            hits += len(truth & got)
        recall = hits / (5 * len(queries))
        assert recall >= previous
        previous = recall
    assert previous == 1.0  # full probe is exact


def test_ivf_cells_partition_ids():
    rng = np.random.default_rng(9)
    store = random_store(rng, 64, 4)
    index = ivf_build(store, ncells=7, seed=2)
    all_ids = np.concatenate(index.cells)
    assert len(all_ids) == store.count
    assert len(set(all_ids.tolist())) == store.count


def test_ivf_topk_larger_than_probed_population():
    store = store_1d([0.0, 1.0, 10.0, 11.0])
    index = ivf_build(store, ncells=2, seed=0)
    res = ivf_search(index, store, np.array([0.2]), topk=10, nprobe=1)
    assert len(res.ids) == 2


def test_ivf_nprobe_bounds():
    store = store_1d([0.0, 1.0, 10.0])
    index = ivf_build(store, ncells=2, seed=0)
    with pytest.raises(ValueError):
        ivf_search(index, store, np.array([1.0]), topk=1, nprobe=0)
    with pytest.raises(ValueError):
        ivf_search(index, store, np.array([1.0]), topk=1, nprobe=3)


def test_ivf_build_ncells_exceeding_count():
    with pytest.raises(ValueError):
        ivf_build(store_1d([1.0, 2.0]), ncells=3)


# --- files ---


def test_vector_store_roundtrip(tmp_path):
    rng = np.random.default_rng(4)
    store = random_store(rng, 17, 6)
    path = tmp_path / "vecs.pqve"
    store.save(path)
    loaded = VectorStore.load(path)
    assert np.array_equal(loaded.data, store.data)
    assert np.array_equal(loaded.ids, store.ids)


def test_vector_store_corruption_detected(tmp_path):
    store = store_1d([1.0, 2.0])
    path = tmp_path / "vecs.pqve"
    store.save(path)
    blob = bytearray(path.read_bytes())
    blob[10] ^= 0x01
    path.write_bytes(bytes(blob))
    with pytest.raises(CorruptFileError):
        VectorStore.load(path)


def test_ivf_index_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    store = random_store(rng, 30, 5)
    index = ivf_build(store, ncells=4, seed=0, nprobe_default=2)
    path = tmp_path / "index.pqiv"
    index.save(path)
    loaded = IvfIndex.load(path)
    assert np.array_equal(loaded.centroids, index.centroids)
    assert loaded.nprobe_default == 2
    assert all(np.array_equal(a, b) for a, b in zip(loaded.cells, index.cells))
    query = rng.normal(size=5)
    a = ivf_search(index, store, query, topk=5, nprobe=2)
    b = ivf_search(loaded, store, query, topk=5, nprobe=2)
    assert np.array_equal(a.ids, b.ids)
