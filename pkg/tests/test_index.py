import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from soclm.index import (IndexConfig, PQCodebooks, build_index, kmeans, kmeans_fit, load_index,
                         load_pairs, mine_pairs, normalize_rows, pq_decode, pq_encode, save_index,
                         save_pairs, search, train_pq)


def brute_knn(X, q, k):
    """Reference cosine k-NN, same row-wise formula and tie rule as the index."""
    Xn = normalize_rows(X)
    qn = normalize_rows(q)
    d = np.clip(1.0 - np.sum(Xn * qn, axis=1), 0.0, 2.0)
    order = np.lexsort((np.arange(d.size), d))[:k]
    return order, d[order]


def test_kmeans_saturated(rng):
    X = rng.normal(size=(12, 3))
    cent, _, err = kmeans_fit(X, 12, seed=1)
    assert sorted(map(tuple, cent)) == sorted(map(tuple, X))
    assert err[-1] == 0.0


def test_kmeans_error_monotone(rng):
    X = rng.normal(size=(1000, 4))
    _, _, err = kmeans_fit(X, 20, iters=25, seed=3)
    assert all(b <= a + 1e-9 for a, b in zip(err, err[1:]))


def test_kmeans_two_blobs(rng):
    a = rng.normal([5, 5], 0.3, (300, 2))
    b = rng.normal([-5, 0], 0.3, (300, 2))
    cent = kmeans(np.vstack([a, b]), 2, seed=0)
    means = [a.mean(0), b.mean(0)]
    for m in means:
        assert np.min(np.linalg.norm(cent - m, axis=1)) < 0.1


def test_kmeans_k_too_large(rng):
    with pytest.raises(ValueError):
        kmeans(rng.normal(size=(3, 2)), 4)


def test_kmeans_empty_cluster_repair():
    X = np.array([[0.0, 0.0]] * 10 + [[1.0, 1.0]] * 10)
    cent, labels, _ = kmeans_fit(X, 3, seed=0)
    assert np.all(np.isfinite(cent)) and cent.shape == (3, 2)
    assert set(labels.tolist()) <= {0, 1, 2}


def test_kmeans_deterministic(rng):
    X = rng.normal(size=(200, 3))
    np.testing.assert_array_equal(kmeans(X, 7, seed=4), kmeans(X, 7, seed=4))


def test_pq_single_subspace_is_kmeans(rng):
    X = rng.normal(size=(300, 4))
    books = train_pq(X, 1, 8, iters=10, seed=2)
    np.testing.assert_allclose(books.codebooks[0], kmeans(X, 8, 10, 2))


def test_pq_more_codes_lower_error(rng):
    X = rng.normal(size=(2000, 8))
    mse = []
    for kc in (16, 256):
        b = train_pq(X, 4, kc, iters=10, seed=0)
        mse.append(np.mean((pq_decode(pq_encode(X, b), b) - X) ** 2))
    assert mse[1] <= mse[0]


def test_pq_fixed_point(rng):
    books = PQCodebooks(rng.normal(size=(2, 5, 3)))
    codes = rng.integers(0, 5, (40, 2))
    X = pq_decode(codes, books)
    np.testing.assert_array_equal(pq_decode(pq_encode(X, books), books), X)


def test_pq_divisibility(rng):
    with pytest.raises(ValueError):
        train_pq(rng.normal(size=(20, 7)), 2, 4)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_code_round_trip(seed):
    r = np.random.default_rng(seed)
    books = PQCodebooks(r.normal(size=(3, 6, 2)))
    codes = r.integers(0, 6, (10, 3)).astype(np.uint8)
    np.testing.assert_array_equal(pq_encode(pq_decode(codes, books), books), codes)


def test_encode_matches_exhaustive_scan(rng):
    books = PQCodebooks(rng.normal(size=(4, 16, 2)))
    X = rng.normal(size=(50, 8))
    codes = pq_encode(X, books)
    for s in range(4):
        d = ((X[:, None, 2 * s:2 * s + 2] - books.codebooks[s][None]) ** 2).sum(-1)
        np.testing.assert_array_equal(codes[:, s], np.argmin(d, axis=1))
    assert pq_encode(X[0], books).shape == (4,)


@pytest.fixture(scope="module")
def vecs():
    r = np.random.default_rng(7)
    centers = r.normal(size=(100, 16))
    return centers[r.integers(0, 100, 3000)] + 0.3 * r.normal(size=(3000, 16))


def test_every_vector_in_one_list(vecs):
    idx = build_index(vecs, IndexConfig(n_list=16, m=4, k_codes=32))
    allv = np.sort(np.concatenate(idx.lists))
    np.testing.assert_array_equal(allv, np.arange(len(vecs)))
    X = normalize_rows(vecs)
    nearest = np.argmin(((X[:, None] - idx.centroids[None]) ** 2).sum(-1), axis=1)
    np.testing.assert_array_equal(idx.assign, nearest)


def test_exact_mode_bit_exact(vecs, rng):
    idx = build_index(vecs, IndexConfig(n_list=16, mode="exact"))
    for q in rng.normal(size=(20, 16)):
        ids, d = search(idx, q, 10, nprobe=16)
        bids, bd = brute_knn(vecs, q, 10)
        np.testing.assert_array_equal(ids, bids)
        assert d.tobytes() == bd.tobytes()


def test_exact_mode_tie_order():
    X = np.array([[1.0, 0.0], [2.0, 0.0], [0.0, 1.0], [3.0, 0.0]])
    idx = build_index(X, IndexConfig(n_list=1, mode="exact"))
    ids, d = search(idx, np.array([1.0, 0.0]), 3, 1)
    assert ids.tolist() == [0, 1, 3] and np.all(d == 0.0)


def test_recall_monotone_in_nprobe(vecs, rng):
    idx = build_index(vecs, IndexConfig(n_list=32, m=8, k_codes=64))
    qs = vecs[rng.choice(len(vecs), 50, replace=False)] + 0.05 * rng.normal(size=(50, 16))
    truth = [set(brute_knn(vecs, q, 10)[0]) for q in qs]
    recalls = []
    for nprobe in (1, 2, 4, 8, 16, 32):
        hits = [len(set(search(idx, q, 10, nprobe)[0]) & t) for q, t in zip(qs, truth)]
        recalls.append(np.mean(hits) / 10)
    assert all(b >= a for a, b in zip(recalls, recalls[1:]))
    assert recalls[-1] > 0.6


def test_search_argument_checks(vecs):
    idx = build_index(vecs[:200], IndexConfig(n_list=4, m=4, k_codes=16))
    with pytest.raises(ValueError):
        search(idx, vecs[0], 0, 1)
    with pytest.raises(ValueError):
        search(idx, vecs[0], 5, 5)
    with pytest.raises(ValueError):
        build_index(vecs[:3], IndexConfig(n_list=4))


def test_quantized_distances_in_range(vecs):
    idx = build_index(vecs, IndexConfig(n_list=16, m=4, k_codes=32))
    _, d = search(idx, -vecs[5], 50, 16)
    assert np.all((d >= 0) & (d <= 2))
    assert np.all(np.diff(d) >= 0)


def test_index_round_trip(tmp_path, vecs):
    for mode in ("quantized", "exact"):
        idx = build_index(vecs[:500], IndexConfig(n_list=8, m=4, k_codes=16, mode=mode))
        save_index(idx, tmp_path / f"{mode}.idx")
        back = load_index(tmp_path / f"{mode}.idx")
        a = search(idx, vecs[3], 10, 4)
        b = search(back, vecs[3], 10, 4)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_allclose(a[1], b[1], atol=1e-12)


def test_mined_pairs_are_clean(vecs):
    X = vecs[:600]
    idx = build_index(X, IndexConfig(n_list=8, m=4, k_codes=32))
    pairs = mine_pairs(idx, X, k=5, nprobe=4)
    i, j, d = pairs.i, pairs.j, pairs.dist
    assert np.all(i < j)
    assert len(set(zip(i.tolist(), j.tolist()))) == len(pairs)
    assert np.all((d >= 0) & (d <= 2))
    for a in np.unique(i):
        assert np.all(np.diff(d[i == a]) >= 0)
    # each tweet contributes at most k partners before deduplication
    assert len(pairs) <= 5 * len(X)


def test_max_distance_cutoff(vecs):
    X = vecs[:300]
    idx = build_index(X, IndexConfig(n_list=4, mode="exact"))
    full = mine_pairs(idx, X, k=5, nprobe=4)
    cut = mine_pairs(idx, X, k=5, nprobe=4, max_distance=0.05)
    assert len(cut) < len(full) and np.all(cut.dist <= 0.05)


def test_pairs_round_trip(tmp_path, vecs):
    X = vecs[:200]
    ids = [f"t{i}" for i in range(len(X))]
    pairs = mine_pairs(build_index(X, IndexConfig(n_list=4, mode="exact")), X, 3, 4)
    save_pairs(pairs, ids, tmp_path / "p.tsv")
    back = load_pairs(tmp_path / "p.tsv", ids)
    np.testing.assert_array_equal(back.i, pairs.i)
    np.testing.assert_allclose(back.dist, pairs.dist, atol=5e-7)
    with pytest.raises(KeyError):
        load_pairs(tmp_path / "p.tsv", ids[:10])


def test_zero_vector_rejected():
    with pytest.raises(ValueError):
        normalize_rows(np.zeros((2, 3)))
