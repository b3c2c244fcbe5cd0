import math
import warnings

import numpy as np
import pytest
import scipy.sparse as sp

from posit import advantage as adv
from posit import metrics
from posit.exceptions import MetricError

# -- brute-force oracles ---------------------------------------------------


def o_recall(ranked, H, k):
    vals = []
    for i in range(H.shape[0]):
        truth = {j for j in range(H.shape[1]) if H[i, j]}
        if not truth:
            continue
        top = [j for j in ranked[i][:k] if j >= 0]
        vals.append(sum(j in truth for j in top) / min(k, len(truth)))
    return sum(vals) / len(vals)


def o_ndcg(ranked, H, k):
    vals = []
    for i in range(H.shape[0]):
        truth = {j for j in range(H.shape[1]) if H[i, j]}
        if not truth:
            continue
        dcg = sum(1 / math.log2(r + 2) for r, j in enumerate(ranked[i][:k]) if j >= 0 and j in truth)
        idcg = sum(1 / math.log2(r + 2) for r in range(min(k, len(truth))))
        vals.append(dcg / idcg)
    return sum(vals) / len(vals)


def o_item_recall(ranked, H, k):
    total = 0.0
    for j in range(H.shape[1]):
        pos = hits = 0
        for i in range(H.shape[0]):
            if H[i, j]:
                pos += 1
                hits += j in list(ranked[i][:k])
        if pos:
            total += hits / pos
    return total / H.shape[1]


def o_coverage(ranked, k, b):
    counts = []
    for start in range(0, len(ranked) - b + 1, b):
        seen = set()
        for row in ranked[start:start + b]:
            seen.update(j for j in row[:k] if j >= 0)
        counts.append(len(seen))
    mean = sum(counts) / len(counts)
    return mean, math.sqrt(sum((c - mean) ** 2 for c in counts) / len(counts))


def o_gini(x):
    n, s = len(x), sum(x)
    return sum(abs(a - b) for a in x for b in x) / (2 * n * s)


def o_gini_ratio(ranked, freq, k):
    counts = [0] * len(freq)
    for row in ranked:
        for j in row[:k]:
            if j >= 0:
                counts[j] += 1
    return o_gini(counts) / o_gini(list(freq))


def random_instance(rng):
    n_users = int(rng.integers(1, 21))
    n_items = int(rng.integers(2, 16))
    foldin = rng.random((n_users, n_items)) < 0.25
    held = (rng.random((n_users, n_items)) < 0.3) & ~foldin
    held[0, np.flatnonzero(~foldin[0])[:1]] = True
    K = int(rng.integers(1, n_items + 1))
    ranked = np.full((n_users, K), -1, dtype=np.int64)
    for i in range(n_users):
        cand = rng.permutation(np.flatnonzero(~foldin[i]))
        length = min(K, cand.size, int(rng.integers(0, K + 1)) if rng.random() < 0.2 else K)
        ranked[i, :length] = cand[:length]
    freq = rng.integers(0, 30, n_items)
    freq[0] += 1
    return ranked, held.astype(np.float64), freq, K


def test_metric_oracles_on_random_instances():
    rng = np.random.default_rng(2024)
    for _ in range(200):
        ranked, H, freq, K = random_instance(rng)
        Hs = sp.csr_matrix(H)
        for k in sorted({1, K, max(1, K // 2)}):
            assert abs(metrics.recall_at_k(ranked, Hs, k) - o_recall(ranked, H, k)) < 1e-9
            assert abs(metrics.ndcg_at_k(ranked, Hs, k) - o_ndcg(ranked, H, k)) < 1e-9
            assert abs(adv.item_recall_from_ranked(ranked, Hs, k) - o_item_recall(ranked, H, k)) < 1e-9
            for b in {1, max(1, len(ranked) // 3), len(ranked)}:
                got = metrics.coverage_at_k(ranked, k, b)
                want = o_coverage(ranked, k, b)
                assert abs(got[0] - want[0]) < 1e-9 and abs(got[1] - want[1]) < 1e-9
            if o_gini(list(freq)) == 0:
                with pytest.raises(MetricError):
                    metrics.gini_ratio(ranked, freq, k)
            elif np.any(ranked[:, :k] >= 0):
                assert abs(metrics.gini_ratio(ranked, freq, k) - o_gini_ratio(ranked, freq, k)) < 1e-9


def test_recall_examples():
    H = sp.csr_matrix(np.array([[1, 1, 0, 0]], dtype=float))
    assert metrics.recall_at_k(np.array([[0, 3]]), H, 2) == 0.5
    assert metrics.recall_at_k(np.array([[1, 0, 2]]), H, 3) == 1.0


def test_recall_skips_empty_users():
    H = sp.csr_matrix(np.array([[1, 0], [0, 0]], dtype=float))
    assert metrics.recall_at_k(np.array([[0], [1]]), H, 1) == 1.0


def test_ndcg_examples():
    H = sp.csr_matrix(np.array([[0, 0, 1, 0]], dtype=float))
    assert metrics.ndcg_at_k(np.array([[2, 0, 1]]), H, 3) == 1.0
    assert metrics.ndcg_at_k(np.array([[0, 1, 2]]), H, 3) == pytest.approx(0.5)


def test_coverage_examples():
    same = np.tile(np.arange(5), (10, 1))
    assert metrics.coverage_at_k(same, 5, 10) == (5.0, 0.0)
    disjoint = np.arange(50).reshape(10, 5)
    assert metrics.coverage_at_k(disjoint, 5, 10)[0] == 50
    with pytest.raises(MetricError):
        metrics.coverage_at_k(same, 5, 11)


def test_coverage_ratio_examples():
    assert metrics.coverage_ratio(1461, 100, 100, 20108) == pytest.approx(0.1461)
    assert metrics.coverage_ratio(50, 5, 10, 1000) == 1.0
    assert metrics.coverage_ratio(40, 10, 10, 80) == 0.5


def test_gini_examples():
    assert metrics.gini([3, 3, 3]) == 0.0
    for n in (2, 5, 17):
        x = np.zeros(n)
        x[1] = 9
        assert metrics.gini(x) == pytest.approx((n - 1) / n, abs=1e-12)
    with pytest.raises(MetricError):
        metrics.gini([0, 0])


def test_per_category_identities():
    rng = np.random.default_rng(3)
    ranked, H, _, K = random_instance(rng)
    Hs = sp.csr_matrix(H)
    n_items = H.shape[1]
    glob = adv.item_recall_from_ranked(ranked, Hs, K)
    one = metrics.per_category_report(ranked, Hs, {"g": [["all"]] * n_items}, K)
    assert one[0]["item_recall"] == pytest.approx(glob)
    labels = [["a"] if j % 2 else ["b"] for j in range(n_items)]
    rows = metrics.per_category_report(ranked, Hs, {"g": labels}, K)
    combined = sum(r["item_recall"] * r["n_items"] for r in rows) / n_items
    assert combined == pytest.approx(glob)
    assert [r["item_recall"] for r in rows] == sorted(r["item_recall"] for r in rows)


def test_per_category_empty_category_is_zero():
    H = sp.csr_matrix(np.array([[1, 0, 0]], dtype=float))
    rows = metrics.per_category_report(np.array([[0]]), H, {"g": [["x"], ["y"], ["y"]]}, 1)
    by = {r["category"]: r for r in rows}
    assert by["y"]["item_recall"] == 0.0 and by["y"]["n_items"] == 2


def test_item_categories_and_meta(tmp_path):
    p = tmp_path / "items.csv"
    p.write_text("item_id,year,genres\n1,1994,Comedy|Drama\n2,,\n3,2001,Action\n", encoding="utf-8")
    meta = metrics.load_item_meta(p)
    cats = metrics.item_categories(["1", "2", "3"], meta)
    assert cats["year"] == [["1990s"], ["unknown"], ["2000s"]]
    assert cats["genre"] == [["Comedy", "Drama"], ["unknown"], ["Action"]]
    with pytest.raises(MetricError):
        metrics.item_categories(["1", "8", "9"], meta)


def test_pca_matches_dense_eigensolver():
    rng = np.random.default_rng(1)
    D = (rng.random((40, 25)) < 0.3).astype(float)
    coords, var = metrics.pca_project(sp.csr_matrix(D), 2, seed=0)
    C = D.T - D.T.mean(axis=0, keepdims=True)
    vals, vecs = np.linalg.eigh(C @ C.T)
    for c in range(2):
        v = vecs[:, -1 - c]
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        np.testing.assert_allclose(coords[:, c], v * np.sqrt(vals[-1 - c]), atol=1e-6)
        assert var[c] == pytest.approx(vals[-1 - c] / 25, rel=1e-9)


def test_pca_degenerate_component_warns():
    D = np.zeros((4, 3))
    D[:, 0] = 1
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        coords, _ = metrics.pca_project(sp.csr_matrix(D), 2)
    assert any("degenerate" in str(w.message) for w in caught)
    assert np.all(coords[:, 1] == 0)


def test_evaluate_ranked_report_shape():
    rng = np.random.default_rng(0)
    ranked = np.array([rng.permutation(30)[:20] for _ in range(12)])
    H = sp.csr_matrix((rng.random((12, 30)) < 0.2).astype(float))
    rep = metrics.evaluate_ranked(ranked, H, np.arange(1, 31), ks=(5, 20), coverage_batches=(4, 50))
    d = rep.to_dict()
    assert set(d["recall"]) == {"5", "20"}
    assert set(d["coverage"]["5"]) == {"4"}
    for k in ("5", "20"):
        assert 0 <= d["recall"][k] <= 1 and 0 <= d["item_recall"][k] <= 1


def test_movielens_movies_layout(tmp_path):
    p = tmp_path / "movies.csv"
    p.write_text('movieId,title,genres\n1,Toy Story (1995),Adventure|Animation\n'
                 '2,"Heat, The (1995) ",Action\n3,No Year,(no genres listed)\n', encoding="utf-8")
    meta = metrics.load_item_meta(p)
    assert meta.year == {"1": 1995, "2": 1995, "3": None}
    assert meta.genres["1"] == ["Adventure", "Animation"] and meta.genres["3"] == []
