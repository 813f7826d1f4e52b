"""Search protocols, affinity graphs, diffusion, and retrieval metrics."""

import io

import numpy as np
import pytest
import scipy.sparse as sp

from edgemac.errors import (
    FormatError,
    InputError,
    ProtocolError,
    ShapeError,
    SizeError,
)
from edgemac.retrieval import (
    AffinityGraph,
    Index,
    build_knn_graph,
    combine_graphs,
    diffuse,
    diffusion_rerank,
    evaluate_acc_at_k,
    evaluate_map,
    knn_search,
    load_graph,
    load_index,
    save_graph,
    save_index,
    search_multi,
)


def unit_rows(mat):
    mat = np.asarray(mat, dtype=np.float64)
    return mat / np.linalg.norm(mat, axis=-1, keepdims=True)


def simple_index(vectors, ids=None):
    vectors = np.asarray(vectors, dtype=np.float64)
    if ids is None:
        ids = [f"item{i}" for i in range(vectors.shape[0])]
    per = vectors.shape[1] if vectors.ndim == 3 else 1
    return Index(ids=ids, vectors=vectors.astype(np.float32), per_item_count=per)


class TestKnnSearch:
    def test_exact_match_ranks_first(self):
        vecs = unit_rows(np.eye(3))
        index = simple_index(vecs)
        out = knn_search(vecs[1], index, 3)
        assert out[0][0] == "item1"
        assert out[0][1] == pytest.approx(1.0, abs=1e-6)

    def test_orthogonal_query_ties_break_by_id(self):
        vecs = unit_rows([[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 1, 0]])
        index = simple_index(vecs, ids=["c", "a", "b"])
        out = knn_search(np.array([0, 0, 0, 1.0]), index, 3)
        assert [i for i, _ in out] == ["a", "b", "c"]
        assert all(s == 0.0 for _, s in out)

    def test_three_dot_products_sorted(self):
        q = np.array([1.0, 0.0])
        angles = [np.arccos(0.9), np.arccos(0.1), np.arccos(0.5)]
        vecs = np.stack([[np.cos(a), np.sin(a)] for a in angles])
        index = simple_index(vecs)
        out = knn_search(q, index, 3)
        assert [i for i, _ in out] == ["item0", "item2", "item1"]

    def test_k_clipped_to_index_size(self):
        index = simple_index(unit_rows(np.eye(3)))
        assert len(knn_search(np.array([1.0, 0, 0]), index, 99)) == 3

    def test_multi_index_rejected(self, rng):
        vecs = unit_rows(rng.standard_normal((2, 10, 4)))
        index = simple_index(vecs)
        with pytest.raises(ProtocolError):
            knn_search(np.ones(4) / 2.0, index, 1)

    def test_brute_force_oracle_equivalence(self, rng):
        vecs = unit_rows(rng.standard_normal((200, 16)))
        index = simple_index(vecs)
        q = unit_rows(rng.standard_normal(16))
        out = knn_search(q, index, 200)
        expected_scores = {f"item{i}": float(vecs[i] @ q) for i in range(200)}
        for item_id, score in out:
            assert score == pytest.approx(expected_scores[item_id], abs=1e-6)
        scores = [s for _, s in out]
        assert scores == sorted(scores, reverse=True)


class TestSearchMulti:
    def test_perfect_instance_match(self, rng):
        inst = unit_rows(rng.standard_normal((10, 6)))
        index = simple_index(inst[None, :, :])
        out = search_multi(inst, index)
        assert out[0][1] == pytest.approx(1.0, abs=1e-6)

    def test_half_matching_instances_average(self):
        q = np.zeros((10, 2))
        q[:, 0] = 1.0
        item = np.zeros((10, 2))
        item[:5, 0] = 1.0  # five instances aligned, five orthogonal
        item[5:, 1] = 1.0
        index = simple_index(item[None, :, :])
        out = search_multi(q, index)
        assert out[0][1] == pytest.approx(0.5, abs=1e-7)

    def test_single_index_rejected(self, rng):
        index = simple_index(unit_rows(rng.standard_normal((3, 4))))
        with pytest.raises(ProtocolError):
            search_multi(unit_rows(rng.standard_normal((10, 4))), index)


class TestIndex:
    def test_non_unit_vectors_rejected(self):
        with pytest.raises(InputError):
            simple_index(np.array([[1.0, 1.0]]))

    def test_duplicate_ids_rejected(self, rng):
        vecs = unit_rows(rng.standard_normal((2, 3)))
        with pytest.raises(InputError):
            simple_index(vecs, ids=["a", "a"])

    def test_save_load_round_trip(self, rng, tmp_path):
        vecs = unit_rows(rng.standard_normal((4, 10, 5)))
        index = simple_index(vecs)
        path = tmp_path / "x.emdc"
        save_index(path, index)
        again = load_index(path)
        assert again.ids == index.ids
        assert again.per_item_count == 10
        np.testing.assert_array_equal(again.vectors, index.vectors)


class TestBuildKnnGraph:
    def test_symmetry_and_zero_diagonal(self, rng):
        d = unit_rows(rng.standard_normal((20, 8)))
        g = build_knn_graph(d, k=4, gamma=3.0)
        m = g.matrix.toarray()
        np.testing.assert_array_equal(m, m.T)
        assert np.all(np.diag(m) == 0.0)
        assert m.min() >= 0.0

    def test_three_on_a_line(self):
        angles = [0.0, 0.4, 1.2]
        d = np.stack([[np.cos(a), np.sin(a)] for a in angles])
        g = build_knn_graph(d, k=1, gamma=1.0)
        m = g.matrix.toarray()
        # 0 and 1 pick each other; 2 picks 1: mutual inclusion symmetrizes
        assert m[0, 1] == pytest.approx(np.cos(0.4), rel=1e-9)
        assert m[1, 2] == pytest.approx(np.cos(0.8), rel=1e-9)
        assert m[0, 2] == 0.0

    def test_identical_descriptors_weight_one(self):
        d = unit_rows([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        g = build_knn_graph(d, k=1, gamma=1.0)
        assert g.matrix.toarray()[0, 1] == pytest.approx(1.0, rel=1e-12)

    def test_negative_cosines_clipped(self):
        d = np.array([[1.0, 0.0], [-1.0, 0.0]])
        g = build_knn_graph(d, k=1, gamma=3.0)
        assert g.matrix.nnz == 0

    def test_too_small_collection(self):
        with pytest.raises(SizeError):
            build_knn_graph(np.ones((1, 4)), k=1, gamma=1.0)

    def test_k_clipped_to_n_minus_one(self, rng):
        d = unit_rows(rng.standard_normal((5, 3)))
        g = build_knn_graph(d, k=50, gamma=1.0)
        assert g.n == 5


class TestCombineGraphs:
    def two_node(self, weight):
        m = sp.csr_matrix(np.array([[0.0, weight], [weight, 0.0]]))
        return AffinityGraph(m)

    def test_zero_second_graph_rescales_first(self):
        a = self.two_node(0.25)
        zero = AffinityGraph(sp.csr_matrix((2, 2)))
        out = combine_graphs(a, zero)
        assert out.matrix.toarray()[0, 1] == pytest.approx(1.0, rel=1e-12)

    def test_commutative(self, rng):
        d = unit_rows(rng.standard_normal((8, 4)))
        e = unit_rows(rng.standard_normal((8, 4)))
        a = build_knn_graph(d, 3, 2.0)
        b = build_knn_graph(e, 3, 2.0)
        ab = combine_graphs(a, b).matrix.toarray()
        ba = combine_graphs(b, a).matrix.toarray()
        np.testing.assert_allclose(ab, ba, atol=1e-15)

    def test_same_edge_sums_to_one(self):
        out = combine_graphs(self.two_node(0.4), self.two_node(0.6))
        assert out.matrix.toarray()[0, 1] == pytest.approx(1.0, rel=1e-12)

    def test_size_mismatch(self):
        with pytest.raises(ShapeError):
            combine_graphs(self.two_node(0.4), AffinityGraph(sp.csr_matrix((3, 3))))


class TestDiffuse:
    def test_two_node_closed_form(self):
        g = AffinityGraph(sp.csr_matrix(np.array([[0.0, 1.0], [1.0, 0.0]])))
        f = diffuse(g, np.array([1.0, 0.0]), alpha=0.9)
        np.testing.assert_allclose(f, [1 / 0.19, 0.9 / 0.19], atol=1e-4)
        np.testing.assert_allclose(f, [5.2632, 4.7368], atol=1e-4)

    def test_tiny_alpha_returns_seed(self, rng):
        d = unit_rows(rng.standard_normal((6, 3)))
        g = build_knn_graph(d, 2, 1.0)
        y = np.abs(rng.standard_normal(6))
        f = diffuse(g, y, alpha=1e-9)
        np.testing.assert_allclose(f, y, atol=1e-6)

    def test_matches_dense_inverse_oracle(self, rng):
        n = 50
        d = unit_rows(rng.standard_normal((n, 10)))
        g = build_knn_graph(d, 6, 2.0)
        y = np.zeros(n)
        y[rng.integers(0, n, size=5)] = rng.uniform(0.2, 1.0, size=5)
        f = diffuse(g, y, alpha=0.9)
        a = g.matrix.toarray()
        deg = a.sum(axis=1)
        deg[deg == 0.0] = 1.0
        s = a / np.sqrt(np.outer(deg, deg))
        expected = np.linalg.solve(np.eye(n) - 0.9 * s, y)
        assert np.abs(f - expected).max() < 1e-6

    def test_nonnegative_output(self, rng):
        for trial in range(10):
            d = unit_rows(rng.standard_normal((20, 6)))
            g = build_knn_graph(d, 4, 2.0)
            y = np.zeros(20)
            y[int(rng.integers(0, 20))] = 1.0
            f = diffuse(g, y, alpha=0.8)
            assert f.min() > -1e-9

    def test_zero_seed_rejected(self):
        g = AffinityGraph(sp.csr_matrix(np.array([[0.0, 1.0], [1.0, 0.0]])))
        with pytest.raises(InputError):
            diffuse(g, np.zeros(2), alpha=0.5)

    def test_alpha_out_of_range(self):
        g = AffinityGraph(sp.csr_matrix(np.array([[0.0, 1.0], [1.0, 0.0]])))
        with pytest.raises(InputError):
            diffuse(g, np.array([1.0, 0.0]), alpha=1.0)


class TestDiffusionRerank:
    def test_edgeless_graph_keeps_seeding_order(self):
        g = AffinityGraph(sp.csr_matrix((4, 4)))
        ranked = [("b", 0.9), ("d", 0.7), ("a", 0.5), ("c", 0.1)]
        out = diffusion_rerank(ranked, [g], alpha=0.5, seed_k=4,
                               node_ids=["a", "b", "c", "d"])
        assert [i for i, _ in out] == ["b", "d", "a", "c"]

    def test_two_clusters_promote_cluster_members(self, rng):
        # planted clusters: the query seeds one member of cluster A with a
        # big score and one member of cluster B with a slightly bigger one;
        # within-cluster affinity pulls all of A above B's singleton
        centers = unit_rows(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))
        a = unit_rows(centers[0] + 0.05 * rng.standard_normal((3, 3)))
        b = unit_rows(centers[1] + 0.05 * rng.standard_normal((3, 3)))
        d = np.concatenate([a, b])
        ids = ["a0", "a1", "a2", "b0", "b1", "b2"]
        g = build_knn_graph(d, 2, 3.0)
        ranked = [("b0", 0.95), ("a0", 0.9)] + [(i, 0.0) for i in ("a1", "a2", "b1", "b2")]
        out = diffusion_rerank(ranked, [g], alpha=0.9, seed_k=2, node_ids=ids)
        # oracle: dense solve of the same system
        adense = g.matrix.toarray()
        deg = adense.sum(axis=1)
        deg[deg == 0.0] = 1.0
        s = adense / np.sqrt(np.outer(deg, deg))
        y = np.zeros(6)
        y[3] = 0.95
        y[0] = 0.9
        expected = np.linalg.solve(np.eye(6) - 0.9 * s, y)
        order = sorted(range(6), key=lambda i: (-expected[i], ids[i]))
        assert [i for i, _ in out] == [ids[i] for i in order]

    def test_unknown_ranked_id_rejected(self):
        g = AffinityGraph(sp.csr_matrix((2, 2)))
        with pytest.raises(InputError):
            diffusion_rerank([("ghost", 1.0)], [g], 0.5, 1, node_ids=["a", "b"])


def brute_force_ap(ranking_ids, relevant):
    """Straightforward re-implementation used as the metric oracle."""
    if not relevant:
        return 0.0
    total = 0.0
    seen = 0
    for rank, item in enumerate(ranking_ids, start=1):
        if item in relevant:
            seen += 1
            total += seen / rank
    return total / len(relevant)


class TestEvaluateMap:
    def test_all_relevant_on_top(self):
        rankings = {"q": [("a", 0.9), ("b", 0.8), ("c", 0.1)]}
        assert evaluate_map(rankings, {"q": {"a", "b"}}) == 1.0

    def test_hand_fixture(self):
        rankings = {"q": [("a", 0.9), ("x", 0.8), ("b", 0.7), ("y", 0.1)]}
        value = evaluate_map(rankings, {"q": {"a", "b"}})
        assert value == pytest.approx((1.0 + 2.0 / 3.0) / 2.0, rel=1e-12)
        assert value == pytest.approx(0.8333, abs=1e-4)

    def test_missing_relevant_item_counts_in_denominator(self):
        rankings = {"q": [("a", 0.9), ("x", 0.8)]}
        value = evaluate_map(rankings, {"q": {"a", "never-retrieved"}})
        assert value == pytest.approx(0.5, rel=1e-12)

    def test_no_relevant_items_is_zero(self):
        rankings = {"q": [("a", 0.9)], "r": [("a", 0.9)]}
        assert evaluate_map(rankings, {"q": {"a"}, "r": set()}) == pytest.approx(0.5)

    def test_duplicate_ids_rejected(self):
        with pytest.raises(InputError):
            evaluate_map({"q": [("a", 0.9), ("a", 0.8)]}, {"q": {"a"}})

    def test_matches_brute_force_on_random_fixtures(self, rng):
        for _ in range(200):
            n = int(rng.integers(2, 30))
            ids = [f"i{k}" for k in range(n)]
            perm = rng.permutation(n)
            ranking = [(ids[i], float(n - r)) for r, i in enumerate(perm)]
            relevant = set(rng.choice(ids, size=int(rng.integers(0, n)), replace=False))
            got = evaluate_map({"q": ranking}, {"q": relevant})
            want = brute_force_ap([i for i, _ in ranking], relevant)
            assert got == pytest.approx(want, abs=1e-12)


class TestEvaluateAccAtK:
    def test_rank_three_match(self):
        rankings = {"q": [("x", 0.9), ("y", 0.8), ("m", 0.7)]}
        assert evaluate_acc_at_k(rankings, {"q": "m"}, 1) == 0.0
        assert evaluate_acc_at_k(rankings, {"q": "m"}, 10) == 1.0

    def test_all_matches_first(self):
        rankings = {f"q{i}": [("m", 1.0), ("x", 0.0)] for i in range(4)}
        for k in (1, 2, 5):
            assert evaluate_acc_at_k(rankings, {f"q{i}": "m" for i in range(4)}, k) == 1.0

    def test_mixed_ranks_fixture(self):
        ranks = {"q0": 1, "q1": 2, "q2": 11, "q3": 5}
        rankings = {}
        for q, r in ranks.items():
            filler = [(f"f{j}", 1.0 - j / 20.0) for j in range(12)]
            filler.insert(r - 1, ("match", 1.0 - (r - 1) / 20.0 + 1e-3))
            rankings[q] = filler
        acc = evaluate_acc_at_k(rankings, {q: "match" for q in ranks}, 10)
        assert acc == pytest.approx(0.75)

    def test_matches_brute_force(self, rng):
        for _ in range(100):
            n = int(rng.integers(2, 20))
            k = int(rng.integers(1, 25))
            rankings, matches = {}, {}
            for q in range(int(rng.integers(1, 6))):
                ids = [f"i{j}" for j in range(n)]
                perm = list(rng.permutation(n))
                rankings[f"q{q}"] = [(ids[i], float(n - r)) for r, i in enumerate(perm)]
                matches[f"q{q}"] = ids[int(rng.integers(0, n))]
            got = evaluate_acc_at_k(rankings, matches, k)
            want = np.mean([
                1.0 if matches[q] in [i for i, _ in rankings[q][:k]] else 0.0
                for q in rankings
            ])
            assert got == pytest.approx(float(want), abs=1e-12)


class TestGraphFile:
    def test_round_trip(self, rng):
        d = unit_rows(rng.standard_normal((12, 5)))
        g = build_knn_graph(d, 3, 2.0)
        ids = [f"n{k}" for k in range(12)]
        buf = io.BytesIO()
        save_graph(buf, g, ids)
        again, loaded_ids = load_graph(io.BytesIO(buf.getvalue()))
        assert loaded_ids == ids
        np.testing.assert_allclose(again.matrix.toarray(), g.matrix.toarray(), atol=1e-15)

    def test_bad_magic(self):
        with pytest.raises(FormatError):
            load_graph(io.BytesIO(b"ABCD" + b"\x00" * 30))

    def test_truncated(self, rng):
        d = unit_rows(rng.standard_normal((5, 3)))
        g = build_knn_graph(d, 2, 1.0)
        buf = io.BytesIO()
        save_graph(buf, g, [str(k) for k in range(5)])
        with pytest.raises(FormatError):
            load_graph(io.BytesIO(buf.getvalue()[:-3]))
