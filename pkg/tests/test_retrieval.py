import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ratcap.metrics import IdfTable
from ratcap.retrieval import (
    Datastore,
    RetrievalConfig,
    RetrievalError,
    build_index,
    embed_aggregate,
    exact_knn,
    hnsw_knn,
    nn_quality_report,
    relevance,
    retrieve_captions,
)


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def toy_store(n=30, dim=8, caps=5, seed=0, aggregation="mean"):
    rng = np.random.default_rng(seed)
    items = []
    for i in range(n):
        grid = rng.normal(size=(3, dim))
        items.append((f"img{i:03d}", grid, [f"caption {j} of image {i}" for j in range(caps)]))
    return Datastore.from_grids(items, aggregation), items


class TestEmbed:
    def test_mean(self):
        np.testing.assert_array_equal(embed_aggregate([[1, 2], [3, 4]], "mean"), [2, 3])

    def test_max(self):
        np.testing.assert_array_equal(embed_aggregate([[1, 2], [3, 4]], "max"), [3, 4])

    def test_l2norm_sum_formula(self):
        # rows normalized to unit length, summed, sum normalized
        r1 = np.array([1, 2]) / np.sqrt(5)
        r2 = np.array([3, 4]) / 5.0
        s = r1 + r2
        expected = s / np.sqrt(s @ s)
        out = embed_aggregate([[1, 2], [3, 4]], "l2norm_sum")
        np.testing.assert_allclose(out, expected, rtol=1e-15)
        np.testing.assert_allclose(out, [0.5257, 0.8506], atol=1e-4)

    def test_l2norm_sum_skips_zero_rows(self):
        out = embed_aggregate([[0, 0], [3, 4]], "l2norm_sum")
        np.testing.assert_allclose(out, [0.6, 0.8])

    def test_l2norm_sum_all_zero(self):
        with pytest.raises(RetrievalError):
            embed_aggregate([[0, 0], [0, 0]], "l2norm_sum")

    def test_empty_grid(self):
        with pytest.raises(RetrievalError):
            embed_aggregate(np.zeros((0, 3)), "mean")

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (1, 5), elements=st.floats(0.1, 10)), st.sampled_from(["mean", "max"]))
    def test_single_row_identity(self, row, method):
        np.testing.assert_array_equal(embed_aggregate(row, method), row[0])

    def test_single_row_l2norm_is_direction(self):
        np.testing.assert_allclose(embed_aggregate([[3.0, 4.0]], "l2norm_sum"), [0.6, 0.8])


class TestRelevance:
    def test_orthogonal(self):
        assert relevance([1, 0], [0, 1]) == 0

    def test_unit_self(self):
        v = unit([1, 2, 3])
        assert relevance(v, v) == pytest.approx(1.0)

    def test_random_pairs(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            a, b = rng.normal(size=7), rng.normal(size=7)
            # summation order may differ from BLAS by an ulp
            expected = math.fsum(float(x) * float(y) for x, y in zip(a, b))
            assert relevance(a, b) == pytest.approx(expected, rel=1e-14, abs=1e-15)
            assert relevance(a, b) == relevance(b, a)

    def test_dim_mismatch(self):
        with pytest.raises(RetrievalError):
            relevance([1, 2], [1, 2, 3])


class TestExactKnn:
    def test_simple(self):
        store = Datastore(["A", "B"], np.array([[1.0, 0.0], [0.0, 1.0]]), [["a"], ["b"]])
        assert exact_knn([1.0, 0.0], store, 1).ids == ["A"]

    def test_self_first(self):
        rng = np.random.default_rng(1)
        embs = rng.normal(size=(50, 6))
        embs /= np.linalg.norm(embs, axis=1, keepdims=True)
        store = Datastore([f"i{i}" for i in range(50)], embs, [["c"]] * 50)
        for i in range(50):
            assert exact_knn(embs[i], store, 3).ids[0] == f"i{i}"

    @pytest.mark.parametrize("k", [1, 5, 10])
    def test_brute_force_sort_oracle(self, k):
        rng = np.random.default_rng(k)
        embs = rng.normal(size=(1000, 16))
        ids = [f"v{i:04d}" for i in range(1000)]
        store = Datastore(ids, embs, [["c"]] * 1000)
        for _ in range(20):
            q = rng.normal(size=16)
            scored = [(-sum(float(a) * float(b) for a, b in zip(e, q)), i) for e, i in zip(embs, ids)]
            expected = [i for _, i in sorted(scored)[:k]]
            got = exact_knn(q, store, k)
            assert got.ids == expected
            assert all(a >= b for a, b in zip(got.scores, got.scores[1:]))

    def test_ties_by_id(self):
        store = Datastore(["b", "a", "c"], np.array([[1.0], [1.0], [0.5]]), [["x"]] * 3)
        assert exact_knn([1.0], store, 3).ids == ["a", "b", "c"]

    def test_k_too_large_flagged(self):
        store = Datastore(["A", "B"], np.eye(2), [["a"], ["b"]])
        got = exact_knn([1.0, 0.0], store, 5)
        assert got.short and got.ids == ["A", "B"]


class TestDatastore:
    def test_duplicate_id(self):
        with pytest.raises(RetrievalError, match="dup"):
            Datastore(["a", "a"], np.eye(2), [["x"], ["y"]])

    def test_needs_caption(self):
        with pytest.raises(RetrievalError, match="no captions"):
            Datastore(["a"], np.eye(1), [[]])

    def test_jsonl_roundtrip(self, tmp_path):
        store, _ = toy_store()
        store.save(tmp_path / "ds.jsonl")
        again = Datastore.load(tmp_path / "ds.jsonl")
        assert again.ids == store.ids and again.captions == store.captions
        np.testing.assert_array_equal(again.embeddings, store.embeddings)
        assert again.checksum() == store.checksum()


class TestRetrieveCaptions:
    def test_exclusion_contract(self):
        store, items = toy_store()
        cfg = RetrievalConfig(k=1, k_unit="images", exact=True)
        grid = items[4][1]
        ranked = exact_knn(embed_aggregate(grid), store, 2).ids
        assert ranked[0] == "img004"
        got = retrieve_captions(grid, store, None, cfg, exclude_id="img004")
        assert got.image_ids == [ranked[1]]
        assert got.captions == store.captions_of(ranked[1])
        assert not set(got.captions) & set(store.captions_of("img004"))

    def test_ordering_contract(self):
        store, items = toy_store()
        cfg = RetrievalConfig(k=2, k_unit="images", exact=True)
        got = retrieve_captions(items[0][1], store, None, cfg)
        assert len(got.captions) == 10
        assert got.captions[:5] == store.captions_of(got.image_ids[0])

    def test_k_counts_captions(self):
        store, items = toy_store()
        cfg = RetrievalConfig(k=7, k_unit="captions", exact=True)
        got = retrieve_captions(items[0][1], store, None, cfg, exclude_id="img000")
        assert len(got.captions) == 7 and len(got.image_ids) == 2
        assert got.captions[5:] == store.captions_of(got.image_ids[1])[:2]

    @pytest.mark.parametrize("k", [1, 3, 10, 29])
    def test_exclude_never_selected(self, k):
        store, items = toy_store()
        index = build_index(store)
        for exact in (True, False):
            cfg = RetrievalConfig(k=k, k_unit="images", exact=exact)
            for image_id, grid, _ in items[:10]:
                got = retrieve_captions(grid, store, index, cfg, exclude_id=image_id)
                assert image_id not in got.image_ids
                assert len(got.image_ids) == k

    def test_short_flag(self):
        store, items = toy_store(n=3)
        cfg = RetrievalConfig(k=3, k_unit="images", exact=True)
        got = retrieve_captions(items[0][1], store, None, cfg, exclude_id="img000")
        assert got.short and len(got.image_ids) == 2

    def test_exact_deterministic(self):
        store, items = toy_store()
        cfg = RetrievalConfig(k=12, exact=True)
        runs = [retrieve_captions(items[3][1], store, None, cfg).captions for _ in range(3)]
        assert runs[0] == runs[1] == runs[2]

    def test_aggregation_mismatch(self):
        store, items = toy_store()
        with pytest.raises(RetrievalError, match="aggregation"):
            retrieve_captions(items[0][1], store, None, RetrievalConfig(aggregation="max"))

    def test_hnsw_scores_non_increasing(self):
        store, items = toy_store(n=200)
        index = build_index(store)
        for _, grid, _ in items[:20]:
            got = hnsw_knn(embed_aggregate(grid), store, index, 10)
            assert all(a >= b for a, b in zip(got.scores, got.scores[1:]))


class TestNNReport:
    def test_oracle_monotone_and_identity(self):
        store, items = toy_store(n=40, aggregation="l2norm_sum")
        index = build_index(store)
        # test set whose ground truth equals stored captions of the nearest image
        test = [(f"q{i}", grid, store.captions_of(image_id)) for i, (image_id, grid, _) in enumerate(items[:8])]
        cfg = RetrievalConfig(k=5, k_unit="captions", exact=True, aggregation="l2norm_sum")
        rep = nn_quality_report(test, store, index, cfg, ks=[1, 5, 10, 20])
        for m in rep.oracle[1]:
            vals = [rep.oracle[k][m] for k in rep.ks]
            assert all(a <= b + 1e-12 for a, b in zip(vals, vals[1:])), m
        # unit embeddings: the top image is the query itself, so its captions are the references
        assert rep.oracle[5]["BLEU-1"] == pytest.approx(1.0)
        assert "oracle" in rep.to_table()

    def test_hnsw_report_nested(self):
        store, items = toy_store(n=60, seed=3)
        index = build_index(store)
        rng = np.random.default_rng(9)
        test = [(f"q{i}", rng.normal(size=(3, 8)), ["caption 1 of image 2"]) for i in range(10)]
        rep = nn_quality_report(test, store, index, RetrievalConfig(k=5), ks=[5, 10, 20, 40], idf=IdfTable.build([["a b"], ["c d"]]))
        for m in rep.oracle[5]:
            vals = [rep.oracle[k][m] for k in rep.ks]
            assert vals == sorted(vals)
