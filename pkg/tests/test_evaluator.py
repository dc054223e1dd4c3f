import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vsl.evaluator import (
    GroundTruth,
    confuser_outranks,
    format_tables,
    query_ranks,
    rank_of_ground_truth,
    recall_table,
    recall_table_folds,
    tables_to_json,
)


def sorted_rank(scores, positives):
    """Full sort with the lower index winning ties; position of the first positive."""
    order = sorted(range(len(scores)), key=lambda k: (-scores[k], k))
    return min(order.index(p) for p in positives) + 1


def brute_force_recall(S, gt, direction, ks=(1, 5, 10)):
    if direction == "i2t":
        ranks = [sorted_rank(list(S[i]), gt.img_to_txts[i]) for i in range(S.shape[0])]
    else:
        ranks = [sorted_rank(list(S[:, t]), [gt.txt_to_img[t]]) for t in range(S.shape[1])]
    return {k: sum(r <= k for r in ranks) / len(ranks) for k in ks}


class TestRankOfGroundTruth:
    def test_top_item(self):
        assert rank_of_ground_truth([0.9, 0.8, 0.7], {0}) == 1

    def test_best_of_several(self):
        assert rank_of_ground_truth([0.1, 0.9, 0.5], {0, 2}) == 2

    def test_ties_favour_lower_index(self):
        assert rank_of_ground_truth([0.3, 0.3, 0.3], {2}) == 3

    def test_empty(self):
        with pytest.raises(ValueError):
            rank_of_ground_truth([0.1], set())


class TestRecallTable:
    def test_block_diagonal(self):
        gt = GroundTruth.from_counts([2, 3, 1])
        S = np.zeros((3, 6))
        for i, txts in enumerate(gt.img_to_txts):
            S[i, txts] = 1.0
        for direction in ("i2t", "t2i"):
            assert recall_table(S, gt, direction).r_at == {1: 1.0, 5: 1.0, 10: 1.0}

    def test_hand_three_by_three(self):
        gt = GroundTruth.from_counts([1, 1, 1])
        S = np.array([[0.9, 0.2, 0.1],
                      [0.8, 0.3, 0.7],
                      [0.1, 0.5, 0.4]])
        # i2t ranks 1, 3, 2; t2i ranks 1, 2, 2
        i2t = recall_table(S, gt, "i2t", ks=(1, 2, 3))
        t2i = recall_table(S, gt, "t2i", ks=(1, 2, 3))
        assert i2t.r_at == {1: 1 / 3, 2: 2 / 3, 3: 1.0}
        assert t2i.r_at == {1: 1 / 3, 2: 1.0, 3: 1.0}

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="does not match"):
            recall_table(np.zeros((2, 3)), GroundTruth.from_counts([1, 1]), "t2i")

    def test_unknown_direction(self):
        with pytest.raises(ValueError):
            query_ranks(np.zeros((1, 1)), GroundTruth.from_counts([1]), "x2y")

    def test_random_against_full_sort(self):
        rng = np.random.default_rng(0)
        gt = GroundTruth.from_counts([5] * 10)
        S = rng.standard_normal((10, 50))
        for direction in ("i2t", "t2i"):
            assert recall_table(S, gt, direction).r_at == brute_force_recall(S, gt, direction)

    def test_inconsistent_ground_truth(self):
        with pytest.raises(ValueError):
            GroundTruth([[0, 1], [1]], np.array([0, 1]))


def problem(draw_counts, seed, coarse):
    rng = np.random.default_rng(seed)
    gt = GroundTruth.from_counts(draw_counts)
    S = rng.standard_normal((gt.n_images, gt.n_texts))
    if coarse:
        S = np.round(S, 1)  # plenty of ties
    return S, gt


class TestRecallProperties:
    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.integers(1, 5), min_size=1, max_size=12), st.integers(0, 2**32 - 1), st.booleans())
    def test_matches_full_sort(self, counts, seed, coarse):
        S, gt = problem(counts, seed, coarse)
        for direction in ("i2t", "t2i"):
            assert recall_table(S, gt, direction).r_at == brute_force_recall(S, gt, direction)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.integers(1, 5), min_size=1, max_size=12), st.integers(0, 2**32 - 1))
    def test_monotone_in_k(self, counts, seed):
        S, gt = problem(counts, seed, False)
        for direction in ("i2t", "t2i"):
            r = recall_table(S, gt, direction, ks=range(1, 12)).r_at
            assert all(r[k] <= r[k + 1] for k in range(1, 11))
            assert all(0.0 <= v <= 1.0 for v in r.values())

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.integers(1, 5), min_size=2, max_size=12), st.integers(0, 2**32 - 1))
    def test_gallery_permutation(self, counts, seed):
        # without ties, relabelling the gallery leaves every rank unchanged
        S, gt = problem(counts, seed, False)
        perm = np.random.default_rng(seed).permutation(gt.n_texts)
        inv = np.argsort(perm)
        gt_p = GroundTruth([[int(inv[t]) for t in txts] for txts in gt.img_to_txts], gt.txt_to_img[perm])
        np.testing.assert_array_equal(query_ranks(S[:, perm], gt_p, "i2t"), query_ranks(S, gt, "i2t"))


class TestFolds:
    def test_single_fold_equals_plain(self):
        rng = np.random.default_rng(1)
        gt = GroundTruth.from_counts([2] * 10)
        S = rng.standard_normal((10, 20))
        assert recall_table_folds(S, gt, "t2i", folds=1).r_at == recall_table(S, gt, "t2i").r_at

    def test_mean_of_blocks(self):
        rng = np.random.default_rng(2)
        gt = GroundTruth.from_counts([2] * 10)
        S = rng.standard_normal((10, 20))
        halves = [recall_table(S[lo:lo + 5, 2 * lo:2 * lo + 10], GroundTruth.from_counts([2] * 5), "i2t")
                  for lo in (0, 5)]
        out = recall_table_folds(S, gt, "i2t", folds=2)
        for k in (1, 5, 10):
            assert out.r_at[k] == pytest.approx((halves[0].r_at[k] + halves[1].r_at[k]) / 2)


class TestReporting:
    def test_column_order(self):
        gt = GroundTruth.from_counts([1, 1])
        S = np.eye(2)
        text = format_tables(recall_table(S, gt, "i2t"), recall_table(S, gt, "t2i"), label="vsl")
        head, row = text.splitlines()
        assert head.split()[:1] == ["Method"]
        cols = [c for c in head.split("  ") if c.strip()]
        assert [c.strip() for c in cols] == ["Method", "i2t R@1", "i2t R@5", "i2t R@10",
                                             "t2i R@1", "t2i R@5", "t2i R@10"]
        assert row.split() == ["vsl"] + ["100.0"] * 6

    def test_json(self):
        import json
        gt = GroundTruth.from_counts([1, 1])
        obj = json.loads(tables_to_json(recall_table(np.eye(2), gt, "i2t"), recall_table(np.eye(2), gt, "t2i")))
        assert obj["t2i"]["r_at"]["1"] == 1.0


class TestConfuser:
    def test_counts_outranking_texts(self):
        gt = GroundTruth.from_counts([2, 2, 2])
        S = np.array([[0.9, 0.4, 0.1, 0.1, 0.0, 0.0],
                      [0.5, 0.6, 0.8, 0.8, 0.1, 0.0],
                      [0.0, 0.0, 0.0, 0.0, 0.7, 0.7]])
        # image 1 carries image 0's content: it beats image 0 on text 1 only
        assert confuser_outranks(S, gt, [-1, 0, -1]) == 1
        assert confuser_outranks(S, gt, [-1, -1, -1]) == 0
