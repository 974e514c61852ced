import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import knn_ref, micro_ap_threshold_ref, random_unit
from sscdkit.descriptor_core import DescriptorSet
from sscdkit.retrieval_eval import (
    L2,
    GroundTruth,
    MatchCandidate,
    distance_histograms,
    evaluate,
    knn_search,
    mean_ap,
    micro_ap,
    mrr,
    recall_at_1,
)

C = MatchCandidate


# -- search ----------------------------------------------------------------------


def test_knn_self_match():
    refs = DescriptorSet.from_array(random_unit(np.random.default_rng(0), 20, 8), prefix="r", normalized=True)
    res = knn_search(refs, refs, 1)
    assert [(c.query_id, c.ref_id) for c in res] == [(i, i) for i in refs.ids]
    assert all(c.score == pytest.approx(1.0, abs=1e-12) for c in res)


def test_knn_k_exceeds_refs():
    rng = np.random.default_rng(1)
    refs = DescriptorSet.from_array(random_unit(rng, 5, 4), prefix="r")
    q = DescriptorSet.from_array(random_unit(rng, 2, 4), prefix="q")
    res = knn_search(q, refs, 50)
    assert len(res) == 10
    for qid in q.ids:
        scores = [c.score for c in res if c.query_id == qid]
        assert scores == sorted(scores, reverse=True)


def test_knn_matches_double_loop_small():
    rng = np.random.default_rng(2)
    Q, R = random_unit(rng, 30, 16), random_unit(rng, 200, 16)
    ids = [f"r{i:03d}" for i in range(200)]
    res = knn_search(DescriptorSet.from_array(Q, prefix="q"), DescriptorSet.from_array(R, ids), 5)
    got = [[c.ref_id for c in res[5 * i : 5 * i + 5]] for i in range(30)]
    assert got == knn_ref(Q, R, ids, 5)


def test_knn_matches_oracle_1000x10000():
    # small integer entries: every dot product is exact, so ties are real and
    # must be broken by reference id
    rng = np.random.default_rng(3)
    Q = rng.integers(-2, 3, (1000, 16)).astype(np.float64)
    R = rng.integers(-2, 3, (10_000, 16)).astype(np.float64)
    ids = [f"id{v:06d}" for v in rng.permutation(10_000)]
    k = 10
    res = knn_search(DescriptorSet.from_array(Q, prefix="q"), DescriptorSet.from_array(R, ids), k, block_size=3000)
    id_rank = np.argsort(np.argsort(ids))
    for qi in range(1000):
        s = (R * Q[qi]).sum(axis=1)
        order = np.lexsort((id_rank, -s))[:k]
        got = res[k * qi : k * qi + k]
        assert [c.ref_id for c in got] == [ids[j] for j in order]
        assert [c.score for c in got] == [s[j] for j in order]


def test_knn_l2_scores_are_negated_squared_distances():
    rng = np.random.default_rng(4)
    Q, R = rng.standard_normal((6, 5)), rng.standard_normal((40, 5))
    res = knn_search(DescriptorSet.from_array(Q, prefix="q"), DescriptorSet.from_array(R, prefix="r"), 3, L2)
    for c in res:
        q, r = Q[int(c.query_id[1:])], R[int(c.ref_id[1:])]
        assert c.score == pytest.approx(-np.sum((q - r) ** 2), abs=1e-12)
    top = [c.ref_id for c in res if c.query_id == "q0"]
    assert top == [f"r{j}" for j in np.argsort(np.sum((R - Q[0]) ** 2, axis=1))[:3]]


def test_knn_errors():
    a = DescriptorSet.from_array(np.eye(3))
    with pytest.raises(ValueError, match="dimension"):
        knn_search(a, DescriptorSet.from_array(np.eye(2)), 1)
    with pytest.raises(ValueError, match="k must"):
        knn_search(a, a, 0)


# -- uAP -------------------------------------------------------------------------


def test_micro_ap_hand_example():
    gt = GroundTruth.from_pairs([("q1", "r1"), ("q2", "r2")])
    cands = [C("q1", "r1", 0.9), C("q1", "r3", 0.8), C("q2", "r2", 0.7)]
    ap, pr = micro_ap(cands, gt)
    assert ap == pytest.approx(0.833333, abs=1e-6)
    assert ap == pytest.approx(0.5 + 0.5 * 2 / 3, abs=1e-15)
    assert pr == [(0.5, 1.0), (0.5, 0.5), (1.0, 2 / 3)]


def test_micro_ap_perfect_and_empty():
    gt = GroundTruth.from_pairs([("a", "x"), ("b", "y")])
    assert micro_ap([C("a", "x", 2.0), C("b", "y", 1.0), C("a", "y", 0.1)], gt)[0] == 1.0
    assert micro_ap([C("a", "y", 2.0), C("b", "x", 1.0)], gt)[0] == 0.0


def test_micro_ap_unpaired_queries_are_false_positives():
    gt = GroundTruth.from_pairs([("a", "x")])
    assert micro_ap([C("z", "x", 2.0), C("a", "x", 1.0)], gt)[0] == 0.5


def test_micro_ap_rejects_duplicates():
    with pytest.raises(ValueError, match="duplicate"):
        micro_ap([C("a", "x", 1.0), C("a", "x", 0.5)], GroundTruth.from_pairs([("a", "x")]))


def _random_instance(rng):
    nq, nr = rng.integers(1, 6), rng.integers(1, 8)
    pairs = [(f"q{i}", f"r{j}") for i in range(nq) for j in range(nr)]
    keep = rng.random(len(pairs))
    cands = [C(q, r, float(rng.integers(0, 6)) / 5) for (q, r), u in zip(pairs, keep) if u < 0.6]
    gt = GroundTruth.from_pairs([p for p in pairs if rng.random() < 0.3] or [pairs[0]])
    return cands, gt


def test_micro_ap_equals_threshold_oracle():
    rng = np.random.default_rng(5)
    for _ in range(200):
        cands, gt = _random_instance(rng)
        ap, pr = micro_ap(cands, gt)
        assert abs(ap - micro_ap_threshold_ref([tuple(c) for c in cands], gt.pairs)) <= 1e-12
        assert all(a[0] <= b[0] for a, b in zip(pr, pr[1:]))


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1))
def test_metrics_in_unit_interval(seed):
    cands, gt = _random_instance(np.random.default_rng(seed))
    rep = evaluate(cands, gt)
    for v in (rep.micro_ap, rep.mean_ap, rep.recall_at_1, rep.mrr):
        assert 0.0 <= v <= 1.0


# -- per-query metrics -----------------------------------------------------------


def test_mean_ap_examples():
    gt = GroundTruth.from_pairs([("q", "a")])
    assert mean_ap([C("q", "a", 0.9), C("q", "b", 0.1)], gt) == 1.0
    assert mean_ap([C("q", "b", 0.9), C("q", "a", 0.1)], gt) == 0.5


def test_mean_ap_equals_micro_ap_for_one_query():
    rng = np.random.default_rng(6)
    for _ in range(50):
        refs = [f"r{j}" for j in range(8)]
        cands = [C("q", r, float(rng.random())) for r in refs]
        gt = GroundTruth.from_pairs([("q", r) for r in refs if rng.random() < 0.4] or [("q", "r0")])
        assert mean_ap(cands, gt) == pytest.approx(micro_ap(cands, gt)[0], abs=1e-15)


def test_recall_and_mrr():
    gt = GroundTruth.from_pairs([("q", "d"), ("p", "x")])
    cands = [C("q", r, s) for r, s in zip("abcd", [0.9, 0.8, 0.7, 0.6])] + [C("p", "x", 0.5)]
    assert mrr(cands, gt) == (0.25 + 1.0) / 2
    assert recall_at_1(cands, gt) == 0.5
    # a query without ground truth does not enter either denominator
    more = cands + [C("z", "x", 0.99)]
    assert mrr(more, gt) == mrr(cands, gt) and recall_at_1(more, gt) == 0.5
    one = GroundTruth.from_pairs([("q", "d")])
    assert mrr(cands, one) == 0.25 and recall_at_1(cands, one) == 0.0


def test_eval_report_json_keys():
    gt = GroundTruth.from_pairs([("q1", "r1"), ("q2", "r2")])
    rep = evaluate([C("q1", "r1", 0.9), C("q1", "r3", 0.8), C("q2", "r2", 0.7)], gt)
    d = json.loads(rep.to_json())
    assert {"micro_ap", "mean_ap", "recall_at_1", "mrr"} <= set(d)
    assert d["micro_ap"] == pytest.approx(0.8333333333)


# -- histograms ------------------------------------------------------------------


def test_histogram_identical_pairs_in_first_bin():
    x = random_unit(np.random.default_rng(7), 10, 6)
    q = DescriptorSet.from_array(x, prefix="q")
    r = DescriptorSet.from_array(x, prefix="r")
    h = distance_histograms(q, r, GroundTruth.from_pairs((f"q{i}", f"r{i}") for i in range(10)))
    assert h.positive[0] == 10 and h.positive.sum() == 10


def test_histogram_orthogonal_single_bin():
    e = np.eye(6)
    q = DescriptorSet.from_array(e[:3], prefix="q")
    r = DescriptorSet.from_array(e[3:], prefix="r")
    h = distance_histograms(q, r, GroundTruth.from_pairs((f"q{i}", f"r{i}") for i in range(3)), bins=40)
    assert np.count_nonzero(h.positive) == 1 and np.count_nonzero(h.negative) == 1
    assert h.edges[np.flatnonzero(h.positive)[0]] <= 2.0 < h.edges[np.flatnonzero(h.positive)[0] + 1]
    assert h.edges[0] == 0.0 and h.edges[-1] == 4.0


@settings(max_examples=30)
@given(st.integers(0, 2**32 - 1))
def test_histogram_counts(seed):
    rng = np.random.default_rng(seed)
    q = DescriptorSet.from_array(random_unit(rng, 7, 5), prefix="q")
    r = DescriptorSet.from_array(random_unit(rng, 9, 5), prefix="r")
    pairs = {(f"q{rng.integers(7)}", f"r{rng.integers(9)}") for _ in range(6)}
    h = distance_histograms(q, r, GroundTruth.from_pairs(pairs), bins=10)
    assert h.positive.sum() == len(pairs)
    assert h.negative.sum() == 7
    assert h.gap() == pytest.approx(np.percentile(h.negative_sq_dists, 5) - np.percentile(h.positive_sq_dists, 95))
