"""Exhaustive k-NN search and retrieval metrics (uAP, mAP, recall@1, MRR)."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .descriptor_core import DescriptorSet

INNER_PRODUCT = "ip"
L2 = "l2"
HIST_RANGE = (0.0, 4.0)


class MatchCandidate(NamedTuple):
    query_id: str
    ref_id: str
    score: float


@dataclass(frozen=True)
class GroundTruth:
    pairs: frozenset

    def __post_init__(self):
        object.__setattr__(self, "pairs", frozenset((str(q), str(r)) for q, r in self.pairs))

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, str]]) -> "GroundTruth":
        pairs = list(pairs)
        if len(set(pairs)) != len(pairs):
            raise ValueError("duplicate ground-truth pair")
        return cls(frozenset(pairs))

    @property
    def total_positives(self) -> int:
        return len(self.pairs)

    def positives_per_query(self) -> dict[str, int]:
        counts: dict[str, int] = defaultdict(int)
        for q, _ in self.pairs:
            counts[q] += 1
        return dict(counts)

    def __contains__(self, pair) -> bool:
        return pair in self.pairs


def knn_search(
    queries: DescriptorSet,
    refs: DescriptorSet,
    k: int,
    metric: str = INNER_PRODUCT,
    block_size: int = 65536,
) -> list[MatchCandidate]:
    """Exact top-k references per query via blocked matrix products.

    For L2 the score is the negated squared distance, so higher is always more
    similar. Ties are broken by reference id.
    """
    if queries.dim != refs.dim:
        raise ValueError(f"dimension mismatch: queries {queries.dim}, refs {refs.dim}")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if metric not in (INNER_PRODUCT, L2):
        raise ValueError(f"unknown metric {metric!r}")
    nq, nr = queries.count, refs.count
    if nq == 0 or nr == 0:
        return []
    k = min(k, nr)
    dtype = np.result_type(queries.data.dtype, refs.data.dtype)
    Q = queries.data.astype(dtype, copy=False)
    # integer rank of each ref id in sort order, for tie-breaking
    id_rank = np.empty(nr, dtype=np.int64)
    id_rank[np.argsort(np.array(refs.ids, dtype=object), kind="stable")] = np.arange(nr)
    q_sq = np.sum(Q.astype(np.float64) ** 2, axis=1) if metric == L2 else None

    best_s = np.full((nq, 0), -np.inf)
    best_i = np.zeros((nq, 0), dtype=np.int64)
    for start in range(0, nr, block_size):
        R = refs.data[start : start + block_size].astype(dtype, copy=False)
        S = (Q @ R.T).astype(np.float64)
        if metric == L2:
            r_sq = np.sum(R.astype(np.float64) ** 2, axis=1)
            S = 2.0 * S - q_sq[:, None] - r_sq[None, :]
        idx = np.broadcast_to(np.arange(start, start + R.shape[0]), S.shape)
        best_s = np.concatenate([best_s, S], axis=1)
        best_i = np.concatenate([best_i, idx], axis=1)
        best_s, best_i = _top_k(best_s, best_i, id_rank, k)

    out = []
    for qi in range(nq):
        qid = queries.ids[qi]
        for s, ri in zip(best_s[qi], best_i[qi]):
            out.append(MatchCandidate(qid, refs.ids[ri], float(s)))
    return out


def _top_k(S: np.ndarray, I: np.ndarray, id_rank: np.ndarray, k: int):
    """Row-wise top-k of S with (score desc, id rank asc) ordering, exact at the boundary."""
    n, m = S.shape
    if m > k:
        part = np.argpartition(-S, k - 1, axis=1)[:, :k]
        kth = np.take_along_axis(S, part, axis=1).min(axis=1, keepdims=True)
        # anything tied with the k-th score must stay a candidate
        keep = S >= kth
        width = int(keep.sum(axis=1).max())
        order = np.argsort(~keep, axis=1, kind="stable")[:, :width]
        S = np.take_along_axis(S, order, axis=1)
        I = np.take_along_axis(I, order, axis=1)
        valid = np.take_along_axis(keep, order, axis=1)
        S = np.where(valid, S, -np.inf)
    order = _rowwise_lexsort(S, id_rank[I])
    S = np.take_along_axis(S, order, axis=1)[:, :k]
    I = np.take_along_axis(I, order, axis=1)[:, :k]
    return S, I


def _rowwise_lexsort(S: np.ndarray, ranks: np.ndarray) -> np.ndarray:
    by_rank = np.argsort(ranks, axis=1, kind="stable")
    S2 = np.take_along_axis(S, by_rank, axis=1)
    by_score = np.argsort(-S2, axis=1, kind="stable")
    return np.take_along_axis(by_rank, by_score, axis=1)


def _check_unique(candidates: Sequence[MatchCandidate]):
    seen = set()
    for c in candidates:
        key = (c.query_id, c.ref_id)
        if key in seen:
            raise ValueError(f"duplicate candidate for pair {key}")
        seen.add(key)


def _score_groups(scores: np.ndarray):
    """Yield index arrays of equal-score blocks in descending score order."""
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    breaks = np.flatnonzero(np.diff(s) != 0) + 1
    return np.split(order, breaks)


def micro_ap(candidates: Sequence[MatchCandidate], gt: GroundTruth) -> tuple[float, list[tuple[float, float]]]:
    """Average precision of one global ranking of all candidates.

    Equal scores are processed as one block. Returns (uAP, PR points).
    """
    _check_unique(candidates)
    if gt.total_positives == 0 or not candidates:
        return 0.0, []
    scores = np.array([c.score for c in candidates], dtype=np.float64)
    is_tp = np.array([(c.query_id, c.ref_id) in gt.pairs for c in candidates])
    ap = 0.0
    tp = 0
    seen = 0
    pr = []
    for block in _score_groups(scores):
        btp = int(is_tp[block].sum())
        tp += btp
        seen += block.size
        precision = tp / seen
        ap += btp * precision
        pr.append((tp / gt.total_positives, precision))
    return ap / gt.total_positives, pr


def _per_query(candidates: Sequence[MatchCandidate]) -> dict[str, list[MatchCandidate]]:
    by_q: dict[str, list[MatchCandidate]] = defaultdict(list)
    for c in candidates:
        by_q[c.query_id].append(c)
    for q in by_q:
        by_q[q].sort(key=lambda c: (-c.score, c.ref_id))
    return by_q


def mean_ap(candidates: Sequence[MatchCandidate], gt: GroundTruth) -> float:
    """Mean over queries with at least one true pair of per-query AP."""
    _check_unique(candidates)
    npos = gt.positives_per_query()
    if not npos:
        return 0.0
    by_q = _per_query(candidates)
    total = 0.0
    for q, n in npos.items():
        cands = by_q.get(q, [])
        if not cands:
            continue
        scores = np.array([c.score for c in cands])
        is_tp = np.array([(q, c.ref_id) in gt.pairs for c in cands])
        tp = seen = 0
        ap = 0.0
        for block in _score_groups(scores):
            btp = int(is_tp[block].sum())
            tp += btp
            seen += block.size
            ap += btp * tp / seen
        total += ap / n
    return total / len(npos)


def recall_at_1(candidates: Sequence[MatchCandidate], gt: GroundTruth) -> float:
    npos = gt.positives_per_query()
    if not npos:
        return 0.0
    by_q = _per_query(candidates)
    hits = sum(1 for q in npos if by_q.get(q) and (q, by_q[q][0].ref_id) in gt.pairs)
    return hits / len(npos)


def mrr(candidates: Sequence[MatchCandidate], gt: GroundTruth) -> float:
    npos = gt.positives_per_query()
    if not npos:
        return 0.0
    by_q = _per_query(candidates)
    total = 0.0
    for q in npos:
        for rank, c in enumerate(by_q.get(q, []), start=1):
            if (q, c.ref_id) in gt.pairs:
                total += 1.0 / rank
                break
    return total / len(npos)


@dataclass(frozen=True, eq=False)
class HistogramPair:
    edges: np.ndarray
    positive: np.ndarray
    negative: np.ndarray
    positive_sq_dists: np.ndarray
    negative_sq_dists: np.ndarray

    def gap(self, pos_q: float = 95, neg_q: float = 5) -> float:
        """Negative low percentile minus positive high percentile (larger is better separated)."""
        if not self.positive_sq_dists.size or not self.negative_sq_dists.size:
            return float("nan")
        return float(np.percentile(self.negative_sq_dists, neg_q) - np.percentile(self.positive_sq_dists, pos_q))

    def summary(self) -> dict:
        def pct(x, q):
            return float(np.percentile(x, q)) if x.size else None

        return {
            "n_positive": int(self.positive.sum()),
            "n_negative": int(self.negative.sum()),
            "positive_p95": pct(self.positive_sq_dists, 95),
            "negative_p5": pct(self.negative_sq_dists, 5),
            "gap": self.gap() if self.positive_sq_dists.size and self.negative_sq_dists.size else None,
        }


def distance_histograms(queries: DescriptorSet, refs: DescriptorSet, gt: GroundTruth, bins: int = 40) -> HistogramPair:
    """Squared-distance histograms of true pairs and of each query's nearest non-matching reference."""
    if queries.dim != refs.dim:
        raise ValueError(f"dimension mismatch: queries {queries.dim}, refs {refs.dim}")
    Q = queries.data.astype(np.float64)
    R = refs.data.astype(np.float64)
    qi = {q: i for i, q in enumerate(queries.ids)}
    ri = {r: i for i, r in enumerate(refs.ids)}
    pos = []
    for q, r in sorted(gt.pairs):
        if q in qi and r in ri:
            diff = Q[qi[q]] - R[ri[r]]
            pos.append(float(diff @ diff))
    neg = []
    by_q = _refs_by_query(gt)
    q_sq = np.sum(Q * Q, axis=1)
    r_sq = np.sum(R * R, axis=1)
    block = 1024
    for start in range(0, queries.count if refs.count else 0, block):
        D = q_sq[start : start + block, None] - 2 * Q[start : start + block] @ R.T + r_sq[None, :]
        D = np.maximum(D, 0.0)
        for row, qid in enumerate(queries.ids[start : start + block]):
            d = D[row]
            matched = [ri[r] for r in by_q.get(qid, ()) if r in ri]
            d[matched] = np.inf
            if np.isfinite(d).any():
                neg.append(float(d.min()))
    edges = np.linspace(*HIST_RANGE, bins + 1)
    pos_a = np.array(pos)
    neg_a = np.array(neg)
    hp, _ = np.histogram(np.clip(pos_a, *HIST_RANGE), edges)
    hn, _ = np.histogram(np.clip(neg_a, *HIST_RANGE), edges)
    return HistogramPair(edges, hp, hn, pos_a, neg_a)


def _refs_by_query(gt: GroundTruth) -> dict[str, list[str]]:
    by_q: dict[str, list[str]] = defaultdict(list)
    for q, r in gt.pairs:
        by_q[q].append(r)
    return by_q


@dataclass(eq=False)
class EvalReport:
    micro_ap: float
    mean_ap: float
    recall_at_1: float
    mrr: float
    pr_points: list = field(default_factory=list)
    k: int | None = None
    histograms: HistogramPair | None = None

    def to_dict(self) -> dict:
        d = {
            "micro_ap": self.micro_ap,
            "mean_ap": self.mean_ap,
            "recall_at_1": self.recall_at_1,
            "mrr": self.mrr,
            "k": self.k,
        }
        if self.histograms is not None:
            d["histograms"] = self.histograms.summary()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def evaluate(candidates: Sequence[MatchCandidate], gt: GroundTruth, k: int | None = None) -> EvalReport:
    uap, pr = micro_ap(candidates, gt)
    return EvalReport(uap, mean_ap(candidates, gt), recall_at_1(candidates, gt), mrr(candidates, gt), pr, k)
