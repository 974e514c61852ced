"""Background-set similarity normalization, integrated bias, and MIPS -> L2 reduction."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .descriptor_core import DescriptorSet
from .retrieval_eval import MatchCandidate, knn_search, micro_ap

QUERY = "query"
REFERENCE = "reference"


@dataclass(frozen=True)
class ScoreNormConfig:
    n: int = 1
    n_end: int = 3
    beta: float = 1.0

    def __post_init__(self):
        if not 1 <= self.n <= self.n_end:
            raise ValueError(f"need 1 <= n <= n_end, got n={self.n}, n_end={self.n_end}")
        if not self.beta >= 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")


def bias_from_similarities(sims: Sequence[float], cfg: ScoreNormConfig) -> float:
    """beta * mean of neighbour similarities ranked n..n_end (1-based, sorted descending)."""
    if len(sims) < cfg.n_end:
        raise ValueError(f"need {cfg.n_end} background neighbours, got {len(sims)}")
    window = np.asarray(sims[cfg.n - 1 : cfg.n_end], dtype=np.float64)
    return float(cfg.beta * window.sum() / (1 + cfg.n_end - cfg.n))


def compute_biases(queries: DescriptorSet, background: DescriptorSet, cfg: ScoreNormConfig) -> dict[str, float]:
    """Per-query bias from a k-NN search (k = n_end) against the background set.

    A background row whose id equals the query id is skipped.
    """
    if not background.normalized:
        raise ValueError("background set must be L2-normalized")
    shared = set(queries.ids) & set(background.ids)
    k = cfg.n_end + (1 if shared else 0)
    if background.count - (1 if shared else 0) < cfg.n_end:
        raise ValueError(f"background has {background.count} rows, need at least n_end={cfg.n_end}")
    neighbours = _neighbour_sims(queries, background, k)
    return {q: bias_from_similarities(neighbours[q][: cfg.n_end], cfg) for q in queries.ids}


def _neighbour_sims(queries: DescriptorSet, background: DescriptorSet, k: int) -> dict[str, list[float]]:
    sims: dict[str, list[float]] = {q: [] for q in queries.ids}
    for c in knn_search(queries, background, k):
        if c.ref_id != c.query_id:
            sims[c.query_id].append(c.score)
    return sims


def background_bias(q, background: DescriptorSet, cfg: ScoreNormConfig = ScoreNormConfig(), query_id: str | None = None) -> float:
    q = np.asarray(q, dtype=np.float64)
    qs = DescriptorSet(("__query__" if query_id is None else query_id,), q[None, :], False)
    return next(iter(compute_biases(qs, background, cfg).values()))


def normalized_similarity(s: float, bias: float) -> float:
    return s - bias


def normalize_candidates(candidates: Sequence[MatchCandidate], biases: dict[str, float]) -> list[MatchCandidate]:
    return [MatchCandidate(c.query_id, c.ref_id, normalized_similarity(c.score, biases[c.query_id])) for c in candidates]


@dataclass(frozen=True, eq=False)
class BiasedDescriptorSet:
    """Descriptors with one extra coordinate; rows are not unit norm."""

    base: DescriptorSet
    role: str

    def __post_init__(self):
        if self.role not in (QUERY, REFERENCE):
            raise ValueError(f"unknown role {self.role!r}")
        if self.role == REFERENCE and not np.all(self.base.data[:, -1] == 1.0):
            raise ValueError("reference rows must end with exactly 1")

    @property
    def ids(self):
        return self.base.ids

    @property
    def data(self):
        return self.base.data


def integrate_bias(queries: DescriptorSet, biases) -> BiasedDescriptorSet:
    """[z_q, -bias(q)] per query. ``biases`` is a sequence aligned with rows or a dict by id."""
    if isinstance(biases, dict):
        missing = [q for q in queries.ids if q not in biases]
        if missing:
            raise ValueError(f"no bias for query {missing[0]!r}")
        b = np.array([biases[q] for q in queries.ids], dtype=np.float64)
    else:
        b = np.asarray(biases, dtype=np.float64)
        if b.shape != (queries.count,):
            raise ValueError(f"{b.size} biases for {queries.count} queries")
    data = np.hstack([queries.data.astype(np.float64), -b[:, None]])
    return BiasedDescriptorSet(DescriptorSet(queries.ids, data, False), QUERY)


def extend_references(refs: DescriptorSet) -> BiasedDescriptorSet:
    data = np.hstack([refs.data.astype(np.float64), np.ones((refs.count, 1))])
    return BiasedDescriptorSet(DescriptorSet(refs.ids, data, False), REFERENCE)


@dataclass(frozen=True, eq=False)
class L2ReducedSet:
    """References with an extra sqrt(M^2 - ||r||^2) coordinate, so every row has norm M."""

    base: DescriptorSet
    max_norm: float

    def augment_queries(self, queries: DescriptorSet | BiasedDescriptorSet) -> DescriptorSet:
        base = queries.base if isinstance(queries, BiasedDescriptorSet) else queries
        if base.dim + 1 != self.base.dim:
            raise ValueError(f"query dim {base.dim} does not match reduced reference dim {self.base.dim - 1}")
        data = np.hstack([base.data.astype(np.float64), np.zeros((base.count, 1))])
        return DescriptorSet(base.ids, data, False)


def mips_to_l2(refs: DescriptorSet | BiasedDescriptorSet) -> L2ReducedSet:
    base = refs.base if isinstance(refs, BiasedDescriptorSet) else refs
    x = base.data.astype(np.float64)
    sq = np.sum(x * x, axis=1)
    M2 = sq.max(initial=0.0)
    extra = np.sqrt(np.maximum(M2 - sq, 0.0))
    return L2ReducedSet(DescriptorSet(base.ids, np.hstack([x, extra[:, None]]), False), float(np.sqrt(M2)))


def ranking_preserved(before: Sequence[MatchCandidate], after: Sequence[MatchCandidate]) -> bool:
    """True if each query's candidate order is identical before and after rescoring."""

    def order(cands):
        by_q: dict[str, list] = {}
        for c in cands:
            by_q.setdefault(c.query_id, []).append(c)
        return {q: [c.ref_id for c in sorted(v, key=lambda c: (-c.score, c.ref_id))] for q, v in by_q.items()}

    return order(before) == order(after)


def sweep_grid(max_n: int = 5, betas: Sequence[float] = (0.5, 0.75, 1.0, 1.25, 1.5)) -> list[ScoreNormConfig]:
    """All (n, n_end, beta) with 1 <= n <= n_end <= max_n."""
    return [
        ScoreNormConfig(n, n_end, beta)
        for n, n_end in itertools.combinations_with_replacement(range(1, max_n + 1), 2)
        for beta in betas
    ]


def score_norm_sweep(
    queries: DescriptorSet,
    background: DescriptorSet,
    candidates: Sequence[MatchCandidate],
    gt,
    configs: Sequence[ScoreNormConfig] | None = None,
) -> list[dict]:
    """uAP per normalization setting, with a per-query ranking check for each cell."""
    configs = list(configs) if configs is not None else sweep_grid()
    k = max(c.n_end for c in configs) + 1
    neighbours = _neighbour_sims(queries, background, k)
    rows = []
    for cfg in configs:
        biases = {q: bias_from_similarities(neighbours[q][: cfg.n_end], cfg) for q in queries.ids}
        rescored = normalize_candidates(candidates, biases)
        rows.append(
            {
                "n": cfg.n,
                "n_end": cfg.n_end,
                "beta": cfg.beta,
                "micro_ap": micro_ap(rescored, gt)[0],
                "ranking_preserved": ranking_preserved(candidates, rescored),
            }
        )
    return rows
