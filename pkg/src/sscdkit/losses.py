"""Training objectives with analytic gradients.

All gradients are taken with respect to the L2-normalized descriptor batch
``Z`` (rows treated as free variables). Use :func:`project_gradient_to_sphere`
to push them through a normalization layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

NORM_TOL = 1e-6
SINGULAR_DIST = 1e-12


@dataclass(frozen=True)
class MixInfo:
    sources: tuple[int, ...]
    gamma: float
    mode: str


@dataclass(frozen=True)
class BatchStructure:
    """Positive-match sets of a 2N-view batch.

    ``match_sets[i]`` is P_i (never contains i); the self-inclusive set is
    ``self_set(i)``.
    """

    match_sets: tuple[frozenset, ...]
    mix_weights: tuple[MixInfo | None, ...] | None = None

    def __post_init__(self):
        sets = tuple(frozenset(int(j) for j in s) for s in self.match_sets)
        n = len(sets)
        for i, s in enumerate(sets):
            if i in s:
                raise ValueError(f"view {i} lists itself as a positive")
            for j in s:
                if not 0 <= j < n:
                    raise ValueError(f"view {i} has out-of-range match {j}")
                if i not in sets[j]:
                    raise ValueError(f"asymmetric matching: {j} in P_{i} but {i} not in P_{j}")
        object.__setattr__(self, "match_sets", sets)

    @property
    def size(self) -> int:
        return len(self.match_sets)

    def self_set(self, i: int) -> frozenset:
        return self.match_sets[i] | {i}

    @property
    def single_positive(self) -> bool:
        return all(len(s) == 1 for s in self.match_sets)

    def match_mask(self) -> np.ndarray:
        m = np.zeros((self.size, self.size), dtype=bool)
        for i, s in enumerate(self.match_sets):
            m[i, list(s)] = True
        return m

    @classmethod
    def repeated(cls, n: int) -> "BatchStructure":
        """Plain repeated augmentation: view i matches view i + n."""
        sets = [frozenset({i + n}) for i in range(n)] + [frozenset({i}) for i in range(n)]
        return cls(tuple(sets))

    @classmethod
    def from_view_sources(cls, view_sources: Sequence[Sequence[int]], mix_weights=None) -> "BatchStructure":
        """Views match when they share any source."""
        srcs = [frozenset(s) for s in view_sources]
        sets = []
        for i, si in enumerate(srcs):
            sets.append(frozenset(j for j, sj in enumerate(srcs) if j != i and si & sj))
        return cls(tuple(sets), None if mix_weights is None else tuple(mix_weights))


@dataclass(frozen=True, eq=False)
class LossResult:
    value: float
    grad: np.ndarray
    parts: dict = field(default_factory=dict)


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.05
    lam: float = 30.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if not self.lam >= 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")


def _check_inputs(Z, batch: BatchStructure, check_normalized: bool) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[0] != batch.size:
        raise ValueError(f"descriptor batch shape {Z.shape} does not match batch size {batch.size}")
    if not np.all(np.isfinite(Z)):
        raise ValueError("descriptor batch contains NaN or Inf")
    if check_normalized:
        norms = np.linalg.norm(Z, axis=1)
        bad = np.flatnonzero(np.abs(norms - 1) > NORM_TOL)
        if bad.size:
            raise ValueError(f"row {bad[0]} is not L2-normalized (norm {norms[bad[0]]:.8g})")
    return Z


def _check_tau(tau):
    if not tau > 0:
        raise ValueError(f"tau must be > 0, got {tau}")


def infonce(Z, batch: BatchStructure, tau: float = 0.05, check_normalized: bool = True) -> LossResult:
    """Mean over positive pairs of -log softmax_{k != i}(s_ik) at the positive."""
    _check_tau(tau)
    Z = _check_inputs(Z, batch, check_normalized)
    if not batch.single_positive:
        raise ValueError("infonce needs exactly one positive per view; use infonce_mix")
    n = batch.size
    pos = np.array([next(iter(s)) for s in batch.match_sets])
    S = (Z @ Z.T) / tau
    np.fill_diagonal(S, -np.inf)
    row_max = S.max(axis=1, keepdims=True)
    E = np.exp(S - row_max)
    denom = E.sum(axis=1, keepdims=True)
    log_denom = np.log(denom[:, 0]) + row_max[:, 0]
    rows = np.arange(n)
    losses = log_denom - S[rows, pos]
    value = float(losses.mean())

    # dL/dS: (softmax - onehot) / |P|
    G = E / denom
    G[rows, pos] -= 1.0
    G /= n
    grad = (G + G.T) @ Z / tau
    return LossResult(value, grad)


def infonce_mix(Z, batch: BatchStructure, tau: float = 0.05, check_normalized: bool = True) -> LossResult:
    """Mix-aware InfoNCE: each positive competes only against non-matches.

    Per-view mean over P_i, then mean over the 2N views.
    """
    _check_tau(tau)
    Z = _check_inputs(Z, batch, check_normalized)
    n = batch.size
    S = (Z @ Z.T) / tau
    match = batch.match_mask()
    neg = ~match
    np.fill_diagonal(neg, False)
    G = np.zeros_like(S)
    total = 0.0
    for i in range(n):
        P = np.flatnonzero(match[i])
        if P.size == 0:
            raise ValueError(f"view {i} has no positive match")
        s_neg = S[i, neg[i]]
        s_pos = S[i, P]
        m = max(s_pos.max(), s_neg.max()) if s_neg.size else s_pos.max()
        e_neg = np.exp(s_neg - m)
        e_pos = np.exp(s_pos - m)
        neg_sum = e_neg.sum()
        D = e_pos + neg_sum  # one denominator per positive j
        total += float(np.sum(np.log(D) - (s_pos - m))) / P.size
        w = 1.0 / (n * P.size)
        # d l_ij / d s_ij = e_j/D_j - 1 ; d l_ij / d s_ik = e_k / D_j
        G[i, P] += w * (e_pos / D - 1.0)
        G[i, neg[i]] += w * e_neg * np.sum(1.0 / D)
    value = total / n
    grad = (G + G.T) @ Z / tau
    return LossResult(value, grad)


def _pairwise_dist(Z: np.ndarray) -> np.ndarray:
    sq = np.sum(Z * Z, axis=1)
    d2 = sq[:, None] - 2.0 * (Z @ Z.T) + sq[None, :]
    return np.sqrt(np.maximum(d2, 0.0))


def koleo_neighbors(Z, batch: BatchStructure) -> tuple[np.ndarray, np.ndarray]:
    """Index and distance of each view's nearest non-matching view (lowest index on ties)."""
    Z = np.asarray(Z, dtype=np.float64)
    D = _pairwise_dist(Z)
    blocked = batch.match_mask()
    np.fill_diagonal(blocked, True)
    if np.any(blocked.all(axis=1)):
        i = int(np.flatnonzero(blocked.all(axis=1))[0])
        raise ValueError(f"view {i} has no non-matching neighbor")
    D = np.where(blocked, np.inf, D)
    nn = np.argmin(D, axis=1)
    return nn, D[np.arange(len(nn)), nn]


def koleo(Z, batch: BatchStructure, check_normalized: bool = True) -> LossResult:
    """Kozachenko-Leonenko entropy loss over all 2N views.

    -mean_i log(min_{j not in P_i u {i}} ||z_i - z_j||)
    """
    Z = _check_inputs(Z, batch, check_normalized)
    n = batch.size
    nn, dist = koleo_neighbors(Z, batch)
    close = np.flatnonzero(dist < SINGULAR_DIST)
    if close.size:
        i = int(close[0])
        raise ValueError(f"entropy singularity: views {i} and {int(nn[i])} coincide")
    value = float(-np.mean(np.log(dist)))
    diff = Z - Z[nn]
    # exact norm of the difference for the gradient
    d2 = np.sum(diff * diff, axis=1, keepdims=True)
    push = diff / (n * d2)
    grad = -push
    np.add.at(grad, nn, push)
    return LossResult(value, grad)


def combined_loss(Z, batch: BatchStructure, config: LossConfig = LossConfig(), check_normalized: bool = True) -> LossResult:
    """Contrastive term + lambda * entropy term.

    Unmixed batches (one positive per view) take the plain InfoNCE path.
    """
    if batch.single_positive:
        con = infonce(Z, batch, config.tau, check_normalized)
    else:
        con = infonce_mix(Z, batch, config.tau, check_normalized)
    if config.lam == 0:
        return LossResult(con.value, con.grad, {"infonce": con.value, "koleo": float("nan")})
    ent = koleo(Z, batch, check_normalized)
    return LossResult(
        con.value + config.lam * ent.value,
        con.grad + config.lam * ent.grad,
        {"infonce": con.value, "koleo": ent.value},
    )


def project_gradient_to_sphere(z, g) -> np.ndarray:
    """Remove the radial component: (I - z z^T) g. Works row-wise on matrices."""
    z = np.asarray(z, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if z.ndim == 1:
        return g - z * np.dot(z, g)
    return g - z * np.sum(z * g, axis=1, keepdims=True)
