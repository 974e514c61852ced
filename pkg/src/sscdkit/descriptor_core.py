"""Descriptor algebra: normalization, similarity, GeM pooling, whitening,
spectrum diagnostics and per-location match heatmaps."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

# Sentinel for max pooling in gem_pool (the p -> inf limit).
MAX = math.inf

NORM_TOL = 1e-6


def _as_matrix(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class DescriptorSet:
    """Id-labeled matrix of descriptors, one row per id.

    Data is stored as float64 unless float32 is passed in explicitly; float32
    storage exists so that million-row reference sets fit in memory.
    """

    ids: tuple[str, ...]
    data: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        ids = tuple(str(i) for i in self.ids)
        data = _as_matrix(self.data)
        if data.shape[0] == 0 and len(ids) == 0:
            data = data.reshape(0, data.shape[-1] if data.ndim == 2 else 0)
        if len(ids) != data.shape[0]:
            raise ValueError(f"{len(ids)} ids for {data.shape[0]} rows")
        if len(set(ids)) != len(ids):
            raise ValueError("descriptor ids must be unique")
        if not np.all(np.isfinite(data)):
            raise ValueError("descriptor data contains NaN or Inf")
        if self.normalized and len(ids):
            tol = 1e-5 if data.dtype == np.float32 else NORM_TOL
            norms = np.linalg.norm(data, axis=1)
            bad = np.flatnonzero(np.abs(norms - 1.0) > tol)
            if bad.size:
                raise ValueError(
                    f"row {ids[bad[0]]!r} has norm {norms[bad[0]]:.8g} but set is flagged normalized"
                )
        data = data.copy() if data.flags.writeable else data
        data.setflags(write=False)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "data", data)

    @classmethod
    def from_array(cls, data, ids: Sequence[str] | None = None, prefix: str = "", normalized: bool = False):
        data = _as_matrix(data)
        if ids is None:
            ids = [f"{prefix}{i}" for i in range(data.shape[0])]
        return cls(tuple(ids), data, normalized)

    @property
    def count(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def __len__(self):
        return self.count

    def index_of(self, id_: str) -> int:
        return self._index[id_]

    @property
    def _index(self) -> dict[str, int]:
        cache = self.__dict__.get("_index_cache")
        if cache is None:
            cache = {k: i for i, k in enumerate(self.ids)}
            object.__setattr__(self, "_index_cache", cache)
        return cache

    def subset(self, ids: Sequence[str]) -> "DescriptorSet":
        rows = [self._index[i] for i in ids]
        return DescriptorSet(tuple(ids), self.data[rows], self.normalized)

    def normalize(self) -> "DescriptorSet":
        return DescriptorSet(self.ids, l2_normalize_rows(self.data), True)


def l2_normalize(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if not n > 0:
        raise ValueError("cannot L2-normalize a zero vector")
    return v / n


def l2_normalize_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise L2 normalization; raises on any zero row."""
    x = np.asarray(x)
    if x.dtype not in (np.float32, np.float64):
        x = x.astype(np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    zero = np.flatnonzero(norms[:, 0] == 0)
    if zero.size:
        raise ValueError(f"cannot L2-normalize a zero vector (row {zero[0]})")
    return x / norms


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    # elementwise product then sum keeps the result exactly symmetric
    return float(np.clip(np.sum(a * b), -1.0, 1.0))


def gem_pool(grid, p: float = 3.0) -> np.ndarray:
    """Generalized-mean pooling of an H x W x C activation grid.

    ``p=1`` is average pooling and ``p=MAX`` is max pooling.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 3:
        raise ValueError(f"activation grid must be H x W x C, got shape {grid.shape}")
    if grid.shape[0] == 0 or grid.shape[1] == 0 or grid.shape[2] == 0:
        raise ValueError("empty activation grid")
    if np.any(grid < 0):
        raise ValueError("activation grid must be non-negative")
    if np.isnan(p) or p < 1:
        raise ValueError(f"GeM exponent must be >= 1, got {p}")
    flat = grid.reshape(-1, grid.shape[2])
    if p == MAX:
        return flat.max(axis=0)
    if p == 1:
        return flat.mean(axis=0)
    return np.mean(flat**p, axis=0) ** (1.0 / p)


@dataclass(frozen=True, eq=False)
class WhiteningTransform:
    mean: np.ndarray
    projection: np.ndarray
    eigenvalues: np.ndarray
    epsilon: float = 1e-6

    @property
    def in_dim(self) -> int:
        return self.projection.shape[0]

    @property
    def out_dim(self) -> int:
        return self.projection.shape[1]

    @classmethod
    def identity(cls, d: int) -> "WhiteningTransform":
        return cls(np.zeros(d), np.eye(d), np.ones(d), 0.0)


def numerical_rank(eigenvalues: np.ndarray, n_samples: int) -> int:
    ev = np.asarray(eigenvalues)
    top = ev.max(initial=0.0)
    if top <= 0:
        return 0
    tol = top * max(n_samples, ev.size) * np.finfo(np.float64).eps
    return int(np.sum(ev > tol))


def fit_whitening(background: DescriptorSet | np.ndarray, out_dim: int | None = None, epsilon: float = 1e-6) -> WhiteningTransform:
    """PCA whitening learned on a background set.

    Eigenvalues are regularized by ``epsilon`` in the inverse square root.
    Raises if ``out_dim`` exceeds the numerical rank of the covariance.
    """
    x = background.data if isinstance(background, DescriptorSet) else _as_matrix(background)
    n, d = x.shape
    out_dim = d if out_dim is None else int(out_dim)
    if out_dim < 1 or out_dim > d:
        raise ValueError(f"out_dim must be in [1, {d}], got {out_dim}")
    if n < out_dim + 1:
        raise ValueError(f"need at least out_dim + 1 = {out_dim + 1} background rows, got {n}")
    mean = x.mean(axis=0, dtype=np.float64)
    xc = x.astype(np.float64, copy=False) - mean
    cov = (xc.T @ xc) / (n - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]
    rank = numerical_rank(evals, n)
    if out_dim > rank:
        raise ValueError(
            f"degenerate covariance: numerical rank {rank} is below out_dim {out_dim}"
        )
    # deterministic eigenvector signs: largest-magnitude entry positive
    flip = np.sign(evecs[np.argmax(np.abs(evecs), axis=0), np.arange(d)])
    evecs = evecs * np.where(flip == 0, 1.0, flip)
    proj = evecs[:, :out_dim] / np.sqrt(evals[:out_dim] + epsilon)
    return WhiteningTransform(mean, proj, evals, epsilon)


def apply_whitening(
    t: WhiteningTransform,
    x: DescriptorSet,
    renormalize: bool = True,
    normalize_input: bool = False,
) -> DescriptorSet:
    """Map rows to ``(row - mean) @ projection``.

    ``normalize_input=True`` together with ``renormalize=True`` is the
    baseline protocol (L2 normalize before and after whitening).
    """
    if x.dim != t.in_dim:
        raise ValueError(f"dimension mismatch: transform expects {t.in_dim}, got {x.dim}")
    data = x.data.astype(np.float64, copy=False)
    if normalize_input:
        data = l2_normalize_rows(data)
    out = (data - t.mean) @ t.projection
    if renormalize:
        out = l2_normalize_rows(out)
    return DescriptorSet(x.ids, out, renormalize)


def whitening_dims(d: int, min_dim: int = 1) -> list[int]:
    """Candidate dims {d, 3d/4, d/2, d/4, d/8, ...} for the baseline sweep."""
    dims = [d, (3 * d) // 4]
    k = d // 2
    while k >= min_dim:
        dims.append(k)
        k //= 2
    return sorted({k for k in dims if k >= min_dim}, reverse=True)


@dataclass(frozen=True, eq=False)
class SpectrumReport:
    principal_values: np.ndarray
    effective_rank: float
    max_min_ratio: float

    def to_dict(self) -> dict:
        return {
            "principal_values": [float(v) for v in self.principal_values],
            "effective_rank": float(self.effective_rank),
            "max_min_ratio": float(self.max_min_ratio),
        }


def effective_rank(eigenvalues) -> float:
    """exp of the Shannon entropy (nats) of the normalized eigenvalue distribution."""
    ev = np.clip(np.asarray(eigenvalues, dtype=np.float64), 0.0, None)
    total = ev.sum()
    if total <= 0:
        return 1.0
    p = ev[ev > 0] / total
    return float(np.exp(-np.sum(p * np.log(p))))


def principal_spectrum(x: DescriptorSet | np.ndarray) -> SpectrumReport:
    data = x.data if isinstance(x, DescriptorSet) else _as_matrix(x)
    n = data.shape[0]
    if n < 2:
        raise ValueError(f"principal spectrum needs at least 2 rows, got {n}")
    xc = data.astype(np.float64, copy=False) - data.mean(axis=0, dtype=np.float64)
    sv = np.linalg.svd(xc, compute_uv=False) / np.sqrt(n - 1)
    pv = np.zeros(data.shape[1])
    pv[: sv.size] = sv
    eff = min(max(effective_rank(pv**2), 1.0), float(data.shape[1]))
    ratio = pv[0] / pv[-1] if pv[-1] > 0 else math.inf
    return SpectrumReport(pv, eff, float(ratio))


def location_descriptors(grid, projection, bias=None, whitening: WhiteningTransform | None = None) -> np.ndarray:
    """Per-location descriptors of an H x W x C grid with pooling removed.

    Each cell goes through the same projection (and optional whitening) and
    L2 normalization as a global descriptor. Returns H x W x d.
    """
    grid = np.asarray(grid, dtype=np.float64)
    h, w, c = grid.shape
    y = grid.reshape(-1, c) @ np.asarray(projection, dtype=np.float64)
    if bias is not None:
        y = y + bias
    y = l2_normalize_rows(y)
    if whitening is not None:
        y = l2_normalize_rows((y - whitening.mean) @ whitening.projection)
    return y.reshape(h, w, -1)


def match_heatmap(cells, global_descriptor) -> np.ndarray:
    """Cosine similarity of every grid cell descriptor (H x W x d) to one global descriptor."""
    cells = np.asarray(cells, dtype=np.float64)
    g = np.asarray(global_descriptor, dtype=np.float64)
    if cells.ndim != 3:
        raise ValueError(f"cell descriptors must be H x W x d, got shape {cells.shape}")
    if cells.shape[2] != g.shape[-1] or g.ndim != 1:
        raise ValueError(f"dimension mismatch: cells have {cells.shape[2]} dims, global has {g.shape}")
    return np.clip(cells @ g, -1.0, 1.0)
