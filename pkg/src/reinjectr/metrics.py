"""Representation-drift diagnostics.

CKNNA measures how many of each token's k nearest neighbours (under a
centered cosine kernel) survive between two feature spaces. The drift report
compares every layer of a :class:`FeatureStack` against layer 0 and places
all layers in one shared PCA basis.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List

import numpy as np

from ._parallel import parallel_map
from .errors import InvalidInput
from .linalg import PcaModel, as_matrix, pca_fit, pca_project
from .stack import FeatureStack


@dataclass(frozen=True)
class CknnaConfig:
    k: int = 10
    eps: float = 1e-8
    # centered-kernel values are compared on this grid, so entries that are
    # equal up to rounding noise (duplicate tokens) count as ties
    tie_tol: float = 1e-9

    def __post_init__(self):
        if self.k < 1:
            raise InvalidInput(f"k must be >= 1, got {self.k}")
        if not self.eps > 0:
            raise InvalidInput(f"eps must be > 0, got {self.eps}")
        if self.tie_tol < 0:
            raise InvalidInput(f"tie_tol must be >= 0, got {self.tie_tol}")


def cosine_kernel(a, eps: float = 1e-8) -> np.ndarray:
    """``K[i, j] = <a_i, a_j> / (|a_i| |a_j| + eps)``."""
    a = as_matrix(a, "a")
    if a.shape[0] < 2:
        raise InvalidInput("cosine kernel needs at least two rows")
    norms = np.linalg.norm(a, axis=1)
    return (a @ a.T) / (np.outer(norms, norms) + eps)


def center_kernel(k) -> np.ndarray:
    """Double centering ``H K H`` with ``H = I - 11^T / N``."""
    k = as_matrix(k, "k")
    if k.shape[0] != k.shape[1]:
        raise InvalidInput(f"kernel must be square, got {k.shape}")
    row = k.mean(axis=1, keepdims=True)
    col = k.mean(axis=0, keepdims=True)
    return k - row - col + k.mean()


def knn_sets(k_centered, k: int, tie_tol: float = 0.0) -> List[np.ndarray]:
    """Indices of the ``k`` largest off-diagonal entries of each row.

    Ties go to the smaller index. With ``tie_tol > 0`` values are first
    rounded to multiples of ``tie_tol``. Each returned array is sorted by
    decreasing similarity.
    """
    kc = as_matrix(k_centered, "k_centered")
    n = kc.shape[0]
    if kc.shape[1] != n:
        raise InvalidInput(f"kernel must be square, got {kc.shape}")
    if not 1 <= k <= n - 1:
        raise InvalidInput(f"k={k} outside [1, {n - 1}]")
    work = -np.round(kc / tie_tol) if tie_tol > 0 else -kc
    np.fill_diagonal(work, np.inf)
    # stable sort keeps ascending index order among equal keys
    order = np.argsort(work, axis=1, kind="stable")[:, :k]
    return [order[i] for i in range(n)]


def _neighbour_masks(x, cfg: CknnaConfig) -> np.ndarray:
    sets = knn_sets(center_kernel(cosine_kernel(x, cfg.eps)), cfg.k, cfg.tie_tol)
    n = len(sets)
    mask = np.zeros((n, n), dtype=bool)
    mask[np.repeat(np.arange(n), cfg.k), np.concatenate(sets)] = True
    return mask


def cknna(a, b, cfg: CknnaConfig = CknnaConfig()) -> float:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[0] != b.shape[0]:
        raise InvalidInput(f"row counts differ: {a.shape[0]} vs {b.shape[0]}")
    if a.shape[0] < cfg.k + 1:
        raise InvalidInput(f"need at least k+1={cfg.k + 1} tokens, got {a.shape[0]}")
    # integer total then one division: the result is the correctly rounded rational
    overlap = int((_neighbour_masks(a, cfg) & _neighbour_masks(b, cfg)).sum())
    return overlap / (cfg.k * a.shape[0])


@dataclass(frozen=True)
class DriftReport:
    layer_ids: tuple
    scores: np.ndarray
    coords: tuple
    centroids: np.ndarray
    pca: PcaModel
    k: int

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "layers": list(self.layer_ids),
            "cknna": [float(s) for s in self.scores],
            "centroids": [[float(v) for v in c] for c in self.centroids],
            "explained_variance": [float(v) for v in self.pca.explained_variance],
        }


def drift_report(stack: FeatureStack, cfg: CknnaConfig = CknnaConfig(), q: int = 2) -> DriftReport:
    """CKNNA of every layer against layer 0, plus shared-PCA coordinates."""
    if stack is None or stack.n_layers == 0:
        raise InvalidInput("empty stack")
    if stack.n_layers < 2:
        raise InvalidInput("drift report needs at least two layers")
    ref = _neighbour_masks(stack[0], cfg)

    def score(layer):
        if layer == 0:
            return 1.0
        return float(np.mean((ref & _neighbour_masks(stack[layer], cfg)).sum(axis=1) / cfg.k))

    ids = tuple(range(stack.n_layers))
    scores = np.array(parallel_map(score, ids))
    model = pca_fit(np.concatenate(stack.layers, axis=0), q)
    coords = tuple(pca_project(model, t) for t in stack.layers)
    centroids = np.array([c.mean(axis=0) for c in coords])
    return DriftReport(layer_ids=ids, scores=scores, coords=coords, centroids=centroids, pca=model, k=cfg.k)
