"""Dense matrix primitives: deterministic SVD, per-token statistics, PCA.

All functions take and return float64 ``numpy`` arrays and never mutate
their inputs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInput, NumericalFailure

DEFAULT_EPS = 1e-6


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce to a finite 2-D float64 array or raise InvalidInput."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise InvalidInput(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInput(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray
    sigma: np.ndarray
    vt: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.vt


def svd(a) -> SvdResult:
    """Thin SVD with a fixed sign convention.

    Each singular pair is flipped so that the largest-magnitude entry of the
    ``u`` column is positive (first such entry on exact ties).
    """
    a = as_matrix(a, "a")
    if min(a.shape) < 1:
        raise InvalidInput("svd needs at least one row and one column")
    try:
        u, s, vt = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(f"SVD did not converge: {exc}") from exc
    pivots = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[pivots, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return SvdResult(u=u * signs, sigma=s, vt=vt * signs[:, None])


@dataclass(frozen=True)
class TokenStats:
    """Per-row mean and ``sqrt(var + eps)`` of a tokens x features matrix."""

    mean: np.ndarray
    std: np.ndarray


def _check_eps(eps: float) -> None:
    if not eps > 0:
        raise InvalidInput(f"eps must be > 0, got {eps}")


def token_stats(t, eps: float = DEFAULT_EPS) -> TokenStats:
    _check_eps(eps)
    t = as_matrix(t, "t")
    if t.shape[1] < 1:
        raise InvalidInput("need at least one feature column")
    mean = t.mean(axis=1)
    var = ((t - mean[:, None]) ** 2).mean(axis=1)
    return TokenStats(mean=mean, std=np.sqrt(var + eps))


def layer_norm(t, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Standardize every row; no learned scale or shift."""
    stats = token_stats(t, eps)
    t = np.asarray(t, dtype=np.float64)
    return (t - stats.mean[:, None]) / stats.std[:, None]


def restore(t_hat, stats: TokenStats) -> np.ndarray:
    """Inverse of :func:`layer_norm` given the statistics it removed."""
    return np.asarray(t_hat, dtype=np.float64) * stats.std[:, None] + stats.mean[:, None]


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray

    @property
    def n_components(self) -> int:
        return self.components.shape[0]


def pca_fit(x, q: int) -> PcaModel:
    x = as_matrix(x, "x")
    n, d = x.shape
    if n < 2:
        raise InvalidInput("PCA needs at least two rows")
    if not 1 <= q <= min(n - 1, d):
        raise InvalidInput(f"q={q} outside [1, {min(n - 1, d)}]")
    mean = x.mean(axis=0)
    res = svd(x - mean)
    return PcaModel(
        mean=mean,
        components=res.vt[:q].copy(),
        explained_variance=res.sigma[:q] ** 2 / n,
    )


def pca_project(model: PcaModel, x) -> np.ndarray:
    x = as_matrix(x, "x")
    if x.shape[1] != model.mean.shape[0]:
        raise InvalidInput(f"width {x.shape[1]} != model width {model.mean.shape[0]}")
    return (x - model.mean) @ model.components.T


def pca_reconstruct(model: PcaModel, coords) -> np.ndarray:
    return np.asarray(coords, dtype=np.float64) @ model.components + model.mean
