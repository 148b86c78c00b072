"""Dense float64 linear algebra helpers and seeded random streams.

Matrices and vectors are plain ``numpy.ndarray`` objects of dtype float64,
stored row-major (C order).
"""
from __future__ import annotations

import numpy as np

NORM_KINDS = ("inf", "one", "spectral")
POWER_ITERATIONS = 100


class DimensionError(ValueError):
    """Raised when array shapes do not fit together."""


def as_matrix(m) -> np.ndarray:
    a = np.ascontiguousarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"expected a 2-d matrix, got shape {a.shape}")
    return a


def make_rng(seed: int) -> np.random.Generator:
    """Seeded generator backed by Philox, a counter-based bit generator.

    Philox output depends only on (key, counter), so the same seed gives the
    same stream on every platform numpy supports.
    """
    return np.random.Generator(np.random.Philox(int(seed) & (2**64 - 1)))


def matrix_norm(m, kind: str = "inf") -> float:
    """Operator norm of ``m``.

    ``inf`` is the max absolute row sum, ``one`` the max absolute column sum
    and ``spectral`` the largest singular value, estimated with
    ``POWER_ITERATIONS`` rounds of power iteration on ``m.T @ m``.
    """
    m = as_matrix(m)
    if m.size == 0:
        raise DimensionError("norm of an empty matrix")
    if kind == "inf":
        return float(np.abs(m).sum(axis=1).max())
    if kind == "one":
        return float(np.abs(m).sum(axis=0).max())
    if kind == "spectral":
        return spectral_norm(m)
    raise ValueError(f"unknown norm kind {kind!r}")


def spectral_norm(m: np.ndarray, iterations: int = POWER_ITERATIONS,
                  seed: int = 0) -> float:
    m = as_matrix(m)
    scale = float(np.abs(m).max()) if m.size else 0.0
    if scale == 0.0:
        return 0.0
    # work on m / max|m| so the squared quantities neither overflow nor underflow
    ms = m / scale
    v = _top_right_singular_vector(ms, iterations, seed)
    return float(np.linalg.norm(ms @ v)) * scale


def spectral_norm_and_grad(m: np.ndarray, iterations: int = POWER_ITERATIONS,
                           seed: int = 0) -> tuple[float, np.ndarray]:
    """Largest singular value and its gradient ``u v^T`` w.r.t. ``m``."""
    m = as_matrix(m)
    scale = float(np.abs(m).max()) if m.size else 0.0
    if scale == 0.0:
        return 0.0, np.zeros_like(m)
    ms = m / scale
    v = _top_right_singular_vector(ms, iterations, seed)
    mv = ms @ v
    s = float(np.linalg.norm(mv))
    return s * scale, np.outer(mv / s, v)


def _top_right_singular_vector(m, iterations, seed):
    m = as_matrix(m)
    v = make_rng(seed).standard_normal(m.shape[1])
    v /= np.linalg.norm(v)
    mtm = m.T @ m
    for _ in range(iterations):
        w = mtm @ v
        nrm = np.linalg.norm(w)
        if nrm == 0.0:
            break
        v = w / nrm
    return v


def matmul(a, b) -> np.ndarray:
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def matvec(a, v) -> np.ndarray:
    a = as_matrix(a)
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or a.shape[1] != v.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by vector {v.shape}")
    return a @ v


def softplus(x):
    """``log(1 + exp(x))`` without overflow."""
    x = np.asarray(x, dtype=np.float64)
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    """Inverse of softplus for ``y > 0``: ``log(exp(y) - 1)``."""
    y = np.asarray(y, dtype=np.float64)
    if np.any(y <= 0):
        raise ValueError("softplus inverse needs positive input")
    # log(expm1(y)) = y + log(1 - exp(-y)), the second form is stable for large y
    return y + np.log(-np.expm1(-y))


def logistic(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * x))
