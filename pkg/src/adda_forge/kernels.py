"""Generalized RBF kernel mixtures and the squared MMD between sample sets.

The mixture is ``k(x, y) = sum_r exp(-D2(x, y) / (2 sigma_r))`` where ``D2`` is
one of four distances. ``mmd2_biased`` is the vectorized estimator used for
training; ``mmd2_oracle`` recomputes it with plain loops and shares no code with
it, so the two can be checked against each other.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np

from .errors import ConfigError, DomainError, ShapeError

FAMILIES = ("sq-euclidean", "chi-squared", "sq-hellinger", "l1")
_FAMILY_CODE = {name: i for i, name in enumerate(FAMILIES)}
_PROBABILISTIC = ("chi-squared", "sq-hellinger")


def default_sigmas() -> list[float]:
    return [10.0 ** -r for r in range(5)]


@dataclass(frozen=True)
class KernelSpec:
    family: str = "sq-euclidean"
    sigmas: tuple[float, ...] = field(default_factory=lambda: tuple(default_sigmas()))
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown kernel family {self.family!r}; choose from {FAMILIES}")
        object.__setattr__(self, "sigmas", tuple(float(s) for s in self.sigmas))
        if not self.sigmas or min(self.sigmas) <= 0:
            raise ConfigError("kernel bandwidths must be a non-empty list of positive numbers")
        if self.epsilon < 0 or (self.family in _PROBABILISTIC and self.epsilon <= 0):
            raise ConfigError(f"{self.family} needs epsilon > 0, got {self.epsilon}")


def _check_nonneg(family, *arrays):
    if family in _PROBABILISTIC:
        for a in arrays:
            if np.any(np.asarray(a) < 0):
                raise DomainError(f"{family} distance is only defined for nonnegative inputs")


def dist2(family: str, x, y, epsilon: float = 1e-8) -> float:
    """Distance between two vectors for the given kernel family."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"dimension mismatch: {x.shape} vs {y.shape}")
    _check_nonneg(family, x, y)
    return float(_pairwise_dist2(family, x[None], y[None], epsilon)[0, 0])


def kernel_eval(spec: KernelSpec, x, y) -> float:
    d2 = dist2(spec.family, x, y, spec.epsilon)
    return float(sum(np.exp(-d2 / (2.0 * s)) for s in spec.sigmas))


def _pairwise_dist2(family: str, A: np.ndarray, B: np.ndarray, eps: float) -> np.ndarray:
    diff = A[:, None, :] - B[None, :, :]
    if family == "sq-euclidean":
        return (diff * diff).sum(axis=-1)
    if family == "chi-squared":
        return (diff * diff / (A[:, None, :] + B[None, :, :] + eps)).sum(axis=-1)
    if family == "sq-hellinger":
        r = np.sqrt(A + eps)[:, None, :] - np.sqrt(B + eps)[None, :, :]
        return (r * r).sum(axis=-1)
    if family == "l1":
        return np.abs(diff).sum(axis=-1)
    raise ConfigError(f"unknown kernel family {family!r}")


def _dist2_grad_second(family: str, A: np.ndarray, B: np.ndarray, eps: float) -> np.ndarray:
    """d D2(a_i, b_j) / d b_j, shape (n, m, d)."""
    diff = B[None, :, :] - A[:, None, :]
    if family == "sq-euclidean":
        return 2.0 * diff
    if family == "chi-squared":
        s = A[:, None, :] + B[None, :, :] + eps
        return (2.0 * diff * s - diff * diff) / (s * s)
    if family == "sq-hellinger":
        rb = np.sqrt(B + eps)[None, :, :]
        return (rb - np.sqrt(A + eps)[:, None, :]) / rb
    if family == "l1":
        return np.sign(diff)
    raise ConfigError(f"unknown kernel family {family!r}")


def gram(spec: KernelSpec, A, B) -> np.ndarray:
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    if A.shape[1] != B.shape[1]:
        raise ShapeError(f"feature width mismatch: {A.shape[1]} vs {B.shape[1]}")
    _check_nonneg(spec.family, A, B)
    d2 = _pairwise_dist2(spec.family, A, B, spec.epsilon)
    return sum(np.exp(-d2 / (2.0 * s)) for s in spec.sigmas)


def _as_sets(A, B):
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    if A.shape[0] == 0 or B.shape[0] == 0 or A.size == 0 or B.size == 0:
        raise ShapeError("MMD needs non-empty sample sets")
    if A.shape[1] != B.shape[1]:
        raise ShapeError(f"feature width mismatch: {A.shape[1]} vs {B.shape[1]}")
    return A, B


def mmd2_biased(spec: KernelSpec, A, B) -> float:
    """Biased (V-statistic) squared MMD, diagonal terms included."""
    A, B = _as_sets(A, B)
    return float(gram(spec, A, A).mean() - 2.0 * gram(spec, A, B).mean() + gram(spec, B, B).mean())


def mmd2_value_and_grad(spec: KernelSpec, A, B) -> tuple[float, np.ndarray]:
    """:func:`mmd2_biased` together with its gradient w.r.t. the rows of ``B``."""
    A, B = _as_sets(A, B)
    _check_nonneg(spec.family, A, B)
    n, m = len(A), len(B)
    eps = spec.epsilon
    inv2s = [1.0 / (2.0 * s) for s in spec.sigmas]

    def terms(X):
        d2 = _pairwise_dist2(spec.family, X, B, eps)
        ks = [np.exp(-d2 * c) for c in inv2s]
        coef = -sum(k * c for k, c in zip(ks, inv2s))
        dk = np.einsum("ij,ijd->jd", coef, _dist2_grad_second(spec.family, X, B, eps))
        return sum(ks).sum(), dk

    k_ab, dk_ab = terms(A)
    k_bb, dk_bb = terms(B)
    k_aa = gram(spec, A, A).sum()
    value = k_aa / (n * n) - 2.0 * k_ab / (n * m) + k_bb / (m * m)
    return float(value), 2.0 * dk_bb / (m * m) - 2.0 * dk_ab / (n * m)


def mmd2_grad_B(spec: KernelSpec, A, B) -> np.ndarray:
    """Gradient of :func:`mmd2_biased` w.r.t. the rows of ``B``; ``A`` is held fixed."""
    return mmd2_value_and_grad(spec, A, B)[1]


@numba.njit(cache=True)
def _oracle_kernel(code, x, y, sigmas, eps):
    d2 = 0.0
    for i in range(x.shape[0]):
        if code == 0:
            d2 += (x[i] - y[i]) ** 2
        elif code == 1:
            d2 += (x[i] - y[i]) ** 2 / (x[i] + y[i] + eps)
        elif code == 2:
            d2 += (math.sqrt(x[i] + eps) - math.sqrt(y[i] + eps)) ** 2
        else:
            d2 += abs(x[i] - y[i])
    total = 0.0
    for s in sigmas:
        total += math.exp(-d2 / (2.0 * s))
    return total


@numba.njit(cache=True)
def _oracle_loops(code, A, B, sigmas, eps):
    n, m = A.shape[0], B.shape[0]
    aa = 0.0
    for i in range(n):
        for j in range(n):
            aa += _oracle_kernel(code, A[i], A[j], sigmas, eps)
    ab = 0.0
    for i in range(n):
        for j in range(m):
            ab += _oracle_kernel(code, A[i], B[j], sigmas, eps)
    bb = 0.0
    for i in range(m):
        for j in range(m):
            bb += _oracle_kernel(code, B[i], B[j], sigmas, eps)
    return aa / (n * n) - 2.0 * ab / (n * m) + bb / (m * m)


def mmd2_oracle(spec: KernelSpec, A, B) -> float:
    """Reference squared MMD computed with explicit element-by-element loops."""
    A, B = _as_sets(A, B)
    _check_nonneg(spec.family, A, B)
    return float(_oracle_loops(_FAMILY_CODE[spec.family], np.ascontiguousarray(A),
                               np.ascontiguousarray(B), np.asarray(spec.sigmas), spec.epsilon))
