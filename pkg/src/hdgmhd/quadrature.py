"""Positive-weight quadrature on the reference simplex.

The reference simplex has vertices ``0, e_1, ..., e_d``. Rules are collapsed
(conical product) Gauss-Jacobi rules, so every weight is positive and every
point lies strictly inside the simplex.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from math import factorial

import numpy as np
from scipy.special import roots_jacobi

MAX_ORDER = 40


@dataclass(frozen=True)
class QuadratureRule:
    dim: int
    order: int
    points: np.ndarray  # (nq, dim)
    weights: np.ndarray  # (nq,)

    @property
    def size(self) -> int:
        return len(self.weights)

    def integrate(self, values: np.ndarray) -> np.ndarray:
        """Integrate samples taken at ``points`` (leading axis = point index)."""
        return np.tensordot(self.weights, values, axes=(0, 0))


def reference_measure(dim: int) -> float:
    return 1.0 / factorial(dim)


def _gauss_jacobi01(n: int, alpha: int) -> tuple[np.ndarray, np.ndarray]:
    # weight (1-s)^alpha on [0, 1]
    x, w = roots_jacobi(n, alpha, 0)
    return 0.5 * (1.0 + x), w * 0.5 ** (alpha + 1)


@lru_cache(maxsize=None)
def _rule(dim: int, order: int) -> QuadratureRule:
    n = max(1, (order + 2) // 2)
    if dim == 0:
        return QuadratureRule(0, order, np.zeros((1, 0)), np.ones(1))
    if dim == 1:
        s, ws = _gauss_jacobi01(n, 0)
        return QuadratureRule(1, order, s[:, None], ws)
    if dim == 2:
        s, ws = _gauss_jacobi01(n, 1)
        t, wt = _gauss_jacobi01(n, 0)
        S, Tt = np.meshgrid(s, t, indexing="ij")
        W = np.outer(ws, wt)
        pts = np.stack([S, (1.0 - S) * Tt], axis=-1).reshape(-1, 2)
        return QuadratureRule(2, order, pts, W.ravel())
    s, ws = _gauss_jacobi01(n, 2)
    t, wt = _gauss_jacobi01(n, 1)
    u, wu = _gauss_jacobi01(n, 0)
    S, Tt, U = np.meshgrid(s, t, u, indexing="ij")
    W = ws[:, None, None] * wt[None, :, None] * wu[None, None, :]
    x = S
    y = (1.0 - S) * Tt
    z = (1.0 - S) * (1.0 - Tt) * U
    pts = np.stack([x, y, z], axis=-1).reshape(-1, 3)
    return QuadratureRule(3, order, pts, W.ravel())


def make_quadrature(dim: int, order: int) -> QuadratureRule:
    """Rule on the reference ``dim``-simplex exact for total degree ``order``."""
    if dim not in (0, 1, 2, 3):
        raise ValueError(f"unsupported simplex dimension {dim}")
    if order < 1:
        raise ValueError("quadrature order must be >= 1")
    if order > MAX_ORDER:
        raise NotImplementedError(f"quadrature order {order} exceeds {MAX_ORDER}")
    return _rule(dim, int(order))
