"""Polynomial bases on the reference simplex, RT spaces and L2/RT projections.

Scalar bases are hierarchical and L2-orthonormal on the reference simplex
(vertices ``0, e_1, ..., e_d``): the first ``dim P_{k-1}`` functions of the
degree-``k`` basis span ``P_{k-1}``. On an affine element ``K`` the mass matrix
is therefore ``|det J_K| * I``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from itertools import product
from math import comb

import numpy as np

from .exceptions import InternalError
from .quadrature import make_quadrature, reference_measure


def monomial_exponents(dim: int, degree: int) -> np.ndarray:
    """Exponent tuples of total degree <= ``degree``, graded order."""
    rows = []
    for total in range(degree + 1):
        for e in product(range(total + 1), repeat=dim):
            if sum(e) == total:
                rows.append(e[::-1])
    return np.array(rows, dtype=int).reshape(-1, dim)


def _eval_monomials(exps: np.ndarray, pts: np.ndarray):
    """Monomial values (npts, nm) and gradients (npts, nm, dim)."""
    npts, dim = pts.shape
    vals = np.ones((npts, len(exps)))
    for a in range(dim):
        vals *= pts[:, a : a + 1] ** exps[None, :, a]
    grads = np.zeros((npts, len(exps), dim))
    for a in range(dim):
        e = exps[:, a]
        g = np.ones((npts, len(exps))) * e[None, :]
        for b in range(dim):
            pw = exps[:, b] - (1 if b == a else 0)
            g = g * pts[:, b : b + 1] ** np.maximum(pw, 0)[None, :]
        grads[:, :, a] = g
    return vals, grads


@dataclass(frozen=True)
class PolynomialBasis:
    """Orthonormal basis of P_degree on the reference ``dim``-simplex."""

    dim: int
    degree: int
    exponents: np.ndarray = field(repr=False)
    coeffs: np.ndarray = field(repr=False)  # (size, n_monomials)
    center: np.ndarray = field(repr=False)

    @property
    def size(self) -> int:
        return self.coeffs.shape[0]

    def eval(self, pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        vals, _ = _eval_monomials(self.exponents, pts - self.center)
        return vals @ self.coeffs.T

    def grad(self, pts) -> np.ndarray:
        """Reference gradients, shape (npts, size, dim)."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        _, g = _eval_monomials(self.exponents, pts - self.center)
        return np.einsum("pmd,im->pid", g, self.coeffs)


@lru_cache(maxsize=None)
def make_basis(dim: int, degree: int) -> PolynomialBasis:
    if dim not in (1, 2, 3):
        raise ValueError(f"unsupported basis dimension {dim}")
    if degree < 0:
        raise ValueError("degree must be >= 0")
    exps = monomial_exponents(dim, degree)
    center = np.full(dim, 1.0 / (dim + 1))
    q = make_quadrature(dim, max(2 * degree, 1))
    m, _ = _eval_monomials(exps, q.points - center)
    gram = (m * q.weights[:, None]).T @ m
    try:
        chol = np.linalg.cholesky(gram)
    except np.linalg.LinAlgError as exc:
        raise InternalError("monomial Gram matrix is not positive definite") from exc
    coeffs = np.linalg.inv(chol)
    return PolynomialBasis(dim, degree, exps, coeffs, center)


def basis_size(dim: int, degree: int) -> int:
    if degree < 0:
        return 0
    return comb(degree + dim, dim)


# ---------------------------------------------------------------------------
# affine simplex helpers used by the projections
# ---------------------------------------------------------------------------

def _affine(vertices: np.ndarray):
    v = np.asarray(vertices, dtype=float)
    jac = (v[1:] - v[0]).T
    return v[0], jac


def _facet_frame(vertices: np.ndarray, interior_point: np.ndarray):
    """Outward unit normal and measure of a facet given by its ``d`` vertices."""
    v = np.asarray(vertices, dtype=float)
    d = v.shape[1]
    if d == 2:
        t = v[1] - v[0]
        n = np.array([t[1], -t[0]])
        area = np.linalg.norm(t)
    else:
        n = np.cross(v[1] - v[0], v[2] - v[0])
        area = 0.5 * np.linalg.norm(n)
    n = n / np.linalg.norm(n)
    if np.dot(n, v[0] - interior_point) < 0:
        n = -n
    return n, area


def l2_project_element(f, degree: int, vertices, order: int | None = None) -> np.ndarray:
    """Coefficients of Q°_s f in the orthonormal basis mapped onto ``K``.

    ``f`` maps points (npts, d) to values (npts,) or (npts, m); the result has
    shape (size,) or (m, size).
    """
    x0, jac = _affine(vertices)
    d = jac.shape[0]
    basis = make_basis(d, degree)
    q = make_quadrature(d, order or 2 * degree + 4)
    phi = basis.eval(q.points)
    vals = np.asarray(f(q.points @ jac.T + x0), dtype=float)
    # mass matrix is |det J| * I, so the projection is a plain moment
    return np.tensordot(vals, phi * q.weights[:, None], axes=(0, 0)).T


def l2_project_facet(f, degree: int, vertices, order: int | None = None) -> np.ndarray:
    """Coefficients of Q^b_s f in the orthonormal facet basis.

    ``vertices`` are the facet's ``d`` vertices in R^d (or R^1 for an interval
    given as two 1-vectors); the facet parameterization follows their order.
    """
    v = np.atleast_2d(np.asarray(vertices, dtype=float))
    fd = v.shape[0] - 1
    basis = make_basis(fd, degree)
    q = make_quadrature(fd, order or 2 * degree + 4)
    lam = np.column_stack([1.0 - q.points.sum(axis=1), q.points])
    x = lam @ v
    vals = np.asarray(f(x), dtype=float)
    psi = basis.eval(q.points)
    return np.tensordot(vals, psi * q.weights[:, None], axes=(0, 0)).T


# ---------------------------------------------------------------------------
# Raviart-Thomas
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RTSpace:
    """RT_s(K) = [P_s]^d + x P_s on a physical simplex ``K``.

    Basis functions use the scaled coordinate ``y = (x - c) / h`` for
    conditioning; the space does not depend on that choice.
    """

    dim: int
    degree: int
    vertices: np.ndarray = field(repr=False)

    @property
    def size(self) -> int:
        d, s = self.dim, self.degree
        return d * comb(s + d, d) + comb(s + d - 1, d - 1)

    @property
    def _scale(self):
        v = self.vertices
        c = v.mean(axis=0)
        h = max(np.linalg.norm(a - b) for a in v for b in v)
        return c, h

    def _parts(self, x):
        d, s = self.dim, self.degree
        c, h = self._scale
        y = (np.atleast_2d(x) - c) / h
        exps = monomial_exponents(d, s)
        m, gm = _eval_monomials(exps, y)
        hom = np.where(exps.sum(axis=1) == s)[0]
        npts = y.shape[0]
        nm = len(exps)
        vals = np.zeros((npts, self.size, d))
        divs = np.zeros((npts, self.size))
        for a in range(d):
            vals[:, a * nm : (a + 1) * nm, a] = m
            divs[:, a * nm : (a + 1) * nm] = gm[:, :, a] / h
        for j, idx in enumerate(hom):
            col = d * nm + j
            vals[:, col, :] = y * m[:, idx : idx + 1]
            # div(y p) = d p + y . grad p = (d + s) p for homogeneous p
            divs[:, col] = (d + s) * m[:, idx] / h
        return vals, divs

    def eval_basis(self, x) -> np.ndarray:
        return self._parts(x)[0]

    def div_basis(self, x) -> np.ndarray:
        return self._parts(x)[1]


@dataclass(frozen=True)
class RTFunction:
    space: RTSpace
    coeffs: np.ndarray

    def __call__(self, x) -> np.ndarray:
        return np.einsum("pid,i->pd", self.space.eval_basis(x), self.coeffs)

    def div(self, x) -> np.ndarray:
        return self.space.div_basis(x) @ self.coeffs


def rt_project(v, degree: int, vertices, order: int | None = None) -> RTFunction:
    """P^RT_s v through facet normal moments and interior vector moments."""
    verts = np.asarray(vertices, dtype=float)
    d = verts.shape[1]
    if degree < 0:
        raise ValueError("RT degree must be >= 0")
    space = RTSpace(d, degree, verts)
    order = order or 2 * degree + 4
    centroid = verts.mean(axis=0)
    rows, rhs = [], []
    fbasis = make_basis(d - 1, degree)
    fq = make_quadrature(d - 1, order)
    lam = np.column_stack([1.0 - fq.points.sum(axis=1), fq.points])
    psi = fbasis.eval(fq.points)
    for lf in range(d + 1):
        fv = np.delete(verts, lf, axis=0)
        n, area = _facet_frame(fv, centroid)
        x = lam @ fv
        w = fq.weights * area / reference_measure(d - 1)
        bn = space.eval_basis(x) @ n  # (nq, size)
        vn = np.asarray(v(x), dtype=float) @ n
        rows.append((psi * w[:, None]).T @ bn)
        rhs.append((psi * w[:, None]).T @ vn)
    if degree >= 1:
        x0, jac = _affine(verts)
        q = make_quadrature(d, order)
        x = q.points @ jac.T + x0
        w = q.weights * abs(np.linalg.det(jac))
        chi = make_basis(d, degree - 1).eval(q.points)
        bv = space.eval_basis(x)
        vv = np.asarray(v(x), dtype=float)
        for a in range(d):
            rows.append((chi * w[:, None]).T @ bv[:, :, a])
            rhs.append((chi * w[:, None]).T @ vv[:, a])
    mat = np.vstack(rows)
    b = np.concatenate(rhs)
    if mat.shape[0] != mat.shape[1]:
        raise InternalError(f"RT moment system is {mat.shape}, expected square")
    if np.linalg.cond(mat) > 1e12:
        raise InternalError("singular RT moment matrix")
    return RTFunction(space, np.linalg.solve(mat, b))
