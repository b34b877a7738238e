"""Global dofs, assembly of the Oseen-linearized system, direct solves and
the Oseen fixed-point driver."""
from __future__ import annotations

import glob
import logging
import os
import sys
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .exceptions import NonConvergenceError, SingularSystemError
from .fem_basis import make_basis
from .forms import (
    INTERIOR_FIELDS,
    TRACE_FIELDS,
    Discretization,
    LocalBlocks,
    PhysicalParameters,
    field_shape,
    local_buoyancy_block,
    local_constraint_block,
    local_convection_blocks,
    local_load,
    local_mixed_flux_block,
    local_stabilization_block,
)
from .mesh import SimplicialMesh
from .quadrature import make_quadrature

log = logging.getLogger(__name__)

ALL_FIELDS = INTERIOR_FIELDS + TRACE_FIELDS


class DofMap:
    """Field-major global numbering.

    Interior field ``f`` occupies ``offset[f] + e * block[f] + local``; trace
    field ``f`` occupies ``offset[f] + facet * block[f] + comp * nF + j``.
    The pressure gauge multiplier (if any) is the last unknown.
    """

    def __init__(self, mesh: SimplicialMesh, k: int, pressure_gauge: bool = True):
        if int(k) != k or k < 1:
            raise ValueError("polynomial degree k must be an integer >= 1")
        self.mesh, self.k, self.dim = mesh, int(k), mesh.dim
        self.pressure_gauge = pressure_gauge
        self.offset, self.block = {}, {}
        pos = 0
        for name in ALL_FIELDS:
            nc, nb = field_shape(name, self.dim, self.k)
            count = mesh.n_facets if name in TRACE_FIELDS else mesh.n_elements
            self.offset[name], self.block[name] = pos, nc * nb
            pos += count * nc * nb
        self.gauge_index = pos if pressure_gauge else None
        self.n_dofs = pos + (1 if pressure_gauge else 0)

    def count(self, name: str) -> int:
        n = self.mesh.n_facets if name in TRACE_FIELDS else self.mesh.n_elements
        return n * self.block[name]

    def field_slice(self, name: str) -> slice:
        return slice(self.offset[name], self.offset[name] + self.count(name))

    def local_dofs(self, name: str, elements=None) -> np.ndarray:
        """Global indices (ne, local size) in the local layout of ``forms``."""
        e = np.arange(self.mesh.n_elements) if elements is None else np.asarray(elements)
        b = self.block[name]
        if name in INTERIOR_FIELDS:
            return self.offset[name] + e[:, None] * b + np.arange(b)[None, :]
        facets = self.mesh.element_facets[e]  # (ne, d+1)
        return (self.offset[name] + facets[:, :, None] * b + np.arange(b)[None, None, :]).reshape(len(e), -1)

    @cached_property
    def fixed(self) -> np.ndarray:
        """Mask of essential (eliminated) unknowns.

        Boundary facets: every velocity, temperature and pseudo-pressure trace
        coefficient and the tangential magnetic trace. Every facet: the normal
        component of the magnetic trace, which enters no form.
        """
        m = self.mesh
        mask = np.zeros(self.n_dofs, dtype=bool)
        bnd = np.where(m.boundary_flags)[0]
        for name in ("uh", "Th", "rh", "Bh"):
            b = self.block[name]
            idx = self.offset[name] + bnd[:, None] * b + np.arange(b)[None, :]
            mask[idx.ravel()] = True
        nF = make_basis(self.dim - 1, self.k).size
        b = self.block["Bh"]
        idx = self.offset["Bh"] + np.arange(m.n_facets)[:, None] * b + np.arange(nF)[None, :]
        mask[idx.ravel()] = True
        return mask

    def describe(self) -> dict:
        return {name: self.count(name) for name in ALL_FIELDS} | {"gauge": int(self.pressure_gauge)}


def build_dofmap(mesh: SimplicialMesh, k: int, pressure_gauge: bool = True) -> DofMap:
    return DofMap(mesh, k, pressure_gauge)


class StateVector:
    """Coefficient vector with per-field views."""

    def __init__(self, dofmap: DofMap, values: np.ndarray | None = None):
        self.dofmap = dofmap
        if values is None:
            values = np.zeros(dofmap.n_dofs)
        values = np.asarray(values, dtype=float)
        if values.shape != (dofmap.n_dofs,):
            raise ValueError(f"state has length {values.shape}, expected {dofmap.n_dofs}")
        self.values = values

    def copy(self) -> "StateVector":
        return StateVector(self.dofmap, self.values.copy())

    def element_field(self, name: str) -> np.ndarray:
        """(ne, ncomp, nb) coefficients of an interior field."""
        nc, nb = field_shape(name, self.dofmap.dim, self.dofmap.k)
        return self.values[self.dofmap.field_slice(name)].reshape(-1, nc, nb)

    def facet_field(self, name: str) -> np.ndarray:
        """(nf, ncomp, nF) coefficients of a trace field (frame coefficients for Bh)."""
        nc, nb = field_shape(name, self.dofmap.dim, self.dofmap.k)
        return self.values[self.dofmap.field_slice(name)].reshape(-1, nc, nb)

    def side_field(self, name: str) -> np.ndarray:
        """(ne, d+1, ncomp, nF) trace coefficients seen from each element."""
        return self.facet_field(name)[self.dofmap.mesh.element_facets]

    @property
    def gauge(self) -> float:
        i = self.dofmap.gauge_index
        return 0.0 if i is None else float(self.values[i])


@dataclass
class SparseSystem:
    """Square system over all unknowns; eliminated rows are identity rows."""

    matrix: sp.csr_matrix
    rhs: np.ndarray
    dofmap: DofMap
    meta: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.matrix.shape


@dataclass
class BoundaryData:
    """Optional non-homogeneous trace data (defaults are homogeneous).

    Each entry maps physical points (..., d) to values; ``u``/``B`` are vector
    valued, ``T``/``r`` scalar. ``u`` also feeds the natural boundary term of
    the pressure-trace rows and ``p_mean`` the gauge value.
    """

    u: Callable | None = None
    B: Callable | None = None
    T: Callable | None = None
    r: Callable | None = None
    p_mean: float = 0.0


def _facet_quadrature(disc: Discretization):
    k = disc.k
    q = make_quadrature(disc.dim - 1, 2 * k + 4)
    lam = np.column_stack([1.0 - q.points.sum(axis=1), q.points])
    psi = disc.ref.tbasis.eval(q.points)
    return q.weights, lam, psi


def _project_facets(disc: Discretization, facets: np.ndarray, fn: Callable) -> np.ndarray:
    """L2 projection of ``fn`` onto P_k(e) in the global facet parameterization:
    (n, ..., nF) coefficients."""
    w, lam, psi = _facet_quadrature(disc)
    verts = disc.mesh.vertices[disc.mesh.facets[facets]]  # (n, d, d)
    x = np.einsum("qk,nkd->nqd", lam, verts)
    vals = np.asarray(fn(x), dtype=float)  # (n, nq) or (n, nq, c)
    if vals.ndim == 2:
        vals = vals[..., None]
    return np.einsum("q,qj,nqc->ncj", w, psi, vals)


def boundary_values(disc: Discretization, dofmap: DofMap, data: BoundaryData | None) -> np.ndarray:
    """Values of the fixed unknowns (zeros where not prescribed)."""
    x = np.zeros(dofmap.n_dofs)
    if data is None:
        return x
    m = disc.mesh
    bnd = np.where(m.boundary_flags)[0]
    for name, fn in (("uh", data.u), ("Th", data.T), ("rh", data.r)):
        if fn is None:
            continue
        c = _project_facets(disc, bnd, fn)
        b = dofmap.block[name]
        idx = dofmap.offset[name] + bnd[:, None] * b + np.arange(b)[None, :]
        x[idx.ravel()] = c.reshape(len(bnd), -1).ravel()
    if data.B is not None:
        frames = disc.facet_frames[bnd]  # (n, m, d)

        def tang(pts):
            return np.einsum("nqc,nmc->nqm", np.asarray(data.B(pts), dtype=float), frames)

        c = _project_facets(disc, bnd, tang)  # (n, m, nF)
        c[:, 0, :] = 0.0  # normal component is never used
        b = dofmap.block["Bh"]
        idx = dofmap.offset["Bh"] + bnd[:, None] * b + np.arange(b)[None, :]
        x[idx.ravel()] = c.reshape(len(bnd), -1).ravel()
    return x


def _natural_pressure_rhs(disc: Discretization, dofmap: DofMap, data: BoundaryData | None) -> np.ndarray:
    """-<g.n, qh> on boundary pressure-trace rows (zero for homogeneous data)."""
    rhs = np.zeros(dofmap.n_dofs)
    if data is None or data.u is None:
        return rhs
    m = disc.mesh
    bnd = np.where(m.boundary_flags)[0]
    n = m.facet_normals[bnd]
    gn = _project_facets(disc, bnd, lambda x: np.einsum("nqc,nc->nq", np.asarray(data.u(x)), n))
    scale = (m.facet_areas[m.facet_elements[bnd, 0], m.facet_local[bnd, 0]] / disc.ref.fmeasure)
    b = dofmap.block["ph"]
    idx = dofmap.offset["ph"] + bnd[:, None] * b + np.arange(b)[None, :]
    rhs[idx.ravel()] = (-scale[:, None] * gn[:, 0, :]).ravel()
    return rhs


def _coo(dofmap: DofMap, blocks: LocalBlocks):
    rows, cols, vals = [], [], []
    for (rf, cf), v in blocks.blocks.items():
        r = dofmap.local_dofs(rf)
        c = dofmap.local_dofs(cf)
        R = np.broadcast_to(r[:, :, None], v.shape)
        C = np.broadcast_to(c[:, None, :], v.shape)
        nz = v != 0.0
        rows.append(R[nz])
        cols.append(C[nz])
        vals.append(v[nz])
    return np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)


def _load_vector(dofmap: DofMap, blocks: LocalBlocks) -> np.ndarray:
    b = np.zeros(dofmap.n_dofs)
    for name, v in blocks.load.items():
        np.add.at(b, dofmap.local_dofs(name).ravel(), np.asarray(v).ravel())
    return b


def _as_forcing(forcing):
    if forcing is None:
        return None, None, None
    if isinstance(forcing, (tuple, list)):
        return tuple(forcing)
    return forcing.f1, forcing.f2, forcing.f3


class OseenAssembler:
    """Caches the parameter-only part of the system; adds convection per step."""

    def __init__(self, mesh: SimplicialMesh, k: int, params: PhysicalParameters, forcing=None,
                 boundary: BoundaryData | None = None, pressure_gauge: bool = True):
        self.disc = Discretization(mesh, k)
        self.params = params
        self.dofmap = DofMap(mesh, k, pressure_gauge)
        self.boundary = boundary
        f1, f2, f3 = _as_forcing(forcing)
        static = LocalBlocks()
        for grp in ("velocity", "magnetic", "thermal"):
            static.merge(local_mixed_flux_block(grp, self.disc, params))
            static.merge(local_stabilization_block(grp, self.disc, params))
        static.merge(local_constraint_block("pressure", self.disc, params))
        static.merge(local_constraint_block("pseudo_pressure", self.disc, params))
        static.merge(local_buoyancy_block(self.disc, params))
        static.merge(local_load(self.disc, params, f1, f2, f3))
        self.static_blocks = static
        r, c, v = _coo(self.dofmap, static)
        if pressure_gauge:
            # (p, 1) = p_mean as a row, and its transpose as the multiplier column
            p_idx = self.dofmap.local_dofs("p")[:, 0]
            # (chi_0, 1)_K with chi_0 = 1 / sqrt(|K_ref|) the orthonormal constant
            w = self.disc.absdet * np.sqrt(self.disc.ref.measure)
            g = self.dofmap.gauge_index
            r = np.concatenate([r, np.full(len(p_idx), g), p_idx])
            c = np.concatenate([c, p_idx, np.full(len(p_idx), g)])
            v = np.concatenate([v, w, w])
        self._static = (r, c, v)
        self.load = _load_vector(self.dofmap, static) + _natural_pressure_rhs(self.disc, self.dofmap, boundary)
        if pressure_gauge and boundary is not None:
            self.load[self.dofmap.gauge_index] = boundary.p_mean
        self.fixed = self.dofmap.fixed
        self.fixed_values = boundary_values(self.disc, self.dofmap, boundary)

    def initial_state(self) -> StateVector:
        return StateVector(self.dofmap, self.fixed_values.copy())

    def convection(self, prev: StateVector) -> LocalBlocks:
        return local_convection_blocks(self.disc, self.params, prev)

    def system(self, prev: StateVector | None = None) -> SparseSystem:
        if prev is not None and prev.dofmap.n_dofs != self.dofmap.n_dofs:
            raise ValueError("previous iterate does not match the dof map")
        r, c, v = self._static
        if prev is not None and np.any(prev.values):
            r2, c2, v2 = _coo(self.dofmap, self.convection(prev))
            r, c, v = np.concatenate([r, r2]), np.concatenate([c, c2]), np.concatenate([v, v2])
        n = self.dofmap.n_dofs
        A = sp.csr_matrix((v, (r, c)), shape=(n, n))
        A.sum_duplicates()
        return _eliminate(A, self.load, self.fixed, self.fixed_values, self.dofmap)


def _eliminate(A, b, fixed, xfix, dofmap) -> SparseSystem:
    free = ~fixed
    rhs = b - A @ np.where(fixed, xfix, 0.0)
    rhs[fixed] = xfix[fixed]
    keep = sp.diags(free.astype(float))
    A = (keep @ A @ keep + sp.diags(fixed.astype(float))).tocsr()
    A.eliminate_zeros()
    return SparseSystem(A, rhs, dofmap, {"n_fixed": int(fixed.sum()), "free": free})


def assemble_oseen(mesh: SimplicialMesh, k: int, params: PhysicalParameters, prev: StateVector | None,
                   forcing=None, boundary: BoundaryData | None = None,
                   pressure_gauge: bool = True) -> SparseSystem:
    return OseenAssembler(mesh, k, params, forcing, boundary, pressure_gauge).system(prev)


# ---------------------------------------------------------------------------
# solve
# ---------------------------------------------------------------------------

PIVOT_RATIO = 1e-13
RESIDUAL_TOL = 1e-10
UNIQUENESS_TOL = 1e-6
BACKENDS = ("auto", "superlu", "pardiso")


def _find_pardiso():
    """pypardiso if it imports (helping it locate the MKL runtime), else None."""
    if "PYPARDISO_MKL_RT" not in os.environ:
        roots = [sys.prefix, sys.base_prefix, "/usr/local", "/usr"]
        for root in roots:
            hits = sorted(glob.glob(os.path.join(root, "lib", "libmkl_rt.so*")))
            if hits:
                os.environ["PYPARDISO_MKL_RT"] = hits[0]
                break
    try:
        import pypardiso
    except (ImportError, OSError):
        return None
    return pypardiso


def _relative_residual(A, x, b) -> float:
    normA = spla.norm(A, np.inf)
    num = np.linalg.norm(A @ x - b, np.inf)
    return float(num / (normA * np.linalg.norm(x, np.inf) + np.linalg.norm(b, np.inf) + 1e-300))


def _superlu(A, b):
    try:
        lu = spla.splu(A.tocsc(), permc_spec="COLAMD")
    except RuntimeError as exc:
        raise SingularSystemError(str(exc)) from exc
    d = np.abs(lu.U.diagonal())
    if d.min() <= PIVOT_RATIO * d.max():
        raise SingularSystemError(f"pivot ratio {d.min() / d.max():.2e} signals a nullspace")
    return lu.solve(b)


# iparm settings tried in order: plain pivot perturbation first, then with
# weighted matching and scaling (each wins on different saddle-point systems)
_PARDISO_SETTINGS = (
    ((1, 1), (2, 2), (8, 20), (10, 13), (11, 0), (13, 0)),
    ((1, 1), (2, 2), (8, 20), (10, 8), (11, 1), (13, 1)),
)


def _pardiso(pardiso, A, b):
    """PARDISO solve with a residual check and a uniqueness probe.

    Pivot perturbation lets PARDISO return a consistent solution of a singular
    system, so a second right-hand side ``A z`` is solved with the same
    factorization; recovering ``z`` badly signals a nullspace (or an inaccurate
    factorization) and the caller falls back to SuperLU.
    """
    A = A.tocsr()
    A.sort_indices()
    z = np.random.default_rng(0).standard_normal(A.shape[0])
    rhs = np.column_stack([b, A @ z])
    for setting in _PARDISO_SETTINGS:
        solver = pardiso.PyPardisoSolver()
        for i, v in setting:
            solver.set_iparm(i, v)
        try:
            X = solver.solve(A, rhs)
        except pardiso.pardiso_wrapper.PyPardisoError as exc:
            if "-2" in str(exc):
                raise MemoryError("PARDISO ran out of memory during factorization") from exc
            log.warning("PARDISO failed: %s", exc)
            continue
        finally:
            solver.free_memory(everything=True)
        if not np.all(np.isfinite(X)):
            continue
        x = X[:, 0]
        probe = np.abs(X[:, 1] - z).max() / np.abs(z).max()
        if _relative_residual(A, x, b) <= RESIDUAL_TOL and probe <= UNIQUENESS_TOL:
            return x
        log.info("PARDISO setting rejected: probe %.1e", probe)
    return None


def solve_sparse(system: SparseSystem | sp.spmatrix, rhs: np.ndarray | None = None,
                 backend: str = "auto"):
    """Direct solve. Returns a StateVector for a SparseSystem, else an array.

    Eliminated unknowns are copied from the right-hand side and only the free
    block is factorized. ``backend="auto"`` uses MKL PARDISO when pypardiso is
    importable and falls back to SuperLU when its residual check fails.
    Raises SingularSystemError on a zero or tiny SuperLU pivot
    (ratio < ``PIVOT_RATIO``) or a relative residual above ``RESIDUAL_TOL``.
    """
    if backend not in BACKENDS:
        raise ValueError(f"unknown backend {backend!r}")
    if isinstance(system, SparseSystem):
        A, b = system.matrix, system.rhs
        free = system.meta.get("free")
    else:
        A, b = sp.csr_matrix(system), np.asarray(rhs, dtype=float)
        free = None
    if A.shape[0] != A.shape[1] or A.shape[0] != b.shape[0]:
        raise ValueError("matrix and right-hand side dimensions differ")
    if free is not None:
        Af = A[free][:, free]
        bf = b[free]
    else:
        Af, bf = A, b
    xf, used = None, "superlu"
    if backend in ("auto", "pardiso"):
        pardiso = _find_pardiso()
        if pardiso is None and backend == "pardiso":
            raise ValueError("pypardiso is not available")
        if pardiso is not None:
            xf = _pardiso(pardiso, Af, bf)
            used = "pardiso"
            if xf is None:
                log.warning("PARDISO residual or uniqueness check failed; retrying with SuperLU")
                used = "superlu"
    if xf is None:
        xf = _superlu(Af, bf)
    if free is not None:
        x = b.copy()
        x[free] = xf
    else:
        x = xf
    res = _relative_residual(A, x, b)
    if not np.isfinite(res) or res > RESIDUAL_TOL:
        raise SingularSystemError(f"relative residual {res:.2e} after direct solve")
    if isinstance(system, SparseSystem):
        system.meta["residual"] = res
        system.meta["backend"] = used
        return StateVector(system.dofmap, x)
    return x


# ---------------------------------------------------------------------------
# Oseen iteration
# ---------------------------------------------------------------------------

@dataclass
class IterationRecord:
    iteration: int
    diff_norm: float
    residual: float

    def line(self) -> str:
        return f"iter={self.iteration} diff={self.diff_norm:.6e} residual={self.residual:.3e}"


def velocity_l2(disc: Discretization, coeffs: np.ndarray) -> float:
    """L2 norm of an interior velocity field from (ne, d, nP) coefficients."""
    return float(np.sqrt(np.sum(disc.absdet[:, None, None] * coeffs**2)))


def oseen_iterate(mesh: SimplicialMesh, k: int, params: PhysicalParameters, forcing=None,
                  tol: float = 1e-8, max_iter: int = 50, boundary: BoundaryData | None = None,
                  assembler: OseenAssembler | None = None, backend: str = "auto"):
    """Oseen fixed point from the zero initial guess.

    Stops once the L2 norm of the interior velocity update is below ``tol``.
    Returns ``(state, log)`` where ``log`` is a list of IterationRecord.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    if int(max_iter) != max_iter or max_iter < 1:
        raise ValueError("max_iter must be a positive integer")
    asm = assembler or OseenAssembler(mesh, k, params, forcing, boundary)
    state = asm.initial_state()
    records: list[IterationRecord] = []
    for it in range(1, int(max_iter) + 1):
        system = asm.system(state)
        new = solve_sparse(system, backend=backend)
        diff = velocity_l2(asm.disc, new.element_field("u") - state.element_field("u"))
        rec = IterationRecord(it, diff, system.meta["residual"])
        records.append(rec)
        log.info(rec.line())
        state = new
        if diff < tol:
            return state, records
    raise NonConvergenceError(f"Oseen iteration did not reach tol={tol} in {max_iter} steps", records)


# ---------------------------------------------------------------------------
# divergence checks
# ---------------------------------------------------------------------------

@dataclass
class DivergenceReport:
    element: float
    jump: float

    @property
    def value(self) -> float:
        return max(self.element, self.jump)


def max_divergence(state: StateVector, fieldname: str = "velocity") -> DivergenceReport:
    """Sup of |div| over quadrature points and vertices, and of |[v.n]| over
    interior facet quadrature points."""
    name = {"velocity": "u", "magnetic": "B", "u": "u", "B": "B"}.get(fieldname)
    if name is None:
        raise ValueError(f"unknown field {fieldname!r}")
    dm = state.dofmap
    disc = Discretization(dm.mesh, dm.k)
    d = dm.dim
    coeffs = state.element_field(name)
    q = make_quadrature(d, 2 * dm.k + 4)
    pts = np.vstack([q.points, disc.ref.ref_vertices])
    gphi = disc.physical_gradients(disc.ref.basis.grad(pts))  # (ne, npts, nP, d)
    div = np.einsum("ecb,eqbc->eq", coeffs, gphi)
    # normal jumps: both sides in the global facet parameterization
    m = dm.mesh
    inner = np.where(~m.boundary_flags)[0]
    jump = 0.0
    if len(inner):
        fr = disc.ref.facet_rule(2 * dm.k + 2)
        vals = []
        for side in (0, 1):
            e = m.facet_elements[inner, side]
            lf = m.facet_local[inner, side]
            pat = m.facet_patterns[e, lf]
            phi = fr.phi[pat]  # (n, nqf, nP)
            vals.append(np.einsum("ncb,nqb->nqc", coeffs[e], phi))
        n = m.facet_normals[inner]
        jump = float(np.abs(np.einsum("nqc,nc->nq", vals[0] - vals[1], n)).max())
    return DivergenceReport(float(np.abs(div).max()), jump)
