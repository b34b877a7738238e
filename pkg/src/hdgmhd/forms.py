"""Element-local blocks of the HDG forms, batched over elements.

Local unknown layout per element (``d`` = dimension, ``nP = dim P_k``,
``nM = dim P_{k-1}``, ``nF = dim P_k(e)``):

=======  =====================  =========================================
field    shape                  meaning
=======  =====================  =========================================
``L``    (d*d, nM)              velocity flux, row-major tensor components
``u``    (d, nP)                velocity
``N``    (2d-3, nM)             magnetic flux (curl B scaled)
``B``    (d, nP)                magnetic field
``A``    (d, nM)                temperature flux
``T``    (1, nP)                temperature
``p``    (1, nM)                pressure
``r``    (1, nM)                magnetic pseudo-pressure
``uh``   (d+1, d, nF)           velocity trace on each local facet
``Bh``   (d+1, d, nF)           magnetic trace in the facet frame (n, t1, t2)
``Th``   (d+1, 1, nF)           temperature trace
``ph``   (d+1, 1, nF)           pressure trace
``rh``   (d+1, 1, nF)           pseudo-pressure trace
=======  =====================  =========================================

Every block is an array of shape ``(n_elements, n_row_local, n_col_local)``
following that layout flattened in C order.

Sign conventions: the flux equations are written so that for smooth data
``L = grad(u) / Ha^2``, ``N = curl(B) / Rm^2`` and ``A = grad(T) / (Pr Re)``;
the flux/primal couplings are antisymmetric.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property, lru_cache

import numpy as np

from .fem_basis import basis_size, make_basis
from .mesh import SimplicialMesh, facet_permutations
from .quadrature import make_quadrature, reference_measure

INTERIOR_FIELDS = ("L", "u", "N", "B", "A", "T", "p", "r")
TRACE_FIELDS = ("uh", "Bh", "Th", "ph", "rh")


@dataclass(frozen=True)
class PhysicalParameters:
    Ha: float = 1.0
    N: float = 1.0
    Re: float = 1.0
    Rm: float = 1.0
    Pr: float = 1.0
    Gr: float = 1.0
    g: tuple | None = None  # defaults to the last unit coordinate vector

    def __post_init__(self):
        for name in ("Ha", "N", "Re", "Rm", "Pr", "Gr"):
            if not getattr(self, name) > 0:
                raise ValueError(f"parameter {name} must be positive")

    def gravity(self, dim: int) -> np.ndarray:
        g = np.eye(dim)[-1] if self.g is None else np.asarray(self.g, dtype=float)
        if g.shape != (dim,):
            raise ValueError(f"gravity vector must have {dim} components")
        return g

    def g_mag(self, dim: int) -> float:
        return float(np.linalg.norm(self.gravity(dim)))

    @property
    def buoyancy(self) -> float:
        return self.Gr / (self.N * self.Re**2)


def field_shape(name: str, dim: int, k: int) -> tuple[int, int]:
    """(components, basis size) of a field."""
    nP, nM, nF = basis_size(dim, k), basis_size(dim, k - 1), basis_size(dim - 1, k)
    return {
        "L": (dim * dim, nM),
        "u": (dim, nP),
        "N": (2 * dim - 3, nM),
        "B": (dim, nP),
        "A": (dim, nM),
        "T": (1, nP),
        "p": (1, nM),
        "r": (1, nM),
        "uh": (dim, nF),
        "Bh": (dim, nF),
        "Th": (1, nF),
        "ph": (1, nF),
        "rh": (1, nF),
    }[name]


def local_size(name: str, dim: int, k: int) -> int:
    nc, nb = field_shape(name, dim, k)
    return nc * nb * (dim + 1 if name in TRACE_FIELDS else 1)


# ---------------------------------------------------------------------------
# 3D embedding helpers: 2D vectors live in the xy-plane, 2D "curl-space"
# scalars are z-components. Cross products and curls then share one code path.
# ---------------------------------------------------------------------------

def embed(v: np.ndarray) -> np.ndarray:
    d = v.shape[-1]
    if d == 3:
        return v
    out = np.zeros(v.shape[:-1] + (3,))
    out[..., :d] = v
    return out


def curl_axes(dim: int) -> list[int]:
    """Embedded axes that carry curl-space components."""
    return [2] if dim == 2 else [0, 1, 2]


def cross(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cross product with the 2D convention ``v x w = v1 w2 - v2 w1``."""
    d = a.shape[-1]
    c = np.cross(embed(a), embed(b))
    return c[..., curl_axes(d)]


# ---------------------------------------------------------------------------
# reference data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _Rule:
    weights: np.ndarray
    phi: np.ndarray  # (nq, nP)
    dphi: np.ndarray  # (nq, nP, d) reference gradients
    points: np.ndarray


@dataclass(frozen=True)
class _FacetRule:
    weights: np.ndarray  # sums to the reference facet measure
    lam: np.ndarray  # (nqf, d) barycentric coordinates on the facet
    psi: np.ndarray  # (nqf, nF)
    phi: np.ndarray  # (npat, nqf, nP)
    dphi: np.ndarray  # (npat, nqf, nP, d)
    points: np.ndarray  # (npat, nqf, d) reference element coordinates


class ReferenceElement:
    """Basis samples and reference integrals for (dim, k)."""

    def __init__(self, dim: int, k: int):
        if k < 1:
            raise ValueError("polynomial degree k must be >= 1")
        self.dim, self.k = dim, k
        self.basis = make_basis(dim, k)
        self.tbasis = make_basis(dim - 1, k)
        self.nP = self.basis.size
        self.nM = basis_size(dim, k - 1)
        self.nF = self.tbasis.size
        self.measure = reference_measure(dim)
        self.fmeasure = reference_measure(dim - 1)
        self.ref_vertices = np.vstack([np.zeros(dim), np.eye(dim)])
        self.patterns = facet_permutations(dim)

    def element_rule(self, order: int) -> _Rule:
        return _element_rule(self.dim, self.k, order)

    def facet_rule(self, order: int) -> _FacetRule:
        return _facet_rule(self.dim, self.k, order)

    @cached_property
    def lo(self) -> _Rule:
        return self.element_rule(2 * self.k + 2)

    @cached_property
    def hi(self) -> _Rule:
        return self.element_rule(3 * self.k + 2)

    @cached_property
    def flo(self) -> _FacetRule:
        return self.facet_rule(2 * self.k + 2)

    @cached_property
    def fhi(self) -> _FacetRule:
        return self.facet_rule(3 * self.k + 2)

    @cached_property
    def grad_chi_phi(self) -> np.ndarray:
        """int_ref d_beta chi_i phi_j, shape (d, nM, nP)."""
        r = self.lo
        return np.einsum("q,qib,qj->bij", r.weights, r.dphi[:, : self.nM], r.phi)

    @cached_property
    def grad_phi_chi(self) -> np.ndarray:
        """int_ref d_beta phi_i chi_j, shape (d, nP, nM)."""
        r = self.lo
        return np.einsum("q,qib,qj->bij", r.weights, r.dphi, r.phi[:, : self.nM])

    @cached_property
    def facet_phi_psi(self) -> np.ndarray:
        """int_ref-facet phi_i psi_j per pattern, shape (npat, nP, nF)."""
        f = self.flo
        return np.einsum("q,pqi,qj->pij", f.weights, f.phi, f.psi)

    @cached_property
    def facet_phi_phi(self) -> np.ndarray:
        f = self.flo
        return np.einsum("q,pqi,pqj->pij", f.weights, f.phi, f.phi)


@lru_cache(maxsize=None)
def _element_rule(dim, k, order) -> _Rule:
    q = make_quadrature(dim, order)
    b = make_basis(dim, k)
    return _Rule(q.weights, b.eval(q.points), b.grad(q.points), q.points)


@lru_cache(maxsize=None)
def _facet_rule(dim, k, order) -> _FacetRule:
    q = make_quadrature(dim - 1, order)
    b = make_basis(dim, k)
    tb = make_basis(dim - 1, k)
    lam = np.column_stack([1.0 - q.points.sum(axis=1), q.points])
    refv = np.vstack([np.zeros(dim), np.eye(dim)])
    pats = facet_permutations(dim)
    pts = np.stack([lam @ refv[list(p)] for p in pats])
    flat = pts.reshape(-1, dim)
    phi = b.eval(flat).reshape(len(pats), len(lam), -1)
    dphi = b.grad(flat).reshape(len(pats), len(lam), b.size, dim)
    return _FacetRule(q.weights, lam, tb.eval(q.points), phi, dphi, pts)


class Discretization:
    """Mesh, degree and per-element geometry shared by forms and assembly."""

    def __init__(self, mesh: SimplicialMesh, k: int):
        self.mesh = mesh
        self.dim = mesh.dim
        self.k = k
        self.ref = ReferenceElement(mesh.dim, k)

    @cached_property
    def absdet(self) -> np.ndarray:
        return np.abs(self.mesh.dets)

    @cached_property
    def tau(self) -> np.ndarray:
        """Stabilization tau_K = 1 / h_K."""
        return 1.0 / self.mesh.diameters

    @cached_property
    def area_scale(self) -> np.ndarray:
        """(ne, d+1) facet measure / reference facet measure."""
        return self.mesh.facet_areas / self.ref.fmeasure

    @cached_property
    def facet_frames(self) -> np.ndarray:
        """(nf, d, d): row 0 is the global facet normal, rows 1.. tangents."""
        m = self.mesh
        n = m.facet_normals
        if self.dim == 2:
            t = np.column_stack([-n[:, 1], n[:, 0]])
            return np.stack([n, t], axis=1)
        v = m.vertices[m.facets]
        t1 = v[:, 1] - v[:, 0]
        t1 -= (t1 * n).sum(1, keepdims=True) * n
        t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
        t2 = np.cross(n, t1)
        return np.stack([n, t1, t2], axis=1)

    @cached_property
    def side_frames(self) -> np.ndarray:
        """(ne, d+1, d, d) facet frames seen from each element side."""
        return self.facet_frames[self.mesh.element_facets]

    def physical_gradients(self, dphi: np.ndarray, elems=None) -> np.ndarray:
        """Map reference gradients (..., d) to physical ones per element."""
        inv = self.mesh.inv_jacobians if elems is None else self.mesh.inv_jacobians[elems]
        return np.einsum("...b,ebc->e...c", dphi, inv)

    def quadrature_points(self, rule: _Rule, elems=None) -> np.ndarray:
        x = self.mesh.map_to_physical(rule.points)
        return x if elems is None else x[elems]

    def facet_points(self, frule: _FacetRule, elems=None) -> np.ndarray:
        """Physical facet quadrature points (ne, d+1, nqf, d)."""
        m = self.mesh
        e = np.arange(m.n_elements) if elems is None else np.asarray(elems)
        ref = frule.points[m.facet_patterns[e]]  # (ne, d+1, nqf, d)
        x0 = m.vertices[m.elements[e, 0]]
        return x0[:, None, None, :] + np.einsum("eij,efqj->efqi", m.jacobians[e], ref)


@dataclass
class LocalBlocks:
    """Dense local matrices keyed by (row field, column field) plus loads."""

    blocks: dict = field(default_factory=dict)
    load: dict = field(default_factory=dict)
    source: dict = field(default_factory=dict)

    def add(self, rf: str, cf: str, values: np.ndarray, form: str) -> None:
        key = (rf, cf)
        if key in self.blocks:
            self.blocks[key] = self.blocks[key] + values
            self.source[key] = self.source[key] + "+" + form
        else:
            self.blocks[key] = values
            self.source[key] = form

    def add_load(self, rf: str, values: np.ndarray) -> None:
        self.load[rf] = self.load.get(rf, 0) + values

    def merge(self, other: "LocalBlocks") -> "LocalBlocks":
        for key, val in other.blocks.items():
            self.add(*key, val, other.source[key])
        for key, val in other.load.items():
            self.add_load(key, val)
        return self


def _elems(disc: Discretization, elements) -> np.ndarray:
    ne = disc.mesh.n_elements
    if elements is None:
        return np.arange(ne)
    e = np.atleast_1d(np.asarray(elements, dtype=np.int64))
    if e.size and (e.min() < 0 or e.max() >= ne):
        raise ValueError("element id out of range")
    return e


def _kron_eye(block: np.ndarray, n: int) -> np.ndarray:
    """(ne, r, c) -> (ne, n*r, n*c) block-diagonal copies (component-major)."""
    ne, r, c = block.shape
    out = np.zeros((ne, n, r, n, c))
    for a in range(n):
        out[:, a, :, a, :] = block
    return out.reshape(ne, n * r, n * c)


def _facet_diag(block: np.ndarray, ncomp: int) -> np.ndarray:
    """(ne, d+1, nF, nF) per-facet blocks -> trace/trace local matrix."""
    ne, nf, r, c = block.shape
    out = np.zeros((ne, nf, ncomp, r, nf, ncomp, c))
    for f in range(nf):
        for a in range(ncomp):
            out[:, f, a, :, f, a, :] = block[:, f]
    return out.reshape(ne, nf * ncomp * r, nf * ncomp * c)


def _interior_to_trace(block: np.ndarray, ncomp: int) -> np.ndarray:
    """(ne, d+1, nI, nF) -> (ne, ncomp*nI, (d+1)*ncomp*nF), component-diagonal."""
    ne, nf, r, c = block.shape
    out = np.zeros((ne, ncomp, r, nf, ncomp, c))
    for a in range(ncomp):
        out[:, a, :, :, a, :] = np.transpose(block, (0, 2, 1, 3))
    return out.reshape(ne, ncomp * r, nf * ncomp * c)


def _T(block: np.ndarray) -> np.ndarray:
    return np.transpose(block, (0, 2, 1))


# ---------------------------------------------------------------------------
# local forms
# ---------------------------------------------------------------------------

_FLUX = {"velocity": ("L", "u", "uh"), "magnetic": ("N", "B", "Bh"), "thermal": ("A", "T", "Th")}


def flux_mass_coefficient(fieldname: str, params: PhysicalParameters) -> float:
    return {
        "velocity": params.Ha**2,
        "magnetic": params.Rm**2,
        "thermal": params.Pr * params.Re,
    }[fieldname]


def local_mixed_flux_block(fieldname: str, disc: Discretization, params: PhysicalParameters,
                           elements=None) -> LocalBlocks:
    """Flux mass block and the antisymmetric flux/primal couplings.

    velocity:  Ha^2 (L, J) + (u, div J) - <uh, J n>      (rows J)
               -(v, div L) + <vh, L n>                    (rows v, vh)
    magnetic:  Rm^2 (N, I) - (B, curl I) - <Bh, I x n>   (rows I)
               (w, curl N) + <wh, N x n>                  (rows w, wh)
    thermal:   as velocity with Pr*Re and a scalar primal.
    """
    if fieldname not in _FLUX:
        raise ValueError(f"unknown field group {fieldname!r}")
    e = _elems(disc, elements)
    ref, d = disc.ref, disc.dim
    nM, nP = ref.nM, ref.nP
    det = disc.absdet[e]
    inv = disc.mesh.inv_jacobians[e]
    pats = disc.mesh.facet_patterns[e]
    scale = disc.area_scale[e]
    normals = disc.mesh.normals[e]
    ne = len(e)
    flux, prim, trace = _FLUX[fieldname]
    coef = flux_mass_coefficient(fieldname, params)
    out = LocalBlocks()

    # (d_b chi_i, phi_j)_K for every physical direction b: (ne, d, nM, nP)
    G = det[:, None, None, None] * np.einsum("ebc,bij->ecij", inv, ref.grad_chi_phi)
    # <chi_i, psi_j>_f : (ne, d+1, nM, nF)
    Fcp = scale[:, :, None, None] * ref.facet_phi_psi[pats][:, :, :nM, :]

    if fieldname in ("velocity", "thermal"):
        nc = d if fieldname == "velocity" else 1
        nflux = nc * d
        mass = coef * det[:, None, None] * np.eye(nM)[None]
        out.add(flux, flux, _kron_eye(mass, nflux), "flux-mass")
        # rows (a, b, i), cols (c, j)
        A = np.zeros((ne, nc, d, nM, nc, nP))
        for a in range(nc):
            A[:, a, :, :, a, :] = G
        A = A.reshape(ne, nflux * nM, nc * nP)
        Ah = np.zeros((ne, nc, d, nM, d + 1, nc, ref.nF))
        for a in range(nc):
            Ah[:, a, :, :, :, a, :] = -np.einsum("efb,efij->ebifj", normals, Fcp)
        Ah = Ah.reshape(ne, nflux * nM, (d + 1) * nc * ref.nF)
        out.add(flux, prim, A, "a1h" if nc == d else "a3h")
        out.add(flux, trace, Ah, "a1h" if nc == d else "a3h")
        out.add(prim, flux, -_T(A), "a1h" if nc == d else "a3h")
        out.add(trace, flux, -_T(Ah), "a1h" if nc == d else "a3h")
        return out

    # magnetic: curl(chi e_s) = grad(chi) x e_s ; (chi e_s) x n = -chi (n x e_s)
    ns = 2 * d - 3
    axes = curl_axes(d)
    E3 = np.eye(3)
    mass = coef * det[:, None, None] * np.eye(nM)[None]
    out.add(flux, flux, _kron_eye(mass, ns), "flux-mass")
    # X[b, s, c] = (e_b x e_s)_c  (b, c in-plane for 2D)
    X = np.array([[np.cross(E3[b], E3[s])[:d] for s in axes] for b in range(d)])
    A2 = np.einsum("bsc,ebij->esicj", X, G).reshape(ne, ns * nM, d * nP)
    # <Bh, I x n> with Bh = psi_j t_m: t_m . (e_s x n) <chi_i, psi_j>
    frames = disc.side_frames[e]  # (ne, d+1, m, d)
    es = E3[axes]  # (ns, 3)
    exn = np.cross(es[None, None, :, :], embed(normals)[:, :, None, :])  # (ne, d+1, ns, 3)
    coeff = np.einsum("efmc,efsc->efsm", embed(frames), exn)
    A2h = np.einsum("efsm,efij->esifmj", coeff, Fcp).reshape(ne, ns * nM, (d + 1) * d * ref.nF)
    out.add(flux, prim, -A2, "a2h")
    out.add(flux, trace, -A2h, "a2h")
    out.add(prim, flux, _T(A2), "a2h")
    out.add(trace, flux, _T(A2h), "a2h")
    return out


def local_stabilization_block(fieldname: str, disc: Discretization,
                              params: PhysicalParameters | None = None,
                              elements=None) -> LocalBlocks:
    """tau-weighted jump penalties s1h, s2h (tangential only) and s3h."""
    params = params or PhysicalParameters()
    e = _elems(disc, elements)
    ref, d = disc.ref, disc.dim
    nP, nF = ref.nP, ref.nF
    ne = len(e)
    pats = disc.mesh.facet_patterns[e]
    scale = disc.area_scale[e] * disc.tau[e][:, None]  # tau |f| / |f_ref|
    Fpp = scale[:, :, None, None] * ref.facet_phi_phi[pats]  # (ne, d+1, nP, nP)
    Fpq = scale[:, :, None, None] * ref.facet_phi_psi[pats]  # (ne, d+1, nP, nF)
    Fqq = scale[:, :, None, None] * np.eye(nF)[None, None]
    out = LocalBlocks()
    if fieldname in ("velocity", "thermal"):
        nc, prim, trace, form = (d, "u", "uh", "s1h") if fieldname == "velocity" else (1, "T", "Th", "s3h")
        c = 1.0 / params.Ha**2 if fieldname == "velocity" else 1.0 / (params.Pr * params.Re)
        out.add(prim, prim, c * _kron_eye(Fpp.sum(axis=1), nc), form)
        ph = c * _interior_to_trace(Fpq, nc)
        out.add(prim, trace, -ph, form)
        out.add(trace, prim, -_T(ph), form)
        out.add(trace, trace, c * _facet_diag(Fqq, nc), form)
        return out
    if fieldname != "magnetic":
        raise ValueError(f"unknown field group {fieldname!r}")
    n = disc.mesh.normals[e]
    Pt = np.eye(d)[None, None] - n[..., :, None] * n[..., None, :]  # (ne, d+1, d, d)
    frames = disc.side_frames[e]  # (ne, d+1, m, d)
    Ptm = np.einsum("efcd,efmd->efcm", Pt, frames)  # P_t t_m (component c)
    BB = np.einsum("efcd,efij->ecidj", Pt, Fpp).reshape(ne, d * nP, d * nP)
    BBh = np.einsum("efcm,efij->ecifmj", Ptm, Fpq).reshape(ne, d * nP, (d + 1) * d * nF)
    mm = np.einsum("efmc,efcl->efml", frames, Ptm)  # t_m . P_t t_l
    BhBh = np.zeros((ne, d + 1, d, nF, d + 1, d, nF))
    for f in range(d + 1):
        BhBh[:, f, :, :, f, :, :] = np.einsum("eml,eij->emilj", mm[:, f], Fqq[:, f])
    BhBh = BhBh.reshape(ne, (d + 1) * d * nF, (d + 1) * d * nF)
    out.add("B", "B", BB, "s2h")
    out.add("B", "Bh", -BBh, "s2h")
    out.add("Bh", "B", -_T(BBh), "s2h")
    out.add("Bh", "Bh", BhBh, "s2h")
    return out


def local_constraint_block(kind: str, disc: Discretization, params: PhysicalParameters,
                           elements=None) -> LocalBlocks:
    """b1h (pressure) or b2h (pseudo-pressure) and its negative transpose.

    b(V, Q) = -(div v, q) + <v.n, qh>, scaled by 1/Rm for the pseudo-pressure.
    Rows of the primal field receive +b(V, .); multiplier rows receive -b(., Q).
    """
    if kind == "pressure":
        prim, mult, trace, c, form = "u", "p", "ph", 1.0, "b1h"
    elif kind == "pseudo_pressure":
        prim, mult, trace, c, form = "B", "r", "rh", 1.0 / params.Rm, "b2h"
    else:
        raise ValueError(f"unknown constraint kind {kind!r}")
    e = _elems(disc, elements)
    ref, d = disc.ref, disc.dim
    nP, nM, nF = ref.nP, ref.nM, ref.nF
    ne = len(e)
    det = disc.absdet[e]
    inv = disc.mesh.inv_jacobians[e]
    pats = disc.mesh.facet_patterns[e]
    scale = disc.area_scale[e]
    n = disc.mesh.normals[e]
    # (d_c phi_i, chi_j)_K : (ne, d, nP, nM)
    D = det[:, None, None, None] * np.einsum("ebc,bij->ecij", inv, ref.grad_phi_chi)
    Fpq = scale[:, :, None, None] * ref.facet_phi_psi[pats]
    Bq = -c * D.reshape(ne, d * nP, nM)
    Bqh = c * np.einsum("efc,efij->ecifj", n, Fpq).reshape(ne, d * nP, (d + 1) * nF)
    out = LocalBlocks()
    out.add(prim, mult, Bq, form)
    out.add(prim, trace, Bqh, form)
    out.add(mult, prim, -_T(Bq), form)
    out.add(trace, prim, -_T(Bqh), form)
    return out


def local_buoyancy_block(disc: Discretization, params: PhysicalParameters,
                         elements=None) -> LocalBlocks:
    """G3h: (Gr / (N Re^2)) (g/|g| T, v) in the momentum rows."""
    e = _elems(disc, elements)
    d, nP = disc.dim, disc.ref.nP
    g = params.gravity(d)
    g = g / np.linalg.norm(g)
    det = disc.absdet[e]
    blk = np.einsum("c,e,ij->ecij", g, params.buoyancy * det, np.eye(nP))
    out = LocalBlocks()
    out.add("u", "T", blk.reshape(len(e), d * nP, nP), "G3h")
    return out


# -- convection ----------------------------------------------------------------

def _interior_values(coeffs: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """(ne, nc, nb) coefficients, (nq, nb) samples -> (ne, nq, nc)."""
    return np.einsum("ecb,qb->eqc", coeffs, phi[:, : coeffs.shape[2]])


def _skew_convection(disc, e, beta_q, beta_hat_n, rule, frule, factor):
    """Scalar skew form factor*[-(phi_j, b.grad phi_i) + (phi_i, b.grad phi_j)]
    and its facet parts factor*<(bh.n) psi_j, phi_i>, -factor*<(bh.n) psi_i, phi_j>."""
    det = disc.absdet[e]
    gphi = disc.physical_gradients(rule.dphi, e)  # (ne, nq, nP, d)
    bg = np.einsum("eqc,eqic->eqi", beta_q, gphi)  # beta . grad phi_i
    W = rule.weights[None, :] * det[:, None]
    M = np.einsum("eq,eqi,qj->eij", W, bg, rule.phi)  # (b.grad phi_i, phi_j)
    C = -factor * M + factor * _T(M)
    pats = disc.mesh.facet_patterns[e]
    fphi = frule.phi[pats]  # (ne, d+1, nqf, nP)
    w = frule.weights[None, None, :] * disc.area_scale[e][:, :, None] * beta_hat_n
    Fh = factor * np.einsum("efq,efqi,qj->efij", w, fphi, frule.psi)  # <(bh.n) psi_j, phi_i>
    return C, Fh


def previous_iterate_samples(disc: Discretization, prev, elements=None) -> dict:
    """Values of the advecting fields at the convection quadrature points."""
    e = _elems(disc, elements)
    ref = disc.ref
    rule, frule = ref.hi, ref.fhi
    pats = disc.mesh.facet_patterns[e]
    u = prev.element_field("u")[e]  # (ne, d, nP)
    B = prev.element_field("B")[e]
    uh = prev.side_field("uh")[e]  # (ne, d+1, d, nF)
    fphi = frule.phi[pats]
    gphi = disc.physical_gradients(rule.dphi, e)
    return {
        "u_q": _interior_values(u, rule.phi),
        "B_q": _interior_values(B, rule.phi),
        "gradB_q": np.einsum("ecb,eqbd->eqcd", B, gphi),  # d_d B_c
        "gradu_q": np.einsum("ecb,eqbd->eqcd", u, gphi),
        "uh_f": np.einsum("efcb,qb->efqc", uh, frule.psi),
        "u_f": np.einsum("ecb,efqb->efqc", u, fphi),
        "B_f": np.einsum("ecb,efqb->efqc", B, fphi),
    }


def local_convection_blocks(disc: Discretization, params: PhysicalParameters, prev,
                            elements=None, samples: dict | None = None) -> LocalBlocks:
    """Oseen-linearized c1h, c2h (momentum and induction) and c3h blocks.

    ``prev`` is the previous iterate (anything exposing ``element_field`` and
    ``side_field``); convection uses its velocity/trace and magnetic field.
    """
    e = _elems(disc, elements)
    ref, d = disc.ref, disc.dim
    nP, nF = ref.nP, ref.nF
    ne = len(e)
    rule, frule = ref.hi, ref.fhi
    s = samples if samples is not None else previous_iterate_samples(disc, prev, e)
    n = disc.mesh.normals[e]
    out = LocalBlocks()

    # c1h / c3h share the scalar skew matrix
    bhn = np.einsum("efqc,efc->efq", s["uh_f"], n)
    C, Fh = _skew_convection(disc, e, s["u_q"], bhn, rule, frule, 1.0)
    facet_in = Fh  # (ne, d+1, nP, nF): rows phi_i, cols psi_j
    for prim, trace, nc, fac, form in (("u", "uh", d, 0.5 / params.N, "c1h"), ("T", "Th", 1, 0.5, "c3h")):
        out.add(prim, prim, fac * _kron_eye(C, nc), form)
        blk = fac * _interior_to_trace(facet_in, nc)
        out.add(prim, trace, blk, form)
        out.add(trace, prim, -_T(blk), form)

    # c2h(V; B0, B) in momentum: (1/Rm)[(B, curl(v x B0)) - <Bh x n, v x B0>]
    det = disc.absdet[e]
    W = rule.weights[None, :] * det[:, None]
    gphi = disc.physical_gradients(rule.dphi, e)  # (ne, nq, nP, d)
    E = np.eye(d)
    B0 = embed(s["B_q"])  # (ne, nq, 3)
    gB0 = s["gradB_q"]  # (ne, nq, d, d)   [c, dir]
    divB0 = np.trace(gB0, axis1=2, axis2=3)
    ecB = np.cross(embed(E)[None, None, :, :], B0[:, :, None, :])  # e_c x B0: (ne, nq, d, 3)
    # curl(e_c x B0) = e_c div B0 - d_c B0
    curl_ecB = embed(E)[None, None] * divB0[..., None, None] - embed(np.swapaxes(gB0, 2, 3))
    # curl(phi_i (e_c x B0)) = grad phi_i x (e_c x B0) + phi_i curl(e_c x B0)
    curlF = np.cross(embed(gphi)[:, :, :, None, :], ecB[:, :, None, :, :]) \
        + rule.phi[None, :, :, None, None] * curl_ecB[:, :, None, :, :]  # (ne,nq,nP,d,3)
    mom = np.einsum("eq,eqicx,qj->ecixj", W, curlF[..., :d], rule.phi) / params.Rm
    out.add("u", "B", mom.reshape(ne, d * nP, d * nP), "c2h")

    pats = disc.mesh.facet_patterns[e]
    fphi = frule.phi[pats]  # (ne, d+1, nqf, nP)
    wf = frule.weights[None, None, :] * disc.area_scale[e][:, :, None]
    frames = embed(disc.side_frames[e])  # (ne, d+1, m, 3)
    txn = np.cross(frames, embed(n)[:, :, None, :])  # (ne, d+1, m, 3)
    ecBf = np.cross(embed(E)[None, None, None], embed(s["B_f"])[:, :, :, None, :])  # (ne,d+1,nqf,c,3)
    tdot = np.einsum("efmx,efqcx->efqmc", txn, ecBf)
    momh = -np.einsum("efq,efqmc,efqi,qj->ecifmj", wf, tdot, fphi, frule.psi) / params.Rm
    out.add("u", "Bh", momh.reshape(ne, d * nP, (d + 1) * d * nF), "c2h")

    # -c2h(U0; B, W) in induction: -(1/Rm)[(w, curl(u0 x B)) - <wh x n, u0 x B>]
    u0 = embed(s["u_q"])
    gu0 = s["gradu_q"]
    divu0 = np.trace(gu0, axis1=2, axis2=3)
    u0xe = np.cross(u0[:, :, None, :], embed(E)[None, None])  # (ne,nq,e,3)
    # curl(u0 x e_e) = d_e u0 - e_e div u0
    curl_u0e = embed(np.swapaxes(gu0, 2, 3)) - embed(E)[None, None] * divu0[..., None, None]
    H = np.cross(embed(gphi)[:, :, :, None, :], u0xe[:, :, None, :, :]) \
        + rule.phi[None, :, :, None, None] * curl_u0e[:, :, None, :, :]  # (ne,nq,nP(j),e,3)
    ind = -np.einsum("eq,qi,eqjyx->exiyj", W, rule.phi, H[..., :d]) / params.Rm
    out.add("B", "B", ind.reshape(ne, d * nP, d * nP), "c2h")
    u0xef = np.cross(embed(s["u_f"])[:, :, :, None, :], embed(E)[None, None, None])  # (ne,d+1,nqf,e,3)
    tdot2 = np.einsum("efmx,efqcx->efqmc", txn, u0xef)
    indh = np.einsum("efq,efqmc,qi,efqj->efmicj", wf, tdot2, frule.psi, fphi) / params.Rm
    out.add("Bh", "B", indh.reshape(ne, (d + 1) * d * nF, d * nP), "c2h")
    return out


def local_load(disc: Discretization, params: PhysicalParameters, f1=None, f2=None, f3=None,
               elements=None) -> LocalBlocks:
    """(f1, v), (1/Rm)(f2, w), (f3, z) with f callables on (..., d) points."""
    e = _elems(disc, elements)
    rule = disc.ref.hi
    x = disc.quadrature_points(rule)[e]  # (ne, nq, d)
    W = rule.weights[None, :] * disc.absdet[e][:, None]
    out = LocalBlocks()
    ne, nP = len(e), disc.ref.nP
    for name, fn, c, nc in (("u", f1, 1.0, disc.dim), ("B", f2, 1.0 / params.Rm, disc.dim), ("T", f3, 1.0, 1)):
        if fn is None:
            out.add_load(name, np.zeros((ne, nc * nP)))
            continue
        vals = np.asarray(fn(x), dtype=float).reshape(ne, -1, nc)
        out.add_load(name, c * np.einsum("eq,eqc,qi->eci", W, vals, rule.phi).reshape(ne, nc * nP))
    return out
