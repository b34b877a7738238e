"""Manufactured solutions, analytic forcing, error norms and order studies."""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from itertools import combinations_with_replacement
from typing import Sequence

import numpy as np
from numpy.polynomial import Polynomial

from .assembly_solver import (
    BoundaryData,
    OseenAssembler,
    StateVector,
    max_divergence,
    oseen_iterate,
)
from .exceptions import NonConvergenceError
from .forms import Discretization, PhysicalParameters
from .mesh import build_unit_cube_mesh, build_unit_square_mesh
from .quadrature import make_quadrature

# ---------------------------------------------------------------------------
# closed-form fields as sums of separable products
# ---------------------------------------------------------------------------


class Factor:
    """A 1D function with its first two derivatives."""

    def __init__(self, f, d1, d2):
        self.f, self.d1, self.d2 = f, d1, d2

    @classmethod
    def poly(cls, coeffs) -> "Factor":
        p = Polynomial(coeffs)
        return cls(p, p.deriv(1), p.deriv(2))

    def derivative(self, order: int):
        return (self.f, self.d1, self.d2)[order]


def _sin2(a):
    return Factor(lambda t: np.sin(a * t) ** 2, lambda t: a * np.sin(2 * a * t),
                  lambda t: 2 * a * a * np.cos(2 * a * t))


def _sincos(a):
    # sin(at) cos(at) = sin(2at) / 2
    return Factor(lambda t: 0.5 * np.sin(2 * a * t), lambda t: a * np.cos(2 * a * t),
                  lambda t: -2 * a * a * np.sin(2 * a * t))


def _sin(a):
    return Factor(lambda t: np.sin(a * t), lambda t: a * np.cos(a * t), lambda t: -a * a * np.sin(a * t))


def _cos(a):
    return Factor(lambda t: np.cos(a * t), lambda t: -a * np.sin(a * t), lambda t: -a * a * np.cos(a * t))


@dataclass
class ScalarField:
    dim: int
    terms: list = field(default_factory=list)  # (coef, tuple of Factor)

    def __add__(self, other: "ScalarField") -> "ScalarField":
        return ScalarField(self.dim, self.terms + other.terms)

    def _eval(self, x, orders) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1])
        for coef, facs in self.terms:
            v = coef
            for a, fac in enumerate(facs):
                v = v * fac.derivative(orders[a])(x[..., a])
            out = out + v
        return out

    def __call__(self, x) -> np.ndarray:
        return self._eval(x, (0,) * self.dim)

    def grad(self, x) -> np.ndarray:
        return np.stack([self._eval(x, tuple(int(a == b) for b in range(self.dim)))
                         for a in range(self.dim)], axis=-1)

    def hess(self, x) -> np.ndarray:
        d = self.dim
        rows = []
        for a in range(d):
            row = []
            for b in range(d):
                o = [0] * d
                o[a] += 1
                o[b] += 1
                row.append(self._eval(x, tuple(o)))
            rows.append(np.stack(row, axis=-1))
        return np.stack(rows, axis=-2)

    def laplacian(self, x) -> np.ndarray:
        return np.trace(self.hess(x), axis1=-2, axis2=-1)


@dataclass
class VectorField:
    comps: list  # of ScalarField

    @property
    def dim(self) -> int:
        return len(self.comps)

    def __call__(self, x) -> np.ndarray:
        return np.stack([c(x) for c in self.comps], axis=-1)

    def jacobian(self, x) -> np.ndarray:
        """J[..., i, j] = d_j v_i."""
        return np.stack([c.grad(x) for c in self.comps], axis=-2)

    def div(self, x) -> np.ndarray:
        return np.trace(self.jacobian(x), axis1=-2, axis2=-1)

    def laplacian(self, x) -> np.ndarray:
        return np.stack([c.laplacian(x) for c in self.comps], axis=-1)

    def grad_div(self, x) -> np.ndarray:
        """grad(div v)."""
        H = np.stack([c.hess(x) for c in self.comps], axis=-3)  # [..., i, a, b] = d_a d_b v_i
        return np.einsum("...iia->...a", H)

    def curl(self, x) -> np.ndarray:
        """Curl with 2d-3 components (scalar curl in 2D)."""
        J = self.jacobian(x)
        if self.dim == 2:
            return (J[..., 1, 0] - J[..., 0, 1])[..., None]
        return np.stack([J[..., 2, 1] - J[..., 1, 2], J[..., 0, 2] - J[..., 2, 0],
                         J[..., 1, 0] - J[..., 0, 1]], axis=-1)


def _monomial(dim, exps, coef=1.0) -> ScalarField:
    facs = tuple(Factor.poly([0.0] * e + [1.0]) for e in exps)
    return ScalarField(dim, [(coef, facs)])


def _poly_field(dim, coeffs: dict) -> ScalarField:
    out = ScalarField(dim)
    for exps, c in coeffs.items():
        if c != 0.0:
            out = out + _monomial(dim, exps, c)
    return out


def _exponents(dim, degree):
    out = []
    for total in range(degree + 1):
        for combo in combinations_with_replacement(range(dim), total):
            out.append(tuple(combo.count(a) for a in range(dim)))
    return out


def _poly_derivative(coeffs: dict, axis: int) -> dict:
    out = {}
    for exps, c in coeffs.items():
        if exps[axis] > 0:
            e = list(exps)
            e[axis] -= 1
            out[tuple(e)] = out.get(tuple(e), 0.0) + c * exps[axis]
    return out


# ---------------------------------------------------------------------------
# manufactured cases
# ---------------------------------------------------------------------------


@dataclass
class ManufacturedCase:
    name: str
    dim: int
    u: VectorField
    B: VectorField
    T: ScalarField
    p: ScalarField
    r: ScalarField
    params: PhysicalParameters = field(default_factory=PhysicalParameters)

    def forcing(self, params: PhysicalParameters | None = None) -> "Forcing":
        return Forcing(self, params or self.params)

    def boundary_data(self) -> BoundaryData:
        """Exact traces for non-homogeneous problems (the patch test)."""
        return BoundaryData(u=self.u, B=self.B, T=self.T, r=self.r, p_mean=integrate(self.p, self.dim))


class Forcing:
    """f1, f2, f3 obtained by applying the strong operators to the exact fields.

    f1 = -(1/Ha^2) lap u + (1/N)(grad u) u + grad p - (1/Rm) curl(B) x B + Gr/(N Re^2) T g
    f2 = (1/Rm) curl curl B - curl(u x B) + grad r
    f3 = -(1/(Pr Re)) lap T + u . grad T
    """

    def __init__(self, case: ManufacturedCase, params: PhysicalParameters):
        self.case, self.params = case, params

    def f1(self, x):
        c, P = self.case, self.params
        u, B = c.u(x), c.B(x)
        Ju, JB = c.u.jacobian(x), c.B.jacobian(x)
        g = P.gravity(c.dim)
        g = g / np.linalg.norm(g)
        lorentz = np.einsum("...ij,...j->...i", JB, B) - np.einsum("...ji,...j->...i", JB, B)
        return (-c.u.laplacian(x) / P.Ha**2 + np.einsum("...ij,...j->...i", Ju, u) / P.N
                + c.p.grad(x) - lorentz / P.Rm + P.buoyancy * c.T(x)[..., None] * g)

    def f2(self, x):
        c, P = self.case, self.params
        u, B = c.u(x), c.B(x)
        Ju, JB = c.u.jacobian(x), c.B.jacobian(x)
        curlcurl = c.B.grad_div(x) - c.B.laplacian(x)
        curl_uxB = (u * c.B.div(x)[..., None] - B * c.u.div(x)[..., None]
                    + np.einsum("...ij,...j->...i", Ju, B) - np.einsum("...ij,...j->...i", JB, u))
        return curlcurl / P.Rm - curl_uxB + c.r.grad(x)

    def f3(self, x):
        c, P = self.case, self.params
        return -c.T.laplacian(x) / (P.Pr * P.Re) + np.einsum("...i,...i->...", c.u(x), c.T.grad(x))

    def __iter__(self):
        return iter((self.f1, self.f2, self.f3))


def integrate(f, dim: int, order: int = 12) -> float:
    """Integral over the unit square/cube (product of reference simplices)."""
    mesh = build_unit_square_mesh(1) if dim == 2 else build_unit_cube_mesh(1)
    q = make_quadrature(dim, order)
    x = mesh.map_to_physical(q.points)
    return float(np.sum(np.abs(mesh.dets)[:, None] * q.weights[None] * f(x)))


def make_case(example, params: PhysicalParameters | None = None) -> ManufacturedCase:
    """Example 1 (unit square) or 2 (unit cube); all parameters default to 1."""
    params = params or PhysicalParameters()
    P = Factor.poly
    if example in (1, "1"):
        X2 = P([0, 0, 1, -2, 1])  # x^2 (x-1)^2
        X3 = P([0, 1, -3, 2])  # x (x-1) (2x-1)
        u1 = ScalarField(2, [(-1.0, (X2, X3))])
        u2 = ScalarField(2, [(1.0, (X3, X2))])
        H = P([0, 0.5, -1.5, 1])  # t (t-1) (t-1/2)
        p = ScalarField(2, [(1.0, (H, H))])
        Q = P([0, -1, 1])
        T = ScalarField(2, [(1.0, (Q, Q))])
        u = VectorField([u1, u2])
        return ManufacturedCase("example1", 2, u, VectorField([u1, u2]), T, p, p, params)
    if example in (2, "2"):
        a = np.pi
        u1 = ScalarField(3, [(-a / 20, (_sin2(a), _sincos(a), _sincos(a)))])
        u2 = ScalarField(3, [(a / 10, (_sincos(a), _sin2(a), _sincos(a)))])
        u3 = ScalarField(3, [(-a / 20, (_sincos(a), _sincos(a), _sin2(a)))])
        u = VectorField([u1, u2, u3])
        p = ScalarField(3, [(0.1, (_cos(a), _cos(a), _cos(a)))])
        r = ScalarField(3, [(0.1, (_sin(a), _sin(a), _sin(a)))])
        T = u1 + u2 + u3
        return ManufacturedCase("example2", 3, u, VectorField([u1, u2, u3]), T, p, r, params)
    raise ValueError(f"unknown example {example!r}; expected 1 or 2")


def make_patch_case(dim: int, k: int, seed: int = 0, amplitude: float = 0.1,
                    params: PhysicalParameters | None = None) -> ManufacturedCase:
    """Random polynomial data that lies in the discrete spaces.

    u and B are divergence-free members of [P_k]^d (curls of random stream
    functions or vector potentials of degree k+1); T is in P_k; p and r in P_{k-1}.
    ``amplitude`` scales u and B; small values keep the Oseen map contractive.
    """
    rng = np.random.default_rng(seed)

    def rand_poly(deg, scale=1.0):
        return {e: scale * float(rng.uniform(-1, 1)) for e in _exponents(dim, deg)}

    def solenoidal():
        if dim == 2:
            psi = rand_poly(k + 1, amplitude)
            return VectorField([_poly_field(2, _poly_derivative(psi, 1)),
                                _poly_field(2, {e: -c for e, c in _poly_derivative(psi, 0).items()})])
        A = [rand_poly(k + 1, amplitude) for _ in range(3)]

        def sub(a, b):
            out = dict(a)
            for e, c in b.items():
                out[e] = out.get(e, 0.0) - c
            return out

        d = _poly_derivative
        return VectorField([_poly_field(3, sub(d(A[2], 1), d(A[1], 2))),
                            _poly_field(3, sub(d(A[0], 2), d(A[2], 0))),
                            _poly_field(3, sub(d(A[1], 0), d(A[0], 1)))])

    u, B = solenoidal(), solenoidal()
    T = _poly_field(dim, rand_poly(k))
    p = _poly_field(dim, rand_poly(k - 1))
    r = _poly_field(dim, rand_poly(k - 1))
    return ManufacturedCase(f"patch{dim}d_k{k}", dim, u, B, T, p, r, params or PhysicalParameters())


def interpolate_case(case: ManufacturedCase, dofmap, params: PhysicalParameters | None = None) -> StateVector:
    """Element and facet L2 projections of the exact fields and fluxes.

    For patch data this is the exact discrete solution. The normal component
    of the magnetic trace is left at zero.
    """
    params = params or case.params
    disc = Discretization(dofmap.mesh, dofmap.k)
    d, k = dofmap.dim, dofmap.k
    q = make_quadrature(d, 2 * k + 6)
    phi = disc.ref.basis.eval(q.points)
    x = disc.quadrature_points(q)
    W = q.weights
    state = StateVector(dofmap)

    def put(name, vals):
        vals = vals.reshape(vals.shape[0], vals.shape[1], -1)  # (ne, nq, nc)
        nb = dofmap.block[name] // vals.shape[2]
        c = np.einsum("q,eqc,qb->ecb", W, vals, phi[:, :nb])
        state.values[dofmap.field_slice(name)] = c.ravel()

    Ha2, Rm2, PrRe = params.Ha**2, params.Rm**2, params.Pr * params.Re
    put("L", case.u.jacobian(x) / Ha2)
    put("u", case.u(x))
    put("N", case.B.curl(x) / Rm2)
    put("B", case.B(x))
    put("A", case.T.grad(x) / PrRe)
    put("T", case.T(x))
    put("p", case.p(x))
    put("r", case.r(x))
    m = dofmap.mesh
    allf = np.arange(m.n_facets)
    from .assembly_solver import _project_facets

    for name, fn in (("uh", case.u), ("Th", case.T), ("ph", case.p), ("rh", case.r)):
        state.values[dofmap.field_slice(name)] = _project_facets(disc, allf, fn).ravel()
    frames = disc.facet_frames

    def framed(pts):
        return np.einsum("nqc,nmc->nqm", case.B(pts), frames)

    c = _project_facets(disc, allf, framed)
    c[:, 0, :] = 0.0
    state.values[dofmap.field_slice("Bh")] = c.ravel()
    return state


# ---------------------------------------------------------------------------
# errors
# ---------------------------------------------------------------------------


@dataclass
class ErrorReport:
    u: float
    grad_u: float
    L: float
    B: float
    curl_B: float
    N: float
    T: float
    grad_T: float
    A: float
    p: float
    r: float
    div_u: float
    div_B: float
    absolute: tuple = ()  # norms reported as absolute because the exact norm vanished

    NORMS = ("u", "grad_u", "L", "B", "curl_B", "N", "T", "grad_T", "A", "p", "r")

    def as_dict(self) -> dict:
        d = asdict(self)
        d["absolute"] = ";".join(self.absolute)
        return d


def _interior_values(disc: Discretization, coeffs: np.ndarray, phi: np.ndarray) -> np.ndarray:
    return np.einsum("ecb,qb->eqc", coeffs, phi[:, : coeffs.shape[2]])


def compute_error_report(state: StateVector, case: ManufacturedCase,
                         params: PhysicalParameters | None = None) -> ErrorReport:
    """Relative errors against the exact fields with quadrature of order 2k+4.

    The pseudo-pressure error is taken modulo constants,
    ||(r - mean r) - (r_h - mean r_h)||, relative to ||r||.
    """
    params = params or case.params
    dm = state.dofmap
    disc = Discretization(dm.mesh, dm.k)
    d = dm.dim
    q = make_quadrature(d, 2 * dm.k + 4)
    phi = disc.ref.basis.eval(q.points)
    gphi = disc.physical_gradients(disc.ref.basis.grad(q.points))  # (ne, nq, nP, d)
    x = disc.quadrature_points(q)
    W = q.weights[None, :] * disc.absdet[:, None]
    vol = W.sum()

    def l2(v):
        v = v.reshape(v.shape[0], v.shape[1], -1)
        return float(np.sqrt(np.sum(W[..., None] * v**2)))

    def mean(v):
        return float(np.sum(W * v) / vol)

    uc, Bc, Tc = state.element_field("u"), state.element_field("B"), state.element_field("T")
    gu_h = np.einsum("ecb,eqbd->eqcd", uc, gphi)
    gB_h = np.einsum("ecb,eqbd->eqcd", Bc, gphi)
    gT_h = np.einsum("ecb,eqbd->eqcd", Tc, gphi)[:, :, 0]
    if d == 2:
        curlB_h = (gB_h[..., 1, 0] - gB_h[..., 0, 1])[..., None]
    else:
        curlB_h = np.stack([gB_h[..., 2, 1] - gB_h[..., 1, 2], gB_h[..., 0, 2] - gB_h[..., 2, 0],
                            gB_h[..., 1, 0] - gB_h[..., 0, 1]], axis=-1)

    Ha2, Rm2, PrRe = params.Ha**2, params.Rm**2, params.Pr * params.Re
    exact = {
        "u": case.u(x), "grad_u": case.u.jacobian(x), "L": case.u.jacobian(x) / Ha2,
        "B": case.B(x), "curl_B": case.B.curl(x), "N": case.B.curl(x) / Rm2,
        "T": case.T(x), "grad_T": case.T.grad(x), "A": case.T.grad(x) / PrRe,
        "p": case.p(x),
    }
    approx = {
        "u": _interior_values(disc, uc, phi), "grad_u": gu_h,
        "L": _interior_values(disc, state.element_field("L"), phi).reshape(gu_h.shape),
        "B": _interior_values(disc, Bc, phi), "curl_B": curlB_h,
        "N": _interior_values(disc, state.element_field("N"), phi),
        "T": _interior_values(disc, Tc, phi)[..., 0], "grad_T": gT_h,
        "A": _interior_values(disc, state.element_field("A"), phi),
        "p": _interior_values(disc, state.element_field("p"), phi)[..., 0],
    }
    out, absolute = {}, []
    for name in exact:
        err, ref = l2(exact[name] - approx[name]), l2(exact[name])
        if ref > 1e-14:
            out[name] = err / ref
        else:
            out[name] = err
            absolute.append(name)
    r_ex = case.r(x)
    r_h = _interior_values(disc, state.element_field("r"), phi)[..., 0]
    err = l2((r_ex - mean(r_ex)) - (r_h - mean(r_h)))
    ref = l2(r_ex)
    if ref > 1e-14:
        out["r"] = err / ref
    else:
        out["r"] = err
        absolute.append("r")
    out["div_u"] = max_divergence(state, "velocity").value
    out["div_B"] = max_divergence(state, "magnetic").value
    return ErrorReport(**out, absolute=tuple(absolute))


# ---------------------------------------------------------------------------
# convergence studies
# ---------------------------------------------------------------------------


@dataclass
class LevelResult:
    M: int
    report: ErrorReport
    iterations: int
    log: list


@dataclass
class ConvergenceReport:
    example: str
    k: int
    levels: list  # LevelResult

    def orders(self) -> list[dict]:
        """Observed orders between consecutive levels (None if undefined)."""
        out = []
        for a, b in zip(self.levels, self.levels[1:]):
            row = {}
            ratio = np.log(b.M / a.M)
            for name in ErrorReport.NORMS:
                ea, eb = getattr(a.report, name), getattr(b.report, name)
                row[name] = float(np.log(ea / eb) / ratio) if ea > 1e-14 and eb > 1e-14 else None
            out.append(row)
        return out

    def order(self, name: str, pair: int = -1):
        return self.orders()[pair][name]

    def to_csv(self, config_hash: str = "") -> str:
        buf = io.StringIO()
        cols = ["config_hash", "M", "iterations"] + list(ErrorReport.NORMS) + ["div_u", "div_B"] \
            + [f"order_{n}" for n in ErrorReport.NORMS]
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        orders = [None] + self.orders()
        for lvl, od in zip(self.levels, orders):
            rep = lvl.report
            row = [config_hash, lvl.M, lvl.iterations] + [f"{getattr(rep, n):.6e}" for n in ErrorReport.NORMS]
            row += [f"{rep.div_u:.3e}", f"{rep.div_B:.3e}"]
            row += ["" if od is None or od[n] is None else f"{od[n]:.3f}" for n in ErrorReport.NORMS]
            w.writerow(row)
        return buf.getvalue()

    def to_table(self, names: Sequence[str] = ("u", "grad_u", "L", "B", "T", "p", "r"),
                 config_hash: str = "") -> str:
        head = f"{'M':>4}" + "".join(f"{n:>12}{'order':>7}" for n in names) + f"{'div_u':>11}{'div_B':>11}"
        lines = [head]
        orders = [None] + self.orders()
        for lvl, od in zip(self.levels, orders):
            s = f"{lvl.M:>4}"
            for n in names:
                o = "" if od is None or od[n] is None else f"{od[n]:.2f}"
                s += f"{getattr(lvl.report, n):>12.4e}{o:>7}"
            s += f"{lvl.report.div_u:>11.2e}{lvl.report.div_B:>11.2e}"
            if config_hash:
                s += f"  [{config_hash}]"
            lines.append(s)
        return "\n".join(lines) + "\n"


class LevelFailure(NonConvergenceError):
    def __init__(self, M, err: NonConvergenceError):
        super().__init__(f"level M={M}: {err}", err.log)
        self.M = M


def solve_case(case: ManufacturedCase, M: int, k: int, tol: float = 1e-8, max_iter: int = 50,
               params: PhysicalParameters | None = None, with_boundary: bool = False,
               backend: str = "auto"):
    params = params or case.params
    mesh = build_unit_square_mesh(M) if case.dim == 2 else build_unit_cube_mesh(M)
    bd = case.boundary_data() if with_boundary else None
    asm = OseenAssembler(mesh, k, params, case.forcing(params), bd)
    return oseen_iterate(mesh, k, params, tol=tol, max_iter=max_iter, assembler=asm, backend=backend)


def convergence_study(example, k: int, M_list: Sequence[int], tol: float = 1e-8, max_iter: int = 50,
                      params: PhysicalParameters | None = None, on_level=None,
                      backend: str = "auto") -> ConvergenceReport:
    M_list = list(M_list)
    if not M_list:
        raise ValueError("M_list must not be empty")
    if any(b <= a for a, b in zip(M_list, M_list[1:])):
        raise ValueError("M_list must be strictly increasing")
    case = example if isinstance(example, ManufacturedCase) else make_case(example, params)
    levels = []
    for M in M_list:
        try:
            state, log = solve_case(case, M, k, tol, max_iter, params, backend=backend)
        except NonConvergenceError as err:
            raise LevelFailure(M, err) from err
        lvl = LevelResult(M, compute_error_report(state, case, params), len(log), log)
        levels.append(lvl)
        if on_level is not None:
            on_level(lvl)
    return ConvergenceReport(case.name, k, levels)


__all__ = [
    "ConvergenceReport", "ErrorReport", "Forcing", "ManufacturedCase", "ScalarField", "VectorField",
    "compute_error_report", "convergence_study", "make_case", "make_patch_case", "solve_case",
]
