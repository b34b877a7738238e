from __future__ import annotations

import numpy as np
import pytest
import scipy.sparse as sp

from _helpers import case_of, vec
from hdgmhd.assembly_solver import (
    DofMap,
    OseenAssembler,
    StateVector,
    assemble_oseen,
    build_dofmap,
    max_divergence,
    oseen_iterate,
    solve_sparse,
)
from hdgmhd.exceptions import NonConvergenceError, SingularSystemError
from hdgmhd.fem_basis import make_basis
from hdgmhd.forms import INTERIOR_FIELDS, TRACE_FIELDS, PhysicalParameters
from hdgmhd.mesh import build_unit_cube_mesh, build_unit_square_mesh
from hdgmhd.quadrature import make_quadrature
from hdgmhd.verification import compute_error_report, interpolate_case, make_case, make_patch_case, solve_case

RNG = np.random.default_rng(11)
BACKENDS = ["superlu", "auto"]


# -- dof map -----------------------------------------------------------------

def test_dof_counts_2d_m1():
    dm = build_dofmap(build_unit_square_mesh(1), 1)
    assert dm.count("u") == 12
    assert dm.count("p") == 2
    assert dm.gauge_index == dm.n_dofs - 1


def test_dof_counts_3d_m1():
    mesh = build_unit_cube_mesh(1)
    assert mesh.n_facets == 18
    assert build_dofmap(mesh, 1).count("uh") == 162


@pytest.mark.parametrize("dim,k", [(2, 1), (2, 3), (3, 2)])
def test_every_index_claimed_once(dim, k):
    mesh = build_unit_square_mesh(2) if dim == 2 else build_unit_cube_mesh(1)
    dm = DofMap(mesh, k)
    claimed = np.zeros(dm.n_dofs, dtype=int)
    for name in INTERIOR_FIELDS:
        np.add.at(claimed, dm.local_dofs(name).ravel(), 1)
    for name in TRACE_FIELDS:
        claimed[dm.field_slice(name)] += 1
    claimed[dm.gauge_index] += 1
    assert np.all(claimed == 1)
    assert sum(dm.describe()[n] for n in INTERIOR_FIELDS + TRACE_FIELDS) + 1 == dm.n_dofs


def test_fixed_mask():
    mesh = build_unit_square_mesh(2)
    dm = DofMap(mesh, 1)
    fixed = dm.fixed
    nF = make_basis(1, 1).size
    bnd = np.where(mesh.boundary_flags)[0]
    uh = fixed[dm.field_slice("uh")].reshape(mesh.n_facets, -1)
    assert uh[bnd].all() and not uh[~mesh.boundary_flags].any()
    assert not fixed[dm.field_slice("ph")].any()
    bh = fixed[dm.field_slice("Bh")].reshape(mesh.n_facets, 2, nF)
    assert bh[:, 0].all()  # normal frame component everywhere
    assert bh[bnd, 1].all() and not bh[~mesh.boundary_flags, 1].any()
    for name in INTERIOR_FIELDS:
        assert not fixed[dm.field_slice(name)].any()


def test_degree_zero_rejected():
    with pytest.raises(ValueError):
        build_dofmap(build_unit_square_mesh(1), 0)


def test_state_length_checked():
    dm = DofMap(build_unit_square_mesh(1), 1)
    with pytest.raises(ValueError):
        StateVector(dm, np.zeros(dm.n_dofs + 1))


# -- assembly ----------------------------------------------------------------

def _block(system, rf, cf):
    dm = system.dofmap
    return system.matrix[dm.field_slice(rf)][:, dm.field_slice(cf)].toarray()


def test_flux_mass_block_matches_dense_oracle():
    mesh = build_unit_square_mesh(1)
    Ha = 3.0
    s = assemble_oseen(mesh, 2, PhysicalParameters(Ha=Ha), None)
    chi = make_basis(2, 1)
    q = make_quadrature(2, 6)
    c = chi.eval(q.points)
    ref_mass = (c * q.weights[:, None]).T @ c
    dense = np.zeros((mesh.n_elements * 4 * chi.size,) * 2)
    n = chi.size
    for e in range(mesh.n_elements):
        for comp in range(4):
            i = (e * 4 + comp) * n
            dense[i:i + n, i:i + n] = Ha**2 * abs(mesh.dets[e]) * ref_mass
    np.testing.assert_allclose(_block(s, "L", "L"), dense, atol=1e-12)


def test_pressure_coupling_transpose():
    s = assemble_oseen(build_unit_square_mesh(2), 2, PhysicalParameters(), None)
    up, pu = _block(s, "u", "p"), _block(s, "p", "u")
    assert np.abs(up).max() > 0
    np.testing.assert_allclose(up, -pu.T, atol=1e-14)


def test_no_duplicate_entries():
    s = assemble_oseen(build_unit_square_mesh(2), 1, PhysicalParameters(), None)
    A = s.matrix.tocoo()
    keys = A.row.astype(np.int64) * A.shape[1] + A.col
    assert len(np.unique(keys)) == len(keys)
    assert s.shape == (s.dofmap.n_dofs, s.dofmap.n_dofs)


def test_prev_dimension_mismatch():
    asm = OseenAssembler(build_unit_square_mesh(2), 1, PhysicalParameters())
    other = StateVector(DofMap(build_unit_square_mesh(1), 1))
    with pytest.raises(ValueError):
        asm.system(other)


@pytest.mark.parametrize("backend", BACKENDS)
def test_homogeneous_system_gives_zero(backend):
    s = assemble_oseen(build_unit_square_mesh(2), 1, PhysicalParameters(), None)
    x = solve_sparse(s, backend=backend)
    assert np.abs(x.values).max() == 0.0


# -- solve -------------------------------------------------------------------

@pytest.mark.parametrize("backend", BACKENDS)
def test_identity_solve(backend):
    b = RNG.standard_normal(7)
    np.testing.assert_allclose(solve_sparse(sp.identity(7, format="csr"), b, backend=backend), b)


@pytest.mark.parametrize("backend", BACKENDS)
def test_round_trip(backend):
    s = assemble_oseen(build_unit_square_mesh(2), 1, PhysicalParameters(), None)
    free = s.meta["free"]
    x_star = np.where(free, RNG.standard_normal(len(free)), 0.0)
    x = solve_sparse(s.matrix, s.matrix @ x_star, backend=backend)
    assert np.abs(x - x_star).max() <= 1e-10 * np.abs(x_star).max()


@pytest.mark.parametrize("backend", BACKENDS)
def test_missing_pressure_gauge_is_detected(backend):
    s = assemble_oseen(build_unit_square_mesh(2), 1, PhysicalParameters(), None, pressure_gauge=False)
    with pytest.raises(SingularSystemError):
        solve_sparse(s, backend=backend)


def test_solve_rejects_bad_input():
    with pytest.raises(ValueError):
        solve_sparse(sp.identity(3), np.ones(4))
    with pytest.raises(ValueError):
        solve_sparse(sp.identity(3), np.ones(3), backend="cholmod")


def test_residual_recorded():
    s = assemble_oseen(build_unit_square_mesh(2), 1, PhysicalParameters(), None,
                       forcing=make_case(1).forcing())
    solve_sparse(s)
    assert s.meta["residual"] <= 1e-10
    assert s.meta["backend"] in ("superlu", "pardiso")


# -- Oseen iteration ---------------------------------------------------------

def test_zero_forcing_converges_in_one_step():
    state, log = oseen_iterate(build_unit_square_mesh(2), 1, PhysicalParameters())
    assert len(log) == 1
    assert not np.any(state.values)


def test_iteration_log_and_stop_rule():
    case = make_case(1)
    state, log = solve_case(case, 4, 1, tol=1e-8)
    diffs = [r.diff_norm for r in log]
    assert np.all(np.isfinite(diffs))
    assert diffs[-1] < 1e-8 <= min(diffs[:-1])
    assert log[0].line().startswith("iter=1 diff=")
    assert all(r.residual <= 1e-10 for r in log)


def test_non_convergence_carries_log():
    with pytest.raises(NonConvergenceError) as info:
        solve_case(make_case(1), 4, 1, tol=1e-8, max_iter=1)
    assert len(info.value.log) == 1


def test_iteration_arguments_validated():
    mesh = build_unit_square_mesh(1)
    with pytest.raises(ValueError):
        oseen_iterate(mesh, 1, PhysicalParameters(), tol=0.0)
    with pytest.raises(ValueError):
        oseen_iterate(mesh, 1, PhysicalParameters(), max_iter=0)


def test_deterministic_logs():
    a = [r.line() for r in solve_case(make_case(1), 4, 1)[1]]
    b = [r.line() for r in solve_case(make_case(1), 4, 1)[1]]
    assert a == b


# -- divergence --------------------------------------------------------------

def test_divergence_of_converged_solution():
    state, _ = solve_case(make_case(1), 4, 1)
    for name in ("velocity", "magnetic"):
        rep = max_divergence(state, name)
        assert rep.element <= 1e-12 and rep.jump <= 1e-12


def test_divergence_negative_control():
    dm = DofMap(build_unit_square_mesh(2), 1)
    rep = max_divergence(StateVector(dm, RNG.standard_normal(dm.n_dofs)), "velocity")
    assert rep.element > 1e-3 and rep.jump > 1e-3


def test_divergence_of_interpolant():
    dm = DofMap(build_unit_square_mesh(3), 1)
    st = interpolate_case(case_of(2, u=vec(2, {(0, 1): 1.0}, {(1, 0): 1.0})), dm)
    assert max_divergence(st, "velocity").value <= 1e-13
    with pytest.raises(ValueError):
        max_divergence(st, "thermal")


# -- patch test --------------------------------------------------------------

@pytest.mark.parametrize("dim,k,M", [(2, 1, 2), (2, 2, 2), (3, 1, 1)])
def test_patch_reproduced_exactly(dim, k, M):
    case = make_patch_case(dim, k, seed=3)
    state, log = solve_case(case, M, k, tol=1e-12, with_boundary=True)
    rep = compute_error_report(state, case)
    for name in rep.NORMS:
        assert getattr(rep, name) <= 1e-9, name
    assert rep.div_u <= 1e-10 and rep.div_B <= 1e-10
    # the interpolant itself is the discrete solution
    exact = interpolate_case(case, state.dofmap)
    for name in ("u", "B", "T", "L", "N", "A", "uh", "Th"):
        np.testing.assert_allclose(state.values[state.dofmap.field_slice(name)],
                                   exact.values[exact.dofmap.field_slice(name)], atol=1e-9)
