import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from poropbdw.fem import (MaterialParameters, NewmarkStepper, ReferenceOperators, TimeConfig, apply_boundary_conditions,
                          assemble_blocks, assemble_joint_mass, assemble_load, constrain, derive_moduli,
                          initial_acceleration, newmark_solve, simulate, traction_profile, triple_norm)
from poropbdw.mesh import BoundaryRegion, Mesh
from poropbdw.mesh import _TAG_CODES as TAGS

from _fixtures import cube_mesh, mms_errors, one_step_oracle_error, single_tet

NECK, VENT, MRE = TAGS[BoundaryRegion.NECK], TAGS[BoundaryRegion.VENTRICLES], TAGS[BoundaryRegion.MRE]


# -- moduli -------------------------------------------------------------------

def test_lame_oracle():
    # 1e5 * 0.4 / (1.4 * 0.2)
    assert derive_moduli(MaterialParameters(E=1e5, nu=0.4)).lame == pytest.approx(1.4285714285714287e5, rel=1e-12)


def test_storage_oracle():
    # 3 * 0.01 * 0.2 / (0.99 * 1e5)
    s = derive_moduli(MaterialParameters(E=1e5, nu=0.4, alpha=1.0, B=0.99)).storage
    assert s == pytest.approx(6.0606060606060606e-8, rel=1e-12)


def test_stress_law_variants():
    th = MaterialParameters(E=1e5, nu=0.4)
    assert derive_moduli(th).strain_coefficient == pytest.approx(1e5 / 1.4)
    assert derive_moduli(th, literal_2E=True).strain_coefficient == pytest.approx(2e5)


@pytest.mark.parametrize("nu", [0.5, 0.6, 0.0])
def test_incompressible_rejected(nu):
    with pytest.raises(ValueError):
        derive_moduli(MaterialParameters(nu=nu))


def test_unit_skempton_rejected():
    with pytest.raises(ValueError):
        derive_moduli(MaterialParameters(B=1.0))


# -- assembly -------------------------------------------------------------------

def test_single_tet_mass_sum():
    s = assemble_blocks(single_tet(), MaterialParameters(rho=1.0))
    assert s.M_U.sum() == pytest.approx(3 / 6, rel=1e-13)


def test_single_tet_reference_matrices():
    ops = ReferenceOperators.from_mesh(single_tet())
    vol = 1 / 6
    mass = vol / 20 * (np.ones((4, 4)) + np.eye(4))
    G = np.array([[-1, -1, -1], [1, 0, 0], [0, 1, 0], [0, 0, 1]], float)
    np.testing.assert_allclose(ops.scalar_mass.toarray(), mass, atol=1e-15)
    np.testing.assert_allclose(ops.scalar_stiffness.toarray(), vol * G @ G.T, atol=1e-15)
    # (grad p, v): row 3i+c, column j -> |T|/4 d_c phi_j ; (div u, q): row j, column 3i+c -> |T|/4 d_c phi_i
    grad = np.zeros((12, 4))
    div = np.zeros((4, 12))
    for i in range(4):
        for c in range(3):
            grad[3 * i + c, :] = vol / 4 * G[:, c]
            div[:, 3 * i + c] = vol / 4 * G[i, c]
    np.testing.assert_allclose(ops.grad.toarray(), grad, atol=1e-15)
    np.testing.assert_allclose(ops.div.toarray(), div, atol=1e-15)


def test_rigid_translation_and_constant_pressure_null(coarse_mesh):
    s = assemble_blocks(coarse_mesh, MaterialParameters())
    u = np.tile([0.3, -1.2, 2.0], coarse_mesh.n_nodes)
    assert np.abs(s.A_U @ u).max() <= 1e-9 * abs(s.A_U).max()
    p = np.full(coarse_mesh.n_nodes, 7.0)
    assert np.abs(s.A_P @ p).max() <= 1e-12 * abs(s.A_P).max() * 7


def test_block_symmetry(coarse_mesh):
    s = assemble_blocks(coarse_mesh, MaterialParameters(E=3e5, nu=0.42))
    for name in ("M_U", "M_P", "A_U", "A_P"):
        A = getattr(s, name)
        assert abs(A - A.T).max() <= 1e-12 * max(1.0, abs(A).max()), name


def test_joint_mass_spd_dense():
    m = cube_mesh(2)
    M = assemble_joint_mass(m, 0.3).toarray()
    assert M.shape == (108, 108)
    assert np.linalg.eigvalsh(M).min() > 0
    np.testing.assert_array_equal(M, M.T)


def test_joint_mass_constant_pressure(desk_mesh):
    nn = desk_mesh.n_nodes
    M = assemble_joint_mass(desk_mesh, 2.0)
    y = np.concatenate([np.zeros(3 * nn), np.ones(nn)])
    assert y @ (M @ y) == pytest.approx(2 * 984.0, rel=1e-12)
    assert np.zeros(4 * nn) @ (assemble_joint_mass(desk_mesh, 1.0) @ np.zeros(4 * nn)) == 0.0


def test_joint_mass_linear_in_zeta(coarse_mesh):
    nu = 3 * coarse_mesh.n_nodes
    M1 = assemble_joint_mass(coarse_mesh, 0.7).toarray()
    M2 = assemble_joint_mass(coarse_mesh, 1.4).toarray()
    np.testing.assert_array_equal(M1[:nu, :nu], M2[:nu, :nu])
    np.testing.assert_allclose(M2[nu:, nu:], 2 * M1[nu:, nu:], rtol=0, atol=1e-16)
    assert not M1[:nu, nu:].any()


# -- loads -------------------------------------------------------------------

def _tet(nodes, tags):
    return Mesh(np.asarray(nodes, float), [[0, 1, 2, 3]], [[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]], tags)


def test_load_zero_at_t0(desk_mesh):
    assert not assemble_load(desk_mesh, MaterialParameters(), 0.0).any()


def test_quarter_period_traction_on_front_facet():
    # only facet (0,1,3) lies on the MRE surface, in the plane y = 0 with area 1/2
    m = _tet([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], [NECK, MRE, VENT, VENT])
    th = MaterialParameters(xi=-500.0, omega=50.0)
    F = assemble_load(m, th, 1 / (4 * th.omega))
    Fy = F[1:12:3]
    assert Fy.sum() / 0.5 == pytest.approx(-500.0, rel=1e-12)
    assert not F[0:12:3].any() and not F[2:12:3].any()
    np.testing.assert_allclose(Fy[[0, 1, 3]], -500 * 0.5 / 3, rtol=1e-12)


def test_back_facet_has_no_traction():
    # MRE facet in the plane y = L = 1
    m = _tet([[0, 1, 0], [1, 1, 0], [0, 0, 0], [0, 1, 1]], [NECK, MRE, VENT, VENT])
    assert m.frontal_length == 1.0
    assert np.abs(traction_profile(m, MaterialParameters())).max() < 1e-13


def test_zero_frontal_length_rejected(coarse_mesh):
    with pytest.raises(ValueError):
        traction_profile(coarse_mesh, MaterialParameters(), L=0.0)


def test_total_traction_on_cube():
    # s = 1 - y on the unit cube; MRE faces y=0 (1), y=1 (0), x=0, x=1, z=1 (1/2 each)
    m = cube_mesh(3)
    F = traction_profile(m, MaterialParameters(xi=-500.0))
    assert F[1 : 3 * m.n_nodes : 3].sum() == pytest.approx(-500 * 2.5, rel=1e-12)


# -- boundary conditions and time stepping ---------------------------------------

@pytest.fixture(scope="module")
def desk_run(desk_mesh):
    return simulate(desk_mesh, MaterialParameters(), TimeConfig(steps=6))


def test_dirichlet_values_exact(desk_mesh, desk_run):
    nn = desk_mesh.n_nodes
    th = MaterialParameters()
    neck = desk_mesh.boundary_nodes(BoundaryRegion.NECK)
    vent = desk_mesh.boundary_nodes(BoundaryRegion.VENTRICLES)
    mre = desk_mesh.boundary_nodes(BoundaryRegion.MRE)
    for y in desk_run.states[1:]:
        assert not y[(3 * neck[:, None] + np.arange(3)).ravel()].any()
        assert np.all(y[3 * nn + vent] == th.p_ventricles)
        assert np.all(y[3 * nn + mre] == th.p_csf)
    assert np.abs(desk_run.u[-1]).max() > 0


def test_history_starts_homogeneous(desk_run):
    assert not desk_run.states[0].any()
    np.testing.assert_allclose(np.diff(desk_run.times), desk_run.tau)


def test_neck_mismatch_values(desk_mesh):
    ts = simulate(desk_mesh, MaterialParameters(), TimeConfig(steps=2), neck_displacement=1e-5)
    neck = desk_mesh.boundary_nodes(BoundaryRegion.NECK)
    assert np.all(ts.states[1:, (3 * neck[:, None] + np.arange(3)).ravel()] == 1e-5)


def test_zero_data_gives_zero_series(coarse_mesh):
    s = assemble_blocks(coarse_mesh, MaterialParameters())
    csys = constrain(s, np.arange(6), 0.0)
    ts = newmark_solve(csys, 1e-3, 5)
    assert not ts.states.any()


def test_time_config_validation():
    for bad in (TimeConfig(tau=0), TimeConfig(steps=0), TimeConfig(beta_hat=0.6), TimeConfig(beta_hat=0.0)):
        with pytest.raises(ValueError):
            bad.validate()
    tc = TimeConfig.per_cycle(50.0)
    assert tc.tau == pytest.approx(1 / 2000) and tc.steps == 40


@pytest.mark.parametrize("beta_hat", [0.25, 0.5])
def test_one_step_dense_oracle(beta_hat):
    assert one_step_oracle_error(beta_hat, 1234) <= 1e-10


def test_factorization_reuse_matches_refactorization(desk_mesh):
    s = assemble_blocks(desk_mesh, MaterialParameters(kappa=3e-9, E=7e5, nu=0.41, p_ventricles=1.07e4))
    cs = apply_boundary_conditions(s, desk_mesh)
    prof = traction_profile(desk_mesh, s.theta)

    def load(t):
        return np.sin(2 * np.pi * 50 * t) * prof

    a = newmark_solve(cs, 5e-4, 8, load=load)
    b = newmark_solve(cs, 5e-4, 8, load=load, refactorize=True)
    assert np.linalg.norm(a.states - b.states) <= 1e-12 * np.linalg.norm(b.states)


def test_initial_acceleration_balances_momentum(coarse_mesh, rng):
    s = assemble_blocks(coarse_mesh, MaterialParameters())
    cs = apply_boundary_conditions(s, coarse_mesh)
    f = rng.standard_normal(s.n_dofs)
    a = initial_acceleration(cs, np.zeros(s.n_dofs), f)
    free_u = cs.free[cs.free < s.n_u]
    np.testing.assert_allclose((s.M_U @ a[: s.n_u])[free_u], f[free_u], rtol=1e-10, atol=1e-12)


def test_manufactured_solution_rate():
    errs, rate = mms_errors()
    assert np.all(np.diff(errs) < 0)
    assert 1.5 <= rate <= 2.5


def test_time_refinement_first_order():
    # v_{n+1} = v_n + tau a_{n+1} makes the scheme first order in tau
    m = cube_mesh(2)
    s = assemble_blocks(m, MaterialParameters())
    bnd = np.unique(m.facets)
    nn = m.n_nodes
    cs = constrain(s, np.concatenate([(3 * bnd[:, None] + np.arange(3)).ravel(), 3 * nn + bnd]), 0.0)
    prof = np.zeros(s.n_dofs)
    prof[: 3 * nn] = 1e3 * np.random.default_rng(3).standard_normal(3 * nn)

    def load(t):
        return np.sin(2 * np.pi * 50 * t) * prof

    T = 4e-3
    ref = newmark_solve(cs, T / 2048, 2048, load=load).states[-1]
    errs = [np.linalg.norm(newmark_solve(cs, T / k, k, load=load).states[-1] - ref) for k in (32, 64, 128)]
    rates = np.log2(np.array(errs[:-1]) / errs[1:])
    assert np.all((rates > 0.7) & (rates < 1.3))


# -- energy norm and coercivity ---------------------------------------------------

def test_triple_norm_basics(coarse_mesh):
    s = assemble_blocks(coarse_mesh, MaterialParameters())
    tau = 5e-4
    assert triple_norm(np.zeros(s.n_dofs), s, tau) == 0.0
    y = np.zeros(s.n_dofs)
    y[: s.n_u] = np.tile([1.0, 2.0, -0.5], coarse_mesh.n_nodes)
    vol = coarse_mesh.element_volumes().sum()
    assert triple_norm(y, s, tau) ** 2 == pytest.approx(s.theta.rho / tau**2 * 5.25 * vol, rel=1e-9)


def coercivity_ratio(system, csys, y, tau, beta_hat):
    y = y.copy()
    y[csys.dofs] = 0.0
    K = system.iteration_matrix(tau, beta_hat)
    return (y @ (K @ y)) / triple_norm(y, system, tau) ** 2


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), corner=st.integers(0, 15), su=st.floats(-6, 0), sp_=st.floats(0, 5))
def test_coercivity_property_quarter(coarse_mesh, seed, corner, su, sp_):
    from poropbdw.rom import ParameterRanges

    th = MaterialParameters().with_theta(*ParameterRanges().corners()[corner])
    s = assemble_blocks(coarse_mesh, th)
    cs = apply_boundary_conditions(s, coarse_mesh)
    r = np.random.default_rng(seed)
    y = np.concatenate([10**su * r.standard_normal(s.n_u), 10**sp_ * r.standard_normal(s.n_nodes)])
    assert coercivity_ratio(s, cs, y, 5e-4, 0.25) >= 0.25 * (1 - 1e-10)


def test_coercivity_worst_case_quarter(coarse_mesh):
    # generalized eigenvalue of the form against the energy norm on the free DOFs
    from poropbdw.rom import ParameterRanges

    tau = 5e-4
    for theta in ParameterRanges().corners():
        s = assemble_blocks(coarse_mesh, MaterialParameters().with_theta(*theta))
        cs = apply_boundary_conditions(s, coarse_mesh)
        f = cs.free
        K = s.iteration_matrix(tau, 0.25).toarray()[np.ix_(f, f)]
        th, ops = s.theta, s.ops
        N = sp.block_diag([th.rho / tau**2 * ops.vector_mass + 2 * th.E * ops.strain,
                           s.moduli.storage * ops.scalar_mass + th.kappa * tau / th.mu_f * ops.scalar_stiffness])
        N = N.toarray()[np.ix_(f, f)]
        from scipy.linalg import eigh
        lam = eigh(0.5 * (K + K.T), N, eigvals_only=True)
        assert lam.min() >= 0.25
