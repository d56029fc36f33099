import warnings

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from poropbdw.fem import assemble_joint_mass
from poropbdw.observation import (MeasurementSeries, VoxelGrid, add_noise, assemble_functionals,
                                  build_observation_space, make_box_voxels, make_slice_voxels, noise_sigma, observe,
                                  orthonormalize, riesz_representers)

from _fixtures import cube_mesh

ZETA = 0.37


@pytest.fixture(scope="module")
def slice_space(desk_mesh):
    grid = make_slice_voxels(desk_mesh, [5.0], 1.0)
    return build_observation_space(desk_mesh, grid, ZETA)


def test_mid_slice_count(desk_mesh):
    # 10 x 10 tiles, minus the 4 x 2 tiles that sit inside the cavity
    g = make_slice_voxels(desk_mesh, [5.0], 1.0)
    assert g.n_voxels == 92
    F = assemble_functionals(g, desk_mesh)
    assert F.m == 276
    ones = np.zeros(F.n_dofs)
    ones[: 3 * desk_mesh.n_nodes : 3] = 1.0
    assert np.all((F @ ones)[0::3] > 0)


def test_three_slices(desk_mesh):
    g1 = make_slice_voxels(desk_mesh, [5.0], 1.0)
    g3 = make_slice_voxels(desk_mesh, [3.0, 5.0, 7.0], 1.0)
    assert g3.n_voxels == 292 > g1.n_voxels
    assert g3.overlaps() == []


def test_slice_ordering_lexicographic(desk_mesh):
    c = make_slice_voxels(desk_mesh, [7.0, 3.0], 1.0).centers
    keys = [tuple(r) for r in c[:, ::-1]]
    assert keys == sorted(keys)


@pytest.mark.parametrize("planes", [[11.0], [-0.5], []])
def test_bad_planes(desk_mesh, planes):
    with pytest.raises(ValueError):
        make_slice_voxels(desk_mesh, planes, 1.0)


def test_bad_edge(desk_mesh):
    with pytest.raises(ValueError):
        make_slice_voxels(desk_mesh, [5.0], 0.0)


def test_box_grid(desk_mesh):
    g = make_box_voxels(desk_mesh, 1.25)
    assert g.n_voxels == 512 and g.overlaps() == []


def test_grid_json_roundtrip(tmp_path, desk_mesh):
    g = make_slice_voxels(desk_mesh, [3.0, 5.0], 1.0)
    g.save(tmp_path / "g.json")
    r = VoxelGrid.load(tmp_path / "g.json")
    np.testing.assert_array_equal(r.lo, g.lo)
    np.testing.assert_array_equal(r.hi, g.hi)
    np.testing.assert_array_equal(r.ids, g.ids)
    assert r.planes == g.planes and r.edge == g.edge


def aligned_grid():
    # voxels on grid lines of the h=1 desk mesh: every element is wholly in or out
    lo = np.array([[0.0, 0.0, 0.0], [2.0, 3.0, 1.0], [6.0, 7.0, 8.0]])
    hi = lo + np.array([[1.0, 1.0, 1.0], [2.0, 1.0, 3.0], [3.0, 2.0, 1.0]])
    return VoxelGrid(lo, hi, np.arange(3))


def test_constant_field_exact(desk_mesh):
    F = assemble_functionals(aligned_grid(), desk_mesh)
    nn = desk_mesh.n_nodes
    for j in range(3):
        y = np.zeros(4 * nn)
        y[j: 3 * nn: 3] = 1.0
        vals = (F @ y).reshape(-1, 3)
        np.testing.assert_allclose(vals[:, j], [1.0, 6.0, 6.0], rtol=1e-13)
        assert np.abs(np.delete(vals, j, axis=1)).max() == 0.0


def test_linear_field_exact(desk_mesh):
    g = aligned_grid()
    F = assemble_functionals(g, desk_mesh)
    nn = desk_mesh.n_nodes
    y = np.zeros(4 * nn)
    y[: 3 * nn: 3] = desk_mesh.nodes[:, 0]
    vals = (F @ y)[0::3]
    np.testing.assert_allclose(vals, g.volumes * g.centers[:, 0], rtol=1e-13)
    Fn = assemble_functionals(g, desk_mesh, normalize=True)
    np.testing.assert_allclose((Fn @ y)[0::3], g.centers[:, 0], rtol=1e-13)


def test_pressure_columns_zero(desk_mesh, rng):
    F = assemble_functionals(make_slice_voxels(desk_mesh, [5.0], 1.0), desk_mesh)
    assert F.matrix[:, 3 * desk_mesh.n_nodes:].nnz == 0
    y = np.zeros(F.n_dofs)
    y[3 * desk_mesh.n_nodes:] = rng.standard_normal(desk_mesh.n_nodes)
    assert not (F @ y).any()


def test_riesz_representation(desk_mesh, rng):
    grid = make_slice_voxels(desk_mesh, [5.0], 1.0)
    F = assemble_functionals(grid, desk_mesh)
    M = assemble_joint_mass(desk_mesh, ZETA)
    W = riesz_representers(F, M)
    assert not W[3 * desk_mesh.n_nodes:].any()
    V = rng.standard_normal((F.n_dofs, 20))
    lhs = W.T @ (M @ V)
    rhs = F.matrix @ V
    assert np.abs(lhs - rhs).max() <= 1e-10 * np.abs(rhs).max()


def test_riesz_dense_oracle_and_zero_row():
    m = cube_mesh(2)
    M = assemble_joint_mass(m, 2.5)
    lo = np.array([[0.0, 0.0, 0.0], [0.5, 0.5, 0.5], [1.5, 1.5, 1.5]])
    grid = VoxelGrid(lo, lo + 0.5, np.arange(3))
    F = assemble_functionals(grid, m)
    assert F.matrix.shape == (9, 108)
    W = riesz_representers(F, M)
    ref = np.linalg.solve(M.toarray(), F.matrix.toarray().T)
    np.testing.assert_allclose(W, ref, rtol=0, atol=1e-10 * np.abs(ref).max())
    # the third voxel lies outside the unit cube
    assert not W[:, 6:].any()


def test_orthonormality_and_span(slice_space):
    obs = slice_space
    G = obs.W.T @ (obs.M @ obs.W)
    assert np.abs(G - np.eye(obs.m)).max() < 1e-10
    assert not obs.W[3 * (obs.W.shape[0] // 4):].any()
    Wraw = riesz_representers(obs.functionals, obs.M)
    recon = obs.W @ obs.R
    err = np.sqrt(np.einsum("ij,ij->j", recon - Wraw, obs.M @ (recon - Wraw)))
    nrm = np.sqrt(np.einsum("ij,ij->j", Wraw, obs.M @ Wraw))
    assert (err / nrm).max() < 1e-10


def test_orthonormal_input_unchanged(rng):
    M = sp.diags(rng.uniform(0.5, 2.0, 60)).tocsr()
    X = rng.standard_normal((60, 10))
    obs = orthonormalize(X, M)
    again = orthonormalize(obs.W, M)
    signs = np.sign(np.sum(again.W * obs.W, axis=0))
    np.testing.assert_allclose(again.W * signs, obs.W, atol=1e-12)


def test_duplicate_column_dropped(rng):
    M = sp.identity(40, format="csr")
    X = rng.standard_normal((40, 6))
    X = np.column_stack([X, X[:, 2]])
    with pytest.warns(RuntimeWarning, match="dropped 1"):
        obs = orthonormalize(X, M)
    assert obs.m == 6 and obs.m_raw == 7
    assert list(obs.kept) == [0, 1, 2, 3, 4, 5]


def test_random_fifty_columns(rng):
    A = sp.random(300, 300, density=0.02, random_state=5)
    M = (A @ A.T + sp.identity(300)).tocsr()
    X = rng.standard_normal((300, 50)) @ np.diag(np.logspace(0, 6, 50))
    obs = orthonormalize(X, M, block=16)
    G = obs.W.T @ (M @ obs.W)
    assert np.abs(G - np.diag(np.diag(G))).max() < 1e-10
    np.testing.assert_allclose(obs.W @ obs.R, X, rtol=0, atol=1e-10 * np.abs(X).max())


@settings(max_examples=12, deadline=None)
@given(n=st.integers(2, 30), block=st.integers(1, 40), seed=st.integers(0, 1000))
def test_block_size_irrelevant(n, block, seed):
    r = np.random.default_rng(seed)
    M = sp.diags(r.uniform(0.1, 3.0, 80)).tocsr()
    X = r.standard_normal((80, n))
    a = orthonormalize(X, M, block=block)
    b = orthonormalize(X, M, block=n)
    np.testing.assert_allclose(a.W, b.W, atol=1e-10)


def test_coordinates_match_projection(desk_mesh, slice_space, rng):
    y = rng.standard_normal(4 * desk_mesh.n_nodes)
    raw = slice_space.functionals @ y
    np.testing.assert_allclose(slice_space.coordinates(raw), slice_space.measure(y), rtol=1e-9,
                               atol=1e-10 * np.abs(slice_space.measure(y)).max())
    # re-observing the projection reproduces the functionals
    again = slice_space.functionals @ slice_space.project(y)
    assert np.abs(again - raw).max() <= 1e-10 * np.abs(raw).max()


def test_observe_linear_and_zero(desk_mesh, slice_space, rng):
    F = slice_space.functionals

    class S:
        tau = 1e-3

    s1, s2 = S(), S()
    s1.states = rng.standard_normal((3, F.n_dofs))
    s2.states = rng.standard_normal((3, F.n_dofs))
    comb = S()
    comb.states = 2.0 * s1.states - 0.5 * s2.states
    lhs = observe(comb, F).values
    rhs = 2.0 * observe(s1, F).values - 0.5 * observe(s2, F).values
    assert np.abs(lhs - rhs).max() <= 1e-12 * np.abs(rhs).max()
    zero = S()
    zero.states = np.zeros((2, F.n_dofs))
    assert not observe(zero, F).values.any()


def test_noise_zero_is_exact_copy(rng):
    ms = MeasurementSeries(rng.standard_normal((4, 9)), 1e-3)
    out = add_noise(ms, 0.0, 7)
    assert np.array_equal(out.values, ms.values) and out.values is not ms.values


def test_noise_sigma_formula():
    v = np.array([[0.5, -2.0], [1.0, 0.1]])
    assert noise_sigma(v, 0.1) == pytest.approx(0.2)


def test_noise_statistics_and_determinism():
    vals = np.zeros((10, 10_000))
    vals[0, 0] = 2.0
    ms = MeasurementSeries(vals, 1e-3)
    a = add_noise(ms, 0.1, 42)
    noise = (a.values - vals).ravel()[1:]
    assert abs(noise.std() / 0.2 - 1) < 0.02
    assert abs(noise.mean()) < 0.01
    assert np.array_equal(a.values, add_noise(ms, 0.1, 42).values)
    assert not np.array_equal(a.values, add_noise(ms, 0.1, 43).values)
    with pytest.raises(ValueError):
        add_noise(ms, -0.1, 0)


def test_offline_construction_only_needs_mesh_and_grid(desk_mesh):
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        obs = build_observation_space(desk_mesh, make_slice_voxels(desk_mesh, [5.0], 1.0), 1.0)
    assert obs.m == 276
