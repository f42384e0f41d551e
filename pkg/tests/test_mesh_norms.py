import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from kinhydro.collision import build_projector
from kinhydro.kinetic import apply_diffuse_reflection
from kinhydro.mesh import MESH_PRESETS, KineticField, build_boundary_operator, build_mesh, mesh_from_preset
from kinhydro.norms import (
    R_TERMS, NormReport, boundary_norm, composite_norm, energy_ledger, interpolation_check, lp_norm, m_functional,
)
from kinhydro.velocity import DriftContext, WeightFunction, build_grid


@pytest.fixture(scope="module")
def tiny():
    return build_mesh(**MESH_PRESETS["tiny"])


def random_field(rng, mesh, grid, drift, scale=1.0):
    vals = rng.normal(size=(mesh.n_cells, grid.size)) * drift.sqrt_mu_c(grid.nodes) * scale
    wall_in = rng.normal(size=(mesh.n_wall, grid.size)) * drift.sqrt_mu_c(grid.nodes) * scale
    return KineticField.from_values(vals, mesh, grid, wall_in=wall_in)


@pytest.mark.parametrize("preset", sorted(MESH_PRESETS))
def test_mesh_invariants(preset):
    mesh = mesh_from_preset(preset)
    p = MESH_PRESETS[preset]
    assert np.all(mesh.volumes > 0)
    assert mesh.volumes.sum() == pytest.approx(4 * np.pi / 3 * (p["r_far"] ** 3 - 1), rel=1e-12)
    np.testing.assert_allclose(np.linalg.norm(mesh.wall_normals, axis=1), 1.0, rtol=1e-14)
    np.testing.assert_allclose(np.linalg.norm(mesh.far_normals, axis=1), 1.0, rtol=1e-14)
    # Wall normals point into the obstacle, far normals outward.
    assert np.all(np.sum(mesh.wall_normals * mesh.wall_centers, axis=1) < 0)
    far_c = mesh.centers[mesh.face_left[mesh.far_faces]]
    assert np.all(np.sum(mesh.far_normals * far_c, axis=1) > 0)
    # Closed cells: area vectors of each cell sum to zero.
    net = np.zeros((mesh.n_cells, 3))
    np.add.at(net, mesh.face_left, mesh.face_area)
    inner = mesh.face_right >= 0
    np.add.at(net, mesh.face_right[inner], -mesh.face_area[inner])
    assert np.abs(net).max() <= 1e-12 * np.abs(mesh.face_area).max()
    # Area vectors integrate n dA over curved facets, so their lengths undercount the sphere area.
    assert np.pi < mesh.wall_areas.sum() < 4 * np.pi


def test_mesh_rejects_bad_parameters():
    with pytest.raises(ValueError):
        build_mesh(r_far=0.5)
    with pytest.raises(ValueError):
        build_mesh(grading="cubic")
    with pytest.raises(KeyError):
        mesh_from_preset("huge")


def test_uniform_refinement_shrinks_spacing():
    sizes = [build_mesh(2 * k, 2 * k, 4 * k, 3.0, "uniform").spacing() for k in (1, 2, 4)]
    assert sizes[0] / sizes[1] >= 1.5 and sizes[1] / sizes[2] >= 1.5


def test_wall_area_converges_to_sphere():
    gaps = [4 * np.pi - build_mesh(1, k, 2 * k, 2.0).wall_areas.sum() for k in (2, 4, 8)]
    assert gaps[0] > gaps[1] > gaps[2] > 0


def test_diffuse_reflection_examples(tiny):
    grid = build_grid(4.5, 8)
    drift = DriftContext(0.1)
    bnd = build_boundary_operator(tiny.wall_normals, drift, grid)
    sq = drift.sqrt_mu_c(grid.nodes)
    f_out = np.where(bnd.out_mask, sq, 0.0)
    inc = apply_diffuse_reflection(f_out, bnd)
    np.testing.assert_allclose(bnd.z_minus(inc), bnd.z_plus(f_out), rtol=1e-14)
    np.testing.assert_array_equal(apply_diffuse_reflection(np.zeros_like(f_out), bnd), 0)


@given(st.integers(0, 2**31 - 1), st.floats(0.0, 0.5), st.floats(0.05, 1.0))
def test_diffuse_reflection_flux_balance(seed, c, eps):
    mesh = build_mesh(**MESH_PRESETS["tiny"])
    grid = build_grid(4.0, 6)
    drift = DriftContext(eps, (c, 0.0, 0.0))
    bnd = build_boundary_operator(mesh.wall_normals, drift, grid)
    f = np.random.default_rng(seed).normal(size=(mesh.n_wall, grid.size))
    inc = apply_diffuse_reflection(f, bnd)
    zp = bnd.z_plus(f)
    assert np.abs(bnd.z_minus(inc) - zp).max() <= 1e-13 * max(np.abs(zp).max(), 1e-300) + 1e-300


@given(st.integers(0, 2**31 - 1))
def test_diffuse_reflection_idempotent_at_zero_drift(seed):
    mesh = build_mesh(**MESH_PRESETS["tiny"])
    grid = build_grid(4.0, 6)
    bnd = build_boundary_operator(mesh.wall_normals, DriftContext(0.1), grid)
    f = np.random.default_rng(seed).normal(size=(mesh.n_wall, grid.size))
    once = bnd.apply(f)
    np.testing.assert_allclose(bnd.apply(once), once, atol=1e-13 * np.abs(once).max())


def test_continuum_normalization_mismatch_is_quadrature_error(tiny):
    grid = build_grid(6.0, 12)
    drift = DriftContext(0.1)
    cont = build_boundary_operator(tiny.wall_normals, drift, grid, normalization="continuum")
    disc = build_boundary_operator(tiny.wall_normals, drift, grid, normalization="discrete")
    ratio = cont.emit[:, 0] / disc.emit[:, 0]
    # Continuum scale sqrt(2 pi) vs the lattice half-space flux of mu: the lattice error of the wall flux.
    assert np.abs(ratio - 1).max() < 0.1


def test_composite_norm_of_zero(small, tiny):
    grid, drift, op, proj = small
    bnd = build_boundary_operator(tiny.wall_normals, drift, grid)
    f = KineticField.from_values(np.zeros((tiny.n_cells, grid.size)), tiny, grid)
    rep = composite_norm(f, drift, WeightFunction(), proj, bnd, tiny, grid, op.nu)
    assert all(v == 0 for v in rep.components().values())


def test_composite_norm_of_pure_hydrodynamic_field(small, tiny):
    grid, drift, op, proj = small
    bnd = build_boundary_operator(tiny.wall_normals, drift, grid)
    sq = drift.sqrt_mu_c(grid.nodes)
    f = KineticField.from_values(np.broadcast_to(sq, (tiny.n_cells, grid.size)), tiny, grid)
    rep = composite_norm(f, drift, WeightFunction(), proj, bnd, tiny, grid, op.nu)
    assert rep.micro <= 1e-12
    vol = tiny.volumes.sum()
    expect6 = (vol * np.sum(sq**6 * grid.weights)) ** (1 / 6)
    expect3 = np.sqrt(drift.eps) * (vol * np.sum(sq**3 * grid.weights)) ** (1 / 3)
    assert rep.hydro_6 == pytest.approx(expect6, rel=1e-12)
    assert rep.hydro_3 == pytest.approx(expect3, rel=1e-12)
    assert rep.composite == pytest.approx(sum(rep.components().values()), rel=0, abs=0)


@given(st.integers(0, 2**31 - 1), st.floats(-5, 5).filter(lambda a: abs(a) > 1e-3))
def test_norm_homogeneity(seed, alpha):
    mesh = build_mesh(**MESH_PRESETS["tiny"])
    grid = build_grid(4.0, 6)
    drift = DriftContext(0.2, (0.05, 0.0, 0.0))
    proj = build_projector(drift, grid)
    bnd = build_boundary_operator(mesh.wall_normals, drift, grid)
    nu = np.ones(grid.size) + np.linalg.norm(grid.nodes, axis=1)
    f = random_field(np.random.default_rng(seed), mesh, grid, drift)
    a = composite_norm(f, drift, WeightFunction(), proj, bnd, mesh, grid, nu)
    b = composite_norm(alpha * f, drift, WeightFunction(), proj, bnd, mesh, grid, nu)
    for k, v in a.components().items():
        assert getattr(b, k) == pytest.approx(abs(alpha) * v, rel=1e-12)
    for p in (1.5, 2, 3, 6, np.inf):
        assert lp_norm(alpha * f.values, mesh, grid, p) == pytest.approx(abs(alpha) * lp_norm(f.values, mesh, grid, p),
                                                                          rel=1e-12)


@given(st.integers(0, 2**31 - 1))
def test_triangle_inequality(seed):
    mesh = build_mesh(**MESH_PRESETS["tiny"])
    grid = build_grid(4.0, 6)
    drift = DriftContext(0.2)
    proj = build_projector(drift, grid)
    bnd = build_boundary_operator(mesh.wall_normals, drift, grid)
    nu = np.ones(grid.size)
    rng = np.random.default_rng(seed)
    f, g = random_field(rng, mesh, grid, drift), random_field(rng, mesh, grid, drift, 3.0)
    s = KineticField(f.values + g.values, f.wall_trace + g.wall_trace, f.far_trace + g.far_trace)
    args = (drift, WeightFunction(), proj, bnd, mesh, grid, nu)
    nf, ng, ns = composite_norm(f, *args), composite_norm(g, *args), composite_norm(s, *args)
    for k in NormReport.COMPONENTS:
        assert getattr(ns, k) <= (getattr(nf, k) + getattr(ng, k)) * (1 + 1e-12)
    for p in (1.5, 2, 6, np.inf):
        assert lp_norm(s.values, mesh, grid, p) <= (lp_norm(f.values, mesh, grid, p)
                                                    + lp_norm(g.values, mesh, grid, p)) * (1 + 1e-12)
    for side in "+-":
        assert boundary_norm(s.wall_trace, mesh, bnd, side) <= (boundary_norm(f.wall_trace, mesh, bnd, side)
                                                               + boundary_norm(g.wall_trace, mesh, bnd, side)) * (1 + 1e-12)


@given(st.integers(0, 2**31 - 1))
def test_interpolation_inequality(seed):
    mesh = build_mesh(**MESH_PRESETS["tiny"])
    grid = build_grid(4.0, 6)
    drift = DriftContext(0.2)
    proj = build_projector(drift, grid)
    f = random_field(np.random.default_rng(seed), mesh, grid, drift).values
    micro = proj.residue(f)
    chk = interpolation_check(micro, f, mesh, grid)
    assert chk["l6"] <= chk["bound_self"] * (1 + 1e-12)
    if np.abs(micro).max() <= np.abs(f).max():
        assert chk["l6"] <= chk["bound_full"] * (1 + 1e-12)


def test_m_functional_examples(small, tiny, rng):
    grid, drift, op, proj = small
    bnd = build_boundary_operator(tiny.wall_normals, drift, grid)
    args = (drift, WeightFunction(), proj, bnd, tiny, grid, op.nu)
    zero = m_functional(np.zeros((tiny.n_cells, grid.size)), np.zeros((tiny.n_wall, grid.size)), *args)
    assert all(v == 0 for v in zero.values())
    g = rng.normal(size=(tiny.n_cells, grid.size)) * drift.sqrt_mu_c(grid.nodes)
    r = np.where(bnd.out_mask, 0.0, rng.normal(size=(tiny.n_wall, grid.size)))
    one = m_functional(g, r, *args)
    two = m_functional(g, 2 * r, *args)
    for k in R_TERMS:
        assert two[k] == pytest.approx(4 * one[k], rel=1e-12)
    for k in set(one) - set(R_TERMS):
        assert two[k] == one[k]
    with pytest.raises(ValueError):
        m_functional(g, r, *args, sigma=0.2)


def test_energy_ledger_green_identity(small, tiny, rng):
    grid, drift, op, proj = small
    bnd = build_boundary_operator(tiny.wall_normals, drift, grid)
    f = random_field(rng, tiny, grid, drift)
    led = energy_ledger(f, np.zeros_like(f.values), drift, bnd, tiny, grid, op, proj)
    assert abs(led["green_defect"]) <= 1e-12 * (abs(led["transport"]) + led["dissipation"])
    assert led["dissipation"] >= 0


def test_energy_ledger_field_away_from_wall(small, rng):
    grid, drift, op, proj = small
    mesh = build_mesh(4, 2, 4, 4.0, "uniform")
    bnd = build_boundary_operator(mesh.wall_normals, drift, grid)
    vals = rng.normal(size=(mesh.n_cells, grid.size))
    vals[mesh.shell_index() == 0] = 0
    vals[mesh.shell_index() == mesh.shape[0] - 1] = 0
    f = KineticField.from_values(vals, mesh, grid)
    led = energy_ledger(f, np.zeros_like(vals), drift, bnd, mesh, grid)
    assert led["boundary_out"] == 0 and led["boundary_in"] == 0
    assert abs(led["green_defect"]) <= 1e-12 * abs(led["transport"])
