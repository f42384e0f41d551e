import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from kinhydro.expansion import FluidField
from kinhydro.kinetic import (
    LEDGER_COLUMNS, MaxSweepsExceeded, PositivitySolver, build_transport, exact_problem_flux, linear_solve,
    manufactured_solution, positivity_iteration, setup_problem, total_density, truncate, write_field,
)
from kinhydro.mesh import MESH_PRESETS, build_boundary_operator, build_mesh
from kinhydro.norms import energy_ledger
from kinhydro.velocity import DriftContext, build_grid


@pytest.fixture(scope="module")
def tiny_system(small):
    grid, drift, op, proj = small
    mesh = build_mesh(**MESH_PRESETS["tiny"])
    bnd = build_boundary_operator(mesh.wall_normals, drift, grid)
    return mesh, bnd, build_transport(mesh, op, bnd)


@pytest.fixture(scope="module")
def small_run(cache_dir):
    mesh = build_mesh(4, 2, 4, 4.0)
    prob = setup_problem(0.2, (0.05, 0.0, 0.0), mesh=mesh, v_max=4.5, n_per_axis=8, cache_dir=cache_dir)
    return prob, positivity_iteration(prob, tol_outer=1e-8)


def random_data(rng, mesh, bnd, grid, drift, proj):
    sq = drift.sqrt_mu_c(grid.nodes)
    g = proj.residue(rng.normal(size=(mesh.n_cells, grid.size)) * sq)
    r = np.where(bnd.out_mask, 0.0, rng.normal(size=(mesh.n_wall, grid.size)) * sq)
    return g, r


def test_zero_data_gives_zero_solution(small, tiny_system):
    grid, *_ = small
    mesh, bnd, system = tiny_system
    sol = linear_solve(np.zeros((mesh.n_cells, grid.size)), np.zeros((mesh.n_wall, grid.size)), system)
    assert sol.iterations == 0
    assert not np.any(sol.field.values) and not np.any(sol.field.wall_trace)


def test_gmres_and_source_iteration_agree(small, tiny_system, rng):
    grid, drift, op, proj = small
    mesh, bnd, system = tiny_system
    g, r = random_data(rng, mesh, bnd, grid, drift, proj)
    a = linear_solve(g, r, system, tol=1e-11, method="gmres").field.values
    b = linear_solve(g, r, system, tol=1e-12, method="richardson", max_sweeps=20000).field.values
    assert np.abs(a - b).max() <= 1e-8 * np.abs(a).max()


def test_linear_solve_errors(small, tiny_system, rng):
    grid, drift, op, proj = small
    mesh, bnd, system = tiny_system
    g, r = random_data(rng, mesh, bnd, grid, drift, proj)
    with pytest.raises(MaxSweepsExceeded) as info:
        linear_solve(g, r, system, method="richardson", max_sweeps=2)
    assert info.value.residual > 0
    with pytest.raises(ValueError):
        linear_solve(g, r, system, method="jacobi")


def test_discrete_energy_balance(small, tiny_system):
    # Testing the upwind scheme against its own solution: transport + 2 eps^-1 <f, L f> = 2 <f, g>.
    grid, drift, op, proj = small
    mesh, bnd, system = tiny_system
    ratios = []
    for seed in range(10):
        g, r = random_data(np.random.default_rng(seed), mesh, bnd, grid, drift, proj)
        f = linear_solve(g, r, system, tol=1e-12).field
        led = energy_ledger(f, g, drift, bnd, mesh, grid, op, proj)
        scale = abs(led["transport"]) + abs(led["collision"]) + abs(led["source"])
        assert abs(led["transport"] + 2 * led["collision"] - 2 * led["source"]) <= 1e-8 * scale
        assert abs(led["green_defect"]) <= 1e-10 * scale
        # Coercive side of the energy estimate against its data side: finite measured constant.
        lhs = led["micro_nu_sq"] / drift.eps + led["boundary_out"]
        rhs = abs(led["source"]) + led["boundary_in"]
        ratios.append(lhs / rhs)
    assert np.all(np.isfinite(ratios)) and max(ratios) / min(ratios) < 100


def test_manufactured_solution_small_meshes(small):
    grid, drift, op, proj = small
    errs = []
    for k in (1, 2):
        mesh = build_mesh(2 * k, 2 * k, 4 * k, 3.0, "uniform")
        bnd = build_boundary_operator(mesh.wall_normals, drift, grid)
        errs.append(manufactured_solution(mesh, op, bnd)["error"])
    assert errs[1] < errs[0] < 1


@given(st.integers(0, 2**31 - 1), st.floats(0.05, 1.0))
def test_truncation_identities(seed, eps):
    grid = build_grid(4.0, 6)
    drift = DriftContext(eps, (0.05, 0.0, 0.0))
    rng = np.random.default_rng(seed)
    n = 5
    Q = rng.uniform(-0.5, 0.5, size=(n, grid.size)) * drift.sqrt_mu_c(grid.nodes) / eps
    R1 = rng.normal(size=(n, grid.size)) * 10
    R2 = rng.normal(size=(n, grid.size)) * 10
    s1, s2 = truncate(R1, Q, drift, grid), truncate(R2, Q, drift, grid)
    assert np.all(s1.R_bar - s1.R - s1.R_tilde == 0)
    assert np.all(np.abs(s1.R_bar) <= np.abs(s1.R))
    assert np.all(s1.R_tilde[~s1.mask] == 0)
    assert np.all(np.abs(s1.R_bar - s2.R_bar) <= np.abs(R1 - R2) * (1 + 1e-12))
    F = total_density(s1.R_bar, Q, drift, grid)
    assert F.min() >= -1e-12 * drift.mu_c(grid.nodes).max()


def test_positivity_zero_flow_is_trivial(cache_dir):
    def still(x):
        n = len(x)
        return FluidField(x, np.zeros((n, 3)), np.zeros((n, 3, 3)), np.zeros((n, 3, 3, 3)), np.zeros(n))

    prob = setup_problem(0.2, (0.0, 0.0, 0.0), mesh="tiny", v_max=4.0, n_per_axis=6, cache_dir=cache_dir,
                         fluid_sampler=still)
    res = positivity_iteration(prob)
    assert res.converged and len(res.ledger.rows) == 1
    assert not np.any(res.R.values)


def test_positivity_small_run(small_run):
    prob, res = small_run
    assert res.converged
    lam = res.ledger.column("lambda")[1:]
    assert np.all(lam[np.isfinite(lam)] < 1)
    assert res.ledger.column("min_F").min() >= -1e-10
    assert res.ledger.column("mask_fraction")[-1] <= 1e-3
    assert np.isnan(res.ledger.rows[0]["lambda"])
    assert [r["ell"] for r in res.ledger.rows] == list(range(1, len(res.ledger.rows) + 1))


def test_far_field_decay(small_run):
    prob, res = small_run
    mesh, grid = prob.mesh, prob.grid
    shell = mesh.shell_index()

    def shell_rms(s):
        sel = shell == s
        return np.sqrt(np.sum(res.R.values[sel] ** 2 * grid.weights * mesh.volumes[sel, None]) / mesh.volumes[sel].sum())

    ns = mesh.shape[0]
    assert shell_rms(ns - 1) < shell_rms(ns // 2)


def test_exact_problem_flux_small(small_run):
    prob, _ = small_run
    out = exact_problem_flux(prob)
    assert out["z_r_max"] <= 1e-6
    assert out["zgamma_max"] <= 1e-6


def test_ledger_csv_and_field_dump(small_run, tmp_path):
    prob, res = small_run
    path = tmp_path / "ledger.csv"
    res.ledger.write_csv(str(path))
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == LEDGER_COLUMNS
    assert len(rows) == len(res.ledger.rows) + 1
    assert b"\r\n" not in path.read_bytes()
    write_field(str(tmp_path / "field"), res.R)
    np.testing.assert_array_equal(np.load(tmp_path / "field" / "values.npy"), res.R.values)


def test_estimator_api(cache_dir):
    est = PositivitySolver(eps=0.2, c=(0.02, 0.0, 0.0), mesh="tiny", v_max=4.0, n_per_axis=6, cache_dir=cache_dir)
    assert est.get_params()["eps"] == 0.2
    F = est.fit().predict()
    assert est.converged_
    assert F.shape == (est.problem_.mesh.n_cells, est.problem_.grid.size)
    assert est.norm_report().composite >= 0
