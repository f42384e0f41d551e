"""One test per acceptance criterion, at the stated tolerances and runtime budgets."""

import time

import numpy as np
import pytest

from kinhydro.collision import (
    CollisionKernel, build_linearized, build_projector, fit_nu, null_residuals, spectral_gap, transport_coefficients,
)
from kinhydro.kinetic import (
    exact_problem_flux, manufactured_solution, positivity_iteration, scaling_study, setup_problem, total_density,
    truncate,
)
from kinhydro.mesh import KineticField, build_boundary_operator, build_mesh
from kinhydro.navier_stokes import build_problem, norm_sweep, oseen_iterate
from kinhydro.norms import NormReport, composite_norm, lp_norm
from kinhydro.oseen import (
    KGrid, MultiplierSpec, SpectralState, balance_residual, dense_oracle, leray, multiplier_norm_scan, slope_fit,
    solve_macroscopic,
)
from kinhydro.velocity import DriftContext, Poly, WeightFunction, build_grid, gaussian_moment, wall_flux_oracle

C_SWEEP = (0.1, 0.05, 0.025, 0.0125)
SEEDS = range(100)


def v(i):
    return Poly.var(i)


def test_criterion_1_moment_oracles():
    t0 = time.perf_counter()
    s2 = Poly.speed2()
    drift = DriftContext(0.1, (0.05, -0.02, 0.01))
    errs = []
    for i in range(3):
        for j in range(3):
            eye = 1.0 if i == j else 0.0
            errs.append(gaussian_moment(v(i) * v(j) * (s2 - 3) * 0.5 * (s2 - 5), drift) - 5 * eye)
            errs.append(gaussian_moment(v(i) * v(j) * (s2 - 10), drift) + 5 * eye)
            errs.append(gaussian_moment((v(i) * v(i) - 1) * v(j) * v(j), drift) - 2 * eye)
    errs.append(wall_flux_oracle() - 1.0)
    assert max(abs(e) for e in errs) <= 1e-10
    assert time.perf_counter() - t0 < 1.0


def test_criterion_2_linearized_operator(tmp_path):
    t0 = time.perf_counter()
    grid = build_grid(6.0, 12)
    drift = DriftContext(0.1, (0.05, 0.0, 0.0))
    op = build_linearized(drift, CollisionKernel(), grid, cache_dir=str(tmp_path))
    proj = build_projector(drift, grid)
    assert op.symmetry_defect <= 1e-10
    res = null_residuals(op, proj)
    assert set(res) == {"psi0", "psi1", "psi2", "psi3", "psi4", "f1"}
    assert max(res.values()) <= 1e-5
    gap = spectral_gap(op, proj)
    assert gap.gap > 0
    assert 0.9 <= fit_nu(op).exponent <= 1.1
    tc = transport_coefficients(op, proj)
    assert tc.viscosity > 0 and tc.conductivity > 0
    assert time.perf_counter() - t0 < 300


def test_criterion_3_multiplier_scan():
    t0 = time.perf_counter()
    kg = KGrid(32.0, 8)
    failures = []
    q = 1.75
    norms = [multiplier_norm_scan(MultiplierSpec(0.1, 1.0, 0.1, (c, 0.0, 0.0)), q, 0, kg, 2).value for c in C_SWEEP]
    slope = slope_fit(C_SWEEP, norms)
    bound = 1 / (5 + 2 * q) / q + 0.05
    if abs(slope) > bound:
        failures.append(f"|slope| {abs(slope):.4f} > {bound:.4f}")
    spec0 = MultiplierSpec(0.1, 1.0, 0.1)
    lo = multiplier_norm_scan(spec0, 1.4, 0, kg, 2)
    hi = multiplier_norm_scan(spec0, 1.6, 0, kg, 2)
    if lo.levels[-1] / lo.levels[0] > 1.1:
        failures.append(f"q = 1.4 ratio {lo.levels[-1] / lo.levels[0]:.4f} > 1.1")
    if hi.levels[-1] / hi.levels[0] < 1.3:
        failures.append(f"q = 1.6 ratio {hi.levels[-1] / hi.levels[0]:.4f} < 1.3")
    elapsed = time.perf_counter() - t0
    if elapsed >= 60:
        failures.append(f"runtime {elapsed:.1f} s")
    assert not failures, "; ".join(failures)


def test_criterion_4_oseen_solver():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    kg = KGrid(16.0, 8)
    shape = kg.kmag.shape
    src = SpectralState.sources(rng.normal(size=shape) + 1j * rng.normal(size=shape),
                                rng.normal(size=(3,) + shape) + 1j * rng.normal(size=(3,) + shape),
                                rng.normal(size=shape) + 1j * rng.normal(size=shape))
    spec = MultiplierSpec(1.0, 1.0, 0.1, (0.05, 0.0, 0.0))
    transport = (0.9871, 2.1)
    fast = solve_macroscopic(src, transport, spec, kg.k)
    ref = dense_oracle(src, transport, spec, kg.k)
    for name in ("a_hat", "b_hat", "c_hat"):
        a, b = getattr(fast, name), getattr(ref, name)
        assert np.abs(a - b).max() <= 1e-10 * np.abs(b).max()
    assert balance_residual(fast, transport, spec, kg.k) <= 1e-12
    assert time.perf_counter() - t0 < 10


def test_criterion_5_exterior_navier_stokes():
    t0 = time.perf_counter()
    norms = []
    for c in C_SWEEP:
        prob = build_problem((c, 0.0, 0.0), L=32.0, n=48)
        assert prob.lift_report["boundary_max"] <= 1e-3
        assert prob.lift_report["far_max_dev"] == 0
        state = oseen_iterate(prob)
        if c == 0.05:
            assert max(h["ratio"] for h in state.history[1:]) < 1
            assert state.history[-1]["rel_step"] < 1e-8
        norms.append(norm_sweep(prob.w + state.v, prob.c, prob.box, prob.geom, (3,))["full"][3])
    assert 0.9 <= slope_fit(C_SWEEP, norms) <= 1.1
    assert time.perf_counter() - t0 < 600


def test_criterion_6_manufactured_solution(tmp_path):
    t0 = time.perf_counter()
    grid = build_grid(4.0, 8)
    drift = DriftContext(0.5)
    op = build_linearized(drift, CollisionKernel(), grid, cache_dir=str(tmp_path))
    hs, errs = [], []
    for k in (1, 2, 4):
        mesh = build_mesh(2 * k, 2 * k, 4 * k, 3.0, "uniform")
        out = manufactured_solution(mesh, op, build_boundary_operator(mesh.wall_normals, drift, grid))
        hs.append(out["h"])
        errs.append(out["error"])
    assert errs[0] > errs[1] > errs[2]
    assert slope_fit(hs, errs) >= 0.8
    assert time.perf_counter() - t0 < 600


@pytest.mark.slow
def test_criterion_7_positivity_iteration(cache_dir):
    t0 = time.perf_counter()
    prob = setup_problem(0.1, (0.05, 0.0, 0.0), mesh="desk", cache_dir=cache_dir)
    res = positivity_iteration(prob)
    assert res.converged
    lam = res.ledger.column("lambda")[1:]
    assert np.all(lam < 1)
    F = total_density(res.R.values, prob.terms.Q_profile, prob.drift, prob.grid)
    assert F.min() >= -1e-10
    assert res.ledger.rows[-1]["mask_fraction"] <= 1e-3
    assert exact_problem_flux(prob)["zgamma_max"] <= 1e-6
    assert time.perf_counter() - t0 < 1800


@pytest.mark.slow
def test_criterion_8_scaling_study(cache_dir):
    t0 = time.perf_counter()
    eps_list = (0.2, 0.1, 0.05)
    rows = {}
    for c in (0.05, 0.025):
        for row in scaling_study(eps_list, c, cache_dir=cache_dir):
            rows[(row["eps"], c)] = row
    failures = []
    for c in (0.05, 0.025):
        micro = [rows[(e, c)]["micro_L2_over_eps"] for e in eps_list]
        if max(micro) / min(micro) > 4:
            failures.append(f"|c| = {c}: micro/eps spread {max(micro) / min(micro):.2f} > 4")
        l6 = [rows[(e, c)]["R_L6"] for e in eps_list]
        if max(l6) / min(l6) > 2:
            failures.append(f"|c| = {c}: L6 spread {max(l6) / min(l6):.2f} > 2")
    # One constant per component, fitted at the larger drift, must also bound the smaller one.
    for comp in NormReport.COMPONENTS:
        C = max(rows[(e, 0.05)][comp] / 0.05 for e in eps_list)
        if not all(rows[(e, 0.025)][comp] <= C * 0.025 for e in eps_list):
            failures.append(f"{comp} not bounded by shared C")
    elapsed = time.perf_counter() - t0
    if elapsed >= 7200:
        failures.append(f"runtime {elapsed:.0f} s")
    assert not failures, "; ".join(failures)


def test_criterion_9_invariant_suites():
    t0 = time.perf_counter()
    grid = build_grid(4.0, 6)
    mesh = build_mesh(2, 2, 4, 3.0)
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        eps = rng.uniform(0.05, 1.0)
        drift = DriftContext(eps, tuple(rng.uniform(-0.1, 0.1, 3)))
        sq = drift.sqrt_mu_c(grid.nodes)

        # truncation algebra
        Q = rng.uniform(-0.5, 0.5, size=(4, grid.size)) * sq / eps
        R1, R2 = rng.normal(size=(2, 4, grid.size)) * 10
        s1, s2 = truncate(R1, Q, drift, grid), truncate(R2, Q, drift, grid)
        assert np.all(s1.R_bar - s1.R - s1.R_tilde == 0)
        assert np.all(np.abs(s1.R_bar) <= np.abs(R1))
        assert np.all(s1.R_tilde[~s1.mask] == 0)
        assert np.all(np.abs(s1.R_bar - s2.R_bar) <= np.abs(R1 - R2) * (1 + 1e-12))

        # norm homogeneity
        proj = build_projector(drift, grid)
        bnd = build_boundary_operator(mesh.wall_normals, drift, grid)
        nu = 1 + np.linalg.norm(grid.nodes, axis=1)
        f = KineticField.from_values(rng.normal(size=(mesh.n_cells, grid.size)) * sq, mesh, grid,
                                     wall_in=rng.normal(size=(mesh.n_wall, grid.size)))
        alpha = rng.uniform(-5, 5)
        args = (drift, WeightFunction(), proj, bnd, mesh, grid, nu)
        a, b = composite_norm(f, *args), composite_norm(f * alpha, *args)
        for comp in NormReport.COMPONENTS:
            assert abs(getattr(b, comp) - abs(alpha) * getattr(a, comp)) <= 1e-12 * abs(alpha) * getattr(a, comp)
        for p in (2, 3, 6, np.inf):
            na = lp_norm(f.values, mesh, grid, p)
            assert abs(lp_norm(alpha * f.values, mesh, grid, p) - abs(alpha) * na) <= 1e-12 * abs(alpha) * na

        # Leray idempotence and transversality
        k = rng.normal(size=(3, 32))
        w = rng.normal(size=(3, 32)) + 1j * rng.normal(size=(3, 32))
        pw = leray(w, k)
        assert np.abs(leray(pw, k) - pw).max() <= 1e-13 * np.abs(w).max()
        assert np.abs(np.sum(k * pw, axis=0)).max() <= 1e-13 * np.abs(w).max() * np.abs(k).max()

        # diffuse-reflection flux conservation at zero drift
        b0 = build_boundary_operator(mesh.wall_normals, DriftContext(eps), grid)
        out = np.where(b0.out_mask, rng.normal(size=(mesh.n_wall, grid.size)), 0.0)
        zp = b0.z_plus(out)
        assert np.abs(b0.z_minus(b0.apply(out)) - zp).max() <= 1e-13 * np.abs(zp).max()
    assert time.perf_counter() - t0 < 300
