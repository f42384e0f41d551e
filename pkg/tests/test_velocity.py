import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, stats

from kinhydro.velocity import (
    MAX_ORACLE_DEGREE, DriftContext, MaxwellianParams, Poly, VelocityGrid, WeightFunction, build_grid,
    gaussian_moment, grid_moment, maxwellian, moment_identities, moment_table, standard_maxwellian,
    wall_flux_grid, wall_flux_oracle, wall_maxwellian,
)


def normal_moment(p):
    """Independent 1D oracle: E[X^p] for a standard normal, from scipy."""
    return float(stats.norm.moment(p)) if p > 0 else 1.0


def product_oracle(poly):
    return sum(c * normal_moment(i) * normal_moment(j) * normal_moment(k) for (i, j, k), c in poly.terms.items())


def test_default_grid_mass_against_factorized_oracle():
    g = build_grid(6.0, 12)
    assert g.size == 1728
    oracle = gaussian_moment(Poly.const(1.0))
    assert abs(oracle - 1.0) < 1e-14
    assert abs(g.integrate(standard_maxwellian(g.nodes)) - oracle) < 1e-6


def test_coarse_grid_is_symmetric_but_inaccurate():
    g = build_grid(6.0, 2)
    assert g.size == 8
    assert np.array_equal(g.nodes[g.negation_map()], -g.nodes)
    assert abs(g.integrate(standard_maxwellian(g.nodes)) - 1.0) > 0.1


@pytest.mark.parametrize("args", [(-1.0, 12), (0.0, 12), (6.0, 7), (6.0, 0)])
def test_build_grid_rejects_bad_input(args):
    with pytest.raises(ValueError):
        build_grid(*args)


@pytest.mark.parametrize("v_max,n", [(6.0, 12), (4.0, 6), (4.5, 8), (5.0, 10)])
def test_grid_invariants(v_max, n):
    g = build_grid(v_max, n)
    assert np.all(g.weights > 0)
    assert np.all(np.abs(g.nodes) < v_max)
    assert np.array_equal(g.nodes[g.negation_map()], -g.nodes)


def test_grid_spec_text_round_trip():
    g = build_grid(4.5, 8)
    g2 = VelocityGrid.from_spec_text(g.spec_text())
    assert g2.hash() == g.hash()
    assert np.array_equal(g2.nodes, g.nodes)


def test_maxwellian_at_origin():
    assert maxwellian(MaxwellianParams(1.0, (0, 0, 0), 1.0), np.zeros(3)) == pytest.approx((2 * np.pi) ** -1.5, rel=1e-15)


def test_drifted_maxwellian_is_shifted_standard(rng):
    d = DriftContext(0.1, (0.3, -0.2, 0.1))
    v = rng.normal(size=(50, 3))
    np.testing.assert_allclose(maxwellian(MaxwellianParams(1.0, d.shift, 1.0), v), standard_maxwellian(v - d.shift),
                               rtol=1e-14)
    np.testing.assert_allclose(d.mu_c(v), standard_maxwellian(v - d.shift), rtol=1e-14)
    np.testing.assert_allclose(d.sqrt_mu_c(v) ** 2, d.mu_c(v), rtol=1e-13)


def test_maxwellian_rejects_bad_params():
    with pytest.raises(ValueError):
        MaxwellianParams(0.0, (0, 0, 0), 1.0)
    with pytest.raises(ValueError):
        MaxwellianParams(1.0, (0, 0, 0), -1.0)


def test_wall_flux_against_adaptive_quadrature():
    # Half-space flux of sqrt(2 pi) mu through e_3, factorized into normal and tangential 1D integrals.
    phi = stats.norm.pdf
    normal, _ = integrate.quad(lambda s: s * phi(s), 0, np.inf, epsabs=1e-14)
    tangential, _ = integrate.quad(phi, -np.inf, np.inf, epsabs=1e-14)
    val = np.sqrt(2 * np.pi) * normal * tangential**2
    assert abs(val - 1.0) < 1e-10
    assert abs(wall_flux_oracle() - val) < 1e-10
    np.testing.assert_allclose(wall_maxwellian(np.zeros((1, 3))), np.sqrt(2 * np.pi) * (2 * np.pi) ** -1.5)


def test_wall_flux_on_grid_converges():
    # The half-space cut at v . n = 0 makes the lattice rule low order; measure it.
    errs = [abs(wall_flux_grid(build_grid(6.0, n), (0, 0, 1)) - 1.0) for n in (12, 24, 48)]
    assert errs[0] > errs[1] > errs[2]
    assert np.log2(errs[0] / errs[2]) / 2 >= 1.5


def test_drift_context_validation():
    with pytest.raises(ValueError):
        DriftContext(0.0)
    with pytest.raises(ValueError):
        DriftContext(1.5)
    with pytest.raises(ValueError):
        DriftContext(0.1, (1.0, 0.0, 0.0))


def test_weight_function():
    with pytest.raises(ValueError):
        WeightFunction(0.25, 0)
    w = WeightFunction(0.01, 4)
    v = np.array([[1.0, 2.0, 2.0]])
    assert w(v)[0] == pytest.approx(10.0**2 * math.exp(0.09), rel=1e-14)


@pytest.mark.parametrize("label_poly_expected", moment_identities(), ids=lambda r: r[0])
def test_moment_identities_oracle(label_poly_expected):
    _, poly, expected = label_poly_expected
    assert abs(gaussian_moment(poly) - expected) <= 1e-10
    assert abs(product_oracle(poly) - expected) <= 1e-10


def test_degree_overflow():
    x = Poly.var(0)
    p = x * x * x * x * x * x * x * x * x
    with pytest.raises(ValueError):
        gaussian_moment(p)


monomial = st.tuples(st.integers(0, 4), st.integers(0, 4), st.integers(0, 4)).filter(lambda e: sum(e) <= 8)


@given(st.dictionaries(monomial, st.floats(-3, 3), min_size=1, max_size=6))
def test_gaussian_moment_matches_scipy_oracle(terms):
    poly = Poly(dict(terms))
    ref = product_oracle(poly)
    scale = 1 + sum(abs(c) * 105 for c in terms.values())
    assert abs(gaussian_moment(poly) - ref) <= 1e-12 * scale


ODD_EXPONENTS = st.tuples(st.integers(0, 3), st.integers(0, 3), st.integers(0, 3)).filter(
    lambda e: sum(e) % 2 == 1 and sum(e) <= MAX_ORACLE_DEGREE)


def test_degree_above_oracle_limit_raises():
    with pytest.raises(ValueError):
        gaussian_moment(Poly({(3, 3, 3): 1.0}))


@given(ODD_EXPONENTS, st.floats(0.05, 1.0), st.floats(-0.5, 0.5))
def test_odd_moments_vanish(exps, eps, cx):
    poly = Poly({exps: 1.0})
    drift = DriftContext(eps, (cx, 0.0, 0.0))
    assert abs(gaussian_moment(poly, drift)) < 1e-12
    g = build_grid(4.5, 8)
    # On the symmetric grid with zero drift every odd moment cancels pairwise.
    assert abs(grid_moment(poly, g)) < 1e-15


@pytest.mark.parametrize("c", [(0.0, 0.0, 0.0), (0.4, -0.3, 0.2)])
def test_lab_frame_moment_of_drifted_mean(c):
    d = DriftContext(0.5, c)
    for i in range(3):
        assert gaussian_moment(Poly.var(i), d, lab_frame=True) == pytest.approx(d.shift[i], abs=1e-14)


def test_grid_moments_converge_at_least_second_order():
    p = Poly.speed2() * Poly.speed2()
    ref = gaussian_moment(p)
    hs, errs = [], []
    for n in (6, 8, 10):
        g = build_grid(6.0, n)
        hs.append(g.spacing)
        errs.append(abs(grid_moment(p, g) - ref))
    order = np.polyfit(np.log(hs), np.log(errs), 1)[0]
    assert order >= 2


def test_moment_table_rows():
    rows = moment_table(build_grid(6.0, 12))
    labels = [r["poly"] for r in rows]
    assert "wall_flux" in labels
    assert max(r["abs_error"] for r in rows) <= 1e-10
    assert max(r["grid_error"] for r in rows if r["poly"] != "wall_flux") <= 1e-2
