"""First- and second-order expansion terms driven by a fluid field.

All kinetic quantities are arrays of shape (n_points, N) over spatial sample
points and velocity nodes. The second-order term is built from a precomputed
velocity basis (L^{-1} applied to nine tensor components), which is exact by
linearity and avoids a linear solve per point.
"""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .collision import (CollisionKernel, HydroProjector, LinearizedOperator, gamma_bilinear,
                        gamma_sym, solve_linv, weighted_norm)
from .mesh import BoundaryOperator
from .velocity import DriftContext, VelocityGrid

TOL_DIV = 1e-8
TOL_BC = 1e-10


@dataclass
class FluidField:
    """Velocity u (with total flow c + u), its first and second derivatives, and pressure.

    ``grad_u[m, k, j]`` is d_k u_j and ``hess_u[m, l, k, j]`` is d_l d_k u_j.
    ``ns_residual`` is the max-norm momentum residual of the steady
    incompressible equations, attached to every second-order report.
    """

    points: np.ndarray
    u: np.ndarray
    grad_u: np.ndarray
    hess_u: np.ndarray
    pressure: np.ndarray
    ns_residual: float = 0.0

    @property
    def divergence(self) -> np.ndarray:
        return np.trace(self.grad_u, axis1=1, axis2=2)

    def subset(self, idx) -> "FluidField":
        return FluidField(self.points[idx], self.u[idx], self.grad_u[idx], self.hess_u[idx],
                          self.pressure[idx], self.ns_residual)


def _radial_terms(x, c, n):
    """c_i r^-n and s x_i r^-n (s = c.x) with first and second derivatives."""
    r2 = np.sum(x * x, axis=1)
    r = np.sqrt(r2)
    s = x @ c
    eye = np.eye(3)
    rn, rn2, rn4 = r ** -n, r ** (-n - 2), r ** (-n - 4)
    # A_i = c_i r^-n
    A = c[None, :] * rn[:, None]
    dA = -n * np.einsum("i,mk,m->mki", c, x, rn2)
    ddA = -n * (np.einsum("i,lk,m->mlki", c, eye, rn2)
                - (n + 2) * np.einsum("i,ml,mk,m->mlki", c, x, x, rn4))
    # B_i = s x_i r^-n
    B = (s * rn)[:, None] * x
    dB = (np.einsum("k,mi,m->mki", c, x, rn) + np.einsum("m,ik,m->mki", s, eye, rn)
          - n * np.einsum("m,mi,mk,m->mki", s, x, x, rn2))
    ddB = (np.einsum("k,il,m->mlki", c, eye, rn) - n * np.einsum("k,mi,ml,m->mlki", c, x, x, rn2)
           + np.einsum("l,ik,m->mlki", c, eye, rn) - n * np.einsum("m,ik,ml,m->mlki", s, eye, x, rn2)
           - n * (np.einsum("l,mi,mk,m->mlki", c, x, x, rn2) + np.einsum("m,il,mk,m->mlki", s, eye, x, rn2)
                  + np.einsum("m,mi,kl,m->mlki", s, x, eye, rn2))
           + n * (n + 2) * np.einsum("m,mi,mk,ml,m->mlki", s, x, x, x, rn4))
    return (A, dA, ddA), (B, dB, ddB)


def stokes_flow(points: np.ndarray, c_inf, viscosity: float = 1.0) -> FluidField:
    """Creeping flow past the unit sphere, as a perturbation u of the stream c.

    u = -c on |x| = 1, u -> 0 at infinity, div u = 0 exactly. The reported
    residual is the neglected advection (c + u) . grad u.
    """
    x = np.atleast_2d(np.asarray(points, dtype=float))
    c = np.asarray(c_inf, dtype=float)
    A1, dA1, ddA1 = _radial_terms(x, c, 1)[0]
    (A3, dA3, ddA3), (B3, dB3, ddB3) = _radial_terms(x, c, 3)
    B5, dB5, ddB5 = _radial_terms(x, c, 5)[1]
    u = -0.75 * (A1 + B3) - 0.25 * (A3 - 3 * B5)
    du = -0.75 * (dA1 + dB3) - 0.25 * (dA3 - 3 * dB5)
    ddu = -0.75 * (ddA1 + ddB3) - 0.25 * (ddA3 - 3 * ddB5)
    r = np.linalg.norm(x, axis=1)
    pressure = -1.5 * viscosity * (x @ c) / r**3
    adv = np.einsum("mk,mkj->mj", c[None, :] + u, du)
    return FluidField(x, u, du, ddu, pressure, float(np.abs(adv).max()) if len(x) else 0.0)


def uniform_flow(points: np.ndarray, u_const) -> FluidField:
    x = np.atleast_2d(np.asarray(points, dtype=float))
    m = x.shape[0]
    u = np.broadcast_to(np.asarray(u_const, dtype=float), (m, 3)).copy()
    return FluidField(x, u, np.zeros((m, 3, 3)), np.zeros((m, 3, 3, 3)), np.zeros(m))


@dataclass
class ExpansionBasis:
    """Velocity functions from which the second-order term is assembled.

    strain[k, j] = L^{-1}(I - P)(v_k v_j sqrt(mu_c)) and
    quad[j, l] = L^{-1} Gamma~(v_j sqrt(mu_c), v_l sqrt(mu_c)), all in the drifted frame.
    """

    strain: np.ndarray
    quad: np.ndarray
    op: LinearizedOperator
    proj: HydroProjector
    kernel: CollisionKernel


def build_basis(op: LinearizedOperator, proj: HydroProjector) -> ExpansionBasis:
    drift, grid = op.drift, op.grid
    vc = drift.v_c(grid.nodes)
    sq = drift.sqrt_mu_c(grid.nodes)
    e = vc.T * sq
    strain = solve_linv(proj.residue(vc.T[:, None, :] * vc.T[None, :, :] * sq), op, proj)
    pairs = gamma_sym(np.repeat(e, 3, axis=0), np.tile(e, (3, 1)), drift, grid, op.kernel)
    quad = solve_linv(pairs.reshape(3, 3, -1), op, proj)
    return ExpansionBasis(strain, quad, op, proj, op.kernel)


def build_f1(fluid: FluidField, drift: DriftContext, grid: VelocityGrid) -> np.ndarray:
    """f1 = sqrt(mu_c) u . v_c."""
    return (fluid.u @ drift.v_c(grid.nodes).T) * drift.sqrt_mu_c(grid.nodes)


def grad_f1(fluid: FluidField, drift: DriftContext, grid: VelocityGrid) -> np.ndarray:
    """d_i f1 with shape (m, 3, N)."""
    return np.einsum("mij,vj->miv", fluid.grad_u, drift.v_c(grid.nodes)) * drift.sqrt_mu_c(grid.nodes)


def transport(grad: np.ndarray, grid: VelocityGrid) -> np.ndarray:
    """v . grad f from a gradient array of shape (m, 3, N)."""
    return np.einsum("vi,miv->mv", grid.nodes, grad)


def build_f2(fluid: FluidField, basis: ExpansionBasis) -> np.ndarray:
    """f2 = L^{-1}[-(I - P)(v . grad f1) + Gamma(f1, f1)], assembled from the basis."""
    return (-np.einsum("mkj,kjv->mv", fluid.grad_u, basis.strain)
            + np.einsum("mj,ml,jlv->mv", fluid.u, fluid.u, basis.quad))


def grad_f2(fluid: FluidField, basis: ExpansionBasis) -> np.ndarray:
    quad_grad = (np.einsum("mij,ml,jlv->miv", fluid.grad_u, fluid.u, basis.quad)
                 + np.einsum("mj,mil,jlv->miv", fluid.u, fluid.grad_u, basis.quad))
    return -np.einsum("mikj,kjv->miv", fluid.hess_u, basis.strain) + quad_grad


def f2_direct(fluid: FluidField, op: LinearizedOperator, proj: HydroProjector) -> np.ndarray:
    """Reference f2 by one linear solve per point (slow; for verification)."""
    f1 = build_f1(fluid, op.drift, op.grid)
    rhs = -proj.residue(transport(grad_f1(fluid, op.drift, op.grid), op.grid))
    rhs = rhs + gamma_bilinear(f1, f1, op.drift, op.grid, op.kernel)
    return solve_linv(rhs, op, proj)


def _expm1_minus_x(x):
    small = np.abs(x) < 1e-3
    xs = np.where(small, x, 0.0)
    series = xs * xs * (0.5 + xs * (1 / 6 + xs * (1 / 24 + xs / 120)))
    return np.where(small, series, np.expm1(np.where(small, 0.0, x)) - x)


def build_phi_eps(fluid: FluidField, drift: DriftContext, grid: VelocityGrid) -> np.ndarray:
    """eps^-2 mu_c^{-1/2}[M(1, eps(c+u), 1) - mu_c - eps sqrt(mu_c) f1], evaluated stably."""
    eps = drift.eps
    vc = drift.v_c(grid.nodes)
    uv = fluid.u @ vc.T
    u2 = np.sum(fluid.u**2, axis=1)[:, None]
    x = eps * uv - 0.5 * eps**2 * u2
    return (eps**-2 * _expm1_minus_x(x) - 0.5 * u2) * drift.sqrt_mu_c(grid.nodes)


def grad_phi_eps(fluid: FluidField, drift: DriftContext, grid: VelocityGrid) -> np.ndarray:
    eps = drift.eps
    vc = drift.v_c(grid.nodes)
    uv = fluid.u @ vc.T
    u2 = np.sum(fluid.u**2, axis=1)[:, None]
    x = eps * uv - 0.5 * eps**2 * u2
    du_v = np.einsum("mij,vj->miv", fluid.grad_u, vc)
    u_du = np.einsum("mj,mij->mi", fluid.u, fluid.grad_u)[:, :, None]
    g = np.expm1(x)[:, None, :] * (eps * du_v - eps**2 * u_du) - eps**2 * u_du
    return eps**-2 * g * drift.sqrt_mu_c(grid.nodes)


def boundary_identity_defect(fluid: FluidField, drift: DriftContext, grid: VelocityGrid) -> float:
    """max |mu - (mu_c + eps sqrt(mu_c) f1 + eps^2 sqrt(mu_c) phi)|, meaningful where u = -c."""
    from .velocity import standard_maxwellian
    sq = drift.sqrt_mu_c(grid.nodes)
    recon = (drift.mu_c(grid.nodes) + drift.eps * sq * build_f1(fluid, drift, grid)
             + drift.eps**2 * sq * build_phi_eps(fluid, drift, grid))
    return float(np.abs(standard_maxwellian(grid.nodes) - recon).max())


def phi_envelope(fluid: FluidField, drift: DriftContext, grid: VelocityGrid, beta: float = 0.2) -> float:
    """max |phi| exp(beta |v|^2) / (|u|^2 + |c|^2) over points and nodes."""
    phi = build_phi_eps(fluid, drift, grid)
    scale = np.sum(fluid.u**2, axis=1) + np.sum(drift.c**2)
    env = np.abs(phi) * np.exp(beta * np.sum(grid.nodes**2, axis=1))
    return float(np.max(env.max(axis=1) / np.maximum(scale, 1e-300)))


@dataclass
class ExpansionTerms:
    """Expansion fields on a point set with the velocity truncation chi = 1_{|v| < eps^-m}."""

    f1: np.ndarray
    f2: np.ndarray
    phi_eps: np.ndarray
    Q_profile: np.ndarray
    chi_cut: np.ndarray
    m: float
    drift: DriftContext
    grid: VelocityGrid
    fluid: FluidField
    basis: ExpansionBasis = field(repr=False)
    diagnostics: dict = field(default_factory=dict)

    def profile_min(self) -> float:
        sq = self.drift.sqrt_mu_c(self.grid.nodes)
        return float((self.drift.mu_c(self.grid.nodes) + self.drift.eps * sq * self.Q_profile).min())


def hydro_transport_residual(fluid: FluidField, drift: DriftContext, grid: VelocityGrid,
                             proj: HydroProjector) -> float:
    """||P(v . grad f1)||_2 / ||v . grad f1||_2 over all points."""
    vf1 = transport(grad_f1(fluid, drift, grid), grid)
    w = grid.weights
    num = np.sqrt(np.sum(weighted_norm(proj.project(vf1), w) ** 2))
    den = np.sqrt(np.sum(weighted_norm(vf1, w) ** 2))
    return float(num / den) if den > 0 else 0.0


def build_terms(fluid: FluidField, basis: ExpansionBasis, m: float = 0.5, m_step: float = 0.25,
                m_max: float = 4.0) -> ExpansionTerms:
    """Assemble f1, f2, phi_eps and the truncated profile Q.

    The cutoff exponent starts at ``m`` and grows by ``m_step`` until
    mu_c + eps sqrt(mu_c) chi (f1 + eps f2) > 0 at every node.
    """
    op, proj = basis.op, basis.proj
    drift, grid = op.drift, op.grid
    eps = drift.eps
    div = float(np.abs(fluid.divergence).max()) if len(fluid.u) else 0.0
    diag = {"divergence_max": div, "ns_residual": fluid.ns_residual}
    ratio = hydro_transport_residual(fluid, drift, grid, proj)
    diag["hydro_transport_ratio"] = ratio
    if div > TOL_DIV:
        warnings.warn(f"divergence defect {div:.2e}; P_c(v . grad f1) ratio {ratio:.2e}", stacklevel=2)
    f1 = build_f1(fluid, drift, grid)
    f2 = build_f2(fluid, basis)
    phi = build_phi_eps(fluid, drift, grid)
    speed = np.linalg.norm(grid.nodes, axis=1)
    sq = drift.sqrt_mu_c(grid.nodes)
    mu_c = drift.mu_c(grid.nodes)
    while True:
        chi = speed < eps**-m
        if np.all(mu_c + eps * sq * chi * (f1 + eps * f2) > 0) or m >= m_max:
            break
        m += m_step
    Q = f1 + eps * np.where(chi, f2, phi)
    diag["m"] = m
    diag["f2_hydro"] = float(np.abs(proj.coefficients(f2)).max()) if len(f2) else 0.0
    return ExpansionTerms(f1, f2, phi, Q, chi, m, drift, grid, fluid, basis, diag)


@dataclass
class Sources:
    A_c: np.ndarray
    Abar_c: np.ndarray
    report: dict


def build_sources(terms: ExpansionTerms, fluid: FluidField | None = None) -> Sources:
    """Correction sources A_c and its velocity-truncated version Abar_c.

    With X = chi f2 + (1 - chi) phi and Y = (1 - chi)(phi - f2):
      A_c    = -(I - P)(v . grad f2) + 2 Gamma~(f1, f2) + eps Gamma(f2, f2)
      Abar_c = -P(v . grad Y) - (I - P)(v . grad X) + Gamma~(2 f1 + eps X, X) - L Y / eps
    Abar_c reduces to A_c when chi = 1. The hydrodynamic part
    -P(v . grad f1) / eps - P(v . grad f2), which vanishes for an exact flow
    up to a pressure gradient, is not included and is reported instead.
    """
    fluid = terms.fluid if fluid is None else fluid
    basis = terms.basis
    op, proj = basis.op, basis.proj
    drift, grid, kernel = op.drift, op.grid, op.kernel
    eps = drift.eps
    chi = terms.chi_cut
    f1, f2, phi = terms.f1, terms.f2, terms.phi_eps
    vf1 = transport(grad_f1(fluid, drift, grid), grid)
    vf2 = transport(grad_f2(fluid, basis), grid)
    vphi = transport(grad_phi_eps(fluid, drift, grid), grid)
    X = np.where(chi, f2, phi)
    Y = np.where(chi, 0.0, phi - f2)
    vX = np.where(chi, vf2, vphi)
    vY = np.where(chi, 0.0, vphi - vf2)
    A = -proj.residue(vf2) + 2 * gamma_sym(f1, f2, drift, grid, kernel) + eps * gamma_bilinear(f2, f2, drift, grid, kernel)
    Abar = (-proj.project(vY) - proj.residue(vX) + gamma_sym(2 * f1 + eps * X, X, drift, grid, kernel)
            - op.apply(Y) / eps)
    w = grid.weights

    def l2(f):
        return float(np.sqrt(np.sum(weighted_norm(f, w) ** 2)))

    hydro = -proj.project(vf1) / eps - proj.project(vf2)
    report = {
        "PA_rel": l2(proj.project(A)) / max(l2(A), 1e-300),
        "PAbar_rel": l2(proj.project(Abar)) / max(l2(Abar), 1e-300),
        "A_norm": l2(A),
        "Abar_norm": l2(Abar),
        "hydro_residual": l2(hydro),
        "ns_residual": fluid.ns_residual,
    }
    return Sources(A, Abar, report)


@dataclass
class BoundaryData:
    r: np.ndarray
    r_bar: np.ndarray
    z_r: np.ndarray
    z_rbar: np.ndarray


def build_boundary_r(terms: ExpansionTerms, boundary: BoundaryOperator) -> BoundaryData:
    """r = P_gamma h - h and r_bar = P_gamma(chi h) - chi h with h = f2 - phi, on gamma_-.

    ``terms`` must be sampled at the wall face centres, in the order of
    ``boundary``. Values on the outgoing half-space are set to zero.
    """
    h = terms.f2 - terms.phi_eps
    hc = np.where(terms.chi_cut, h, 0.0)
    inc = ~boundary.out_mask
    r = np.where(inc, boundary.apply(h) - h, 0.0)
    rbar = np.where(inc, boundary.apply(hc) - hc, 0.0)
    return BoundaryData(r, rbar, boundary.z_minus(r), boundary.z_minus(rbar))


def save_bundle(path: str, terms: ExpansionTerms, extra: dict | None = None) -> None:
    """Write the expansion fields as .npy arrays plus a JSON manifest."""
    os.makedirs(path, exist_ok=True)
    for name in ("f1", "f2", "phi_eps", "Q_profile", "chi_cut"):
        np.save(os.path.join(path, f"{name}.npy"), getattr(terms, name))
    np.save(os.path.join(path, "points.npy"), terms.fluid.points)
    manifest = {
        "velocity_grid": terms.grid.spec_text(),
        "grid_hash": terms.grid.hash(),
        "eps": terms.drift.eps,
        "c_inf": list(terms.drift.c_inf),
        "m": terms.m,
        "diagnostics": terms.diagnostics,
        "decay_note": "grad u in L^p for p > 4/3; truncated domain",
    }
    manifest.update(extra or {})
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_bundle(path: str) -> dict:
    with open(os.path.join(path, "manifest.json")) as fh:
        manifest = json.load(fh)
    arrays = {name: np.load(os.path.join(path, f"{name}.npy"))
              for name in ("f1", "f2", "phi_eps", "Q_profile", "chi_cut", "points")}
    return {"manifest": manifest, **arrays}
