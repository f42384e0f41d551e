"""Steady linearized Boltzmann solver on the shell mesh and the positivity iteration.

The linear problem v . grad f + eps^-1 L f = g with diffuse reflection on the
wall is discretized by first-order upwind finite volumes. Collision frequency
is implicit; the gain kernel K and the wall coupling are lagged, giving the
source-iteration map f -> S f + b. The fixed point is found with GMRES on
(I - S) f = b (or plain source iteration).
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, gmres, splu
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .collision import (CollisionKernel, HydroProjector, LinearizedOperator, build_linearized,
                        build_projector, gamma_bilinear, gamma_sym)
from .expansion import (ExpansionTerms, FluidField, build_basis, build_boundary_r, build_sources,
                        build_terms, stokes_flow)
from .mesh import BoundaryOperator, KineticField, SpatialMesh, build_boundary_operator, mesh_from_preset
from .norms import composite_norm, energy_ledger, lp_norm
from .velocity import DriftContext, VelocityGrid, WeightFunction, build_grid

log = logging.getLogger(__name__)

TOL_INNER = 1e-8
TOL_OUTER = 1e-6
MAX_OUTER = 50


class MaxSweepsExceeded(RuntimeError):
    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual


class NonContraction(RuntimeError):
    def __init__(self, message, ledger=None):
        super().__init__(message)
        self.ledger = ledger


@dataclass
class TransportSystem:
    """Factorized upwind transport with implicit collision frequency, all velocities at once.

    Unknowns are ordered velocity-major: index = v * n_cells + cell.
    """

    mesh: SpatialMesh
    op: LinearizedOperator
    boundary: BoundaryOperator
    lu: object
    face_flux: np.ndarray

    @property
    def grid(self) -> VelocityGrid:
        return self.op.grid

    def to_vector(self, values: np.ndarray) -> np.ndarray:
        return np.ascontiguousarray(values.T).ravel()

    def to_values(self, vec: np.ndarray) -> np.ndarray:
        return vec.reshape(self.grid.size, self.mesh.n_cells).T

    def inflow_rhs(self, wall_in: np.ndarray | None, far_in: np.ndarray | None) -> np.ndarray:
        """Volume-integrated contribution of imposed inflow traces."""
        out = np.zeros((self.mesh.n_cells, self.grid.size))
        for faces, data in ((self.mesh.wall_faces, wall_in), (self.mesh.far_faces, far_in)):
            if data is None:
                continue
            a = self.face_flux[faces]
            np.add.at(out, self.mesh.face_left[faces], np.where(a < 0, -a * data, 0.0))
        return out

    def solve(self, rhs_values: np.ndarray) -> np.ndarray:
        return self.to_values(self.lu.solve(self.to_vector(rhs_values)))

    def wall_cells(self, values: np.ndarray) -> np.ndarray:
        return values[self.mesh.face_left[self.mesh.wall_faces]]


def build_transport(mesh: SpatialMesh, op: LinearizedOperator, boundary: BoundaryOperator) -> TransportSystem:
    grid = op.grid
    eps = op.drift.eps
    nc, N = mesh.n_cells, grid.size
    a = mesh.face_area @ grid.nodes.T
    off = np.arange(N)[None, :] * nc
    inner = mesh.face_right >= 0
    li = mesh.face_left[inner][:, None] + off
    ri = mesh.face_right[inner][:, None] + off
    ai = a[inner]
    up = np.where(ai > 0, li, ri)
    bl = mesh.face_left[~inner][:, None] + off
    ab = a[~inner]
    pb = ab > 0
    diag = (mesh.volumes[:, None] * op.nu[None, :] / eps).T.ravel()
    rows = np.concatenate([li.ravel(), ri.ravel(), bl[pb], np.arange(nc * N)])
    cols = np.concatenate([up.ravel(), up.ravel(), bl[pb], np.arange(nc * N)])
    vals = np.concatenate([ai.ravel(), -ai.ravel(), ab[pb], diag])
    T = sp.csc_matrix((vals, (rows, cols)), shape=(nc * N, nc * N))
    return TransportSystem(mesh, op, boundary, splu(T), a)


@dataclass
class LinearSolution:
    field: KineticField
    iterations: int
    residual: float
    history: list = field(default_factory=list)


def linear_solve(g: np.ndarray, r: np.ndarray | None, system: TransportSystem, tol: float = TOL_INNER,
                 far_in: np.ndarray | None = None, method: str = "gmres", max_sweeps: int = 2000,
                 x0: np.ndarray | None = None) -> LinearSolution:
    """Solve v . grad f + eps^-1 L f = g, f = P_gamma f + eps^1/2 r on the wall inflow.

    ``far_in`` prescribes the far-field inflow trace (zero by default).
    ``method`` is 'gmres' (restarted GMRES on the source-iteration fixed
    point) or 'richardson' (plain source iteration, stopping on relative update).
    """
    mesh, op, bnd = system.mesh, system.op, system.boundary
    eps = op.drift.eps
    vol = mesh.volumes[:, None]
    g = np.asarray(g, dtype=float)
    wall_data = None if r is None else np.sqrt(eps) * np.where(bnd.out_mask, 0.0, r)
    b = system.solve(vol * g + system.inflow_rhs(wall_data, far_in))

    def sweep(values):
        wall_in = bnd.incoming(system.wall_cells(values))
        return system.solve(vol * (values @ op.K) / eps + system.inflow_rhs(wall_in, None))

    history = []
    if not np.any(b):
        values = np.zeros_like(b)
        it = 0
        res = 0.0
    elif method == "richardson":
        values = b.copy() if x0 is None else x0.copy()
        res = np.inf
        for it in range(1, max_sweeps + 1):
            new = sweep(values) + b
            res = np.linalg.norm(new - values) / max(np.linalg.norm(new), 1e-300)
            history.append(res)
            values = new
            if res < tol:
                break
        else:
            raise MaxSweepsExceeded(f"source iteration stalled at relative update {res:.2e}", res)
    elif method == "gmres":
        n = b.size
        A = LinearOperator((n, n), matvec=lambda x: x - system.to_vector(sweep(system.to_values(x))), dtype=float)
        counter = []

        def cb(pr):
            counter.append(pr)

        bv = system.to_vector(b)
        x0v = None if x0 is None else system.to_vector(x0)
        x, info = gmres(A, bv, x0=x0v, rtol=tol, atol=0.0, restart=60, maxiter=max_sweeps,
                        callback=cb, callback_type="pr_norm")
        values = system.to_values(x)
        res = float(np.linalg.norm(bv - A.matvec(x)) / np.linalg.norm(bv))
        history = counter
        it = len(counter)
        if info != 0 and res > 10 * tol:
            raise MaxSweepsExceeded(f"GMRES did not converge: relative residual {res:.2e}", res)
    else:
        raise ValueError(f"unknown method {method!r}")
    wall_in = bnd.incoming(system.wall_cells(values))
    if wall_data is not None:
        wall_in = wall_in + wall_data
    fieldv = KineticField.from_values(values, mesh, op.grid, wall_in, far_in)
    return LinearSolution(fieldv, it, float(res), history)


def apply_diffuse_reflection(f_out: np.ndarray, boundary: BoundaryOperator) -> np.ndarray:
    """Incoming trace P_gamma f on v . n < 0 from an outgoing trace, per wall face."""
    return boundary.incoming(np.where(boundary.out_mask, f_out, 0.0))


# Truncation algebra for the positivity reformulation.


@dataclass
class TruncationState:
    R: np.ndarray
    R_bar: np.ndarray
    R_tilde: np.ndarray
    mask: np.ndarray


def truncate(R: np.ndarray, Q_profile: np.ndarray, drift: DriftContext, grid: VelocityGrid) -> TruncationState:
    """R_bar = R where F >= 0, otherwise the value making F vanish; R_tilde = R_bar - R."""
    eps = drift.eps
    sq = drift.sqrt_mu_c(grid.nodes)
    base = drift.mu_c(grid.nodes) + eps * Q_profile * sq
    mask = base + eps**1.5 * sq * R < 0
    R_bar = np.where(mask, -eps**-1.5 * base / sq, R)
    return TruncationState(R, R_bar, R_bar - R, mask)


def total_density(R: np.ndarray, Q_profile: np.ndarray, drift: DriftContext, grid: VelocityGrid) -> np.ndarray:
    sq = drift.sqrt_mu_c(grid.nodes)
    return drift.mu_c(grid.nodes) + drift.eps * sq * Q_profile + drift.eps**1.5 * sq * R


@dataclass
class DeskProblem:
    """Everything needed for a remainder solve at fixed (eps, c)."""

    drift: DriftContext
    grid: VelocityGrid
    mesh: SpatialMesh
    op: LinearizedOperator
    proj: HydroProjector
    boundary: BoundaryOperator
    system: TransportSystem
    terms: ExpansionTerms
    wall_terms: ExpansionTerms
    Abar: np.ndarray
    A: np.ndarray
    r: np.ndarray
    r_bar: np.ndarray
    weights: WeightFunction
    reports: dict


def setup_problem(eps: float, c_inf, mesh: SpatialMesh | str = "desk", v_max: float = 6.0, n_per_axis: int = 12,
                  kernel: CollisionKernel = CollisionKernel(), fluid_sampler=None, cache_dir: str | None = None,
                  weights: WeightFunction = WeightFunction(), m: float = 0.5) -> DeskProblem:
    """Assemble operator, expansion terms (cells and wall faces), sources and boundary data.

    ``fluid_sampler(points) -> FluidField`` defaults to creeping flow past the sphere.
    """
    if isinstance(mesh, str):
        mesh = mesh_from_preset(mesh)
    drift = DriftContext(eps, c_inf)
    grid = build_grid(v_max, n_per_axis)
    op = build_linearized(drift, kernel, grid, cache_dir=cache_dir)
    proj = build_projector(drift, grid)
    boundary = build_boundary_operator(mesh.wall_normals, drift, grid)
    system = build_transport(mesh, op, boundary)
    sampler = fluid_sampler or (lambda x: stokes_flow(x, drift.c))
    basis = build_basis(op, proj)
    terms = build_terms(sampler(mesh.centers), basis, m=m)
    wall_terms = build_terms(sampler(mesh.wall_centers), basis, m=terms.m)
    src = build_sources(terms)
    bdata = build_boundary_r(wall_terms, boundary)
    reports = {"sources": src.report, "terms": terms.diagnostics,
               "z_r_max": float(np.abs(bdata.z_r).max()), "z_rbar_max": float(np.abs(bdata.z_rbar).max())}
    return DeskProblem(drift, grid, mesh, op, proj, boundary, system, terms, wall_terms, src.Abar_c, src.A_c,
                       bdata.r, bdata.r_bar, weights, reports)


def bracket_norm(f: KineticField, prob: DeskProblem) -> float:
    return composite_norm(f, prob.drift, prob.weights, prob.proj, prob.boundary, prob.mesh, prob.grid,
                          prob.op.nu).composite


LEDGER_COLUMNS = ("ell", "step_norm", "lambda", "min_F", "mask_fraction", "zgamma_max", "gmres_iters")


@dataclass
class IterationLedger:
    rows: list = field(default_factory=list)

    def append(self, row: dict) -> None:
        self.rows.append(dict(row))

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=float)

    def write_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=LEDGER_COLUMNS, lineterminator="\n")
            wr.writeheader()
            for row in self.rows:
                wr.writerow({k: row.get(k, "") for k in LEDGER_COLUMNS})


@dataclass
class PositivityResult:
    R: KineticField
    ledger: IterationLedger
    state: TruncationState
    converged: bool


def phase_volume_fraction(mask: np.ndarray, mesh: SpatialMesh, grid: VelocityGrid) -> float:
    dmu = mesh.volumes[:, None] * grid.weights[None, :]
    return float(np.sum(dmu * mask) / np.sum(dmu))


def positivity_iteration(prob: DeskProblem, tol_outer: float = TOL_OUTER, max_outer: int = MAX_OUTER,
                         tol_inner: float = TOL_INNER, strict: bool = True) -> PositivityResult:
    """Fixed-point iteration for the truncated remainder equation.

    Each step solves v . grad R + eps^-1 L R = 2 Gamma~(Q, R_bar) + eps^1/2 Gamma(R_bar, R_bar)
    + eps^1/2 Abar with wall data r_bar + eps^-1/2 P_gamma R_tilde.
    """
    eps = prob.drift.eps
    grid, mesh, bnd = prob.grid, prob.mesh, prob.boundary
    Q = prob.terms.Q_profile
    R = KineticField.from_values(np.zeros((mesh.n_cells, grid.size)), mesh, grid)
    ledger = IterationLedger()
    prev_step = None
    bad = 0
    converged = False
    state = truncate(R.values, Q, prob.drift, grid)
    for ell in range(1, max_outer + 1):
        state = truncate(R.values, Q, prob.drift, grid)
        Rb = state.R_bar
        g = (2 * gamma_sym(Q, Rb, prob.drift, grid, prob.op.kernel)
             + np.sqrt(eps) * gamma_bilinear(Rb, Rb, prob.drift, grid, prob.op.kernel) + np.sqrt(eps) * prob.Abar)
        tilde_trace = np.where(bnd.out_mask, prob.system.wall_cells(state.R_tilde), 0.0)
        r_ell = prob.r_bar + np.where(bnd.out_mask, 0.0, bnd.apply(tilde_trace)) / np.sqrt(eps)
        sol = linear_solve(g, r_ell, prob.system, tol=tol_inner, x0=R.values)
        new = sol.field
        step = bracket_norm(new - R, prob)
        lam = step / prev_step if prev_step else np.nan
        F = total_density(new.values, Q, prob.drift, grid)
        new_state = truncate(new.values, Q, prob.drift, grid)
        zg = bnd.net_flux(new.wall_trace)
        ledger.append({"ell": ell, "step_norm": step, "lambda": lam, "min_F": float(F.min()),
                       "mask_fraction": phase_volume_fraction(new_state.mask, mesh, grid),
                       "zgamma_max": float(np.abs(zg).max()), "gmres_iters": sol.iterations})
        log.info("outer %d step %.3e lambda %.3f minF %.3e", ell, step, lam, F.min())
        R = new
        if prev_step is not None and lam >= 1:
            bad += 1
            if bad >= 3 and strict:
                raise NonContraction(f"lambda >= 1 for 3 consecutive steps (last {lam:.3f})", ledger)
        else:
            bad = 0
        prev_step = step
        if step < tol_outer:
            converged = True
            break
    state = truncate(R.values, Q, prob.drift, grid)
    return PositivityResult(R, ledger, state, converged)


def exact_problem_flux(prob: DeskProblem, tol: float = TOL_INNER) -> dict:
    """Solve the unmodified linear problem (hydrodynamic part of g removed, untruncated r)
    and report the per-face net mass flux at the wall."""
    g = prob.proj.residue(np.sqrt(prob.drift.eps) * prob.A)
    sol = linear_solve(g, prob.r, prob.system, tol=tol)
    z = prob.boundary.net_flux(sol.field.wall_trace)
    return {"zgamma_max": float(np.abs(z).max()), "z_r_max": float(np.abs(prob.boundary.z_minus(prob.r)).max()),
            "solution": sol}


def manufactured_solution(mesh: SpatialMesh, op: LinearizedOperator, boundary: BoundaryOperator,
                          profile=None, tol: float = 1e-10) -> dict:
    """Method of manufactured solutions for the linear solver.

    f*(x, v) = s(x) h(v) with a smooth s; the source is the exact
    v . grad f* + eps^-1 L f*, the wall data reproduce the boundary defect of
    f*, and the far-field inflow is f* itself. Returns the weighted L2 error
    against f* at cell centres.
    """
    grid = op.grid
    eps = op.drift.eps
    v = grid.nodes
    sq = op.drift.sqrt_mu_c(v)
    h = (1 + 0.5 * v[:, 0] - 0.3 * v[:, 1] * v[:, 2] + 0.2 * v[:, 2] ** 2) * sq

    def s(x):
        return np.exp(-0.25 * np.sum(x**2, axis=1)) * (1 + 0.5 * x[:, 0])

    def grad_s(x):
        e = np.exp(-0.25 * np.sum(x**2, axis=1))
        gr = -0.5 * x * (e * (1 + 0.5 * x[:, 0]))[:, None]
        gr[:, 0] += 0.5 * e
        return gr

    if profile is not None:
        s, grad_s = profile
    xc = mesh.centers
    exact = s(xc)[:, None] * h[None, :]
    g = (grad_s(xc) @ v.T) * h[None, :] + s(xc)[:, None] * op.apply(h)[None, :] / eps
    xw = mesh.wall_centers
    trace_w = s(xw)[:, None] * h[None, :]
    r = (trace_w - boundary.apply(np.where(boundary.out_mask, trace_w, 0.0))) / np.sqrt(eps)
    r = np.where(boundary.out_mask, 0.0, r)
    far_c = mesh.centers[mesh.face_left[mesh.far_faces]]
    far_c = far_c / np.linalg.norm(far_c, axis=1, keepdims=True) * mesh.r_edges[-1]
    far_in = s(far_c)[:, None] * h[None, :]
    system = build_transport(mesh, op, boundary)
    sol = linear_solve(g, r, system, tol=tol, far_in=far_in)
    err = lp_norm(sol.field.values - exact, mesh, grid, 2) / lp_norm(exact, mesh, grid, 2)
    return {"h": mesh.spacing(), "error": float(err), "iterations": sol.iterations}


def scaling_study(eps_list, c_mag: float, mesh: SpatialMesh | str = "desk", direction=(1.0, 0.0, 0.0),
                  tol_outer: float = TOL_OUTER, max_outer: int = MAX_OUTER, cache_dir: str | None = None,
                  v_max: float = 6.0, n_per_axis: int = 12) -> list[dict]:
    """Run the positivity iteration for each eps and tabulate the norm components of R."""
    rows = []
    d = np.asarray(direction, dtype=float)
    c = c_mag * d / np.linalg.norm(d)
    for eps in eps_list:
        prob = setup_problem(eps, c, mesh=mesh, cache_dir=cache_dir, v_max=v_max, n_per_axis=n_per_axis)
        res = positivity_iteration(prob, tol_outer=tol_outer, max_outer=max_outer)
        rep = composite_norm(res.R, prob.drift, prob.weights, prob.proj, prob.boundary, prob.mesh,
                             prob.grid, prob.op.nu)
        row = {"eps": eps, "c_mag": c_mag}
        row.update(rep.components())
        row["composite"] = rep.composite
        row["micro_L2_over_eps"] = rep.extra["micro_L2"] / eps
        row["R_L6"] = rep.extra["L6"]
        row["lambda_last"] = float(res.ledger.rows[-1]["lambda"]) if len(res.ledger.rows) > 1 else float("nan")
        row["outer_iterations"] = len(res.ledger.rows)
        row["converged"] = res.converged
        rows.append(row)
    return rows


class PositivitySolver(BaseEstimator):
    """Estimator wrapper: ``fit()`` runs the positivity iteration and stores ``R_`` and ``ledger_``.

    There is no data matrix; ``fit`` takes no samples. ``predict`` returns
    the total density F = mu_c + eps sqrt(mu_c) Q + eps^3/2 sqrt(mu_c) R.
    """

    def __init__(self, eps=0.1, c=(0.05, 0.0, 0.0), mesh="desk", v_max=6.0, n_per_axis=12,
                 tol_outer=TOL_OUTER, max_outer=MAX_OUTER, tol_inner=TOL_INNER, cache_dir=None):
        self.eps = eps
        self.c = c
        self.mesh = mesh
        self.v_max = v_max
        self.n_per_axis = n_per_axis
        self.tol_outer = tol_outer
        self.max_outer = max_outer
        self.tol_inner = tol_inner
        self.cache_dir = cache_dir

    def fit(self, X=None, y=None):
        self.problem_ = setup_problem(self.eps, self.c, mesh=self.mesh, v_max=self.v_max,
                                      n_per_axis=self.n_per_axis, cache_dir=self.cache_dir)
        res = positivity_iteration(self.problem_, tol_outer=self.tol_outer, max_outer=self.max_outer,
                                   tol_inner=self.tol_inner)
        self.R_ = res.R
        self.ledger_ = res.ledger
        self.converged_ = res.converged
        self.state_ = res.state
        return self

    def predict(self, X=None):
        check_is_fitted(self, "R_")
        p = self.problem_
        return total_density(self.R_.values, p.terms.Q_profile, p.drift, p.grid)

    def norm_report(self):
        check_is_fitted(self, "R_")
        p = self.problem_
        return composite_norm(self.R_, p.drift, p.weights, p.proj, p.boundary, p.mesh, p.grid, p.op.nu)


def write_field(path: str, f: KineticField) -> None:
    os.makedirs(path, exist_ok=True)
    np.save(os.path.join(path, "values.npy"), f.values)
    np.save(os.path.join(path, "wall_trace.npy"), f.wall_trace)
    np.save(os.path.join(path, "far_trace.npy"), f.far_trace)
