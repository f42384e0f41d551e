"""Norms on (cell, velocity) fields, boundary norms, and the linear-estimate functional.

Spatial integrals use cell volumes, velocity integrals use the grid weights,
and boundary integrals use the measure |v . n| dv dS over wall faces.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .collision import HydroProjector
from .mesh import BoundaryOperator, KineticField, SpatialMesh
from .velocity import DriftContext, VelocityGrid, WeightFunction

P_SIX_FIFTHS_MINUS = 1.19


def lp_norm(f: np.ndarray, mesh: SpatialMesh, grid: VelocityGrid, p: float) -> float:
    """Joint L^p norm over the exterior region and velocity space."""
    a = np.abs(np.asarray(f, dtype=float))
    if np.isinf(p):
        return float(a.max()) if a.size else 0.0
    dmu = mesh.volumes[:, None] * grid.weights[None, :]
    total = np.sum(a**p * dmu)
    return float(total ** (1.0 / p))


def boundary_norm(trace: np.ndarray, mesh: SpatialMesh, boundary: BoundaryOperator, side: str, p: float = 2) -> float:
    """|f|_{p,+} or |f|_{p,-} over wall faces; side '+' is v . n > 0."""
    mask = boundary.out_mask if side == "+" else ~boundary.out_mask
    a = np.abs(trace) * mask
    if np.isinf(p):
        return float(a.max()) if a.size else 0.0
    dgam = mesh.wall_areas[:, None] * np.abs(boundary.vn) * boundary.weights[None, :]
    return float(np.sum(a**p * dgam) ** (1.0 / p))


def z_gamma_norm(z: np.ndarray, mesh: SpatialMesh) -> float:
    return float(np.sqrt(np.sum(mesh.wall_areas * np.asarray(z) ** 2)))


@dataclass
class NormReport:
    """Components of the composite norm and (optionally) of the linear-estimate functional."""

    micro: float = 0.0
    boundary_out: float = 0.0
    hydro_6: float = 0.0
    hydro_3: float = 0.0
    weighted_sup: float = 0.0
    extra: dict = field(default_factory=dict)
    m_terms: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    COMPONENTS = ("micro", "boundary_out", "hydro_6", "hydro_3", "weighted_sup")

    @property
    def composite(self) -> float:
        return self.micro + self.boundary_out + self.hydro_6 + self.hydro_3 + self.weighted_sup

    @property
    def m_value(self) -> float:
        return float(sum(self.m_terms.values()))

    def components(self) -> dict:
        return {k: getattr(self, k) for k in self.COMPONENTS}

    def as_row(self) -> dict:
        row = dict(self.meta)
        row.update(self.components())
        row["composite"] = self.composite
        row.update(self.extra)
        row.update({f"M_{k}": v for k, v in self.m_terms.items()})
        if self.m_terms:
            row["M_total"] = self.m_value
        return row

    def to_dict(self) -> dict:
        d = asdict(self)
        d["composite"] = self.composite
        return d


def composite_norm(f: KineticField, drift: DriftContext, weights: WeightFunction, proj: HydroProjector,
                   boundary: BoundaryOperator, mesh: SpatialMesh, grid: VelocityGrid,
                   nu: np.ndarray) -> NormReport:
    """[[f]] = eps^-1 ||(I-P)f||_nu + eps^-1/2 |(1-P_gamma)f|_{2,+} + ||Pf||_6
    + eps^1/2 ||Pf||_3 + eps^1/2 ||w f||_inf."""
    eps = drift.eps
    pf = proj.project(f.values)
    micro = f.values - pf
    reflected = f.wall_trace - boundary.apply(f.wall_trace)
    wv = weights(grid.nodes)
    rep = NormReport(
        micro=lp_norm(micro * np.sqrt(nu), mesh, grid, 2) / eps,
        boundary_out=boundary_norm(reflected, mesh, boundary, "+") / np.sqrt(eps),
        hydro_6=lp_norm(pf, mesh, grid, 6),
        hydro_3=np.sqrt(eps) * lp_norm(pf, mesh, grid, 3),
        weighted_sup=np.sqrt(eps) * lp_norm(f.values * wv, mesh, grid, np.inf),
        meta={"eps": eps, "c_mag": float(np.linalg.norm(drift.c)), "beta": weights.beta,
              "beta_prime": weights.beta_prime},
    )
    rep.extra = {
        "micro_L2": lp_norm(micro, mesh, grid, 2),
        "micro_L6": lp_norm(micro, mesh, grid, 6),
        "L2": lp_norm(f.values, mesh, grid, 2),
        "L6": lp_norm(f.values, mesh, grid, 6),
        "sup": lp_norm(f.values, mesh, grid, np.inf),
    }
    return rep


def m_functional(g: np.ndarray, r: np.ndarray, drift: DriftContext, weights: WeightFunction,
                 proj: HydroProjector, boundary: BoundaryOperator, mesh: SpatialMesh, grid: VelocityGrid,
                 nu: np.ndarray, rho: float = 0.1, sigma: float = 0.02,
                 p_minus: float = P_SIX_FIFTHS_MINUS) -> dict:
    """All summands of the right-hand side of the linear estimate, keyed by name.

    ``r`` is boundary data on the wall faces (zero on the outgoing half-space).
    """
    if not 0 < sigma <= 0.1 or not 0 < rho < 1:
        raise ValueError("need 0 < sigma <= 0.1 and 0 < rho < 1")
    eps = drift.eps
    c = max(float(np.linalg.norm(drift.c)), 1e-300)
    pg = proj.project(g)
    wv = weights(grid.nodes)
    bracket = np.sqrt(1 + np.sum(grid.nodes**2, axis=1))
    z = boundary.z_minus(r)
    zr2 = z_gamma_norm(z, mesh) ** 2
    return {
        "micro_g": lp_norm((g - pg) / np.sqrt(nu), mesh, grid, 2) ** 2,
        "g_three_halves": eps * lp_norm(g / np.sqrt(nu), mesh, grid, 1.5) ** 2,
        "g_weighted_sup": eps**3 * lp_norm(g * wv / bracket, mesh, grid, np.inf) ** 2,
        "r_weighted_sup": eps * boundary_norm(r * wv, mesh, boundary, "-", np.inf) ** 2,
        "r_L2": boundary_norm(r, mesh, boundary, "-", 2) ** 2,
        "hydro_g_L2": lp_norm(pg, mesh, grid, 2) ** 2,
        "hydro_g_six_fifths": eps**-2 * c**-2 * lp_norm(pg, mesh, grid, 1.2) ** 2,
        "hydro_g_below_six_fifths": eps ** (-2 * sigma) * c ** (-4 + 4 * rho) * lp_norm(pg, mesh, grid, p_minus) ** 2,
        "z_gamma": (eps ** (0.5 - 2 * sigma) * c ** (-2 + 2 * rho) + 1 / (c * eps)) * zr2,
    }


R_TERMS = ("r_weighted_sup", "r_L2", "z_gamma")


def flux_divergence(f: KineticField, mesh: SpatialMesh, grid: VelocityGrid) -> np.ndarray:
    """Upwind finite-volume flux balance sum_faces (v . A) f_upwind per cell (not divided by volume)."""
    v = grid.nodes
    a = mesh.face_area @ v.T
    out = np.zeros_like(f.values)
    inner = mesh.face_right >= 0
    L, R = mesh.face_left[inner], mesh.face_right[inner]
    ai = a[inner]
    up = np.where(ai > 0, f.values[L], f.values[R])
    np.add.at(out, L, ai * up)
    np.add.at(out, R, -ai * up)
    np.add.at(out, mesh.face_left[mesh.wall_faces], a[mesh.wall_faces] * f.wall_trace)
    np.add.at(out, mesh.face_left[mesh.far_faces], a[mesh.far_faces] * f.far_trace)
    return out


def energy_ledger(f: KineticField, g: np.ndarray, drift: DriftContext, boundary: BoundaryOperator,
                  mesh: SpatialMesh, grid: VelocityGrid, op=None, proj: HydroProjector | None = None,
                  continuum_boundary: BoundaryOperator | None = None) -> dict:
    """Terms of the discrete Green identity and of the energy balance.

    With the upwind flux the identity
    sum 2 f div_h(f) = (outflow trace term) - (inflow trace term) + jump dissipation
    holds exactly; its defect is reported. The boundary flux mismatch of the
    diffuse-reflection map is reported for ``continuum_boundary`` when given.
    """
    v = grid.nodes
    w = grid.weights
    a = mesh.face_area @ v.T
    div = flux_divergence(f, mesh, grid)
    transport = float(np.sum(2 * f.values * div * w))
    inner = mesh.face_right >= 0
    L, R = mesh.face_left[inner], mesh.face_right[inner]
    dissip = float(np.sum(np.abs(a[inner]) * (f.values[L] - f.values[R]) ** 2 * w))
    out_terms, in_terms = 0.0, 0.0
    for faces, trace in ((mesh.wall_faces, f.wall_trace), (mesh.far_faces, f.far_trace)):
        ab = a[faces]
        cell = f.values[mesh.face_left[faces]]
        out_terms += float(np.sum(np.where(ab > 0, ab * trace**2, 0.0) * w))
        in_terms += float(np.sum(np.where(ab < 0, -ab * trace**2, 0.0) * w))
        dissip += float(np.sum(np.where(ab < 0, -ab * (cell - trace) ** 2, 0.0) * w))
    ledger = {
        "transport": transport,
        "boundary_out": out_terms,
        "boundary_in": in_terms,
        "dissipation": dissip,
        "green_defect": transport - (out_terms - in_terms) - dissip,
        "source": float(np.sum(f.values * g * w * mesh.volumes[:, None])),
        "wall_out_L2sq": boundary_norm(f.wall_trace, mesh, boundary, "+") ** 2,
    }
    if op is not None:
        lf = op.apply(f.values)
        ledger["collision"] = float(np.sum(f.values * lf * w * mesh.volumes[:, None])) / drift.eps
        if proj is not None:
            micro = f.values - proj.project(f.values)
            ledger["micro_nu_sq"] = float(np.sum(micro**2 * op.nu * w * mesh.volumes[:, None]))
    if continuum_boundary is not None:
        cb = continuum_boundary
        zp = cb.z_plus(f.wall_trace)
        zm = cb.z_minus(cb.incoming(f.wall_trace))
        ledger["reflection_flux_mismatch"] = float(np.sum(mesh.wall_areas * np.abs(zm - zp)))
        c_eps = drift.eps * float(np.linalg.norm(drift.c))
        ledger["reflection_prefactor"] = (ledger["reflection_flux_mismatch"] / (c_eps * ledger["wall_out_L2sq"])
                                          if c_eps > 0 and ledger["wall_out_L2sq"] > 0 else 0.0)
    return ledger


def interpolation_check(micro: np.ndarray, f: np.ndarray, mesh: SpatialMesh, grid: VelocityGrid) -> dict:
    """Hoelder interpolation between L^2 and L^inf for the microscopic part.

    ``bound_self`` uses sup |micro| and always dominates ``l6``; ``bound_full``
    uses sup |f| and dominates it whenever sup |micro| <= sup |f|.
    """
    l2 = lp_norm(micro, mesh, grid, 2)
    return {
        "l6": lp_norm(micro, mesh, grid, 6),
        "bound_self": l2 ** (1 / 3) * lp_norm(micro, mesh, grid, np.inf) ** (2 / 3),
        "bound_full": l2 ** (1 / 3) * lp_norm(f, mesh, grid, np.inf) ** (2 / 3),
    }
