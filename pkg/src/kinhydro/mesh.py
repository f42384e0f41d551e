"""Annular finite-volume mesh around the unit sphere and the diffuse-reflection map.

Cells are products of radial shells, equal-area polar bands and longitude
sectors. Face area vectors and cell volumes are computed in closed form, so
the area vectors of every cell sum to zero exactly (a constant field is
transported without defect).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .velocity import DriftContext, VelocityGrid, standard_maxwellian


def _int_sqrt(z):
    return 0.5 * (z * np.sqrt(1 - z * z) + np.arcsin(z))


@dataclass
class SpatialMesh:
    """Shell mesh of the exterior region 1 <= |x| <= r_far.

    Faces are stored as (left, right, area vector from left to right);
    ``right = -1`` marks boundary faces. The wall normal ``n`` of the
    obstacle faces points into the obstacle, so gamma_+ = {v . n > 0} is
    the outgoing (wall-bound) half-space.
    """

    r_edges: np.ndarray
    z_edges: np.ndarray
    phi_edges: np.ndarray
    centers: np.ndarray
    volumes: np.ndarray
    face_left: np.ndarray
    face_right: np.ndarray
    face_area: np.ndarray
    wall_faces: np.ndarray
    far_faces: np.ndarray
    wall_centers: np.ndarray
    wall_normals: np.ndarray
    wall_areas: np.ndarray
    far_normals: np.ndarray

    @property
    def n_cells(self) -> int:
        return self.volumes.shape[0]

    @property
    def n_wall(self) -> int:
        return self.wall_faces.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return len(self.r_edges) - 1, len(self.z_edges) - 1, len(self.phi_edges) - 1

    def shell_index(self) -> np.ndarray:
        ns, nt, npp = self.shape
        return np.repeat(np.arange(ns), nt * npp)

    def spacing(self) -> float:
        """Cube root of the largest cell volume."""
        return float(self.volumes.max() ** (1 / 3))


def build_mesh(n_shells: int = 8, n_theta: int = 4, n_phi: int = 8, r_far: float = 8.0,
               grading: str = "geometric") -> SpatialMesh:
    """Build the shell mesh; ``grading`` is 'geometric' or 'uniform' in r."""
    if min(n_shells, n_theta, n_phi) < 1 or n_phi < 3 or r_far <= 1:
        raise ValueError("invalid mesh parameters")
    if grading == "geometric":
        r = np.geomspace(1.0, r_far, n_shells + 1)
    elif grading == "uniform":
        r = np.linspace(1.0, r_far, n_shells + 1)
    else:
        raise ValueError(f"unknown grading {grading!r}")
    z = np.linspace(-1.0, 1.0, n_theta + 1)
    ph = np.linspace(0.0, 2 * np.pi, n_phi + 1)

    def cid(s, t, p):
        return (s * n_theta + t) * n_phi + (p % n_phi)

    centers, volumes = [], []
    for s in range(n_shells):
        r1, r2 = r[s], r[s + 1]
        rc = 0.75 * (r2**4 - r1**4) / (r2**3 - r1**3)
        for t in range(n_theta):
            zc = 0.5 * (z[t] + z[t + 1])
            for p in range(n_phi):
                pc = 0.5 * (ph[p] + ph[p + 1])
                sc = np.sqrt(1 - zc * zc)
                centers.append(rc * np.array([sc * np.cos(pc), sc * np.sin(pc), zc]))
                volumes.append((r2**3 - r1**3) / 3 * (z[t + 1] - z[t]) * (ph[p + 1] - ph[p]))

    def radial_area(rad, t, p):
        za, zb, pa, pb = z[t], z[t + 1], ph[p], ph[p + 1]
        iz = _int_sqrt(zb) - _int_sqrt(za)
        return rad**2 * np.array([iz * (np.sin(pb) - np.sin(pa)), iz * (np.cos(pa) - np.cos(pb)),
                                  0.5 * (zb**2 - za**2) * (pb - pa)])

    left, right, area = [], [], []
    wall, far = [], []
    for s in range(n_shells):
        r1, r2 = r[s], r[s + 1]
        for t in range(n_theta):
            for p in range(n_phi):
                c = cid(s, t, p)
                # outer radial face
                a = radial_area(r2, t, p)
                if s + 1 < n_shells:
                    left.append(c); right.append(cid(s + 1, t, p)); area.append(a)
                else:
                    far.append(len(left)); left.append(c); right.append(-1); area.append(a)
                if s == 0:
                    wall.append(len(left)); left.append(c); right.append(-1)
                    area.append(-radial_area(r1, t, p))
                # cone face towards larger theta (smaller z)
                if t > 0:
                    zt = z[t]
                    th = np.arccos(zt)
                    st, ct = np.sin(th), np.cos(th)
                    pa, pb = ph[p], ph[p + 1]
                    e = np.array([ct * (np.sin(pb) - np.sin(pa)), ct * (np.cos(pa) - np.cos(pb)), -st * (pb - pa)])
                    left.append(c); right.append(cid(s, t - 1, p)); area.append(st * 0.5 * (r2**2 - r1**2) * e)
                # longitude face at phi_{p+1}
                pb = ph[p + 1]
                dth = np.arccos(z[t]) - np.arccos(z[t + 1])
                e_phi = np.array([-np.sin(pb), np.cos(pb), 0.0])
                left.append(c); right.append(cid(s, t, p + 1)); area.append(0.5 * (r2**2 - r1**2) * dth * e_phi)

    area = np.array(area)
    wall = np.array(wall)
    far = np.array(far)
    wall_areas = np.linalg.norm(area[wall], axis=1)
    wall_normals = area[wall] / wall_areas[:, None]
    # Wall face centres: patch midpoints on the unit sphere.
    wc = []
    for t in range(n_theta):
        zc = 0.5 * (z[t] + z[t + 1])
        for p in range(n_phi):
            pc = 0.5 * (ph[p] + ph[p + 1])
            sc = np.sqrt(1 - zc * zc)
            wc.append([sc * np.cos(pc), sc * np.sin(pc), zc])
    return SpatialMesh(r, z, ph, np.array(centers), np.array(volumes), np.array(left), np.array(right),
                       area, wall, far, np.array(wc), wall_normals, wall_areas,
                       area[far] / np.linalg.norm(area[far], axis=1)[:, None])


MESH_PRESETS = {
    "desk": dict(n_shells=8, n_theta=4, n_phi=8, r_far=8.0),
    "coarse": dict(n_shells=4, n_theta=2, n_phi=4, r_far=8.0),
    "tiny": dict(n_shells=2, n_theta=2, n_phi=4, r_far=3.0),
}


def mesh_from_preset(name: str) -> SpatialMesh:
    if name not in MESH_PRESETS:
        raise KeyError(f"unknown mesh preset {name!r}; choose from {sorted(MESH_PRESETS)}")
    return build_mesh(**MESH_PRESETS[name])


@dataclass
class BoundaryOperator:
    """Diffuse reflection P_gamma on each wall face.

    For a trace h (normalized by sqrt(mu_c)) the outgoing flux is
    z_+(h) = sum_{v.n>0} h sqrt(mu_c) (v.n) dv and the re-emitted trace is
    P_gamma h = M(v) / sqrt(mu_c) * z_+(h), with M the wall Maxwellian.
    ``normalization='discrete'`` rescales M per face so the incoming flux
    equals z_+ exactly on the grid; 'continuum' uses sqrt(2 pi) mu.
    """

    normals: np.ndarray
    vn: np.ndarray
    out_mask: np.ndarray
    emit: np.ndarray
    collect: np.ndarray
    sqrt_mu_c: np.ndarray
    weights: np.ndarray

    def z_plus(self, trace: np.ndarray) -> np.ndarray:
        """Outgoing mass flux per face; trace has shape (..., n_faces, N)."""
        return np.sum(trace * self.collect, axis=-1)

    def z_minus(self, trace: np.ndarray) -> np.ndarray:
        """Incoming mass flux per face (positive for gas leaving the wall)."""
        return np.sum(trace * self.sqrt_mu_c * np.abs(self.vn) * self.weights * ~self.out_mask, axis=-1)

    def net_flux(self, trace: np.ndarray) -> np.ndarray:
        """sum over all v of trace sqrt(mu_c) (v . n); zero for a flux-balanced trace."""
        return np.sum(trace * self.sqrt_mu_c * self.vn * self.weights, axis=-1)

    def apply(self, trace: np.ndarray) -> np.ndarray:
        """P_gamma h on the full velocity grid for every face."""
        return self.z_plus(trace)[..., None] * self.emit

    def incoming(self, trace: np.ndarray) -> np.ndarray:
        """P_gamma h restricted to v . n < 0."""
        return self.apply(trace) * ~self.out_mask


def build_boundary_operator(normals: np.ndarray, drift: DriftContext, grid: VelocityGrid,
                            normalization: str = "discrete") -> BoundaryOperator:
    v = grid.nodes
    w = grid.weights
    vn = np.asarray(normals) @ v.T
    out = vn > 0
    sq = drift.sqrt_mu_c(v)
    mu = standard_maxwellian(v)
    if normalization == "discrete":
        scale = 1.0 / np.sum(mu * np.abs(vn) * w * ~out, axis=1, keepdims=True)
    elif normalization == "continuum":
        scale = np.full((vn.shape[0], 1), np.sqrt(2 * np.pi))
    else:
        raise ValueError(f"unknown normalization {normalization!r}")
    emit = scale * mu / sq
    collect = sq * vn * w * out
    return BoundaryOperator(np.asarray(normals), vn, out, emit, collect, sq, w)


@dataclass
class KineticField:
    """Values on (cell, velocity) plus full traces on wall and far-field faces.

    On each boundary face the trace holds the adjacent cell value on the
    outgoing half-space and the imposed inflow value on the incoming one.
    """

    values: np.ndarray
    wall_trace: np.ndarray
    far_trace: np.ndarray

    @classmethod
    def from_values(cls, values: np.ndarray, mesh: SpatialMesh, grid: VelocityGrid,
                    wall_in: np.ndarray | None = None, far_in: np.ndarray | None = None) -> "KineticField":
        values = np.asarray(values, dtype=float)
        v = grid.nodes
        wl = mesh.face_left[mesh.wall_faces]
        fl = mesh.face_left[mesh.far_faces]
        wall_out = (mesh.face_area[mesh.wall_faces] @ v.T) > 0
        far_out = (mesh.face_area[mesh.far_faces] @ v.T) > 0
        wall_in = 0.0 if wall_in is None else wall_in
        far_in = 0.0 if far_in is None else far_in
        return cls(values, np.where(wall_out, values[wl], wall_in), np.where(far_out, values[fl], far_in))

    def __sub__(self, other: "KineticField") -> "KineticField":
        return KineticField(self.values - other.values, self.wall_trace - other.wall_trace,
                            self.far_trace - other.far_trace)

    def __mul__(self, s: float) -> "KineticField":
        return KineticField(self.values * s, self.wall_trace * s, self.far_trace * s)

    __rmul__ = __mul__
