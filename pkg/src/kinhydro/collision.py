"""Hard-sphere collision operator on the velocity lattice.

Collision normals are taken from Lebedev sphere rules whose nodes are all
integer lattice directions. For a normal along the primitive lattice vector
``d`` the pair (v, v*) collides only when ``d . (v* - v)`` is a multiple of
``|d|^2``, so both post-collision velocities land exactly on lattice nodes.
The admissible partners form a sub-lattice of index ``|d|^2``, compensated by
that factor in the weight. Momentum and energy are conserved pair by pair,
lattice Maxwellians are exact equilibria, and the linearized operator has
the five collision invariants as an exact null space.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from itertools import permutations, product
from math import sqrt

import numba as nb
import numpy as np
from scipy import linalg
from scipy.special import erf

from .velocity import DriftContext, VelocityGrid, standard_maxwellian

TOL_SYM = 1e-10
TOL_NULL = 1e-6
TOL_PROJ = 1e-12
CACHE_VERSION = "linop-v1"


class NonOrthogonalRHS(ValueError):
    """Right-hand side has a hydrodynamic component; L^{-1} is undefined."""


class GridQualityError(RuntimeError):
    pass


def _signed_orbit(base):
    out = set()
    for perm in set(permutations(base)):
        for signs in product((1, -1), repeat=3):
            out.add(tuple(s * p for s, p in zip(signs, perm)))
    return sorted(out)


# (generator, weight per node normalized to unit total) for each orbit.
_LEBEDEV = {
    26: [((1, 0, 0), 1 / 21), ((1, 1, 0), 4 / 105), ((1, 1, 1), 9 / 280)],
    50: [((1, 0, 0), 4 / 315), ((1, 1, 0), 64 / 2835), ((1, 1, 1), 27 / 1280),
         ((1, 1, 3), 14641 / 725760)],
}


def lebedev_rule(n_nodes: int = 26) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Lattice directions, unit normals and weights (summing to 4 pi)."""
    if n_nodes not in _LEBEDEV:
        raise ValueError(f"available rules: {sorted(_LEBEDEV)}")
    dirs, wts = [], []
    for gen, w in _LEBEDEV[n_nodes]:
        for d in _signed_orbit(gen):
            dirs.append(d)
            wts.append(4 * np.pi * w)
    dirs = np.array(dirs, dtype=np.int64)
    return dirs, dirs / np.linalg.norm(dirs, axis=1, keepdims=True), np.array(wts)


@dataclass(frozen=True)
class CollisionKernel:
    """B(omega, V) = |V|^(theta - 1) |omega . V|; theta = 1 is hard spheres."""

    kind: str = "hard-sphere"
    theta: float = 1.0
    angular_nodes: int = 26

    def __post_init__(self):
        if self.kind == "hard-sphere" and self.theta != 1.0:
            raise ValueError("hard spheres have theta = 1")
        if not 0 <= self.theta <= 1:
            raise ValueError("theta must lie in [0, 1]")
        _, _, w = lebedev_rule(self.angular_nodes)
        if abs(w.sum() - 4 * np.pi) > 1e-12:
            raise ValueError("angular weights must sum to 4 pi")

    def half_rule(self):
        """One representative per +-omega pair, with the pair weight."""
        dirs, _, w = lebedev_rule(self.angular_nodes)
        keep = [i for i, d in enumerate(dirs) if tuple(d) > tuple(-d)]
        return dirs[keep], 2 * w[keep]

    def spec_text(self) -> str:
        return f"kind={self.kind};theta={self.theta!r};angular_nodes={self.angular_nodes}"


@nb.njit(cache=True)
def _enumerate(n, dirs, wdir, h, theta, fill, A, B, Ap, Bp, W):
    m = 0
    N = n * n * n
    for di in range(dirs.shape[0]):
        d0, d1, d2 = dirs[di, 0], dirs[di, 1], dirs[di, 2]
        dd = d0 * d0 + d1 * d1 + d2 * d2
        dn = sqrt(dd)
        for a in range(N):
            ax = a // (n * n)
            ay = (a // n) % n
            az = a % n
            for b in range(a, N):
                bx = b // (n * n)
                by = (b // n) % n
                bz = b % n
                s = d0 * (bx - ax) + d1 * (by - ay) + d2 * (bz - az)
                if s == 0 or s % dd != 0:
                    continue
                t = s // dd
                apx = ax + t * d0
                apy = ay + t * d1
                apz = az + t * d2
                if apx < 0 or apx >= n or apy < 0 or apy >= n or apz < 0 or apz >= n:
                    continue
                bpx = bx - t * d0
                bpy = by - t * d1
                bpz = bz - t * d2
                if bpx < 0 or bpx >= n or bpy < 0 or bpy >= n or bpz < 0 or bpz >= n:
                    continue
                ap = (apx * n + apy) * n + apz
                bp = (bpx * n + bpy) * n + bpz
                if a > ap or a > bp:
                    continue
                if fill:
                    rel = sqrt(float((bx - ax) ** 2 + (by - ay) ** 2 + (bz - az) ** 2)) * h
                    A[m] = a
                    B[m] = b
                    Ap[m] = ap
                    Bp[m] = bp
                    W[m] = wdir[di] * dd * h**3 * abs(t) * dn * h * rel ** (theta - 1.0)
                m += 1
    return m


@dataclass
class CollisionTable:
    """Unique lattice collisions {a, b} <-> {a', b'} with their weights."""

    a: np.ndarray
    b: np.ndarray
    ap: np.ndarray
    bp: np.ndarray
    w: np.ndarray
    size: int

    @property
    def count(self) -> int:
        return self.a.shape[0]


_TABLES: dict = {}


def collision_table(grid: VelocityGrid, kernel: CollisionKernel) -> CollisionTable:
    key = (grid.hash(), kernel.spec_text())
    if key in _TABLES:
        return _TABLES[key]
    dirs, wdir = kernel.half_rule()
    n, h = grid.n_per_axis, grid.spacing
    dummy_i = np.zeros(1, np.int32)
    m = _enumerate(n, dirs, wdir, h, kernel.theta, False, dummy_i, dummy_i, dummy_i, dummy_i, np.zeros(1))
    arrs = [np.zeros(m, np.int32) for _ in range(4)]
    w = np.zeros(m)
    _enumerate(n, dirs, wdir, h, kernel.theta, True, *arrs, w)
    table = CollisionTable(*arrs, w, grid.size)
    _TABLES[key] = table
    return table


@nb.njit(cache=True)
def _incarnations(a, b, ap, bp):
    # Ordered (start, partner, post-start, post-partner) tuples of one collision.
    if ap == b:
        return ((a, b, ap, bp), (b, a, bp, ap), (a, b, ap, bp), (b, a, bp, ap)), 2
    return ((a, b, ap, bp), (b, a, bp, ap), (ap, bp, a, b), (bp, ap, b, a)), 4


@nb.njit(cache=True)
def _q_parts(F, G, A, B, Ap, Bp, W, symmetric):
    nv, m = F.shape
    gain = np.zeros((nv, m))
    loss = np.zeros((nv, m))
    for k in range(A.shape[0]):
        inc, cnt = _incarnations(A[k], B[k], Ap[k], Bp[k])
        w = W[k]
        for j in range(cnt):
            x, y, xp, yp = inc[j]
            if symmetric:
                for i in range(m):
                    gain[x, i] += 0.5 * w * (F[xp, i] * G[yp, i] + G[xp, i] * F[yp, i])
                    loss[x, i] += 0.5 * w * (F[x, i] * G[y, i] + G[x, i] * F[y, i])
            else:
                for i in range(m):
                    gain[x, i] += w * F[xp, i] * G[yp, i]
                    loss[x, i] += w * F[x, i] * G[y, i]
    return gain, loss


@nb.njit(cache=True)
def _linear_matrix(mu, A, B, Ap, Bp, W):
    N = mu.shape[0]
    M = np.zeros((N, N))
    nu = np.zeros(N)
    for k in range(A.shape[0]):
        inc, cnt = _incarnations(A[k], B[k], Ap[k], Bp[k])
        w = W[k]
        for j in range(cnt):
            x, y, xp, yp = inc[j]
            M[x, yp] += w * mu[xp]
            M[x, xp] += w * mu[yp]
            M[x, y] -= w * mu[x]
            nu[x] += w * mu[y]
    return M, nu


def _as_columns(f: np.ndarray, size: int) -> tuple[np.ndarray, tuple]:
    f = np.asarray(f, dtype=float)
    if f.shape[-1] != size:
        raise ValueError(f"last axis must have length {size}, got {f.shape}")
    lead = f.shape[:-1]
    return np.ascontiguousarray(f.reshape(-1, size).T), lead


def q_parts(F, G, grid: VelocityGrid, kernel: CollisionKernel = CollisionKernel(), symmetric=False):
    """Gain and loss parts of Q(F, G); the velocity axis is the last one."""
    t = collision_table(grid, kernel)
    Fc, lead = _as_columns(F, grid.size)
    Gc, lead_g = _as_columns(G, grid.size)
    if lead != lead_g:
        raise ValueError("F and G must have matching shapes")
    gain, loss = _q_parts(Fc, Gc, t.a, t.b, t.ap, t.bp, t.w, symmetric)
    return gain.T.reshape(lead + (grid.size,)), loss.T.reshape(lead + (grid.size,))


def q_bilinear(F, G, grid: VelocityGrid, kernel: CollisionKernel = CollisionKernel()) -> np.ndarray:
    """Q(F, G) = Q+ - Q- on lattice nodes. Collisions leaving the cube are dropped."""
    gain, loss = q_parts(F, G, grid, kernel)
    return gain - loss


def conservation_defect(F, grid: VelocityGrid, kernel: CollisionKernel = CollisionKernel()) -> np.ndarray:
    """Moments (mass, momentum, energy) of Q(F, F), relative to the loss scale."""
    gain, loss = q_parts(F, F, grid, kernel)
    v = grid.nodes
    inv = np.stack([np.ones(grid.size), v[:, 0], v[:, 1], v[:, 2], np.sum(v * v, axis=1)])
    scale = np.abs(loss) @ (np.abs(inv).T * grid.weights[:, None])
    return ((gain - loss) @ (inv.T * grid.weights[:, None])) / np.maximum(scale, 1e-300)


def hard_sphere_nu(speed: np.ndarray) -> np.ndarray:
    """Closed-form collision frequency 2 pi E|v - V|, V standard normal."""
    s = np.maximum(np.asarray(speed, dtype=float), 1e-12)
    return 2 * np.pi * (np.sqrt(2 / np.pi) * np.exp(-0.5 * s * s) + (s + 1 / s) * erf(s / np.sqrt(2)))


@dataclass
class LinearizedOperator:
    """L_c f = nu f - K f on the velocity lattice (inner product weighted by the grid)."""

    nu: np.ndarray
    K: np.ndarray
    drift: DriftContext
    grid: VelocityGrid
    kernel: CollisionKernel
    symmetry_defect: float
    _chol: tuple | None = field(default=None, repr=False)

    @property
    def matrix(self) -> np.ndarray:
        return np.diag(self.nu) - self.K

    def apply(self, f: np.ndarray) -> np.ndarray:
        f = np.asarray(f, dtype=float)
        return f * self.nu - f @ self.K  # K is symmetric

    def nu_closed_form(self) -> np.ndarray:
        return hard_sphere_nu(np.linalg.norm(self.drift.v_c(self.grid.nodes), axis=1))


def _cache_key(grid, drift, kernel) -> str:
    text = f"{CACHE_VERSION}|{grid.hash()}|{drift.eps!r}|{drift.c_inf!r}|{kernel.spec_text()}"
    return hashlib.sha1(text.encode()).hexdigest()[:20]


def build_linearized(drift: DriftContext, kernel: CollisionKernel, grid: VelocityGrid,
                     cache_dir: str | None = None) -> LinearizedOperator:
    """Assemble L_c = nu - K from the lattice collision table.

    The gain and loss partner terms become the dense kernel K. K is
    symmetrized explicitly; the defect before symmetrization is recorded.
    Passing ``cache_dir`` stores and reuses the assembled arrays.
    """
    if not np.array_equal(grid.nodes[grid.negation_map()], -grid.nodes):
        raise ValueError("velocity grid must be symmetric under v -> -v")
    path = None
    if cache_dir is not None:
        path = os.path.join(cache_dir, f"linop_{_cache_key(grid, drift, kernel)}.npz")
        if os.path.exists(path):
            data = np.load(path, allow_pickle=False)
            if str(data["version"]) == CACHE_VERSION:
                return LinearizedOperator(data["nu"], data["K"], drift, grid, kernel, float(data["defect"]))
    t = collision_table(grid, kernel)
    mu = drift.mu_c(grid.nodes)
    sq = np.sqrt(mu)
    M, nu = _linear_matrix(mu, t.a, t.b, t.ap, t.bp, t.w)
    # L f = nu f - mu^{-1/2} M (mu^{1/2} f), so K = mu^{-1/2} M mu^{1/2}.
    K = M * (sq[None, :] / sq[:, None])
    scale = max(np.abs(K).max(), 1e-300)
    defect = float(np.abs(K - K.T).max() / scale)
    K = 0.5 * (K + K.T)
    op = LinearizedOperator(nu, K, drift, grid, kernel, defect)
    if path is not None:
        os.makedirs(cache_dir, exist_ok=True)
        np.savez(path, version=CACHE_VERSION, nu=nu, K=K, defect=defect,
                 grid=grid.spec_text(), eps=drift.eps, c_inf=np.asarray(drift.c_inf),
                 kernel=kernel.spec_text())
    return op


def gamma_parts(f, g, drift: DriftContext, grid: VelocityGrid,
                kernel: CollisionKernel = CollisionKernel(), symmetric: bool = False):
    """(Gamma+, Gamma-) with Gamma(f, g) = mu_c^{-1/2} Q(mu_c^{1/2} f, mu_c^{1/2} g)."""
    sq = drift.sqrt_mu_c(grid.nodes)
    gain, loss = q_parts(np.asarray(f) * sq, np.asarray(g) * sq, grid, kernel, symmetric)
    return gain / sq, loss / sq


def gamma_bilinear(f, g, drift, grid, kernel=CollisionKernel()) -> np.ndarray:
    gain, loss = gamma_parts(f, g, drift, grid, kernel)
    return gain - loss


def gamma_sym(f, g, drift, grid, kernel=CollisionKernel()) -> np.ndarray:
    """Symmetrized form (Gamma(f, g) + Gamma(g, f)) / 2."""
    gain, loss = gamma_parts(f, g, drift, grid, kernel, symmetric=True)
    return gain - loss


@dataclass
class HydroProjector:
    """Weighted-orthogonal projector onto span{1, v_c, |v_c|^2} sqrt(mu_c).

    ``basis`` holds sqrt(mu_c), v_c sqrt(mu_c) and (|v_c|^2 - 3)/2 sqrt(mu_c),
    the functions whose coefficients are (a, b, c). ``ortho`` is an
    orthonormalized copy (psi_0..psi_4).
    """

    basis: np.ndarray
    ortho: np.ndarray
    gram_inv: np.ndarray
    weights: np.ndarray
    drift: DriftContext

    def coefficients(self, f: np.ndarray) -> np.ndarray:
        return (np.asarray(f) * self.weights) @ self.basis.T @ self.gram_inv.T

    def project(self, f: np.ndarray) -> np.ndarray:
        return self.coefficients(f) @ self.basis

    def residue(self, f: np.ndarray) -> np.ndarray:
        return np.asarray(f) - self.project(f)

    @property
    def matrix(self) -> np.ndarray:
        return self.basis.T @ self.gram_inv @ self.basis * self.weights[None, :]


def build_projector(drift: DriftContext, grid: VelocityGrid) -> HydroProjector:
    vc = drift.v_c(grid.nodes)
    sq = drift.sqrt_mu_c(grid.nodes)
    basis = np.stack([sq, vc[:, 0] * sq, vc[:, 1] * sq, vc[:, 2] * sq,
                      0.5 * (np.sum(vc * vc, axis=1) - 3) * sq])
    gram = (basis * grid.weights) @ basis.T
    chol = np.linalg.cholesky(gram)
    ortho = np.linalg.solve(chol, basis)
    return HydroProjector(basis, ortho, np.linalg.inv(gram), np.asarray(grid.weights), drift)


@dataclass
class HydroCoefficients:
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    projected: np.ndarray
    residue: np.ndarray


def project_hydro(f: np.ndarray, proj: HydroProjector) -> HydroCoefficients:
    """P_c f = [a + b . v_c + c (|v_c|^2 - 3) / 2] sqrt(mu_c), plus (I - P_c) f."""
    x = proj.coefficients(f)
    pf = x @ proj.basis
    return HydroCoefficients(x[..., 0], x[..., 1:4], x[..., 4], pf, np.asarray(f) - pf)


def weighted_norm(f: np.ndarray, weights: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(np.asarray(f) ** 2 * weights, axis=-1))


def solve_linv(rhs: np.ndarray, op: LinearizedOperator, proj: HydroProjector,
               tol: float = TOL_PROJ) -> np.ndarray:
    """Solve L_c x = rhs with P_c x = 0.

    ``rhs`` must be orthogonal to the null space up to ``tol`` relative to its
    norm. The solve uses the symmetric positive definite matrix L_c + P_c,
    which agrees with L_c on the complement and is the identity on the
    null space.
    """
    rhs = np.asarray(rhs, dtype=float)
    w = proj.weights
    hydro = weighted_norm(proj.project(rhs), w)
    size = np.maximum(weighted_norm(rhs, w), 1e-300)
    if np.any(hydro > tol * size):
        raise NonOrthogonalRHS(f"|P_c rhs| / |rhs| = {np.max(hydro / size):.3e} exceeds {tol:.1e}")
    if op._chol is None:
        op._chol = linalg.cho_factor(op.matrix + proj.matrix)
    sol = linalg.cho_solve(op._chol, rhs.reshape(-1, rhs.shape[-1]).T).T.reshape(rhs.shape)
    return proj.residue(sol)


@dataclass
class GapReport:
    gap: float
    null_dimension: int
    lowest: np.ndarray


def spectral_gap(op: LinearizedOperator, proj: HydroProjector) -> GapReport:
    """Smallest <f, L f> / ||f||_nu^2 over f orthogonal to Null L_c.

    Also counts eigenvalues of nu^{-1/2} L nu^{-1/2} below half the gap,
    which should be exactly the five collision invariants.
    """
    sw = np.sqrt(proj.weights)
    comp = linalg.null_space(proj.ortho * sw)
    L = op.matrix
    A = comp.T @ L @ comp
    Bm = comp.T @ (op.nu[:, None] * comp)
    gap = float(linalg.eigh(A, Bm, eigvals_only=True, subset_by_index=[0, 0])[0])
    dinv = 1 / np.sqrt(op.nu)
    low = linalg.eigvalsh(dinv[:, None] * L * dinv[None, :], subset_by_index=[0, 9])
    if gap <= 0:
        raise GridQualityError(f"non-positive spectral gap {gap:.3e}")
    return GapReport(gap, int(np.sum(low < 0.5 * gap)), low)


def null_residuals(op: LinearizedOperator, proj: HydroProjector, u=(0.3, -0.2, 0.5)) -> dict:
    """||L psi|| / ||psi|| for each basis function and for f1 = sqrt(mu_c) u . v_c."""
    w = proj.weights
    out = {}
    for k, name in enumerate(["psi0", "psi1", "psi2", "psi3", "psi4"]):
        psi = proj.ortho[k]
        out[name] = float(weighted_norm(op.apply(psi), w) / weighted_norm(psi, w))
    vc = op.drift.v_c(op.grid.nodes)
    f1 = op.drift.sqrt_mu_c(op.grid.nodes) * (vc @ np.asarray(u, dtype=float))
    out["f1"] = float(weighted_norm(op.apply(f1), w) / weighted_norm(f1, w))
    return out


@dataclass
class NuFit:
    exponent: float
    nu0: float
    nu1: float
    max_rel_closed_form: float


def fit_nu(op: LinearizedOperator, r_min: float = 3.0) -> NuFit:
    """Least-squares exponent of nu against |v_c| on r_min <= |v_c| <= v_max."""
    r = np.linalg.norm(op.drift.v_c(op.grid.nodes), axis=1)
    sel = (r >= r_min) & (r <= op.grid.cutoff)
    slope = np.polyfit(np.log(r[sel]), np.log(op.nu[sel]), 1)[0]
    big = r >= 1
    ratio = op.nu[big] / r[big] ** op.kernel.theta
    inner = r <= op.grid.cutoff
    closed = op.nu_closed_form()
    return NuFit(float(slope), float(ratio.min()), float(ratio.max()),
                 float(np.max(np.abs(op.nu[inner] - closed[inner]) / closed[inner])))


@dataclass
class TransportCoefficients:
    viscosity: float
    shear_viscosity: float
    conductivity: float
    B: np.ndarray
    A: np.ndarray


def transport_coefficients(op: LinearizedOperator, proj: HydroProjector) -> TransportCoefficients:
    """Viscosity and heat conductivity from the Burnett-type functions B and A.

    ``viscosity`` averages <B_ij, L B_ij> over all nine components;
    ``shear_viscosity`` averages the off-diagonal ones, which is the
    coefficient appearing in the momentum balance of the expansion.
    """
    vc = op.drift.v_c(op.grid.nodes)
    sq = op.drift.sqrt_mu_c(op.grid.nodes)
    s2 = np.sum(vc * vc, axis=1)
    srcB = np.empty((3, 3, op.grid.size))
    for i in range(3):
        for j in range(3):
            srcB[i, j] = (vc[:, i] * vc[:, j] - 0.5 * s2 * (i == j)) * sq
    srcA = 0.5 * vc.T * (s2 - 5) * sq
    B = solve_linv(proj.residue(srcB), op, proj)
    A = solve_linv(proj.residue(srcA), op, proj)
    w = proj.weights
    qB = np.einsum("ijv,ijv->ij", B * w, op.apply(B))
    qA = np.einsum("iv,iv->i", A * w, op.apply(A))
    off = ~np.eye(3, dtype=bool)
    return TransportCoefficients(float(qB.mean()), float(qB[off].mean()), float(qA.mean()), B, A)
