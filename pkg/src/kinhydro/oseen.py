"""Fourier-space macroscopic balance laws, their closed-form solution and multiplier norms.

Per wavevector k the unknowns (a, b, c) with pressure P = a + c satisfy

    i k.b + i eps (k.c_inf) a                     = s0
    i k P + eps[visc |k|^2 + i c_inf.k] b         = s
    i k.b + eps[kappa |k|^2 + 3/2 i c_inf.k] c    = s4

The closed form eliminates the pressure with the Leray projector and the
energy-minus-mass combination; a dense 5x5 solve per mode is the reference.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate
from scipy.special import hyp2f1

from .collision import HydroProjector, TransportCoefficients
from .mesh import KineticField, SpatialMesh
from .velocity import DriftContext, VelocityGrid

SINGULAR_PREFACTOR = 0.5


class ModeSingular(ArithmeticError):
    def __init__(self, message, k=None, c_mag=None):
        super().__init__(message)
        self.k = k
        self.c_mag = c_mag


class DivergentNorm(ArithmeticError):
    pass


def blend(t):
    """Quintic step 10t^3 - 15t^4 + 6t^5 on [0, 1]; value, slope and curvature match at both ends."""
    t = np.clip(t, 0.0, 1.0)
    return t**3 * (10 - 15 * t + 6 * t * t)


def low_cutoff(kmag):
    """Smooth indicator of |k| < 1, vanishing for |k| > 2."""
    return 1.0 - blend(np.asarray(kmag) - 1.0)


@dataclass
class KGrid:
    """Periodic Fourier lattice of an L-periodic box with n points per side."""

    L: float
    n: int

    def __post_init__(self):
        if self.n < 2 or self.L <= 0:
            raise ValueError("need n >= 2 and L > 0")
        k1 = 2 * np.pi / self.L * np.fft.fftfreq(self.n, d=1.0 / self.n)
        self.k = np.stack(np.meshgrid(k1, k1, k1, indexing="ij"))
        self.kmag = np.sqrt(np.sum(self.k**2, axis=0))
        self.zero_mode = self.kmag == 0

    @property
    def dk(self) -> float:
        return 2 * np.pi / self.L

    @property
    def cutoff(self) -> np.ndarray:
        return low_cutoff(self.kmag)

    @property
    def cutoff_complement(self) -> np.ndarray:
        return 1.0 - self.cutoff

    def points(self) -> np.ndarray:
        x1 = (np.arange(self.n) - self.n // 2) * self.L / self.n
        return np.stack(np.meshgrid(x1, x1, x1, indexing="ij"))


def leray(w_hat: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Pi w = w - k (k.w)/|k|^2 per mode; the zero mode is left unchanged."""
    k2 = np.sum(k * k, axis=0)
    safe = np.where(k2 == 0, 1.0, k2)
    kw = np.sum(k * w_hat, axis=0)
    return w_hat - k * np.where(k2 == 0, 0.0, kw / safe)


@dataclass
class MultiplierSpec:
    """N(k) = eps [sigma |k|^2 + i beta c_inf . k]."""

    sigma: float
    beta: float
    eps: float
    c_inf: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.sigma <= 0 or self.beta <= 0 or self.eps <= 0:
            raise ValueError("sigma, beta, eps must be positive")
        self.c_inf = tuple(float(x) for x in np.broadcast_to(self.c_inf, (3,)))

    @property
    def c(self) -> np.ndarray:
        return np.asarray(self.c_inf)

    def __call__(self, k: np.ndarray) -> np.ndarray:
        k = np.asarray(k)
        return self.eps * (self.sigma * np.sum(k * k, axis=0) + 1j * self.beta * np.tensordot(self.c, k, axes=1))


@dataclass
class SpectralState:
    a_hat: np.ndarray
    b_hat: np.ndarray
    c_hat: np.ndarray
    s0_hat: np.ndarray
    s_hat: np.ndarray
    s4_hat: np.ndarray
    zero_mode: np.ndarray | None = None

    @property
    def P_hat(self) -> np.ndarray:
        return self.a_hat + self.c_hat

    @classmethod
    def sources(cls, s0, s, s4) -> "SpectralState":
        z = np.zeros_like(s0, dtype=complex)
        return cls(z, np.zeros_like(s, dtype=complex), z.copy(), np.asarray(s0, complex),
                   np.asarray(s, complex), np.asarray(s4, complex))

    def __add__(self, other: "SpectralState") -> "SpectralState":
        return SpectralState(self.a_hat + other.a_hat, self.b_hat + other.b_hat, self.c_hat + other.c_hat,
                             self.s0_hat + other.s0_hat, self.s_hat + other.s_hat, self.s4_hat + other.s4_hat)


def _operators(k, visc, kappa, eps, c):
    k2 = np.sum(k * k, axis=0)
    ck = np.tensordot(c, k, axes=1)
    n_visc = eps * (visc * k2 + 1j * ck)
    n_heat = eps * (kappa * k2 + 1.5j * ck)
    return k2, ck, n_visc, n_heat


def solve_macroscopic(src: SpectralState, transport: tuple[float, float], spec: MultiplierSpec,
                      k: np.ndarray) -> SpectralState:
    """Closed-form per-mode solution of the three balance laws.

    ``transport`` is (viscosity, conductivity); ``spec`` supplies eps and c_inf.
    The zero mode is set to zero and flagged.
    """
    visc, kappa = transport
    if visc <= 0 or kappa <= 0:
        raise ValueError("transport coefficients must be positive")
    eps, c = spec.eps, spec.c
    k = np.asarray(k, dtype=float)
    k2, ck, n_visc, n_heat = _operators(k, visc, kappa, eps, c)
    zero = k2 == 0
    k2s = np.where(zero, 1.0, k2)
    n_visc_s = np.where(zero, 1.0, n_visc)
    s0, s, s4 = src.s0_hat, src.s_hat, src.s4_hat
    D = 1 + 1j * eps * n_visc * ck / k2s
    bad = (np.abs(D) < SINGULAR_PREFACTOR) & ~zero
    if np.any(bad):
        idx = np.argwhere(bad)[0]
        raise ModeSingular(f"prefactor below {SINGULAR_PREFACTOR} at k = {k[(slice(None), *idx)]}",
                           k=k[(slice(None), *idx)], c_mag=float(np.linalg.norm(c)))
    D = np.where(zero, 1.0, D)
    n_heat_52 = n_heat + 1j * eps * ck
    X = (np.sum(k * s, axis=0) + 1j * n_visc * s0) / (1j * k2s)
    nbar = n_heat_52 + eps**2 * ck**2 * n_visc / (k2s * D)
    nbar = np.where(zero, 1.0, nbar)
    c_hat = (s4 - s0 + 1j * eps * ck * X / D) / nbar
    P_hat = (X - eps * n_visc * ck * c_hat / (1j * k2s)) / D
    a_hat = P_hat - c_hat
    kb = -1j * s0 - eps * ck * a_hat
    b_hat = leray(s, k) / n_visc_s + k * kb / k2s
    out = SpectralState(np.where(zero, 0, a_hat), np.where(zero, 0, b_hat), np.where(zero, 0, c_hat),
                        src.s0_hat, src.s_hat, src.s4_hat, zero)
    return out


def dense_oracle(src: SpectralState, transport: tuple[float, float], spec: MultiplierSpec,
                 k: np.ndarray) -> SpectralState:
    """Reference solution by a dense 5x5 complex solve per mode (unknowns a, b1, b2, b3, c)."""
    visc, kappa = transport
    eps, c = spec.eps, spec.c
    k = np.asarray(k, dtype=float)
    shape = k.shape[1:]
    kf = k.reshape(3, -1)
    m = kf.shape[1]
    s0 = src.s0_hat.reshape(-1)
    s = src.s_hat.reshape(3, -1)
    s4 = src.s4_hat.reshape(-1)
    a = np.zeros(m, complex)
    b = np.zeros((3, m), complex)
    cc = np.zeros(m, complex)
    for j in range(m):
        kk = kf[:, j]
        k2 = kk @ kk
        if k2 == 0:
            continue
        ck = c @ kk
        nv = eps * (visc * k2 + 1j * ck)
        nh = eps * (kappa * k2 + 1.5j * ck)
        M = np.zeros((5, 5), complex)
        M[0, 0] = 1j * eps * ck
        M[0, 1:4] = 1j * kk
        for i in range(3):
            M[1 + i, 0] = 1j * kk[i]
            M[1 + i, 4] = 1j * kk[i]
            M[1 + i, 1 + i] = nv
        M[4, 1:4] = 1j * kk
        M[4, 4] = nh
        rhs = np.concatenate([[s0[j]], s[:, j], [s4[j]]])
        x = np.linalg.solve(M, rhs)
        a[j], b[:, j], cc[j] = x[0], x[1:4], x[4]
    return SpectralState(a.reshape(shape), b.reshape((3,) + shape), cc.reshape(shape),
                         src.s0_hat, src.s_hat, src.s4_hat, np.sum(k * k, axis=0) == 0)


def balance_residual(st: SpectralState, transport: tuple[float, float], spec: MultiplierSpec,
                     k: np.ndarray) -> float:
    """Max over nonzero modes of the balance-law residual relative to the largest term."""
    visc, kappa = transport
    k = np.asarray(k, dtype=float)
    k2, ck, n_visc, n_heat = _operators(k, visc, kappa, spec.eps, spec.c)
    kb = np.sum(k * st.b_hat, axis=0)
    r0 = 1j * kb + 1j * spec.eps * ck * st.a_hat - st.s0_hat
    rm = 1j * k * st.P_hat + n_visc * st.b_hat - st.s_hat
    r4 = 1j * kb + n_heat * st.c_hat - st.s4_hat
    scale = max(np.abs(st.s0_hat).max(), np.abs(st.s_hat).max(), np.abs(st.s4_hat).max(), 1e-300)
    mask = k2 > 0
    res = max(np.abs(r0[mask]).max(), np.abs(rm[:, mask]).max(), np.abs(r4[mask]).max())
    return float(res / scale)


def stokes_limit(src: SpectralState, transport, spec: MultiplierSpec, k) -> SpectralState:
    """Solution with the drift terms dropped (c_inf = 0)."""
    spec0 = MultiplierSpec(spec.sigma, spec.beta, spec.eps, (0.0, 0.0, 0.0))
    return solve_macroscopic(src, transport, spec0, k)


# Multiplier norms.


def _inner_angular(r, sigma, beta, c_mag, q):
    """int_{-1}^{1} |sigma r + i beta |c| t|^{-q} dt."""
    a = sigma * r
    return 2 * a ** (-q) * hyp2f1(0.5, q / 2, 1.5, -((beta * c_mag / a) ** 2))


def radial_reference_norm(spec: MultiplierSpec, q: float, ell: int, r_max: float = 2.0) -> float:
    """||eps j |k|^ell N^{-1}||_q by one-dimensional quadrature of the exact angular integral."""
    c_mag = float(np.linalg.norm(spec.c))
    if 3 + q * (ell - 2) <= (0 if c_mag == 0 else -1):
        raise DivergentNorm(f"norm diverges at the origin for q={q}, ell={ell}, |c|={c_mag}")

    def integrand(r):
        if c_mag == 0:
            inner = 2 * (spec.sigma * r) ** (-q)
        else:
            inner = _inner_angular(r, spec.sigma, spec.beta, c_mag, q)
        return 2 * np.pi * r ** (2 + q * ell - q) * low_cutoff(r) ** q * inner

    pts = [p for p in (spec.beta * c_mag / spec.sigma, 1.0) if 0 < p < r_max]
    total, _ = integrate.quad(integrand, 0, r_max, points=pts or None, limit=400, epsabs=0, epsrel=1e-10)
    return float(total ** (1 / q))


def _origin_ball(spec: MultiplierSpec, q: float, ell: int, rho: float) -> float:
    """Integral of the q-th power over the ball |k| < rho (where the cutoff equals 1)."""
    c_mag = float(np.linalg.norm(spec.c))
    if c_mag == 0:
        expo = 3 + q * ell - 2 * q
        return 4 * np.pi * spec.sigma ** (-q) * rho**expo / expo

    def integrand(r):
        return 2 * np.pi * r ** (2 + q * ell - q) * _inner_angular(r, spec.sigma, spec.beta, c_mag, q)

    pts = [spec.beta * c_mag / spec.sigma] if spec.beta * c_mag / spec.sigma < rho else None
    val, _ = integrate.quad(integrand, 0, rho, points=pts, limit=400, epsabs=0, epsrel=1e-10)
    return val


@dataclass
class ScanResult:
    value: float
    levels: list
    richardson: float
    divergent: bool
    sup_l2_bound: float = np.nan
    rows: list = field(default_factory=list)


def multiplier_norm_scan(spec: MultiplierSpec, q: float, ell: int, kgrid: KGrid, refinements: int = 2,
                         r_max: float = 2.0) -> ScanResult:
    """||eps j |k|^ell N^{-1}||_q by lattice quadrature over |k| <= r_max.

    Cell-centred lattice points of spacing 2 pi / L (L from ``kgrid``) are
    summed with the midpoint rule. The eight cells touching the origin are
    replaced by the equal-volume ball, integrated exactly when the integral
    converges there. At c_inf = 0 with
    3 + q(ell - 2) <= 0 the origin is omitted and ``divergent`` is set, so the
    value grows under refinement. Each refinement doubles L; the last two
    levels give a Richardson estimate assuming second-order lattice error.
    """
    if q <= 1 or ell not in (0, 1, 2):
        raise ValueError("need q > 1 and ell in {0, 1, 2}")
    if 3 + q * (ell - 2) <= -1:
        raise DivergentNorm(f"3 + q(ell - 2) = {3 + q * (ell - 2)} <= -1")
    c_mag = float(np.linalg.norm(spec.c))
    divergent = c_mag == 0 and 3 + q * (ell - 2) <= 0
    levels = []
    rows = []
    for lev in range(refinements + 1):
        L = kgrid.L * 2**lev
        dk = 2 * np.pi / L
        m = int(np.ceil(r_max / dk))
        k1 = dk * (np.arange(-m, m) + 0.5)
        kx, ky, kz = np.meshgrid(k1, k1, k1, indexing="ij")
        kmag = np.sqrt(kx**2 + ky**2 + kz**2)
        near = np.maximum(np.maximum(np.abs(kx), np.abs(ky)), np.abs(kz)) < dk
        sel = (kmag <= r_max) & ~near
        ks = np.stack([kx[sel], ky[sel], kz[sel]])
        nk = np.abs(spec.sigma * kmag[sel] ** 2 + 1j * spec.beta * np.tensordot(spec.c, ks, axes=1))
        vals = (low_cutoff(kmag[sel]) * kmag[sel] ** ell / nk) ** q
        total = float(np.sum(vals) * dk**3)
        if not divergent:
            total += _origin_ball(spec, q, ell, dk * (6 / np.pi) ** (1 / 3))
        levels.append(total ** (1 / q))
        rows.append({"q": q, "ell": ell, "eps": spec.eps, "c_mag": c_mag, "norm_value": levels[-1],
                     "refinement_level": lev})
    rich = (4 * levels[-1] - levels[-2]) / 3 if len(levels) > 1 else levels[-1]
    res = ScanResult(levels[-1], levels, float(rich), divergent, rows=rows)
    if ell == 2:
        k = kgrid.k
        nz = ~kgrid.zero_mode
        res.sup_l2_bound = float(np.max(np.abs(spec.eps * kgrid.kmag[nz] ** 2 / spec(k)[nz])))
    return res


def slope_fit(c_values, norms) -> float:
    return float(np.polyfit(np.log(c_values), np.log(norms), 1)[0])


def write_scan_csv(path: str, rows: list) -> None:
    cols = ("q", "ell", "eps", "c_mag", "norm_value", "refinement_level")
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        wr.writeheader()
        for r in rows:
            wr.writerow({k: r[k] for k in cols})


# Source splitting on a periodic box.


def sphere_cutoff(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """zeta = blend(|x| - 1) and its gradient: 0 inside the unit sphere, 1 beyond distance 1."""
    x = np.asarray(points, dtype=float)
    r = np.linalg.norm(x, axis=-1)
    t = np.clip(r - 1, 0, 1)
    z = blend(t)
    dz = 30 * t**2 * (1 - t) ** 2
    grad = (dz / np.where(r == 0, 1, r))[..., None] * x
    return z, grad


def nudft(values: np.ndarray, points: np.ndarray, k: np.ndarray, dV: float) -> np.ndarray:
    """sum_x values(x) exp(i k.x) dV for arbitrary wavevectors; values (n_pts, ...), k (m, 3)."""
    phase = np.exp(1j * (k @ points.T))
    return np.tensordot(phase, values, axes=1) * dV


@dataclass
class SourceSplit:
    parts: list
    total: tuple
    k: np.ndarray
    C_r: np.ndarray
    C_s: np.ndarray
    quadrature_error: float


def _moments(h, proj: HydroProjector, grid: VelocityGrid, drift: DriftContext):
    vc = drift.v_c(grid.nodes)
    sq = drift.sqrt_mu_c(grid.nodes)
    w = grid.weights
    e0 = sq * w
    e1 = vc.T * sq * w
    e4 = 0.5 * (np.sum(vc**2, axis=1) - 3) * sq * w
    return h @ e0, h @ e1.T, h @ e4


def split_sources(f: np.ndarray, g: np.ndarray, points: np.ndarray, dV: float, k: np.ndarray,
                  proj: HydroProjector, transport: TransportCoefficients, grid: VelocityGrid,
                  n_lambda: int = 16) -> SourceSplit:
    """Five-way splitting of the macroscopic sources at wavevectors ``k`` (shape (m, 3)).

    ``f`` and ``g`` are sampled on box points (n_pts, N). With C = f v.grad(zeta)
    and C(k) = C_s + k . C_r, C_s = C(0), C_r by Gauss-Legendre quadrature in
    lambda of grad_k C(lambda k). Part 1 is the large-k complement of the full
    source; parts 2-5 carry the low-k cutoff on C_s moments, C_r and the
    remaining kinetic terms, the g term, and the hydrodynamic moments of zeta g.
    """
    drift = proj.drift
    eps = drift.eps
    v = grid.nodes
    w = grid.weights
    zeta, gz = sphere_cutoff(points)
    fz = f * zeta[:, None]
    C = f * (gz @ v.T)
    zg = g * zeta[:, None]
    kmag = np.linalg.norm(k, axis=1)
    j = low_cutoff(kmag)
    jc = 1 - j
    fz_hat = nudft(fz, points, k, dV)
    zg_hat = nudft(zg, points, k, dV)
    C_hat = nudft(C, points, k, dV)
    C_s = nudft(C, points, np.zeros((1, 3)), dV)[0]

    def C_r_with(nl):
        lam, wl = np.polynomial.legendre.leggauss(nl)
        lam = 0.5 * (lam + 1)
        wl = 0.5 * wl
        out = np.zeros((k.shape[0], 3, v.shape[0]), complex)
        xC = points[:, :, None] * C[:, None, :]
        for lj, wj in zip(lam, wl):
            out += wj * 1j * nudft(xC.reshape(points.shape[0], -1), points, lj * k, dV).reshape(out.shape)
        return out

    C_r = C_r_with(n_lambda)
    C_r32 = C_r_with(2 * n_lambda)
    qerr = float(np.abs(C_r - C_r32).max() / max(np.abs(C_r32).max(), 1e-300))
    kC_r = np.einsum("mi,miv->mv", k, C_r)
    Bt, At = transport.B, transport.A

    def kinetic(micro_hat, h_hat):
        # eps k_i k_l <v_l micro, B_ij> - i eps k_i <h, B_ij>, and the same with A_i
        vm = np.einsum("lv,mv->mlv", v.T * w, micro_hat)
        sB = eps * np.einsum("mi,ml,mlv,ijv->mj", k, k, vm, Bt, optimize=True) \
            - 1j * eps * np.einsum("mi,mv,ijv->mj", k, h_hat * w, Bt, optimize=True)
        sA = eps * np.einsum("mi,ml,mlv,iv->m", k, k, vm, At, optimize=True) \
            - 1j * eps * np.einsum("mi,mv,iv->m", k, h_hat * w, At, optimize=True)
        return sB, sA

    def moments(h):
        return _moments(h, proj, grid, drift)

    micro = fz_hat - proj.project(fz_hat)
    m0, m1, m4 = moments(C_hat)
    sB, sA = kinetic(micro, zg_hat + C_hat)
    a_g, b_g, c_g = moments(zg_hat)
    s0 = m0 + a_g
    s = sB + m1 + b_g
    s4 = sA + m4 + c_g
    zeros = np.zeros_like(s0)
    parts = []
    parts.append((jc * s0, jc[:, None] * s, jc * s4))
    ms0, ms1, ms4 = moments(np.broadcast_to(C_s, C_hat.shape))
    parts.append((j * ms0, j[:, None] * ms1, j * ms4))
    mr0, mr1, mr4 = moments(kC_r)
    sB3, sA3 = kinetic(micro, C_hat)
    parts.append((j * mr0, j[:, None] * (sB3 + mr1), j * (sA3 + mr4)))
    sB4, sA4 = kinetic(np.zeros_like(micro), zg_hat)
    parts.append((zeros, j[:, None] * sB4, j * sA4))
    parts.append((j * a_g, j[:, None] * b_g, j * c_g))
    return SourceSplit(parts, (s0, s, s4), k, C_r, C_s, qerr)


# Flux functionals at the wall and through shells.


def _radial_faces(mesh: SpatialMesh, shell: int) -> tuple[np.ndarray, np.ndarray]:
    """Faces on the sphere r = r_edges[shell], with area vectors oriented along +e_r."""
    ns, nt, npp = mesh.shape
    if not 0 <= shell <= ns:
        raise ValueError(f"shell must lie in [0, {ns}]")
    if shell == 0:
        return mesh.wall_faces, -np.ones(mesh.n_wall)
    if shell == ns:
        return mesh.far_faces, np.ones(mesh.far_faces.size)
    per = nt * npp
    inner = mesh.face_right >= 0
    cand = np.where(inner & (mesh.face_left // per == shell - 1) & (mesh.face_right // per == shell))[0]
    return cand, np.ones(cand.size)


def shell_flux(f: KineticField, mesh: SpatialMesh, grid: VelocityGrid, basis: np.ndarray, shell: int) -> np.ndarray:
    """Flux along +e_r of the basis moments of f through the sphere r = r_edges[shell]."""
    faces, sign = _radial_faces(mesh, shell)
    a = (mesh.face_area[faces] @ grid.nodes.T) * sign[:, None]
    if shell == 0:
        vals = f.wall_trace
    elif shell == mesh.shape[0]:
        vals = f.far_trace
    else:
        L, R = mesh.face_left[faces], mesh.face_right[faces]
        vals = np.where(a > 0, f.values[L], f.values[R])
    return np.einsum("fv,fv,av->a", a, vals, basis * grid.weights)


def flux_functionals(f: KineticField, g: np.ndarray, mesh: SpatialMesh, grid: VelocityGrid,
                     proj: HydroProjector, shell: int = 0) -> np.ndarray:
    """Q_alpha = -int_S f (v . n) psi_alpha + int (1 - zeta) psi_alpha P g.

    S is the wall (n into the obstacle, ``shell`` = 0) or the sphere
    r = r_edges[shell] with the same orientation. The volume term covers the
    layer within distance 1 of the wall and does not depend on S, so for a
    solution of the transport equation Q(S) - Q(wall) equals the
    integral of psi_alpha g over the cells between the wall and S.
    """
    basis = proj.ortho
    zeta, _ = sphere_cutoff(mesh.centers)
    pg = proj.project(g)
    volume = np.einsum("m,mv,av->a", mesh.volumes * (1 - zeta), pg, basis * grid.weights)
    return shell_flux(f, mesh, grid, basis, shell) + volume


def enclosed_source(g: np.ndarray, mesh: SpatialMesh, grid: VelocityGrid, proj: HydroProjector,
                    shell: int) -> np.ndarray:
    """int over cells between the wall and r_edges[shell] of psi_alpha P g."""
    inside = mesh.shell_index() < shell
    return np.einsum("m,mv,av->a", mesh.volumes * inside, proj.project(g), proj.ortho * grid.weights)
