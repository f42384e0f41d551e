"""Steady exterior Navier-Stokes flow past an obstacle on a periodic proxy box.

The total velocity is U = w + v with w a divergence-free lift that vanishes
near the obstacle and equals c_inf at distance >= 1. The correction v solves

    w.grad v - lap v + grad p = -(w + v).grad w + lap w - v_prev.grad v

with U = 0 on obstacle nodes imposed by a volume penalty. The constant part
c_inf.grad - lap is inverted spectrally after Leray projection; the variable
parts are lagged in an inner fixed point, and the penalty is made implicit by a
capacitance (Woodbury) correction on the obstacle nodes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import fft as sfft
from scipy.ndimage import map_coordinates
from sklearn.base import BaseEstimator

from .expansion import FluidField
from .kinetic import NonContraction
from .oseen import KGrid, blend, leray

log = logging.getLogger(__name__)

PENALTY = 1e4
TOL_DIV = 1e-12
TOL_BC = 1e-3


def chi_profile(z):
    """1 for z < 1/2, 0 for z >= 1, quintic blend in between; returns value and derivative."""
    t = np.clip(2 * np.asarray(z, dtype=float) - 1, 0, 1)
    return 1 - blend(t), -2 * 30 * t**2 * (1 - t) ** 2


@dataclass
class ObstacleGeometry:
    """Sphere of radius ``radius`` centred at the origin with signed distance d = |x| - radius."""

    radius: float = 1.0

    def distance(self, points: np.ndarray) -> np.ndarray:
        return np.linalg.norm(points, axis=-1) - self.radius

    def distance_gradient(self, points: np.ndarray) -> np.ndarray:
        r = np.linalg.norm(points, axis=-1, keepdims=True)
        return points / np.where(r == 0, 1, r)

    def inside(self, points: np.ndarray) -> np.ndarray:
        return self.distance(points) < 0

    def surface_points(self, n_theta: int = 24, n_phi: int = 48) -> np.ndarray:
        th = (np.arange(n_theta) + 0.5) * np.pi / n_theta
        ph = np.arange(n_phi) * 2 * np.pi / n_phi
        T, P = np.meshgrid(th, ph, indexing="ij")
        x = np.stack([np.sin(T) * np.cos(P), np.sin(T) * np.sin(P), np.cos(T)], axis=-1).reshape(-1, 3)
        return self.radius * x


def _stream_potential(points, c):
    x = points
    return np.stack([c[1] * x[..., 2], c[2] * x[..., 0], c[0] * x[..., 1]], axis=-1)


def build_lift(geom: ObstacleGeometry, c_inf, points: np.ndarray) -> np.ndarray:
    """w = c - curl[chi(d) A], A = (c2 x3, c3 x1, c1 x2), evaluated in closed form.

    Since curl A = c, w = (1 - chi) c - chi'(d) grad d x A, which is zero where
    chi = 1 (including the obstacle and its surface) and equals c where d >= 1.
    """
    c = np.asarray(c_inf, dtype=float)
    x = np.asarray(points, dtype=float)
    chi, dchi = chi_profile(geom.distance(x))
    A = _stream_potential(x, c)
    return (1 - chi)[..., None] * c - dchi[..., None] * np.cross(geom.distance_gradient(x), A)


def lift_potential(geom: ObstacleGeometry, c_inf, points: np.ndarray) -> np.ndarray:
    """chi(d) A, whose negative curl plus c is the lift; compactly supported."""
    chi, _ = chi_profile(geom.distance(points))
    return chi[..., None] * _stream_potential(points, np.asarray(c_inf, dtype=float))


class SpectralBox:
    """FFT helpers on the periodic box [-L/2, L/2)^3 with n points per side."""

    def __init__(self, L: float, n: int):
        self.kg = KGrid(L, n)
        self.L, self.n = L, n
        self.h = L / n
        self.x = np.moveaxis(self.kg.points(), 0, -1)
        # Nyquist wavenumbers are zeroed so that spectral derivatives of real fields stay real.
        k = self.kg.k.copy()
        k[np.abs(k) >= np.pi / self.h * (1 - 1e-12)] = 0.0
        self.k = k
        self.k2 = np.sum(k * k, axis=0)

    def fft(self, f):
        return sfft.fftn(sfft.ifftshift(f, axes=(-3, -2, -1)), axes=(-3, -2, -1), workers=-1)

    def ifft(self, f_hat):
        return sfft.fftshift(sfft.ifftn(f_hat, axes=(-3, -2, -1), workers=-1).real, axes=(-3, -2, -1))

    def grad(self, f_hat):
        """d_k f_j as an array [k, j, ...] from the spectrum of a vector field."""
        return self.ifft(1j * self.k[:, None] * f_hat[None])

    def curl_hat(self, a_hat):
        k = self.k
        return 1j * np.stack([k[1] * a_hat[2] - k[2] * a_hat[1], k[2] * a_hat[0] - k[0] * a_hat[2],
                              k[0] * a_hat[1] - k[1] * a_hat[0]])

    def divergence_defect(self, f_hat) -> float:
        return float(np.abs(np.sum(self.k * f_hat, axis=0)).max() / max(np.abs(f_hat).max(), 1e-300))


def oseen_multiplier_bound(k: np.ndarray, c_inf) -> float:
    """max over modes and indices of |k_m k_l Pi_jn / (|k|^2 + i c.k)|, the symbol of d_m d_l of the Oseen inverse."""
    k2 = np.sum(k * k, axis=0)
    ck = np.tensordot(np.asarray(c_inf, dtype=float), k, axes=1)
    nz = k2 > 0
    kk = k[:, nz]
    sym = np.abs(1.0 / (k2[nz] + 1j * ck[nz]))
    kmax = np.max(np.abs(kk), axis=0)
    pi = np.eye(3)[:, :, None] - kk[:, None] * kk[None, :] / k2[nz]
    return float(np.max(kmax**2 * sym * np.max(np.abs(pi), axis=(0, 1))))


@dataclass
class NSState:
    v: np.ndarray
    p: np.ndarray
    ell: int = 0
    history: list = field(default_factory=list)
    inner_factors: list = field(default_factory=list)


@dataclass
class OseenProblem:
    box: SpectralBox
    geom: ObstacleGeometry
    c: np.ndarray
    w: np.ndarray
    grad_w: np.ndarray
    forcing: np.ndarray
    obstacle: np.ndarray
    symbol: np.ndarray
    capacitance: np.ndarray | None
    penalty: float
    lift_report: dict

    def green(self, f_hat):
        """Leray-projected Oseen inverse (|k|^2 + i c.k)^-1 Pi f; zero mode set to zero."""
        return leray(f_hat, self.box.k) * self.symbol

    def penalized_solve(self, f: np.ndarray) -> np.ndarray:
        """v with Pi[(c.grad - lap) v + penalty 1_obstacle (v + w)] = Pi f.

        The penalty drives the total velocity w + v to zero on obstacle nodes.
        Writing S for restriction to those nodes and G for the projected
        inverse, S v solves (I + penalty S G S^T) S v = S G f - penalty S G S^T S w.
        """
        box = self.box
        v = box.ifft(self.green(box.fft(f)))
        if self.capacitance is None:
            return v
        idx = self.obstacle
        w_obs = self.w[:, idx[0], idx[1], idx[2]].T.ravel()
        sgs = (self.capacitance - np.eye(w_obs.size)) / self.penalty
        u_obs = np.linalg.solve(self.capacitance, v[:, idx[0], idx[1], idx[2]].T.ravel()
                                - self.penalty * sgs @ w_obs)
        src = np.zeros_like(f)
        src[:, idx[0], idx[1], idx[2]] = self.penalty * (u_obs + w_obs).reshape(-1, 3).T
        return v - box.ifft(self.green(box.fft(src)))


def build_problem(c_inf, L: float = 32.0, n: int = 48, geom: ObstacleGeometry | None = None,
                  penalty: float = PENALTY) -> OseenProblem:
    geom = geom or ObstacleGeometry()
    c = np.asarray(c_inf, dtype=float)
    box = SpectralBox(L, n)
    x = box.x
    # Spectral curl of the compactly supported potential keeps the discrete divergence at round-off.
    psi_hat = box.fft(np.moveaxis(lift_potential(geom, c, x), -1, 0))
    w = c[:, None, None, None] - box.ifft(box.curl_hat(psi_hat))
    w_hat = box.fft(w)
    grad_w = box.grad(w_hat)
    lap_w = box.ifft(-box.k2 * w_hat)
    adv_w = np.einsum("k...,kj...->j...", w, grad_w)
    forcing = lap_w - adv_w
    k2 = box.k2
    denom = k2 + 1j * np.tensordot(c, box.k, axes=1)
    symbol = np.where(k2 == 0, 0, 1 / np.where(k2 == 0, 1, denom))
    obstacle = np.nonzero(geom.inside(x))
    surf = geom.surface_points()
    lift_report = {
        "boundary_max": float(np.abs(build_lift(geom, c, surf)).max()),
        "grid_obstacle_max": float(np.abs(w[:, obstacle[0], obstacle[1], obstacle[2]]).max()) if obstacle[0].size else 0.0,
        "far_max_dev": float(np.abs(build_lift(geom, c, x[geom.distance(x) >= 1]) - c).max()),
        "div_defect": box.divergence_defect(box.fft(w)),
        "c_mag": float(np.linalg.norm(c)),
    }
    prob = OseenProblem(box, geom, c, w, grad_w, forcing, obstacle, symbol, None, penalty, lift_report)
    m = obstacle[0].size
    if m and penalty > 0:
        # capacitance I + penalty * S G S^T on the obstacle nodes (3 components each)
        cols = np.zeros((3 * m, 3 * m))
        for a in range(m):
            for j in range(3):
                e = np.zeros((3, n, n, n))
                e[j, obstacle[0][a], obstacle[1][a], obstacle[2][a]] = 1.0
                g = box.ifft(prob.green(box.fft(e)))
                cols[:, 3 * a + j] = g[:, obstacle[0], obstacle[1], obstacle[2]].T.ravel()
        prob.capacitance = np.eye(3 * m) + penalty * cols
    return prob


def _norm2(f, h):
    return float(np.sqrt(np.sum(f**2) * h**3))


def oseen_iterate(prob: OseenProblem, max_iter: int = 30, tol: float = 1e-8, inner_tol: float = 1e-10,
                  max_inner: int = 60, state: NSState | None = None) -> NSState:
    """Outer iteration in the lagged advection, inner fixed point for the variable coefficients.

    Raises NonContraction (carrying the state) when the step ratio exceeds 1
    for three consecutive steps.
    """
    box = prob.box
    h = box.h
    c = prob.c
    shape = (3, box.n, box.n, box.n)
    state = state or NSState(np.zeros(shape), np.zeros(shape[1:]))
    w_var = prob.w - c[:, None, None, None]
    v_prev = state.v
    prev_step = None
    growth = 0
    for ell in range(state.ell + 1, state.ell + max_iter + 1):
        v = v_prev.copy()
        inner = []
        for _ in range(max_inner):
            gv = box.grad(box.fft(v))
            rhs = (prob.forcing - np.einsum("k...,kj...->j...", v, prob.grad_w)
                   - np.einsum("k...,kj...->j...", w_var + v_prev, gv))
            v_new = prob.penalized_solve(rhs)
            d = _norm2(v_new - v, h)
            inner.append(d)
            v = v_new
            if d <= inner_tol * max(_norm2(v, h), 1e-300) or d == 0:
                break
        if len(inner) > 2 and inner[-3] > 0:
            state.inner_factors.append(inner[-2] / inner[-3])
        step = _norm2(v - v_prev, h)
        vnorm = _norm2(v, h)
        rel = step / vnorm if vnorm > 0 else 0.0
        ratio = step / prev_step if prev_step else np.nan
        state.history.append({"ell": ell, "step": step, "rel_step": rel, "ratio": ratio, "inner": len(inner)})
        log.info("oseen step %d rel %.3e ratio %.3f", ell, rel, ratio)
        growth = growth + 1 if prev_step and ratio > 1 else 0
        state.v, state.ell = v, ell
        if growth >= 3:
            raise NonContraction(f"step ratio above 1 for 3 steps at |c| = {np.linalg.norm(c):.3g}",
                                 ledger=state)
        if rel < tol:
            break
        prev_step = step
        v_prev = v
    state.p = pressure(prob, state.v)
    return state


def pressure(prob: OseenProblem, v: np.ndarray) -> np.ndarray:
    """p from the gradient part of the momentum balance: i k p_hat = (1 - Pi) F_hat."""
    box = prob.box
    U = prob.w + v
    gU = box.grad(box.fft(U))
    F = -np.einsum("k...,kj...->j...", U, gU)
    F_hat = box.fft(F)
    kF = np.sum(box.k * F_hat, axis=0)
    p_hat = np.where(box.k2 == 0, 0, -1j * kF / np.where(box.k2 == 0, 1, box.k2))
    return box.ifft(p_hat)


def momentum_residual(prob: OseenProblem, v: np.ndarray) -> float:
    """max |Pi(U.grad U - lap U)| over fluid nodes at least one spacing from the obstacle."""
    box = prob.box
    U = prob.w + v
    U_hat = box.fft(U)
    gU = box.grad(U_hat)
    R = np.einsum("k...,kj...->j...", U, gU) - box.ifft(-box.k2 * U_hat)
    R = box.ifft(leray(box.fft(R), box.k))
    far = prob.geom.distance(box.x) > box.h
    return float(np.abs(R[:, far]).max())


def norm_sweep(U: np.ndarray, c_inf, box: SpectralBox, geom: ObstacleGeometry, p_list=(2, 3, 6),
               n_shells: int = 6) -> dict:
    """||U - c||_p over fluid nodes of the full box and the half box, plus radial-shell contributions."""
    c = np.asarray(c_inf, dtype=float)
    diff = np.linalg.norm(U - c[:, None, None, None], axis=0)
    x = box.x
    fluid = ~geom.inside(x)
    half = np.all(np.abs(x) < box.L / 4, axis=-1) & fluid
    r = np.linalg.norm(x, axis=-1)
    edges = np.geomspace(geom.radius, np.sqrt(3) * box.L / 2 + 1e-9, n_shells + 1)
    out = {"full": {}, "half": {}, "shells": {}, "shell_edges": edges.tolist()}
    dV = box.h**3
    for p in p_list:
        out["full"][p] = float((np.sum(diff[fluid] ** p) * dV) ** (1 / p))
        out["half"][p] = float((np.sum(diff[half] ** p) * dV) ** (1 / p))
        out["shells"][p] = [float(np.sum(diff[fluid & (r >= a) & (r < b)] ** p) * dV)
                            for a, b in zip(edges[:-1], edges[1:])]
    return out


def energy_bound(v: np.ndarray, box: SpectralBox) -> dict:
    gv = box.grad(box.fft(v))
    dV = box.h**3
    return {"grad_L2": float(np.sqrt(np.sum(gv**2) * dV)),
            "L6": float((np.sum(np.sum(v**2, axis=0) ** 3) * dV) ** (1 / 6)),
            "L3": float((np.sum(np.sum(v**2, axis=0) ** 1.5) * dV) ** (1 / 3))}


class ExteriorNSSolver(BaseEstimator):
    """Estimator wrapper: ``fit(c_inf)`` solves for the flow; ``U_`` is the total velocity on the box."""

    def __init__(self, L: float = 32.0, n: int = 48, tol: float = 1e-8, max_iter: int = 30,
                 penalty: float = PENALTY, radius: float = 1.0):
        self.L = L
        self.n = n
        self.tol = tol
        self.max_iter = max_iter
        self.penalty = penalty
        self.radius = radius

    def fit(self, c_inf, y=None):
        self.geom_ = ObstacleGeometry(self.radius)
        self.problem_ = build_problem(c_inf, self.L, self.n, self.geom_, self.penalty)
        self.state_ = oseen_iterate(self.problem_, self.max_iter, self.tol)
        self.U_ = self.problem_.w + self.state_.v
        self.history_ = self.state_.history
        self.c_inf_ = self.problem_.c
        return self

    def norms(self, p_list=(2, 3, 6)) -> dict:
        return norm_sweep(self.U_, self.c_inf_, self.problem_.box, self.geom_, p_list)

    def predict(self, points) -> FluidField:
        return fluid_sampler(self.problem_, self.state_)(points)


def fluid_sampler(prob: OseenProblem, state: NSState):
    """Return points -> FluidField with u = U - c, derivatives taken spectrally and interpolated (cubic, periodic)."""
    box = prob.box
    u = prob.w + state.v - prob.c[:, None, None, None]
    u_hat = box.fft(u)
    g = box.grad(u_hat)
    hh = box.ifft(-box.k[:, None, None] * box.k[None, :, None] * u_hat[None, None])
    res = momentum_residual(prob, state.v)

    def interp(field_, pts):
        coords = (pts.T + box.L / 2) / box.h
        flat = field_.reshape(-1, box.n, box.n, box.n)
        return np.stack([map_coordinates(f, coords, order=3, mode="grid-wrap") for f in flat], axis=-1)

    def sample(points) -> FluidField:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        m = pts.shape[0]
        return FluidField(pts, interp(u, pts), interp(g, pts).reshape(m, 3, 3),
                          interp(hh, pts).reshape(m, 3, 3, 3), interp(state.p[None], pts)[:, 0], res)

    return sample
