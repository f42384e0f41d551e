"""Discrete velocity space, Maxwellians and a Gauss-Hermite moment oracle.

The solver grid is a uniform cell-centred Cartesian lattice. Moments needed
as exact references are computed separately with a factorized 1D
Gauss-Hermite rule, so the oracle never touches the solver grid.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from itertools import product
from typing import Iterable, Mapping

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.special import roots_laguerre

TOL_MOMENT = 1e-3
TOL_ORACLE = 1e-10
MAX_ORACLE_DEGREE = 8


@dataclass(frozen=True)
class VelocityGrid:
    """Uniform cell-centred lattice on the cube [-v_max, v_max]^3.

    Node ``a`` has lattice index ``(ix, iy, iz)`` with
    ``a = (ix * n + iy) * n + iz`` and velocity ``(i - (n - 1)/2) h``, which is
    exactly antisymmetric under ``i -> n - 1 - i``.
    """

    nodes: np.ndarray
    weights: np.ndarray
    cutoff: float
    spacing: float
    n_per_axis: int

    @property
    def size(self) -> int:
        return self.nodes.shape[0]

    @property
    def axis(self) -> np.ndarray:
        return (np.arange(self.n_per_axis) - (self.n_per_axis - 1) / 2) * self.spacing

    def lattice_index(self) -> np.ndarray:
        n = self.n_per_axis
        a = np.arange(self.size)
        return np.stack([a // (n * n), (a // n) % n, a % n], axis=1)

    def negation_map(self) -> np.ndarray:
        """Index permutation sending node v to node -v."""
        n = self.n_per_axis
        idx = n - 1 - self.lattice_index()
        return (idx[:, 0] * n + idx[:, 1]) * n + idx[:, 2]

    def integrate(self, values: np.ndarray) -> np.ndarray:
        """Quadrature over the last axis."""
        return np.asarray(values) @ self.weights

    def spec_text(self) -> str:
        return f"v_max = {self.cutoff!r}\nn_per_axis = {self.n_per_axis}\n"

    def hash(self) -> str:
        return hashlib.sha1(self.spec_text().encode()).hexdigest()[:16]

    @classmethod
    def from_spec_text(cls, text: str) -> "VelocityGrid":
        values = {}
        for line in text.splitlines():
            if "=" in line:
                key, val = line.split("=", 1)
                values[key.strip()] = val.strip()
        return build_grid(float(values["v_max"]), int(values["n_per_axis"]))


def build_grid(v_max: float, n_per_axis: int) -> VelocityGrid:
    """Build the tensor velocity lattice.

    Parameters
    ----------
    v_max : float
        Half-width of the velocity cube. Every node satisfies ``max|v_i| < v_max``.
    n_per_axis : int
        Nodes per axis. Must be even so the node set is closed under ``v -> -v``.

    Returns
    -------
    VelocityGrid
        Nodes at cell centres, each with weight ``h^3``. This is the trapezoid
        rule for integrands that vanish at the cube faces.
    """
    if not np.isfinite(v_max) or v_max <= 0:
        raise ValueError(f"v_max must be positive, got {v_max}")
    if int(n_per_axis) != n_per_axis or n_per_axis < 2 or n_per_axis % 2:
        raise ValueError(f"n_per_axis must be a positive even integer, got {n_per_axis}")
    n = int(n_per_axis)
    h = 2.0 * v_max / n
    axis = (np.arange(n) - (n - 1) / 2) * h
    nodes = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3)
    weights = np.full(nodes.shape[0], h**3)
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return VelocityGrid(nodes=nodes, weights=weights, cutoff=float(v_max), spacing=h, n_per_axis=n)


@dataclass(frozen=True)
class MaxwellianParams:
    rho: float = 1.0
    u: tuple = (0.0, 0.0, 0.0)
    T: float = 1.0

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("density must be positive")
        if not self.T > 0:
            raise ValueError("temperature must be positive")
        object.__setattr__(self, "u", tuple(float(x) for x in np.broadcast_to(self.u, (3,))))


def maxwellian(params: MaxwellianParams, v: np.ndarray) -> np.ndarray:
    """rho (2 pi T)^{-3/2} exp(-|v-u|^2 / 2T), vectorized over leading axes of v."""
    v = np.asarray(v, dtype=float)
    d = v - np.asarray(params.u)
    return params.rho * (2 * np.pi * params.T) ** -1.5 * np.exp(-0.5 * np.sum(d * d, axis=-1) / params.T)


def standard_maxwellian(v: np.ndarray) -> np.ndarray:
    return maxwellian(MaxwellianParams(), v)


def wall_maxwellian(v: np.ndarray) -> np.ndarray:
    """sqrt(2 pi) mu, normalized to unit half-space flux."""
    return np.sqrt(2 * np.pi) * standard_maxwellian(v)


@dataclass(frozen=True)
class DriftContext:
    """Knudsen number and far-field velocity; the reference state is mu(v - eps c)."""

    eps: float
    c_inf: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "c_inf", tuple(float(x) for x in np.broadcast_to(self.c_inf, (3,))))
        if not 0 < self.eps <= 1:
            raise ValueError(f"eps must lie in (0, 1], got {self.eps}")
        if not np.linalg.norm(self.c_inf) < 1:
            raise ValueError("|c_inf| must be below 1")

    @property
    def c(self) -> np.ndarray:
        return np.asarray(self.c_inf)

    @property
    def shift(self) -> np.ndarray:
        return self.eps * self.c

    def v_c(self, v: np.ndarray) -> np.ndarray:
        return np.asarray(v) - self.shift

    def mu_c(self, v: np.ndarray) -> np.ndarray:
        return standard_maxwellian(self.v_c(v))

    def sqrt_mu_c(self, v: np.ndarray) -> np.ndarray:
        vc = self.v_c(v)
        return (2 * np.pi) ** -0.75 * np.exp(-0.25 * np.sum(vc * vc, axis=-1))


@dataclass(frozen=True)
class WeightFunction:
    """w(v) = <v>^beta_prime exp(beta |v|^2) with <v> = sqrt(1 + |v|^2)."""

    beta: float = 0.01
    beta_prime: float = 4.0

    def __post_init__(self):
        if not 0 <= self.beta < 0.25:
            raise ValueError("beta must satisfy 0 <= beta < 1/4")
        if self.beta_prime < 0:
            raise ValueError("beta_prime must be non-negative")

    def __call__(self, v: np.ndarray) -> np.ndarray:
        s2 = np.sum(np.asarray(v) ** 2, axis=-1)
        return (1 + s2) ** (0.5 * self.beta_prime) * np.exp(self.beta * s2)


# Polynomials in three variables, stored as {exponents: coefficient}.


@dataclass
class Poly:
    terms: dict = field(default_factory=dict)

    @classmethod
    def const(cls, c: float) -> "Poly":
        return cls({(0, 0, 0): float(c)})

    @classmethod
    def var(cls, i: int) -> "Poly":
        e = [0, 0, 0]
        e[i] = 1
        return cls({tuple(e): 1.0})

    @classmethod
    def speed2(cls) -> "Poly":
        return cls.var(0) * cls.var(0) + cls.var(1) * cls.var(1) + cls.var(2) * cls.var(2)

    @classmethod
    def _coerce(cls, other) -> "Poly":
        return other if isinstance(other, Poly) else cls.const(other)

    def __add__(self, other) -> "Poly":
        other = self._coerce(other)
        out = dict(self.terms)
        for e, c in other.terms.items():
            out[e] = out.get(e, 0.0) + c
        return Poly(out)

    __radd__ = __add__

    def __neg__(self) -> "Poly":
        return Poly({e: -c for e, c in self.terms.items()})

    def __sub__(self, other) -> "Poly":
        return self + (-self._coerce(other))

    def __rsub__(self, other) -> "Poly":
        return self._coerce(other) - self

    def __mul__(self, other) -> "Poly":
        other = self._coerce(other)
        out: dict = {}
        for e1, c1 in self.terms.items():
            for e2, c2 in other.terms.items():
                e = (e1[0] + e2[0], e1[1] + e2[1], e1[2] + e2[2])
                out[e] = out.get(e, 0.0) + c1 * c2
        return Poly(out)

    __rmul__ = __mul__

    @property
    def degree(self) -> int:
        live = [sum(e) for e, c in self.terms.items() if c != 0]
        return max(live) if live else 0

    def __call__(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        out = np.zeros(v.shape[:-1])
        for (i, j, k), c in self.terms.items():
            out = out + c * v[..., 0] ** i * v[..., 1] ** j * v[..., 2] ** k
        return out


def _hermite_1d_moments(max_power: int) -> np.ndarray:
    x, w = hermegauss(MAX_ORACLE_DEGREE // 2 + 2)
    w = w / np.sqrt(2 * np.pi)
    return np.array([np.sum(w * x**p) for p in range(max_power + 1)])


_STD_MOMENTS = _hermite_1d_moments(MAX_ORACLE_DEGREE)


def gaussian_moment(poly: Poly, drift: DriftContext | None = None, lab_frame: bool = False) -> float:
    """Integral of poly against mu_c by factorized Gauss-Hermite quadrature.

    By default ``poly`` is a polynomial in the peculiar velocity ``v_c``, in
    which case the result does not depend on the drift. With
    ``lab_frame=True`` the polynomial is in ``v`` and the drift shift enters.
    """
    if poly.degree > MAX_ORACLE_DEGREE:
        raise ValueError(f"polynomial degree {poly.degree} exceeds {MAX_ORACLE_DEGREE}")
    if lab_frame and drift is not None and np.any(drift.shift != 0):
        x, w = hermegauss(MAX_ORACLE_DEGREE // 2 + 2)
        w = w / np.sqrt(2 * np.pi)
        pts = np.stack(np.meshgrid(x, x, x, indexing="ij"), axis=-1).reshape(-1, 3) + drift.shift
        wts = np.einsum("i,j,k->ijk", w, w, w).ravel()
        return float(np.sum(wts * poly(pts)))
    total = 0.0
    for (i, j, k), c in poly.terms.items():
        total += c * _STD_MOMENTS[i] * _STD_MOMENTS[j] * _STD_MOMENTS[k]
    return float(total)


def grid_moment(poly: Poly, grid: VelocityGrid, drift: DriftContext | None = None) -> float:
    """Same integral as gaussian_moment but with the solver lattice quadrature."""
    drift = drift or DriftContext(1.0)
    vc = drift.v_c(grid.nodes)
    return float(grid.integrate(poly(vc) * drift.mu_c(grid.nodes)))


def wall_flux_oracle() -> float:
    """Half-space flux of the wall Maxwellian through a unit normal.

    Reduces to sqrt(2 pi) int_0^inf s phi(s) ds; with t = s^2/2 this is a
    Gauss-Laguerre integral of a constant.
    """
    _, w_lag = roots_laguerre(4)
    normal_part = np.sum(w_lag) / np.sqrt(2 * np.pi)
    transverse = _STD_MOMENTS[0] ** 2
    return float(np.sqrt(2 * np.pi) * normal_part * transverse)


def wall_flux_grid(grid: VelocityGrid, normal: Iterable[float]) -> float:
    n = np.asarray(normal, dtype=float)
    n = n / np.linalg.norm(n)
    vn = grid.nodes @ n
    out = vn > 0
    return float(np.sum(wall_maxwellian(grid.nodes[out]) * vn[out] * grid.weights[out]))


def _v(i):
    return Poly.var(i)


def moment_identities() -> list[tuple[str, Poly, float]]:
    """The Gaussian moment identities used as fixed oracle rows.

    Each row is (label, polynomial in v_c, expected value).
    """
    s2 = Poly.speed2()
    rows = []
    for i, j in product(range(3), repeat=2):
        rows.append((f"v{i+1}*v{j+1}*(|v|^2-3)/2*(|v|^2-5)",
                     _v(i) * _v(j) * (s2 - 3) * 0.5 * (s2 - 5), 5.0 if i == j else 0.0))
    for i, j in product(range(3), repeat=2):
        rows.append((f"v{i+1}*v{j+1}*(|v|^2-10)", _v(i) * _v(j) * (s2 - 10), -5.0 if i == j else 0.0))
    for i, j in product(range(3), repeat=2):
        rows.append((f"v{i+1}*v{j+1}*(|v|^2-5)", _v(i) * _v(j) * (s2 - 5), 0.0))
    for i, j in product(range(3), repeat=2):
        rows.append((f"v{i+1}*v{j+1}*(|v|^2-10)*(|v|^2-3)",
                     _v(i) * _v(j) * (s2 - 10) * (s2 - 3), 0.0))
    for i in range(3):
        rows.append((f"(v{i+1}^2-1)", _v(i) * _v(i) - 1, 0.0))
        for k in range(3):
            rows.append((f"(v{i+1}^2-1)*v{k+1}^2", (_v(i) * _v(i) - 1) * _v(k) * _v(k), 2.0 if i == k else 0.0))
    return rows


def moment_table(grid: VelocityGrid | None = None, drift: DriftContext | None = None) -> list[dict]:
    """CSV-ready rows (poly, value, oracle, abs_error) plus the wall-flux row."""
    drift = drift or DriftContext(1.0)
    rows = []
    for label, poly, expected in moment_identities():
        oracle = gaussian_moment(poly, drift)
        value = grid_moment(poly, grid, drift) if grid is not None else oracle
        rows.append({"poly": label, "value": value, "oracle": oracle,
                     "expected": expected, "abs_error": abs(oracle - expected),
                     "grid_error": abs(value - oracle)})
    flux = wall_flux_oracle()
    gflux = wall_flux_grid(grid, (0, 0, 1)) if grid is not None else flux
    rows.append({"poly": "wall_flux", "value": gflux, "oracle": flux, "expected": 1.0,
                 "abs_error": abs(flux - 1.0), "grid_error": abs(gflux - flux)})
    return rows


def poly_from_mapping(terms: Mapping[tuple, float]) -> Poly:
    return Poly({tuple(int(x) for x in k): float(v) for k, v in terms.items()})
