"""Phase-space grids, mixed Lebesgue norms, the periodic Bessel solve and
admissible exponent tuples.

The spatial domain is the torus [0, L)^d with nodes k L / n_x; the velocity
box [-V, V]^d is cell-centred with n_v cells per axis. Field arrays are laid
out as ``(x_1, ..., x_d, v_1, ..., v_d)``. All integrals use the midpoint
(rectangle) rule on these nodes, and infinite exponents are grid maxima.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

INF = math.inf


class FieldError(ValueError):
    """Inconsistent grid, shape or exponent."""


@dataclass(frozen=True)
class Domain:
    d: int
    L: float
    n_x: int
    v_max: float
    n_v: int
    support: Optional[float] = None   # radius of the velocity set V; defaults to v_max

    def __post_init__(self):
        if self.d < 1:
            raise FieldError("dimension must be >= 1")
        if not (self.L > 0 and self.v_max > 0):
            raise FieldError("L and v_max must be positive")
        if self.n_x < 4 or self.n_v < 4:
            raise FieldError("n_x and n_v must be >= 4")
        if self.support is not None and not (0 < self.support <= self.v_max):
            raise FieldError("support radius must lie in (0, v_max]")

    @property
    def radius(self) -> float:
        return self.v_max if self.support is None else self.support

    @property
    def dx(self) -> float:
        return self.L / self.n_x

    @property
    def dv(self) -> float:
        return 2.0 * self.v_max / self.n_v

    @property
    def x_nodes(self) -> np.ndarray:
        return np.arange(self.n_x) * self.dx

    @property
    def v_nodes(self) -> np.ndarray:
        return -self.v_max + (np.arange(self.n_v) + 0.5) * self.dv

    @property
    def shape(self) -> tuple:
        return (self.n_x,) * self.d + (self.n_v,) * self.d

    @property
    def x_shape(self) -> tuple:
        return (self.n_x,) * self.d

    @property
    def v_shape(self) -> tuple:
        return (self.n_v,) * self.d

    @property
    def cell_x(self) -> float:
        return self.dx ** self.d

    @property
    def cell_v(self) -> float:
        return self.dv ** self.d

    def x_mesh(self) -> list:
        """Broadcastable coordinate arrays x_1..x_d over the full phase grid."""
        return self._mesh(self.x_nodes, 0)

    def v_mesh(self) -> list:
        return self._mesh(self.v_nodes, self.d)

    def _mesh(self, nodes, offset):
        out = []
        for i in range(self.d):
            shape = [1] * (2 * self.d)
            shape[offset + i] = nodes.size
            out.append(nodes.reshape(shape))
        return out

    def v_points(self) -> np.ndarray:
        """Velocity nodes as an array (n_v^d, d) in C order."""
        g = np.meshgrid(*([self.v_nodes] * self.d), indexing="ij")
        return np.stack([a.ravel() for a in g], axis=-1)

    def x_points(self) -> np.ndarray:
        g = np.meshgrid(*([self.x_nodes] * self.d), indexing="ij")
        return np.stack([a.ravel() for a in g], axis=-1)

    def speed(self) -> np.ndarray:
        """|v| on the velocity grid, shape ``v_shape``."""
        vm = np.meshgrid(*([self.v_nodes] * self.d), indexing="ij")
        return np.sqrt(sum(a * a for a in vm))

    def v_indicator(self) -> np.ndarray:
        """Indicator of the velocity set (ball of radius ``radius``) on the v-grid."""
        return (self.speed() <= self.radius + 1e-12).astype(float)

    def v_volume(self) -> float:
        return float(self.v_indicator().sum() * self.cell_v)

    def refined(self, factor: int = 2) -> "Domain":
        return Domain(self.d, self.L, self.n_x * factor, self.v_max, self.n_v * factor, self.support)


@dataclass(frozen=True, eq=False)
class PhaseField:
    domain: Domain
    values: np.ndarray
    t: float = 0.0
    distribution: bool = True

    def __post_init__(self):
        if self.values.shape != self.domain.shape:
            raise FieldError(f"values shape {self.values.shape} != domain shape {self.domain.shape}")

    def with_values(self, values, t=None) -> "PhaseField":
        return PhaseField(self.domain, values, self.t if t is None else t, self.distribution)

    def mass(self) -> float:
        return float(self.values.sum() * self.domain.cell_x * self.domain.cell_v)


@dataclass(frozen=True, eq=False)
class ChemField:
    domain: Domain
    values: np.ndarray
    gradient: np.ndarray    # (d,) + x_shape


# ---------------------------------------------------------------------------
# norms


def _inner_norm(a: np.ndarray, axes: tuple, q: float, w: float) -> np.ndarray:
    if q == INF:
        return np.abs(a).max(axis=axes)
    if q == 1:
        return np.abs(a).sum(axis=axes) * w
    return (np.power(np.abs(a), q).sum(axis=axes) * w) ** (1.0 / q)


def _check_exp(*ps):
    for p in ps:
        if not (p >= 1):
            raise FieldError(f"exponent must lie in [1, inf], got {p}")


def mixed_norm_array(values: np.ndarray, domain: Domain, p: float, q: float) -> float:
    """(int_x (int_v |f|^q dv)^{p/q} dx)^{1/p} on the domain grid."""
    _check_exp(p, q)
    d = domain.d
    inner = _inner_norm(values, tuple(range(d, 2 * d)), q, domain.cell_v)
    return float(_inner_norm(inner, tuple(range(d)), p, domain.cell_x))


def mixed_norm(f: PhaseField, p: float, q: float) -> float:
    """L_x^p L_v^q norm of a phase field."""
    return mixed_norm_array(f.values, f.domain, p, q)


def flat_norm(f: PhaseField, a: float) -> float:
    """L^a norm over (x, v) jointly."""
    _check_exp(a)
    w = f.domain.cell_x * f.domain.cell_v
    return float(_inner_norm(f.values, tuple(range(f.values.ndim)), a, w))


def time_norm(series: Sequence, r: float) -> float:
    """L^r norm in time of ``(t, value)`` pairs; trapezoid rule, max for r = inf."""
    _check_exp(r)
    ts = np.array([float(t) for t, _ in series])
    vals = np.abs(np.array([float(v) for _, v in series]))
    if ts.size and np.any(np.diff(ts) <= 0):
        raise FieldError("times must be strictly increasing")
    if r == INF:
        if vals.size == 0:
            raise FieldError("empty series")
        return float(vals.max())
    if ts.size < 2:
        raise FieldError("finite-r time norms need at least 2 points")
    y = vals ** r
    return float((0.5 * np.sum((y[1:] + y[:-1]) * np.diff(ts))) ** (1.0 / r))


def density(f: PhaseField) -> np.ndarray:
    """rho(x) = int f dv by midpoint quadrature."""
    d = f.domain.d
    return f.values.sum(axis=tuple(range(d, 2 * d))) * f.domain.cell_v


# ---------------------------------------------------------------------------
# Bessel potential


def wavenumbers(domain: Domain) -> list:
    """Angular wavenumbers 2 pi k / L along each axis, broadcastable on x_shape."""
    k = 2.0 * np.pi * np.fft.fftfreq(domain.n_x, d=domain.dx)
    out = []
    for i in range(domain.d):
        shape = [1] * domain.d
        shape[i] = domain.n_x
        out.append(k.reshape(shape))
    return out


def bessel_symbol(domain: Domain) -> np.ndarray:
    ks = wavenumbers(domain)
    return 1.0 / (1.0 + sum(k * k for k in ks))


def spectral_gradient(values: np.ndarray, domain: Domain) -> np.ndarray:
    """Spectral derivative along each axis, Nyquist mode dropped."""
    hat = np.fft.fftn(values)
    grads = []
    for i, k in enumerate(wavenumbers(domain)):
        kk = k.copy()
        if domain.n_x % 2 == 0:
            kk.reshape(-1)[domain.n_x // 2] = 0.0
        grads.append(np.fft.ifftn(1j * kk * hat).real)
    return np.stack(grads)


def spectral_laplacian(values: np.ndarray, domain: Domain) -> np.ndarray:
    ks = wavenumbers(domain)
    return np.fft.ifftn(-sum(k * k for k in ks) * np.fft.fftn(values)).real


def bessel_solve(rho: np.ndarray, domain: Domain) -> ChemField:
    """Solve S - Laplace S = rho on the torus spectrally."""
    rho = np.asarray(rho, dtype=float)
    if rho.shape != domain.x_shape:
        raise FieldError(f"rho shape {rho.shape} != {domain.x_shape}")
    if not np.all(np.isfinite(rho)):
        raise FieldError("rho must be finite")
    S = np.fft.ifftn(np.fft.fftn(rho) * bessel_symbol(domain)).real
    return ChemField(domain, S, spectral_gradient(S, domain))


# ---------------------------------------------------------------------------
# admissible tuples


def _inv(p: float) -> float:
    return 0.0 if p == INF else 1.0 / p


@dataclass(frozen=True)
class NormSpec:
    """Exponent tuple (q, r, p, a); use ``math.inf`` for infinity."""

    q: float
    r: float
    p: float
    a: float

    def __post_init__(self):
        _check_exp(self.q, self.r, self.p, self.a)

    @property
    def tuple(self):
        return (self.q, self.r, self.p, self.a)


@dataclass(frozen=True)
class AdmissibilityReport:
    passed: bool
    violated: tuple
    q_star: float
    p_star: float

    def __bool__(self):
        return self.passed


def critical_exponents(a: float, d: int) -> tuple:
    """(q*(a), p*(a)) with the branch split at a = (d+1)/d."""
    if a >= (d + 1) / d:
        q_star = INF if a == INF else d * a / (d + 1)
        p_star = INF if (d == 1 or a == INF) else d * a / (d - 1)
    else:
        q_star = 1.0
        p_star = a / (2 - a)
    return q_star, p_star


def check_admissible(spec: NormSpec, d: int, tol: float = 1e-12) -> AdmissibilityReport:
    """Evaluate every defining clause; ``violated`` names the failing ones."""
    if d < 1:
        raise FieldError("dimension must be >= 1")
    iq, ir, ip, ia = map(_inv, spec.tuple)
    q_star, p_star = critical_exponents(spec.a, d)
    iqs, ips = _inv(q_star), _inv(p_star)
    bad = []
    if abs(2 * ir - d * (iq - ip)) > tol:
        bad.append("scaling: 2/r = d(1/q - 1/p)")
    if abs(ia - 0.5 * (ip + iq)) > tol:
        bad.append("harmonic: 1/a = (1/p + 1/q)/2")
    if not (ia <= iq + tol and iq <= iqs + tol):
        bad.append("range: q*(a) <= q <= a")
    if not (ips <= ip + tol and ip <= ia + tol):
        bad.append("range: a <= p <= p*(a)")
    if d == 1 and abs(ir - ia) <= tol and ip <= tol and abs(iq - 2 * ia) <= tol:
        bad.append("exclusion: d = 1, (r, p, q) = (a, inf, a/2)")
    return AdmissibilityReport(not bad, tuple(bad), q_star, p_star)


def conjugate(a: float) -> float:
    if a == 1:
        return INF
    if a == INF:
        return 1.0
    return a / (a - 1.0)


def jointly_admissible(first: NormSpec, second: NormSpec, d: int, tol: float = 1e-12) -> bool:
    """Both tuples admissible and the second a-exponent equals a'."""
    if not (check_admissible(first, d, tol) and check_admissible(second, d, tol)):
        return False
    return abs(_inv(second.a) - _inv(conjugate(first.a))) <= tol


def theorem_exponents(a: float, r: float, d: int) -> NormSpec:
    """(q, r, p, a) with 1/p = 1/a - 1/(rd) and 1/q = 1/a + 1/(rd)."""
    ip = 1.0 / a - 1.0 / (r * d)
    iq = 1.0 / a + 1.0 / (r * d)
    return NormSpec(1.0 / iq, r, INF if ip == 0 else 1.0 / ip, a)


def theorem_range(d: int) -> tuple:
    """Parameter ranges r in (2, (d+3)/2], a in [max(d/2, d/(d-1)), r]."""
    if d < 2:
        raise FieldError("the parameter rule needs d >= 2")
    return (2.0, (d + 3) / 2.0), max(d / 2.0, d / (d - 1.0))


def dual_tuple(spec: NormSpec, d: int) -> NormSpec:
    """Companion tuple with a-exponent a' used for the inhomogeneous estimate."""
    ac = conjugate(spec.a)
    ia = _inv(ac)
    iq = ia + 1.0 / d - 2.0 / (spec.r * d)
    ip = ia - 1.0 / d + 2.0 / (spec.r * d)
    ir = 1.0 - 2.0 / spec.r
    inv = lambda x: INF if abs(x) < 1e-15 else 1.0 / x
    return NormSpec(inv(iq), inv(ir), inv(ip), ac)
