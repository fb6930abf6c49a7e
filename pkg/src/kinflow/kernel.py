"""Turning kernels, gain/loss collision operators and kernel regularization.

Kernels act pointwise in time and have the separable form
``K(S)(x, v, v') = rate(S, grad S)(x) * A(v, v')``. On a grid a kernel is
assembled into an :class:`AssembledKernel` holding either the separable pair
(rate, A) or, after a clamping regularization, the full tensor
``T[x, v, v']``. Gain and loss are evaluated with the same quadrature
weights, so the discrete exchange identity sum(gain - loss) = 0 holds up to
rounding.
"""
from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import ndimage

from .fields import ChemField, Domain, FieldError, PhaseField

KINDS = ("zero", "angle", "bounded-test", "custom")
FULL_TENSOR_LIMIT = 2 ** 24


class KernelError(ValueError):
    """Invalid kernel specification or incompatible field."""


RateMap = Callable[[np.ndarray, np.ndarray], np.ndarray]   # (S, grad S) -> rate
PairMap = Callable[[np.ndarray, np.ndarray], np.ndarray]   # (v, v') -> A


def linear_rate(c: float = 1.0) -> RateMap:
    """lambda(S) = c max(S, 0); satisfies |lambda(s)| <= c |s|."""
    return lambda S, G: c * np.maximum(S, 0.0)


def gradient_rate(c: float = 1.0) -> RateMap:
    """lambda = c |grad S|."""
    return lambda S, G: c * np.sqrt(np.sum(G * G, axis=0))


def constant_rate(kappa: float = 1.0) -> RateMap:
    return lambda S, G: np.full(S.shape, float(kappa))


def constant_profile(value: float = 1.0) -> Callable[[np.ndarray], np.ndarray]:
    return lambda theta: np.full(np.shape(theta), float(value))


def cosine_profile(a: float = 1.0, b: float = 0.5) -> Callable[[np.ndarray], np.ndarray]:
    """h(theta) = a + b cos(theta), nonnegative when a >= |b|."""
    if a < abs(b):
        raise KernelError("cosine profile needs a >= |b| for nonnegativity")
    return lambda theta: a + b * np.cos(theta)


def turning_angle(v: np.ndarray, w: np.ndarray) -> np.ndarray:
    """theta(v, v') = arccos(v.v' / |v||v'|), set to pi/2 when either is 0."""
    nv = np.linalg.norm(v, axis=-1)
    nw = np.linalg.norm(w, axis=-1)
    denom = nv * nw
    zero = denom == 0
    cosang = np.einsum("...i,...i->...", v, w) / np.where(zero, 1.0, denom)
    return np.where(zero, 0.5 * np.pi, np.arccos(np.clip(cosang, -1.0, 1.0)))


def triangular_delta(r: np.ndarray, eps: float) -> np.ndarray:
    """Unit-mass triangular bump of half-width eps."""
    return np.maximum(0.0, 1.0 - np.abs(r) / eps) / eps


@dataclass(frozen=True, eq=False)
class TurningKernel:
    kind: str
    rate: Optional[RateMap] = None
    pair: Optional[PairMap] = None
    support: Optional[float] = None     # radius of V; None means the domain's
    level: Optional[int] = None         # regularization level n
    rate_constant: Optional[float] = None  # c with |lambda(s)| <= c |s| when known
    name: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise KernelError(f"unknown kernel kind {self.kind!r}; expected one of {KINDS}")
        if self.kind != "zero" and (self.rate is None or self.pair is None):
            raise KernelError(f"{self.kind} kernel needs rate and pair maps")


def zero_kernel() -> TurningKernel:
    return TurningKernel("zero", name="zero")


def angle_kernel(rate: RateMap, profile: Callable, eps: float, support: Optional[float] = None,
                 rate_constant: Optional[float] = None) -> TurningKernel:
    """lambda(S) h(theta(v, v')) delta_eps(|v| - |v'|)."""
    if eps <= 0:
        raise KernelError("nascent delta width must be positive")

    def pair(v, w):
        r = np.linalg.norm(v, axis=-1) - np.linalg.norm(w, axis=-1)
        return profile(turning_angle(v, w)) * triangular_delta(r, eps)

    return TurningKernel("angle", rate, pair, support, rate_constant=rate_constant, name="angle")


def bounded_test_kernel(kappa: float = 1.0, profile: Optional[PairMap] = None,
                        support: Optional[float] = None) -> TurningKernel:
    """S-independent kernel kappa * profile(v, v') (profile defaults to 1)."""
    if profile is None:
        profile = lambda v, w: np.ones(np.broadcast_shapes(v.shape, w.shape)[:-1])
    return TurningKernel("bounded-test", constant_rate(kappa), profile, support, name="bounded-test")


def custom_kernel(rate: RateMap, pair: PairMap, support: Optional[float] = None) -> TurningKernel:
    return TurningKernel("custom", rate, pair, support, name="custom")


# ---------------------------------------------------------------------------
# assembly on a grid


@dataclass(frozen=True, eq=False)
class AssembledKernel:
    """Kernel values on a grid: separable (rate, A) or full tensor T.

    ``A`` has shape (Nv, Nv) indexed [v, v'], ``rate`` shape x_shape;
    ``T`` has shape x_shape + (Nv, Nv).
    """

    domain: Domain
    rate: Optional[np.ndarray] = None
    A: Optional[np.ndarray] = None
    T: Optional[np.ndarray] = None

    @property
    def is_zero(self) -> bool:
        return self.T is None and (self.A is None or self.rate is None)

    def values(self) -> np.ndarray:
        """Full tensor view (x..., v, v')."""
        nv = self.domain.n_v ** self.domain.d
        if self.T is not None:
            return self.T
        if self.is_zero:
            return np.zeros(self.domain.x_shape + (nv, nv))
        return self.rate[..., None, None] * self.A

    def gain(self, f: np.ndarray) -> np.ndarray:
        """sum_{v'} K(x, v, v') f(x, v') dv."""
        dom = self.domain
        if self.is_zero:
            return np.zeros_like(f)
        F = f.reshape(dom.n_x ** dom.d, -1)
        if self.T is not None:
            T = self.T.reshape(F.shape[0], F.shape[1], F.shape[1])
            g = np.einsum("xij,xj->xi", T, F)
        else:
            g = self.rate.reshape(-1, 1) * (F @ self.A.T)
        return (g * dom.cell_v).reshape(f.shape)

    def loss_rate(self) -> np.ndarray:
        """sum_{v'} K(x, v', v) dv, shape x_shape + v_shape."""
        dom = self.domain
        if self.is_zero:
            return np.zeros(dom.shape)
        if self.T is not None:
            T = self.T.reshape(dom.n_x ** dom.d, *self.T.shape[-2:])
            lr = T.sum(axis=1)
        else:
            lr = self.rate.reshape(-1, 1) * self.A.sum(axis=0)[None, :]
        return (lr * dom.cell_v).reshape(dom.shape)


def _pair_matrix(K: TurningKernel, domain: Domain) -> np.ndarray:
    vp = domain.v_points()
    A = np.asarray(K.pair(vp[:, None, :], vp[None, :, :]), dtype=float)
    radius = domain.radius if K.support is None else K.support
    inside = np.linalg.norm(vp, axis=-1) <= radius + 1e-12
    return A * inside[:, None] * inside[None, :]


def _rate_array(K: TurningKernel, S: ChemField) -> np.ndarray:
    r = np.asarray(K.rate(S.values, S.gradient), dtype=float)
    if np.any(r < 0):
        warnings.warn("negative turning rate clipped to 0", RuntimeWarning, stacklevel=3)
        r = np.maximum(r, 0.0)
    return np.broadcast_to(r, S.values.shape)


def _mollifier_stencil(domain: Domain, n: int) -> np.ndarray:
    # lattice-normalized radial bump eta(n z), eta(z) = exp(-1/(1 - |z|^2)) for |z| < 1
    width = 1.0 / n
    m = int(math.floor(width / domain.dv))
    if m == 0:
        st = np.ones((1,) * domain.d)
        return st
    offs = np.arange(-m, m + 1) * domain.dv
    g = np.meshgrid(*([offs] * domain.d), indexing="ij")
    z2 = sum(a * a for a in g) * n * n
    st = np.where(z2 < 1.0, np.exp(-1.0 / np.maximum(1.0 - z2, 1e-300)), 0.0)
    return st / st.sum()


def _mollify_pairs(arr: np.ndarray, domain: Domain, n: int) -> np.ndarray:
    """Convolve the trailing (v, v') axes of ``arr`` with the bump in both."""
    st = _mollifier_stencil(domain, n)
    if st.size == 1:
        return arr
    lead = arr.shape[:-2]
    vv = arr.reshape(lead + domain.v_shape + domain.v_shape)
    full = np.multiply.outer(st, st).reshape((1,) * len(lead) + st.shape + st.shape)
    out = ndimage.convolve(vv, full, mode="constant", cval=0.0)
    return out.reshape(arr.shape)


def _truncate(T: np.ndarray, domain: Domain, n: int) -> np.ndarray:
    """Clamp to [0, n] and clip the support to the radius-n ball in v and v'."""
    inside = (np.linalg.norm(domain.v_points(), axis=-1) <= n).astype(float)
    return np.clip(T, 0.0, float(n)) * inside[:, None] * inside[None, :]


def assemble(K: TurningKernel, S: ChemField) -> AssembledKernel:
    """Evaluate K(S) on the grid of ``S``'s domain."""
    dom = S.domain
    if K.kind == "zero":
        return AssembledKernel(dom)
    rate = _rate_array(K, S)
    A = _pair_matrix(K, dom)
    if K.level is None:
        return AssembledKernel(dom, rate, A)
    n = K.level
    if float(rate.max(initial=0.0)) * float(A.max(initial=0.0)) <= n:
        # clamping inactive: stays separable
        inside = (np.linalg.norm(dom.v_points(), axis=-1) <= n).astype(float)
        A = _mollify_pairs(A * inside[:, None] * inside[None, :], dom, n)
        return AssembledKernel(dom, rate, A)
    size = rate.size * A.size
    if size > FULL_TENSOR_LIMIT:
        raise KernelError(f"clamped kernel tensor of {size} entries exceeds the assembly limit")
    T = _truncate(rate[..., None, None] * A, dom, n)
    return AssembledKernel(dom, T=_mollify_pairs(T, dom, n))


def regularize(K: TurningKernel, n: int) -> TurningKernel:
    """Level-n regularization: clamp to [0, n], clip support to |v|, |v'| <= n,
    then mollify in (v, v') with a bump of width 1/n."""
    if int(n) != n or n < 1:
        raise KernelError(f"regularization level must be a positive integer, got {n}")
    if K.kind == "zero":
        return K
    return replace(K, level=int(n), name=f"{K.name}^{n}")


# ---------------------------------------------------------------------------
# pointwise evaluation and collision terms


def chem_at(S: ChemField, x) -> float:
    """S at an off-grid position by periodic multilinear interpolation."""
    dom = S.domain
    coords = (np.asarray(x, dtype=float) / dom.dx).reshape(dom.d, 1)
    return float(ndimage.map_coordinates(S.values, coords, order=1, mode="grid-wrap")[0])


def eval_kernel(K: TurningKernel, S: ChemField, t: float, x, v, vp) -> float:
    """K(S)(t, x, v, v') >= 0; zero outside V x V."""
    if K.kind == "zero":
        return 0.0
    dom = S.domain
    v = np.asarray(v, dtype=float)
    vp = np.asarray(vp, dtype=float)
    radius = dom.radius if K.support is None else K.support
    if np.linalg.norm(v) > radius + 1e-12 or np.linalg.norm(vp) > radius + 1e-12:
        return 0.0
    if K.level is not None:
        raise KernelError("pointwise evaluation of a regularized kernel is grid-based; use assemble")
    coords = (np.asarray(x, dtype=float) / dom.dx).reshape(dom.d, 1)
    s = ndimage.map_coordinates(S.values, coords, order=1, mode="grid-wrap")
    g = np.stack([ndimage.map_coordinates(gi, coords, order=1, mode="grid-wrap") for gi in S.gradient])
    rate = max(0.0, float(np.asarray(K.rate(s, g)).reshape(-1)[0]))
    return rate * float(K.pair(v, vp))


@dataclass(frozen=True, eq=False)
class CollisionTerm:
    gain: np.ndarray
    loss: np.ndarray

    @property
    def net(self) -> np.ndarray:
        return self.gain - self.loss


def collision(K, S: ChemField, f: PhaseField) -> CollisionTerm:
    """Gain int K(S) f' dv' and loss f int K*(S) dv' with shared weights.

    ``K`` may be a :class:`TurningKernel` or an :class:`AssembledKernel`.
    """
    if f.domain != S.domain:
        raise FieldError("phase field and chemical field live on different domains")
    if f.distribution and np.any(f.values < 0):
        warnings.warn("collision applied to a field with negative values", RuntimeWarning, stacklevel=2)
    ak = K if isinstance(K, AssembledKernel) else assemble(K, S)
    return CollisionTerm(ak.gain(f.values), ak.loss_rate() * f.values)


# ---------------------------------------------------------------------------
# Assumption bound


@dataclass(frozen=True)
class KernelBoundReport:
    C_hat: float
    rows: tuple            # (sample, lhs, rhs, ratio)
    violated: bool
    exponents: tuple

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample", "lhs", "rhs", "ratio"])
        for row in self.rows:
            w.writerow([row[0]] + [repr(float(x)) for x in row[1:]])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())


def _kernel_norm(ak: AssembledKernel, p1: float, p2: float, p3: float) -> float:
    dom = ak.domain
    if ak.is_zero:
        return 0.0
    # inner v' norm (p3), then v (p2), then x (p1)
    T = ak.values()
    w = dom.cell_v
    inf = math.inf

    def red(a, axis, p, weight):
        if p == inf:
            return np.abs(a).max(axis=axis)
        return (np.power(np.abs(a), p).sum(axis=axis) * weight) ** (1.0 / p)

    inner = red(red(T, -1, p3, w), -1, p2, w)
    return float(red(inner.reshape(-1), 0, p1, dom.cell_x))


def chem_norm(S: ChemField, p: float) -> float:
    """||S||_{L^p} + || |grad S| ||_{L^p} on the torus."""
    dom = S.domain

    def norm(a):
        if p == math.inf:
            return float(np.abs(a).max())
        return float((np.power(np.abs(a), p).sum() * dom.cell_x) ** (1.0 / p))

    return norm(S.values) + norm(np.sqrt(np.sum(S.gradient ** 2, axis=0)))


def check_kernel_bound(K: TurningKernel, samples: Sequence[ChemField], p1: float, p2: float,
                       p3: float) -> KernelBoundReport:
    """Max over samples of ||K(S)||_{L_x^p1 L_v^p2 L_v'^p3} / (||S|| + ||grad S||)."""
    if not p1 >= max(p2, p3):
        raise KernelError("need p1 >= max(p2, p3)")
    rows = []
    violated = False
    for i, S in enumerate(samples):
        lhs = _kernel_norm(assemble(K, S), p1, p2, p3)
        rhs = chem_norm(S, p1)
        if rhs == 0:
            ratio = 0.0 if lhs == 0 else math.inf
            violated |= lhs != 0
        else:
            ratio = lhs / rhs
        rows.append((i, lhs, rhs, ratio))
    C = max((r[3] for r in rows), default=0.0)
    return KernelBoundReport(C, tuple(rows), violated, (p1, p2, p3))


def rate_homogeneity(K: TurningKernel, samples: Sequence[ChemField]) -> float:
    """max |lambda(S)| / |S| over grid points with S != 0 (0 for the zero kernel)."""
    if K.kind == "zero":
        return 0.0
    worst = 0.0
    for S in samples:
        r = np.abs(_rate_array(K, S))
        s = np.abs(S.values)
        mask = s > 0
        if np.any(r[~mask] > 0):
            return math.inf
        if mask.any():
            worst = max(worst, float((r[mask] / s[mask]).max()))
    return worst


def kernel_difference_norm(K1: TurningKernel, K2: TurningKernel, S: ChemField,
                           p1: float, p2: float, p3: float) -> float:
    """||K1(S) - K2(S)|| in L_x^p1 L_v^p2 L_v'^p3 on the grid."""
    a = assemble(K1, S).values()
    b = assemble(K2, S).values()
    return _kernel_norm(AssembledKernel(S.domain, T=a - b), p1, p2, p3)


def from_config(spec: dict) -> TurningKernel:
    """Kernel from a JSON-style mapping (kinds: zero, angle, bounded-test)."""
    kind = spec.get("kind", "zero")
    if kind == "zero":
        return zero_kernel()
    support = spec.get("support")
    if kind == "angle":
        rate_spec = spec.get("rate", {"kind": "linear", "c": 1.0})
        rk = rate_spec.get("kind", "linear")
        c = float(rate_spec.get("c", 1.0))
        if rk == "linear":
            rate = linear_rate(c)
        elif rk == "gradient":
            rate = gradient_rate(c)
        else:
            raise KernelError(f"unknown rate map {rk!r}")
        prof = spec.get("profile", {"kind": "constant", "value": 1.0})
        if prof.get("kind", "constant") == "constant":
            h = constant_profile(float(prof.get("value", 1.0)))
        elif prof["kind"] == "cosine":
            h = cosine_profile(float(prof.get("a", 1.0)), float(prof.get("b", 0.5)))
        else:
            raise KernelError(f"unknown angular profile {prof['kind']!r}")
        K = angle_kernel(rate, h, float(spec.get("eps", 0.25)), support,
                         rate_constant=c if rk == "linear" else None)
    elif kind == "bounded-test":
        K = bounded_test_kernel(float(spec.get("kappa", 1.0)), support=support)
    else:
        raise KernelError(f"unknown kernel kind {kind!r}")
    level = spec.get("regularize")
    return regularize(K, int(level)) if level else K
