"""Stochastic characteristic flows of dX = V dt, dV = sum_k sigma^k(X, V) o dbeta^k.

Numerical flows use the stochastic Heun (Stratonovich predictor-corrector)
scheme. The Jacobian is advanced with the exact derivative of the discrete
Heun map, driven by the same Brownian increments, so forward, backward and
variational integrations see one consistent path.

Affine-linear noise with zero, nilpotent, diagonal, Jordan (single mode) or
2x2 rotation matrices has closed-form flows built from
E(u) = exp(sum_k (beta^k_u - beta^k_s) S^k).
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .brownian import BrownianEnsemble, DomainError
from .noise import NoiseModel, sigma_all, sigma_jacobian


class FlowError(ValueError):
    """Invalid integration request (grid alignment, interval, catalog)."""


class CatalogError(FlowError):
    """Affine noise outside the closed-form catalog."""


@dataclass(frozen=True)
class FlowSample:
    s: float
    t: float
    origin: np.ndarray
    endpoint: np.ndarray
    jacobian: np.ndarray
    sample: int
    det_full: Optional[float] = None   # analytic det when known (closed forms)
    method: str = "heun"

    @property
    def dim(self) -> int:
        return self.origin.shape[-1] // 2

    @property
    def velocity_block(self) -> np.ndarray:
        """D_v X_t, the position response to the initial velocity."""
        d = self.dim
        return self.jacobian[:d, d:]

    def det(self) -> float:
        return float(self.det_full) if self.det_full is not None else float(np.linalg.det(self.jacobian))

    def det_velocity(self) -> float:
        return float(np.linalg.det(self.velocity_block))


# ---------------------------------------------------------------------------
# quadrature and grid alignment


def simpson_weights(n: int, h: float) -> np.ndarray:
    """Composite quadrature weights on ``n`` uniform intervals, all positive.

    Simpson for even ``n``; Simpson plus a closing 3/8 rule for odd ``n >= 3``;
    trapezoid for ``n = 1``.
    """
    if n < 1:
        raise ValueError("need at least one interval")
    w = np.zeros(n + 1)
    if n == 1:
        w[:] = 0.5 * h
        return w
    m = n if n % 2 == 0 else n - 3
    if m > 0:
        w[0:m + 1:2] += 2.0 * h / 3.0
        w[1:m:2] += 4.0 * h / 3.0
        w[0] -= h / 3.0
        w[m] -= h / 3.0
    if n % 2:
        w[m:m + 4] += 3.0 * h / 8.0 * np.array([1.0, 3.0, 3.0, 1.0])
    return w


def node_span(ens: BrownianEnsemble, s: float, t: float, h: Optional[float] = None):
    """Brownian node indices of ``s`` and ``t`` and the node stride of step ``h``."""
    g = ens.grid
    lo, hi = min(s, t), max(s, t)
    eps = 1e-9 * (g.t1 - g.t0)
    if lo < g.t0 - eps or hi > g.t1 + eps:
        raise FlowError(f"interval [{lo}, {hi}] outside ensemble grid [{g.t0}, {g.t1}]")
    try:
        i_s, i_t = g.index_of(s), g.index_of(t)
    except DomainError as exc:
        raise FlowError(str(exc)) from None
    if h is None:
        return i_s, i_t, 1
    ratio = h / g.dt
    stride = int(round(ratio))
    if stride < 1 or abs(ratio - stride) > 1e-8 * max(1.0, ratio):
        raise FlowError(f"step h={h} is not a positive multiple of the Brownian step {g.dt}; "
                        "refine the ensemble first")
    if abs(i_t - i_s) % stride:
        raise FlowError(f"step h={h} does not divide |t-s|={abs(t - s)}")
    return i_s, i_t, stride


def _path(ens: BrownianEnsemble, sample):
    """Path values for an int sample (K, n) or an array of samples (M, K, n)."""
    if np.ndim(sample) == 0:
        return ens.values[ens.row(int(sample))]
    rows = np.asarray(sample) - ens.first_sample
    if rows.min() < 0 or rows.max() >= ens.samples:
        raise IndexError("sample index outside ensemble")
    return ens.values[rows]


# ---------------------------------------------------------------------------
# Heun integration


@dataclass
class BatchFlow:
    """Endpoints and Jacobians for a batch of origins, optionally recorded at
    several times (leading axis ``len(times)``)."""

    times: np.ndarray
    x: np.ndarray
    v: np.ndarray
    jacobian: Optional[np.ndarray]


def _noise(model, x, v, dW):
    s = sigma_all(model, x, v)  # (..., K, d)
    return np.einsum("...kd,...k->...d", s, dW)


def _dnoise(model, x, v, dW):
    j = sigma_jacobian(model, x, v)  # (..., K, d, 2d)
    return np.einsum("...kde,...k->...de", j, dW)


def heun_step(model: NoiseModel, x, v, dt, dW, J=None):
    """One stochastic Heun step; returns ``(x, v, J)``.

    ``dW`` has shape ``(K,)`` or ``(M, K)``. When ``J`` is given it is
    multiplied by the exact derivative of the step map.
    """
    d = model.dim
    n0 = _noise(model, x, v, dW)
    xp = x + v * dt
    vp = v + n0
    n1 = _noise(model, xp, vp, dW)
    xn = x + 0.5 * (v + vp) * dt
    vn = v + 0.5 * (n0 + n1)
    if J is None:
        return xn, vn, None
    P0 = _dnoise(model, x, v, dW)      # (..., d, 2d)
    P1 = _dnoise(model, xp, vp, dW)
    lead = P0.shape[:-2]
    eye = np.eye(d)
    # derivative of the predictor
    Dp = np.zeros(lead + (2 * d, 2 * d))
    Dp[..., :d, :d] = eye
    Dp[..., :d, d:] = dt * eye
    Dp[..., d:, :] = P0
    Dp[..., d:, d:] += eye
    M = np.zeros(lead + (2 * d, 2 * d))
    M[..., :d, :d] = eye
    M[..., :d, d:] = dt * eye
    M[..., :d, :] += 0.5 * dt * P0
    M[..., d:, d:] = eye
    M[..., d:, :] += 0.5 * (P0 + P1 @ Dp)
    return xn, vn, M @ J


def integrate_batch(model: NoiseModel, ens: BrownianEnsemble, sample, s: float, t: float,
                    x, v, h: Optional[float] = None, *, jacobian: bool = True,
                    record: Optional[Sequence[float]] = None) -> BatchFlow:
    """Heun-integrate the flow from ``s`` to ``t`` for a batch of origins.

    ``sample`` is a global sample index or an array of one index per origin.
    ``t < s`` integrates the backward flow along the same path. ``record``
    lists intermediate times (node-aligned, between ``s`` and ``t``) at which
    the state is stored; by default only ``t`` is stored.
    """
    if model.dim != np.shape(x)[-1]:
        raise FlowError("origin dimension does not match the noise model")
    if model.modes > ens.modes:
        raise FlowError(f"model needs {model.modes} Brownian modes, ensemble has {ens.modes}")
    h = ens.grid.dt if h is None else h
    i_s, i_t, stride = node_span(ens, s, t, h)
    direction = 1 if i_t >= i_s else -1
    path = _path(ens, sample)[..., :model.modes, :]
    x = np.array(x, dtype=float)
    v = np.array(v, dtype=float)
    d = model.dim
    lead = np.broadcast_shapes(x.shape[:-1], v.shape[:-1], path.shape[:-2])
    x = np.broadcast_to(x, lead + (d,)).copy()
    v = np.broadcast_to(v, lead + (d,)).copy()
    J = np.broadcast_to(np.eye(2 * d), lead + (2 * d, 2 * d)).copy() if jacobian else None
    times = [t] if record is None else list(record)
    rec_idx = {}
    for r, tr in enumerate(times):
        k = ens.grid.index_of(tr)
        if (k - i_s) * direction < 0 or (i_t - k) * direction < 0 or (k - i_s) % stride:
            raise FlowError(f"record time {tr} not on the integration path")
        rec_idx.setdefault(k, []).append(r)
    xs = np.empty((len(times),) + x.shape)
    vs = np.empty_like(xs)
    js = np.empty((len(times),) + J.shape) if jacobian else None

    def store(k):
        for r in rec_idx.get(k, ()):
            xs[r], vs[r] = x, v
            if jacobian:
                js[r] = J

    dt = direction * (ens.grid.t1 - ens.grid.t0) * stride / ens.grid.steps
    store(i_s)
    if model.is_trivial:
        # free transport is exact; evaluate it directly at each recorded node
        for k, rs in rec_idx.items():
            for r in rs:
                tau = times[r] - s
                xs[r] = x + tau * v
                vs[r] = v
                if jacobian:
                    js[r] = J
                    js[r][..., :d, d:] = tau * np.eye(d)
        return BatchFlow(np.asarray(times, dtype=float), xs, vs, js)
    k = i_s
    while k != i_t:
        kn = k + direction * stride
        dW = path[..., kn] - path[..., k]
        x, v, J = heun_step(model, x, v, dt, dW, J)
        k = kn
        store(k)
    return BatchFlow(np.asarray(times, dtype=float), xs, vs, js)


def integrate_flow(model: NoiseModel, ens: BrownianEnsemble, sample: int, s: float, t: float,
                   origin, h: Optional[float] = None) -> FlowSample:
    """Endpoint and Jacobian of Phi_{s,t}(origin) by the Heun scheme."""
    origin = np.asarray(origin, dtype=float)
    d = model.dim
    if origin.shape != (2 * d,):
        raise FlowError(f"origin must have shape ({2 * d},)")
    b = integrate_batch(model, ens, sample, s, t, origin[:d], origin[d:], h)
    end = np.concatenate([b.x[0], b.v[0]])
    return FlowSample(s, t, origin, end, b.jacobian[0], int(sample),
                      1.0 if model.is_trivial else None, "exact" if model.is_trivial else "heun")


# ---------------------------------------------------------------------------
# closed-form affine flows


def _is_diag(m, tol):
    return np.all(np.abs(m - np.diag(np.diag(m))) <= tol)


def classify_affine(model: NoiseModel) -> str:
    """Closed-form class of an affine model.

    One of ``zero``, ``diagonal``, ``nilpotent``, ``rotation``, ``jordan``;
    raises :class:`CatalogError` otherwise.
    """
    if model.kind == "zero":
        return "zero"
    if model.kind == "additive":
        return "zero"
    if model.kind != "affine":
        raise CatalogError(f"closed-form flows need affine noise, got {model.kind!r}")
    S = model.matrices
    scale = max(1.0, float(np.abs(S).max()))
    tol = 1e-13 * scale
    if np.all(np.abs(S) <= tol):
        return "zero"
    if all(_is_diag(m, tol) for m in S):
        return "diagonal"
    d = model.dim
    nil = [np.all(np.abs(np.linalg.matrix_power(m, d)) <= 1e-12 * scale ** d) for m in S]
    if all(nil):
        for a in S:
            for b in S:
                if np.abs(a @ b - b @ a).max() > 1e-12 * scale ** 2:
                    raise CatalogError("nilpotent modes must commute for a closed-form flow")
        return "nilpotent"
    if model.modes != 1:
        raise CatalogError("several non-nilpotent, non-diagonal modes have no closed form")
    m = S[0]
    if d == 2 and np.linalg.det(m) > tol:
        return "rotation"
    _jordan_parts(model)  # raises when unsupported
    return "jordan"


def _jordan_parts(model: NoiseModel):
    """Similarity P, eigenvalue diagonal and nilpotent part of P^{-1} S P."""
    m = model.matrices[0]
    d = model.dim
    if model.similarity is not None:
        P = model.similarity
    elif np.all(np.abs(np.tril(m, -1)) == 0) and np.all(np.abs(np.triu(m, 2)) == 0):
        P = np.eye(d)
    else:
        w, vecs = np.linalg.eig(m)
        if np.abs(w.imag).max() > 1e-12 or np.linalg.cond(vecs) > 1e8:
            raise CatalogError("matrix is not real-diagonalizable; supply a Jordan similarity")
        P = vecs.real
    Pinv = np.linalg.inv(P)
    J = Pinv @ m @ P
    scale = max(1.0, float(np.abs(J).max()))
    off = J - np.diag(np.diag(J)) - np.diag(np.diag(J, 1), 1)
    sup = np.diag(J, 1)
    lam = np.diag(J).copy()
    ok = np.abs(off).max() <= 1e-9 * scale
    ok &= bool(np.all((np.abs(sup) <= 1e-9) | (np.abs(sup - 1.0) <= 1e-9)))
    blocks_ok = all(abs(lam[i] - lam[i + 1]) <= 1e-9 * scale for i in range(d - 1) if abs(sup[i] - 1) <= 1e-9)
    if not (ok and blocks_ok):
        raise CatalogError("similarity does not bring the matrix to real Jordan form")
    N = np.diag(np.where(np.abs(sup - 1.0) <= 1e-9, 1.0, 0.0), 1)
    return P, Pinv, lam, N


def _expm_path(model: NoiseModel, kind: str, b: np.ndarray) -> np.ndarray:
    """exp(sum_k b_k S^k) for each row of ``b`` (shape (n, K)); returns (n, d, d)."""
    d = model.dim
    n = b.shape[0]
    S = model.matrices if model.kind == "affine" else np.zeros((model.modes, d, d))
    if kind == "zero":
        return np.broadcast_to(np.eye(d), (n, d, d)).copy()
    if kind == "diagonal":
        diag = np.einsum("nk,ki->ni", b, np.diagonal(S, axis1=1, axis2=2))
        out = np.zeros((n, d, d))
        out[:, np.arange(d), np.arange(d)] = np.exp(diag)
        return out
    if kind == "nilpotent":
        A = np.einsum("nk,kij->nij", b, S)
        out = np.broadcast_to(np.eye(d), (n, d, d)).copy()
        term = out.copy()
        for m in range(1, d):
            term = term @ A / m
            out += term
        return out
    if kind == "rotation":
        m = S[0]
        w = math.sqrt(np.linalg.det(m))
        bb = b[:, 0, None, None]
        return np.cos(w * bb) * np.eye(d) + np.sin(w * bb) / w * m
    if kind == "jordan":
        P, Pinv, lam, N = _jordan_parts(model)
        bb = b[:, 0]
        unip = np.broadcast_to(np.eye(d), (n, d, d)).copy()
        term = unip.copy()
        for m in range(1, d):
            term = term @ (bb[:, None, None] * N) / m
            unip += term
        core = np.exp(bb[:, None] * lam)[:, :, None] * unip
        return P @ core @ Pinv
    raise CatalogError(kind)


@dataclass(frozen=True)
class AffineFlowMap:
    """Phi_{s,t}(x, v) = (x + A v + a, E v + e) for one path and one (s, t)."""

    s: float
    t: float
    A: np.ndarray
    E: np.ndarray
    a: np.ndarray
    e: np.ndarray
    det_full: float
    kind: str

    def apply(self, x, v):
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        return x + v @ self.A.T + self.a, v @ self.E.T + self.e

    def jacobian(self) -> np.ndarray:
        d = self.A.shape[0]
        J = np.zeros((2 * d, 2 * d))
        J[:d, :d] = np.eye(d)
        J[:d, d:] = self.A
        J[d:, d:] = self.E
        return J


def affine_map(model: NoiseModel, ens: BrownianEnsemble, sample: int, s: float, t: float,
               kind: Optional[str] = None) -> AffineFlowMap:
    """Closed-form flow map of an affine (or zero / additive) model."""
    kind = classify_affine(model) if kind is None else kind
    if model.modes > ens.modes:
        raise FlowError(f"model needs {model.modes} Brownian modes, ensemble has {ens.modes}")
    i_s, i_t, _ = node_span(ens, s, t)
    d = model.dim
    n = abs(i_t - i_s)
    path = ens.values[ens.row(sample), :model.modes]
    if i_t >= i_s:
        seg = path[:, i_s:i_t + 1]
    else:
        seg = path[:, i_t:i_s + 1][:, ::-1]
    b = (seg - seg[:, :1]).T                           # (n+1, K)
    sign = 1.0 if i_t >= i_s else -1.0
    if n == 0:
        eye = np.eye(d)
        return AffineFlowMap(s, t, np.zeros((d, d)), eye, np.zeros(d), np.zeros(d), 1.0, kind)
    w = sign * simpson_weights(n, ens.grid.dt)
    E = _expm_path(model, kind, b)
    A = np.einsum("n,nij->ij", w, E)
    c = model.constants if model.constants is not None else np.zeros((model.modes, d))
    if np.any(c):
        Einv = _expm_path(model, kind, -b)
        # Stratonovich integral of E^{-1} c o dbeta by trapezoid
        db = np.diff(b, axis=0)                        # (n, K)
        cdb = db @ c                                   # (n, d)
        mid = 0.5 * (Einv[:-1] + Einv[1:])
        G = np.zeros((n + 1, d))
        G[1:] = np.cumsum(np.einsum("nij,nj->ni", mid, cdb), axis=0)
        EG = np.einsum("nij,nj->ni", E, G)
        a = np.einsum("n,ni->i", w, EG)
        e = EG[-1]
    else:
        a = np.zeros(d)
        e = np.zeros(d)
    tr = np.trace(model.matrices, axis1=1, axis2=2) if model.kind == "affine" else np.zeros(model.modes)
    det_full = float(np.exp(np.dot(b[-1], tr)))
    return AffineFlowMap(s, t, A, E[-1], a, e, det_full, kind)


def closed_form_flow(model: NoiseModel, ens: BrownianEnsemble, sample: int, s: float, t: float,
                     origin) -> FlowSample:
    """Exact flow of an affine catalog model with Simpson time quadrature."""
    origin = np.asarray(origin, dtype=float)
    d = model.dim
    if model.kind not in ("zero", "additive", "affine"):
        raise CatalogError(f"closed-form flows need affine noise, got {model.kind!r}")
    fm = affine_map(model, ens, sample, s, t)
    x, v = fm.apply(origin[:d], origin[d:])
    return FlowSample(s, t, origin, np.concatenate([x, v]), fm.jacobian(), int(sample),
                      fm.det_full, "closed-form:" + fm.kind)


def has_closed_form(model: NoiseModel) -> bool:
    if model.kind not in ("zero", "additive", "affine"):
        return False
    try:
        classify_affine(model)
    except CatalogError:
        return False
    return True


# ---------------------------------------------------------------------------
# checks and certificates


@dataclass(frozen=True)
class VolumeReport:
    passed: bool
    det: float
    error: float
    tol: float


def volume_check(flow: FlowSample, tol: float = 1e-3) -> VolumeReport:
    """Compare det DPhi_{s,t} against 1."""
    det = flow.det()
    err = abs(det - 1.0)
    return VolumeReport(err <= tol, det, err, tol)


@dataclass(frozen=True)
class DispersionCertificate:
    lags: np.ndarray
    min_ratio: np.ndarray
    mean_ratio: np.ndarray
    samples: int
    probes: int
    C: float
    tau: float
    regime: str               # "deterministic" or "stopping-time"
    sample_tau: np.ndarray
    floor: float
    horizon: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["lag", "min_ratio", "mean_ratio", "samples", "probes"])
        for lag, mn, me in zip(self.lags, self.min_ratio, self.mean_ratio):
            w.writerow([repr(float(lag)), repr(float(mn)), repr(float(me)), self.samples, self.probes])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())


def velocity_determinants(model: NoiseModel, ens: BrownianEnsemble, sample: int, probes,
                          lags: Sequence[float], s: Optional[float] = None,
                          h: Optional[float] = None) -> np.ndarray:
    """|det D_v X_{s, s+lag}| for each lag and probe: shape (len(lags), P)."""
    probes = np.atleast_2d(np.asarray(probes, dtype=float))
    d = model.dim
    s = ens.grid.t0 if s is None else s
    times = [s + lag for lag in lags]
    if has_closed_form(model):
        out = np.empty((len(lags), probes.shape[0]))
        for i, t in enumerate(times):
            fm = affine_map(model, ens, sample, s, t)
            out[i] = abs(np.linalg.det(fm.A))   # x-independent: same for every probe
        return out
    b = integrate_batch(model, ens, sample, s, times[-1], probes[:, :d], probes[:, d:], h,
                        record=times)
    return np.abs(np.linalg.det(b.jacobian[..., :d, d:]))


def dispersion_certificate(model: NoiseModel, ens: BrownianEnsemble, probes, lags: Sequence[float],
                           floor: float = 0.5, *, s: Optional[float] = None,
                           h: Optional[float] = None, samples: Optional[Sequence[int]] = None,
                           workers: Optional[int] = None) -> DispersionCertificate:
    """Empirical lower bound |det D_v X_{s,t}| >= C |t-s|^d over lags.

    For each lag, ``min_ratio`` is the minimum over probes and samples of
    |det D_v X| / lag^d. ``tau`` is the largest lag of the prefix on which
    ``min_ratio >= floor`` (0 if the first lag already fails) and ``C`` the
    minimum ratio over that prefix. The regime is "deterministic" when every
    sample reaches the same prefix and "stopping-time" otherwise.
    """
    from ._parallel import ordered_map

    probes = np.atleast_2d(np.asarray(probes, dtype=float))
    if probes.size == 0:
        raise FlowError("empty probe set")
    lags = np.asarray(sorted(float(l) for l in lags))
    if lags.size == 0 or lags[0] <= 0:
        raise FlowError("lags must be positive")
    s = ens.grid.t0 if s is None else s
    if s + lags[-1] > ens.grid.t1 + 1e-12:
        raise FlowError("lags exceed the ensemble horizon")
    ids = list(ens.sample_ids) if samples is None else list(samples)
    d = model.dim
    per = ordered_map(lambda n: velocity_determinants(model, ens, n, probes, lags, s, h),
                      ids, workers)
    ratios = np.stack(per) / lags[None, :, None] ** d      # (N, L, P)
    per_sample = ratios.min(axis=2)                        # (N, L)
    min_ratio = per_sample.min(axis=0)
    mean_ratio = ratios.mean(axis=(0, 2))

    def prefix(curve):
        ok = curve >= floor
        return int(np.argmin(ok)) if not ok.all() else len(curve)

    n_ok = prefix(min_ratio)
    tau = float(lags[n_ok - 1]) if n_ok else 0.0
    C = float(min_ratio[:n_ok].min()) if n_ok else 0.0
    st = np.array([float(lags[k - 1]) if k else 0.0 for k in map(prefix, per_sample)])
    regime = "deterministic" if np.all(st == st[0]) else "stopping-time"
    return DispersionCertificate(lags, min_ratio, mean_ratio, len(ids), probes.shape[0], C, tau,
                                 regime, st, floor, float(lags[-1]))


@dataclass(frozen=True)
class RemainderReport:
    delta_v: np.ndarray       # D_v V - I
    delta_x: np.ndarray       # D_v X / (t-s) - I
    norm: float               # Frobenius norm of delta_v
    lag: float


def jacobian_remainder(model: NoiseModel, ens: BrownianEnsemble, sample: int, s: float, t: float,
                       origin, h: Optional[float] = None) -> RemainderReport:
    """Remainders of the velocity Jacobian around the free-transport values."""
    h = ens.grid.dt if h is None else h
    lag = t - s
    if abs(lag) < 4 * h * (1 - 1e-12):
        raise FlowError(f"|t-s|={abs(lag)} below 4h={4 * h}; normalization ill-conditioned")
    fl = integrate_flow(model, ens, sample, s, t, origin, h)
    d = model.dim
    J = fl.jacobian
    dv = J[d:, d:] - np.eye(d)
    dx = J[:d, d:] / lag - np.eye(d)
    return RemainderReport(dv, dx, float(np.linalg.norm(dv)), float(abs(lag)))
