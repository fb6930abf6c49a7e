"""Pathwise semi-Lagrangian Picard solver for the stochastic kinetic
chemotaxis system

    df + v . grad_x f dt + sum_k sigma^k . grad_v f o dbeta^k
        = (int K(S) f' - K*(S) f dv') dt,        S - Laplace S = int f dv.

Time is split into windows of length ``dt``; each window is divided into
``dt / h`` substeps. Inside a window the solution is the fixed point of

    f_{i+1} = E_{i+1} T_i[E_i f_i + phi_i G_i] + phi_{i+1} G_{i+1},
    E = exp(-h l/2),  phi = (1 - E) / l,

where T_i pulls back along the backward flow over substep i, and the gain
G_i and loss rate l_i are built from the previous Picard iterate. Each
half step solves df/dt = G - l f exactly for frozen G and l, so a local
equilibrium G = l f is kept exactly. Every factor is nonnegative, so
nonnegative data stay nonnegative exactly.
"""
from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np
from scipy import ndimage

from .brownian import BrownianEnsemble
from .fields import (INF, ChemField, Domain, NormSpec, PhaseField, bessel_solve, density,
                     flat_norm, mixed_norm, time_norm, wavenumbers)
from .flow import affine_map, has_closed_form, integrate_batch
from .kernel import TurningKernel, assemble
from .noise import NoiseModel


class SolverError(ValueError):
    """Invalid solver configuration."""


class NumericalAbort(RuntimeError):
    """Non-finite values encountered; ``dump`` carries the diagnostic state."""

    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump or {}


@dataclass(frozen=True)
class SolverConfig:
    T: float
    dt: float
    h: float
    picard_tol: float = 1e-8
    max_picard: int = 10
    interpolation: str = "linear"
    a: float = 2.0
    norm: NormSpec = NormSpec(2.0, INF, 2.0, 2.0)
    flow_h: Optional[float] = None
    sample: int = 0
    transport: str = "semi-lagrangian"
    mass_drift_bound: float = 1e-3
    stop_time: Optional[float] = None
    fail_after: int = 3

    def __post_init__(self):
        if not (self.T > 0 and self.dt > 0 and self.h > 0):
            raise SolverError("T, dt and h must be positive")
        if self.picard_tol <= 0:
            raise SolverError("picard tolerance must be positive")
        if self.max_picard < 1:
            raise SolverError("max_picard must be >= 1")
        if abs(self.dt / self.h - round(self.dt / self.h)) > 1e-9 * self.dt / self.h:
            raise SolverError(f"window dt={self.dt} is not a multiple of the substep h={self.h}")
        if abs(self.T / self.dt - round(self.T / self.dt)) > 1e-9 * self.T / self.dt:
            raise SolverError(f"horizon T={self.T} is not a multiple of the window dt={self.dt}")
        if self.interpolation not in ("linear", "cubic"):
            raise SolverError("interpolation must be 'linear' or 'cubic'")
        if self.transport not in ("semi-lagrangian", "spectral"):
            raise SolverError("transport must be 'semi-lagrangian' or 'spectral'")

    @property
    def substeps(self) -> int:
        return int(round(self.dt / self.h))

    @property
    def windows(self) -> int:
        return int(round(self.T / self.dt))


# ---------------------------------------------------------------------------
# transport


@dataclass(frozen=True, eq=False)
class PullBack:
    """Backward characteristic map from time ``t`` to ``s`` on the grid.

    x-independent flows store, per velocity node, the foot velocity and the
    x displacement; general flows store the foot of every grid node.
    """

    domain: Domain
    s: float
    t: float
    v_feet: Optional[np.ndarray] = None     # (Nv, d)
    x_shift: Optional[np.ndarray] = None    # (Nv, d)
    x_feet: Optional[np.ndarray] = None     # (N, d) for general flows
    v_feet_full: Optional[np.ndarray] = None
    spectral: bool = False

    def apply(self, values: np.ndarray, interpolation: str = "linear") -> np.ndarray:
        if self.spectral:
            return _spectral_shift(values, self.domain, self.t - self.s)
        if interpolation == "linear" and self.v_feet is not None:
            plan = self.__dict__.get("_plan")
            if plan is None:
                plan = _linear_plan(self.domain, self.x_shift, self.v_feet)
                object.__setattr__(self, "_plan", plan)
            return _interp_x_independent(values, self.domain, plan)
        return _interp_general(values, self.domain, self._feet(), 3 if interpolation == "cubic" else 1)

    def _feet(self):
        dom = self.domain
        if self.x_feet is not None:
            return self.x_feet, self.v_feet_full
        xp = dom.x_points()
        nx, nv = xp.shape[0], self.v_feet.shape[0]
        xf = (xp[:, None, :] + self.x_shift[None, :, :]).reshape(nx * nv, dom.d)
        vf = np.broadcast_to(self.v_feet[None], (nx, nv, dom.d)).reshape(nx * nv, dom.d)
        return xf, vf

    def max_foot_speed(self) -> float:
        vf = self.v_feet if self.v_feet is not None else self.v_feet_full
        return float(np.abs(vf).max())


def _spectral_shift(values, dom: Domain, tau: float) -> np.ndarray:
    # f(x - tau v, v) through an exact Fourier shift in x
    d = dom.d
    axes = tuple(range(d))
    hat = np.fft.fftn(values, axes=axes)
    phase = np.zeros(dom.shape)
    for k, vm in zip(wavenumbers(dom), dom.v_mesh()):
        kk = k.reshape(k.shape + (1,) * d)
        phase = phase + kk * vm
    return np.fft.ifftn(hat * np.exp(-1j * tau * phase), axes=axes).real


def _linear_plan(dom: Domain, x_shift, v_feet):
    """Gather indices and weights for the x-independent multilinear pull-back."""
    d = dom.d
    u = (v_feet - dom.v_nodes[0]) / dom.dv
    lo = np.floor(u).astype(np.int64)
    beta = u - lo
    v_corners = []
    for corner in np.ndindex(*(2,) * d):
        c = np.array(corner)
        idx = lo + c
        w = np.prod(np.where(c == 1, beta, 1.0 - beta), axis=1)
        ok = np.all((idx >= 0) & (idx < dom.n_v), axis=1) & (w != 0)
        if ok.any():
            flat = np.ravel_multi_index(tuple(np.clip(idx, 0, dom.n_v - 1).T), dom.v_shape)
            v_corners.append((np.flatnonzero(ok), flat[ok], w[ok]))
    s = x_shift / dom.dx
    slo = np.floor(s).astype(np.int64)
    alpha = s - slo
    base = np.arange(dom.n_x)[:, None]
    x_axes = []
    for i in range(d):
        i0 = (base + slo[None, :, i]) % dom.n_x          # (n_x, Nv)
        x_axes.append((i0, (i0 + 1) % dom.n_x, alpha[:, i]))
    return v_corners, x_axes


def _interp_x_independent(values, dom: Domain, plan) -> np.ndarray:
    """Multilinear pull-back f(x + D(v), V(v)); periodic in x, zero outside the v-box."""
    d = dom.d
    v_corners, x_axes = plan
    nx_tot, nv_tot = dom.n_x ** d, dom.n_v ** d
    F = values.reshape(nx_tot, nv_tot)
    g = np.zeros((nx_tot, nv_tot))
    for cols, src, w in v_corners:
        g[:, cols] += F[:, src] * w
    g = g.reshape(dom.x_shape + (nv_tot,))
    # linear interpolation along each periodic x axis, one shift per velocity column
    for i, (i0, i1, a) in enumerate(x_axes):
        shape = [1] * (d + 1)
        shape[i] = dom.n_x
        shape[-1] = nv_tot
        g = ((1.0 - a) * np.take_along_axis(g, i0.reshape(shape), axis=i)
             + a * np.take_along_axis(g, i1.reshape(shape), axis=i))
    return g.reshape(values.shape)


def _interp_general(values, dom: Domain, feet, order: int) -> np.ndarray:
    d = dom.d
    xf, vf = feet
    pad = [(0, 1)] * d + [(1, 1)] * d
    padded = np.pad(values, pad, mode="wrap")
    # zero the velocity pads (wrap padding is only wanted in x)
    for i in range(d):
        sl = [slice(None)] * (2 * d)
        sl[d + i] = [0, dom.n_v + 1]
        padded[tuple(sl)] = 0.0
    cx = np.mod(xf / dom.dx, dom.n_x)
    cv = (vf - dom.v_nodes[0]) / dom.dv + 1.0
    coords = np.concatenate([cx, cv], axis=1).T
    out = ndimage.map_coordinates(padded, coords, order=order, mode="constant", cval=0.0,
                                  prefilter=order > 1)
    return out.reshape(values.shape)


def pullback(domain: Domain, model: NoiseModel, ens: BrownianEnsemble, sample: int, s: float,
             t: float, flow_h: Optional[float] = None, mode: str = "semi-lagrangian") -> PullBack:
    """Backward map Psi_{s,t}: grid nodes at time t to their feet at time s."""
    d = domain.d
    if model.dim != d:
        raise SolverError("noise model dimension does not match the domain")
    if mode == "spectral":
        if not model.is_trivial:
            raise SolverError("spectral transport is only available without noise")
        return PullBack(domain, s, t, spectral=True)
    vp = domain.v_points()
    if model.is_trivial:
        return PullBack(domain, s, t, v_feet=vp.copy(), x_shift=-(t - s) * vp)
    if has_closed_form(model):
        fm = affine_map(model, ens, sample, t, s)
        xf, vf = fm.apply(np.zeros_like(vp), vp)
        return PullBack(domain, s, t, v_feet=vf, x_shift=xf)
    if model.x_independent:
        b = integrate_batch(model, ens, sample, t, s, np.zeros_like(vp), vp, flow_h, jacobian=False)
        return PullBack(domain, s, t, v_feet=b.v[0], x_shift=b.x[0])
    xp = domain.x_points()
    X = np.repeat(xp, vp.shape[0], axis=0)
    V = np.tile(vp, (xp.shape[0], 1))
    b = integrate_batch(model, ens, sample, t, s, X, V, flow_h, jacobian=False)
    return PullBack(domain, s, t, x_feet=b.x[0], v_feet_full=b.v[0])


def transport_apply(f: PhaseField, model: NoiseModel, ens: BrownianEnsemble, sample: int,
                    s: float, t: float, *, flow_h: Optional[float] = None,
                    interpolation: str = "linear", mode: str = "semi-lagrangian") -> PhaseField:
    """f(Psi_{s,t}(x, v)) on the grid: data at time s carried to time t."""
    if t == s:
        return f.with_values(f.values.copy(), t)
    pb = pullback(f.domain, model, ens, sample, s, t, flow_h, mode)
    _support_warning(pb)
    return f.with_values(pb.apply(f.values, interpolation), t)


def _support_warning(pb: PullBack):
    dom = pb.domain
    if not pb.spectral and pb.max_foot_speed() > dom.v_max + 2 * dom.dv:
        warnings.warn("backtracked velocities leave the velocity box; support inflation "
                      "exceeds the grid", RuntimeWarning, stacklevel=3)


# ---------------------------------------------------------------------------
# Picard iteration


@dataclass
class WindowResult:
    values: List[np.ndarray]
    distances: List[float]
    ratios: List[float]
    converged: bool
    failed: bool


@dataclass
class Trajectory:
    domain: Domain
    times: List[float] = field(default_factory=list)
    snapshots: List[PhaseField] = field(default_factory=list)
    chem: List[ChemField] = field(default_factory=list)
    diagnostics: List[dict] = field(default_factory=list)
    picard_history: List[List[float]] = field(default_factory=list)
    status: str = "ok"
    min_f: float = math.inf
    mass0: float = 0.0
    regime: str = "global"

    @property
    def final(self) -> PhaseField:
        return self.snapshots[-1]

    def mass_drift(self) -> float:
        if self.mass0 == 0:
            return max(abs(r["mass"]) for r in self.diagnostics) if self.diagnostics else 0.0
        return max(abs(r["mass"] - self.mass0) for r in self.diagnostics) / abs(self.mass0)

    def norm_series(self) -> list:
        return [(r["t"], r["mixed_norm"]) for r in self.diagnostics]

    def strichartz_norm(self, r: float) -> float:
        return time_norm(self.norm_series(), r)

    CSV_COLUMNS = ("t", "mass", "min_f", "mixed_norm", "picard_iters", "contraction_ratio")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_COLUMNS)
        for row in self.diagnostics:
            w.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in self.CSV_COLUMNS])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())


class WindowScheme:
    """Pull-backs and collision data for one window; reused across Picard iterates."""

    def __init__(self, domain, K, model, ens, sample, t_a, cfg: SolverConfig):
        self.domain = domain
        self.K = K
        self.cfg = cfg
        m = cfg.substeps
        self.h = cfg.h
        self.times = [t_a + i * cfg.h for i in range(m + 1)]
        self.maps = [pullback(domain, model, ens, sample, self.times[i], self.times[i + 1],
                              cfg.flow_h, cfg.transport) for i in range(m)]
        for pb in self.maps:
            _support_warning(pb)

    def transport_only(self, f0: np.ndarray) -> List[np.ndarray]:
        out = [f0]
        for pb in self.maps:
            out.append(pb.apply(out[-1], self.cfg.interpolation))
        return out

    def collision_data(self, iterate: Sequence[np.ndarray]):
        gains, losses, chems = [], [], []
        for t, vals in zip(self.times, iterate):
            S = bessel_solve(density(PhaseField(self.domain, vals, t)), self.domain)
            ak = assemble(self.K, S)
            gains.append(ak.gain(vals))
            losses.append(ak.loss_rate())
            chems.append(S)
        return gains, losses, chems

    def sweep(self, f0: np.ndarray, iterate: Sequence[np.ndarray]) -> List[np.ndarray]:
        gains, losses, _ = self.collision_data(iterate)
        hh = 0.5 * self.h
        E = [np.exp(-hh * l) for l in losses]
        phi = [hh * _phi1(hh * l) for l in losses]
        out = [f0]
        for i, pb in enumerate(self.maps):
            pre = E[i] * out[-1] + phi[i] * gains[i]
            moved = pb.apply(pre, self.cfg.interpolation)
            out.append(E[i + 1] * moved + phi[i + 1] * gains[i + 1])
        return out


def _phi1(z: np.ndarray) -> np.ndarray:
    # (1 - exp(-z)) / z with the removable singularity at 0
    z = np.asarray(z, dtype=float)
    safe = np.where(z == 0, 1.0, z)
    return np.where(z == 0, 1.0, -np.expm1(-safe) / safe)


def _l1(domain: Domain, a: np.ndarray) -> float:
    return float(np.abs(a).sum() * domain.cell_x * domain.cell_v)


def picard_step(prev: Sequence[np.ndarray], f0: np.ndarray, scheme: WindowScheme) -> List[np.ndarray]:
    """One Picard sweep over a window from the previous iterate ``prev``."""
    return scheme.sweep(f0, prev)


def iterate_window(f0: np.ndarray, scheme: WindowScheme, cfg: SolverConfig) -> WindowResult:
    dom = scheme.domain
    current = scheme.transport_only(f0)
    if scheme.K.kind == "zero":
        return WindowResult(current, [0.0], [], True, False)
    distances, ratios = [], []
    bad_run = 0
    for _ in range(cfg.max_picard):
        nxt = picard_step(current, f0, scheme)
        for i, arr in enumerate(nxt):
            if not np.all(np.isfinite(arr)):
                raise NumericalAbort("non-finite values in Picard iterate",
                                     {"t": scheme.times[i], "iteration": len(distances) + 1})
        dist = max(_l1(dom, a - b) for a, b in zip(nxt, current))
        if distances:
            ratio = dist / distances[-1] if distances[-1] > 0 else 0.0
            ratios.append(ratio)
            bad_run = bad_run + 1 if ratio > 1 else 0
        distances.append(dist)
        current = nxt
        if dist <= cfg.picard_tol:
            return WindowResult(current, distances, ratios, True, False)
        if bad_run >= cfg.fail_after:
            return WindowResult(current, distances, ratios, False, True)
    return WindowResult(current, distances, ratios, False, False)


def solve(f0: PhaseField, K: TurningKernel, model: NoiseModel, ens: BrownianEnsemble,
          cfg: SolverConfig, *, sample: Optional[int] = None, keep_snapshots: bool = True,
          observer: Optional[Callable[[float, np.ndarray], None]] = None) -> Trajectory:
    """March windows of length ``cfg.dt`` to ``cfg.T`` (or ``cfg.stop_time``).

    ``observer(t, values)`` is called at the initial time and at every
    substep node of every converged window.
    """
    dom = f0.domain
    if np.any(f0.values < 0):
        raise SolverError("initial datum must be nonnegative")
    sample = cfg.sample if sample is None else sample
    n_windows = cfg.windows
    traj = Trajectory(dom)
    if cfg.stop_time is not None and cfg.stop_time < cfg.T:
        n_windows = int(math.floor(cfg.stop_time / cfg.dt + 1e-9))
        traj.regime = "local-in-time"
    t0 = f0.t
    traj.mass0 = f0.mass()
    vals = f0.values.astype(float, copy=True)
    p, q = cfg.norm.p, cfg.norm.q

    def record(t, arr, iters, ratio):
        pf = PhaseField(dom, arr, t)
        mn = float(arr.min())
        traj.min_f = min(traj.min_f, mn)
        traj.times.append(t)
        if keep_snapshots:
            traj.snapshots.append(pf)
            traj.chem.append(bessel_solve(density(pf), dom))
        traj.diagnostics.append({"t": float(t), "mass": pf.mass(), "min_f": mn,
                                 "mixed_norm": mixed_norm(pf, p, q), "picard_iters": int(iters),
                                 "contraction_ratio": float(ratio)})

    record(t0, vals, 0, 0.0)
    if observer is not None:
        observer(t0, vals)
    for w in range(n_windows):
        t_a = t0 + w * cfg.dt
        scheme = WindowScheme(dom, K, model, ens, sample, t_a, cfg)
        res = iterate_window(vals, scheme, cfg)
        traj.picard_history.append(res.distances)
        traj.min_f = min(traj.min_f, min(float(a.min()) for a in res.values))
        if observer is not None:
            for t, arr in zip(scheme.times[1:], res.values[1:]):
                observer(t, arr)
        vals = res.values[-1]
        ratio = max(res.ratios) if res.ratios else 0.0
        record(t_a + cfg.dt, vals, len(res.distances) if K.kind != "zero" else 0, ratio)
        if res.failed:
            traj.status = "window-contraction-failed"
            break
        if not res.converged:
            traj.status = "picard-max-iterations"
    if not keep_snapshots:
        pf = PhaseField(dom, vals, traj.times[-1])
        traj.snapshots.append(pf)
    if traj.status == "ok" and traj.regime == "local-in-time":
        traj.status = "local-in-time"
    drift = traj.mass_drift()
    if drift > cfg.mass_drift_bound:
        warnings.warn(f"relative mass drift {drift:.3e} exceeds {cfg.mass_drift_bound:.1e}",
                      RuntimeWarning, stacklevel=2)
    return traj


# ---------------------------------------------------------------------------
# smallness


@dataclass(frozen=True)
class SmallnessReport:
    norm: float
    thresholds: tuple        # C(m)^{-2} / 8 for m = 1..M
    m: int
    tau_star: float
    advisory: str
    label: str = "empirical constants"


def smallness_check(f0: PhaseField, cfg: SolverConfig, constants: Sequence[float],
                    tau: float) -> SmallnessReport:
    """Largest m with ||f0||_{L^a} < C(m)^{-2}/8 and the implied horizon min(m tau, T).

    ``constants[m-1]`` is the empirical Strichartz constant for m windows of
    length ``tau``; only the first ceil(T / tau) entries are used.
    """
    if tau <= 0:
        raise SolverError("tau must be positive")
    M = int(math.ceil(cfg.T / tau - 1e-12))
    C = list(constants)[:M]
    if len(C) < M:
        raise SolverError(f"need {M} constants for T/tau windows, got {len(C)}")
    nrm = flat_norm(f0, cfg.a)
    thr = tuple(1.0 / (8.0 * c * c) if c > 0 else math.inf for c in C)
    admitted = [m for m in range(1, M + 1) if nrm < thr[m - 1]]
    m = max(admitted, default=0)
    tau_star = min(m * tau, cfg.T)
    advisory = "no guarantee" if m == 0 else ("global on [0, T]" if tau_star >= cfg.T else "local")
    return SmallnessReport(nrm, thr, m, tau_star, advisory)
