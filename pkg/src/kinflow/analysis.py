"""Experiment-level checks: dispersive decay, empirical Strichartz constants,
time-Hoelder seminorms and the rotation counterexample.

Empirical constants are maxima over finite families and samples, i.e. lower
bounds of the true suprema; reports describe what was observed only.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ._parallel import ordered_map
from .brownian import BrownianEnsemble, TimeGrid, generate
from .fields import (INF, NormSpec, PhaseField, check_admissible, flat_norm, mixed_norm,
                     time_norm, wavenumbers)
from .flow import affine_map, has_closed_form, integrate_batch
from .noise import NoiseModel
from .solver import pullback


class ExperimentError(ValueError):
    """Invalid experiment request."""


def fit_exponent(x: Sequence[float], y: Sequence[float]) -> tuple:
    """Least-squares slope and intercept of log y against log x, plus the
    RMS residual."""
    lx = np.log(np.asarray(x, dtype=float))
    ly = np.log(np.asarray(y, dtype=float))
    A = np.vstack([lx, np.ones_like(lx)]).T
    coef, *_ = np.linalg.lstsq(A, ly, rcond=None)
    resid = ly - A @ coef
    return float(coef[0]), float(coef[1]), float(np.sqrt(np.mean(resid ** 2)))


# ---------------------------------------------------------------------------
# dispersive decay


@dataclass(frozen=True)
class DecayReport:
    lags: np.ndarray
    ratios: np.ndarray            # mean over samples
    slope: float
    theory: float                 # -d (1/q - 1/p)
    residual: float
    p: float
    q: float
    samples: int
    eulerian_ratios: Optional[np.ndarray] = None   # grid-interpolated values when p == q


def _lagrangian_norm(f: PhaseField, model, ens, sample, s, t, a, flow_h) -> float:
    # ||f o Phi^{-1}||_{L^a} = (int |f|^a |det D Phi| dz)^{1/a}
    w = f.domain.cell_x * f.domain.cell_v
    vals = np.abs(f.values.reshape(-1))
    if model.is_trivial or has_closed_form(model):
        det = 1.0 if model.is_trivial else affine_map(model, ens, sample, s, t).det_full
        dets = np.full(vals.shape, det)
    else:
        dom = f.domain
        nz = np.flatnonzero(vals)
        xp, vp = dom.x_points(), dom.v_points()
        ix, iv = np.unravel_index(nz, (xp.shape[0], vp.shape[0]))
        b = integrate_batch(model, ens, sample, s, t, xp[ix], vp[iv], flow_h)
        dets = np.zeros(vals.shape)
        dets[nz] = np.abs(np.linalg.det(b.jacobian[0]))
    if a == INF:
        return float(vals[dets > 0].max(initial=0.0))
    return float((np.sum(vals ** a * dets) * w) ** (1.0 / a))


def decay_experiment(f: PhaseField, model: NoiseModel, ens: BrownianEnsemble, lags: Sequence[float],
                     p: float, q: float, *, samples: Optional[Sequence[int]] = None,
                     s: Optional[float] = None, flow_h: Optional[float] = None,
                     workers: Optional[int] = None) -> DecayReport:
    """Ratios ||f o Phi_{s,s+lag}^{-1}||_{L_x^p L_v^q} / ||f||_{L_x^q L_v^p} and their
    log-log slope.

    The pushed field is evaluated by semi-Lagrangian pull-back on the grid.
    For p = q = a the ratio is computed in Lagrangian coordinates, where the
    change of variables carries the flow determinant; the grid-interpolated
    ratio is kept in ``eulerian_ratios``.
    """
    if not (1 <= q <= p):
        raise ExperimentError("need 1 <= q <= p <= inf")
    lags = np.asarray(lags, dtype=float)
    if lags.size < 3:
        raise ExperimentError("at least 3 lags are needed for a slope fit")
    if np.any(lags <= 0):
        raise ExperimentError("lags must be positive")
    s = ens.grid.t0 if s is None else s
    ids = list(ens.sample_ids) if samples is None else list(samples)
    base = mixed_norm(f, q, p)
    if base == 0:
        raise ExperimentError("field has zero norm")

    def one(n):
        eul = np.empty(lags.size)
        lag_r = np.empty(lags.size)
        for i, lag in enumerate(lags):
            pb = pullback(f.domain, model, ens, n, s, s + lag, flow_h)
            g = pb.apply(f.values)
            eul[i] = mixed_norm(f.with_values(g), p, q) / base
            if p == q:
                lag_r[i] = _lagrangian_norm(f, model, ens, n, s, s + lag, p, flow_h) / base
        return eul, lag_r

    res = ordered_map(one, ids, workers)
    eul = np.mean([r[0] for r in res], axis=0)
    ratios = np.mean([r[1] for r in res], axis=0) if p == q else eul
    d = f.domain.d
    theory = -d * (1.0 / q - (0.0 if p == INF else 1.0 / p))
    slope, _, resid = fit_exponent(lags, ratios)
    return DecayReport(lags, ratios, slope, theory, resid, p, q, len(ids),
                       eul if p == q else None)


# ---------------------------------------------------------------------------
# Strichartz


@dataclass(frozen=True)
class StrichartzReport:
    C_hat: float
    ratios: np.ndarray            # (members, samples)
    horizon: float
    spec: NormSpec
    windows: Optional[int] = None
    tau: Optional[float] = None
    label: str = "empirical lower bound"


def _spectral_series(f0: PhaseField, times: np.ndarray, p: float, q: float) -> list:
    # free transport f0(x - t v, v) by Fourier shift, one forward transform
    dom = f0.domain
    d = dom.d
    axes = tuple(range(d))
    hat = np.fft.fftn(f0.values, axes=axes)
    phase = np.zeros(dom.shape)
    for k, vm in zip(wavenumbers(dom), dom.v_mesh()):
        phase = phase + k.reshape(k.shape + (1,) * d) * vm
    out = []
    for t in times:
        vals = np.fft.ifftn(hat * np.exp(-1j * t * phase), axes=axes).real
        out.append(mixed_norm(f0.with_values(vals), p, q))
    return out


def norm_series(f0: PhaseField, model: NoiseModel, ens: BrownianEnsemble, sample: int,
                spec: NormSpec, horizon: float, *, step: Optional[float] = None,
                transport: str = "semi-lagrangian", flow_h: Optional[float] = None) -> list:
    """(t, ||f0 o Psi_{t0,t}||_{L_x^p L_v^q}) on a uniform grid of [t0, t0 + horizon]."""
    t0 = f0.t
    step = ens.grid.dt if step is None else step
    n = int(round(horizon / step))
    if n < 1 or abs(n * step - horizon) > 1e-9 * horizon:
        raise ExperimentError("horizon must be a positive multiple of the time step")
    times = t0 + step * np.arange(n + 1)
    if transport == "spectral":
        if not model.is_trivial:
            raise ExperimentError("spectral transport needs the zero noise model")
        return list(zip(times, _spectral_series(f0, times - t0, spec.p, spec.q)))
    series = [(t0, mixed_norm(f0, spec.p, spec.q))]
    if model.is_trivial or has_closed_form(model):
        # one pull-back from t0 per node avoids compounding interpolation error
        for t in times[1:]:
            pb = pullback(f0.domain, model, ens, sample, t0, t, flow_h)
            series.append((t, mixed_norm(f0.with_values(pb.apply(f0.values)), spec.p, spec.q)))
    else:
        vals = f0.values
        for a, b in zip(times[:-1], times[1:]):
            vals = pullback(f0.domain, model, ens, sample, a, b, flow_h).apply(vals)
            series.append((b, mixed_norm(f0.with_values(vals), spec.p, spec.q)))
    return series


def strichartz_ratio(f0: PhaseField, model: NoiseModel, ens: BrownianEnsemble, sample: int,
                     spec: NormSpec, horizon: float, **kw) -> float:
    """||f0 o Psi_{0,.}||_{L_t^r([0,H]) L_x^p L_v^q} / ||f0||_{L^a} for one path."""
    base = flat_norm(f0, spec.a)
    if base == 0:
        raise ExperimentError("zero datum")
    return time_norm(norm_series(f0, model, ens, sample, spec, horizon, **kw), spec.r) / base


def strichartz_horizons(family: Sequence[PhaseField], model: NoiseModel, ens: BrownianEnsemble,
                        spec: NormSpec, horizons: Sequence[float], *,
                        samples: Optional[Sequence[int]] = None, step: Optional[float] = None,
                        transport: str = "semi-lagrangian", tau: Optional[float] = None,
                        flow_h: Optional[float] = None, workers: Optional[int] = None) -> dict:
    """Strichartz reports for several horizons from one norm series per
    (member, sample); each horizon must be a multiple of the time step."""
    if not family:
        raise ExperimentError("empty family")
    d = family[0].domain.d
    rep = check_admissible(spec, d)
    if not rep.passed:
        raise ExperimentError(f"norm spec not admissible: {'; '.join(rep.violated)}")
    members = [f for f in family if np.any(f.values != 0)]
    if not members:
        raise ExperimentError("family must contain a nonzero element")
    horizons = sorted(float(h) for h in horizons)
    step = ens.grid.dt if step is None else step
    ids = list(ens.sample_ids) if samples is None else list(samples)
    jobs = [(i, n) for i in range(len(members)) for n in ids]

    def one(job):
        f0 = members[job[0]]
        ser = norm_series(f0, model, ens, job[1], spec, horizons[-1], step=step,
                          transport=transport, flow_h=flow_h)
        base = flat_norm(f0, spec.a)
        out = []
        for H in horizons:
            n = int(round(H / step))
            out.append(time_norm(ser[:n + 1], spec.r) / base)
        return out

    vals = np.array(ordered_map(one, jobs, workers)).reshape(len(members), len(ids), len(horizons))
    reports = {}
    for j, H in enumerate(horizons):
        windows = None if tau is None else int(math.ceil(H / tau - 1e-12))
        reports[H] = StrichartzReport(float(vals[..., j].max()), vals[..., j], H, spec, windows, tau)
    return reports


def strichartz_experiment(family: Sequence[PhaseField], model: NoiseModel, ens: BrownianEnsemble,
                          spec: NormSpec, horizon: float, **kw) -> StrichartzReport:
    """Max over nonzero family members and samples of the Strichartz ratio."""
    return strichartz_horizons(family, model, ens, spec, [horizon], **kw)[float(horizon)]


def band_limited_family(domain, members: int, seed: int, modes: int = 2,
                        v_width: float = 0.35) -> list:
    """Random nonnegative data with x-Fourier modes |k| <= ``modes`` and a
    compactly supported smooth velocity profile with random centre."""
    rng = np.random.default_rng(seed)
    d = domain.d
    X, V = domain.x_mesh(), domain.v_mesh()
    out = []
    ks = [k for k in np.ndindex(*(2 * modes + 1,) * d)]
    for _ in range(members):
        gx = np.ones(domain.x_shape + (1,) * d)
        acc = 0.0
        for k in ks:
            kv = np.array(k) - modes
            if not np.any(kv):
                continue
            phase = sum(2 * np.pi * kv[i] * X[i] / domain.L for i in range(d))
            amp = rng.normal() / (1.0 + float(kv @ kv))
            acc = acc + amp * np.cos(phase + rng.uniform(0, 2 * np.pi))
        acc = np.asarray(acc)
        gx = 1.0 + 0.9 * acc / max(np.abs(acc).max(), 1e-300)
        c = rng.uniform(-0.3, 0.3, size=d) * domain.v_max
        r2 = sum((V[i] - c[i]) ** 2 for i in range(d)) / (v_width * domain.v_max) ** 2
        hv = np.where(r2 < 1, np.exp(-1.0 / np.maximum(1.0 - r2, 1e-300)), 0.0)
        out.append(PhaseField(domain, gx * hv))
    return out


# ---------------------------------------------------------------------------
# counterexample


@dataclass(frozen=True)
class CounterexampleReport:
    t: float
    paths: int
    dt: float
    mc_mean: float
    std_err: float
    exact: float
    seed: int

    @property
    def z_score(self) -> float:
        return (self.mc_mean - self.exact) / self.std_err if self.std_err > 0 else math.inf


def counterexample_exact(t: float) -> float:
    """E[(int_0^t cos beta)^2 + (int_0^t sin beta)^2] = 4t - 8 + 8 exp(-t/2)."""
    return 4.0 * t - 8.0 + 8.0 * math.exp(-0.5 * t)


def counterexample_samples(t: float, paths: int, dt: float, seed: int, *, chunk: int = 2000,
                           workers: Optional[int] = None) -> np.ndarray:
    """C(t)^2 + S(t)^2 per path, trapezoid rule on each Brownian path."""
    steps = int(round(t / dt))
    if steps < 1 or abs(steps * dt - t) > 1e-9 * t:
        raise ExperimentError("dt must divide t")
    grid = TimeGrid(0.0, t, steps)
    w = np.full(steps + 1, dt)
    w[0] = w[-1] = 0.5 * dt
    out = np.empty(paths)
    for start in range(0, paths, chunk):
        n = min(chunk, paths - start)
        ens = generate(seed, grid, 1, n, first_sample=start, workers=workers)
        b = ens.values[:, 0, :]
        C = np.cos(b) @ w
        S = np.sin(b) @ w
        out[start:start + n] = C * C + S * S
    return out


def counterexample_expectation(t: float, paths: int, dt: float, seed: int, *,
                               workers: Optional[int] = None) -> CounterexampleReport:
    if t <= 0:
        raise ExperimentError("t must be positive")
    if paths < 100:
        raise ExperimentError("need at least 100 paths")
    y = counterexample_samples(t, paths, dt, seed, workers=workers)
    return CounterexampleReport(t, paths, dt, float(y.mean()), float(y.std(ddof=1) / math.sqrt(paths)),
                                counterexample_exact(t), seed)


# ---------------------------------------------------------------------------
# Hoelder seminorm


@dataclass(frozen=True)
class HoelderReport:
    kappa: float
    lam: float
    value: float
    band: float
    test_function: str = ""


def hoelder_seminorm(series: Sequence, kappa: float, lam: float) -> float:
    """(sum_{|t-s| >= band} |f(t)-f(s)|^lam / |t-s|^{kappa lam + 1} w_t w_s)^{1/lam}.

    Trapezoid weights in both variables; the diagonal band is one (minimal)
    grid spacing wide.
    """
    if lam < 1:
        raise ExperimentError("need lam >= 1")
    if not kappa * lam + 1 < lam:
        raise ExperimentError("need kappa*lam + 1 < lam")
    ts = np.array([float(t) for t, _ in series])
    fs = np.array([float(v) for _, v in series])
    if ts.size < 3:
        raise ExperimentError("need at least 3 time points")
    dts = np.diff(ts)
    if np.any(dts <= 0):
        raise ExperimentError("times must be strictly increasing")
    w = np.zeros_like(ts)
    w[:-1] += 0.5 * dts
    w[1:] += 0.5 * dts
    band = float(dts.min())
    gap = np.abs(ts[:, None] - ts[None, :])
    keep = gap >= band * (1 - 1e-9)
    num = np.abs(fs[:, None] - fs[None, :]) ** lam
    integrand = np.where(keep, num / np.where(keep, gap, 1.0) ** (kappa * lam + 1), 0.0)
    return float(np.sum(integrand * w[:, None] * w[None, :]) ** (1.0 / lam))


def hoelder_report(series: Sequence, kappa: float, lam: float, test_function: str = "") -> HoelderReport:
    ts = np.array([float(t) for t, _ in series])
    return HoelderReport(kappa, lam, hoelder_seminorm(series, kappa, lam),
                         float(np.diff(ts).min()), test_function)


def hoelder_exponents(r: float, margin: float = 0.05) -> tuple:
    """(kappa, lam) with lam slightly above 4r/(r-2) and kappa lam + 1 = lam (1/2 - 1/r)."""
    if r <= 2:
        raise ExperimentError("need r > 2")
    lam = 4.0 * r / (r - 2.0) * (1.0 + margin)
    kappa = (lam * (0.5 - 1.0 / r) - 1.0) / lam
    return kappa, lam
