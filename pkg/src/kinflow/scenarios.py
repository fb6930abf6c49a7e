"""Scenario registry used by the command line runner.

Each scenario resolves a plan from an :class:`ExperimentConfig` (filling
defaults and rejecting unknown ``params`` keys), then runs it and writes CSV
artifacts into an output directory. The returned dict becomes the
``results`` entry of ``summary.json``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Optional

import numpy as np

from . import kernel as kern
from . import noise as noi
from .analysis import (band_limited_family, counterexample_expectation, decay_experiment,
                       hoelder_exponents, hoelder_report, strichartz_horizons)
from .brownian import generate
from .config import ConfigError, ExperimentConfig
from .fields import INF, NormSpec, PhaseField, check_admissible, theorem_exponents, theorem_range
from .flow import affine_map, dispersion_certificate, has_closed_form, integrate_flow
from .io import field_slice_rows, save_field, write_csv
from .solver import SolverConfig, solve


def _params(cfg: ExperimentConfig, defaults: dict) -> dict:
    unknown = sorted(set(cfg.params) - set(defaults))
    if unknown:
        raise ConfigError(f"params: unknown keys for {cfg.scenario}: {', '.join(unknown)}")
    return {**defaults, **cfg.params}


def _exp(x) -> float:
    return INF if x == "inf" else float(x)


def _lags(p: dict, dt: float, horizon: float) -> list:
    """Geometric lags snapped to the ensemble grid, deduplicated."""
    if "lags" in p and p["lags"] is not None:
        raw = [float(x) for x in p["lags"]]
    else:
        raw = np.geomspace(float(p["lag_min"]), float(p["lag_max"]), int(p["lag_count"])).tolist()
    snapped = sorted({max(1, int(round(x / dt))) for x in raw})
    lags = [k * dt for k in snapped]
    if lags[-1] > horizon + 1e-12:
        raise ConfigError(f"lag {lags[-1]} exceeds the ensemble horizon {horizon}")
    return lags


def _ensemble(cfg: ExperimentConfig, workers, samples: Optional[int] = None):
    e = cfg.ensemble
    n = e.samples if samples is None else min(samples, e.samples)
    return generate(e.seed, e.grid, e.modes, n, workers=workers)


def _check_modes(cfg: ExperimentConfig, model) -> None:
    if model.modes > cfg.ensemble.modes:
        raise ConfigError(f"noise has {model.modes} modes but the ensemble only {cfg.ensemble.modes}")


@dataclass(frozen=True)
class Scenario:
    name: str
    description: str
    resolve: Callable[[ExperimentConfig], dict]
    run: Callable[[ExperimentConfig, dict, Path, Optional[int]], dict]


# ---------------------------------------------------------------------------
# free transport decay


def _decay_resolve(cfg):
    d = cfg.d(2)
    p = _params(cfg, {"lag_min": 0.1, "lag_max": 2.0, "lag_count": 12, "lags": None,
                      "p": "inf", "q": 1, "isometry_exponent": 2, "samples": 1})
    dom = cfg.make_domain(d, L=4.8, n_x=48, v_max=1.0, n_v=64)
    model = noi.from_config(cfg.noise or {"kind": "zero"}, d)
    _check_modes(cfg, model)
    lags = _lags(p, cfg.ensemble.dt, cfg.ensemble.t1 - cfg.ensemble.t0)
    if len(lags) < 3:
        raise ConfigError("need at least 3 distinct lags on the ensemble grid")
    return {"domain": dom, "model": model, "lags": lags, "p": _exp(p["p"]), "q": _exp(p["q"]),
            "iso": _exp(p["isometry_exponent"]), "samples": int(p["samples"])}


def _point_profile(dom):
    # a single x-node times the full velocity box
    vals = np.zeros(dom.shape)
    vals[(0,) * dom.d] = 1.0
    return PhaseField(dom, vals)


def _decay_run(cfg, plan, out, workers):
    ens = _ensemble(cfg, workers, plan["samples"])
    f = _point_profile(plan["domain"])
    lags = plan["lags"]
    rep = decay_experiment(f, plan["model"], ens, lags, plan["p"], plan["q"], workers=workers)
    iso = decay_experiment(f, plan["model"], ens, lags, plan["iso"], plan["iso"], workers=workers)
    write_csv(out / "decay.csv", ["lag", "ratio", "isometry_ratio", "eulerian_isometry_ratio"],
              zip(lags, rep.ratios, iso.ratios, iso.eulerian_ratios))
    return {"slope": rep.slope, "theory": rep.theory,
            "slope_rel_error": abs(rep.slope - rep.theory) / abs(rep.theory) if rep.theory else None,
            "fit_residual": rep.residual,
            "isometry_max_deviation": float(np.max(np.abs(iso.ratios - 1.0))),
            "samples": rep.samples}


# ---------------------------------------------------------------------------
# dispersion certificates (nilpotent, diagonal, Jordan)


def _certificate_resolve_factory(d_default, noise_default):
    def resolve(cfg):
        d = cfg.d(d_default)
        p = _params(cfg, {"lag_min": 0.05, "lag_max": 1.0, "lag_count": 8, "lags": None,
                          "floor": 0.5, "probes": 4, "compare_samples": 0, "flow_h": None})
        model = noi.from_config(cfg.noise or noise_default, d)
        _check_modes(cfg, model)
        if not has_closed_form(model):
            raise ConfigError("certificate scenarios need a closed-form affine noise model")
        horizon = cfg.ensemble.t1 - cfg.ensemble.t0
        lags = _lags(p, cfg.ensemble.dt, horizon)
        return {"d": d, "model": model, "lags": lags, "floor": float(p["floor"]),
                "probes": int(p["probes"]), "compare": int(p["compare_samples"]),
                "flow_h": None if p["flow_h"] is None else float(p["flow_h"])}
    return resolve


def _certificate_run(cfg, plan, out, workers):
    ens = _ensemble(cfg, workers)
    model, d, lags = plan["model"], plan["d"], plan["lags"]
    rng = np.random.default_rng(cfg.ensemble.seed)
    probes = rng.uniform(-1.0, 1.0, size=(plan["probes"], 2 * d))
    cert = dispersion_certificate(model, ens, probes, lags, plan["floor"], workers=workers)
    cert.write_csv(out / "certificate.csv")
    s, H = ens.grid.t0, lags[-1]
    rows = []
    closed = np.empty(ens.samples)
    det_full = np.empty(ens.samples)
    for i, n in enumerate(ens.sample_ids):
        fm = affine_map(model, ens, int(n), s, s + H)
        closed[i] = np.linalg.det(fm.A)
        det_full[i] = fm.det_full
    heun = np.full(ens.samples, math.nan)
    for i in range(min(plan["compare"], ens.samples)):
        fl = integrate_flow(model, ens, int(ens.sample_ids[i]), s, s + H, np.zeros(2 * d),
                            plan["flow_h"])
        heun[i] = fl.det_velocity()
    for i, n in enumerate(ens.sample_ids):
        rows.append((int(n), closed[i], heun[i], closed[i] / H ** d, det_full[i]))
    write_csv(out / "determinants.csv",
              ["sample", "closed_det", "heun_det", "ratio_to_lag_power", "det_full"], rows)
    cmp = ~np.isnan(heun)
    res = {"C": cert.C, "tau": cert.tau, "regime": cert.regime, "horizon": H,
           "min_det_minus_lag_power": float(closed.min() - H ** d),
           "max_rel_dev_from_lag_power": float(np.max(np.abs(closed / H ** d - 1.0))),
           "max_det_full_error": float(np.max(np.abs(det_full - 1.0))),
           "samples": int(ens.samples)}
    if cmp.any():
        res["heun_max_rel_error"] = float(np.max(np.abs(heun[cmp] / closed[cmp] - 1.0)))
    return res


# ---------------------------------------------------------------------------
# rotation counterexample


def _rotation_resolve(cfg):
    _params(cfg, {})
    e = cfg.ensemble
    if e.t0 != 0.0:
        raise ConfigError("rotation-counterexample needs t0 = 0")
    return {"t": e.t1, "paths": e.samples, "dt": e.dt, "seed": e.seed}


def _rotation_run(cfg, plan, out, workers):
    rep = counterexample_expectation(plan["t"], plan["paths"], plan["dt"], plan["seed"],
                                     workers=workers)
    write_csv(out / "counterexample.csv", ["t", "paths", "dt", "mc_mean", "std_err", "exact", "z"],
              [(rep.t, rep.paths, rep.dt, rep.mc_mean, rep.std_err, rep.exact, rep.z_score)])
    return {"t": rep.t, "paths": rep.paths, "dt": rep.dt, "mc_mean": rep.mc_mean,
            "std_err": rep.std_err, "exact": rep.exact, "z_score": rep.z_score,
            "within_3_se": abs(rep.z_score) <= 3.0}


# ---------------------------------------------------------------------------
# Strichartz


def _strichartz_resolve(cfg):
    d = cfg.d(3)
    p = _params(cfg, {"members": 50, "family_seed": 1, "horizons": [0.25, 0.5, 1.0], "tau": 0.25,
                      "step": 0.05, "transport": "spectral", "samples": 1, "scale": 3.7,
                      "fourier_modes": 2})
    dom = cfg.make_domain(d, L=2 * math.pi, n_x=8, v_max=1.0, n_v=8)
    model = noi.from_config(cfg.noise or {"kind": "zero"}, d)
    _check_modes(cfg, model)
    spec = cfg.norm_spec((18 / 11, 3.0, 18 / 7, 2.0))
    rep = check_admissible(spec, d)
    if not rep.passed:
        raise ConfigError("norms: tuple is not admissible: " + "; ".join(rep.violated))
    horizons = sorted(float(h) for h in p["horizons"])
    if horizons[-1] > cfg.ensemble.t1 - cfg.ensemble.t0 + 1e-12:
        raise ConfigError("Strichartz horizon exceeds the ensemble horizon")
    if p["transport"] not in ("spectral", "semi-lagrangian"):
        raise ConfigError("params.transport must be 'spectral' or 'semi-lagrangian'")
    return {"domain": dom, "model": model, "spec": spec, "horizons": horizons,
            "members": int(p["members"]), "family_seed": int(p["family_seed"]),
            "tau": float(p["tau"]), "step": float(p["step"]), "transport": p["transport"],
            "samples": int(p["samples"]), "scale": float(p["scale"]),
            "fourier_modes": int(p["fourier_modes"])}


def _strichartz_run(cfg, plan, out, workers):
    ens = _ensemble(cfg, workers, plan["samples"])
    fam = band_limited_family(plan["domain"], plan["members"], plan["family_seed"],
                              plan["fourier_modes"])
    kw = dict(step=plan["step"], transport=plan["transport"], tau=plan["tau"], workers=workers)
    reps = strichartz_horizons(fam, plan["model"], ens, plan["spec"], plan["horizons"], **kw)
    H = plan["horizons"]
    c0, w0 = reps[H[0]].C_hat, reps[H[0]].windows
    rows, ratio_rows = [], []
    growth_ok = True
    for h in H:
        r = reps[h]
        growth = r.C_hat / c0
        allowed = 2.0 * r.windows / w0
        growth_ok &= bool(np.isfinite(r.C_hat)) and growth <= allowed
        rows.append((h, r.windows, r.C_hat, growth, allowed))
        for m in range(r.ratios.shape[0]):
            for j in range(r.ratios.shape[1]):
                ratio_rows.append((h, m, int(ens.sample_ids[j]), float(r.ratios[m, j])))
    write_csv(out / "strichartz.csv", ["horizon", "windows", "C_hat", "growth", "allowed_growth"], rows)
    write_csv(out / "ratios.csv", ["horizon", "member", "sample", "ratio"], ratio_rows)
    # homogeneity: scaling every datum must not move the constant
    scaled = [f.with_values(plan["scale"] * f.values) for f in fam]
    a = reps[H[-1]].C_hat
    b = strichartz_horizons(scaled, plan["model"], ens, plan["spec"], [H[-1]], **kw)[H[-1]].C_hat
    return {"C_hat": {repr(h): reps[h].C_hat for h in H}, "windows": {repr(h): reps[h].windows for h in H},
            "scale_invariance_error": abs(b - a) / a, "growth_within_bound": growth_ok,
            "members": plan["members"], "label": "empirical lower bound"}


# ---------------------------------------------------------------------------
# chemotaxis


def _solver_config(cfg, defaults):
    s = {**defaults, **cfg.solver}
    return SolverConfig(T=float(s["T"]), dt=float(s["dt"]), h=float(s["h"]),
                        picard_tol=float(s.get("picard_tol", 1e-8)),
                        max_picard=int(s.get("max_picard", 10)),
                        interpolation=s.get("interpolation", "linear"),
                        norm=cfg.norm_spec((2.0, INF, 2.0, 2.0)),
                        a=_exp(cfg.norms.get("a", 2.0)),
                        flow_h=None if s.get("flow_h") is None else float(s["flow_h"]),
                        sample=int(s.get("sample", 0)),
                        transport=s.get("transport", "semi-lagrangian"),
                        mass_drift_bound=float(s.get("mass_drift_bound", 1e-3)))


def _bump_datum(dom, amp, x_width, v_width, v_cut):
    X, V = dom.x_mesh(), dom.v_mesh()
    rx = sum((X[i] - dom.L / 2) ** 2 for i in range(dom.d))
    rv = sum(V[i] ** 2 for i in range(dom.d))
    return PhaseField(dom, amp * np.exp(-rx / x_width) * np.exp(-rv / v_width) * (rv <= v_cut))


_CHEMO_KERNEL = {"kind": "angle", "rate": {"kind": "linear", "c": 50.0},
                 "profile": {"kind": "constant", "value": 1.0}, "eps": 0.25}
_CHEMO_NOISE = {"kind": "affine", "matrices": [[[0.0, 0.3], [0.0, 0.0]]]}


def _chemo_resolve(cfg):
    d = cfg.d(2)
    p = _params(cfg, {"amplitude": 0.05, "x_width": 0.5, "v_width": 0.1, "v_cut": 0.8,
                      "transport_only": False})
    dom = cfg.make_domain(d, L=4.0, n_x=32, v_max=1.0, n_v=32, support=1.0)
    model = noi.from_config(cfg.noise or (_CHEMO_NOISE if d == 2 else {"kind": "zero"}), d)
    _check_modes(cfg, model)
    K = kern.zero_kernel() if p["transport_only"] else kern.from_config(cfg.kernel or _CHEMO_KERNEL)
    scfg = _solver_config(cfg, {"T": 0.5, "dt": 0.1, "h": 0.02})
    if cfg.ensemble.t0 != 0.0 or cfg.ensemble.t1 < scfg.T - 1e-12:
        raise ConfigError("ensemble must cover [0, T]")
    return {"domain": dom, "model": model, "kernel": K, "solver": scfg,
            "datum": (float(p["amplitude"]), float(p["x_width"]), float(p["v_width"]),
                      float(p["v_cut"])), "transport_only": bool(p["transport_only"])}


def _chemo_run(cfg, plan, out, workers):
    scfg = plan["solver"]
    ens = _ensemble(cfg, workers, scfg.sample + 1)
    f0 = _bump_datum(plan["domain"], *plan["datum"])
    traj = solve(f0, plan["kernel"], plan["model"], ens, scfg)
    traj.write_csv(out / "trajectory.csv")
    rows = [(w, i + 1, dist) for w, hist in enumerate(traj.picard_history) for i, dist in enumerate(hist)]
    write_csv(out / "picard.csv", ["window", "iteration", "distance"], rows)
    write_csv(out / "final_slice.csv", ["x0", "v0", "f"], field_slice_rows(traj.final))
    save_field(traj.final, out / "final.kfpf")
    iters = [len(h) for h in traj.picard_history]
    ratios = [b / a for h in traj.picard_history for a, b in zip(h, h[1:]) if a > 0 and b > 0]
    return {"status": traj.status, "mass0": traj.mass0, "mass_drift": traj.mass_drift(),
            "min_f": traj.min_f, "max_picard_iterations": max(iters, default=0),
            "max_contraction_ratio": max(ratios, default=0.0),
            "final_distance": max((h[-1] for h in traj.picard_history if h), default=0.0),
            "windows": len(traj.picard_history), "transport_only": plan["transport_only"]}


# ---------------------------------------------------------------------------
# admissibility sweep


def _adm_resolve(cfg):
    p = _params(cfg, {"dimensions": [1, 2, 3], "random_tuples": 10000, "grid": 20})
    dims = [int(d) for d in p["dimensions"]]
    if any(d < 1 for d in dims):
        raise ConfigError("params.dimensions must be positive")
    return {"dims": dims, "tuples": int(p["random_tuples"]), "grid": int(p["grid"])}


def _inverse(x: float) -> float:
    return INF if x == 0 else 1.0 / x


def _adm_run(cfg, plan, out, workers):
    rng = np.random.default_rng(cfg.ensemble.seed)
    grid_rows, rand_rows = [], []
    all_pass = True
    for d in plan["dims"]:
        # random tuples: the scaling and harmonic relations fix p and r given (q, a)
        n_ok = 0
        for _ in range(plan["tuples"]):
            ia = rng.uniform(0.0, 1.0)
            iq = rng.uniform(ia, 1.0)
            ip = 2 * ia - iq
            ir = 0.5 * d * (iq - ip)
            if ip < 0 or ir > 1 or ia == 0:
                continue
            spec = NormSpec(_inverse(iq), _inverse(ir), _inverse(ip), _inverse(ia))
            n_ok += check_admissible(spec, d).passed
        rand_rows.append((d, plan["tuples"], n_ok))
        if d < 2:
            continue
        (r_lo, r_hi), a_lo = theorem_range(d)
        for r in np.linspace(r_lo, r_hi, plan["grid"] + 1)[1:]:
            if r < a_lo:
                continue
            for a in np.linspace(a_lo, r, plan["grid"]):
                spec = theorem_exponents(float(a), float(r), d)
                ok = check_admissible(spec, d, 1e-9).passed
                all_pass &= ok
                grid_rows.append((d, float(a), float(r), spec.q, spec.p, int(ok)))
    write_csv(out / "theorem_map.csv", ["d", "a", "r", "q", "p", "admissible"], grid_rows)
    write_csv(out / "random_tuples.csv", ["d", "tuples", "admissible"], rand_rows)
    return {"theorem_map_points": len(grid_rows), "theorem_map_all_admissible": all_pass,
            "random_admissible": {str(r[0]): r[2] for r in rand_rows}}


# ---------------------------------------------------------------------------
# Hoelder regularity in time


def _hoelder_resolve(cfg):
    d = cfg.d(2)
    p = _params(cfg, {"r": 4.0, "margin": 0.05, "refine": 2, "amplitude": 0.05,
                      "x_width": 0.5, "v_width": 0.1, "v_cut": 0.8})
    dom = cfg.make_domain(d, L=4.0, n_x=16, v_max=1.0, n_v=16, support=1.0)
    model = noi.from_config(cfg.noise or (_CHEMO_NOISE if d == 2 else {"kind": "zero"}), d)
    _check_modes(cfg, model)
    K = kern.from_config(cfg.kernel or {**_CHEMO_KERNEL, "rate": {"kind": "linear", "c": 20.0}})
    scfg = _solver_config(cfg, {"T": 0.5, "dt": 0.1, "h": 0.02})
    fine_h = scfg.h / int(p["refine"])
    k = fine_h / cfg.ensemble.dt
    if abs(k - round(k)) > 1e-9 or round(k) < 1:
        raise ConfigError("refined substep must be a multiple of the ensemble step")
    kappa, lam = hoelder_exponents(float(p["r"]), float(p["margin"]))
    return {"domain": dom, "model": model, "kernel": K, "solver": scfg, "fine_h": fine_h,
            "kappa": kappa, "lam": lam,
            "datum": (float(p["amplitude"]), float(p["x_width"]), float(p["v_width"]),
                      float(p["v_cut"]))}


def _pairing_series(f0, K, model, ens, scfg):
    dom = f0.domain
    X, V = dom.x_mesh(), dom.v_mesh()
    phi = (1.0 + np.cos(2 * np.pi * X[0] / dom.L)) * np.exp(-sum(v ** 2 for v in V))
    w = dom.cell_x * dom.cell_v
    series = []
    solve(f0, K, model, ens, scfg, keep_snapshots=False,
          observer=lambda t, a: series.append((float(t), float(np.sum(a * phi) * w))))
    return series


def _hoelder_run(cfg, plan, out, workers):
    from dataclasses import replace
    scfg = plan["solver"]
    ens = _ensemble(cfg, workers, scfg.sample + 1)
    f0 = _bump_datum(plan["domain"], *plan["datum"])
    coarse = _pairing_series(f0, plan["kernel"], plan["model"], ens, scfg)
    fine = _pairing_series(f0, plan["kernel"], plan["model"], ens, replace(scfg, h=plan["fine_h"]))
    rc = hoelder_report(coarse, plan["kappa"], plan["lam"], "(1+cos(2 pi x0/L)) exp(-|v|^2)")
    rf = hoelder_report(fine, plan["kappa"], plan["lam"], rc.test_function)
    write_csv(out / "pairing.csv", ["h", "t", "pairing"],
              [(scfg.h, t, v) for t, v in coarse] + [(plan["fine_h"], t, v) for t, v in fine])
    write_csv(out / "hoelder.csv", ["h", "points", "kappa", "lam", "seminorm", "band"],
              [(scfg.h, len(coarse), rc.kappa, rc.lam, rc.value, rc.band),
               (plan["fine_h"], len(fine), rf.kappa, rf.lam, rf.value, rf.band)])
    return {"kappa": rc.kappa, "lam": rc.lam, "seminorm_coarse": rc.value, "seminorm_fine": rf.value,
            "refinement_rel_change": abs(rf.value - rc.value) / rc.value if rc.value else 0.0,
            "test_function": rc.test_function}


# ---------------------------------------------------------------------------

_NILPOTENT = {"kind": "affine", "matrices": [[[0.0, 0.5], [0.0, 0.0]]]}
_DIAGONAL = {"kind": "affine", "matrices": [[[1.0, 0.0], [0.0, -1.0]]]}
_JORDAN = {"kind": "affine", "matrices": [[[1.0, 1.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -2.0]]],
           "similarity": [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]}

REGISTRY: Dict[str, Scenario] = {s.name: s for s in [
    Scenario("free-transport-decay", "dispersive decay slope of transported point data and the p=q isometry",
             _decay_resolve, _decay_run),
    Scenario("nilpotent-certificate", "dispersion certificate for nilpotent affine noise, closed form vs Heun",
             _certificate_resolve_factory(2, _NILPOTENT), _certificate_run),
    Scenario("diagonal-certificate", "dispersion certificate for diagonal trace-free noise",
             _certificate_resolve_factory(2, _DIAGONAL), _certificate_run),
    Scenario("jordan-certificate", "dispersion certificate for real Jordan-form noise in d=3",
             _certificate_resolve_factory(3, _JORDAN), _certificate_run),
    Scenario("rotation-counterexample", "Monte Carlo mean of C(t)^2+S(t)^2 against 4t-8+8exp(-t/2)",
             _rotation_resolve, _rotation_run),
    Scenario("strichartz-homogeneous", "empirical homogeneous Strichartz constants over a band-limited family",
             _strichartz_resolve, _strichartz_run),
    Scenario("chemotaxis-small-data", "Picard solve of the stochastic kinetic chemotaxis system",
             _chemo_resolve, _chemo_run),
    Scenario("admissibility-sweep", "admissibility of random tuples and of the theorem parameter map",
             _adm_resolve, _adm_run),
    Scenario("hoelder-regularity", "time-Hoelder seminorm of a solution pairing under substep refinement",
             _hoelder_resolve, _hoelder_run),
]}


def names() -> list:
    return list(REGISTRY)


def get(name: str) -> Scenario:
    try:
        return REGISTRY[name]
    except KeyError:
        raise ConfigError(f"unknown scenario {name!r}; known: {', '.join(REGISTRY)}") from None


def describe_plan(plan: dict) -> dict:
    """JSON-friendly view of a resolved plan."""
    out = {}
    for k, v in plan.items():
        if hasattr(v, "__dataclass_fields__") and not callable(v):
            out[k] = {f: getattr(v, f) for f in v.__dataclass_fields__
                      if isinstance(getattr(v, f), (int, float, str, type(None), tuple))}
        elif hasattr(v, "kind") and hasattr(v, "name"):
            out[k] = {"kind": v.kind, "name": v.name}
        elif isinstance(v, (int, float, str, bool, list, tuple, type(None))):
            out[k] = v
        else:
            out[k] = type(v).__name__
    return out
