import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from kinflow import brownian as B, noise as N
from kinflow.analysis import (ExperimentError, band_limited_family, counterexample_exact,
                              counterexample_expectation, decay_experiment, fit_exponent,
                              hoelder_exponents, hoelder_report, hoelder_seminorm, norm_series,
                              strichartz_experiment, strichartz_horizons)
from kinflow.fields import INF, Domain, NormSpec, PhaseField

SPEC3 = NormSpec(18 / 11, 3.0, 18 / 7, 2.0)
DOM3 = Domain(3, 2 * np.pi, 8, 1.0, 8)


def point_profile(dom):
    vals = np.zeros(dom.shape)
    vals[(0,) * dom.d] = 1.0
    return PhaseField(dom, vals)


def test_fit_exponent_exact_power():
    x = np.array([0.5, 1.0, 2.0, 4.0])
    slope, icpt, res = fit_exponent(x, 3.0 * x ** -1.5)
    assert slope == pytest.approx(-1.5, rel=1e-12)
    assert math.exp(icpt) == pytest.approx(3.0, rel=1e-12)
    assert res < 1e-12


# ---------------------------------------------------------------------------
# decay


def test_free_decay_slope_and_isometry():
    dom = Domain(2, 2.4, 24, 1.0, 32)
    ens = B.generate(5, B.TimeGrid(0.0, 1.0, 100), 1, 1)
    lags = np.linspace(0.3, 1.0, 8).round(2)
    rep = decay_experiment(point_profile(dom), N.zero(2), ens, lags, INF, 1.0)
    assert rep.theory == -2.0
    assert abs(rep.slope + 2.0) <= 0.05 * 2.0
    assert np.all(rep.ratios > 0)
    iso = decay_experiment(point_profile(dom), N.zero(2), ens, lags, 2.0, 2.0)
    assert np.abs(iso.ratios - 1.0).max() <= 1e-10


def test_nilpotent_decay_slope():
    dom = Domain(2, 2.4, 24, 1.0, 32)
    ens = B.generate(5, B.TimeGrid(0.0, 1.0, 100), 1, 20)
    lags = np.linspace(0.3, 1.0, 8).round(2)
    rep = decay_experiment(point_profile(dom), N.affine([[[0.0, 0.5], [0.0, 0.0]]]), ens, lags, INF, 1.0)
    assert rep.samples == 20
    assert abs(rep.slope + 2.0) <= 0.05 * 2.0


def test_isometry_under_general_noise():
    dom = Domain(2, 2.0, 6, 1.0, 8)
    ens = B.generate(6, B.TimeGrid(0.0, 1.0, 1000), 1, 2)
    f = band_limited_family(dom, 1, 3, v_width=0.5)[0]
    rep = decay_experiment(f, N.smooth_bounded(2, amplitude=0.3), ens, [0.2, 0.5, 1.0], 3.0, 3.0,
                           flow_h=1e-3)
    assert np.abs(rep.ratios - 1.0).max() <= 1e-3


def test_decay_errors():
    dom = Domain(1, 2.0, 8, 1.0, 8)
    ens = B.generate(1, B.TimeGrid(0.0, 1.0, 10), 1, 1)
    f = point_profile(dom)
    with pytest.raises(ExperimentError):
        decay_experiment(f, N.zero(1), ens, [0.1, 0.2], INF, 1.0)
    with pytest.raises(ExperimentError):
        decay_experiment(f, N.zero(1), ens, [0.1, 0.2, 0.3], 1.0, 2.0)


# ---------------------------------------------------------------------------
# Strichartz


def test_strichartz_excludes_zero_member():
    ens = B.generate(1, B.TimeGrid(0.0, 1.0, 20), 1, 1)
    fam = band_limited_family(DOM3, 3, 4)
    zero = PhaseField(DOM3, np.zeros(DOM3.shape))
    kw = dict(step=0.05, transport="spectral")
    with_zero = strichartz_experiment(fam + [zero], N.zero(3), ens, SPEC3, 0.5, **kw)
    without = strichartz_experiment(fam, N.zero(3), ens, SPEC3, 0.5, **kw)
    assert with_zero.C_hat == without.C_hat
    assert with_zero.ratios.shape == (3, 1)
    with pytest.raises(ExperimentError):
        strichartz_experiment([zero], N.zero(3), ens, SPEC3, 0.5, **kw)


def test_strichartz_rejects_inadmissible_spec():
    ens = B.generate(1, B.TimeGrid(0.0, 1.0, 20), 1, 1)
    with pytest.raises(ExperimentError):
        strichartz_experiment(band_limited_family(DOM3, 1, 0), N.zero(3), ens,
                              NormSpec(2.0, 3.0, 2.0, 2.0), 0.5, step=0.05, transport="spectral")


def test_strichartz_resampling_and_scale_invariance():
    ens = B.generate(1, B.TimeGrid(0.0, 1.0, 20), 1, 1)
    kw = dict(step=0.05, transport="spectral")
    a = strichartz_experiment(band_limited_family(DOM3, 50, 1), N.zero(3), ens, SPEC3, 0.5, **kw)
    b = strichartz_experiment(band_limited_family(DOM3, 50, 2), N.zero(3), ens, SPEC3, 0.5, **kw)
    assert math.isfinite(a.C_hat) and a.C_hat > 0
    assert abs(a.C_hat - b.C_hat) <= 0.1 * a.C_hat
    fam = band_limited_family(DOM3, 10, 1)
    c1 = strichartz_experiment(fam, N.zero(3), ens, SPEC3, 1.0, **kw).C_hat
    c2 = strichartz_experiment([f.with_values(2 * f.values) for f in fam], N.zero(3), ens, SPEC3,
                               1.0, **kw).C_hat
    assert abs(c2 - c1) <= 1e-12 * c1


def test_strichartz_growth_over_horizons():
    ens = B.generate(1, B.TimeGrid(0.0, 1.0, 20), 1, 1)
    reps = strichartz_horizons(band_limited_family(DOM3, 10, 1), N.zero(3), ens, SPEC3,
                               [0.25, 0.5, 1.0], step=0.05, transport="spectral", tau=0.25)
    base = reps[0.25].C_hat
    for H, rep in reps.items():
        assert rep.windows == math.ceil(H / 0.25)
        assert rep.C_hat <= 2 * rep.windows * base
        assert rep.label == "empirical lower bound"


def test_semi_lagrangian_series_matches_spectral_at_nodes():
    # with integer node shifts the two transports agree exactly
    dom = Domain(1, 2.0, 32, 1.0, 4)
    ens = B.generate(1, B.TimeGrid(0.0, 1.0, 4), 1, 1)
    f = band_limited_family(dom, 1, 5, v_width=0.9)[0]
    spec = NormSpec(2.0, 4.0, 2.0, 2.0)
    a = norm_series(f, N.zero(1), ens, 0, spec, 1.0)
    b = norm_series(f, N.zero(1), ens, 0, spec, 1.0, transport="spectral")
    assert [t for t, _ in a] == [t for t, _ in b]
    assert np.allclose([v for _, v in a], [v for _, v in b], rtol=1e-12)


# ---------------------------------------------------------------------------
# counterexample


def test_counterexample_exact_values():
    assert counterexample_exact(2.0) == pytest.approx(2.94303553, abs=5e-9)
    # closed form at t = 0.1 and its leading Taylor term t^2 - t^3/6
    assert counterexample_exact(0.1) == pytest.approx(0.0098354, abs=1e-7)
    assert counterexample_exact(0.1) == pytest.approx(0.01 - 0.001 / 6, rel=1e-3)


def test_counterexample_against_double_integral():
    # E[C^2 + S^2] = int int exp(-|s-u|/2) ds du
    t = 1.3
    val, _ = integrate.dblquad(lambda u, s: math.exp(-abs(s - u) / 2), 0, t, 0, t,
                               epsabs=1e-12, epsrel=1e-12)
    assert counterexample_exact(t) == pytest.approx(val, rel=1e-8)


def test_counterexample_small_mc():
    rep = counterexample_expectation(1.0, 4000, 1e-2, 3)
    assert abs(rep.z_score) <= 4
    assert rep.exact == counterexample_exact(1.0)


def test_counterexample_std_err_rate():
    a = counterexample_expectation(2.0, 500, 1e-2, 9)
    b = counterexample_expectation(2.0, 2000, 1e-2, 9)
    assert 0.7 * 2 <= a.std_err / b.std_err <= 1.3 * 2


def test_counterexample_errors():
    with pytest.raises(ExperimentError):
        counterexample_expectation(0.0, 1000, 1e-2, 1)
    with pytest.raises(ExperimentError):
        counterexample_expectation(1.0, 50, 1e-2, 1)
    with pytest.raises(ExperimentError):
        counterexample_expectation(1.0, 100, 0.3, 1)


# ---------------------------------------------------------------------------
# Hoelder


def test_hoelder_constant_series():
    t = np.linspace(0, 1, 50)
    assert hoelder_seminorm(list(zip(t, np.full(50, 2.5))), 0.2, 4.0) == 0.0


def test_hoelder_linear_series():
    # kappa lam + 1 = lam / 2 with lam = 4: integrand |t - s|^2 on the unit square
    t = np.linspace(0, 1, 801)
    val = hoelder_seminorm(list(zip(t, t)), 0.25, 4.0)
    assert val == pytest.approx(0.63894, abs=5e-3)


def test_hoelder_exponents_relation():
    kappa, lam = hoelder_exponents(4.0, 0.05)
    assert lam == pytest.approx(8.4)
    assert kappa * lam + 1 == pytest.approx(lam * (0.5 - 0.25))
    with pytest.raises(ExperimentError):
        hoelder_exponents(2.0)


def test_hoelder_errors():
    t = np.linspace(0, 1, 10)
    with pytest.raises(ExperimentError):
        hoelder_seminorm(list(zip(t[:2], t[:2])), 0.1, 4.0)
    with pytest.raises(ExperimentError):
        hoelder_seminorm(list(zip(t[::-1], t)), 0.1, 4.0)
    with pytest.raises(ExperimentError):
        hoelder_seminorm(list(zip(t, t)), 0.9, 4.0)
    rep = hoelder_report(list(zip(t, t)), 0.25, 4.0, "identity")
    assert rep.band == pytest.approx(1 / 9) and rep.test_function == "identity"


@settings(max_examples=40, deadline=None)
@given(c=st.floats(-10, 10), a=st.floats(0.01, 10))
def test_hoelder_affine_invariance(c, a):
    t = np.linspace(0, 1, 40)
    f = np.sin(3 * t)
    base = hoelder_seminorm(list(zip(t, f)), 0.2, 4.0)
    assert hoelder_seminorm(list(zip(t, a * f + c)), 0.2, 4.0) == pytest.approx(a * base, rel=1e-9)
