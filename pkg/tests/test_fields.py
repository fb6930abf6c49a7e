import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import erf

from kinflow import fields as Fd
from kinflow.fields import INF, Domain, NormSpec, PhaseField

from oracles import admissible_oracle, random_inverse_tuples


def inv(x):
    return INF if x == 0 else 1.0 / float(x)


# ---------------------------------------------------------------------------
# grid and norms


def test_nodes_and_cells():
    dom = Domain(2, 4.0, 8, 1.0, 10)
    assert np.allclose(dom.x_nodes, np.arange(8) * 0.5)
    assert np.allclose(dom.v_nodes, -1.0 + 0.1 + 0.2 * np.arange(10))
    assert dom.shape == (8, 8, 10, 10)
    assert dom.cell_x == 0.25 and dom.cell_v == pytest.approx(0.04)


def test_bad_domain():
    with pytest.raises(Fd.FieldError):
        Domain(0, 1.0, 8, 1.0, 8)
    with pytest.raises(Fd.FieldError):
        Domain(1, 1.0, 2, 1.0, 8)
    with pytest.raises(Fd.FieldError):
        Domain(1, 1.0, 8, 1.0, 8, support=2.0)


def test_separable_norm_factorizes():
    dom = Domain(1, 3.0, 16, 1.5, 24)
    X, V = dom.x_mesh(), dom.v_mesh()
    g = 2.0 + np.cos(2 * np.pi * X[0] / dom.L)
    h = 1.0 + np.cos(np.pi * V[0] / dom.v_max)
    f = PhaseField(dom, g * h)
    # exact integrals of the two trigonometric factors
    g2 = math.sqrt(dom.L * 4.5)
    h2 = math.sqrt(2 * dom.v_max * 1.5)
    assert Fd.mixed_norm(f, 2, 2) == pytest.approx(g2 * h2, rel=1e-10)
    assert Fd.mixed_norm(f, INF, 1) == pytest.approx(3.0 * 2 * dom.v_max, rel=1e-10)


@pytest.mark.parametrize("d", [1, 2])
@pytest.mark.parametrize("p", [1.0, 2.0, 3.5, INF])
def test_unit_box_indicator(d, p):
    dom = Domain(d, 2.0, 8, 1.0, 8)
    X, V = dom.x_mesh(), dom.v_mesh()
    box = np.ones(dom.shape, dtype=bool)
    for i in range(d):
        box &= (X[i] < 1.0) & (np.abs(V[i]) < 0.5)
    assert Fd.mixed_norm(PhaseField(dom, box.astype(float)), p, p) == pytest.approx(1.0, rel=1e-14)


def test_equal_exponents_give_flat_norm():
    rng = np.random.default_rng(3)
    dom = Domain(2, 1.0, 6, 1.0, 6)
    f = PhaseField(dom, rng.random(dom.shape))
    for a in (1.0, 1.7, 2.0, 4.0, INF):
        w = dom.cell_x * dom.cell_v
        ref = f.values.max() if a == INF else (np.sum(f.values ** a) * w) ** (1 / a)
        assert Fd.mixed_norm(f, a, a) == pytest.approx(ref, rel=1e-12)
        assert Fd.flat_norm(f, a) == pytest.approx(ref, rel=1e-12)


def test_hoelder_consistency_random_fields():
    rng = np.random.default_rng(4)
    dom = Domain(2, 2.0, 6, 1.0, 6)
    vol = (2 * dom.v_max) ** dom.d
    for _ in range(50):
        f = PhaseField(dom, rng.random(dom.shape) ** 3)
        for p, q in [(2.0, 1.0), (INF, 2.0), (3.0, 1.5)]:
            assert Fd.mixed_norm(f, p, q) <= Fd.mixed_norm(f, p, INF) * vol ** (1 / q) * (1 + 1e-12)


def test_time_norm_examples():
    ts = np.linspace(0.0, 2.0, 11)
    assert Fd.time_norm([(t, 3.0) for t in ts], 4.0) == pytest.approx(3.0 * 2.0 ** 0.25)
    assert Fd.time_norm([(0.0, 1.0), (0.5, -5.0), (1.0, 2.0)], INF) == 5.0
    t = np.linspace(0.0, 1.0, 1000)
    assert abs(Fd.time_norm(list(zip(t, t)), 2.0) - 1 / math.sqrt(3)) <= 1e-3
    with pytest.raises(Fd.FieldError):
        Fd.time_norm([(1.0, 0.0), (0.0, 1.0)], 2.0)


def test_density_examples():
    dom = Domain(2, 1.0, 4, 1.0, 16, support=0.8)
    assert np.array_equal(Fd.density(PhaseField(dom, np.zeros(dom.shape))), np.zeros(dom.x_shape))
    X = dom.x_mesh()
    g = 1.0 + np.sin(2 * np.pi * X[0])
    f = PhaseField(dom, g * dom.v_indicator()[None, None] * np.ones(dom.shape))
    assert np.allclose(Fd.density(f), g[:, :, 0, 0] * dom.v_volume(), rtol=1e-14)


def test_gaussian_marginal():
    s = 0.15
    dom = Domain(1, 1.0, 4, 1.0, 128)
    V = dom.v_mesh()[0]
    f = PhaseField(dom, np.exp(-V ** 2 / (2 * s * s)) * np.ones((4, 1)))
    exact = s * math.sqrt(2 * math.pi) * erf(dom.v_max / (s * math.sqrt(2)))
    assert np.allclose(Fd.density(f), exact, rtol=1e-8)


# ---------------------------------------------------------------------------
# Bessel solve


def test_bessel_zero():
    dom = Domain(2, 3.0, 8, 1.0, 4)
    S = Fd.bessel_solve(np.zeros(dom.x_shape), dom)
    assert np.array_equal(S.values, np.zeros(dom.x_shape))


@pytest.mark.parametrize("d,k", [(1, (3,)), (2, (1, 2)), (3, (1, 0, 2))])
def test_bessel_manufactured_mode(d, k):
    dom = Domain(d, 5.0, 16, 1.0, 4)
    X = [x[(Ellipsis,) + (0,) * d] for x in dom.x_mesh()]
    phase = sum(2 * np.pi * k[i] * X[i] / dom.L for i in range(d))
    k2 = sum((2 * np.pi * k[i] / dom.L) ** 2 for i in range(d))
    S = Fd.bessel_solve((1 + k2) * np.cos(phase), dom)
    err = np.sqrt(np.sum((S.values - np.cos(phase)) ** 2) * dom.cell_x)
    assert err <= 1e-10


def test_bessel_linear_and_residual():
    rng = np.random.default_rng(5)
    dom = Domain(2, 4.0, 16, 1.0, 4)
    r1, r2 = rng.random(dom.x_shape), rng.random(dom.x_shape)
    a, b = 2.5, -0.7
    lhs = Fd.bessel_solve(a * r1 + b * r2, dom).values
    rhs = a * Fd.bessel_solve(r1, dom).values + b * Fd.bessel_solve(r2, dom).values
    assert np.abs(lhs - rhs).max() <= 1e-12
    S = Fd.bessel_solve(r1, dom).values
    assert np.abs(S - Fd.spectral_laplacian(S, dom) - r1).max() <= 1e-8


def test_bessel_positivity_against_dense_inverse():
    dom = Domain(1, 2 * np.pi, 12, 1.0, 4)
    n = dom.n_x
    # dense (I - Laplace_h) from the spectral Laplacian applied to unit vectors
    lap = np.column_stack([Fd.spectral_laplacian(np.eye(n)[j], dom) for j in range(n)])
    G = np.linalg.inv(np.eye(n) - lap)
    assert G.min() > 0
    rng = np.random.default_rng(6)
    for _ in range(100):
        rho = rng.random(n) * (rng.random(n) < 0.5)
        S = Fd.bessel_solve(rho, dom).values
        assert np.allclose(S, G @ rho, atol=1e-12)
        assert S.min() >= 0


def test_spectral_gradient_of_mode():
    dom = Domain(2, 2 * np.pi, 16, 1.0, 4)
    X = [x[..., 0, 0] for x in dom.x_mesh()]
    g = Fd.spectral_gradient(np.sin(2 * X[0]) * np.cos(X[1]), dom)
    assert np.allclose(g[0], 2 * np.cos(2 * X[0]) * np.cos(X[1]), atol=1e-12)
    assert np.allclose(g[1], -np.sin(2 * X[0]) * np.sin(X[1]), atol=1e-12)


# ---------------------------------------------------------------------------
# admissible tuples


def test_reference_tuple_d3():
    rep = Fd.check_admissible(NormSpec(18 / 11, 3.0, 18 / 7, 2.0), 3)
    assert rep.passed and rep.violated == ()


def test_jointly_admissible_conjugate_two():
    first = NormSpec(18 / 11, 3.0, 18 / 7, 2.0)
    assert Fd.jointly_admissible(first, first, 3)
    other = Fd.theorem_exponents(2.5, 3.0, 3)
    assert not Fd.jointly_admissible(first, other, 3)


def test_d1_exclusion_is_cited():
    a = 4.0
    rep = Fd.check_admissible(NormSpec(a / 2, a, INF, a), 1)
    assert not rep.passed
    assert any("exclusion" in v for v in rep.violated)


def test_critical_exponent_branches():
    assert Fd.critical_exponents(2.0, 3) == pytest.approx((1.5, 3.0))
    assert Fd.critical_exponents(1.2, 3) == pytest.approx((1.0, 1.2 / 0.8))
    assert Fd.critical_exponents(3.0, 1)[1] == INF


def test_brute_force_agreement():
    rng = np.random.default_rng(7)
    for d in (1, 2, 3):
        verdicts = set()
        for iq, ir, ip, ia in random_inverse_tuples(rng, d, 10_000):
            spec = NormSpec(inv(iq), inv(ir), inv(ip), inv(ia))
            want = admissible_oracle(iq, ir, ip, ia, d)
            assert Fd.check_admissible(spec, d).passed == want, (d, iq, ir, ip, ia)
            verdicts.add(want)
        assert verdicts == {True, False}


@pytest.mark.parametrize("d", [2, 3])
def test_theorem_map_grid(d):
    (r_lo, r_hi), a_lo = Fd.theorem_range(d)
    for r in np.linspace(r_lo, r_hi, 21)[1:]:
        if r < a_lo:
            continue
        for a in np.linspace(a_lo, r, 20):
            spec = Fd.theorem_exponents(float(a), float(r), d)
            assert Fd.check_admissible(spec, d, 1e-9).passed, (a, r)


def test_dual_tuple_is_jointly_admissible():
    spec = Fd.theorem_exponents(2.0, 3.0, 3)
    dual = Fd.dual_tuple(spec, 3)
    assert dual.a == 2.0
    assert Fd.check_admissible(dual, 3).passed


def test_bad_exponent():
    with pytest.raises(Fd.FieldError):
        NormSpec(0.5, 2.0, 2.0, 2.0)


# ---------------------------------------------------------------------------
# properties

fields_2d = st.integers(0, 2**32 - 1).map(
    lambda s: np.random.default_rng(s).random((4, 4, 4, 4)))


@settings(max_examples=40, deadline=None)
@given(vals=fields_2d, c=st.floats(0.01, 100.0), p=st.sampled_from([1.0, 1.5, 2.0, 4.0, INF]),
       q=st.sampled_from([1.0, 2.0, 3.0, INF]))
def test_mixed_norm_homogeneous(vals, c, p, q):
    dom = Domain(2, 1.0, 4, 1.0, 4)
    f = PhaseField(dom, vals)
    assert Fd.mixed_norm(f.with_values(c * vals), p, q) == pytest.approx(c * Fd.mixed_norm(f, p, q), rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(vals=fields_2d, a=st.floats(1.0, 6.0))
def test_equal_exponents_property(vals, a):
    dom = Domain(2, 1.0, 4, 1.0, 4)
    f = PhaseField(dom, vals)
    assert Fd.mixed_norm(f, a, a) == pytest.approx(Fd.flat_norm(f, a), rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_bessel_preserves_mean(seed):
    dom = Domain(2, 3.0, 8, 1.0, 4)
    rho = np.random.default_rng(seed).random(dom.x_shape)
    S = Fd.bessel_solve(rho, dom)
    assert S.values.mean() == pytest.approx(rho.mean(), rel=1e-12)
    assert S.values.min() >= 0
