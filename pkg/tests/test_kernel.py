import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kinflow import kernel as K
from kinflow.fields import Domain, PhaseField, bessel_solve


def band_limited(dom, seed, modes=3, amp=1.0, offset=1.5):
    """A positive, smooth, band-limited chemical field."""
    rng = np.random.default_rng(seed)
    X = [x[(Ellipsis,) + (0,) * dom.d] for x in dom.x_mesh()]
    rho = np.full(dom.x_shape, offset)
    for _ in range(modes):
        k = rng.integers(-2, 3, dom.d)
        ph = rng.uniform(0, 2 * np.pi)
        rho += amp * rng.uniform(-0.4, 0.4) * np.cos(sum(2 * np.pi * k[i] * X[i] / dom.L for i in range(dom.d)) + ph)
    return bessel_solve(rho, dom)


def catalog():
    return [
        K.zero_kernel(),
        K.angle_kernel(K.linear_rate(1.0), K.constant_profile(1.0), 0.3),
        K.angle_kernel(K.gradient_rate(2.0), K.cosine_profile(1.0, 0.8), 0.2),
        K.bounded_test_kernel(0.7),
        K.custom_kernel(K.linear_rate(3.0), lambda v, w: np.exp(-np.sum((v - w) ** 2, axis=-1))),
    ]


DOM2 = Domain(2, 2.0, 6, 1.0, 8)


def test_zero_kernel_everywhere():
    S = band_limited(DOM2, 0)
    assert K.eval_kernel(K.zero_kernel(), S, 0.0, [0.1, 0.2], [0.3, 0.1], [-0.2, 0.5]) == 0.0
    assert np.array_equal(K.assemble(K.zero_kernel(), S).values(), np.zeros(DOM2.x_shape + (64, 64)))


def test_angle_kernel_diagonal_value():
    eps = 0.25
    kern = K.angle_kernel(K.linear_rate(2.0), K.cosine_profile(1.0, 0.5), eps)
    S = band_limited(DOM2, 1)
    x = np.array([DOM2.dx, 2 * DOM2.dx])      # a grid node: no interpolation
    s = S.values[1, 2]
    v = np.array([0.3, -0.4])
    # theta(v, v) = 0, delta_eps(0) = 1 / eps
    assert K.eval_kernel(kern, S, 0.0, x, v, v) == pytest.approx(2.0 * s * 1.5 / eps, rel=1e-12)


def test_angle_kernel_vanishes_at_bump_edge():
    eps = 0.2
    kern = K.angle_kernel(K.linear_rate(1.0), K.constant_profile(1.0), eps)
    S = band_limited(DOM2, 2)
    v, w = np.array([0.5, 0.0]), np.array([0.0, 0.3])   # |v| - |w| = eps
    assert K.eval_kernel(kern, S, 0.0, [0.0, 0.0], v, w) == 0.0


def test_turning_angle_at_origin():
    assert K.turning_angle(np.zeros(2), np.array([1.0, 0.0])) == pytest.approx(np.pi / 2)
    assert K.turning_angle(np.array([1.0, 0.0]), np.array([-2.0, 0.0])) == pytest.approx(np.pi)


def test_outside_support_is_zero():
    kern = K.bounded_test_kernel(1.0, support=0.5)
    S = band_limited(DOM2, 3)
    assert K.eval_kernel(kern, S, 0.0, [0.0, 0.0], [0.6, 0.0], [0.1, 0.0]) == 0.0
    assert K.eval_kernel(kern, S, 0.0, [0.0, 0.0], [0.2, 0.0], [0.1, 0.0]) == 1.0


def test_chem_at_matches_nodes():
    S = band_limited(DOM2, 4)
    assert K.chem_at(S, [2 * DOM2.dx, 3 * DOM2.dx]) == pytest.approx(S.values[2, 3], rel=1e-14)


@pytest.mark.parametrize("idx", range(5))
def test_exchange_identity(idx):
    kern = catalog()[idx]
    rng = np.random.default_rng(idx)
    S = band_limited(DOM2, 10 + idx)
    f = PhaseField(DOM2, rng.random(DOM2.shape))
    c = K.collision(kern, S, f)
    scale = max(np.abs(c.gain).sum(), 1e-300)
    assert abs(c.net.sum()) <= 1e-12 * scale
    assert np.all(c.gain >= 0) and np.all(c.loss >= 0)


def test_constant_kernel_uniform_field_is_equilibrium():
    dom = Domain(1, 1.0, 8, 1.0, 16)
    kappa = 0.8
    S = band_limited(dom, 5)
    f = PhaseField(dom, np.ones(dom.shape))
    c = K.collision(K.bounded_test_kernel(kappa), S, f)
    assert np.allclose(c.gain, kappa * 2 * dom.v_max, rtol=1e-14)
    assert np.allclose(c.net, 0.0, atol=1e-14)


def test_nonnegative_on_catalog():
    rng = np.random.default_rng(6)
    S = band_limited(DOM2, 6)
    for kern in catalog():
        for _ in range(50):
            x = rng.uniform(0, DOM2.L, 2)
            v, w = rng.uniform(-1, 1, 2), rng.uniform(-1, 1, 2)
            assert K.eval_kernel(kern, S, 0.0, x, v, w) >= 0.0
        assert K.assemble(kern, S).values().min() >= 0.0


def test_collision_rejects_mismatched_domains():
    S = band_limited(DOM2, 7)
    f = PhaseField(Domain(2, 2.0, 6, 1.0, 6), np.ones((6, 6, 6, 6)))
    with pytest.raises(ValueError):
        K.collision(K.bounded_test_kernel(), S, f)


def test_cosine_profile_must_be_nonnegative():
    with pytest.raises(K.KernelError):
        K.cosine_profile(0.5, 1.0)


# ---------------------------------------------------------------------------
# bound check


def test_bound_zero_kernel():
    rep = K.check_kernel_bound(K.zero_kernel(), [band_limited(DOM2, 0)], 4.0, 2.0, 2.0)
    assert rep.C_hat == 0.0 and not rep.violated


def test_bound_angle_kernel_stable():
    kern = K.angle_kernel(K.linear_rate(1.0), K.constant_profile(1.0), 0.3)
    dom = Domain(2, 2.0, 8, 1.0, 8)
    samples = [band_limited(dom, 100 + i, amp=1.0 + 0.1 * i) for i in range(20)]
    rep = K.check_kernel_bound(kern, samples, 4.0, 2.0, 2.0)
    ratios = np.array([r[3] for r in rep.rows])
    assert math.isfinite(rep.C_hat) and not rep.violated
    # lambda(S) = S makes the ratio nearly sample independent
    assert ratios.max() / ratios.min() < 1.5
    assert rep.to_csv().splitlines()[0] == "sample,lhs,rhs,ratio"
    assert len(rep.to_csv().splitlines()) == 21


def test_bound_test_kernel_zero_field_violates():
    kern = K.bounded_test_kernel(1.0)
    S0 = bessel_solve(np.zeros(DOM2.x_shape), DOM2)
    rep = K.check_kernel_bound(kern, [band_limited(DOM2, 1), S0], 4.0, 2.0, 2.0)
    assert rep.violated
    assert rep.rows[0][3] < math.inf and rep.rows[1][3] == math.inf


def test_bound_exponent_order():
    with pytest.raises(K.KernelError):
        K.check_kernel_bound(K.zero_kernel(), [], 2.0, 4.0, 2.0)


def test_rate_homogeneity():
    samples = [band_limited(DOM2, i) for i in range(3)]
    assert K.rate_homogeneity(K.angle_kernel(K.linear_rate(2.5), K.constant_profile(), 0.3), samples) \
        == pytest.approx(2.5)
    assert K.rate_homogeneity(K.zero_kernel(), samples) == 0.0


# ---------------------------------------------------------------------------
# regularization


def test_regularize_zero_stays_zero():
    for n in (1, 2, 8):
        assert K.regularize(K.zero_kernel(), n).kind == "zero"


def test_regularize_bad_level():
    with pytest.raises(K.KernelError):
        K.regularize(K.bounded_test_kernel(), 0)


def test_regularized_kernel_is_bounded_by_level():
    dom = Domain(1, 1.0, 8, 1.0, 32)
    kern = K.angle_kernel(K.linear_rate(20.0), K.constant_profile(1.0), 0.1)
    S = band_limited(dom, 8)
    for n in (1, 2, 4):
        vals = K.assemble(K.regularize(kern, n), S).values()
        assert vals.max() <= n + 1e-12
        assert vals.min() >= 0.0


def test_regularization_converges_monotonically_for_indicator():
    dom = Domain(1, 1.0, 8, 1.0, 64)
    pair = lambda v, w: 5.0 * ((np.abs(v[..., 0]) < 0.4) & (np.abs(w[..., 0]) < 0.4)).astype(float)
    kern = K.custom_kernel(K.linear_rate(1.0), pair)
    S = band_limited(dom, 9)
    errs = [K.kernel_difference_norm(K.regularize(kern, n), kern, S, 4.0, 2.0, 2.0) for n in (2, 4, 8, 16)]
    assert all(b < a for a, b in zip(errs, errs[1:])), errs


def test_from_config_kinds():
    assert K.from_config({"kind": "zero"}).kind == "zero"
    k = K.from_config({"kind": "angle", "rate": {"kind": "linear", "c": 3.0}, "eps": 0.2})
    assert k.kind == "angle" and k.rate_constant == 3.0
    assert K.from_config({"kind": "bounded-test", "kappa": 2.0}).kind == "bounded-test"
    with pytest.raises(K.KernelError):
        K.from_config({"kind": "angle", "rate": {"kind": "cubic"}})


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), c=st.floats(0.1, 10.0), eps=st.floats(0.05, 1.0))
def test_exchange_identity_property(seed, c, eps):
    dom = Domain(1, 1.0, 6, 1.0, 10)
    kern = K.angle_kernel(K.linear_rate(c), K.cosine_profile(1.0, -0.5), eps)
    S = band_limited(dom, seed)
    f = PhaseField(dom, np.random.default_rng(seed).random(dom.shape))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        col = K.collision(kern, S, f)
    assert abs(col.net.sum()) <= 1e-12 * max(col.gain.sum(), 1e-300)
