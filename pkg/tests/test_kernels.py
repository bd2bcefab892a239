import math

import numpy as np
import pytest
from gmpy2 import mpfr
from hypothesis import given, settings, strategies as st

from dokc import mpcore
from dokc.errors import ConfigError, DomainError
from dokc.kernels import (
    DOKernel,
    WeightFunctionSpec,
    bump,
    eval_kernel,
    eval_kernel_antiderivative,
    eval_laplace,
    exm1,
    exm2,
    kernels_for,
    multiterm,
    riemann_liouville,
    split_sign,
    weight_from_name,
)
from dokc.quadrature import gauss_nodes, integrate_adaptive


def unit_weight():
    return WeightFunctionSpec("one", lambda a: a * 0 + 1, 1)


def single_node_kernel():
    return DOKernel(unit_weight(), 1, gauss_nodes("gauss-legendre", 1, (0.0, 1.0)))


def test_exm2_kernel_at_one():
    # int_0^1 (1-a)(2-a)(3-a) da
    K = DOKernel(exm2(), 1)
    assert float(eval_kernel(K, 1.0, precision=256)) == pytest.approx(2.25, rel=1e-30 / 2.25 + 1e-15)
    with mpcore.workprec(256):
        assert abs(eval_kernel(K, 1, abs_tol=1e-40, precision=256) - mpfr(9) / 4) < mpfr("1e-38")
    assert eval_kernel(K, 1.0) == pytest.approx(2.25, rel=1e-14)


def test_single_node_kernel():
    K = single_node_kernel()
    assert K.discrete
    assert eval_kernel(K, 1.0) == pytest.approx(0.564189583547756, rel=1e-15)
    assert eval_laplace(K, 4.0) == pytest.approx(0.5, rel=1e-15)
    with mpcore.workprec(256):
        v = eval_laplace(K, 4, precision=256)
        assert abs(v - mpfr("0.5")) < mpfr(2) ** -250


def test_exm2_laplace_at_one_is_gamma_integral():
    K = DOKernel(exm2(), 1)
    ref = integrate_adaptive(lambda b: mpcore.gamma(b, 200), mpfr(3), mpfr(4), mpfr("1e-45"), precision=200)
    with mpcore.workprec(200):
        got = eval_laplace(K, 1, aaa_tol=1e-35, precision=200)
        assert abs(got - ref) < mpfr("1e-44")


def test_discrete_laplace_large_s_limit():
    rule = gauss_nodes("gauss-legendre", 5, (0.0, 1.0))
    K = DOKernel(exm2(), 1, rule)
    s = 1e8
    direct = sum(c * s**a for a, c in K.terms(None))
    assert s * eval_laplace(K, s) == pytest.approx(direct, rel=1e-12)


def test_laplace_complex_argument():
    K = DOKernel(riemann_liouville(0.5), 1)
    s = 2.0 + 3.0j
    assert eval_laplace(K, s) == pytest.approx(s**-0.5, rel=1e-14)


def test_rl_kernel_power_law():
    K = DOKernel(riemann_liouville(0.3), 1)
    for t in [1e-4, 0.1, 2.0]:
        assert eval_kernel(K, t) == pytest.approx(t**-0.3 / math.gamma(0.7), rel=1e-14)


def test_discrete_kernel_decreases_in_t():
    for w in [exm1(), exm2()]:
        for K in kernels_for(w, "gauss-legendre", 8):
            assert eval_kernel(K, 1.0) > eval_kernel(K, 4.0) > 0


@settings(max_examples=30, deadline=None)
@given(st.floats(1e-6, 10.0), st.floats(1.001, 100.0))
def test_discrete_kernel_complete_monotone_samples(t1, factor):
    K = DOKernel(exm1(), 2, gauss_nodes("gauss-legendre", 6, (1.0, 2.0)))
    assert eval_kernel(K, t1) > eval_kernel(K, t1 * factor) > 0


def test_continuous_matches_fine_discrete_rule():
    for i in (1, 2):
        Kc = DOKernel(exm1(), i)
        Kd = DOKernel(exm1(), i, gauss_nodes("gauss-legendre", 200, (i - 1.0, float(i))))
        for t in [0.3, 1.0]:
            assert eval_kernel(Kd, t) == pytest.approx(eval_kernel(Kc, t), rel=1e-10)


def test_antiderivative_consistent():
    K = DOKernel(exm2(), 2)
    t = 0.7
    # compare increments away from the weak singularity at t = 0
    F1 = eval_kernel_antiderivative(K, t, abs_tol=1e-30, precision=200)
    F0 = eval_kernel_antiderivative(K, t / 2, abs_tol=1e-30, precision=200)
    ref = integrate_adaptive(lambda x: eval_kernel(K, x), t / 2, t, 1e-12)
    assert float(F1 - F0) == pytest.approx(ref, rel=1e-11)
    assert F0 > 0


def test_domain_errors():
    K = DOKernel(exm2(), 1)
    with pytest.raises(DomainError):
        eval_kernel(K, 0.0)
    with pytest.raises(DomainError):
        eval_kernel(K, -1.0)
    with pytest.raises(DomainError):
        eval_laplace(K, 0.0)
    with pytest.raises(DomainError):
        eval_laplace(K, -1.0 + 1.0j)


# -- weights -----------------------------------------------------------------


def test_split_sign_nonnegative():
    w = exm2()
    plus, minus = split_sign(w)
    assert plus is w and minus is None


def test_split_sign_linear():
    w = WeightFunctionSpec("lin", lambda a: a - 1, 2, breakpoints=(1.0,))
    plus, minus = split_sign(w)
    assert plus(0.5) == 0 and plus(1.5) == pytest.approx(0.5)
    assert minus(0.5) == pytest.approx(0.5) and minus(1.5) == 0
    rng = np.random.default_rng(7)
    for a in rng.uniform(0, 2, 100):
        assert plus(a) >= 0 and minus(a) >= 0
        assert plus(a) - minus(a) == pytest.approx(a - 1, abs=1e-15)


def test_split_sign_multiterm():
    w = multiterm([0.3, 0.7], [2.0, -1.0])
    plus, minus = split_sign(w)
    assert plus.orders == (0.3,) and minus.coefficients == (1.0,)


@pytest.mark.parametrize("center,radius,upper", [(0.5, 0.5, None), (2.0, 0.1, 2.0), (1.3, 0.5, None)])
def test_bump_normalised(center, radius, upper):
    w = bump(center, radius, upper=upper)
    lo, hi = w.support
    total = integrate_adaptive(lambda a: w(a), lo, hi, 1e-13)
    assert total == pytest.approx(1.0, abs=1e-10)
    assert w(lo - 1e-3) == 0 if lo > 0 else True


def test_bump_alpha_max():
    assert bump(2.0, 0.5, upper=2.0).alpha_max == 2
    assert bump(0.5, 0.5).alpha_max == 1
    assert bump(0.5, 0.5, alpha_max=3).alpha_max == 3
    with pytest.raises(ConfigError):
        bump(2.5, 0.5, alpha_max=2)


def test_weight_validation():
    with pytest.raises(ConfigError):
        WeightFunctionSpec("bad", lambda a: a, 4)
    with pytest.raises(ConfigError):
        multiterm([1.0], [1.0])
    with pytest.raises(ConfigError):
        weight_from_name("nope")
    with pytest.raises(ConfigError):
        DOKernel(exm1(), 3)


def test_kernels_for_skips_empty_intervals():
    ks = kernels_for(bump(2.0, 0.1, upper=2.0))
    assert [k.index for k in ks] == [2]
    assert [k.index for k in kernels_for(exm1())] == [1, 2]


def test_identifiers_distinguish_modes():
    a = DOKernel(exm1(), 1).identifier
    b = DOKernel(exm1(), 1, gauss_nodes("gauss-legendre", 4, (0.0, 1.0))).identifier
    assert a != b and "i=1" in a
