import math

import numpy as np
import pytest
import scipy.special as sps
from gmpy2 import mpfr
from hypothesis import given, settings, strategies as st

from dokc import mpcore
from dokc.errors import AccuracyError, ConfigError, DomainError
from dokc.quadrature import gauss_nodes, integrate_adaptive, kronrod_reference

# QUADPACK G7K15 (dqk15) abscissae and weights
XGK = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.000000000000000000000000000000000,
]
WGK = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
]
WG = [0.129484966168869693270611432679082, 0.279705391489276667901467771423780, 0.381830050505118944950369775488975, 0.417959183673469387755102040816327]


def test_gauss_legendre_examples():
    r = gauss_nodes("gauss-legendre", 2, (0.0, 1.0))
    np.testing.assert_allclose(sorted(r.nodes), [0.5 - 1 / (2 * math.sqrt(3)), 0.5 + 1 / (2 * math.sqrt(3))], rtol=1e-15)
    np.testing.assert_allclose(r.weights, [0.5, 0.5], rtol=1e-15)
    r1 = gauss_nodes("gauss-legendre", 1, (0.0, 1.0))
    assert float(r1.nodes[0]) == 0.5 and float(r1.weights[0]) == 1.0
    r5 = gauss_nodes("gauss-legendre", 5, (0.0, 1.0))
    assert r5.apply(lambda a: a**9) == pytest.approx(0.1, abs=1e-14)


@pytest.mark.parametrize("n", [1, 3, 8, 20])
def test_gauss_legendre_matches_numpy(n):
    x, w = np.polynomial.legendre.leggauss(n)
    r = gauss_nodes("gauss-legendre", n, (-1.0, 1.0))
    order = np.argsort(r.nodes)
    np.testing.assert_allclose(np.asarray(r.nodes)[order], x, atol=1e-15)
    np.testing.assert_allclose(np.asarray(r.weights)[order], w, rtol=1e-13)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 12), st.integers(0, 23))
def test_gauss_legendre_polynomial_exactness(n, k):
    deg = k % (2 * n)
    r = gauss_nodes("gauss-legendre", n, (1.0, 2.0))
    exact = (2.0 ** (deg + 1) - 1.0) / (deg + 1)
    assert r.apply(lambda a: a**deg) == pytest.approx(exact, rel=1e-13)


def test_gauss_legendre_high_precision():
    r = gauss_nodes("gauss-legendre", 10, (0.0, 1.0), precision=256)
    with mpcore.workprec(256):
        val = r.apply(lambda a: a**19)
        assert abs(val - mpfr(1) / 20) < mpfr(2) ** -240


@pytest.mark.parametrize("alpha,beta", [(0.5, -0.5), (-0.3, 0.7), (1.0, 2.0)])
def test_gauss_jacobi_matches_scipy(alpha, beta):
    x, w = sps.roots_jacobi(7, alpha, beta)
    r = gauss_nodes("gauss-jacobi", 7, (-1.0, 1.0), alpha=alpha, beta=beta)
    order = np.argsort(r.nodes)
    np.testing.assert_allclose(np.asarray(r.nodes)[order], x, atol=1e-13)
    np.testing.assert_allclose(np.asarray(r.weights)[order], w, rtol=1e-11)


def test_rules_are_open_with_positive_weights():
    for fam, kw in [("gauss-legendre", {}), ("gauss-jacobi", {"alpha": 0.5, "beta": 0.5})]:
        r = gauss_nodes(fam, 9, (1.0, 2.0), **kw)
        assert all(1.0 < float(x) < 2.0 for x in r.nodes)
        assert all(float(w) > 0 for w in r.weights)


def test_unknown_family_and_bad_count():
    with pytest.raises(ConfigError):
        gauss_nodes("clenshaw-curtis", 4)
    with pytest.raises((ConfigError, DomainError)):
        gauss_nodes("gauss-legendre", 0)


def test_kronrod_reference_matches_quadpack():
    xk, wk, wg = kronrod_reference(7, 128)
    xs = sorted((float(v) for v in xk), reverse=True)
    np.testing.assert_allclose(xs[:8], XGK, atol=1e-15)
    w_by_x = {round(float(x), 12): float(w) for x, w in zip(xk, wk)}
    for x, w in zip(XGK, WGK):
        assert w_by_x[round(x, 12)] == pytest.approx(w, rel=1e-14)
    gw = sorted({round(float(w), 15) for w in wg if float(w) != 0.0})
    np.testing.assert_allclose(gw, sorted(WG), rtol=1e-14)


# -- adaptive integration ---------------------------------------------------------


def test_adaptive_examples():
    assert integrate_adaptive(lambda a: a, 0.0, 1.0, 1e-14) == pytest.approx(0.5, abs=1e-14)
    val = integrate_adaptive(lambda t: t**-0.5, 0.0, 1.0, 1e-10)
    assert abs(val - 2.0) <= 1e-10


def test_adaptive_singular_high_precision():
    with mpcore.workprec(256):
        val = integrate_adaptive(lambda t: t ** mpfr(-0.5), 0, 1, mpfr("1e-40"), precision=256)
        assert abs(val - 2) < mpfr("1e-40")


def test_adaptive_gamma_integral_vs_simpson():
    # composite Simpson with 10^6 panels as the oracle
    n = 1_000_000
    x = np.linspace(3.0, 4.0, 2 * n + 1)
    g = sps.gamma(x)
    h = 1.0 / (2 * n)
    simpson = h / 3 * (g[0] + g[-1] + 4 * g[1:-1:2].sum() + 2 * g[2:-1:2].sum())
    val = integrate_adaptive(lambda b: float(mpcore.gamma(b, 64)), 3.0, 4.0, 1e-13)
    assert val == pytest.approx(simpson, abs=1e-12)


def test_adaptive_deterministic():
    f = lambda a: mpcore.gamma(a, 128)
    with mpcore.workprec(128):
        v1 = integrate_adaptive(f, mpfr(3), mpfr(4), mpfr("1e-30"), precision=128)
        v2 = integrate_adaptive(f, mpfr(3), mpfr(4), mpfr("1e-30"), precision=128)
    assert v1 == v2


def test_adaptive_cap_raises_with_estimate():
    with pytest.raises(AccuracyError) as exc:
        integrate_adaptive(lambda x: math.sin(1 / x) / x, 1e-6, 1.0, 1e-14, max_intervals=20)
    assert exc.value.estimate is not None


def test_adaptive_full_output():
    res = integrate_adaptive(lambda a: a * a, 0.0, 2.0, 1e-12, full_output=True)
    assert res.value == pytest.approx(8 / 3, rel=1e-14)
    assert res.intervals >= 1 and res.evaluations >= 15
    assert res.panels[0][0] == 0.0 and res.panels[-1][1] == 2.0


def test_adaptive_rejects_bad_tolerance():
    with pytest.raises(DomainError):
        integrate_adaptive(lambda a: a, 0.0, 1.0, 0.0)
