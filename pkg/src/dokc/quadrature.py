"""Gaussian quadrature rules and adaptive Gauss-Kronrod integration.

Rules are built from the three-term recurrence of the monic orthogonal
polynomials: double-precision eigenvalues of the Jacobi matrix seed a Newton
iteration on the recurrence at the requested precision, and weights follow
from the Christoffel numbers.  Kronrod nodes are the zeros of the Stieltjes
polynomial, built in exact rational arithmetic; the Kronrod weights solve the
moment equations on P_0 .. P_2n at twice the working precision.
"""

from __future__ import annotations

import functools
import heapq
import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from gmpy2 import mpfr

from . import mpcore
from .errors import AccuracyError, ConfigError, DomainError

FAMILIES = ("gauss-legendre", "gauss-jacobi")


@dataclass(frozen=True)
class QuadratureRule:
    """Nodes/weights on ``interval``; arrays are float64 or mpfr object arrays."""

    nodes: np.ndarray
    weights: np.ndarray
    interval: tuple
    family: str
    params: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.nodes)

    def apply(self, f):
        """Sum ``w_k f(x_k)``."""
        return sum(w * f(x) for x, w in zip(self.nodes, self.weights))


# -- recurrences ------------------------------------------------------------


def _legendre_recurrence(n):
    """Monic Legendre recurrence as Fractions: a_k = 0, b_0 = 2, b_k = k^2/(4k^2-1)."""
    a = [Fraction(0)] * n
    b = [Fraction(2)] + [Fraction(k * k, 4 * k * k - 1) for k in range(1, n)]
    return a, b


def _jacobi_recurrence(n, alpha, beta, bits):
    """Monic Jacobi recurrence for weight (1-x)^alpha (1+x)^beta, as mpfr."""
    with mpcore.workprec(bits):
        al, be = mpfr(alpha), mpfr(beta)
        a, b = [], []
        for k in range(n):
            if k == 0:
                a.append((be - al) / (al + be + 2))
            else:
                den = (2 * k + al + be) * (2 * k + al + be + 2)
                a.append((be * be - al * al) / den)
        mu0 = (
            mpfr(2) ** (al + be + 1)
            * mpcore.gamma(al + 1, bits)
            * mpcore.gamma(be + 1, bits)
            / mpcore.gamma(al + be + 2, bits)
        )
        b.append(mu0)
        for k in range(1, n):
            s = 2 * k + al + be
            num = 4 * k * (k + al) * (k + be) * (k + al + be)
            den = s * s * (s + 1) * (s - 1)
            b.append(num / den)
    return a, b


def _nodes_from_recurrence(a, b, bits):
    """Zeros of p_n and Christoffel weights for the recurrence (a, b), len n."""
    n = len(a)
    af = np.array([float(v) for v in a])
    bf = np.array([float(v) for v in b[1:]])
    seeds = np.linalg.eigvalsh(np.diag(af) + np.diag(np.sqrt(bf), 1) + np.diag(np.sqrt(bf), -1))
    with mpcore.workprec(bits + 32):
        A = [mpfr(v) if not isinstance(v, Fraction) else mpcore.mpf(v) for v in a]
        B = [mpfr(v) if not isinstance(v, Fraction) else mpcore.mpf(v) for v in b]
        eps = mpfr(2) ** (-(bits + 16))

        def evaluate(x):
            p0, p1 = mpfr(0), mpfr(1)
            d0, d1 = mpfr(0), mpfr(0)
            for k in range(n):
                bk = B[k] if k else mpfr(0)
                p2 = (x - A[k]) * p1 - bk * p0
                d2 = p1 + (x - A[k]) * d1 - bk * d0
                p0, p1, d0, d1 = p1, p2, d1, d2
            return p1, d1

        nodes = []
        for s in seeds:
            x = mpfr(float(s))
            for _ in range(60):
                p, dp = evaluate(x)
                dx = p / dp
                x -= dx
                if abs(dx) <= eps * max(abs(x), mpfr(1)):
                    break
            nodes.append(x)
        weights = []
        for x in nodes:
            # orthonormal q_k = p_k / sqrt(b_1 ... b_k)
            total = mpfr(1)
            p0, p1 = mpfr(0), mpfr(1)
            norm = mpfr(1)
            for k in range(n - 1):
                bk = B[k] if k else mpfr(0)
                p2 = (x - A[k]) * p1 - bk * p0
                p0, p1 = p1, p2
                norm *= B[k + 1]
                total += p1 * p1 / norm
            weights.append(B[0] / total)
    with mpcore.workprec(bits):
        return (
            np.array([mpfr(x) for x in nodes], dtype=object),
            np.array([mpfr(w) for w in weights], dtype=object),
        )


def _legendre_monomials(n):
    """Exact monomial coefficients (low to high) of P_0 .. P_n."""
    polys = [[Fraction(1)], [Fraction(0), Fraction(1)]]
    for k in range(1, n):
        prev, cur = polys[k - 1], polys[k]
        nxt = [Fraction(0)] * (k + 2)
        for i, c in enumerate(cur):
            nxt[i + 1] += Fraction(2 * k + 1, k + 1) * c
        for i, c in enumerate(prev):
            nxt[i] -= Fraction(k, k + 1) * c
        polys.append(nxt)
    return polys[: n + 1]


def _solve_fractions(M, rhs):
    n = len(M)
    A = [row[:] + [r] for row, r in zip(M, rhs)]
    for j in range(n):
        p = next(i for i in range(j, n) if A[i][j] != 0)
        A[j], A[p] = A[p], A[j]
        for i in range(n):
            if i != j and A[i][j] != 0:
                f = A[i][j] / A[j][j]
                A[i] = [x - f * y for x, y in zip(A[i], A[j])]
    return [A[i][n] / A[i][i] for i in range(n)]


def _stieltjes(n):
    """Monic Stieltjes polynomial E_{n+1} for the Legendre weight (exact).

    E_{n+1} is orthogonal to every polynomial of degree <= n with respect to
    the sign-changing weight P_n on [-1, 1]; its zeros are the Kronrod nodes.
    """
    P = _legendre_monomials(n)[n]

    def moment(d):
        return Fraction(2, d + 1) if d % 2 == 0 else Fraction(0)

    def inner(mono, j):
        # integral of x^mono * P_n(x) * x^j over [-1, 1]
        return sum(c * moment(mono + i + j) for i, c in enumerate(P))

    free = [k for k in range(n + 1) if (n + 1 - k) % 2 == 0]
    tests = [j for j in range(n + 1) if (n + 1 + n + j) % 2 == 0][: len(free)]
    M = [[inner(k, j) for k in free] for j in tests]
    rhs = [-inner(n + 1, j) for j in tests]
    sol = _solve_fractions(M, rhs)
    coeffs = [Fraction(0)] * (n + 2)
    coeffs[n + 1] = Fraction(1)
    for k, c in zip(free, sol):
        coeffs[k] = c
    return coeffs


@functools.lru_cache(maxsize=64)
def _reference_rule(family, n, bits, alpha=0.0, beta=0.0):
    if family == "gauss-legendre":
        a, b = _legendre_recurrence(n)
    elif family == "gauss-jacobi":
        if alpha <= -1 or beta <= -1:
            raise DomainError("Jacobi exponents must exceed -1")
        a, b = _jacobi_recurrence(n, alpha, beta, bits + 32)
    else:
        raise ConfigError(f"unsupported quadrature family {family!r}; choose from {FAMILIES}")
    return _nodes_from_recurrence(a, b, bits)


@functools.lru_cache(maxsize=32)
def kronrod_reference(n: int, bits: int):
    """Gauss-Kronrod pair on [-1, 1]: (nodes, kronrod weights, gauss weights).

    Returns 2n+1 ascending nodes; Gauss weights are zero at the n+1
    Kronrod-only nodes.
    """
    E = _stieltjes(n)
    seeds = np.sort(np.roots([float(c) for c in reversed(E)]).real)
    xg, wg = _reference_rule("gauss-legendre", n, bits)
    wp = 2 * bits + 64
    with mpcore.workprec(wp):
        coeffs = [mpcore.mpf(c) for c in reversed(E)]
        eps = mpfr(2) ** (-(bits + 16))
        new_nodes = []
        for seed in seeds:
            x = mpfr(float(seed))
            for _ in range(80):
                p, dp = mpfr(0), mpfr(0)
                for c in coeffs:
                    dp = dp * x + p
                    p = p * x + c
                dx = p / dp
                x -= dx
                if abs(dx) <= eps:
                    break
            new_nodes.append(x)
        nodes = sorted(list(xg) + new_nodes)
        # weights from exactness on P_0 .. P_2n
        polys = _legendre_monomials(2 * n)
        V = np.empty((2 * n + 1, 2 * n + 1), dtype=object)
        for k, pk in enumerate(polys):
            cs = [mpcore.mpf(c) for c in reversed(pk)]
            for i, x in enumerate(nodes):
                acc = mpfr(0)
                for c in cs:
                    acc = acc * x + c
                V[k, i] = acc
        rhs = np.array([mpfr(2)] + [mpfr(0)] * (2 * n), dtype=object)
        wk = mpcore.solve_dense(V, rhs)
    with mpcore.workprec(bits):
        xk = np.array([mpfr(x) for x in nodes], dtype=object)
        wk = np.array([mpfr(w) for w in wk], dtype=object)
        wg_full = np.array([mpfr(0)] * len(xk), dtype=object)
        tol = mpfr(2) ** (-(bits // 2))
        for x, w in zip(xg, wg):
            j = int(np.argmin([abs(x - y) for y in xk]))
            if abs(xk[j] - x) > tol:
                raise AccuracyError("Kronrod nodes do not interlace the Gauss nodes")
            wg_full[j] = w
    return xk, wk, wg_full


def _map(nodes, weights, interval, bits):
    lo, hi = interval
    if bits is None:
        x = np.array([float(v) for v in nodes])
        w = np.array([float(v) for v in weights])
        half, mid = (hi - lo) / 2.0, (hi + lo) / 2.0
        return mid + half * x, half * w
    with mpcore.workprec(bits):
        lo, hi = mpfr(lo), mpfr(hi)
        half, mid = (hi - lo) / 2, (hi + lo) / 2
        return (
            np.array([mid + half * v for v in nodes], dtype=object),
            np.array([half * v for v in weights], dtype=object),
        )


def gauss_nodes(family: str = "gauss-legendre", n: int = 10, interval=(0.0, 1.0), precision=None, alpha=0.0, beta=0.0):
    """Gauss rule with ``n`` nodes on ``interval``.

    ``precision=None`` returns float64 arrays, otherwise mpfr arrays at that
    many bits.  Gauss-Jacobi uses the weight ``(hi-x)^alpha (x-lo)^beta``
    folded into the weights (scaled to the interval).
    """
    if n < 1:
        raise DomainError("a quadrature rule needs at least one node")
    bits = precision or 53
    x, w = _reference_rule(family, int(n), int(bits) + 8, float(alpha), float(beta))
    if family == "gauss-jacobi":
        # the Jacobi weight scales with the half-length too
        lo, hi = interval
        scale = ((hi - lo) / 2.0) ** (alpha + beta)
        with mpcore.workprec(bits + 8):
            w = np.array([v * mpfr(scale) for v in w], dtype=object)
    nodes, weights = _map(x, w, interval, precision)
    params = {"alpha": alpha, "beta": beta} if family == "gauss-jacobi" else {}
    return QuadratureRule(nodes, weights, tuple(interval), family, params)


# -- adaptive integration ---------------------------------------------------


@dataclass
class IntegrationResult:
    value: object
    error: object
    intervals: int
    evaluations: int
    panels: list = field(default_factory=list)


def integrate_adaptive(
    f,
    a,
    b,
    abs_tol,
    precision=None,
    order: int = 15,
    max_intervals: int = 4000,
    max_depth: int = 400,
    vectorized: bool = False,
    full_output: bool = False,
):
    """Globally adaptive Gauss-Kronrod quadrature of ``f`` over ``[a, b]``.

    The interval with the largest error estimate ``|K - G|`` is bisected until
    the summed estimate drops below ``abs_tol``.  Integrable endpoint
    singularities are handled by repeated bisection towards them.

    ``precision=None`` runs in double precision; otherwise nodes, weights and
    sums are mpfr at ``precision`` bits and ``f`` receives mpfr arguments.
    With ``vectorized=True`` ``f`` is called once per panel with an array of
    nodes.  Raises :class:`AccuracyError` (carrying the estimate) when the
    depth or interval cap is hit first.
    """
    if not abs_tol > 0:
        raise DomainError("abs_tol must be positive")
    bits = precision
    if bits is None:
        xk, wk, wg = (np.array([float(v) for v in arr]) for arr in kronrod_reference(order, 64))
        a, b = float(a), float(b)

        def panel(lo, hi):
            half, mid = 0.5 * (hi - lo), 0.5 * (hi + lo)
            x = mid + half * xk
            fx = np.asarray(f(x), dtype=float) if vectorized else np.array([f(v) for v in x], dtype=float)
            kval = half * float(np.dot(wk, fx))
            gval = half * float(np.dot(wg, fx))
            return kval, abs(kval - gval)

        total = math.fsum
        tol = abs_tol
    else:
        xk, wk, wg = kronrod_reference(order, bits + 16)
        ctx_bits = bits

        def panel(lo, hi):
            with mpcore.workprec(ctx_bits):
                half, mid = (hi - lo) / 2, (hi + lo) / 2
                x = np.array([mid + half * v for v in xk], dtype=object)
                fx = f(x) if vectorized else np.array([f(v) for v in x], dtype=object)
                kval = half * np.dot(wk, fx)
                gval = half * np.dot(wg, fx)
                return kval, abs(kval - gval)

        def total(vals):
            with mpcore.workprec(ctx_bits):
                acc = mpfr(0)
                for v in vals:
                    acc += v
                return acc

        with mpcore.workprec(bits):
            a, b = mpfr(a), mpfr(b)
            tol = mpfr(abs_tol)
    if a == b:
        zero = 0.0 if bits is None else mpfr(0, bits)
        res = IntegrationResult(zero, zero, 0, 0)
        return res if full_output else res.value
    sign = 1
    if b < a:
        a, b, sign = b, a, -1

    counter = itertools.count()
    val, err = panel(a, b)
    heap = [(-err, next(counter), a, b, val, err, 0)]
    evals = 2 * order + 1
    while True:
        est_err = total([item[5] for item in heap])
        if est_err <= tol:
            break
        _, _, lo, hi, _, _, depth = heap[0]
        if depth >= max_depth or len(heap) >= max_intervals:
            value = total([item[4] for item in heap])
            raise AccuracyError(
                f"adaptive quadrature stopped at depth {depth} with {len(heap)} panels; "
                f"error estimate {float(est_err):.3e} > {float(tol):.3e}",
                estimate=sign * value,
                error=est_err,
                intervals=len(heap),
            )
        heapq.heappop(heap)
        if bits is None:
            mid = 0.5 * (lo + hi)
        else:
            with mpcore.workprec(bits):
                mid = (lo + hi) / 2
        for l, h in ((lo, mid), (mid, hi)):
            v, e = panel(l, h)
            heapq.heappush(heap, (-e, next(counter), l, h, v, e, depth + 1))
        evals += 2 * (2 * order + 1)
    # fixed panel order keeps the sum bit-reproducible
    heap.sort(key=lambda item: item[2])
    value = total([item[4] for item in heap])
    if bits is not None:
        with mpcore.workprec(bits):
            value = sign * value
    else:
        value = sign * value
    res = IntegrationResult(value, est_err, len(heap), evals, [(item[2], item[3]) for item in heap])
    return res if full_output else res.value
