"""Distributed-order weight functions and the per-interval memory kernels.

For a weight ``phi`` supported in ``[0, alpha_max]`` the DO operator splits
into ``alpha_max`` convolution kernels, one per unit interval ``(i-1, i)``::

    K_i(t) = int_{i-1}^{i} phi(a) t^(i-a-1) / Gamma(i-a) da
    L[K_i](s) = int_{i-1}^{i} phi(a) s^(a-i) da

Kernels run either in *continuous* mode (adaptive integration over the
order) or in *discrete* mode (a fixed open quadrature rule, or the orders of
a multi-term operator), where the integrals above become finite sums.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import gmpy2
import numpy as np
from gmpy2 import mpc, mpfr

from . import mpcore
from .errors import ConfigError, DomainError
from .quadrature import QuadratureRule, gauss_nodes, integrate_adaptive

SUPPORTED_ALPHA_MAX = (1, 2, 3)


def _is_mp(x):
    return isinstance(x, (mpfr, mpc))


def _exp(x):
    return gmpy2.exp(x) if _is_mp(x) else math.exp(x)


def _gamma(x):
    return mpcore.gamma(x) if _is_mp(x) else math.gamma(x)


@dataclass(frozen=True)
class WeightFunctionSpec:
    """A DO weight ``phi`` with support in ``[0, alpha_max]``.

    ``phi`` accepts floats or mpfr values and answers in the same kind; for
    mpfr input it must be accurate to the ambient gmpy2 precision.
    Multi-term weights (sums of Dirac masses) have ``kind="multiterm"`` and
    carry ``orders``/``coefficients`` instead of a usable ``phi``.
    """

    name: str
    phi: Callable
    alpha_max: int
    kind: str = "closed-form"
    support: tuple = None
    orders: tuple = ()
    coefficients: tuple = ()
    breakpoints: tuple = ()

    def __post_init__(self):
        if self.alpha_max not in SUPPORTED_ALPHA_MAX:
            raise ConfigError(f"alpha_max must be one of {SUPPORTED_ALPHA_MAX}, got {self.alpha_max}")
        if self.support is None:
            object.__setattr__(self, "support", (0.0, float(self.alpha_max)))
        lo, hi = self.support
        if lo < 0 or hi > self.alpha_max or lo > hi:
            raise ConfigError(f"support {self.support} not inside [0, {self.alpha_max}]")
        if self.kind == "multiterm":
            if len(self.orders) != len(self.coefficients):
                raise ConfigError("multiterm weight needs one coefficient per order")
            for a in self.orders:
                if a <= 0 or a > self.alpha_max or float(a).is_integer():
                    raise ConfigError(f"multiterm order {a} must be non-integer and lie in (0, {self.alpha_max})")
        elif self.kind != "closed-form":
            raise ConfigError(f"unknown weight kind {self.kind!r}")

    def __call__(self, alpha):
        if self.kind == "multiterm":
            raise ConfigError("a multi-term weight has no pointwise value")
        lo, hi = self.support
        if alpha < lo or alpha > hi:
            return alpha * 0
        return self.phi(alpha)


# -- catalogue ----------------------------------------------------------------


def _exm1(alpha):
    return _exp(-alpha) * _gamma(6 - alpha)


def _exm2(alpha):
    return _gamma(4 - alpha)


def exm1() -> WeightFunctionSpec:
    """phi(a) = exp(-a) Gamma(6-a) on [0, 2]."""
    return WeightFunctionSpec("exm1", _exm1, 2)


def exm2() -> WeightFunctionSpec:
    """phi(a) = Gamma(4-a) on [0, 2]."""
    return WeightFunctionSpec("exm2", _exm2, 2)


class _Bump:
    """Normalised bump c_r exp(1/((a-c)^2 - r^2)) on [lo, hi] within [c-r, c+r]."""

    def __init__(self, center, radius, lo, hi):
        self.center, self.radius, self.lo, self.hi = center, radius, lo, hi
        self._norms = {}

    def shape(self, alpha):
        d = (alpha - self.center) ** 2 - self.radius**2
        if not d < 0:
            return alpha * 0
        return _exp(1 / d)

    def norm(self, bits):
        """Normalising constant at ``bits`` of precision (None: double)."""
        if bits not in self._norms:
            if bits is None:
                total = integrate_adaptive(self.shape, self.lo, self.hi, 1e-15)
                self._norms[None] = 1.0 / total
            else:
                # the flat edges defeat full-precision Kronrod convergence, so the
                # constant is taken to a relative 1e-80, far below any AAA tolerance
                wp = bits + 16
                with mpcore.workprec(wp):
                    rough = integrate_adaptive(self.shape, self.lo, self.hi, 1e-20, precision=wp)
                    rel = max(mpfr(2) ** (-bits), mpfr("1e-80"))
                    total = integrate_adaptive(
                        self.shape, self.lo, self.hi, rough * rel, precision=wp, max_intervals=20000
                    )
                    self._norms[bits] = mpfr(1 / total, bits)
        return self._norms[bits]

    def __call__(self, alpha):
        c = self.norm(mpcore.current_precision() if _is_mp(alpha) else None)
        return c * self.shape(alpha)


def bump(
    center: float,
    radius: float,
    upper: float | None = None,
    lower: float = 0.0,
    name: str | None = None,
    alpha_max: int | None = None,
):
    """Bump weight on ``[center-radius, center+radius]`` clipped to ``[lower, upper]``.

    The constant is chosen so that the weight integrates to one over the
    clipped support (``upper=2`` with ``center=2`` gives the half bump).
    ``alpha_max`` defaults to the smallest integer bounding the support; a
    larger value lets bumps with different centres share one order range.
    """
    lo = max(center - radius, lower)
    hi = center + radius if upper is None else min(center + radius, upper)
    if not lo < hi:
        raise ConfigError("bump support is empty")
    needed = int(math.ceil(hi - 1e-12))
    if alpha_max is None:
        alpha_max = needed
    elif alpha_max < needed:
        raise ConfigError(f"alpha_max {alpha_max} below the support bound {hi:g}")
    phi = _Bump(center, radius, lo, hi)
    label = name or f"bump(c={center:g},r={radius:g}" + (f",upper={upper:g})" if upper is not None else ")")
    return WeightFunctionSpec(label, phi, alpha_max, support=(lo, hi))


def multiterm(orders, coefficients, name: str | None = None) -> WeightFunctionSpec:
    """Sum of Dirac masses ``sum_n beta_n delta(a - a_n)``."""
    orders = tuple(float(a) for a in orders)
    coefficients = tuple(float(c) for c in coefficients)
    alpha_max = int(math.ceil(max(orders)))
    label = name or "multiterm(" + ",".join(f"{a:g}:{c:g}" for a, c in zip(orders, coefficients)) + ")"
    return WeightFunctionSpec(
        label, None, alpha_max, kind="multiterm", support=(min(orders), max(orders)),
        orders=orders, coefficients=coefficients,
    )


def riemann_liouville(alpha: float) -> WeightFunctionSpec:
    """Single order ``alpha`` in (0, 1): the kernel is t^-alpha / Gamma(1-alpha)."""
    return multiterm([alpha], [1.0], name=f"rl({alpha:g})")


def weight_from_name(name: str, **params) -> WeightFunctionSpec:
    """Look up a catalogue weight: exm1, exm2, bump, multiterm, rl."""
    if name == "exm1":
        return exm1()
    if name == "exm2":
        return exm2()
    if name == "bump":
        return bump(**params)
    if name == "multiterm":
        return multiterm(params["orders"], params["coefficients"])
    if name == "rl":
        return riemann_liouville(params["alpha"])
    raise ConfigError(f"unknown weight function {name!r}")


# -- sign decomposition -----------------------------------------------------


class _Part:
    def __init__(self, phi, sign):
        self.phi, self.sign = phi, sign

    def __call__(self, alpha):
        v = self.sign * self.phi(alpha)
        return v if v > 0 else v * 0


def split_sign(w: WeightFunctionSpec):
    """Return ``(w_plus, w_minus)`` with ``w = w_plus - w_minus``, both nonnegative.

    A nonnegative weight (no ``breakpoints``) returns ``(w, None)``.  The
    sign-change locations in ``w.breakpoints`` are kept on both parts so that
    integration can split there.
    """
    if w.kind == "multiterm":
        pos = [(a, c) for a, c in zip(w.orders, w.coefficients) if c > 0]
        neg = [(a, -c) for a, c in zip(w.orders, w.coefficients) if c < 0]
        plus = multiterm(*zip(*pos), name=w.name + "+") if pos else None
        minus = multiterm(*zip(*neg), name=w.name + "-") if neg else None
        return plus, minus
    if not w.breakpoints:
        return w, None
    plus = WeightFunctionSpec(w.name + "+", _Part(w.phi, 1), w.alpha_max, support=w.support, breakpoints=w.breakpoints)
    minus = WeightFunctionSpec(w.name + "-", _Part(w.phi, -1), w.alpha_max, support=w.support, breakpoints=w.breakpoints)
    return plus, minus


# -- kernels ----------------------------------------------------------------


@dataclass
class DOKernel:
    """Memory kernel ``K_i`` of a weight on the sub-interval ``(i-1, i)``.

    Setting ``rule`` (an open quadrature rule on ``(i-1, i)``) selects the
    discrete mode; multi-term weights are always discrete.
    """

    weight: WeightFunctionSpec
    index: int
    rule: QuadratureRule | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if not 1 <= self.index <= self.weight.alpha_max:
            raise ConfigError(f"kernel index {self.index} outside 1..{self.weight.alpha_max}")
        if self.rule is not None:
            lo, hi = self.rule.interval
            i = self.index
            if abs(lo - (i - 1)) > 1e-14 or abs(hi - i) > 1e-14:
                raise ConfigError(f"rule interval {self.rule.interval} is not ({i - 1}, {i})")
            if any(not (i - 1 < float(x) < i) for x in self.rule.nodes):
                raise ConfigError("fixed-rule nodes must lie strictly inside the interval")

    @property
    def discrete(self) -> bool:
        return self.rule is not None or self.weight.kind == "multiterm"

    @property
    def identifier(self) -> str:
        mode = "cont"
        if self.weight.kind == "multiterm":
            mode = "multiterm"
        elif self.rule is not None:
            mode = f"{self.rule.family}{len(self.rule)}"
        return f"{self.weight.name}|i={self.index}|{mode}"

    @property
    def interval(self):
        """Integration range over the order: (i-1, i) intersected with the support."""
        lo, hi = self.weight.support
        return max(lo, self.index - 1.0), min(hi, float(self.index))

    @property
    def is_zero(self) -> bool:
        if self.weight.kind == "multiterm":
            return not self.terms(None)
        lo, hi = self.interval
        return not lo < hi

    def terms(self, precision):
        """Discrete mode: list of (order, coefficient) with coefficient = gamma_k phi(a_k)."""
        key = ("terms", precision)
        if key not in self._cache:
            i = self.index
            if self.weight.kind == "multiterm":
                out = [(a, c) for a, c in zip(self.weight.orders, self.weight.coefficients) if i - 1 < a < i]
                if precision is not None:
                    out = [(mpcore.mpf(a, precision), mpcore.mpf(c, precision)) for a, c in out]
            else:
                rule = self.rule
                if precision is None:
                    out = [(float(a), float(g) * self.weight(float(a))) for a, g in zip(rule.nodes, rule.weights)]
                else:
                    with mpcore.workprec(precision):
                        # rule nodes are recomputed at the working precision
                        hp = gauss_nodes(rule.family, len(rule), rule.interval, precision, **rule.params)
                        out = [(a, g * self.weight(a)) for a, g in zip(hp.nodes, hp.weights)]
            self._cache[key] = out
        return self._cache[key]

    def _coef(self, alpha, bits):
        """phi(a) / Gamma(i-a), memoised per node."""
        key = ("coef", bits, alpha)
        val = self._cache.get(key)
        if val is None:
            val = self.weight(alpha) / _gamma(self.index - alpha)
            self._cache[key] = val
        return val

    def _phi(self, alpha, bits):
        key = ("phi", bits, alpha)
        val = self._cache.get(key)
        if val is None:
            val = self.weight(alpha)
            self._cache[key] = val
        return val


def _split_points(kernel):
    lo, hi = kernel.interval
    pts = [lo] + [b for b in kernel.weight.breakpoints if lo < b < hi] + [hi]
    return list(zip(pts[:-1], pts[1:]))


def eval_kernel(K: DOKernel, t, abs_tol: float = 1e-30, precision: int | None = None):
    """Value of ``K_i(t)`` for ``t > 0``.

    Discrete kernels are finite sums; continuous kernels integrate over the
    order adaptively to ``abs_tol``.  ``precision=None`` works in doubles.
    """
    if not t > 0:
        raise DomainError(f"kernel is singular at t <= 0 (t={t})")
    i = K.index
    if precision is None:
        t = float(t)
        if K.discrete:
            return math.fsum(c * t ** (i - a - 1) / math.gamma(i - a) for a, c in K.terms(None))
        total = 0.0
        for lo, hi in _split_points(K):
            total += integrate_adaptive(
                lambda a: K._coef(a, None) * t ** (i - a - 1), lo, hi, max(abs_tol, 1e-15)
            )
        return total
    with mpcore.workprec(precision):
        t = mpfr(t)
        if K.discrete:
            acc = mpfr(0)
            for a, c in K.terms(precision):
                acc += c * t ** (i - a - 1) / mpcore.gamma(i - a, precision)
            return acc
        logt = gmpy2.log(t)
        acc = mpfr(0)
        for lo, hi in _split_points(K):
            acc += integrate_adaptive(
                lambda a: K._coef(a, precision) * gmpy2.exp((i - a - 1) * logt),
                lo, hi, abs_tol, precision=precision,
            )
        return acc


def eval_kernel_antiderivative(K: DOKernel, t, abs_tol: float = 1e-30, precision: int = 256):
    """``int_0^t K(tau) dtau = int phi(a) t^(i-a) / Gamma(i-a+1) da`` (big floats)."""
    if not t > 0:
        raise DomainError("antiderivative needs t > 0")
    i = K.index
    with mpcore.workprec(precision):
        t = mpfr(t)
        logt = gmpy2.log(t)
        if K.discrete:
            acc = mpfr(0)
            for a, c in K.terms(precision):
                acc += c * gmpy2.exp((i - a) * logt) / mpcore.gamma(i - a + 1, precision)
            return acc
        acc = mpfr(0)
        for lo, hi in _split_points(K):
            # phi/Gamma(i-a+1) = coef/(i-a)
            acc += integrate_adaptive(
                lambda a: K._coef(a, precision) / (i - a) * gmpy2.exp((i - a) * logt),
                lo, hi, abs_tol, precision=precision,
            )
        return acc


def eval_laplace(K: DOKernel, s, aaa_tol: float = 1e-40, precision: int | None = None, abs_tol=None):
    """Laplace transform ``L[K_i](s) = int phi(a) s^(a-i) da`` for ``Re(s) > 0``.

    Continuous mode integrates with absolute tolerance ``1e-10 * aaa_tol``
    (override with ``abs_tol``); discrete mode sums exactly.  ``s`` may be
    real or complex; ``precision=None`` works in doubles.
    """
    re = s.real if hasattr(s, "real") else s
    if not re > 0:
        raise DomainError(f"Laplace transform needs Re(s) > 0 (s={s})")
    i = K.index
    tol = abs_tol if abs_tol is not None else 1e-10 * aaa_tol
    if precision is None:
        s = complex(s) if isinstance(s, (complex, mpc)) else float(s)
        cm = isinstance(s, complex)
        logs = np.log(s) if cm else math.log(s)
        if K.discrete:
            return sum(c * np.exp((a - i) * logs) for a, c in K.terms(None))
        total = 0.0
        for lo, hi in _split_points(K):
            f = (lambda a: K._phi(a, None) * np.exp((a - i) * logs))
            if cm:
                re_ = integrate_adaptive(lambda a: f(a).real, lo, hi, max(tol, 1e-15))
                im_ = integrate_adaptive(lambda a: f(a).imag, lo, hi, max(tol, 1e-15))
                total += complex(re_, im_)
            else:
                total += integrate_adaptive(f, lo, hi, max(tol, 1e-15))
        return total
    with mpcore.workprec(precision):
        s = mpc(s) if isinstance(s, (complex, mpc)) else mpfr(s)
        logs = gmpy2.log(s)
        exp = gmpy2.exp
        if K.discrete:
            acc = s * 0
            for a, c in K.terms(precision):
                acc += c * exp((a - i) * logs)
            return acc
        acc = s * 0
        for lo, hi in _split_points(K):
            acc += integrate_adaptive(
                lambda a: K._phi(a, precision) * exp((a - i) * logs), lo, hi, tol, precision=precision
            )
        return acc


def kernels_for(weight: WeightFunctionSpec, rule_family: str | None = None, rule_size: int = 0):
    """All nonzero kernels ``K_1 .. K_alpha_max`` of ``weight``.

    With ``rule_family`` set, each kernel uses a fixed rule of ``rule_size``
    nodes on its sub-interval (discrete mode).
    """
    out = []
    for i in range(1, weight.alpha_max + 1):
        rule = None
        if rule_family is not None and weight.kind != "multiterm":
            rule = gauss_nodes(rule_family, rule_size, (i - 1.0, float(i)))
        k = DOKernel(weight, i, rule)
        if not k.is_zero:
            out.append(k)
    return out


class KernelSampler:
    """Fast repeated evaluation of ``K_i`` and its antiderivative on a t-range.

    Continuous kernels are discretised once by a composite Kronrod rule in
    the order variable whose panels are the union of the adaptive panels
    needed at both ends (and the log-midpoint) of ``t_range``; since
    ``t^(-a)`` is monotone in ``|log t|`` these bracket every t in between.
    Discrete kernels use their exact terms.  All values are mpfr.
    """

    def __init__(self, K: DOKernel, t_range=(1e-5, 1.0), abs_tol=1e-40, precision: int = 256, order: int = 15):
        from .quadrature import kronrod_reference

        self.kernel = K
        self.precision = precision
        i = K.index
        with mpcore.workprec(precision):
            if K.discrete:
                terms = K.terms(precision)
                self.alpha = np.array([a for a, _ in terms], dtype=object)
                self.coef = np.array([c / mpcore.gamma(i - a, precision) for a, c in terms], dtype=object)
                self.error_bound = mpfr(0)
            else:
                t_lo, t_hi = (mpfr(t) for t in t_range)
                probes = [t_lo, t_hi, gmpy2.sqrt(t_lo * t_hi)]
                cuts = set()
                for lo, hi in _split_points(K):
                    cuts.update((mpfr(lo), mpfr(hi)))
                    for t in probes:
                        logt = gmpy2.log(t)
                        res = integrate_adaptive(
                            lambda a: K._coef(a, precision) * gmpy2.exp((i - a - 1) * logt),
                            lo, hi, abs_tol, precision=precision, order=order, full_output=True,
                        )
                        for a, b in res.panels:
                            cuts.update((a, b))
                cuts = sorted(cuts)
                xk, wk, _ = kronrod_reference(order, precision + 16)
                alpha, coef = [], []
                breaks = {mpfr(x) for pair in _split_points(K) for x in pair}
                for a, b in zip(cuts[:-1], cuts[1:]):
                    if any(a < x < b for x in breaks):
                        continue
                    half, mid = (b - a) / 2, (b + a) / 2
                    for x, w in zip(xk, wk):
                        al = mid + half * x
                        alpha.append(al)
                        coef.append(half * w * K._coef(al, precision))
                self.alpha = np.array(alpha, dtype=object)
                self.coef = np.array(coef, dtype=object)
                self.expo = np.array([i - a - 1 for a in self.alpha], dtype=object)
                # a-posteriori check against fresh adaptive values at the probes
                errs = [abs(self.value(t) - eval_kernel(K, t, abs_tol, precision)) for t in probes]
                self.error_bound = max(errs)
            self.expo = np.array([i - a - 1 for a in self.alpha], dtype=object)

    def value(self, t):
        with mpcore.workprec(self.precision):
            logt = gmpy2.log(mpfr(t))
            return sum((c * gmpy2.exp(e * logt) for c, e in zip(self.coef, self.expo)), mpfr(0))

    def antiderivative(self, t):
        """``int_0^t K`` from the same nodes (coefficient / (i - a))."""
        with mpcore.workprec(self.precision):
            logt = gmpy2.log(mpfr(t))
            return sum(
                (c / (e + 1) * gmpy2.exp((e + 1) * logt) for c, e in zip(self.coef, self.expo)), mpfr(0)
            )
