"""Exponential-sum compression of memory kernels.

Pipeline: sample ``f(s) = s L[K](s)`` on a support set, fit a barycentric
rational ``r`` with the AAA algorithm in big-float arithmetic, find its poles,
and read off ``r(s)/s = sum_j w_j / (s + lambda_j)``; the inverse Laplace
transform is then ``K~(t) = sum_j w_j exp(-lambda_j t)``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import gmpy2
import numpy as np
from gmpy2 import mpc, mpfr

from . import __version__, mpcore
from .errors import AccuracyError, ConditioningError, DomainError, NumericalError, ValidationError
from .kernels import DOKernel, eval_laplace

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
IMAG_TOL = 1e-30
L1_INTERVAL = (1e-5, 1.0)


# -- support set ----------------------------------------------------------------


@dataclass(frozen=True)
class SupportSet:
    """Sample abscissae for AAA.

    The default is ``{10^(j/25)} U {10^8 - 10^(j/25)}`` for ``j = 0..200``,
    which contains ``s = 0`` (from ``j = 200`` in the second family).
    ``points`` overrides the generator with an explicit sequence.
    """

    per_decade: int = 25
    decades: int = 8
    points: tuple | None = None

    def values(self, precision: int):
        """Sorted, deduplicated sample points as mpfr values."""
        with mpcore.workprec(precision):
            if self.points is not None:
                pts = [mpcore.mpf(p, precision) for p in self.points]
            else:
                top = mpfr(10) ** self.decades
                n = self.per_decade * self.decades
                first = [mpfr(10) ** (mpfr(j) / self.per_decade) for j in range(n + 1)]
                first[-1] = top
                first[0] = mpfr(1)
                pts = first + [top - x for x in first]
            pts = sorted(set(pts))
            if pts[0] < 0:
                raise DomainError("support points must be nonnegative")
            return np.array(pts, dtype=object)

    @property
    def key(self) -> str:
        if self.points is not None:
            return "explicit:" + ",".join(repr(float(p)) for p in self.points)
        return f"log:{self.per_decade}:{self.decades}"


# -- barycentric rational ---------------------------------------------------------


@dataclass
class BarycentricRational:
    """``r(s) = sum w_k f_k/(s - z_k) / sum w_k/(s - z_k)`` in big floats."""

    support: np.ndarray
    values: np.ndarray
    weights: np.ndarray
    precision: int
    converged: bool = True
    max_error: object = None
    scale: object = None
    history: list = field(default_factory=list)

    def __len__(self):
        return len(self.support)

    @property
    def degree(self) -> int:
        return len(self.support) - 1

    def __call__(self, s):
        with mpcore.workprec(self.precision):
            for zk, fk in zip(self.support, self.values):
                if s == zk:
                    return fk
            c = np.array([1 / (s - zk) for zk in self.support], dtype=object)
            return np.dot(c, self.weights * self.values) / np.dot(c, self.weights)

    def numerator(self, s):
        with mpcore.workprec(self.precision):
            return sum(w * f / (s - z) for z, f, w in zip(self.support, self.values, self.weights))

    def denominator(self, s):
        with mpcore.workprec(self.precision):
            return sum(w / (s - z) for z, w in zip(self.support, self.weights))


def _orthonormalize(Y):
    """Modified Gram-Schmidt (twice) on the columns of an object matrix."""
    Y = Y.copy()
    k = Y.shape[1]
    for _ in range(2):
        for j in range(k):
            for i in range(j):
                Y[:, j] = Y[:, j] - np.dot(Y[:, i], Y[:, j]) * Y[:, i]
            Y[:, j] = Y[:, j] / mpcore.norm2(Y[:, j])
    return Y


def _smallest_vector(G, L, guess, bits, block=4, max_iter=80):
    """Smallest right singular vector of the Loewner matrix ``L`` with Gram ``G``.

    Block inverse iteration with the Cholesky factor of ``G``; the Ritz step
    runs the Jacobi SVD on ``R Y`` so that no squared quantity enters the
    final extraction.  Falls back to a full Jacobi SVD of ``L``.
    """
    m = G.shape[0]
    if m == 1:
        return np.array([mpfr(1)], dtype=object)
    try:
        R = mpcore.cholesky(G)
    except NumericalError:
        log.debug("Gram matrix not positive definite at m=%d; full SVD fallback", m)
        _, V = mpcore.jacobi_svd(L, precision=bits)
        return V[:, -1]
    b = min(block, m)
    rng = np.random.default_rng(m)
    Y = mpcore.mpfarray(rng.standard_normal((m, b)), bits)
    Y[:, 0] = guess
    if b > 1:
        Y[:, 1] = mpcore.mpfarray(np.eye(m)[:, -1], bits)
    Y = _orthonormalize(Y)
    target = mpfr(2) ** (-(int(bits * 0.9)))
    x_old = None
    for _ in range(max_iter):
        Y = mpcore.solve_upper(R, mpcore.solve_upper_h(R, Y))
        Y = _orthonormalize(Y)
        _, V = mpcore.jacobi_svd(R @ Y, precision=bits)
        x = Y @ V[:, -1]
        if x_old is not None:
            if np.dot(x, x_old) < 0:
                x = -x
            if mpcore.norm2(x - x_old) <= target:
                return x
        x_old = x
    log.debug("inverse iteration stopped at the cap (m=%d)", m)
    return x


def aaa(
    z,
    f,
    rel_tol: float,
    precision: int | None = None,
    max_terms: int = 200,
    stagnation: int = 5,
) -> BarycentricRational:
    """AAA rational approximation of samples ``f`` at real points ``z``.

    Greedy: each step adds the sample with the largest residual as a support
    point and takes the weights from the smallest right singular vector of
    the Loewner matrix.  Stops when ``max|f - r| <= rel_tol * max|f|`` over
    the non-support samples.  If the maximal residual fails to improve for
    ``stagnation`` consecutive steps, or ``max_terms`` is reached, the best
    iterate is returned with ``converged=False``.
    """
    if not 1e-50 <= rel_tol < 1e-3:
        raise DomainError(f"rel_tol {rel_tol} outside [1e-50, 1e-3)")
    bits = precision or mpcore.precision_for_tolerance(rel_tol)
    with mpcore.workprec(bits):
        Z = mpcore.mpfarray(z, bits)
        F = mpcore.mpfarray(f, bits)
        M = len(Z)
        if any(not gmpy2.is_finite(v) for v in F):
            raise DomainError("AAA samples must be finite")
        fmax = max(abs(v) for v in F)
        stop = rel_tol * fmax
        zero = mpfr(0)
        remaining = np.ones(M, dtype=bool)
        support = []
        C = np.empty((M, 0), dtype=object)
        L = np.empty((M, 0), dtype=object)
        G = np.empty((0, 0), dtype=object)
        mean = sum(F) / M
        resid = np.array([abs(v - mean) for v in F], dtype=object)
        w = np.empty(0, dtype=object)
        best = None
        since_best = 0
        history = []
        while True:
            cand = np.where(remaining)[0]
            if len(cand) == 0:
                raise AccuracyError("AAA exhausted the support set", estimate=float(history[-1]) if history else None)
            k = int(cand[np.argmax([resid[j] for j in cand])])
            support.append(k)
            remaining[k] = False
            # the new support row leaves the least-squares problem
            row = L[k, :].copy() if L.shape[1] else None
            if row is not None:
                G = G - np.outer(row, row)
                L[k, :] = zero
            zk, fk = Z[k], F[k]
            ccol = np.array([1 / (Z[j] - zk) if j != k else zero for j in range(M)], dtype=object)
            lcol = (F - fk) * ccol
            lcol[~remaining] = zero
            C = np.column_stack([C, ccol]) if C.shape[1] else ccol.reshape(M, 1)
            g = L.T @ lcol if L.shape[1] else np.empty(0, dtype=object)
            gkk = np.dot(lcol, lcol)
            m = len(support)
            Gn = np.empty((m, m), dtype=object)
            Gn[: m - 1, : m - 1] = G
            Gn[: m - 1, m - 1] = g
            Gn[m - 1, : m - 1] = g
            Gn[m - 1, m - 1] = gkk
            G = Gn
            L = np.column_stack([L, lcol]) if L.shape[1] else lcol.reshape(M, 1)
            guess = np.concatenate([w, [zero]]) if len(w) else np.array([mpfr(1)], dtype=object)
            if mpcore.norm2(guess) == 0:
                guess[-1] = mpfr(1)
            w = _smallest_vector(G, L[remaining], guess / mpcore.norm2(guess), bits)
            fs = F[support]
            idx = np.where(remaining)[0]
            Cr = C[idx]
            N = Cr @ (w * fs)
            D = Cr @ w
            resid = np.full(M, zero, dtype=object)
            resid[idx] = [abs(F[j] - n / d) for j, n, d in zip(idx, N, D)]
            err = max(resid[idx]) if len(idx) else zero
            history.append(err)
            log.debug("AAA m=%d err/fmax=%.3e", m, float(err / fmax))
            if best is None or err < best[0]:
                best = (err, list(support), w.copy())
                since_best = 0
            else:
                since_best += 1
            done = err <= stop
            if done or since_best >= stagnation or m >= max_terms:
                err, sup, wb = best
                return BarycentricRational(
                    support=Z[sup], values=F[sup], weights=wb, precision=bits,
                    converged=bool(err <= stop), max_error=err, scale=fmax,
                    history=[float(h / fmax) for h in history],
                )


# -- poles and residues -------------------------------------------------------------


def _denominator_terms(r, s):
    c = [1 / (s - zk) for zk in r.support]
    d = sum(wk * ck for wk, ck in zip(r.weights, c))
    dd = -sum(wk * ck * ck for wk, ck in zip(r.weights, c))
    return d, dd, c


def _refine_bracket(r, a, b, da, db, target):
    """Illinois iteration for a sign change of the denominator in [a, b]."""
    side = 0
    for _ in range(400):
        x = (a * db - b * da) / (db - da)
        dx = r.denominator(x)
        if dx == 0:
            return x, True
        if (dx > 0) == (db > 0):
            b, db = x, dx
            if side == -1:
                da = da / 2
            side = -1
        else:
            a, da = x, dx
            if side == 1:
                db = db / 2
            side = 1
        if abs(b - a) <= target * abs(x):
            break
    # Newton polish
    x = (a * db - b * da) / (db - da)
    for _ in range(4):
        d, dd, _c = _denominator_terms(r, x)
        if dd == 0:
            break
        x = x - d / dd
    return x, abs(b - a) <= 4 * target * abs(x)


def _aberth(r, guesses, fixed, target, max_iter):
    """Aberth iteration for the remaining roots, deflating ``fixed`` roots."""
    P = list(guesses)
    n = len(P)
    done = [False] * n
    for _ in range(max_iter):
        for j in range(n):
            if done[j]:
                continue
            p = P[j]
            d, dd, c = _denominator_terms(r, p)
            if d == 0:
                done[j] = True
                continue
            ld = dd / d + sum(c) - sum(1 / (p - q) for q in fixed)
            newton = 1 / ld
            others = sum(1 / (p - P[i]) for i in range(n) if i != j)
            step = newton / (1 - newton * others)
            P[j] = p - step
            if abs(step) <= target * abs(P[j]):
                done[j] = True
        if all(done):
            break
    return P, [not x for x in done]


def poles(r: BarycentricRational, decades=(-24, 24), per_decade: int = 100, max_iter: int = 500):
    """Poles of ``r``, i.e. roots of ``d(s) = sum w_k/(s - z_k)``, in big floats.

    Real negative poles are bracketed by a sign-change scan of ``d`` on a
    log-spaced grid of the negative axis and refined by Illinois and Newton
    steps.  If fewer than the expected number are found (complex pairs,
    positive or clustered roots), the rest are located by Aberth iteration
    with the known roots deflated.  Returns ``(poles, flags)``; ``flags[j]``
    marks roots whose refinement did not converge.
    """
    m = len(r)
    if m < 2:
        return np.empty(0, dtype=object), np.empty(0, dtype=bool)
    bits = r.precision
    with mpcore.workprec(bits):
        wsum = sum(r.weights)
        wscale = max(abs(w) for w in r.weights)
        # leading coefficient of d(s) * prod(s - z_k); a vanishing sum lowers the degree
        degree = m - 1 if abs(wsum) > wscale * mpfr(2) ** (-(bits // 2)) else m - 2
        target = mpfr(2) ** (-(bits - 16))
        lo, hi = decades
        xs = [-(mpfr(10) ** (mpfr(k) / per_decade)) for k in range(lo * per_decade, hi * per_decade + 1)]
        ds = [r.denominator(x) for x in xs]
        found, flags = [], []
        for a, b, da, db in zip(xs[:-1], xs[1:], ds[:-1], ds[1:]):
            if da == 0:
                found.append(a)
                flags.append(False)
            elif (da > 0) != (db > 0):
                x, ok = _refine_bracket(r, a, b, da, db, target)
                found.append(x)
                flags.append(not ok)
        missing = degree - len(found)
        if missing > 0:
            log.debug("pole scan found %d of %d; Aberth for the rest", len(found), degree)
            rng = np.random.default_rng(degree)
            radii = 10.0 ** rng.uniform(lo / 2, hi / 2, missing)
            angles = rng.uniform(0.2, 2 * math.pi - 0.2, missing)
            guesses = [mpc(complex(R * math.cos(t), R * math.sin(t))) for R, t in zip(radii, angles)]
            extra, bad = _aberth(r, guesses, found, target, max_iter)
            found += extra
            flags += bad
        P = np.array(found, dtype=object)
        flags = np.array(flags, dtype=bool)
        if flags.any():
            log.warning("%d pole(s) failed to refine", int(flags.sum()))
        order = np.argsort([-float(p.real) for p in P])
        return P[order], flags[order]


def residues(r: BarycentricRational, P):
    """Residues ``n(p)/d'(p)`` of ``r`` at the poles ``P``."""
    with mpcore.workprec(r.precision):
        out = []
        for p in P:
            c = [1 / (p - zk) for zk in r.support]
            n = sum(w * f * ck for w, f, ck in zip(r.weights, r.values, c))
            dd = -sum(w * ck * ck for w, ck in zip(r.weights, c))
            out.append(n / dd)
        return np.array(out, dtype=object)


# -- compressed kernels ---------------------------------------------------------


@dataclass
class CompressedKernel:
    """Exponential sum ``K~(t) = sum_j w_j exp(-lambda_j t)`` with provenance.

    Weights and rates are doubles sorted by ascending rate.  ``l1_error`` is
    the certified ``L1`` distance to the exact kernel on ``interval``.
    """

    weights: np.ndarray
    rates: np.ndarray
    kernel_id: str = ""
    tolerance: float = float("nan")
    precision: int = 0
    interval: tuple = L1_INTERVAL
    l1_error: float | None = None
    converged: bool = True
    support_key: str = ""
    meta: dict = field(default_factory=dict)
    exact_terms: list | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.rates = np.asarray(self.rates, dtype=float)
        if self.weights.shape != self.rates.shape:
            raise ValidationError("weights and rates differ in length")

    @property
    def m(self) -> int:
        return len(self.weights)

    def validate(self):
        """Check positivity and the canonical ordering; raises ValidationError."""
        bad = [(j, w, l) for j, (w, l) in enumerate(zip(self.weights, self.rates)) if not (w > 0 and l >= 0)]
        if bad:
            raise ValidationError("non-positive weight or negative rate", offenders=bad)
        if np.any(np.diff(self.rates) <= 0):
            raise ValidationError("rates are not strictly increasing")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.rates))):
            raise ValidationError("non-finite term")
        return self

    def evaluate(self, t):
        """``K~(t)`` for scalar or array ``t`` (double precision)."""
        t = np.asarray(t, dtype=float)
        out = np.exp(-np.multiply.outer(t, self.rates)) @ self.weights
        return out if out.ndim else float(out)

    def laplace(self, s):
        """``L[K~](s) = sum w_j/(s + lambda_j)``."""
        s = np.asarray(s)
        out = (1.0 / np.add.outer(s, self.rates)) @ self.weights
        return out if out.ndim else out.item()

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "kernel_id": self.kernel_id,
            "tolerance": _fmt(self.tolerance),
            "precision_bits": self.precision,
            "interval": [_fmt(x) for x in self.interval],
            "l1_error": None if self.l1_error is None else _fmt(self.l1_error),
            "m": self.m,
            "converged": self.converged,
            "support": self.support_key,
            "terms": [{"w": _fmt(w), "lambda": _fmt(l)} for w, l in zip(self.weights, self.rates)],
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "CompressedKernel":
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise ValidationError(f"unsupported schema_version {doc.get('schema_version')!r}")
        terms = doc["terms"]
        if len(terms) != doc["m"]:
            raise ValidationError("term count does not match m")
        ck = cls(
            weights=[float(t["w"]) for t in terms],
            rates=[float(t["lambda"]) for t in terms],
            kernel_id=doc["kernel_id"],
            tolerance=float(doc["tolerance"]),
            precision=int(doc["precision_bits"]),
            interval=tuple(float(x) for x in doc["interval"]),
            l1_error=None if doc["l1_error"] is None else float(doc["l1_error"]),
            converged=bool(doc.get("converged", True)),
            support_key=doc.get("support", ""),
            meta=doc.get("meta", {}),
        )
        return ck.validate()


def _fmt(x: float) -> str:
    """Decimal string with 17 significant digits (round-trips a double)."""
    return format(float(x), ".17g")


def _l1_mass(w, lam, interval=L1_INTERVAL):
    """``int_0^b |w| exp(-lam t) dt``; the whole history counts, not just the interval."""
    b = interval[1]
    if lam == 0:
        return abs(w) * b
    return abs(w) * -math.expm1(-lam * b) / lam


def partial_fractions(r: BarycentricRational, rel_tol: float | None = None, interval=L1_INTERVAL, kernel_id: str = ""):
    """Exponential sum from ``r(s)/s = r(0)/s + sum_p Res_p/(p (s - p))``.

    Each pole ``p`` gives ``lambda = -p`` and ``w = Res_p / p``; ``s = 0``
    gives ``lambda = 0`` with ``w = r(0)``.  With ``rel_tol`` set, terms whose
    ``L1`` mass on ``(0, interval[1]]`` is below ``1e-3 * rel_tol`` of the total are
    dropped as numerically negligible (this covers the ``lambda = 0`` term
    when the support set contains ``s = 0``, where ``r(0) = f(0) = 0``).

    Raises ValidationError listing offenders for complex, negative-weight or
    negative-rate terms beyond tolerance, and ConditioningError for poles
    closer than ``1e-3`` relative spacing.
    """
    P, flags = poles(r)
    bits = r.precision
    with mpcore.workprec(bits):
        res = residues(r, P)
        terms = []
        for p, rp, flagged in zip(P, res, flags):
            terms.append((rp / p, -p, bool(flagged)))
        terms.append((r(mpfr(0)), mpfr(0), False))
        masses = []
        for w, lam, _ in terms:
            wf, lf = complex(w), complex(lam)
            masses.append(_l1_mass(abs(wf), max(lf.real, 0.0), interval))
        total = sum(masses)
        keep, dropped, offenders = [], [], []
        for (w, lam, flagged), mass in zip(terms, masses):
            if rel_tol is not None and mass <= 1e-3 * rel_tol * total:
                dropped.append((complex(w), complex(lam)))
                continue
            wi = w.imag if isinstance(w, mpc) else 0
            li = lam.imag if isinstance(lam, mpc) else 0
            wr = w.real if isinstance(w, mpc) else w
            lr = lam.real if isinstance(lam, mpc) else lam
            if abs(wi) > IMAG_TOL * abs(w) or abs(li) > IMAG_TOL * max(abs(lam), mpfr(1)) or not wr > 0 or lr < 0:
                offenders.append((complex(w), complex(lam)))
                continue
            keep.append((wr, lr, flagged))
        if offenders:
            raise ValidationError(
                f"{len(offenders)} exponential term(s) are not real with positive weight and nonnegative rate",
                offenders=offenders,
            )
        keep.sort(key=lambda x: x[1])
        lams = [x[1] for x in keep]
        for a, b in zip(lams[:-1], lams[1:]):
            if b - a <= 1e-3 * max(abs(a), abs(b)):
                raise ConditioningError(f"near-multiple poles at {float(a):.6g} and {float(b):.6g}", offenders=[(float(a), float(b))])
        ck = CompressedKernel(
            weights=[float(x[0]) for x in keep],
            rates=[float(x[1]) for x in keep],
            kernel_id=kernel_id,
            tolerance=float(rel_tol) if rel_tol is not None else float("nan"),
            precision=bits,
            interval=tuple(interval),
            converged=r.converged,
            meta={
                "dropped_terms": len(dropped),
                "flagged_poles": int(sum(x[2] for x in keep)),
                "support_points": len(r),
            },
        )
        ck.exact_terms = [(x[0], x[1]) for x in keep]
        # rounding to doubles must not merge two rates
        if np.any(np.diff(ck.rates) <= 0):
            raise ConditioningError("rates coincide after rounding to double precision")
        return ck


# -- L1 certification -----------------------------------------------------------


def _terms(C):
    if isinstance(C, CompressedKernel):
        return [(mpfr(w), mpfr(l)) for w, l in zip(C.weights, C.rates)]
    return [(mpfr(w), mpfr(l)) for w, l in C]


def _exp_sum(T, t):
    """High-precision ``K~(t)`` for a list of (w, lambda) big floats."""
    return sum((w * gmpy2.exp(-l * t) for w, l in T), mpfr(0))


def _exp_sum_antiderivative_diff(T, a, b):
    """``int_a^b K~``."""
    acc = mpfr(0)
    for w, l in T:
        if l == 0:
            acc += w * (b - a)
        else:
            acc += w * (gmpy2.exp(-l * a) - gmpy2.exp(-l * b)) / l
    return acc


def l1_error(K: DOKernel, C, interval=L1_INTERVAL, per_decade: int = 200, precision: int = 256, sampler=None, tolerance=None):
    """Certified ``int_interval |K - K~| dt``.

    Sign changes of ``K - K~`` are located by a log-spaced scan
    (``per_decade`` points per decade) and refined by Illinois steps; on each
    sign-constant piece the integral of the difference is exact in terms of
    the antiderivatives of ``K`` and ``K~``.  The kernel side uses a frozen
    composite Kronrod rule checked against adaptive evaluation.

    ``C`` is a CompressedKernel or a list of ``(w, lambda)`` pairs (big
    floats allowed, e.g. the unrounded terms).
    """
    a, b = interval
    if not 0 < a < b:
        raise DomainError("L1 interval must lie in (0, inf)")
    if tolerance is None:
        tolerance = getattr(C, "tolerance", float("nan"))
    tol = min(1e-18, tolerance * 1e-3) if tolerance == tolerance else 1e-18
    from .kernels import KernelSampler

    S = sampler or KernelSampler(K, interval, abs_tol=tol * 1e-3, precision=precision)
    with mpcore.workprec(precision):
        C = _terms(C)
        a, b = mpfr(a), mpfr(b)
        decades = float(gmpy2.log10(b / a))
        n = max(2, int(math.ceil(decades * per_decade)))
        ts = [a * (b / a) ** (mpfr(k) / n) for k in range(n + 1)]
        ds = [S.value(t) - _exp_sum(C, t) for t in ts]
        cuts = [a]
        for t0, t1, d0, d1 in zip(ts[:-1], ts[1:], ds[:-1], ds[1:]):
            if d0 == 0 or d1 == 0 or (d0 > 0) == (d1 > 0):
                continue
            lo, hi, flo, fhi = t0, t1, d0, d1
            side = 0
            for _ in range(60):
                x = (lo * fhi - hi * flo) / (fhi - flo)
                fx = S.value(x) - _exp_sum(C, x)
                if fx == 0:
                    lo = hi = x
                    break
                if (fx > 0) == (fhi > 0):
                    hi, fhi = x, fx
                    if side == -1:
                        flo /= 2
                    side = -1
                else:
                    lo, flo = x, fx
                    if side == 1:
                        fhi /= 2
                    side = 1
                if hi - lo <= mpfr(2) ** (-100) * hi:
                    break
            cuts.append((lo + hi) / 2)
        cuts.append(b)
        A = [S.antiderivative(t) for t in cuts]
        total = mpfr(0)
        for i in range(len(cuts) - 1):
            total += abs(A[i + 1] - A[i] - _exp_sum_antiderivative_diff(C, cuts[i], cuts[i + 1]))
        bound = float(S.error_bound) * len(cuts)
        if bound > tol:
            log.warning("L1 certification bound %.3e exceeds tolerance %.3e", bound, tol)
        return float(total)


def compensated_rounding(sampler, terms, interval=L1_INTERVAL, points: int = 1500, wulps: int = 2, sweeps: int = 12):
    """Round big-float terms to doubles so that the rounding errors cancel.

    Nearest rounding of ``w_j`` and ``lambda_j`` costs about one unit
    roundoff times ``int |K|`` in ``L1``, which dominates for accurate
    approximations of kernels with large mass.  Here each weight may take
    one of the ``2*wulps`` doubles around its exact value and each rate one
    of its two neighbouring doubles; coordinate descent minimises a
    log-grid ``L1`` proxy of ``K - K~``, starting from nearest rounding.
    Returns ``(weights, rates)`` as float arrays.
    """
    bits = sampler.precision
    a, b = interval
    with mpcore.workprec(bits):
        la, lb = gmpy2.log(mpfr(a)), gmpy2.log(mpfr(b))
        ts = [gmpy2.exp(la + (lb - la) * k / points) for k in range(points + 1)]
        tf = np.array([float(t) for t in ts])
        dt = np.gradient(tf)
        base = np.array([float(sampler.value(t) - _exp_sum(terms, t)) for t in ts])

        def neighbours(x, k):
            lo = float(x)
            if mpfr(lo) > x:
                lo = math.nextafter(lo, -math.inf)
            for _ in range(k - 1):
                lo = math.nextafter(lo, -math.inf)
            out = [lo]
            for _ in range(2 * k - 1):
                out.append(math.nextafter(out[-1], math.inf))
            return out

        options = []
        tables = []
        for w, l in terms:
            wopts, lopts = neighbours(w, wulps), neighbours(l, 1)
            exact = [w * gmpy2.exp(-l * t) for t in ts]
            tbl = {}
            for ld in lopts:
                e = [gmpy2.exp(-mpfr(ld) * t) for t in ts]
                for wd in wopts:
                    tbl[(wd, ld)] = np.array([float(x - mpfr(wd) * y) for x, y in zip(exact, e)])
            tables.append(tbl)
            options.append((float(w), float(l)))

    def proxy(E):
        return float(np.sum(np.abs(E) * dt))

    choice = []
    for (wn, ln), tbl in zip(options, tables):
        choice.append((wn, ln) if (wn, ln) in tbl else min(tbl, key=lambda key: np.abs(tbl[key]).sum()))
    cur = base + sum(tbl[c] for tbl, c in zip(tables, choice))
    best = proxy(cur)
    for _ in range(sweeps):
        improved = False
        for j, tbl in enumerate(tables):
            rest = cur - tbl[choice[j]]
            for key in tbl:
                v = proxy(rest + tbl[key])
                if v < best * (1 - 1e-9):
                    best, choice[j], improved = v, key, True
            cur = rest + tbl[choice[j]]
        if not improved:
            break
    return np.array([c[0] for c in choice]), np.array([c[1] for c in choice])


# -- pipeline -------------------------------------------------------------------


def laplace_samples(K: DOKernel, support: SupportSet, rel_tol: float, precision: int):
    """``(z, s L[K](s))`` on the support set; ``f(0) = 0`` by continuity."""
    Z = support.values(precision)
    with mpcore.workprec(precision):
        F = []
        for s in Z:
            F.append(mpfr(0) if s == 0 else s * eval_laplace(K, s, aaa_tol=rel_tol, precision=precision))
        return Z, np.array(F, dtype=object)


def _refit(Z, F, keep_idx, bits):
    """Weights for a fixed support subset (used after cleanup)."""
    with mpcore.workprec(bits):
        mask = np.ones(len(Z), dtype=bool)
        mask[keep_idx] = False
        Zs, Fs = Z[keep_idx], F[keep_idx]
        L = np.array(
            [[(F[j] - fk) / (Z[j] - zk) for zk, fk in zip(Zs, Fs)] for j in np.where(mask)[0]], dtype=object
        )
        G = L.T @ L
        guess = mpcore.mpfarray(np.ones(len(keep_idx)) / math.sqrt(len(keep_idx)), bits)
        w = _smallest_vector(G, L, guess, bits)
        rows = np.where(mask)[0]
        err = max(abs(F[j] - np.dot(w * Fs, [1 / (Z[j] - z) for z in Zs]) / np.dot(w, [1 / (Z[j] - z) for z in Zs])) for j in rows)
        return w, err


def cleanup(r: BarycentricRational, Z, F, rel_tol: float):
    """One Froissart-doublet pass.

    Poles that are complex, lie in the right half plane, or carry a residue
    below ``1e-2 * rel_tol * max|f|`` are treated as spurious: the support
    point nearest to each is removed and the weights are recomputed.
    Returns ``(r, removed_count)``.
    """
    P, _ = poles(r)
    bits = r.precision
    with mpcore.workprec(bits):
        R = residues(r, P)
        floor = mpfr(1e-2) * rel_tol * r.scale
        spurious = []
        for p, res in zip(P, R):
            pim = p.imag if isinstance(p, mpc) else 0
            pre = p.real if isinstance(p, mpc) else p
            if abs(pim) > IMAG_TOL * abs(p) or pre >= 0 or abs(res) < floor:
                spurious.append(p)
        if not spurious:
            return r, 0
        support = list(r.support)
        drop = set()
        for p in spurious:
            k = min(range(len(support)), key=lambda k: abs(support[k] - p))
            drop.add(k)
        keep_vals = [z for k, z in enumerate(support) if k not in drop]
        index = {z: j for j, z in enumerate(Z)}
        keep_idx = np.array([index[z] for z in keep_vals])
        w, err = _refit(Z, F, keep_idx, bits)
        fmax = r.scale
        log.info("cleanup removed %d support point(s)", len(drop))
        new = BarycentricRational(
            support=Z[keep_idx], values=F[keep_idx], weights=w, precision=bits,
            converged=bool(err <= rel_tol * fmax), max_error=err, scale=fmax, history=r.history,
        )
        return new, len(drop)


def compress(
    K: DOKernel,
    rel_tol: float,
    precision: int | None = None,
    support: SupportSet | None = None,
    interval=L1_INTERVAL,
    certify: bool = True,
    max_terms: int = 200,
) -> CompressedKernel:
    """Full compression pipeline for a kernel with nonnegative weight.

    Laplace samples, AAA on ``s L[K](s)``, a Froissart cleanup pass if any
    pole is spurious, partial fractions, and (with ``certify``) the ``L1``
    certificate.  Deterministic for fixed inputs.
    """
    support = support or SupportSet()
    bits = precision or mpcore.precision_for_tolerance(rel_tol)
    t0 = time.perf_counter()
    Z, F = laplace_samples(K, support, rel_tol, bits)
    t1 = time.perf_counter()
    r = aaa(Z, F, rel_tol, bits, max_terms=max_terms)
    r, removed = cleanup(r, Z, F, rel_tol)
    t2 = time.perf_counter()
    ck = partial_fractions(r, rel_tol, interval, kernel_id=K.identifier)
    ck.support_key = support.key
    ck.meta.update(
        cleanup_removed=removed,
        aaa_iterations=len(r.history),
        aaa_max_rel_error=float(r.max_error / r.scale),
        time_samples=round(t1 - t0, 3),
        time_aaa=round(t2 - t1, 3),
        version=__version__,
    )
    if not r.converged and len(r) >= max_terms:
        log.info("AAA stopped at the %d-term cap for %s", max_terms, K.identifier)
    elif not r.converged:
        log.warning("AAA did not reach %.1e for %s (best %.3e)", rel_tol, K.identifier, float(r.max_error / r.scale))
    ck.validate()
    if certify:
        from .kernels import KernelSampler

        t3 = time.perf_counter()
        tol = min(1e-18, rel_tol * 1e-3)
        sampler = KernelSampler(K, interval, abs_tol=tol * 1e-3, precision=256)
        with mpcore.workprec(256):
            exact = [(mpfr(w, 256), mpfr(l, 256)) for w, l in ck.exact_terms]
        ck.meta["l1_error_unrounded"] = l1_error(K, exact, interval, sampler=sampler, tolerance=rel_tol)
        nearest = ck.l1_error = l1_error(K, ck, interval, sampler=sampler)
        # compensated rounding only pays off once the approximation beats double storage
        if ck.meta["l1_error_unrounded"] < 100 * nearest:
            w, l = compensated_rounding(sampler, exact, interval)
            trial = CompressedKernel(w, l, ck.kernel_id, ck.tolerance, ck.precision, ck.interval)
            trial.validate()
            err = l1_error(K, trial, interval, sampler=sampler)
            if err < nearest:
                ck.weights, ck.rates, ck.l1_error = trial.weights, trial.rates, err
                ck.meta["rounding"] = "compensated"
        ck.meta.setdefault("rounding", "nearest")
        ck.meta["l1_error_nearest_rounding"] = nearest
        ck.meta["time_l1"] = round(time.perf_counter() - t3, 3)
    return ck


# -- persistent cache -------------------------------------------------------------


def cache_key(
    kernel_id: str,
    rel_tol: float,
    precision: int,
    support: SupportSet | None = None,
    max_terms: int = 200,
    certify: bool = True,
) -> str:
    support = support or SupportSet()
    parts = [kernel_id, _fmt(rel_tol), int(precision), support.key]
    # non-default controls extend the key; default keys stay stable
    if max_terms != 200:
        parts.append(f"max_terms={int(max_terms)}")
    if not certify:
        parts.append("uncertified")
    text = json.dumps(parts)
    return hashlib.sha256(text.encode()).hexdigest()[:24]


class KernelCache:
    """Directory of JSON documents, one per compressed kernel.

    Writes go through a temporary file and an atomic rename, so concurrent
    writers never expose a partial document.
    """

    def __init__(self, directory):
        self.directory = Path(directory)
        self.hits = 0
        self.misses = 0

    def path(self, key: str) -> Path:
        return self.directory / f"{key}.json"

    def save(self, C: CompressedKernel, key: str | None = None) -> Path:
        key = key or cache_key(C.kernel_id, C.tolerance, C.precision)
        self.directory.mkdir(parents=True, exist_ok=True)
        target = self.path(key)
        fd, tmp = tempfile.mkstemp(dir=self.directory, suffix=".tmp")
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(C.to_dict(), fh, indent=1)
            fh.write("\n")
        os.replace(tmp, target)
        return target

    def load(self, key: str) -> CompressedKernel | None:
        p = self.path(key)
        if not p.exists():
            self.misses += 1
            return None
        try:
            with open(p, encoding="utf-8") as fh:
                C = CompressedKernel.from_dict(json.load(fh))
        except (ValueError, KeyError, TypeError) as exc:
            log.warning("ignoring corrupt cache entry %s: %s", p, exc)
            self.misses += 1
            return None
        self.hits += 1
        return C


def compress_cached(
    K: DOKernel,
    rel_tol: float,
    precision: int | None = None,
    cache: KernelCache | str | os.PathLike | None = None,
    support: SupportSet | None = None,
    max_terms: int = 200,
    certify: bool = True,
    **kwargs,
):
    """``compress`` with a cache lookup; returns ``(kernel, hit)``."""
    support = support or SupportSet()
    bits = precision or mpcore.precision_for_tolerance(rel_tol)
    if cache is not None and not isinstance(cache, KernelCache):
        cache = KernelCache(cache)
    key = cache_key(K.identifier, rel_tol, bits, support, max_terms, certify)
    if cache is not None:
        C = cache.load(key)
        if C is not None:
            return C, True
    C = compress(K, rel_tol, bits, support=support, max_terms=max_terms, certify=certify, **kwargs)
    if cache is not None:
        cache.save(C, key)
    return C, False


def write_sweep_csv(rows, path):
    """CSV with header ``kernel,tolerance,m,l1_error`` at 17 significant digits."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(["kernel", "tolerance", "m", "l1_error"])
        for kid, tol, m, err in rows:
            wr.writerow([kid, _fmt(tol), int(m), "" if err is None else _fmt(err)])
