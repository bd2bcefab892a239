"""Arbitrary-precision arithmetic helpers, special functions and dense kernels.

Big reals and complexes are plain ``gmpy2.mpfr`` / ``gmpy2.mpc`` values; vectors
and matrices are numpy object arrays holding them.  Precision is given in
mantissa bits and applied through :func:`workprec`.

Every routine that accepts arrays also works on float64/complex128 arrays
("double mode") unless its docstring says otherwise.
"""

from __future__ import annotations

import contextlib
import functools
import math

import gmpy2
import numpy as np
from gmpy2 import mpc, mpfr

from .errors import DomainError, NumericalError

DEFAULT_PRECISION = 512
LOW_PRECISION = 256


def precision_for_tolerance(tol: float) -> int:
    """Default mantissa size for an AAA tolerance: 512 bits below 1e-30, else 256."""
    return DEFAULT_PRECISION if tol <= 1e-30 else LOW_PRECISION


@contextlib.contextmanager
def workprec(bits: int):
    """Temporarily set the gmpy2 working precision to ``bits``."""
    if bits < 2:
        raise DomainError(f"precision must be at least 2 bits, got {bits}")
    with gmpy2.context(gmpy2.get_context(), precision=int(bits)) as ctx:
        yield ctx


def current_precision() -> int:
    return gmpy2.get_context().precision


def mpf(x, precision: int | None = None) -> mpfr:
    """Convert ``x`` (int, float, str, Fraction, mpfr) to an mpfr value."""
    bits = precision or current_precision()
    if hasattr(x, "numerator") and hasattr(x, "denominator") and not isinstance(x, (int, float)):
        with workprec(bits):
            return mpfr(x.numerator) / mpfr(x.denominator)
    return mpfr(x, bits)


def mpfarray(values, precision: int | None = None) -> np.ndarray:
    """Object array of mpfr values (shape preserved)."""
    arr = np.asarray(values, dtype=object)
    out = np.empty(arr.shape, dtype=object)
    for idx, v in np.ndenumerate(arr):
        out[idx] = mpf(v, precision)
    return out


def mpcarray(values, precision: int | None = None) -> np.ndarray:
    bits = precision or current_precision()
    arr = np.asarray(values, dtype=object)
    out = np.empty(arr.shape, dtype=object)
    with workprec(bits):
        for idx, v in np.ndenumerate(arr):
            if isinstance(v, mpc):
                out[idx] = mpc(v)
            else:
                c = complex(v) if not isinstance(v, mpfr) else v
                out[idx] = mpc(c)
    return out


def to_float(x) -> float:
    """Round a big real to the nearest double."""
    return float(x)


def to_float_array(arr) -> np.ndarray:
    arr = np.asarray(arr, dtype=object)
    if any(isinstance(v, mpc) for v in arr.flat):
        return np.array([complex(v) for v in arr.flat], dtype=complex).reshape(arr.shape)
    return np.array([float(v) for v in arr.flat], dtype=float).reshape(arr.shape)


def is_big(arr) -> bool:
    """True for object arrays (big-float mode)."""
    return np.asarray(arr).dtype == object


# -- Gamma function ---------------------------------------------------------


@functools.lru_cache(maxsize=16)
def _spouge(bits: int):
    # (2*pi)^-(a+1/2) < 2^-bits; sum has large alternating terms, hence wp.
    a = int(math.ceil(bits / math.log2(2 * math.pi))) + 2
    wp = 2 * bits + 64
    with workprec(wp):
        coeffs = [gmpy2.sqrt(2 * gmpy2.const_pi())]
        fact = mpfr(1)
        for k in range(1, a):
            if k > 1:
                fact *= k - 1
            term = (mpfr(a - k) ** (mpfr(k) - mpfr("0.5"))) * gmpy2.exp(mpfr(a - k)) / fact
            coeffs.append(term if k % 2 == 1 else -term)
    return a, wp, tuple(coeffs)


def gamma(x, precision: int | None = None) -> mpfr:
    """Gamma function for positive real ``x`` via Spouge's approximation.

    The number of Spouge terms is chosen so that the truncation error is below
    ``2**-precision``; the series is summed at roughly twice that precision,
    which absorbs its cancellation.  The result carries ``precision`` bits
    and is accurate to a few units in the last place.
    """
    bits = precision or current_precision()
    a, wp, coeffs = _spouge(bits)
    with workprec(wp):
        xv = mpfr(x)
        if not xv > 0:
            raise DomainError(f"gamma needs a positive argument, got {x}")
        scale = mpfr(1)
        # Spouge needs Re(z) > 0 with x = z + 1.
        if xv < 1:
            scale = 1 / xv
            xv = xv + 1
        z = xv - 1
        total = coeffs[0]
        for k in range(1, a):
            total += coeffs[k] / (z + k)
        za = z + a
        val = gmpy2.exp((z + mpfr("0.5")) * gmpy2.log(za) - za) * total * scale
    return mpfr(val, bits)


# -- dense linear algebra ---------------------------------------------------


def _zero_like(x):
    return x * 0


def _conj(arr):
    if arr.dtype == object:
        return np.array([v.conjugate() for v in arr.flat], dtype=object).reshape(arr.shape)
    return np.conj(arr)


def lu_factor(M):
    """LU factorization with partial pivoting; returns (LU, perm).

    Works for float, complex and object (mpfr/mpc) matrices.
    """
    A = np.array(M, dtype=np.asarray(M).dtype, copy=True)
    n, k = A.shape
    if n != k:
        raise DomainError("lu_factor needs a square matrix")
    perm = np.arange(n)
    for j in range(n):
        col = [abs(A[i, j]) for i in range(j, n)]
        p = j + int(np.argmax(col))
        if not col[p - j] > 0:
            raise NumericalError("singular matrix in lu_factor", column=j)
        if p != j:
            A[[j, p]] = A[[p, j]]
            perm[[j, p]] = perm[[p, j]]
        A[j + 1 :, j] = A[j + 1 :, j] / A[j, j]
        A[j + 1 :, j + 1 :] = A[j + 1 :, j + 1 :] - np.outer(A[j + 1 :, j], A[j, j + 1 :])
    return A, perm


def lu_solve(factors, rhs):
    LU, perm = factors
    b = np.asarray(rhs)
    dtype = object if (LU.dtype == object or b.dtype == object) else np.result_type(LU, b)
    x = np.array(b[perm], dtype=dtype, copy=True)
    n = LU.shape[0]
    for i in range(1, n):
        x[i] = x[i] - LU[i, :i] @ x[:i]
    for i in range(n - 1, -1, -1):
        if i + 1 < n:
            x[i] = x[i] - LU[i, i + 1 :] @ x[i + 1 :]
        x[i] = x[i] / LU[i, i]
    return x


def solve_dense(M, rhs):
    """Solve ``M x = rhs`` by LU with partial pivoting.

    ``rhs`` may be a vector or a matrix of right-hand sides.  The residual
    satisfies ``|M x - rhs| <= |M| |x| n u`` with ``u`` the unit roundoff of
    the working precision.
    """
    factors = lu_factor(M)
    return lu_solve(factors, rhs)


def inverse(M):
    n = np.asarray(M).shape[0]
    eye = np.eye(n)
    if np.asarray(M).dtype == object:
        eye = mpfarray(eye)
    return solve_dense(M, eye)


def cholesky(G):
    """Upper Cholesky factor R with ``R^H R = G`` (G Hermitian positive definite)."""
    G = np.asarray(G)
    n = G.shape[0]
    R = np.zeros((n, n), dtype=G.dtype)
    if G.dtype == object:
        R[:, :] = _zero_like(G[0, 0])
    for k in range(n):
        col = R[:k, k]
        d = G[k, k] - (np.dot(_conj(col), col) if k else 0)
        if isinstance(d, (mpc, complex, np.complexfloating)):
            d = d.real
        if not d > 0:
            raise NumericalError("matrix not numerically positive definite", pivot=k)
        rkk = gmpy2.sqrt(d) if G.dtype == object else math.sqrt(d)
        R[k, k] = rkk
        if k + 1 < n:
            row = G[k, k + 1 :]
            if k:
                row = row - np.dot(_conj(col), R[:k, k + 1 :])
            R[k, k + 1 :] = row / rkk
    return R


def solve_upper(R, b):
    """Back substitution for upper-triangular ``R``."""
    n = R.shape[0]
    x = np.array(b, dtype=object if R.dtype == object else np.result_type(R, b), copy=True)
    for i in range(n - 1, -1, -1):
        if i + 1 < n:
            x[i] = x[i] - np.dot(R[i, i + 1 :], x[i + 1 :])
        x[i] = x[i] / R[i, i]
    return x


def solve_upper_h(R, b):
    """Forward substitution for ``R^H y = b`` with upper-triangular ``R``."""
    n = R.shape[0]
    Rh = _conj(R).T
    y = np.array(b, dtype=object if R.dtype == object else np.result_type(R, b), copy=True)
    for i in range(n):
        if i:
            y[i] = y[i] - np.dot(Rh[i, :i], y[:i])
        y[i] = y[i] / Rh[i, i]
    return y


def norm2(v):
    """Euclidean norm of a vector (object or numeric)."""
    v = np.asarray(v)
    if v.dtype == object:
        s = sum((abs(x) ** 2 for x in v.flat), _zero_like(abs(v.flat[0])))
        return gmpy2.sqrt(s)
    return float(np.linalg.norm(v))


def jacobi_svd(M, precision: int | None = None, tol=None, max_sweeps: int = 80, v0=None):
    """Singular values and right singular vectors by one-sided Jacobi.

    Parameters
    ----------
    M : array_like, shape (rows, cols), rows >= cols
        Real or complex matrix; converted to big floats at ``precision``.
    precision : int, optional
        Mantissa bits (defaults to the current context precision).
    tol : optional
        Orthogonality threshold for column pairs; defaults to ``8 * rows * 2**-precision``,
        the rounding level of a length-``rows`` inner product.
    max_sweeps : int
        Sweep cap; exceeding it raises :class:`NumericalError`.
    v0 : array_like, optional
        Orthonormal starting basis (warm start); the iteration then runs on ``M @ v0``.

    Returns
    -------
    sigma : object array
        Singular values in descending order.
    V : object array, shape (cols, cols)
        Right singular vectors as columns, ordered like ``sigma``.
    """
    bits = precision or current_precision()
    A = np.asarray(M)
    rows, cols = A.shape
    if rows < cols:
        raise DomainError(f"jacobi_svd needs rows >= cols, got {A.shape}")
    with workprec(bits):
        is_complex = A.dtype.kind == "c" or any(isinstance(v, (mpc, complex)) for v in A.flat)
        conv = mpcarray if is_complex else mpfarray
        X = conv(A, bits)
        if v0 is None:
            V = conv(np.eye(cols), bits)
        else:
            V = conv(np.asarray(v0), bits)
            X = X.dot(V)
        eps = mpfr(2) ** (-bits)
        thresh = mpfr(tol) if tol is not None else 8 * eps * max(rows, 1)
        zero = mpfr(0)

        def dot(u, w):
            return np.dot(_conj(u), w) if is_complex else np.dot(u, w)

        norms = [abs(dot(X[:, j], X[:, j])) for j in range(cols)]
        for sweep in range(max_sweeps):
            rotated = 0
            for p in range(cols - 1):
                for q in range(p + 1, cols):
                    a, b = norms[p], norms[q]
                    if a == zero or b == zero:
                        continue
                    g = dot(X[:, p], X[:, q])
                    ag = abs(g)
                    if ag <= thresh * gmpy2.sqrt(a * b):
                        continue
                    rotated += 1
                    xq, vq = X[:, q].copy(), V[:, q].copy()
                    if is_complex:
                        # rephase column q so that the pair's inner product is real
                        phase = (g / ag).conjugate()
                        xq = xq * phase
                        vq = vq * phase
                        g = ag
                    zeta = (b - a) / (2 * g)
                    t = 1 / (abs(zeta) + gmpy2.sqrt(1 + zeta * zeta))
                    if zeta < 0:
                        t = -t
                    c = 1 / gmpy2.sqrt(1 + t * t)
                    s = c * t
                    xp = X[:, p].copy()
                    X[:, p] = c * xp - s * xq
                    X[:, q] = s * xp + c * xq
                    vp = V[:, p].copy()
                    V[:, p] = c * vp - s * vq
                    V[:, q] = s * vp + c * vq
                    norms[p] = a - t * g
                    norms[q] = b + t * g
            if rotated == 0:
                break
            norms = [abs(dot(X[:, j], X[:, j])) for j in range(cols)]
        else:
            raise NumericalError(
                f"jacobi_svd did not converge in {max_sweeps} sweeps",
                sweeps=max_sweeps,
                last_rotations=rotated,
            )
        sigma = np.array([gmpy2.sqrt(abs(dot(X[:, j], X[:, j]))) for j in range(cols)], dtype=object)
        order = sorted(range(cols), key=lambda j: sigma[j], reverse=True)
        return sigma[order], V[:, order]
