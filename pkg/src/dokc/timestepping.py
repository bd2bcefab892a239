"""Implicit Runge-Kutta stepping of the mode system with static condensation.

The system for a state vector of length N reads::

    0 = F(t, v^(0), ..., v^(p), sum_ij v_ij)        p = alpha_max
    d/dt v^(i-1) = v^(i)                            i = 1..p
    d/dt v_ij = -lambda_ij v_ij + w_ij v^(i)

With ``H = h A`` all stage values are affine in the stage derivative
``K = k^(p)`` (shape ``(s, N)``), so one step solves an ``s x N`` problem
for ``K`` whatever the number of modes, followed by linear updates.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.linalg.blas import dgemm

from .errors import ConfigError, DomainError, NumericalError, StepFailure

log = logging.getLogger(__name__)


# -- tableaus -------------------------------------------------------------------


@dataclass(frozen=True)
class ButcherTableau:
    name: str
    A: np.ndarray
    b: np.ndarray
    c: np.ndarray
    order: int
    l_stable: bool = True
    stiffly_accurate: bool = True
    dirk: bool = False

    @property
    def stages(self) -> int:
        return len(self.b)


def make_tableau(scheme: str) -> ButcherTableau:
    """Named L-stable, stiffly accurate tableau.

    ``implicit_euler`` (= ``radau_iia_1``), ``radau_iia_2``, ``radau_iia_3``
    and ``sdirk2`` (Alexander's two-stage scheme, diagonal 1 - 1/sqrt 2).
    """
    if scheme in ("implicit_euler", "radau_iia_1"):
        A = np.array([[1.0]])
        b = np.array([1.0])
        c = np.array([1.0])
        return ButcherTableau(scheme, A, b, c, 1, dirk=True)
    if scheme == "radau_iia_2":
        A = np.array([[5 / 12, -1 / 12], [3 / 4, 1 / 4]])
        b = np.array([3 / 4, 1 / 4])
        c = np.array([1 / 3, 1.0])
        return ButcherTableau(scheme, A, b, c, 3)
    if scheme == "radau_iia_3":
        r6 = math.sqrt(6.0)
        A = np.array(
            [
                [(88 - 7 * r6) / 360, (296 - 169 * r6) / 1800, (-2 + 3 * r6) / 225],
                [(296 + 169 * r6) / 1800, (88 + 7 * r6) / 360, (-2 - 3 * r6) / 225],
                [(16 - r6) / 36, (16 + r6) / 36, 1 / 9],
            ]
        )
        b = A[-1].copy()
        c = np.array([(4 - r6) / 10, (4 + r6) / 10, 1.0])
        return ButcherTableau(scheme, A, b, c, 5)
    if scheme == "sdirk2":
        g = 1.0 - 1.0 / math.sqrt(2.0)
        A = np.array([[g, 0.0], [1.0 - g, g]])
        b = A[-1].copy()
        c = np.array([g, 1.0])
        return ButcherTableau(scheme, A, b, c, 2, dirk=True)
    raise ConfigError(f"unknown scheme {scheme!r}")


SCHEMES = ("implicit_euler", "radau_iia_1", "radau_iia_2", "radau_iia_3", "sdirk2")


# -- meshes ---------------------------------------------------------------------


@dataclass(frozen=True)
class TimeMesh:
    nodes: np.ndarray
    N: int | None = None
    gamma: float | None = None
    T: float | None = None

    def __post_init__(self):
        t = np.asarray(self.nodes, dtype=float)
        if t.ndim != 1 or len(t) < 2 or t[0] != 0.0 or np.any(np.diff(t) <= 0):
            raise DomainError("a time mesh must start at 0 and increase strictly")
        object.__setattr__(self, "nodes", t)

    @property
    def steps(self) -> np.ndarray:
        # uniform meshes get bitwise equal steps so per-h caches are reused
        if self.gamma == 1.0 and self.N is not None and self.T is not None:
            return np.full(self.N, self.T / self.N)
        return np.diff(self.nodes)

    def __len__(self):
        return len(self.nodes)


def graded_mesh(N: int, gamma: float = 1.0, T: float = 1.0) -> TimeMesh:
    """``t_n = (n/N)^gamma T``; ``gamma = 1`` is the uniform mesh."""
    if N < 1:
        raise DomainError("N must be at least 1")
    if gamma < 1:
        raise DomainError("grading factor must be >= 1")
    if not T > 0:
        raise DomainError("T must be positive")
    n = np.arange(N + 1, dtype=float)
    t = (n / N) ** gamma * T
    t[-1] = T
    return TimeMesh(t, N, float(gamma), float(T))


# -- mode families and state ---------------------------------------------------


@dataclass
class ModeFamily:
    """Exponential terms of kernel ``K_index``.

    ``terms`` is a list of ``(weights, rates)`` pairs, one per node group;
    ``groups`` maps each state entry to its group (``None``: one group for
    all entries).  Groups with no terms contribute nothing.
    """

    index: int
    terms: list
    groups: np.ndarray | None = None

    def __post_init__(self):
        self.terms = [(np.asarray(w, dtype=float), np.asarray(l, dtype=float)) for w, l in self.terms]
        for w, l in self.terms:
            if w.shape != l.shape:
                raise ConfigError("weights and rates differ in length")
            if np.any(l < 0):
                raise DomainError("decay rates must be nonnegative")
        if self.groups is not None:
            self.groups = np.asarray(self.groups, dtype=int)
            if self.groups.min() < 0 or self.groups.max() >= len(self.terms):
                raise ConfigError("group index out of range")
        self._members = None

    @classmethod
    def uniform(cls, index, weights, rates):
        return cls(index, [(weights, rates)])

    def members(self, N):
        """Per group: index array of the state entries (or ``slice(None)``)."""
        if self.groups is None:
            return [slice(None)]
        if self._members is None or self._N != N:
            self._members = [np.flatnonzero(self.groups == g) for g in range(len(self.terms))]
            self._N = N
        return self._members

    @property
    def sizes(self):
        return [len(w) for w, _ in self.terms]


@dataclass
class ModeSystemState:
    """Values at one time level.

    ``derivs[i]`` holds ``v^(i)`` (shape ``(p+1, N)``); ``modes[i-1][g]``
    holds the modes of family ``i``, group ``g`` as an ``(m, n_g)`` array.
    """

    t: float
    derivs: np.ndarray
    modes: list
    step: int = 0

    @classmethod
    def initial(cls, values: Sequence, families: Sequence[ModeFamily], N: int | None = None, t0: float = 0.0):
        """Zero modes and derivative values ``values[i]`` (scalars or N-vectors)."""
        vals = [np.atleast_1d(np.asarray(v, dtype=float)) for v in values]
        N = N or max(len(v) for v in vals)
        derivs = np.array([np.broadcast_to(v, (N,)) for v in vals], dtype=float)
        modes = []
        for fam in families:
            mem = fam.members(N)
            modes.append([np.zeros((len(w), _count(idx, N))) for (w, _), idx in zip(fam.terms, mem)])
        return cls(t0, derivs, modes)

    @property
    def alpha_max(self) -> int:
        return self.derivs.shape[0] - 1

    @property
    def size(self) -> int:
        return self.derivs.shape[1]

    def copy(self):
        return ModeSystemState(self.t, self.derivs.copy(), [[m.copy() for m in fam] for fam in self.modes], self.step)


def _count(idx, N):
    return N if isinstance(idx, slice) else len(idx)


# -- condensation operators ---------------------------------------------------------


@dataclass
class CondensationOperators:
    """Per-step-size operators for one group of terms.

    ``B[j] = (I + lambda_j h A)^-1``; ``g[j] = 1 - lambda_j h A B_j 1``
    (mode stage offsets); ``M = sum_j w_j h A B_j`` (mode-sum coupling);
    ``P[j] = w_j h b^T B_j`` and ``a[j] = 1 - lambda_j h b^T B_j 1`` (updates).
    """

    h: float
    B: np.ndarray
    g: np.ndarray
    M: np.ndarray
    P: np.ndarray
    a: np.ndarray


def condensation_operators(tableau: ButcherTableau, h: float, weights, rates) -> CondensationOperators:
    if not h > 0:
        raise DomainError("step size must be positive")
    w = np.asarray(weights, dtype=float)
    lam = np.asarray(rates, dtype=float)
    if np.any(lam < 0):
        raise DomainError("decay rates must be nonnegative")
    s = tableau.stages
    A, b = tableau.A, tableau.b
    eye = np.eye(s)
    m = len(lam)
    if m == 0:
        z = np.zeros((0, s))
        return CondensationOperators(h, np.zeros((0, s, s)), z, np.zeros((s, s)), z, np.zeros(0))
    mats = eye[None, :, :] + (lam * h)[:, None, None] * A[None, :, :]
    try:
        B = np.linalg.solve(mats, np.broadcast_to(eye, (m, s, s)))
    except np.linalg.LinAlgError as exc:
        raise NumericalError("singular I + lambda h A", h=h) from exc
    hAB = h * np.einsum("ik,jkl->jil", A, B)
    ones = np.ones(s)
    g = 1.0 - lam[:, None] * (hAB @ ones)
    M = np.einsum("j,jil->il", w, hAB)
    bB = np.einsum("k,jkl->jl", b, B)
    P = (w * h)[:, None] * bB
    a = 1.0 - lam * h * (bB @ ones)
    return CondensationOperators(h, B, g, M, P, a)


class OperatorCache:
    """Condensation operators keyed by (step size, group identity)."""

    def __init__(self, tableau: ButcherTableau, maxsize: int = 64):
        self.tableau = tableau
        self.maxsize = maxsize
        self._store: dict = {}
        self.hits = 0
        self.misses = 0

    def get(self, h: float, key, weights, rates) -> CondensationOperators:
        k = (float(h), key)
        ops = self._store.get(k)
        if ops is None:
            self.misses += 1
            ops = condensation_operators(self.tableau, h, weights, rates)
            if len(self._store) >= self.maxsize:
                self._store.pop(next(iter(self._store)))
            self._store[k] = ops
        else:
            self.hits += 1
        return ops


def hA_powers(tableau: ButcherTableau, h: float, p: int):
    """``[(hA)^0, ..., (hA)^(p+1)]`` by repeated multiplication."""
    H = h * tableau.A
    out = [np.eye(tableau.stages)]
    for _ in range(p + 1):
        out.append(out[-1] @ H)
    return out


# -- the condensed stage problem ---------------------------------------------------


@dataclass
class StageMaps:
    """Affine dependence of all stage quantities on ``K = k^(p)``.

    ``stage_value(i, K) = V0[i] + T[i] @ K`` for ``v^(i)`` and
    ``mode_sum(K) = S + sum_g M_g @ K[:, nodes_g]``.
    """

    t: np.ndarray
    V0: list
    T: list
    S: np.ndarray
    M: list
    members: list
    N: int

    @property
    def shape(self):
        return (len(self.t), self.N)

    def stage_value(self, i: int, K):
        return self.V0[i] + self.T[i] @ K

    def mode_sum(self, K):
        out = self.S.copy()
        for Mg, idx in zip(self.M, self.members):
            out[:, idx] += Mg @ K[:, idx]
        return out

    def mode_jacobian_blocks(self):
        """Per group ``(M_g, nodes_g)``: d(mode sum)/dK acts blockwise by node."""
        return list(zip(self.M, self.members))


def _family_ops(cache: OperatorCache, fam_id, fam: ModeFamily, h):
    return [cache.get(h, (fam_id, g), w, l) for g, (w, l) in enumerate(fam.terms)]


def build_stage_maps(state: ModeSystemState, families: Sequence[ModeFamily], tableau: ButcherTableau, h: float, cache: OperatorCache):
    """Assemble the affine stage maps for one step from ``state``."""
    p = state.alpha_max
    N = state.size
    s = tableau.stages
    Hp = hA_powers(tableau, h, p)
    ones = np.ones(s)
    v = state.derivs
    V0, T = [], []
    for i in range(p + 1):
        base = np.outer(ones, v[i])
        for l in range(1, p - i + 1):
            base = base + np.outer(Hp[l] @ ones, v[i + l])
        V0.append(base)
        T.append(Hp[p - i + 1])
    S = np.zeros((s, N))
    groupsM = {}
    fam_ops = []
    for fi, fam in enumerate(families):
        ops = _family_ops(cache, fi, fam, h)
        fam_ops.append(ops)
        mem = fam.members(N)
        Vi0, Ti = V0[fam.index], T[fam.index]
        for g, (op, idx) in enumerate(zip(ops, mem)):
            modes = state.modes[fi][g]
            if modes.shape[0] == 0:
                continue
            # sum_j v_ij^n g_j  +  M (V0_i) ; the K part goes through M T_i
            S[:, idx] += op.g.T @ modes + op.M @ Vi0[:, idx]
            key = (id(idx) if not isinstance(idx, slice) else "all", fi, g)
            groupsM[key] = (op.M @ Ti, idx)
    # merge groups sharing the same nodes is not needed: mode_sum adds them
    M = [m for m, _ in groupsM.values()]
    members = [idx for _, idx in groupsM.values()]
    t = state.t + tableau.c * h
    return StageMaps(t, V0, T, S, M, members, N), fam_ops


@dataclass
class StepDiagnostics:
    iterations: int = 0
    residuals: list = field(default_factory=list)
    unknowns: int = 0


def _update_modes(modes, a, P, V, out):
    """``out = a * modes + P @ V`` with a single accumulating gemm."""
    np.multiply(modes, a[:, None], out=out)
    if out.size == 0:
        return out
    # out is C-ordered, so out.T is the Fortran-ordered C of the gemm
    res = dgemm(1.0, V.T, P.T, beta=1.0, c=out.T, overwrite_c=True)
    if not np.shares_memory(res, out):
        out[...] = res.T
    return out


def condensed_step(
    state: ModeSystemState,
    families: Sequence[ModeFamily],
    tableau: ButcherTableau,
    h: float,
    solve_stage: Callable,
    cache: OperatorCache | None = None,
    guess=None,
    out=None,
):
    """Advance ``state`` by ``h``.

    ``solve_stage(maps, guess)`` returns ``(K, diagnostics)`` for the
    condensed problem of size ``s x N``; everything else is linear
    recovery: ``k^(i)`` from powers of ``hA`` applied to ``K`` and the mode
    values from the cached ``B`` operators.  ``out`` may be a mode layout
    of an older state whose arrays are overwritten with the new modes, which
    saves an allocation per group and step.  Returns
    ``(new_state, K, diagnostics)``.
    """
    cache = cache or OperatorCache(tableau)
    maps, fam_ops = build_stage_maps(state, families, tableau, h, cache)
    K, diag = solve_stage(maps, guess)
    K = np.asarray(K, dtype=float).reshape(maps.shape)
    if diag is None:
        diag = StepDiagnostics()
    diag.unknowns = K.size
    p = state.alpha_max
    s = tableau.stages
    Hp = hA_powers(tableau, h, p)
    ones = np.ones(s)
    hb = h * tableau.b
    v = state.derivs
    new_derivs = np.empty_like(v)
    for i in range(p + 1):
        # k^(i) = sum_{l=1}^{p-i} (hA)^(l-1) 1 v^(i+l) + (hA)^(p-i) K
        k = Hp[p - i] @ K
        for l in range(1, p - i + 1):
            k = k + np.outer(Hp[l - 1] @ ones, v[i + l])
        new_derivs[i] = v[i] + hb @ k
    new_modes = []
    for fi, (fam, ops) in enumerate(zip(families, fam_ops)):
        Vi = maps.stage_value(fam.index, K)
        grp = []
        for g, (op, idx) in enumerate(zip(ops, fam.members(state.size))):
            modes = state.modes[fi][g]
            if modes.shape[0] == 0:
                grp.append(modes)
                continue
            buf = out[fi][g] if out is not None else np.empty(modes.shape)
            grp.append(_update_modes(modes, op.a, op.P, Vi[:, idx], buf))
        new_modes.append(grp)
    new = ModeSystemState(state.t + h, new_derivs, new_modes, state.step + 1)
    return new, K, diag


def mode_stage_derivatives(state: ModeSystemState, families, tableau, h, K, cache: OperatorCache):
    """Recovered ``k^{ij}`` per family and group (for recurrence checks)."""
    maps, fam_ops = build_stage_maps(state, families, tableau, h, cache)
    out = []
    for fi, (fam, ops) in enumerate(zip(families, fam_ops)):
        Vi = maps.stage_value(fam.index, K)
        grp = []
        for g, (op, idx) in enumerate(zip(ops, fam.members(state.size))):
            w, lam = fam.terms[g]
            modes = state.modes[fi][g]
            # k^{ij} = B_j (-lambda_j v_ij 1 + w_j V_i)
            rhs = -lam[:, None, None] * np.ones((1, tableau.stages, 1)) * modes[:, None, :] + w[:, None, None] * Vi[None, :, idx]
            grp.append(np.einsum("jkl,jln->jkn", op.B, rhs))
        out.append(grp)
    return out


def mode_recurrence_residual(state: ModeSystemState, families, tableau, h, K, cache: OperatorCache) -> float:
    """Largest relative defect of ``k_ij = -lambda_j (v_ij 1 + hA k_ij) + w_j V_i``.

    Substitutes the recovered mode stage derivatives back into the stage
    equations; the scale is the largest term on either side.
    """
    maps, _ = build_stage_maps(state, families, tableau, h, cache)
    kij = mode_stage_derivatives(state, families, tableau, h, K, cache)
    H = h * tableau.A
    worst = 0.0
    for fi, fam in enumerate(families):
        Vi = maps.stage_value(fam.index, K)
        for g, idx in enumerate(fam.members(state.size)):
            w, lam = fam.terms[g]
            if len(w) == 0:
                continue
            k = kij[fi][g]
            stage = state.modes[fi][g][:, None, :] + np.einsum("ab,jbn->jan", H, k)
            drive = w[:, None, None] * Vi[None, :, idx]
            decay = lam[:, None, None] * stage
            defect = k + decay - drive
            scale = max(np.max(np.abs(k)), np.max(np.abs(decay)), np.max(np.abs(drive)), 1e-300)
            worst = max(worst, float(np.max(np.abs(defect)) / scale))
    return worst


# -- nonlinear solver ----------------------------------------------------------------


@dataclass
class NewtonResult:
    x: np.ndarray
    iterations: int
    residuals: list
    converged: bool


def newton_solve(
    residual: Callable,
    jacobian: Callable,
    x0,
    abs_tol: float = 1e-12,
    max_iter: int = 50,
    max_halvings: int = 10,
) -> NewtonResult:
    """Newton's method with a halving line search on ``||r||_inf``.

    ``jacobian(x)`` returns a dense array, a scipy sparse matrix, or a
    callable solving ``J dx = r``.  Raises :class:`StepFailure` carrying the
    residual history when ``max_iter`` is exceeded, the line search fails or
    the residual is not finite.
    """
    x = np.array(x0, dtype=float, copy=True)
    shape = x.shape
    x = x.ravel()
    r = np.asarray(residual(x.reshape(shape)), dtype=float).ravel()
    norm = float(np.max(np.abs(r))) if r.size else 0.0
    history = [norm]
    it = 0
    while not norm <= abs_tol:
        if not math.isfinite(norm):
            raise StepFailure("non-finite Newton residual", residuals=history)
        if it >= max_iter:
            raise StepFailure(f"Newton did not converge in {max_iter} iterations", residuals=history)
        J = jacobian(x.reshape(shape))
        if callable(J):
            dx = J(r)
        elif sp.issparse(J):
            dx = spla.spsolve(J.tocsc(), r)
        else:
            J = np.atleast_2d(J)
            dx = np.linalg.solve(J, r)
        dx = np.asarray(dx, dtype=float).ravel()
        t = 1.0
        for _ in range(max_halvings + 1):
            x_new = x - t * dx
            r_new = np.asarray(residual(x_new.reshape(shape)), dtype=float).ravel()
            n_new = float(np.max(np.abs(r_new)))
            if n_new < norm or n_new <= abs_tol:
                break
            t *= 0.5
        else:
            # residual at the rounding floor: a full step changes nothing
            if float(np.max(np.abs(dx))) <= 64 * np.finfo(float).eps * max(1.0, float(np.max(np.abs(x)))):
                history.append(n_new)
                raise StepFailure("Newton stagnated at rounding level above tolerance", residuals=history)
            raise StepFailure("line search failed after %d halvings" % max_halvings, residuals=history)
        x, r, norm = x_new, r_new, n_new
        history.append(norm)
        it += 1
    return NewtonResult(x.reshape(shape), it, history, True)
