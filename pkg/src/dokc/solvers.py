"""Distributed-order problems: scalar ODEs and the diffusion-wave equation.

Both reduce to the mode system of :mod:`dokc.timestepping`.  For the scalar
equation ``int phi(a) D^a u da = f(t, u)`` the condensed stage problem is
nonlinear and solved by Newton; for the diffusion-wave equation
``int phi(a) D^a u da = eps Lap u + f`` it is an affine system of size
``s * Ndof``, factorised once per step size.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import AccuracyError, ConfigError, DokcError, StepFailure, ValidationError
from .expsum import CompressedKernel, KernelCache, compress_cached
from .kernels import WeightFunctionSpec, bump, exm1, exm2, kernels_for
from .quadrature import gauss_nodes
from .timestepping import (
    ModeFamily,
    ModeSystemState,
    OperatorCache,
    StepDiagnostics,
    TimeMesh,
    condensed_step,
    graded_mesh,
    make_tableau,
    mode_recurrence_residual,
    newton_solve,
)

log = logging.getLogger(__name__)

DIRECT_SOLVE_LIMIT = 100_000


# -- kernels ----------------------------------------------------------------------


@dataclass
class KernelControls:
    """How the kernels of a weight function are compressed.

    ``rule_family``/``rule_size`` switch to a fixed quadrature rule in the
    order variable (discrete kernels); ``max_terms`` caps the AAA degree.
    """

    tol: float = 1e-40
    precision: int | None = None
    cache: str | Path | KernelCache | None = None
    rule_family: str | None = None
    rule_size: int = 0
    max_terms: int = 200
    certify: bool = True


def compressed_kernels(weight: WeightFunctionSpec, controls: KernelControls | None = None):
    """``[(i, CompressedKernel)]`` for every nonzero kernel of ``weight``."""
    controls = controls or KernelControls()
    cache = controls.cache
    if cache is not None and not isinstance(cache, KernelCache):
        cache = KernelCache(cache)
    out = []
    for K in kernels_for(weight, controls.rule_family, controls.rule_size):
        C, hit = compress_cached(
            K, controls.tol, controls.precision, cache, max_terms=controls.max_terms, certify=controls.certify
        )
        log.info("%s: m=%d l1=%s%s", K.identifier, C.m, C.l1_error, " (cache)" if hit else "")
        out.append((K.index, C))
    return out


def families_from(kernels) -> list[ModeFamily]:
    """One uniform mode family per ``(index, CompressedKernel)`` pair."""
    return [ModeFamily.uniform(i, C.weights, C.rates) for i, C in kernels]


def _check_kernels(kernels, alpha_max):
    for i, C in kernels:
        if not 1 <= i <= alpha_max:
            raise ConfigError(f"kernel index {i} outside 1..{alpha_max}")
        if not isinstance(C, CompressedKernel):
            raise ConfigError("kernels must be CompressedKernel instances")


def _mesh(mesh: TimeMesh | None, N: int | None, gamma: float, T: float) -> TimeMesh:
    if mesh is not None:
        return mesh
    if N is None:
        raise ConfigError("either a mesh or a step count N is required")
    return graded_mesh(N, gamma, T)


# -- scalar problems ----------------------------------------------------------------


@dataclass
class DOFDEProblem:
    """``int phi(a) D^a u(t) da = f(t, u(t))`` on ``[0, T]``.

    ``initial`` holds ``u(0), u'(0), ...`` (one value per integer order
    below ``alpha_max``); ``rhs`` and ``rhs_du`` act elementwise on arrays
    of stage times and values.
    """

    weight: WeightFunctionSpec
    initial: Sequence[float]
    rhs: Callable
    rhs_du: Callable | None = None
    T: float = 1.0
    reference: Callable | None = None
    name: str = ""

    def __post_init__(self):
        self.initial = [float(v) for v in self.initial]
        if len(self.initial) != self.weight.alpha_max:
            raise ConfigError(
                f"{len(self.initial)} initial values given, alpha_max = {self.weight.alpha_max} needs as many"
            )

    @property
    def alpha_max(self) -> int:
        return self.weight.alpha_max


@dataclass
class DOFDESolution:
    t: np.ndarray
    u: np.ndarray
    error: float | None
    newton_iterations: list
    kernels: list = field(default_factory=list)
    scheme: str = ""

    @property
    def final(self) -> float:
        return float(self.u[-1])


def _numeric_du(rhs):
    def du(t, u):
        d = 1e-7 * np.maximum(1.0, np.abs(u))
        return (rhs(t, u + d) - rhs(t, u - d)) / (2 * d)

    return du


def solve_dofde(
    problem: DOFDEProblem,
    scheme: str = "radau_iia_2",
    N: int | None = 100,
    gamma: float = 1.0,
    mesh: TimeMesh | None = None,
    kernels=None,
    controls: KernelControls | None = None,
    newton_tol: float = 1e-12,
) -> DOFDESolution:
    """Solve a scalar DO equation on a (graded) mesh.

    ``kernels`` is a list of ``(index, CompressedKernel)``; when omitted the
    kernels of ``problem.weight`` are compressed per ``controls``.  Each
    stage problem ``modesum(K) - f(t, V0(K)) = 0`` is solved by Newton to
    ``newton_tol`` in the max norm.  The error is the maximum over mesh
    nodes against ``problem.reference`` when one is given.
    """
    tab = make_tableau(scheme)
    mesh = _mesh(mesh, N, gamma, problem.T)
    if kernels is None:
        kernels = compressed_kernels(problem.weight, controls)
    _check_kernels(kernels, problem.alpha_max)
    families = families_from(kernels)
    rhs = problem.rhs
    rhs_du = problem.rhs_du or _numeric_du(rhs)
    state = ModeSystemState.initial(problem.initial + [0.0], families, N=1)
    cache = OperatorCache(tab)
    s = tab.stages

    def solve_stage(maps, guess):
        T0 = maps.T[0]
        Mtot = np.zeros((s, s))
        for Mg, _ in maps.mode_jacobian_blocks():
            Mtot = Mtot + Mg

        def residual(K):
            V = maps.stage_value(0, K)[:, 0]
            return maps.mode_sum(K)[:, 0] - rhs(maps.t, V)

        def jacobian(K):
            V = maps.stage_value(0, K)[:, 0]
            return Mtot - rhs_du(maps.t, V)[:, None] * T0

        x0 = np.zeros((s, 1)) if guess is None else guess
        res = newton_solve(residual, jacobian, x0, abs_tol=newton_tol)
        return res.x, StepDiagnostics(res.iterations, res.residuals)

    us = [state.derivs[0, 0]]
    iters = []
    K = None
    for n, h in enumerate(mesh.steps):
        try:
            state, K, diag = condensed_step(state, families, tab, float(h), solve_stage, cache, guess=K)
        except StepFailure as exc:
            raise StepFailure(f"step {n} at t={state.t:.6g}: {exc}", step=n, t=state.t, **exc.diagnostics) from exc
        iters.append(diag.iterations)
        us.append(state.derivs[0, 0])
    u = np.array(us)
    err = None
    if problem.reference is not None:
        err = float(np.max(np.abs(u - problem.reference(mesh.nodes))))
    info = [{"index": i, "kernel": C.kernel_id, "m": C.m, "l1_error": C.l1_error} for i, C in kernels]
    return DOFDESolution(mesh.nodes.copy(), u, err, iters, info, scheme)


# -- example right-hand sides ----------------------------------------------------


def _safe_log(t):
    t = np.asarray(t, dtype=float)
    with np.errstate(divide="ignore"):
        return np.log(t)


def example1_forcing(t):
    """``120 (t^5 - t^3/e^2) / (1 + log t)``, continuous through ``t = 1/e``.

    Written as ``120 t^5 (1 - exp(-2x)) / x`` with ``x = 1 + log t`` so the
    removable singularity is evaluated without cancellation.
    """
    t = np.asarray(t, dtype=float)
    x = 1.0 + _safe_log(t)
    small = np.abs(x) < 1e-5
    xs = np.where(small, 1.0, x)
    with np.errstate(over="ignore", invalid="ignore"):
        ratio = np.where(small, 2.0 - 2.0 * x + (4.0 / 3.0) * x * x, -np.expm1(-2.0 * xs) / xs)
        out = 120.0 * t**5 * ratio
    return np.where(t > 0, out, 0.0)


def _g1(u):
    u = np.asarray(u, dtype=float)
    return np.cos(100.0 * u / (1.0 + np.sqrt(np.abs(u))))


def _g1_du(u):
    u = np.asarray(u, dtype=float)
    r = np.sqrt(np.abs(u))
    arg = 100.0 * u / (1.0 + r)
    return -np.sin(arg) * 100.0 * (1.0 + 0.5 * r) / (1.0 + r) ** 2


def example2_forcing(t):
    """Forcing of the ``u = t^3 + 2t + 4`` problem with ``phi = Gamma(4-a)``.

    It equals ``6 int_0^2 t^(3-a) da + 2 int_0^1 (3-a)(2-a) t^(1-a) da``.
    Away from ``t = 1`` the closed form in powers of ``1/log t`` is used;
    near ``t = 1`` (removable singularity) a 20-node Gauss-Legendre rule in
    the order variable.
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    L = _safe_log(t)
    out = np.zeros_like(t)
    near = np.abs(L) < 1.0
    far = ~near & (t > 0)
    Lf = L[far]
    tf = t[far]
    out[far] = (6 * tf**3 + 6 * tf - 4) / Lf + (6 - 10 * tf) / Lf**2 + (4 * tf - 4) / Lf**3
    if np.any(near):
        x2, w2 = _GL20_02
        x1, w1 = _GL20_01
        Ln = L[near][:, None]
        a = 6.0 * np.exp((3.0 - x2) * Ln) @ w2
        b = 2.0 * ((3.0 - x1) * (2.0 - x1) * np.exp((1.0 - x1) * Ln)) @ w1
        out[near] = a + b
    return out


_GL20_02 = gauss_nodes("gauss-legendre", 20, (0.0, 2.0))
_GL20_02 = (np.asarray(_GL20_02.nodes, dtype=float), np.asarray(_GL20_02.weights, dtype=float))
_GL20_01 = gauss_nodes("gauss-legendre", 20, (0.0, 1.0))
_GL20_01 = (np.asarray(_GL20_01.nodes, dtype=float), np.asarray(_GL20_01.weights, dtype=float))


def example1(weight: WeightFunctionSpec | None = None) -> DOFDEProblem:
    """``phi = exp(-a) Gamma(6-a)``, ``u = t^5``, nonlinear ``g(u)`` added and subtracted."""

    def rhs(t, u):
        t = np.asarray(t, dtype=float)
        return example1_forcing(t) + _g1(u) - _g1(t**5)

    def rhs_du(t, u):
        return _g1_du(u)

    return DOFDEProblem(weight or exm1(), [0.0, 0.0], rhs, rhs_du, 1.0, lambda t: np.asarray(t, dtype=float) ** 5, "example1")


def example2() -> DOFDEProblem:
    """``phi = Gamma(4-a)``, ``u = t^3 + 2t + 4`` with nonzero initial data."""

    def rhs(t, u):
        return example2_forcing(t)

    def rhs_du(t, u):
        return np.zeros_like(np.asarray(u, dtype=float))

    def ref(t):
        t = np.asarray(t, dtype=float)
        return t**3 + 2 * t + 4

    return DOFDEProblem(exm2(), [4.0, 2.0], rhs, rhs_du, 1.0, ref, "example2")


# -- grids ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GridSpec:
    """Uniform grid on ``(0,1)^d`` with homogeneous Dirichlet boundary.

    Only interior nodes carry unknowns; in 2D they are ordered with the
    first coordinate as the slow index.
    """

    dim: int
    cells: int

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ConfigError("grid dimension must be 1 or 2")
        if self.cells < 2:
            raise ConfigError("at least two cells per axis are needed")

    @property
    def dx(self) -> float:
        return 1.0 / self.cells

    @property
    def n_axis(self) -> int:
        return self.cells - 1

    @property
    def ndof(self) -> int:
        return self.n_axis**self.dim

    def axis(self) -> np.ndarray:
        return np.arange(1, self.cells) * self.dx

    def coordinates(self) -> tuple:
        """Tuple of flattened coordinate arrays, one per dimension."""
        x = self.axis()
        if self.dim == 1:
            return (x,)
        X1, X2 = np.meshgrid(x, x, indexing="ij")
        return (X1.ravel(), X2.ravel())

    def norm(self, v) -> float:
        """Discrete ``L2(Omega)`` norm: Euclidean norm scaled by ``dx^(d/2)``."""
        return float(np.linalg.norm(v) * self.dx ** (self.dim / 2))


def assemble_laplacian(grid: GridSpec) -> sp.csr_matrix:
    """Second-order 3-point (1D) or 5-point (2D) Dirichlet Laplacian."""
    n = grid.n_axis
    L1 = sp.diags([np.ones(n - 1), -2.0 * np.ones(n), np.ones(n - 1)], [-1, 0, 1]) / grid.dx**2
    if grid.dim == 1:
        return sp.csr_matrix(L1)
    eye = sp.identity(n)
    return sp.csr_matrix(sp.kron(L1, eye) + sp.kron(eye, L1))


def laplacian_eigenvalue(grid: GridSpec, modes: Sequence[int]) -> float:
    """Eigenvalue of the discrete Laplacian for ``prod sin(k_d pi x_d)``."""
    return float(sum(-4.0 / grid.dx**2 * math.sin(k * math.pi * grid.dx / 2) ** 2 for k in modes))


# -- space-dependent kernels ------------------------------------------------------------


@dataclass
class SpatialKernelTable:
    """Compressed kernels per value of a piecewise-constant field.

    ``kernels[(v, i)]`` is the kernel ``K_i`` for ``values[v]`` (absent when
    that kernel vanishes); ``node_index`` maps grid nodes to value indices.
    """

    values: np.ndarray
    node_index: np.ndarray
    kernels: dict
    alpha_max: int
    m: int

    @property
    def size(self) -> int:
        return len(self.values)

    def node_counts(self) -> np.ndarray:
        return np.bincount(self.node_index, minlength=self.size)

    def families(self) -> list[ModeFamily]:
        """Grouped mode families: group ``v`` holds the nodes with ``values[v]``."""
        out = []
        empty = (np.zeros(0), np.zeros(0))
        for i in range(1, self.alpha_max + 1):
            terms = []
            for v in range(self.size):
                C = self.kernels.get((v, i))
                terms.append((C.weights, C.rates) if C is not None else empty)
            if any(len(w) for w, _ in terms):
                out.append(ModeFamily(i, terms, groups=self.node_index))
        return out


def spatial_kernel_table(
    eta,
    weight_family: Callable[[float], WeightFunctionSpec],
    m: int = 20,
    tol: float = 1e-30,
    precision: int | None = 256,
    cache=None,
    certify: bool = False,
) -> SpatialKernelTable:
    """One compression per (field value, kernel index) at a fixed term count.

    AAA is stopped after ``m + 1`` support points; the support point at
    ``s = 0`` only contributes the vanishing ``lambda = 0`` term, which
    leaves ``m`` exponentials.
    """
    eta = np.asarray(eta, dtype=float)
    values = np.unique(eta)
    if len(values) > 16:
        raise ConfigError(f"{len(values)} distinct field values; at most 16 are supported")
    node_index = np.searchsorted(values, eta)
    if cache is not None and not isinstance(cache, KernelCache):
        cache = KernelCache(cache)
    kernels = {}
    alpha_max = None
    for v, val in enumerate(values):
        weight = weight_family(float(val))
        if alpha_max is None:
            alpha_max = weight.alpha_max
        elif weight.alpha_max != alpha_max:
            raise ConfigError("all field values must share alpha_max")
        for K in kernels_for(weight):
            try:
                C, _ = compress_cached(K, tol, precision, cache, max_terms=m + 1, certify=certify)
            except DokcError as exc:
                raise type(exc)(f"compression failed for field value {val:g}: {exc}") from exc
            kernels[(v, K.index)] = C
    counts = {C.m for C in kernels.values()}
    if len(counts) > 1:
        raise ValidationError(
            f"kernel tables do not share a common term count: {sorted(counts)}",
            offenders=[(float(values[v]), i, C.m) for (v, i), C in kernels.items() if C.m != m],
        )
    return SpatialKernelTable(values, node_index, kernels, alpha_max, counts.pop() if counts else 0)


def space_bump(radius: float = 0.5, alpha_max: int = 3):
    """Bump weights centred at a field value, all with the same ``alpha_max``."""

    def make(center):
        return bump(center, radius, upper=float(alpha_max), alpha_max=alpha_max, name=f"bump(c={center:.6g},r={radius:g})")

    return make


# -- diffusion-wave problems ----------------------------------------------------------


@dataclass
class DOPDEProblem:
    """``int phi(a) D^a u da = eps Lap u + f`` on a Dirichlet grid.

    ``initial`` lists ``u0, v0[, w0]`` as arrays over the interior nodes;
    ``forcing(t, coords)`` returns an array over the nodes (``None``: zero).
    Space-dependent weights come as a :class:`SpatialKernelTable`.
    """

    grid: GridSpec
    eps: float
    initial: Sequence
    T: float = 1.0
    weight: WeightFunctionSpec | None = None
    table: SpatialKernelTable | None = None
    forcing: Callable | None = None
    reference: Callable | None = None
    name: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if (self.weight is None) == (self.table is None):
            raise ConfigError("give exactly one of a weight function or a kernel table")
        n = self.grid.ndof
        self.initial = [np.broadcast_to(np.asarray(v, dtype=float), (n,)).copy() for v in self.initial]
        if len(self.initial) != self.alpha_max:
            raise ConfigError(f"{len(self.initial)} initial fields given, alpha_max = {self.alpha_max}")

    @property
    def alpha_max(self) -> int:
        return self.weight.alpha_max if self.weight is not None else self.table.alpha_max


@dataclass
class DOPDESolution:
    t: np.ndarray
    errors: np.ndarray | None
    max_error: float | None
    final: np.ndarray
    snapshots: dict
    unknowns: int
    step_times: list
    recurrence: float | None = None


class _CondensedLinearSolver:
    """Assemble and factorise ``sum_g M_g x D_g - eps T_0 x Lap`` per step size."""

    def __init__(self, lap, eps, ndof, tol=1e-12):
        self.lap = lap
        self.eps = eps
        self.ndof = ndof
        self.tol = tol
        self._key = None
        self._solver = None
        self._A = None
        self.factorizations = 0

    def matrix(self, maps):
        N = self.ndof
        A = -self.eps * sp.kron(sp.csr_matrix(maps.T[0]), self.lap)
        for Mg, idx in maps.mode_jacobian_blocks():
            if isinstance(idx, slice):
                D = sp.identity(N)
            else:
                d = np.zeros(N)
                d[idx] = 1.0
                D = sp.diags(d)
            A = A + sp.kron(sp.csr_matrix(Mg), D)
        return sp.csc_matrix(A)

    def solve(self, maps, h, rhs):
        key = float(h)
        if key != self._key:
            self._A = self.matrix(maps)
            if self._A.shape[0] <= DIRECT_SOLVE_LIMIT:
                self._solver = spla.splu(self._A).solve
            else:
                ilu = spla.spilu(self._A, drop_tol=1e-5)
                M = spla.LinearOperator(self._A.shape, ilu.solve)
                A = self._A

                def it(b):
                    x, info = spla.gmres(A, b, M=M, rtol=self.tol * 1e-2, atol=0.0, restart=60, maxiter=200)
                    if info != 0:
                        raise AccuracyError("GMRES did not converge", iterations=info)
                    return x

                self._solver = it
            self._key = key
            self.factorizations += 1
        b = rhs.ravel()
        x = self._solver(b)
        bn = np.max(np.abs(b))
        r = b - self._A @ x
        if np.max(np.abs(r)) > self.tol * max(bn, 1e-300):
            # one step of iterative refinement before giving up
            x = x + self._solver(r)
            r = b - self._A @ x
            if np.max(np.abs(r)) > self.tol * max(bn, 1e-300):
                raise AccuracyError(
                    "condensed linear solve missed the tolerance",
                    error=float(np.max(np.abs(r)) / max(bn, 1e-300)),
                    iterations=2,
                )
        return x.reshape(rhs.shape)


def pde_families(problem: DOPDEProblem, kernels=None, controls: KernelControls | None = None):
    if problem.table is not None:
        return problem.table.families()
    if kernels is None:
        kernels = compressed_kernels(problem.weight, controls)
    _check_kernels(kernels, problem.alpha_max)
    return families_from(kernels)


def solve_dopde(
    problem: DOPDEProblem,
    scheme: str = "radau_iia_2",
    N: int | None = 100,
    mesh: TimeMesh | None = None,
    kernels=None,
    controls: KernelControls | None = None,
    families: list | None = None,
    snapshot_times: Sequence[float] = (),
    check_recurrence: bool = False,
    linear_tol: float = 1e-12,
) -> DOPDESolution:
    """Time-step the diffusion-wave problem with the condensed linear solve.

    Per step the affine stage problem for ``K = k^(alpha_max)`` (size
    ``s * Ndof``) is assembled and solved directly; modes and derivatives
    follow by linear updates.  Errors are ``L2(Omega)`` grid norms at the
    mesh nodes when ``problem.reference`` is set.
    """
    tab = make_tableau(scheme)
    mesh = _mesh(mesh, N, 1.0, problem.T)
    grid = problem.grid
    coords = grid.coordinates()
    lap = assemble_laplacian(grid)
    fams = families if families is not None else pde_families(problem, kernels, controls)
    state = ModeSystemState.initial(list(problem.initial) + [np.zeros(grid.ndof)], fams, N=grid.ndof)
    cache = OperatorCache(tab)
    solver = _CondensedLinearSolver(lap, problem.eps, grid.ndof, linear_tol)
    eps = problem.eps
    forcing = problem.forcing

    def solve_stage(maps, guess):
        rhs = -maps.S + eps * (lap @ maps.V0[0].T).T
        if forcing is not None:
            rhs = rhs + np.array([forcing(t, coords) for t in maps.t])
        return solver.solve(maps, current_h[0], rhs), None

    current_h = [0.0]
    errors = [] if problem.reference is not None else None
    if errors is not None:
        errors.append(grid.norm(state.derivs[0] - problem.reference(0.0, coords)))
    snaps = {}
    pending = sorted(float(x) for x in snapshot_times)
    step_times = []
    worst_rec = 0.0 if check_recurrence else None
    unknowns = 0
    # two mode buffers alternate; the previous state stays intact for the recurrence check
    spare = None
    for n, h in enumerate(mesh.steps):
        h = float(h)
        current_h[0] = h
        t0 = time.perf_counter()
        prev = state
        state, K, diag = condensed_step(state, fams, tab, h, solve_stage, cache, out=spare)
        spare = prev.modes
        step_times.append(time.perf_counter() - t0)
        unknowns = diag.unknowns
        if check_recurrence:
            worst_rec = max(worst_rec, mode_recurrence_residual(prev, fams, tab, h, K, cache))
        if not np.all(np.isfinite(state.derivs[0])):
            raise StepFailure(f"non-finite solution at step {n}", step=n, t=state.t)
        if errors is not None:
            errors.append(grid.norm(state.derivs[0] - problem.reference(state.t, coords)))
        while pending and state.t >= pending[0] - 1e-12 * max(1.0, problem.T):
            snaps[pending.pop(0)] = state.derivs[0].copy()
    errs = np.array(errors) if errors is not None else None
    return DOPDESolution(
        mesh.nodes.copy(),
        errs,
        float(np.max(errs)) if errs is not None else None,
        state.derivs[0].copy(),
        snaps,
        unknowns,
        step_times,
        worst_rec,
    )


# -- scenarios --------------------------------------------------------------------------


def _eigvec(coords, k=4):
    out = np.ones_like(coords[0])
    for x in coords:
        out = out * np.sin(k * np.pi * x)
    return out


def table1(cells: int = 64, tol: float = 1e-20) -> DOPDEProblem:
    """Manufactured ``u = sin(4 pi x1) sin(4 pi x2) t^5`` with discrete forcing.

    The spatial factor is an exact eigenvector of the discrete Laplacian,
    so the forcing built from the discrete eigenvalue leaves no spatial
    error and the temporal error is isolated.
    """
    grid = GridSpec(2, cells)
    coords = grid.coordinates()
    X = _eigvec(coords)
    mu = laplacian_eigenvalue(grid, (4, 4))
    eps = 1.0

    def forcing(t, c):
        return X * (float(example1_forcing(t)) - eps * mu * t**5)

    def reference(t, c):
        return X * t**5

    return DOPDEProblem(
        grid, eps, [np.zeros(grid.ndof), np.zeros(grid.ndof)], 1.0, weight=exm1(), forcing=forcing,
        reference=reference, name="table1", meta={"kernel_tol": tol, "eigenvalue": mu},
    )


def dowave2d(cells: int = 64, forcing: str = "manufactured", tol: float = 1e-20) -> DOPDEProblem:
    """Diffusion-wave equation on the unit square with the continuous forcing.

    ``forcing="zero"`` gives the homogeneous problem with zero data.
    """
    grid = GridSpec(2, cells)
    coords = grid.coordinates()
    X = _eigvec(coords)
    zero = np.zeros(grid.ndof)
    if forcing == "zero":
        return DOPDEProblem(grid, 1.0, [zero, zero], 1.0, weight=exm1(), name="dowave2d", meta={"kernel_tol": tol},
                            reference=lambda t, c: np.zeros_like(c[0]))
    if forcing != "manufactured":
        raise ConfigError(f"unknown forcing {forcing!r}")

    def f(t, c):
        return X * (float(example1_forcing(t)) + 32 * np.pi**2 * t**5)

    return DOPDEProblem(
        grid, 1.0, [zero, zero], 1.0, weight=exm1(), forcing=f, reference=lambda t, c: X * t**5,
        name="dowave2d", meta={"kernel_tol": tol},
    )


GEOMETRIC_VALUES = (0.5, 1.17, 1.83, 2.5)
SOURCE_CENTRES = ((0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75))


def point_sources(coords, centres=SOURCE_CENTRES, sharpness=1000.0):
    """``sum_l exp(-sharpness |x - x_l|)``."""
    out = np.zeros_like(coords[0])
    for c in centres:
        r = np.sqrt(sum((x - cx) ** 2 for x, cx in zip(coords, c)))
        out += np.exp(-sharpness * r)
    return out


def geometric_eta(coords):
    """Quadrant field: one value of ``GEOMETRIC_VALUES`` per quadrant."""
    x1, x2 = coords
    q = (x1 >= 0.5).astype(int) + 2 * (x2 >= 0.5).astype(int)
    return np.asarray(GEOMETRIC_VALUES)[q]


def random_eta(coords, seed: int = 0, modes: int = 6, levels=GEOMETRIC_VALUES):
    """Seeded smooth random field quantised to ``levels``.

    A random Fourier series with coefficients decaying like ``1/(k1^2+k2^2)``
    is scaled to ``[min(levels), max(levels)]`` and rounded to the nearest
    level.
    """
    rng = np.random.default_rng(seed)
    x1, x2 = coords
    field_ = np.zeros_like(x1)
    for k1 in range(1, modes + 1):
        for k2 in range(1, modes + 1):
            a, phase1, phase2 = rng.normal(), rng.uniform(0, 2 * np.pi), rng.uniform(0, 2 * np.pi)
            field_ += a / (k1 * k1 + k2 * k2) * np.cos(k1 * np.pi * x1 + phase1) * np.cos(k2 * np.pi * x2 + phase2)
    lo, hi = min(levels), max(levels)
    span = field_.max() - field_.min()
    scaled = lo + (hi - lo) * (field_ - field_.min()) / (span if span > 0 else 1.0)
    lv = np.asarray(levels, dtype=float)
    return lv[np.argmin(np.abs(scaled[:, None] - lv[None, :]), axis=1)]


def space_dependent(
    kind: str = "geometric",
    cells: int = 64,
    m: int = 20,
    radius: float = 0.5,
    seed: int = 0,
    cache=None,
    eps: float = 0.2,
    T: float = 3.0,
) -> DOPDEProblem:
    """Diffusion-wave problem with a bump weight centred at a field ``eta(x)``."""
    grid = GridSpec(2, cells)
    coords = grid.coordinates()
    if kind == "geometric":
        eta = geometric_eta(coords)
    elif kind == "randomfield":
        eta = random_eta(coords, seed)
    else:
        raise ConfigError(f"unknown eta scenario {kind!r}")
    table = spatial_kernel_table(eta, space_bump(radius, 3), m=m, cache=cache)
    u0 = point_sources(coords)
    zero = np.zeros(grid.ndof)
    meta = {"eta": kind, "m": table.m, "radius": radius, "values": [float(v) for v in table.values]}
    if kind == "randomfield":
        meta["seed"] = seed
    return DOPDEProblem(grid, eps, [u0, zero, zero], T, table=table, name=f"{kind}_eta", meta=meta)


SCENARIOS = ("example1", "example2", "table1", "dowave2d", "geometric_eta", "randomfield_eta")
ODE_SCENARIOS = ("example1", "example2")


def scenario(name: str, **params):
    """Problem object for a named scenario (keyword overrides per scenario)."""
    if name == "example1":
        return example1()
    if name == "example2":
        return example2()
    if name == "table1":
        return table1(**params)
    if name == "dowave2d":
        return dowave2d(**params)
    if name == "geometric_eta":
        return space_dependent("geometric", **params)
    if name == "randomfield_eta":
        return space_dependent("randomfield", **params)
    raise ConfigError(f"unknown scenario {name!r}; choose from {', '.join(SCENARIOS)}")


# -- convergence rates ---------------------------------------------------------------


@dataclass
class RateTable:
    """Adjacent-resolution rates ``log2(e(N)/e(2N))`` with plateau flags."""

    N: list
    errors: list
    rates: list
    plateau: list

    @property
    def asymptotic(self) -> float | None:
        """Median of the last three rates outside plateau rows."""
        usable = [r for r, p in zip(self.rates, self.plateau) if r is not None and not p]
        if not usable:
            return None
        return float(np.median(usable[-3:]))


def observed_rates(N: Sequence[int], errors: Sequence[float], plateau_change: float = 0.1) -> RateTable:
    """Rates between consecutive rows; rows whose error changed by less than
    ``plateau_change`` (relative) are flagged as plateau."""
    rates, flags = [None], [False]
    for (n0, e0), (n1, e1) in zip(zip(N[:-1], errors[:-1]), zip(N[1:], errors[1:])):
        if e0 > 0 and e1 > 0:
            rates.append(math.log(e0 / e1) / math.log(n1 / n0))
            flags.append(abs(e1 - e0) < plateau_change * e0)
        else:
            rates.append(None)
            flags.append(True)
    return RateTable(list(N), list(errors), rates, flags)
