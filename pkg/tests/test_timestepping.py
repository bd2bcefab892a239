import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dokc import mpcore
from dokc.errors import ConfigError, DomainError, StepFailure
from dokc.timestepping import (
    ModeFamily,
    ModeSystemState,
    OperatorCache,
    build_stage_maps,
    condensation_operators,
    condensed_step,
    graded_mesh,
    make_tableau,
    mode_stage_derivatives,
    newton_solve,
)

TABLEAUS = ["implicit_euler", "sdirk2", "radau_iia_2", "radau_iia_3"]


def uncondensed_step(tableau, h, t, derivs, modes, families, coef, forcing):
    """Dense solve of the full stage system, no condensation.

    The constraint is linear: sum of mode stage values + sum_i coef[i] V^(i)
    = forcing(t_stage).  Unknowns are k^(0..p) and every k^{ij}.
    """
    A, b, c = tableau.A, tableau.b, tableau.c
    s = tableau.stages
    p = len(derivs) - 1
    H = h * A
    I = np.eye(s)
    one = np.ones(s)
    mode_list = [(fi, j) for fi, fam in enumerate(families) for j in range(len(fam[0]))]
    n = s * (p + 1 + len(mode_list))
    M = np.zeros((n, n))
    rhs = np.zeros(n)

    def kd(i):
        return slice(s * i, s * (i + 1))

    def km(q):
        return slice(s * (p + 1 + q), s * (p + 2 + q))

    row = 0
    # constraint rows
    r = slice(row, row + s)
    for q, (fi, j) in enumerate(mode_list):
        rhs[r] -= modes[fi][j] * one
        M[r, km(q)] += H
    for i in range(p + 1):
        rhs[r] -= coef[i] * derivs[i] * one
        M[r, kd(i)] += coef[i] * H
    rhs[r] += forcing(t + c * h)
    row += s
    # derivative chain: k^(i-1) - H k^(i) = v^(i) 1
    for i in range(1, p + 1):
        r = slice(row, row + s)
        M[r, kd(i - 1)] += I
        M[r, kd(i)] -= H
        rhs[r] += derivs[i] * one
        row += s
    # modes: (I + lam H) k^{ij} - w k^(i-1) = -lam v_ij 1
    for q, (fi, j) in enumerate(mode_list):
        w, lam, i = families[fi][0][j], families[fi][1][j], families[fi][2]
        r = slice(row, row + s)
        M[r, km(q)] += I + lam * H
        M[r, kd(i - 1)] -= w * I
        rhs[r] += -lam * modes[fi][j] * one
        row += s
    # the dense system is ill-conditioned for large lam*h, so solve it in 256 bits
    with mpcore.workprec(256):
        x = mpcore.solve_dense(mpcore.mpfarray(M), mpcore.mpfarray(rhs))
    x = mpcore.to_float_array(x)
    new_derivs = [derivs[i] + h * b @ x[kd(i)] for i in range(p + 1)]
    new_modes = [[modes[fi][j] + h * b @ x[km(q)] for q, (fi, j) in enumerate(mode_list) if fi == f] for f in range(len(families))]
    return np.array(new_derivs), new_modes, x[kd(p)]


def linear_stage_solver(coef, forcing):
    def solve(maps, guess):
        J = sum(coef[i] * maps.T[i] for i in range(len(coef)))
        for Mg, _ in maps.mode_jacobian_blocks():
            J = J + Mg
        rhs = forcing(maps.t)[:, None] - maps.S - sum(coef[i] * maps.V0[i] for i in range(len(coef)))
        return np.linalg.solve(J, rhs), None

    return solve


def random_instance(rng, scheme, p, nmodes):
    tab = make_tableau(scheme)
    fams = []
    for i in range(1, p + 1):
        m = int(rng.integers(0, nmodes + 1))
        lam = np.sort(rng.uniform(0, 1e6, m) * 10 ** rng.uniform(-6, 0, m))
        w = rng.uniform(0.1, 2.0, m)
        fams.append((w, lam, i))
    derivs = rng.normal(size=p + 1)
    modes = [rng.normal(size=len(f[0])) for f in fams]
    coef = rng.uniform(0.5, 2.0, p + 1)
    h = 10 ** rng.uniform(-3, 0)
    t = rng.uniform(0, 1)
    return tab, fams, derivs, modes, coef, h, t


def run_condensed(tab, fams, derivs, modes, coef, h, t, forcing):
    families = [ModeFamily.uniform(i, w, lam) for (w, lam, i) in fams]
    state = ModeSystemState.initial(list(derivs), families, N=1, t0=t)
    for f, m in enumerate(modes):
        state.modes[f][0][:, 0] = m
    new, K, diag = condensed_step(state, families, tab, h, linear_stage_solver(coef, forcing))
    return new, K, diag


def test_condensation_matches_uncondensed_oracle():
    rng = np.random.default_rng(20240611)
    worst = 0.0
    count = 0
    for _ in range(250):
        scheme = TABLEAUS[int(rng.integers(0, 4))]
        p = int(rng.integers(1, 3))
        inst = random_instance(rng, scheme, p, 5)
        tab, fams, derivs, modes, coef, h, t = inst
        forcing = lambda tt: np.cos(3 * tt) + tt**2
        new, K, _ = run_condensed(*inst, forcing)
        d_ref, m_ref, K_ref = uncondensed_step(tab, h, t, derivs, modes, fams, coef, forcing)
        scale = max(1.0, np.max(np.abs(d_ref)))
        worst = max(worst, np.max(np.abs(new.derivs[:, 0] - d_ref)) / scale)
        for f in range(len(fams)):
            if len(m_ref[f]):
                got = new.modes[f][0][:, 0]
                worst = max(worst, np.max(np.abs(got - np.array(m_ref[f]))) / max(1.0, np.max(np.abs(m_ref[f]))))
        count += 1
    assert count >= 200
    assert worst <= 1e-12


def test_unknown_count_independent_of_modes():
    tab = make_tableau("radau_iia_2")
    rng = np.random.default_rng(1)
    for m in (0, 3, 40):
        fams = [(rng.uniform(1, 2, m), np.sort(rng.uniform(0, 100, m)), 1)]
        _, K, diag = run_condensed(tab, fams, np.array([1.0, 0.5]), [np.zeros(m)], np.ones(2), 0.1, 0.0, lambda t: t)
        assert diag.unknowns == tab.stages * 1


def test_zero_modes_reduces_to_backward_euler_chain():
    # F = k^(p) - g(t): v^(p) stage = v^(p) + h K, explicit forcing
    tab = make_tableau("implicit_euler")
    h = 0.1
    state = ModeSystemState.initial([1.0, 2.0], [], N=1)

    def solve(maps, guess):
        return np.array([[np.sin(maps.t[0])]]), None

    new, K, _ = condensed_step(state, [], tab, h, solve)
    g = math.sin(h)
    v1 = 2.0 + h * g
    v0 = 1.0 + h * v1
    assert new.derivs[1, 0] == pytest.approx(v1, rel=1e-15)
    assert new.derivs[0, 0] == pytest.approx(v0, rel=1e-15)


def test_scalar_step_by_hand():
    # p=1, one mode, implicit Euler, constraint: mode + c0 v0 = q(t)
    tab = make_tableau("implicit_euler")
    w, lam, h, c0 = 0.7, 3.0, 0.25, 1.5
    v0, v1, u = 0.3, -0.2, 0.4
    q = lambda t: 1.0 + t
    # stages: V0 = v0 + h V1, V1 = v1 + h K; mode: U = (u + h w V1)/(1 + lam h)
    # U + c0 V0 = q(h)
    a = 1 / (1 + lam * h)
    # U = a u + a h w (v1 + h K); V0 = v0 + h v1 + h^2 K
    K = (q(h) - a * u - a * h * w * v1 - c0 * (v0 + h * v1)) / (a * h * w * h + c0 * h * h)
    V1 = v1 + h * K
    fams = [(np.array([w]), np.array([lam]), 1)]
    new, Kc, _ = run_condensed(tab, fams, np.array([v0, v1]), [np.array([u])], np.array([c0, 0.0]), h, 0.0, q)
    assert Kc[0, 0] == pytest.approx(K, rel=1e-14)
    assert new.derivs[1, 0] == pytest.approx(V1, rel=1e-14)
    assert new.modes[0][0][0, 0] == pytest.approx(a * (u + h * w * V1), rel=1e-14)


def test_mode_recurrence_holds_after_step():
    rng = np.random.default_rng(7)
    tab, fams, derivs, modes, coef, h, t = random_instance(rng, "radau_iia_3", 2, 5)
    families = [ModeFamily.uniform(i, w, lam) for (w, lam, i) in fams]
    state = ModeSystemState.initial(list(derivs), families, N=1, t0=t)
    for f, m in enumerate(modes):
        state.modes[f][0][:, 0] = m
    cache = OperatorCache(tab)
    solve = linear_stage_solver(coef, lambda tt: np.exp(tt))
    new, K, _ = condensed_step(state, families, tab, h, solve, cache)
    kij = mode_stage_derivatives(state, families, tab, h, K, cache)
    H = h * tab.A
    for fi, fam in enumerate(families):
        w, lam = fam.terms[0]
        maps, _ = build_stage_maps(state, families, tab, h, cache)
        Vi = maps.stage_value(fam.index, K)
        for j in range(len(w)):
            k = kij[fi][0][j][:, 0]
            lhs = k
            rhs = -lam[j] * (state.modes[fi][0][j, 0] + H @ k) + w[j] * Vi[:, 0]
            assert np.max(np.abs(lhs - rhs)) <= 1e-12 * max(1.0, np.max(np.abs(k)), lam[j] * np.max(np.abs(H @ k)))


# -- tableaus --------------------------------------------------------------------


def test_tableau_examples():
    ie = make_tableau("implicit_euler")
    assert ie.A.tolist() == [[1.0]] and ie.order == 1
    r2 = make_tableau("radau_iia_2")
    np.testing.assert_allclose(r2.A, [[5 / 12, -1 / 12], [3 / 4, 1 / 4]], rtol=0, atol=1e-16)
    np.testing.assert_allclose(r2.b, [0.75, 0.25])
    np.testing.assert_allclose(r2.c, [1 / 3, 1.0])
    assert r2.order == 3
    sd = make_tableau("sdirk2")
    assert sd.A[0, 0] == pytest.approx(1 - 1 / math.sqrt(2)) and sd.order == 2 and sd.l_stable
    np.testing.assert_array_equal(make_tableau("radau_iia_1").A, ie.A)
    with pytest.raises(ConfigError):
        make_tableau("rk4")


@pytest.mark.parametrize("scheme", TABLEAUS)
def test_tableau_consistency(scheme):
    tab = make_tableau(scheme)
    np.testing.assert_allclose(tab.A.sum(axis=1), tab.c, atol=1e-15)
    np.testing.assert_allclose(tab.b, tab.A[-1], atol=1e-15)
    assert np.all(np.linalg.eigvals(tab.A).real > 0)
    # L-stability: R(z) -> 0 as z -> -inf
    z = -1e12
    R = 1 + z * tab.b @ np.linalg.solve(np.eye(tab.stages) - z * tab.A, np.ones(tab.stages))
    assert abs(R) < 1e-9


@pytest.mark.parametrize("scheme", TABLEAUS)
def test_observed_order_on_linear_decay(scheme):
    # y' + y = 0 as a chain: p = 1, K = v^(1)' , constraint v^(1) + v^(0) = 0
    tab = make_tableau(scheme)

    def solve(maps, guess):
        J = maps.T[1] + maps.T[0]
        return np.linalg.solve(J, -(maps.V0[1] + maps.V0[0])), None

    errs = []
    Ns = [20, 40, 80, 160, 320]
    for N in Ns:
        h = 1.0 / N
        state = ModeSystemState.initial([1.0, -1.0], [], N=1)
        cache = OperatorCache(tab)
        for _ in range(N):
            state, _, _ = condensed_step(state, [], tab, h, solve, cache)
        errs.append(abs(state.derivs[0, 0] - math.exp(-1.0)))
    rates = [math.log2(a / b) for a, b in zip(errs[:-1], errs[1:]) if b > 1e-14]
    assert rates, errs
    assert abs(rates[-1] - tab.order) <= 0.2 or (tab.order == 5 and errs[-1] < 1e-13)


# -- operators -----------------------------------------------------------------


def test_condensation_operator_examples():
    ops = condensation_operators(make_tableau("implicit_euler"), 1.0, [1.0], [1.0])
    assert ops.B[0, 0, 0] == pytest.approx(0.5)
    tab = make_tableau("radau_iia_2")
    ops = condensation_operators(tab, 0.3, [1.0], [0.0])
    np.testing.assert_array_equal(ops.B[0], np.eye(2))


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-6, 1.0), st.floats(0.0, 1e7), st.sampled_from(TABLEAUS))
def test_condensation_inverse_residual(h, lam, scheme):
    tab = make_tableau(scheme)
    ops = condensation_operators(tab, h, [1.0], [lam])
    res = ops.B[0] @ (np.eye(tab.stages) + lam * h * tab.A) - np.eye(tab.stages)
    assert np.max(np.abs(res)) <= 1e-13


def test_l_stability_huge_rates():
    tab = make_tableau("radau_iia_2")
    lam = np.array([1e12, 5e12, 1e13])
    w = np.ones(3)
    fams = [(w, lam, 1)]
    new, _, _ = run_condensed(tab, fams, np.array([0.0, 1.0]), [np.ones(3)], np.ones(2), 0.01, 0.0, lambda t: 0 * t)
    modes = new.modes[0][0][:, 0]
    assert np.all(np.isfinite(modes))
    assert np.all(np.abs(modes) <= 1.0 + 10 * w / lam * 1e2)


def test_cache_reuse_on_uniform_mesh():
    tab = make_tableau("sdirk2")
    fam = ModeFamily.uniform(1, [1.0, 2.0], [0.5, 50.0])
    state = ModeSystemState.initial([0.0, 1.0], [fam], N=1)
    cache = OperatorCache(tab)
    solve = linear_stage_solver(np.ones(2), lambda t: np.sin(t))
    for _ in range(10):
        state, _, _ = condensed_step(state, [fam], tab, 0.1, solve, cache)
    assert cache.misses == 1 and cache.hits >= 9


# -- meshes --------------------------------------------------------------------


def test_graded_mesh_examples():
    np.testing.assert_allclose(graded_mesh(4, 1, 1).nodes, [0, 0.25, 0.5, 0.75, 1])
    np.testing.assert_allclose(graded_mesh(2, 2, 1).nodes, [0, 0.25, 1])
    m = graded_mesh(320, 5, 1.0)
    assert m.nodes[1] == pytest.approx(320.0**-5, rel=1e-14)
    assert m.nodes[1] == pytest.approx(2.98e-13, rel=1e-2)
    with pytest.raises(DomainError):
        graded_mesh(4, 0.5, 1)


@given(st.integers(1, 500), st.floats(1, 6), st.floats(0.1, 10))
def test_graded_mesh_increasing(N, gamma, T):
    m = graded_mesh(N, gamma, T)
    assert np.all(np.diff(m.nodes) > 0) and m.nodes[-1] == T and len(m) == N + 1


# -- Newton ------------------------------------------------------------------------


def test_newton_linear_one_iteration():
    A = np.array([[3.0, 1.0], [1.0, 2.0]])
    b = np.array([1.0, -1.0])
    res = newton_solve(lambda x: A @ x - b, lambda x: A, np.zeros(2))
    assert res.iterations == 1
    np.testing.assert_allclose(A @ res.x, b, atol=1e-12)


def test_newton_quadratic():
    res = newton_solve(lambda x: x**2 - 4, lambda x: np.diag(2 * x), np.array([3.0]))
    assert res.x[0] == pytest.approx(2.0, abs=1e-12)
    assert res.iterations <= 6


def test_newton_failure_carries_history():
    with pytest.raises(StepFailure) as exc:
        newton_solve(lambda x: x**2 + 1, lambda x: np.diag(2 * x), np.array([0.5]), max_iter=5)
    assert exc.value.diagnostics["residuals"]


def test_output_buffers_give_identical_step():
    rng = np.random.default_rng(3)
    tab = make_tableau("radau_iia_2")
    fams = [(rng.uniform(0.1, 2, 4), np.sort(rng.uniform(0, 1e3, 4)), i) for i in (1, 2)]
    modes = [rng.normal(size=4) for _ in fams]
    args = (tab, fams, rng.normal(size=3), modes, rng.uniform(0.5, 2, 3), 0.05, 0.2)
    forcing = lambda tt: np.cos(tt)
    ref, _, _ = run_condensed(*args, forcing)
    families = [ModeFamily.uniform(i, w, lam) for (w, lam, i) in fams]
    state = ModeSystemState.initial(list(args[2]), families, N=1, t0=0.2)
    for f, m in enumerate(modes):
        state.modes[f][0][:, 0] = m
    buffers = [[np.full_like(a, np.nan) for a in grp] for grp in state.modes]
    got, _, _ = condensed_step(state, families, tab, 0.05, linear_stage_solver(args[4], forcing), out=buffers)
    for f in range(len(families)):
        np.testing.assert_array_equal(got.modes[f][0], ref.modes[f][0])
        assert got.modes[f][0] is buffers[f][0]
