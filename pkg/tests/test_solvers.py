import math

import numpy as np
import pytest
import scipy.integrate
import scipy.sparse.linalg as spla

from dokc.errors import ConfigError, StepFailure, ValidationError
from dokc.expsum import CompressedKernel
from dokc.kernels import bump, exm1, exm2
from dokc.solvers import (
    DOFDEProblem,
    DOPDEProblem,
    GridSpec,
    KernelControls,
    assemble_laplacian,
    compressed_kernels,
    dowave2d,
    example1,
    example2,
    example2_forcing,
    geometric_eta,
    laplacian_eigenvalue,
    observed_rates,
    random_eta,
    scenario,
    solve_dofde,
    solve_dopde,
    space_bump,
    space_dependent,
    spatial_kernel_table,
    table1,
)
from dokc.timestepping import graded_mesh


def controls(cache, tol=1e-20):
    return KernelControls(tol=tol, cache=cache)


# -- scalar problems ---------------------------------------------------------------


def test_example2_reference_and_solution(kernel_cache):
    prob = example2()
    assert float(prob.reference(1.0)) == 7.0
    sol = solve_dofde(prob, "radau_iia_2", N=100, gamma=3.0, controls=controls(kernel_cache, 1e-40))
    assert sol.final == pytest.approx(7.0, abs=max(sol.error, 1e-12))
    assert sol.error < 1e-4


def test_example2_forcing_matches_quadrature():
    # f(t) = int_0^2 Gamma(4-a) D^a u da for u = t^3 + 2t + 4
    def D(a, t):
        out = 6 * t ** (3 - a) / math.gamma(4 - a)
        if a < 1:
            out += 2 * t ** (1 - a) / math.gamma(2 - a)
        return out

    for t in [1e-3, 0.2, 0.37, 1.0, 3.0]:
        ref = scipy.integrate.quad(lambda a: math.gamma(4 - a) * D(a, t), 0, 2, points=[1.0], epsabs=0.0, epsrel=1e-13, limit=200)[0]
        assert float(example2_forcing(np.array([t]))[0]) == pytest.approx(ref, rel=1e-13)


def test_zero_problem_gives_zero(kernel_cache):
    prob = DOFDEProblem(exm1(), [0.0, 0.0], lambda t, u: 0.0 * u, lambda t, u: 0.0 * u)
    sol = solve_dofde(prob, "radau_iia_3", N=20, controls=controls(kernel_cache, 1e-10))
    assert np.all(sol.u == 0.0)


def test_example1_newton_converges_quickly(kernel_cache):
    sol = solve_dofde(example1(), "radau_iia_2", N=100, controls=controls(kernel_cache))
    assert max(sol.newton_iterations) <= 8
    assert sol.error < 1e-5
    assert [k["m"] for k in sol.kernels] == [44, 44]


def test_initial_value_count_checked():
    with pytest.raises(ConfigError):
        DOFDEProblem(exm1(), [0.0], lambda t, u: u)


def test_missing_kernels_rejected():
    C = CompressedKernel([1.0], [1.0])
    with pytest.raises(ConfigError):
        solve_dofde(example1(), N=4, kernels=[(3, C)])
    with pytest.raises(ConfigError):
        solve_dofde(example1(), N=4, kernels=[(1, "not a kernel")])


def test_step_failure_reports_step(kernel_cache):
    def rhs(t, u):
        return np.where(t > 0.5, np.nan, 0.0) + 0 * u

    prob = DOFDEProblem(exm1(), [0.0, 0.0], rhs, lambda t, u: 0 * u)
    with pytest.raises(StepFailure) as exc:
        solve_dofde(prob, "implicit_euler", N=10, controls=controls(kernel_cache, 1e-10))
    assert exc.value.diagnostics["step"] == 5


def test_discrete_and_continuous_kernels_agree(kernel_cache):
    # fixed 200-point Gauss-Legendre kernels vs adaptive kernels
    cont = compressed_kernels(exm1(), controls(kernel_cache))
    disc = compressed_kernels(
        exm1(), KernelControls(tol=1e-20, cache=kernel_cache, rule_family="gauss-legendre", rule_size=200)
    )
    a = solve_dofde(example1(), "radau_iia_2", N=320, kernels=cont)
    b = solve_dofde(example1(), "radau_iia_2", N=320, kernels=disc)
    bound = 10 * sum(C.l1_error for _, C in cont + disc)
    assert np.max(np.abs(a.u - b.u)) <= bound


# -- grids and the Laplacian ---------------------------------------------------------


def test_laplacian_small_1d():
    L = assemble_laplacian(GridSpec(1, 3)).toarray()
    np.testing.assert_allclose(L, 9 * np.array([[-2.0, 1.0], [1.0, -2.0]]), rtol=1e-15)


@pytest.mark.parametrize("cells", [8, 33])
def test_laplacian_symmetric_negative_definite(cells):
    L = assemble_laplacian(GridSpec(2, cells))
    assert abs(L - L.T).max() == 0
    top = spla.eigsh(L, k=1, which="LA", return_eigenvectors=False)[0]
    assert top < 0


def test_laplacian_eigenvector():
    grid = GridSpec(2, 64)
    x1, x2 = grid.coordinates()
    v = np.sin(4 * np.pi * x1) * np.sin(4 * np.pi * x2)
    Lv = assemble_laplacian(grid) @ v
    mu = laplacian_eigenvalue(grid, (4, 4))
    assert np.max(np.abs(Lv - mu * v)) <= 1e-12 * np.max(np.abs(Lv))
    assert mu == pytest.approx(-32 * np.pi**2, rel=1e-2)


def test_grid_norm_and_layout():
    g = GridSpec(2, 4)
    assert g.ndof == 9 and g.dx == 0.25
    x1, x2 = g.coordinates()
    assert x1[0] == x1[1] == 0.25 and x2[1] == 0.5
    assert g.norm(np.ones(9)) == pytest.approx(3 * 0.25)
    with pytest.raises(ConfigError):
        GridSpec(3, 4)


# -- diffusion-wave problems -----------------------------------------------------------


def test_zero_pde_stays_zero(kernel_cache):
    prob = dowave2d(cells=16, forcing="zero")
    sol = solve_dopde(prob, "radau_iia_2", N=10, controls=controls(kernel_cache, 1e-10))
    assert np.all(sol.final == 0.0) and sol.max_error == 0.0


def test_table1_unknown_count_and_accuracy(kernel_cache):
    prob = table1(cells=16)
    sol = solve_dopde(prob, "radau_iia_2", N=32, controls=controls(kernel_cache), check_recurrence=True)
    assert sol.unknowns == 2 * prob.grid.ndof
    assert sol.recurrence <= 1e-12
    assert sol.max_error < 1e-4


def test_dopde_snapshots(kernel_cache):
    prob = table1(cells=8)
    sol = solve_dopde(prob, "implicit_euler", N=10, controls=controls(kernel_cache), snapshot_times=[0.5, 1.0])
    assert sorted(sol.snapshots) == [0.5, 1.0]
    np.testing.assert_array_equal(sol.snapshots[1.0], sol.final)


# -- space-dependent weights -------------------------------------------------------------


def test_constant_field_gives_single_entry(kernel_cache):
    eta = np.full(49, 1.17)
    table = spatial_kernel_table(eta, space_bump(0.5, 3), m=20, cache=kernel_cache)
    assert table.size == 1 and np.all(table.node_index == 0)
    assert table.m == 20


def test_geometric_table_partition(kernel_cache):
    grid = GridSpec(2, 64)
    eta = geometric_eta(grid.coordinates())
    table = spatial_kernel_table(eta, space_bump(0.5, 3), m=20, cache=kernel_cache)
    assert table.size == 4
    assert table.node_counts().sum() == grid.ndof
    # one compression per (value, nonzero kernel index)
    expected = sum(len([i for i in range(1, 4) if max(v - 0.5, 0) < i and min(v + 0.5, 3) > i - 1]) for v in table.values)
    assert len(table.kernels) == expected
    assert all(C.m == 20 for C in table.kernels.values())


def test_space_bump_normalised():
    from dokc.quadrature import integrate_adaptive

    for c in (0.5, 1.17, 2.5):
        w = space_bump(0.5, 3)(c)
        lo, hi = w.support
        assert integrate_adaptive(lambda a: w(a), lo, hi, 1e-13) == pytest.approx(1.0, abs=1e-10)


def test_too_many_field_values():
    with pytest.raises(ConfigError):
        spatial_kernel_table(np.linspace(0.5, 2.5, 17), space_bump(0.5, 3))


def test_random_field_seeded_and_quantised():
    coords = GridSpec(2, 32).coordinates()
    a, b, c = random_eta(coords, 1), random_eta(coords, 1), random_eta(coords, 2)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    assert set(np.unique(a)) <= {0.5, 1.17, 1.83, 2.5}


def test_geometric_scenario_finite_with_exact_recurrence(kernel_cache):
    prob = space_dependent("geometric", cells=64, m=20, cache=kernel_cache)
    sol = solve_dopde(prob, "radau_iia_2", N=300, check_recurrence=True, snapshot_times=[1.0, 2.0, 3.0])
    assert sol.recurrence <= 1e-12
    assert sorted(sol.snapshots) == [1.0, 2.0, 3.0]
    for u in sol.snapshots.values():
        assert np.all(np.isfinite(u))


def test_scenario_lookup():
    assert scenario("example2").name == "example2"
    assert scenario("table1", cells=8).grid.cells == 8
    with pytest.raises(ConfigError):
        scenario("lake")


def test_pde_problem_validation():
    g = GridSpec(1, 4)
    with pytest.raises(ConfigError):
        DOPDEProblem(g, 1.0, [np.zeros(3)], 1.0, weight=exm2())


def test_table_requires_common_term_count(monkeypatch):
    import dokc.solvers as S

    sizes = iter([3, 4, 3, 4, 3, 4])

    def fake(K, *a, **k):
        m = next(sizes)
        return CompressedKernel(np.ones(m), np.arange(m, dtype=float)), False

    monkeypatch.setattr(S, "compress_cached", fake)
    with pytest.raises(ValidationError):
        spatial_kernel_table(np.array([1.0, 2.0]), lambda c: bump(c, 0.5, alpha_max=3), m=3)


# -- rates -----------------------------------------------------------------------------------


def test_observed_rates():
    N = [10, 20, 40, 80, 160]
    errs = [1e-2, 1.25e-3, 1.5625e-4, 1.5e-4, 1.45e-4]
    t = observed_rates(N, errs)
    assert t.rates[0] is None
    assert t.rates[1] == pytest.approx(3.0) and t.rates[2] == pytest.approx(3.0)
    assert t.plateau == [False, False, False, True, True]
    assert t.asymptotic == pytest.approx(3.0)


def test_observed_rates_nonuniform_ratio():
    t = observed_rates([10, 30], [9e-2, 1e-2])
    assert t.rates[1] == pytest.approx(2.0)


def test_graded_mesh_used_by_solver(kernel_cache):
    mesh = graded_mesh(16, 2.0, 1.0)
    sol = solve_dofde(example2(), "implicit_euler", mesh=mesh, controls=controls(kernel_cache, 1e-40))
    np.testing.assert_array_equal(sol.t, mesh.nodes)
