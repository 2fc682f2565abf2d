import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from romsuite.errors import NumericalError, ValidationError
from romsuite.fom import Grid1D, PhysicalParams
from romsuite.galerkin import (ReducedOperators, VelocityMap, build_reduced_operators, cholesky,
                               cholesky_solve, cross_validate_ridge, diffusion_matrix,
                               eval_reduced_rhs, fit_velocity_map, linear_rhs_full, load_rom,
                               predict_velocity, save_rom)


def orthonormal(n, r, seed):
    Q, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((n, r)))
    return Q


def stencils(n_c):
    """Dense D2 and central D1 built entry by entry."""
    dx = 1.0 / (n_c - 1)
    D2 = np.zeros((n_c, n_c))
    D1 = np.zeros((n_c, n_c))
    for j in range(1, n_c - 1):
        D2[j, j - 1], D2[j, j], D2[j, j + 1] = 1 / dx**2, -2 / dx**2, 1 / dx**2
        D1[j, j - 1], D1[j, j + 1] = -0.5 / dx, 0.5 / dx
    # mirror ghost at the outlet
    D2[-1, -2], D2[-1, -1] = 2 / dx**2, -2 / dx**2
    return D2, D1


def test_identity_basis_gives_raw_stencil():
    n = 20
    g, p = Grid1D(n), PhysicalParams()
    ops = build_reduced_operators(np.eye(n), np.zeros((n, 1)), g, p)
    D2, _ = stencils(n)
    assert np.array_equal(ops.L_red, p.diffusivity * diffusion_matrix(g))
    np.testing.assert_allclose(ops.L_red, p.diffusivity * D2, rtol=1e-14, atol=1e-14)
    assert np.all(ops.A_red == 0.0)


def test_operators_match_triple_product_loops():
    n, nT, nu = 16, 3, 2
    g, p = Grid1D(n), PhysicalParams()
    VT, Vu = orthonormal(n, nT, 0), orthonormal(n, nu, 1)
    ops = build_reduced_operators(VT, Vu, g, p)
    D2, D1 = stencils(n)
    for j in range(nT):
        for i in range(nT):
            ref = p.diffusivity * sum(VT[a, j] * D2[a, b] * VT[b, i]
                                      for a in range(n) for b in range(n))
            assert abs(ops.L_red[j, i] - ref) <= 1e-12 * max(1, abs(ref))
            for k in range(nu):
                ref = sum(VT[a, j] * Vu[a, k] * D1[a, b] * VT[b, i]
                          for a in range(n) for b in range(n))
                assert abs(ops.A_red[k, j, i] - ref) <= 1e-12 * max(1, abs(ref))


def test_change_of_basis():
    n = 30
    g, p = Grid1D(n), PhysicalParams()
    VT, Vu = orthonormal(n, 4, 2), orthonormal(n, 2, 3)
    Q = orthonormal(4, 4, 4)
    a = build_reduced_operators(VT, Vu, g, p)
    b = build_reduced_operators(VT @ Q, Vu, g, p)
    np.testing.assert_allclose(b.L_red, Q.T @ a.L_red @ Q, atol=1e-10 * np.abs(a.L_red).max())


def test_grid_mismatch_rejected():
    g, p = Grid1D(10), PhysicalParams()
    with pytest.raises(ValidationError):
        build_reduced_operators(np.eye(10), np.zeros((9, 1)), g, p)


@pytest.mark.parametrize("r", [1, 3, 6, 48])
def test_galerkin_consistency_through_full_space(r):
    n = 48
    g, p = Grid1D(n), PhysicalParams()
    VT, Vu = orthonormal(n, r, r), orthonormal(n, 3, 100 + r)
    ops = build_reduced_operators(VT, Vu, g, p)
    rng = np.random.default_rng(r)
    for _ in range(100):
        a, au = rng.standard_normal(r), rng.standard_normal(3)
        ref = VT.T @ linear_rhs_full(VT @ a, Vu @ au, g, p)
        got = eval_reduced_rhs(a, au, ops)
        assert np.max(np.abs(got - ref)) <= 1e-11 * max(1.0, np.abs(ref).max())


def test_reduced_rhs_examples():
    n = 12
    ops = build_reduced_operators(orthonormal(n, 3, 0), orthonormal(n, 2, 1), Grid1D(n),
                                  PhysicalParams())
    assert np.all(eval_reduced_rhs(np.zeros(3), np.ones(2), ops) == 0.0)
    a = np.array([0.3, -1.0, 2.0])
    np.testing.assert_array_equal(eval_reduced_rhs(a, np.zeros(2), ops), ops.L_red @ a)
    with pytest.raises(ValidationError):
        eval_reduced_rhs(np.zeros(2), np.zeros(2), ops)


@given(st.integers(0, 10**6))
@settings(max_examples=40, deadline=None)
def test_bilinearity(seed):
    n = 14
    rng = np.random.default_rng(seed)
    ops = build_reduced_operators(orthonormal(n, 3, seed), orthonormal(n, 2, seed + 1),
                                  Grid1D(n), PhysicalParams())
    a1, a2, au, au2 = (rng.standard_normal(k) for k in (3, 3, 2, 2))
    s, t = rng.standard_normal(2)
    f = lambda a, u: eval_reduced_rhs(a, u, ops)
    scale = 1 + max(np.abs(f(a1, au)).max(), np.abs(f(a2, au)).max())
    np.testing.assert_allclose(f(s * a1 + t * a2, au), s * f(a1, au) + t * f(a2, au),
                               atol=1e-12 * scale * (1 + abs(s) + abs(t)))
    # affine in a_u: f(a, u) - f(a, 0) is linear in u
    lin = lambda u: f(a1, u) - f(a1, np.zeros(2))
    np.testing.assert_allclose(lin(s * au + t * au2), s * lin(au) + t * lin(au2),
                               atol=1e-12 * scale * (1 + abs(s) + abs(t)) * 10)


def test_cholesky_against_dense_solver():
    rng = np.random.default_rng(0)
    M = rng.standard_normal((7, 7))
    A = M @ M.T + 7 * np.eye(7)
    L = cholesky(A)
    np.testing.assert_allclose(L @ L.T, A, atol=1e-12)
    B = rng.standard_normal((7, 3))
    np.testing.assert_allclose(cholesky_solve(L, B), np.linalg.solve(A, B), atol=1e-12)
    with pytest.raises(NumericalError):
        cholesky(np.array([[1.0, 2.0], [2.0, 1.0]]))


def test_exact_affine_recovery():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((40, 4))
    W = rng.standard_normal((3, 4))
    b = rng.standard_normal(3)
    Y = X @ W.T + b
    vm = fit_velocity_map(X, Y, 0.0)
    np.testing.assert_allclose(vm.W, W, atol=1e-10)
    np.testing.assert_allclose(vm.b, b, atol=1e-10)
    np.testing.assert_allclose(predict_velocity(vm, X[:, :3], X[:, 3]), Y, atol=1e-10)
    # list-of-pairs features give the same fit
    pairs = [(row[:3], row[3]) for row in X]
    np.testing.assert_allclose(fit_velocity_map(pairs, Y, 0.0).W, vm.W, atol=1e-12)


def test_huge_penalty_limits():
    rng = np.random.default_rng(2)
    X, Y = rng.standard_normal((30, 3)), rng.standard_normal((30, 2))
    vm = fit_velocity_map(X, Y, 1e12)
    assert np.abs(vm.W).max() <= 1e-6
    np.testing.assert_allclose(vm.b, Y.mean(axis=0), atol=1e-6)


def test_matches_normal_equation_oracle():
    rng = np.random.default_rng(3)
    X, Y = rng.standard_normal((12, 3)), rng.standard_normal((12, 2))
    lam = 0.3
    # augmented system with an unpenalized intercept column
    Xa = np.column_stack([X, np.ones(12)])
    P = lam * np.diag([1, 1, 1, 0.0])
    coef = np.linalg.solve(Xa.T @ Xa + P, Xa.T @ Y)
    vm = fit_velocity_map(X, Y, lam)
    np.testing.assert_allclose(vm.W, coef[:3].T, atol=1e-9)
    np.testing.assert_allclose(vm.b, coef[3], atol=1e-9)


def test_fit_errors_and_rank_deficiency():
    with pytest.raises(ValidationError):
        fit_velocity_map(np.ones((1, 2)), np.ones((1, 1)), 0.1)
    with pytest.raises(ValidationError):
        fit_velocity_map(np.ones((4, 2)), np.ones((4, 1)), -1.0)
    X = np.column_stack([np.arange(5.0), 2 * np.arange(5.0)])
    with pytest.raises(NumericalError):
        fit_velocity_map(X, np.arange(5.0), 0.0)


def test_predict_examples():
    vm = VelocityMap(np.zeros((2, 4)), np.array([1.0, -2.0]), 0.0)
    np.testing.assert_array_equal(predict_velocity(vm, np.ones(3), 5.0), [1.0, -2.0])
    rng = np.random.default_rng(4)
    vm = VelocityMap(rng.standard_normal((2, 4)), rng.standard_normal(2), 0.0)
    a, S = rng.standard_normal(3), 0.7
    np.testing.assert_allclose(predict_velocity(vm, a, S), vm.W @ np.r_[a, S] + vm.b, rtol=1e-14)
    with pytest.raises(ValidationError):
        predict_velocity(vm, np.ones(2), 1.0)


def test_training_residual_monotone_in_penalty():
    rng = np.random.default_rng(5)
    X = rng.standard_normal((25, 4))
    Y = X @ rng.standard_normal((4, 2)) + 0.1 * rng.standard_normal((25, 2))
    rss = []
    for lam in [1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8]:
        vm = fit_velocity_map(X, Y, lam)
        rss.append(float(np.sum((X @ vm.W.T + vm.b - Y) ** 2)))
    assert all(b <= a * (1 + 1e-12) for a, b in zip(rss, rss[1:]))


def test_cross_validation_picks_from_grid():
    rng = np.random.default_rng(6)
    X = rng.standard_normal((50, 3))
    Y = X @ rng.standard_normal((3, 2)) + 0.01 * rng.standard_normal((50, 2))
    grid = [10.0**k for k in range(-8, -1)]
    lam, scores = cross_validate_ridge(X, Y, grid, folds=5)
    assert lam in grid and len(scores) == len(grid)
    assert scores[grid.index(lam)] == min(scores)


def test_rom_persistence(tmp_path):
    rng = np.random.default_rng(7)
    ops = ReducedOperators(rng.standard_normal((3, 3)), rng.standard_normal((2, 3, 3)))
    vm = VelocityMap(rng.standard_normal((2, 4)), rng.standard_normal(2), 1e-6)
    save_rom(tmp_path, ops, vm, {"note": 1})
    o2, v2, meta = load_rom(tmp_path)
    assert o2.A_red.tobytes() == ops.A_red.tobytes() and o2.L_red.tobytes() == ops.L_red.tobytes()
    assert v2.W.tobytes() == vm.W.tobytes() and v2.b.tobytes() == vm.b.tobytes()
    assert meta["ridge_lambda"] == 1e-6 and meta["note"] == 1
