import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from romsuite.errors import NumericalError, ValidationError
from romsuite.odeint import (CheckpointPolicy, TimeGrid, backward_checkpointed, integrate_forward,
                             rk4_step)


def expm(M):
    """Scaling-and-squaring Taylor exponential, adequate for small well-scaled matrices."""
    s = max(0, int(np.ceil(np.log2(max(np.abs(M).sum(axis=1).max(), 1e-300)))) + 4)
    X = M / 2.0**s
    out, term = np.eye(len(M)), np.eye(len(M))
    for k in range(1, 30):
        term = term @ X / k
        out = out + term
    for _ in range(s):
        out = out @ out
    return out


class Linear:
    """dz/dt = A z with the entries of A as parameters (row-major)."""

    def __init__(self, A):
        self.A = np.asarray(A, dtype=np.float64)

    def f(self, z, t):
        return z @ self.A.T

    def vjp(self, z, t, cot):
        gz = cot @ self.A
        gp = (cot.reshape(-1, cot.shape[-1]).T @ z.reshape(-1, z.shape[-1])).ravel()
        return gz, gp


def decay(z, t):
    return -z


def test_rk4_examples():
    z = np.array([0.3, -2.0])
    assert np.array_equal(rk4_step(lambda z, t: np.zeros_like(z), z, 0.0, 0.1), z)
    # RK4 on a linear ODE is the degree-4 Taylor polynomial of exp(-0.5) = 233/384
    taylor = float(sum(Fraction(-1, 2) ** k / math.factorial(k) for k in range(5)))
    assert taylor == 233 / 384
    assert abs(rk4_step(decay, np.array([1.0]), 0.0, 0.5)[0] - taylor) <= np.spacing(taylor)


def test_rk4_errors():
    with pytest.raises(ValidationError):
        rk4_step(decay, np.ones(1), 0.0, 0.0)
    with pytest.raises(NumericalError, match="t=2.5"):
        rk4_step(lambda z, t: np.array([np.inf]), np.ones(1), 2.5, 0.1)


def test_rk4_global_order():
    errors = []
    for n in (10, 20, 40, 80):
        samples, _ = integrate_forward(decay, np.ones(1), TimeGrid(0.0, 1.0 / n, n))
        errors.append(abs(samples[-1, 0] - np.exp(-1.0)))
    ratios = [a / b for a, b in zip(errors, errors[1:])]
    assert all(14.0 <= r <= 18.0 for r in ratios), ratios


def test_time_grid_validation():
    with pytest.raises(ValidationError):
        TimeGrid(0.0, 0.1, 7, 2)
    with pytest.raises(ValidationError):
        TimeGrid(0.0, -0.1, 4)
    with pytest.raises(ValidationError):
        CheckpointPolicy(0)
    g = TimeGrid(1.0, 0.05, 10, 5)
    assert g.n_samples == 3
    np.testing.assert_allclose(g.sample_times(), [1.0, 1.25, 1.5])


def test_zero_steps_single_sample():
    z0 = np.array([1.0, 2.0])
    samples, ckpts = integrate_forward(decay, z0, TimeGrid(0.0, 0.1, 0))
    assert samples.shape == (1, 2) and np.array_equal(samples[0], z0) and ckpts == []
    gz, gp = backward_checkpointed(decay, lambda z, t, c: (-c, np.zeros(0)), TimeGrid(0.0, 0.1, 0),
                                   CheckpointPolicy(), ckpts, np.array([[0.5, -1.0]]))
    np.testing.assert_array_equal(gz, [0.5, -1.0])
    assert gp.size == 0


def test_samples_reproduce_stepwise_rk4():
    sys = Linear([[-0.3, 1.0], [-1.0, -0.1]])
    z = np.array([1.0, 0.5])
    samples, _ = integrate_forward(sys.f, z, TimeGrid(0.0, 0.1, 12))
    for n in range(12):
        z = rk4_step(sys.f, z, 0.1 * n, 0.1)
        assert np.array_equal(samples[n + 1], z)
    strided, _ = integrate_forward(sys.f, samples[0], TimeGrid(0.0, 0.1, 12, 3))
    assert np.array_equal(strided, samples[::3])


@given(st.integers(1, 60), st.integers(1, 20), st.integers(1, 4))
@settings(max_examples=40, deadline=None)
def test_checkpoints_recompute_bitwise(n_steps, seg, stride):
    n_steps -= n_steps % stride
    if n_steps == 0:
        return
    sys = Linear([[-0.2, 0.7], [-0.9, 0.05]])
    grid = TimeGrid(0.0, 0.07, n_steps, stride)
    full, _ = integrate_forward(sys.f, np.array([1.0, -0.4]), TimeGrid(0.0, 0.07, n_steps))
    samples, ckpts = integrate_forward(sys.f, np.array([1.0, -0.4]), grid, CheckpointPolicy(seg))
    assert [s for s, _ in ckpts] == list(range(0, n_steps, seg))
    for step, state in ckpts:
        assert np.array_equal(state, full[step])
        # recompute forward from this checkpoint to the end
        z = state
        for n in range(step, n_steps):
            z = rk4_step(sys.f, z, grid.time(n), grid.dt)
        assert np.array_equal(z, samples[-1])


def test_zero_cotangents_give_zero_gradients():
    sys = Linear([[-0.2, 0.7], [-0.9, 0.05]])
    grid = TimeGrid(0.0, 0.1, 20, 5)
    _, ck = integrate_forward(sys.f, np.ones(2), grid, CheckpointPolicy(3))
    gz, gp = backward_checkpointed(sys.f, sys.vjp, grid, CheckpointPolicy(3), ck, np.zeros((5, 2)))
    assert np.all(gz == 0) and np.all(gp == 0)


def test_backward_rejects_mismatches():
    sys = Linear(np.eye(2))
    grid = TimeGrid(0.0, 0.1, 8)
    _, ck = integrate_forward(sys.f, np.ones(2), grid, CheckpointPolicy(4))
    with pytest.raises(ValidationError):
        backward_checkpointed(sys.f, sys.vjp, grid, CheckpointPolicy(3), ck, np.zeros((9, 2)))
    with pytest.raises(ValidationError):
        backward_checkpointed(sys.f, sys.vjp, grid, CheckpointPolicy(4), ck, np.zeros((3, 2)))


def test_linear_terminal_loss_matches_matrix_exponential():
    A = np.array([[-0.5, 1.2], [-0.8, 0.1]])
    sys = Linear(A)
    z0 = np.array([0.7, -1.1])
    T, n = 1.0, 100
    grid = TimeGrid(0.0, T / n, n, n)
    samples, ck = integrate_forward(sys.f, z0, grid, CheckpointPolicy(16))
    zT = samples[-1]
    # loss = |z(T)|^2 / 2
    cots = np.array([np.zeros(2), zT])
    gz, gp = backward_checkpointed(sys.f, sys.vjp, grid, CheckpointPolicy(16), ck, cots)
    E = expm(A * T)
    zT_exact = E @ z0
    np.testing.assert_allclose(gz, E.T @ zT_exact, atol=1e-6)
    # dL/dA = int_0^T exp(A^T (T-s)) z(T) z0^T exp(A^T s) ds, read off a block exponential
    blk = np.zeros((4, 4))
    blk[:2, :2] = A.T
    blk[2:, 2:] = A.T
    blk[:2, 2:] = np.outer(zT_exact, z0)
    dA = expm(blk * T)[:2, 2:]
    np.testing.assert_allclose(gp.reshape(2, 2), dA, atol=1e-6)


@pytest.mark.parametrize("seg", [1, 3, 4, 7, 60])
def test_segment_length_does_not_change_gradients(seg):
    sys = Linear([[-0.4, 0.9], [-1.3, 0.2]])
    rng = np.random.default_rng(seg)
    z0 = rng.standard_normal((3, 2))
    grid = TimeGrid(0.0, 0.05, 60, 5)
    cots = rng.standard_normal((grid.n_samples, 3, 2))

    def grads(L):
        _, ck = integrate_forward(sys.f, z0, grid, CheckpointPolicy(L))
        return backward_checkpointed(sys.f, sys.vjp, grid, CheckpointPolicy(L), ck, cots)

    ref_z, ref_p = grads(grid.n_steps)
    gz, gp = grads(seg)
    assert np.max(np.abs(gz - ref_z)) <= 1e-13 * np.abs(ref_z).max()
    assert np.max(np.abs(gp - ref_p)) <= 1e-13 * np.abs(ref_p).max()


@given(st.integers(1, 200), st.integers(1, 40))
@settings(max_examples=40, deadline=None)
def test_peak_storage_bound(n_steps, seg):
    sys = Linear([[-0.1, 0.2], [-0.2, -0.1]])
    grid = TimeGrid(0.0, 0.01, n_steps)
    _, ck = integrate_forward(sys.f, np.ones(2), grid, CheckpointPolicy(seg))
    stats = {}
    backward_checkpointed(sys.f, sys.vjp, grid, CheckpointPolicy(seg), ck,
                          np.ones((grid.n_samples, 2)), stats=stats)
    assert stats["peak_stored"] <= n_steps / seg + seg + 1
