import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from romsuite.errors import ValidationError
from romsuite.signals import (ControlCoeffs, SignalBatch, SignalSpec, constant_signal,
                              evaluate_signal, sample_coefficients, signal_grid)

finite = st.floats(-10, 10, allow_nan=False)
coeff_st = st.builds(lambda c0, c: ControlCoeffs(c0, tuple(c)), finite,
                     st.lists(finite, min_size=4, max_size=4))


def test_degenerate_distribution_gives_the_mean():
    c = sample_coefficients(SignalSpec(seed=5, mean_scale=0.0, amp_scale=0.0), 2)
    assert c.c0 == 1.0
    assert c.c == (0.0, 0.0, 0.0, 0.0)


def test_sampling_is_deterministic():
    a = sample_coefficients(SignalSpec(seed=7), 3)
    b = sample_coefficients(SignalSpec(seed=7), 3)
    assert a == b
    assert a != sample_coefficients(SignalSpec(seed=7), 4)


def test_streams_do_not_depend_on_generation_order():
    spec = SignalSpec(seed=9)
    forward = [sample_coefficients(spec, i) for i in range(5)]
    backward = [sample_coefficients(spec, i) for i in reversed(range(5))][::-1]
    assert forward == backward


def test_monte_carlo_moments():
    spec = SignalSpec(seed=42)
    draws = [sample_coefficients(spec, i) for i in range(1000)]
    c0 = np.array([d.c0 for d in draws])
    amps = np.array([d.c for d in draws])
    assert abs(c0.mean() - 1.0) <= 0.03
    assert abs(c0.std() - 0.25) <= 0.03
    assert np.all(np.abs(amps.mean(axis=0)) <= 0.03)
    assert np.all(np.abs(amps.std(axis=0) - 0.25) <= 0.03)


def test_negative_index_rejected():
    with pytest.raises(ValidationError):
        sample_coefficients(SignalSpec(), -1)


def test_constant_signal_values():
    c = ControlCoeffs(1.0, (0, 0, 0, 0))
    for t in (-3.0, 0.0, 17.5):
        assert evaluate_signal(c, t) == 1.0


def test_analytic_sine_values():
    c = ControlCoeffs(0.0, (1.0, 0, 0, 0))
    assert evaluate_signal(c, 4.0) == pytest.approx(1.0, abs=1e-15)
    assert abs(evaluate_signal(c, 8.0)) <= 1e-15


def test_signal_grid_examples():
    c = ControlCoeffs(1.0, (0, 0, 0, 0))
    assert signal_grid(c, 0.0, 1.0, 3).tolist() == [1.0, 1.0, 1.0]
    r = sample_coefficients(SignalSpec(seed=1), 0)
    assert signal_grid(r, 2.5, 0.1, 1)[0] == evaluate_signal(r, 2.5)


@pytest.mark.parametrize("dt,n", [(0.0, 3), (-1.0, 3), (0.1, 0)])
def test_signal_grid_rejects_bad_arguments(dt, n):
    with pytest.raises(ValidationError):
        signal_grid(ControlCoeffs(1.0, (0, 0, 0, 0)), 0.0, dt, n)


@given(coeff_st, st.floats(-50, 50), st.floats(0.01, 1.0), st.integers(1, 30))
@settings(max_examples=50, deadline=None)
def test_grid_matches_pointwise_calls_exactly(c, t0, dt, n):
    grid = signal_grid(c, t0, dt, n)
    for j in range(n):
        assert grid[j] == evaluate_signal(c, t0 + j * dt)


@given(coeff_st, st.floats(-200, 200))
@settings(max_examples=100, deadline=None)
def test_periodicity(c, t):
    scale = 1.0 + abs(c.c0) + sum(abs(v) for v in c.c)
    assert abs(evaluate_signal(c, t) - evaluate_signal(c, t + 128.0)) <= 1e-12 * scale


@given(coeff_st, st.floats(-5, 5), st.floats(-100, 100))
@settings(max_examples=100, deadline=None)
def test_linearity_in_coefficients(c, a, t):
    scaled = ControlCoeffs(a * c.c0, tuple(a * v for v in c.c))
    ref = a * evaluate_signal(c, t)
    # relative to the size of the summed terms, which bounds the rounding
    terms = abs(a) * (abs(c.c0) + sum(abs(v) for v in c.c)) + 1e-300
    assert abs(evaluate_signal(scaled, t) - ref) <= 1e-13 * terms


def test_json_round_trip_and_errors():
    c = sample_coefficients(SignalSpec(seed=3), 1)
    assert ControlCoeffs.from_json(c.to_json()) == c
    for bad in ({"c0": 1.0}, {"c0": 1.0, "c": [1, 2]}, {"c0": "x", "c": [0, 0, 0, 0]},
                {"c0": math.nan, "c": [0, 0, 0, 0]}, [1, 2]):
        with pytest.raises(ValidationError):
            ControlCoeffs.from_json(bad)


def test_batch_matches_scalar_evaluation():
    cs = [sample_coefficients(SignalSpec(seed=4), i) for i in range(6)]
    batch = SignalBatch(cs)
    for t in (0.0, 3.7, 100.25):
        np.testing.assert_allclose(batch(t), [evaluate_signal(c, t) for c in cs],
                                   rtol=0, atol=1e-14)
    assert constant_signal(2.5)(7.0) == 2.5
