"""Fixed-step RK4 rollouts and their exact discrete adjoint.

The reverse pass differentiates the RK4 recurrence itself, so its gradients
are the exact derivatives of what the forward pass computed. Memory is bounded
by keeping states only at every ``segment_length``-th step and recomputing each
segment from its checkpoint during the reverse sweep.

``f(z, t)`` returns dz/dt and ``vjp(z, t, cot)`` returns
``(cot^T df/dz, cot^T df/dparams)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import NumericalError, ValidationError

Dynamics = Callable[[np.ndarray, float], np.ndarray]
DynamicsVjp = Callable[[np.ndarray, float, np.ndarray], "tuple[np.ndarray, np.ndarray]"]


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    dt: float
    n_steps: int
    sample_stride: int = 1

    def __post_init__(self):
        if not self.dt > 0:
            raise ValidationError("dt must be positive")
        if self.n_steps < 0 or self.sample_stride < 1:
            raise ValidationError("n_steps must be >= 0 and sample_stride >= 1")
        if self.n_steps % self.sample_stride:
            raise ValidationError(
                f"n_steps={self.n_steps} is not divisible by sample_stride={self.sample_stride}")

    @property
    def n_samples(self) -> int:
        return self.n_steps // self.sample_stride + 1

    def time(self, step: int) -> float:
        return self.t0 + step * self.dt

    def sample_times(self) -> np.ndarray:
        return np.array([self.time(i * self.sample_stride) for i in range(self.n_samples)])


@dataclass(frozen=True)
class CheckpointPolicy:
    segment_length: int = 16

    def __post_init__(self):
        if self.segment_length < 1:
            raise ValidationError("segment_length must be at least 1")


def _rk4(f: Dynamics, z: np.ndarray, t: float, dt: float) -> np.ndarray:
    half = 0.5 * dt
    k1 = f(z, t)
    k2 = f(z + half * k1, t + half)
    k3 = f(z + half * k2, t + half)
    k4 = f(z + dt * k3, t + dt)
    return z + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_step(f: Dynamics, z: np.ndarray, t: float, dt: float) -> np.ndarray:
    if not dt > 0:
        raise ValidationError("dt must be positive")
    z_new = _rk4(f, z, t, dt)
    if not np.all(np.isfinite(z_new)):
        raise NumericalError(f"non-finite state after RK4 step from t={t:g}")
    return z_new


def _rk4_step_vjp(f: Dynamics, vjp: DynamicsVjp, z: np.ndarray, t: float, dt: float,
                  cot: np.ndarray):
    half = 0.5 * dt
    k1 = f(z, t)
    z2 = z + half * k1
    k2 = f(z2, t + half)
    z3 = z + half * k2
    k3 = f(z3, t + half)
    z4 = z + dt * k3

    g4, p4 = vjp(z4, t + dt, (dt / 6.0) * cot)
    g3, p3 = vjp(z3, t + half, (dt / 3.0) * cot + dt * g4)
    g2, p2 = vjp(z2, t + half, (dt / 3.0) * cot + half * g3)
    g1, p1 = vjp(z, t, (dt / 6.0) * cot + half * g2)
    gz = cot + g4 + g3 + g2 + g1
    gp = p4 + p3 + p2 + p1
    return gz, gp


def integrate_forward(f: Dynamics, z0: np.ndarray, grid: TimeGrid,
                      policy: CheckpointPolicy = CheckpointPolicy()):
    """Roll out ``n_steps`` RK4 steps.

    Returns ``(samples, checkpoints)``: states at every ``sample_stride``-th
    step stacked along axis 0, and ``(step, state)`` pairs at every
    ``segment_length``-th step below ``n_steps``.
    """
    z = np.array(z0, dtype=np.float64)
    samples = np.empty((grid.n_samples,) + z.shape)
    samples[0] = z
    checkpoints = []
    for n in range(grid.n_steps):
        if n % policy.segment_length == 0:
            checkpoints.append((n, z))
        z = rk4_step(f, z, grid.time(n), grid.dt)
        if (n + 1) % grid.sample_stride == 0:
            samples[(n + 1) // grid.sample_stride] = z
    return samples, checkpoints


def backward_checkpointed(f: Dynamics, vjp: DynamicsVjp, grid: TimeGrid, policy: CheckpointPolicy,
                          checkpoints, loss_cotangents, n_params: int = 0, stats: dict | None = None):
    """Gradient of ``sum_i <loss_cotangents[i], sample_i>`` w.r.t. ``z0`` and parameters.

    ``stats``, if given, receives ``peak_stored``: the largest number of states
    held at once (checkpoints plus one recomputed segment).
    """
    cots = np.asarray(loss_cotangents, dtype=np.float64)
    if cots.shape[0] != grid.n_samples:
        raise ValidationError(
            f"expected {grid.n_samples} loss cotangents, got {cots.shape[0]}")
    L = policy.segment_length
    expected = list(range(0, grid.n_steps, L))
    if [step for step, _ in checkpoints] != expected:
        raise ValidationError("checkpoints do not match the time grid and policy")

    adj = cots[-1].copy()
    g_params = None
    peak = len(checkpoints)
    for start, z_start in reversed(checkpoints):
        stop = min(start + L, grid.n_steps)
        states = [z_start]
        for n in range(start, stop - 1):
            states.append(_rk4(f, states[-1], grid.time(n), grid.dt))
        peak = max(peak, len(checkpoints) + len(states))
        for n in range(stop - 1, start - 1, -1):
            adj, gp = _rk4_step_vjp(f, vjp, states[n - start], grid.time(n), grid.dt, adj)
            g_params = gp if g_params is None else g_params + gp
            if n % grid.sample_stride == 0:
                adj = adj + cots[n // grid.sample_stride]
    if g_params is None:
        g_params = np.zeros(n_params)
    if stats is not None:
        stats["peak_stored"] = peak
    return adj, g_params
