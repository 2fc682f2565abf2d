"""Randomized sum-of-sines control signals for the roller speed.

A trajectory's speed is

    S(t) = c0 + sum_{i=4..7} c_i * sin(2 pi t / 2**i)

with ``c0 ~ Normal(mean_loc, mean_scale)`` and ``c_i ~ Normal(0, amp_scale)``
(scales are standard deviations).

Reproducibility: the coefficients of trajectory ``index`` under ``seed`` are
drawn from a Philox-4x64 counter-based generator keyed by
``SeedSequence([seed, index])``. Uniforms are the generator's 53-bit doubles and
normals come from the polar-free Box-Muller transform
``sqrt(-2 log(1 - u1)) * (cos, sin)(2 pi u2)``, three pairs per trajectory with
the sixth variate unused. Streams are therefore independent of the order in
which trajectories are generated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ValidationError

#: Exponents i of the sine periods 2**i.
PERIOD_EXPONENTS = (4, 5, 6, 7)
PERIODS = np.array([2.0**i for i in PERIOD_EXPONENTS])

SignalFn = Callable[[float], "float | np.ndarray"]


@dataclass(frozen=True)
class ControlCoeffs:
    c0: float
    c: tuple[float, float, float, float]
    seed: int | None = None
    index: int | None = None

    def __post_init__(self):
        c = tuple(float(v) for v in self.c)
        if len(c) != len(PERIOD_EXPONENTS):
            raise ValidationError(f"expected {len(PERIOD_EXPONENTS)} amplitudes, got {len(c)}")
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "c0", float(self.c0))
        if not np.all(np.isfinite((self.c0,) + c)):
            raise ValidationError("control coefficients must be finite")

    @property
    def max_abs(self) -> float:
        """Upper bound on |S(t)| over all t."""
        return abs(self.c0) + sum(abs(v) for v in self.c)

    def to_json(self) -> dict:
        return {"c0": self.c0, "c": list(self.c), "seed": self.seed, "index": self.index}

    @classmethod
    def from_json(cls, payload: dict) -> "ControlCoeffs":
        try:
            c0 = payload["c0"]
            c = payload["c"]
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"coefficient record missing field: {exc}") from None
        if not isinstance(c, (list, tuple)):
            raise ValidationError("'c' must be a list of 4 numbers")
        try:
            return cls(c0=float(c0), c=tuple(float(v) for v in c),
                       seed=payload.get("seed"), index=payload.get("index"))
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ValidationError):
                raise
            raise ValidationError(f"invalid coefficient record: {exc}") from None


@dataclass(frozen=True)
class SignalSpec:
    seed: int = 0
    mean_loc: float = 1.0
    mean_scale: float = 0.25
    amp_scale: float = 0.25

    def __post_init__(self):
        if self.mean_scale < 0 or self.amp_scale < 0:
            raise ValidationError("mean_scale and amp_scale must be non-negative")
        if int(self.seed) < 0:
            raise ValidationError("seed must be a non-negative integer")


def _box_muller(rng: np.random.Generator, n: int) -> np.ndarray:
    pairs = (n + 1) // 2
    u = rng.random((pairs, 2))
    radius = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
    angle = 2.0 * np.pi * u[:, 1]
    z = np.column_stack((radius * np.cos(angle), radius * np.sin(angle)))
    return z.ravel()[:n]


def sample_coefficients(spec: SignalSpec, trajectory_index: int) -> ControlCoeffs:
    """Draw the coefficients of one trajectory, keyed by ``(spec.seed, trajectory_index)``."""
    if trajectory_index < 0:
        raise ValidationError("trajectory_index must be non-negative")
    seq = np.random.SeedSequence([int(spec.seed), int(trajectory_index)])
    rng = np.random.Generator(np.random.Philox(seq))
    z = _box_muller(rng, 1 + len(PERIOD_EXPONENTS))
    c0 = spec.mean_loc + spec.mean_scale * z[0]
    c = tuple(float(spec.amp_scale * v) for v in z[1:])
    return ControlCoeffs(c0=float(c0), c=c, seed=int(spec.seed), index=int(trajectory_index))


def evaluate_signal(coeffs: ControlCoeffs, t):
    """Evaluate S(t); ``t`` may be a scalar or an array."""
    t = np.asarray(t, dtype=np.float64)
    value = np.full(t.shape, coeffs.c0)
    for ci, period in zip(coeffs.c, PERIODS):
        value = value + ci * np.sin(2.0 * np.pi * t / period)
    return float(value) if value.ndim == 0 else value


def signal_grid(coeffs: ControlCoeffs, t0: float, dt: float, n: int) -> np.ndarray:
    if not dt > 0:
        raise ValidationError(f"dt must be positive, got {dt}")
    if n < 1:
        raise ValidationError(f"n must be at least 1, got {n}")
    times = t0 + np.arange(n) * dt
    return np.array([evaluate_signal(coeffs, tj) for tj in times])


def constant_signal(value: float) -> SignalFn:
    return lambda t: value


def coefficient_signal(coeffs: ControlCoeffs) -> SignalFn:
    return lambda t: evaluate_signal(coeffs, t)


class SignalBatch:
    """Vectorized evaluation of several trajectories' signals at one time.

    Calling the batch at time ``t`` returns an array of shape ``(B,)``.
    """

    def __init__(self, coeffs: Sequence[ControlCoeffs]):
        if len(coeffs) == 0:
            raise ValidationError("SignalBatch needs at least one trajectory")
        self.coeffs = list(coeffs)
        self.c0 = np.array([c.c0 for c in coeffs])
        self.amps = np.array([c.c for c in coeffs])

    def __len__(self):
        return len(self.coeffs)

    def __call__(self, t: float) -> np.ndarray:
        value = self.c0.copy()
        for j, period in enumerate(PERIODS):
            value += self.amps[:, j] * math.sin(2.0 * math.pi * t / period)
        return value
