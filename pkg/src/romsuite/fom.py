"""1D finite-difference full-order model of heated flow through a roller nip.

Temperature obeys

    dT/dt = kappa T_xx - u T_x + eta(T) * gamma**2

on x in [0, 1] with a channel gap ``h(x) = 1 - (1 - h_min) sin(pi x)``, plug
velocity ``u = S(t) / h(x)``, deformation rate ``gamma = |u_x|`` and viscosity
``eta(T) = eta0 * exp(-beta T)``. T = 0 at the inlet (x = 0), zero gradient at
the outlet, and T(x, 0) = 0.

Diffusion uses the central 3-point stencil, advection first-order upwinding,
and the outlet uses a mirrored ghost node ``T[n_c] = T[n_c - 2]``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from .arrays import read_array, read_json, write_array, write_json
from .errors import NumericalError, ValidationError
from .signals import ControlCoeffs, evaluate_signal

CFL_NUMBER = 0.5


@dataclass(frozen=True)
class PhysicalParams:
    diffusivity: float = 1e-3
    eta0: float = 0.5
    beta: float = 0.2
    channel_min: float = 0.25

    def __post_init__(self):
        if not self.diffusivity > 0:
            raise ValidationError("diffusivity must be positive")
        if not self.eta0 >= 0:
            raise ValidationError("eta0 must be non-negative")
        if not self.beta >= 0:
            raise ValidationError("beta must be non-negative")
        if not 0 < self.channel_min <= 1:
            raise ValidationError("channel_min must lie in (0, 1]")


@dataclass(frozen=True)
class Grid1D:
    n_c: int = 256
    x: np.ndarray = field(init=False, repr=False, compare=False)
    dx: float = field(init=False)

    def __post_init__(self):
        if self.n_c < 3:
            raise ValidationError("the grid needs at least 3 nodes")
        # exact uniform spacing: x_j = j * dx
        dx = 1.0 / (self.n_c - 1)
        object.__setattr__(self, "dx", dx)
        object.__setattr__(self, "x", np.arange(self.n_c) * dx)


@dataclass
class SnapshotSet:
    times: np.ndarray
    temps: np.ndarray
    vels: np.ndarray
    controls: np.ndarray
    coeffs: ControlCoeffs

    def __post_init__(self):
        n_s = len(self.times)
        if self.temps.shape[0] != n_s or self.vels.shape[0] != n_s or len(self.controls) != n_s:
            raise ValidationError("snapshot arrays disagree on the number of snapshots")
        if n_s > 1 and not np.all(np.diff(self.times) > 0):
            raise ValidationError("snapshot times must be strictly increasing")

    @property
    def n_snapshots(self) -> int:
        return len(self.times)


def channel_gap(grid: Grid1D, params: PhysicalParams) -> np.ndarray:
    return 1.0 - (1.0 - params.channel_min) * np.sin(np.pi * grid.x)


def velocity_field(grid: Grid1D, params: PhysicalParams, S: float) -> np.ndarray:
    if not np.isfinite(S):
        raise ValidationError("S must be finite")
    return S / channel_gap(grid, params)


def gradient_one_sided_ends(f: np.ndarray, dx: float) -> np.ndarray:
    """Central differences inside, first-order one-sided at both ends."""
    g = np.empty_like(f)
    g[..., 1:-1] = (f[..., 2:] - f[..., :-2]) / (2.0 * dx)
    g[..., 0] = (f[..., 1] - f[..., 0]) / dx
    g[..., -1] = (f[..., -1] - f[..., -2]) / dx
    return g


@njit(cache=True)
def _rhs_into(T, S, inv_gap, dgap, kappa, eta0, beta, inv_dx, out):
    n = T.shape[0]
    inv_dx2 = inv_dx * inv_dx
    out[0] = 0.0
    for j in range(1, n):
        left = T[j - 1]
        mid = T[j]
        # ghost node mirrors the interior neighbour (zero outlet gradient)
        right = T[j + 1] if j < n - 1 else T[n - 2]
        lap = (right - 2.0 * mid + left) * inv_dx2
        u = S * inv_gap[j]
        if u >= 0.0:
            adv = u * ((mid - left) * inv_dx)
        else:
            adv = u * ((right - mid) * inv_dx)
        gamma = S * dgap[j]
        out[j] = kappa * lap - adv + eta0 * math.exp(-beta * mid) * (gamma * gamma)


@njit(cache=True)
def _signal(c0, amps, t):
    value = c0
    for j in range(amps.shape[0]):
        value += amps[j] * math.sin(2.0 * math.pi * t / (2.0 ** (j + 4)))
    return value


@njit(cache=True)
def _rk4_run(c0, amps, inv_gap, dgap, kappa, eta0, beta, inv_dx, dt, n_steps, stride, temps):
    B, _, n = temps.shape
    half = 0.5 * dt
    T = np.zeros(n)
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    tmp = np.empty(n)
    for b in range(B):
        T[:] = 0.0
        temps[b, 0, :] = T
        for step in range(n_steps):
            t = step * dt
            s_a = _signal(c0[b], amps[b], t)
            s_m = _signal(c0[b], amps[b], t + half)
            s_b = _signal(c0[b], amps[b], t + dt)
            _rhs_into(T, s_a, inv_gap, dgap, kappa, eta0, beta, inv_dx, k1)
            for j in range(n):
                tmp[j] = T[j] + half * k1[j]
            _rhs_into(tmp, s_m, inv_gap, dgap, kappa, eta0, beta, inv_dx, k2)
            for j in range(n):
                tmp[j] = T[j] + half * k2[j]
            _rhs_into(tmp, s_m, inv_gap, dgap, kappa, eta0, beta, inv_dx, k3)
            for j in range(n):
                tmp[j] = T[j] + dt * k3[j]
            _rhs_into(tmp, s_b, inv_gap, dgap, kappa, eta0, beta, inv_dx, k4)
            finite = True
            for j in range(n):
                T[j] = T[j] + (dt / 6.0) * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j])
                if not math.isfinite(T[j]):
                    finite = False
            if not finite:
                return b, (step + 1) * dt
            if (step + 1) % stride == 0:
                temps[b, (step + 1) // stride, :] = T
    return -1, 0.0


class _Geometry:
    def __init__(self, grid: Grid1D, params: PhysicalParams):
        self.inv_gap = 1.0 / channel_gap(grid, params)
        # du/dx = S * d(1/h)/dx, differenced on the grid
        self.dgap = gradient_one_sided_ends(self.inv_gap, grid.dx)
        self.args = (self.inv_gap, self.dgap, params.diffusivity, params.eta0,
                     params.beta, 1.0 / grid.dx)


def rhs_full(T: np.ndarray, S: float, grid: Grid1D, params: PhysicalParams) -> np.ndarray:
    """Time derivative of the full temperature field at speed ``S``."""
    T = np.asarray(T, dtype=np.float64)
    if T.shape != (grid.n_c,):
        raise ValidationError(f"expected a field of length {grid.n_c}, got shape {T.shape}")
    if not np.all(np.isfinite(T)):
        raise ValidationError("temperature field contains non-finite values")
    if not np.isfinite(S):
        raise ValidationError("S must be finite")
    out = np.empty_like(T)
    _rhs_into(np.ascontiguousarray(T), float(S), *_Geometry(grid, params).args, out)
    return out


def max_stable_dt(coeffs: ControlCoeffs, grid: Grid1D, params: PhysicalParams) -> float:
    """Advective CFL bound ``0.5 dx / max|u|`` using ``|S| <= c0 + sum|c_i|``."""
    umax = coeffs.max_abs / params.channel_min
    return math.inf if umax == 0 else CFL_NUMBER * grid.dx / umax


def capped_dt(coeffs: ControlCoeffs, grid: Grid1D, params: PhysicalParams,
              dt_max: float, snap_every: float) -> float:
    """Largest step ``<= dt_max`` dividing ``snap_every`` that meets the CFL bound."""
    limit = min(dt_max, max_stable_dt(coeffs, grid, params))
    if limit >= snap_every:
        return snap_every
    k = math.ceil(snap_every / limit - 1e-9)
    dt = snap_every / k
    while dt > limit:
        k += 1
        dt = snap_every / k
    return dt


def _steps_per(interval: float, dt: float, what: str) -> int:
    k = round(interval / dt)
    if k < 1 or abs(k * dt - interval) > 1e-9 * max(interval, dt):
        raise ValidationError(f"{what}={interval} is not an integer multiple of dt={dt}")
    return k


def simulate_batch(coeffs: list[ControlCoeffs], grid: Grid1D, params: PhysicalParams,
                   t_end: float, dt: float, snap_every: float) -> list[SnapshotSet]:
    """Integrate several trajectories with classical RK4 at a shared ``dt``.

    Trajectories are integrated one after another; each one's result does not
    depend on the others in the batch.
    """
    if not dt > 0:
        raise ValidationError("dt must be positive")
    if t_end < 0:
        raise ValidationError("t_end must be non-negative")
    for c in coeffs:
        bound = max_stable_dt(c, grid, params)
        if dt > bound:
            raise ValidationError(
                f"dt={dt:g} violates the CFL bound dt <= {bound:.6g} "
                f"(trajectory index {c.index}, |S| <= {c.max_abs:.6g})")
    stride = _steps_per(snap_every, dt, "snap_every")
    n_snaps = 1 + (0 if t_end == 0 else _steps_per(t_end, snap_every, "t_end"))
    n_steps = (n_snaps - 1) * stride

    geo = _Geometry(grid, params)
    B = len(coeffs)
    temps = np.empty((B, n_snaps, grid.n_c))
    c0 = np.array([c.c0 for c in coeffs])
    amps = np.array([c.c for c in coeffs]).reshape(B, -1)
    bad, t_bad = _rk4_run(c0, amps, *geo.args, dt, n_steps, stride, temps)
    if bad >= 0:
        raise NumericalError(
            f"non-finite temperature at t={t_bad:g} (trajectory index {coeffs[bad].index})")

    times = np.arange(n_snaps) * snap_every
    out = []
    for b, c in enumerate(coeffs):
        controls = evaluate_signal(c, times)
        vels = controls[:, None] * geo.inv_gap[None, :]
        out.append(SnapshotSet(times=times.copy(), temps=temps[b].copy(), vels=vels,
                               controls=controls, coeffs=c))
    return out


def simulate_fom(coeffs: ControlCoeffs, grid: Grid1D, params: PhysicalParams,
                 t_end: float, dt: float, snap_every: float) -> SnapshotSet:
    return simulate_batch([coeffs], grid, params, t_end, dt, snap_every)[0]


def save_snapshots(directory: str | Path, snaps: SnapshotSet, grid: Grid1D,
                   params: PhysicalParams) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_json(directory / "meta.json", {
        "grid": {"n_c": grid.n_c},
        "params": asdict(params),
        "coeffs": snaps.coeffs.to_json(),
        "times": snaps.times.tolist(),
        "controls": snaps.controls.tolist(),
    })
    write_array(directory / "temps.bin", snaps.temps)
    write_array(directory / "vels.bin", snaps.vels)


def load_snapshots(directory: str | Path) -> tuple[SnapshotSet, Grid1D, PhysicalParams]:
    directory = Path(directory)
    meta = read_json(directory / "meta.json")
    grid = Grid1D(int(meta["grid"]["n_c"]))
    params = PhysicalParams(**meta["params"])
    snaps = SnapshotSet(
        times=np.array(meta["times"], dtype=np.float64),
        temps=read_array(directory / "temps.bin"),
        vels=read_array(directory / "vels.bin"),
        controls=np.array(meta["controls"], dtype=np.float64),
        coeffs=ControlCoeffs.from_json(meta["coeffs"]),
    )
    return snaps, grid, params
