"""Dataset assembly, trajectory loss, Adam, closure training and evaluation."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .closure import ClosureParams, CoupledDynamics, FusedRollout, Normalizer, _tile, init_memory
from .errors import NumericalError, ValidationError
from .fom import SnapshotSet
from .galerkin import ReducedOperators, VelocityMap, eval_reduced_rhs, predict_velocity
from .odeint import CheckpointPolicy, TimeGrid, backward_checkpointed, integrate_forward
from .pod import PodBasis, project
from .signals import ControlCoeffs, SignalBatch, evaluate_signal


@dataclass
class TrajectoryRecord:
    coeffs: ControlCoeffs
    times: np.ndarray
    targets: np.ndarray
    split: str

    @property
    def controls(self) -> np.ndarray:
        return evaluate_signal(self.coeffs, self.times)

    @property
    def x0(self) -> np.ndarray:
        """Initial memory input ``[a*(t0), S(t0)]``."""
        return np.concatenate([self.targets[0], [evaluate_signal(self.coeffs, self.times[0])]])


@dataclass
class RomDataset:
    records: list[TrajectoryRecord]

    @property
    def train(self) -> list[TrajectoryRecord]:
        return [r for r in self.records if r.split == "train"]

    @property
    def test(self) -> list[TrajectoryRecord]:
        return [r for r in self.records if r.split == "test"]


def build_dataset(snapshot_sets: Sequence[SnapshotSet], basis_T: PodBasis,
                  split_fraction: float = 0.8, seed: int = 0) -> RomDataset:
    """Project every trajectory and split 80/20 (by default) by whole trajectories.

    Trajectory order is shuffled with ``seed``; the first ``ceil(split * N)``
    trajectories train, the rest test.
    """
    if not 0 < split_fraction < 1:
        raise ValidationError("split_fraction must lie strictly between 0 and 1")
    n = len(snapshot_sets)
    if n < 2:
        raise ValidationError("need at least 2 trajectories to split")
    n_train = math.ceil(split_fraction * n - 1e-9)
    if n_train < 1 or n_train >= n:
        raise ValidationError(
            f"split {split_fraction} of {n} trajectories leaves an empty train or test set")
    order = np.random.Generator(np.random.PCG64(seed)).permutation(n)
    records = []
    for rank, i in enumerate(order):
        snaps = snapshot_sets[i]
        targets = project(basis_T, snaps.temps.T).T
        records.append(TrajectoryRecord(snaps.coeffs, snaps.times.copy(), targets,
                                        "train" if rank < n_train else "test"))
    return RomDataset(records)


def trajectory_loss(predicted: np.ndarray, target: np.ndarray) -> float:
    """Mean over time samples of the squared Euclidean error."""
    predicted = np.asarray(predicted, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if predicted.shape != target.shape:
        raise ValidationError(f"shape mismatch: {predicted.shape} vs {target.shape}")
    diff = predicted - target
    return float(np.sum(diff * diff) / diff.shape[0])


def nrmse(predicted: np.ndarray, target: np.ndarray) -> float:
    """RMSE over all entries divided by the population std of ``target``."""
    predicted = np.asarray(predicted, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if predicted.shape != target.shape:
        raise ValidationError(f"shape mismatch: {predicted.shape} vs {target.shape}")
    std = float(np.std(target))
    if std == 0.0:
        raise ValidationError("target has zero variance")
    return float(np.sqrt(np.mean((predicted - target) ** 2)) / std)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    epochs: int = 500
    batch_size: int = 4
    rollout_length: int | None = None
    curriculum: bool = False
    curriculum_start: int = 16
    curriculum_every: int = 100
    clip_norm: float = 100.0
    seed: int = 0

    def __post_init__(self):
        for name in ("learning_rate", "epsilon", "clip_norm"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValidationError("Adam betas must lie in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValidationError("epochs must be >= 0 and batch_size >= 1")
        if self.rollout_length is not None and self.rollout_length < 2:
            raise ValidationError("rollout_length must be at least 2 snapshots")

    def rollout_at(self, epoch: int) -> int | None:
        """Snapshots per rollout in the given (0-based) epoch; None means full."""
        if self.curriculum:
            return self.curriculum_start * 2 ** (epoch // self.curriculum_every)
        return self.rollout_length


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, config: TrainConfig):
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ValidationError("params, grads and optimizer state must have equal lengths")
    step = state.step + 1
    m = config.beta1 * state.m + (1.0 - config.beta1) * grads
    v = config.beta2 * state.v + (1.0 - config.beta2) * grads * grads
    m_hat = m / (1.0 - config.beta1**step)
    v_hat = v / (1.0 - config.beta2**step)
    new = params - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.epsilon)
    return new, AdamState(m, v, step)


# --------------------------------------------------------------------------- rollouts


def _time_grid(record: TrajectoryRecord, rom_dt: float, n_snapshots: int | None) -> TimeGrid:
    times = record.times
    n = len(times) if n_snapshots is None else min(n_snapshots, len(times))
    if n == 1:
        return TimeGrid(float(times[0]), rom_dt, 0, 1)
    spacing = float(times[1] - times[0])
    stride = round(spacing / rom_dt)
    if stride < 1 or abs(stride * rom_dt - spacing) > 1e-9 * spacing:
        raise ValidationError(f"snapshot spacing {spacing} is not a multiple of rom_dt={rom_dt}")
    return TimeGrid(float(times[0]), rom_dt, (n - 1) * stride, stride)


def initial_state(records: Sequence[TrajectoryRecord], closure: ClosureParams | None) -> np.ndarray:
    rows = []
    for r in records:
        a0 = r.targets[0]
        if closure is None:
            rows.append(a0.copy())
        else:
            rows.append(np.concatenate([a0, init_memory(r.x0, closure.memory)]))
    return np.array(rows)


def _check_backend(backend: str) -> None:
    if backend not in ("compiled", "numpy"):
        raise ValidationError(f"unknown backend {backend!r}")


def rollout(records: Sequence[TrajectoryRecord], rom: ReducedOperators, vmap: VelocityMap,
            closure: ClosureParams | None, rom_dt: float = 0.05,
            n_snapshots: int | None = None, backend: str = "compiled") -> np.ndarray:
    """Reduced coordinates at the snapshot times, shape ``(n_samples, B, n_T)``.

    Starts from the projected true initial condition and the steady memory.
    ``backend="compiled"`` uses :class:`FusedRollout` when a closure is given;
    ``"numpy"`` runs the generic integrator on the reference dynamics.
    """
    _check_backend(backend)
    grid = _time_grid(records[0], rom_dt, n_snapshots)
    if closure is not None and backend == "compiled":
        fused = FusedRollout(rom, vmap, closure, [r.coeffs for r in records])
        samples, _ = fused.forward(initial_state(records, closure), grid, max(grid.n_steps, 1))
        return samples[..., :rom.n_T]
    dyn = CoupledDynamics(rom, vmap, closure, SignalBatch([r.coeffs for r in records]),
                          backend="numpy")
    samples, _ = integrate_forward(dyn.rhs, initial_state(records, closure), grid,
                                   CheckpointPolicy(max(grid.n_steps, 1)))
    return samples[..., :rom.n_T]


def simulate_coefficients(coeffs: Sequence[ControlCoeffs], times: np.ndarray, alpha0: np.ndarray,
                          rom, vmap, closure, rom_dt: float = 0.05,
                          backend: str = "compiled") -> np.ndarray:
    """Roll out trajectories known only by their control coefficients."""
    times = np.asarray(times, dtype=np.float64)
    # only targets[0] (the initial condition) is read during a rollout
    start = np.asarray(alpha0, dtype=np.float64)
    targets = np.broadcast_to(start, (len(times), start.size))
    records = [TrajectoryRecord(c, times, targets, "sim") for c in coeffs]
    return rollout(records, rom, vmap, closure, rom_dt, backend=backend)


def batch_loss_and_grad(records: Sequence[TrajectoryRecord], rom: ReducedOperators,
                        vmap: VelocityMap, closure: ClosureParams, rom_dt: float = 0.05,
                        policy: CheckpointPolicy = CheckpointPolicy(),
                        n_snapshots: int | None = None, backend: str = "compiled",
                        stats: dict | None = None):
    """Mean trajectory loss over the batch and its gradient in the flat layout."""
    _check_backend(backend)
    grid = _time_grid(records[0], rom_dt, n_snapshots)
    n_T = rom.n_T
    B = len(records)
    z0 = initial_state(records, closure)
    if backend == "compiled":
        fused = FusedRollout(rom, vmap, closure, [r.coeffs for r in records])
        samples, checkpoints = fused.forward(z0, grid, policy.segment_length)
    else:
        dyn = CoupledDynamics(rom, vmap, closure, SignalBatch([r.coeffs for r in records]),
                              backend="numpy")
        samples, checkpoints = integrate_forward(dyn.rhs, z0, grid, policy)
    n_s = grid.n_samples
    target = np.stack([r.targets[:n_s] for r in records], axis=1)
    pred = samples[..., :n_T]
    loss = sum(trajectory_loss(pred[:, b], target[:, b]) for b in range(B)) / B
    cot = np.zeros_like(samples)
    cot[..., :n_T] = 2.0 * (pred - target) / (n_s * B)
    if backend == "compiled":
        g_z0, g_params = fused.backward(checkpoints, cot, grid, policy.segment_length, stats)
    else:
        g_z0, g_params = backward_checkpointed(dyn.rhs, dyn.vjp, grid, policy, checkpoints, cot,
                                               n_params=closure.size, stats=stats)
    # y0 = tile(x0) * exp(-theta) also depends on theta
    y0 = z0[:, n_T:]
    m = closure.memory.size
    if m:
        g_params[-m:] += np.sum(-y0 * g_z0[:, n_T:], axis=0)
    return loss, g_params


def mean_loss(records: Sequence[TrajectoryRecord], rom, vmap, closure, rom_dt: float = 0.05,
              n_snapshots: int | None = None) -> float:
    pred = rollout(records, rom, vmap, closure, rom_dt, n_snapshots)
    n_s = pred.shape[0]
    return sum(trajectory_loss(pred[:, b], r.targets[:n_s]) for b, r in enumerate(records)) / len(records)


# --------------------------------------------------------------------------- normalization


def _safe_scale(std: np.ndarray) -> np.ndarray:
    ref = float(np.max(std)) if std.size else 0.0
    return np.where(std > 1e-8 * max(ref, 1e-300), std, 1.0)


def fit_normalizer(records: Sequence[TrajectoryRecord], rom: ReducedOperators, vmap: VelocityMap,
                   closure: ClosureParams) -> Normalizer:
    """Per-channel input statistics and output scales from the training data.

    Memory channels are estimated by integrating the memory ODE along the
    true trajectories with the initial decay rates. The output scale is the
    RMS of the residual ``da*/dt - R(a*)`` estimated by finite differences;
    the output shift stays zero so a zero network adds nothing.
    """
    mem = closure.memory
    rates = mem.rates
    inputs, residuals = [], []
    for r in records:
        S = r.controls
        a = r.targets
        au = predict_velocity(vmap, a, S)
        x = np.concatenate([a, S[:, None]], axis=1)
        y = np.empty((len(S), mem.size))
        y[0] = init_memory(x[0], mem)
        for i in range(1, len(S)):
            h = r.times[i] - r.times[i - 1]
            # exact update for input linear in time over the interval
            decay = np.exp(-rates * h)
            x_prev, x_next = _tile(x[i - 1], mem.horizons), _tile(x[i], mem.horizons)
            slope = (x_next - x_prev) / h
            y[i] = decay * (y[i - 1] - x_prev / rates + slope / rates**2) \
                + x_next / rates - slope / rates**2
        inputs.append(np.concatenate([a, au, S[:, None], y], axis=1))
        if len(S) > 1:
            dadt = np.gradient(a, r.times, axis=0)
            residuals.append(dadt - eval_reduced_rhs(a, au, rom))
    inp = np.concatenate(inputs)
    in_shift = inp.mean(axis=0)
    in_scale = _safe_scale(inp.std(axis=0))
    n_T = rom.n_T
    if residuals:
        res = np.concatenate(residuals)
        out_scale = _safe_scale(np.sqrt(np.mean(res * res, axis=0)))
    else:
        out_scale = np.ones(n_T)
    return Normalizer(in_shift, in_scale, np.zeros(n_T), out_scale)


# --------------------------------------------------------------------------- training loop


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    wall_seconds: float


def train_closure(dataset: RomDataset, rom: ReducedOperators, vmap: VelocityMap,
                  init: ClosureParams, config: TrainConfig, rom_dt: float = 0.05,
                  policy: CheckpointPolicy = CheckpointPolicy(), callback=None):
    """Fit the closure by Adam on full (or curriculum-length) trajectory rollouts.

    Returns the parameters with the lowest end-of-epoch validation loss and
    the per-epoch history. ``callback(record)`` is called after every epoch.
    """
    train = dataset.train
    test = dataset.test
    if not train:
        raise ValidationError("dataset has no training trajectories")
    if config.batch_size > len(train):
        raise ValidationError(
            f"batch_size {config.batch_size} exceeds {len(train)} training trajectories")
    history: list[EpochRecord] = []
    if config.epochs == 0:
        return init, history

    rng = np.random.Generator(np.random.PCG64(config.seed))
    params = init.to_flat()
    state = AdamState.zeros(params.size)
    best_params, best_val = params.copy(), math.inf
    start = time.perf_counter()
    for epoch in range(config.epochs):
        n_snap = config.rollout_at(epoch)
        order = rng.permutation(len(train))
        total = 0.0
        for lo in range(0, len(order), config.batch_size):
            batch = [train[i] for i in order[lo:lo + config.batch_size]]
            current = init.with_flat(params)
            loss, grad = batch_loss_and_grad(batch, rom, vmap, current, rom_dt, policy, n_snap)
            if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
                raise NumericalError(f"training diverged in epoch {epoch + 1}")
            norm = float(np.sqrt(grad @ grad))
            if norm > config.clip_norm:
                grad = grad * (config.clip_norm / norm)
            params, state = adam_step(params, grad, state, config)
            total += loss * len(batch)
        train_loss = total / len(train)
        eval_set = test or train
        try:
            val_loss = mean_loss(eval_set, rom, vmap, init.with_flat(params), rom_dt)
        except NumericalError:
            val_loss = math.inf
        if val_loss < best_val:
            best_val, best_params = val_loss, params.copy()
        record = EpochRecord(epoch + 1, train_loss, val_loss, time.perf_counter() - start)
        history.append(record)
        if callback is not None:
            callback(record)
    return init.with_flat(best_params), history


# --------------------------------------------------------------------------- evaluation


@dataclass
class EvalReport:
    indices: list
    times: np.ndarray
    truth: list[np.ndarray]
    corrected: list[np.ndarray]
    uncorrected: list[np.ndarray]
    nrmse_corrected: list[float] = field(default_factory=list)
    nrmse_uncorrected: list[float] = field(default_factory=list)

    @property
    def mean_corrected(self) -> float:
        return float(np.mean(self.nrmse_corrected))

    @property
    def mean_uncorrected(self) -> float:
        return float(np.mean(self.nrmse_uncorrected))

    def to_json(self) -> dict:
        truth = np.concatenate(self.truth)
        return {
            "trajectories": [
                {"index": i, "nrmse_corrected": c, "nrmse_uncorrected": u}
                for i, c, u in zip(self.indices, self.nrmse_corrected, self.nrmse_uncorrected)
            ],
            "mean_nrmse_corrected": self.mean_corrected,
            "mean_nrmse_uncorrected": self.mean_uncorrected,
            "pooled_nrmse_corrected": nrmse(np.concatenate(self.corrected), truth),
            "pooled_nrmse_uncorrected": nrmse(np.concatenate(self.uncorrected), truth),
        }


def evaluate_model(records: Sequence[TrajectoryRecord], rom: ReducedOperators, vmap: VelocityMap,
                   closure: ClosureParams | None, rom_dt: float = 0.05) -> EvalReport:
    """Roll out each trajectory with and without the closure and score both.

    Every trajectory is integrated on its own so results do not depend on how
    trajectories are grouped.
    """
    if not records:
        raise ValidationError("no trajectories to evaluate")
    report = EvalReport([], records[0].times.copy(), [], [], [])
    for r in records:
        plain = rollout([r], rom, vmap, None, rom_dt)[:, 0]
        fixed = plain if closure is None else rollout([r], rom, vmap, closure, rom_dt)[:, 0]
        report.indices.append(r.coeffs.index)
        report.truth.append(r.targets)
        report.corrected.append(fixed)
        report.uncorrected.append(plain)
        report.nrmse_corrected.append(nrmse(fixed, r.targets))
        report.nrmse_uncorrected.append(nrmse(plain, r.targets))
    return report
