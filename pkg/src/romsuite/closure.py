"""Memory-augmented neural closure and its hand-derived vector-Jacobian products.

Coupled dynamics for the state ``z = [a, y]``::

    S    = signal(t)
    a_u  = W_v [a; S] + b_v                      (ridge velocity map)
    da   = R(a, a_u) + NN(a, a_u, S, y)
    dy   = -exp(theta) * y + tile([a; S], k)

``y`` holds ``k`` copies of the memory input ``x = [a; S]``, each channel with
its own decay rate ``exp(theta)``. Channel ``j * (n_T + 1) + i`` filters input
``i`` with horizon ``j``.

Flat parameter layout (used by ``weights.bin``, gradients and the optimizer):
for each dense layer in order, the weight matrix (``out x in``, row-major)
followed by its bias; then ``theta_lambda``.

All array functions accept a single state or a row-stacked batch ``(B, ...)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import _kernels
from .arrays import read_array, read_json, write_array, write_json
from .errors import NumericalError, ValidationError
from .galerkin import ReducedOperators, VelocityMap

DEFAULT_TIMESCALES = (1.0, 4.0, 16.0, 64.0)


@dataclass
class MemoryParams:
    theta_lambda: np.ndarray
    horizons: int
    input_dim: int

    def __post_init__(self):
        self.theta_lambda = np.asarray(self.theta_lambda, dtype=np.float64)
        if self.theta_lambda.shape != (self.horizons * self.input_dim,):
            raise ValidationError(
                f"theta_lambda must have {self.horizons * self.input_dim} entries, "
                f"got {self.theta_lambda.shape}")

    @property
    def size(self) -> int:
        return self.horizons * self.input_dim

    @property
    def rates(self) -> np.ndarray:
        return np.exp(self.theta_lambda)


def default_memory(n_T: int, timescales: Sequence[float] = DEFAULT_TIMESCALES) -> MemoryParams:
    d = n_T + 1
    theta = np.repeat(-np.log(np.asarray(timescales, dtype=np.float64)), d)
    return MemoryParams(theta, len(timescales), d)


@dataclass
class MlpParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def size(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))


def init_mlp(widths: Sequence[int], seed: int = 0, zero_output: bool = True) -> MlpParams:
    """Glorot-uniform weights, zero biases.

    With ``zero_output`` the last layer starts at zero so the untrained closure
    contributes nothing to the dynamics.
    """
    if len(widths) < 2:
        raise ValidationError("an MLP needs at least input and output widths")
    rng = np.random.Generator(np.random.PCG64(seed))
    weights, biases = [], []
    for i, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
        if zero_output and i == len(widths) - 2:
            weights.append(np.zeros((n_out, n_in)))
        else:
            bound = np.sqrt(6.0 / (n_in + n_out))
            weights.append(rng.uniform(-bound, bound, size=(n_out, n_in)))
        biases.append(np.zeros(n_out))
    return MlpParams(weights, biases)


@dataclass
class Normalizer:
    in_shift: np.ndarray
    in_scale: np.ndarray
    out_shift: np.ndarray
    out_scale: np.ndarray

    def __post_init__(self):
        for name in ("in_shift", "in_scale", "out_shift", "out_scale"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if np.any(self.in_scale <= 0) or np.any(self.out_scale <= 0):
            raise ValidationError("normalizer scales must be strictly positive")

    @classmethod
    def identity(cls, n_in: int, n_out: int) -> "Normalizer":
        return cls(np.zeros(n_in), np.ones(n_in), np.zeros(n_out), np.ones(n_out))


@dataclass
class ClosureParams:
    mlp: MlpParams
    memory: MemoryParams
    normalizer: Normalizer

    @property
    def n_T(self) -> int:
        return self.mlp.widths[-1]

    @property
    def size(self) -> int:
        return self.mlp.size + self.memory.size

    def to_flat(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.mlp.weights, self.mlp.biases):
            parts.append(w.ravel())
            parts.append(b)
        parts.append(self.memory.theta_lambda)
        return np.concatenate(parts)

    def with_flat(self, flat: np.ndarray) -> "ClosureParams":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.size,):
            raise ValidationError(f"expected {self.size} parameters, got {flat.shape}")
        weights, biases = [], []
        pos = 0
        for w, b in zip(self.mlp.weights, self.mlp.biases):
            weights.append(flat[pos:pos + w.size].reshape(w.shape).copy())
            pos += w.size
            biases.append(flat[pos:pos + b.size].copy())
            pos += b.size
        memory = replace(self.memory, theta_lambda=flat[pos:].copy())
        return ClosureParams(MlpParams(weights, biases), memory, self.normalizer)


def make_closure(n_T: int, n_u: int, hidden: Sequence[int] = (64, 64),
                 timescales: Sequence[float] = DEFAULT_TIMESCALES, seed: int = 0,
                 normalizer: Normalizer | None = None) -> ClosureParams:
    memory = default_memory(n_T, timescales)
    n_in = n_T + n_u + 1 + memory.size
    mlp = init_mlp([n_in, *hidden, n_T], seed=seed)
    return ClosureParams(mlp, memory, normalizer or Normalizer.identity(n_in, n_T))


@dataclass
class CoupledState:
    alpha_T: np.ndarray
    y: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.alpha_T = np.asarray(self.alpha_T, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if not (np.all(np.isfinite(self.alpha_T)) and np.all(np.isfinite(self.y))):
            raise ValidationError("coupled state contains non-finite entries")

    def pack(self) -> np.ndarray:
        return np.concatenate([self.alpha_T, self.y], axis=-1)

    @classmethod
    def unpack(cls, z: np.ndarray, n_T: int) -> "CoupledState":
        return cls(z[..., :n_T], z[..., n_T:])


# --------------------------------------------------------------------------- memory


def _tile(x: np.ndarray, k: int) -> np.ndarray:
    return np.concatenate([x] * k, axis=-1) if k else x[..., :0]


def memory_rhs(y: np.ndarray, x: np.ndarray, memory: MemoryParams) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if y.shape[-1] != memory.size or x.shape[-1] != memory.input_dim:
        raise ValidationError(
            f"memory expects y of size {memory.size} and x of size {memory.input_dim}")
    return -memory.rates * y + _tile(x, memory.horizons)


def init_memory(x0: np.ndarray, memory: MemoryParams) -> np.ndarray:
    """Memory value assuming the input was frozen at ``x0`` for all past time."""
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.shape[-1] != memory.input_dim:
        raise ValidationError(f"memory input must have size {memory.input_dim}")
    return _tile(x0, memory.horizons) / memory.rates


# --------------------------------------------------------------------------- network


def _mlp_layers(mlp: MlpParams, xi: np.ndarray):
    """Forward pass returning the normalized output and the hidden activations."""
    acts = [xi]
    h = xi
    last = len(mlp.weights) - 1
    for i, (W, b) in enumerate(zip(mlp.weights, mlp.biases)):
        pre = h @ W.T + b
        h = pre if i == last else np.tanh(pre)
        acts.append(h)
    return h, acts


def _nn_input(alpha_T, alpha_u, S, y):
    S = np.asarray(S, dtype=np.float64)
    return np.concatenate([alpha_T, alpha_u, S[..., None], y], axis=-1)


def mlp_forward(params: MlpParams, normalizer: Normalizer, alpha_T, alpha_u, S, y) -> np.ndarray:
    inp = _nn_input(np.asarray(alpha_T, dtype=np.float64), np.asarray(alpha_u, dtype=np.float64),
                    S, np.asarray(y, dtype=np.float64))
    if inp.shape[-1] != params.widths[0]:
        raise ValidationError(f"network expects {params.widths[0]} inputs, got {inp.shape[-1]}")
    if not np.all(np.isfinite(inp)):
        raise ValidationError("network input contains non-finite values")
    xi = (inp - normalizer.in_shift) / normalizer.in_scale
    out, _ = _mlp_layers(params, xi)
    return out * normalizer.out_scale + normalizer.out_shift


# --------------------------------------------------------------------------- coupled system


class CoupledDynamics:
    """Right-hand side and VJP of the corrected (or uncorrected) reduced model.

    ``signal`` maps a time to the speed: a scalar for one trajectory or an
    array ``(B,)`` for a batch of states ``(B, n_T + m)``. With
    ``closure=None`` the state is ``a`` alone and the dynamics are the plain
    Galerkin model; the closure parameters are never touched.

    ``backend="compiled"`` runs the numba kernels in ``_kernels``;
    ``"numpy"`` is the array-expression reference both are tested against.
    """

    def __init__(self, rom: ReducedOperators, vmap: VelocityMap,
                 closure: ClosureParams | None, signal: Callable, backend: str = "compiled"):
        if backend not in ("compiled", "numpy"):
            raise ValidationError(f"unknown backend {backend!r}")
        self.backend = backend if closure is not None else "numpy"
        self.rom = rom
        self.vmap = vmap
        self.closure = closure
        self.signal = signal
        self.n_T = rom.n_T
        if vmap.W.shape != (rom.n_u, rom.n_T + 1):
            raise ValidationError(
                f"velocity map shape {vmap.W.shape} does not match ROM ({rom.n_u}, {rom.n_T + 1})")
        # A_red flattened to (n_u * n_T, n_T) for one matmul per evaluation
        self._A_flat = rom.A_red.reshape(rom.n_u * rom.n_T, rom.n_T)
        self._Wv_a = vmap.W[:, :rom.n_T]
        if closure is not None:
            mem = closure.memory
            if mem.input_dim != rom.n_T + 1:
                raise ValidationError("memory input size must be n_T + 1")
            if closure.mlp.widths[0] != rom.n_T + rom.n_u + 1 + mem.size:
                raise ValidationError(
                    f"network input width {closure.mlp.widths[0]} does not match "
                    f"n_T + n_u + 1 + m = {rom.n_T + rom.n_u + 1 + mem.size}")
            if closure.mlp.widths[-1] != rom.n_T:
                raise ValidationError("network output width must equal n_T")
            self._rates = mem.rates
            self._k = mem.horizons
            self.state_size = rom.n_T + mem.size
            self.n_params = closure.size
            if self.backend == "compiled":
                self._model = kernel_model(rom, vmap, closure)
        else:
            self.state_size = rom.n_T
            self.n_params = 0

    def _check(self, z):
        if z.shape[-1] != self.state_size:
            raise ValidationError(f"state must have size {self.state_size}, got {z.shape[-1]}")

    def _forward(self, z, t):
        a = z[..., :self.n_T]
        S = np.asarray(self.signal(t), dtype=np.float64)
        if S.ndim < a.ndim - 1 or S.shape != a.shape[:-1]:
            S = np.broadcast_to(S, a.shape[:-1])
        feat = np.concatenate([a, S[..., None]], axis=-1)
        au = feat @ self.vmap.W.T + self.vmap.b
        Aa = (a @ self._A_flat.T).reshape(a.shape[:-1] + (self.rom.n_u, self.n_T))
        R = a @ self.rom.L_red.T - np.einsum("...k,...kj->...j", au, Aa)
        return a, S, feat, au, Aa, R

    def _speeds(self, t, B):
        S = np.asarray(self.signal(t), dtype=np.float64)
        return np.ascontiguousarray(np.broadcast_to(S, (B,)))

    def rhs(self, z: np.ndarray, t: float) -> np.ndarray:
        self._check(z)
        if self.backend == "compiled":
            zb = np.ascontiguousarray(z.reshape(-1, z.shape[-1]))
            out = np.empty_like(zb)
            _kernels.rhs(zb, self._speeds(t, zb.shape[0]), self._model,
                         *_kernels.caches(zb.shape[0], self._model), out)
            return out.reshape(z.shape)
        a, S, feat, au, Aa, R = self._forward(z, t)
        if self.closure is None:
            return R
        c = self.closure
        y = z[..., self.n_T:]
        norm = c.normalizer
        xi = (np.concatenate([a, au, S[..., None], y], axis=-1) - norm.in_shift) / norm.in_scale
        out, _ = _mlp_layers(c.mlp, xi)
        da = R + (out * norm.out_scale + norm.out_shift)
        dy = -self._rates * y + _tile(feat, self._k)
        return np.concatenate([da, dy], axis=-1)

    __call__ = rhs

    def vjp(self, z: np.ndarray, t: float, cot: np.ndarray):
        """Return ``(cot^T d rhs/dz, cot^T d rhs/dparams)``.

        For batched input the state gradient keeps the batch axis and the
        parameter gradient is summed over it.
        """
        self._check(z)
        if self.backend == "compiled":
            zb = np.ascontiguousarray(z.reshape(-1, z.shape[-1]))
            gz = np.empty_like(zb)
            gp = np.empty(self.n_params)
            _kernels.vjp(zb, self._speeds(t, zb.shape[0]),
                         np.ascontiguousarray(cot.reshape(zb.shape)), self._model,
                         *_kernels.caches(zb.shape[0], self._model), gz, gp)
            return gz.reshape(z.shape), gp
        nT = self.n_T
        a, S, feat, au, Aa, R = self._forward(z, t)
        ga_out = cot[..., :nT]
        # reducible part: R = L a - sum_k au_k A_k a
        g_a = ga_out @ self.rom.L_red
        gA = np.einsum("...k,...j->...kj", au, ga_out).reshape(a.shape[:-1] + (-1,))
        g_a = g_a - gA @ self._A_flat
        g_au = -np.einsum("...j,...kj->...k", ga_out, Aa)
        if self.closure is None:
            g_a = g_a + g_au @ self._Wv_a
            return g_a, np.zeros(0)

        c = self.closure
        norm = c.normalizer
        nu = self.rom.n_u
        y = z[..., nT:]
        gy_out = cot[..., nT:]
        xi = (np.concatenate([a, au, S[..., None], y], axis=-1) - norm.in_shift) / norm.in_scale
        _, acts = _mlp_layers(c.mlp, xi)

        batch = a.ndim > 1
        g_h = ga_out * norm.out_scale
        grads = []
        last = len(c.mlp.weights) - 1
        for i in range(last, -1, -1):
            W = c.mlp.weights[i]
            if i != last:
                g_h = g_h * (1.0 - acts[i + 1] ** 2)
            h_in = acts[i]
            if batch:
                gW = g_h.T @ h_in
                gb = g_h.sum(axis=0)
            else:
                gW = np.outer(g_h, h_in)
                gb = g_h
            grads.append((gW, gb))
            g_h = g_h @ W
        g_inp = g_h / norm.in_scale
        g_a = g_a + g_inp[..., :nT]
        g_au = g_au + g_inp[..., nT:nT + nu]
        g_y = g_inp[..., nT + nu + 1:]

        # memory: dy = -rates * y + tile(feat)
        g_y = g_y - self._rates * gy_out
        g_theta = -self._rates * y * gy_out
        if batch:
            g_theta = g_theta.sum(axis=0)
        k = self._k
        if k:
            g_feat = gy_out.reshape(gy_out.shape[:-1] + (k, nT + 1)).sum(axis=-2)
            g_a = g_a + g_feat[..., :nT]

        g_a = g_a + g_au @ self._Wv_a
        parts = []
        for gW, gb in reversed(grads):
            parts.append(gW.ravel())
            parts.append(gb)
        parts.append(g_theta)
        return np.concatenate([g_a, g_y], axis=-1), np.concatenate(parts)


def kernel_model(rom: ReducedOperators, vmap: VelocityMap, closure: ClosureParams) -> tuple:
    """Pack operators and closure parameters for the compiled kernels."""
    widths = np.array(closure.mlp.widths, dtype=np.int64)
    w_pos = np.zeros(len(widths) - 1, dtype=np.int64)
    for i in range(1, len(w_pos)):
        w_pos[i] = w_pos[i - 1] + widths[i - 1] * widths[i] + widths[i]
    a_off = np.concatenate([[0], np.cumsum(widths)]).astype(np.int64)
    norm = closure.normalizer
    c = np.ascontiguousarray
    flat = closure.to_flat()
    # transposed copy of every weight matrix, same offsets as ``flat``
    flat_t = flat.copy()
    for i, p0 in enumerate(w_pos):
        n_in, n_out = widths[i], widths[i + 1]
        flat_t[p0:p0 + n_in * n_out] = flat[p0:p0 + n_in * n_out].reshape(n_out, n_in).T.ravel()
    return (c(rom.L_red), c(rom.A_red.reshape(rom.n_u * rom.n_T, rom.n_T)), c(vmap.W), c(vmap.b),
            flat, widths, w_pos, a_off, c(norm.in_shift), c(norm.in_scale),
            c(norm.out_shift), c(norm.out_scale), int(closure.memory.horizons),
            c(closure.memory.rates), flat_t)


class FusedRollout:
    """Compiled RK4 rollout and checkpointed reverse sweep for a batch of trajectories.

    Same recurrences as :func:`romsuite.odeint.integrate_forward` and
    :func:`romsuite.odeint.backward_checkpointed` applied to
    :class:`CoupledDynamics`, with the signal evaluated from its coefficients
    inside the kernel. Within a segment the reverse sweep caches every stage's
    activations instead of recomputing them per step.
    """

    def __init__(self, rom: ReducedOperators, vmap: VelocityMap, closure: ClosureParams,
                 coeffs: Sequence):
        CoupledDynamics(rom, vmap, closure, lambda t: 0.0, backend="numpy")  # shape checks
        self.n_T = rom.n_T
        self.n_params = closure.size
        self._model = kernel_model(rom, vmap, closure)
        self._c0 = np.array([c.c0 for c in coeffs], dtype=np.float64)
        self._amps = np.array([c.c for c in coeffs], dtype=np.float64).reshape(len(coeffs), -1)

    def forward(self, z0: np.ndarray, grid, segment_length: int):
        """Return ``(samples, checkpoints)``; checkpoints is an array of states."""
        z0 = np.ascontiguousarray(z0, dtype=np.float64)
        # a segment longer than the run only needs the one checkpoint at step 0
        segment_length = max(min(segment_length, grid.n_steps), 1)
        samples = np.empty((grid.n_samples,) + z0.shape)
        n_seg = max(-(-grid.n_steps // segment_length), 0)
        checkpoints = np.empty((n_seg,) + z0.shape)
        bad = _kernels.rk4_forward(z0, self._c0, self._amps, float(grid.t0), float(grid.dt),
                                   int(grid.n_steps), int(grid.sample_stride), int(segment_length),
                                   self._model, samples, checkpoints)
        if bad >= 0:
            raise NumericalError(f"non-finite state after RK4 step from t={grid.time(bad):g}")
        return samples, checkpoints

    def backward(self, checkpoints: np.ndarray, cotangents: np.ndarray, grid, segment_length: int,
                 stats: dict | None = None):
        """Return ``(cot^T dz_samples/dz0, cot^T dz_samples/dparams)``."""
        cots = np.ascontiguousarray(cotangents, dtype=np.float64)
        if cots.shape[0] != grid.n_samples:
            raise ValidationError(f"expected {grid.n_samples} loss cotangents, got {cots.shape[0]}")
        segment_length = max(min(segment_length, grid.n_steps), 1)
        gz0 = np.empty(cots.shape[1:])
        gp = np.zeros(self.n_params)
        if grid.n_steps:
            _kernels.rk4_backward(np.ascontiguousarray(checkpoints), cots, self._c0, self._amps,
                                  float(grid.t0), float(grid.dt), int(grid.n_steps),
                                  int(grid.sample_stride), int(segment_length), self._model,
                                  gz0, gp)
        else:
            gz0[...] = cots[-1]
        if stats is not None:
            stats["peak_stored"] = len(checkpoints) + min(segment_length, grid.n_steps)
        return gz0, gp


def coupled_rhs(z: CoupledState, t: float, closure: ClosureParams | None, rom: ReducedOperators,
                vmap: VelocityMap, signal: Callable) -> CoupledState:
    """Time derivative of ``z``, evaluated with the numpy reference dynamics."""
    dyn = CoupledDynamics(rom, vmap, closure, signal, backend="numpy")
    return CoupledState.unpack(dyn.rhs(z.pack(), t), rom.n_T)


def coupled_vjp(z: CoupledState, t: float, closure: ClosureParams | None, rom: ReducedOperators,
                vmap: VelocityMap, signal: Callable, cotangent: CoupledState):
    """``(cot^T d rhs/dz, cot^T d rhs/dparams)`` with the numpy reference dynamics."""
    dyn = CoupledDynamics(rom, vmap, closure, signal, backend="numpy")
    gz, gp = dyn.vjp(z.pack(), t, cotangent.pack())
    return CoupledState.unpack(gz, rom.n_T), gp


# --------------------------------------------------------------------------- persistence


def save_closure(directory: str | Path, closure: ClosureParams, extra: dict | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    norm = closure.normalizer
    meta = {
        "widths": closure.mlp.widths,
        "activation": "tanh hidden, identity output",
        "horizons": closure.memory.horizons,
        "input_dim": closure.memory.input_dim,
        "theta_lambda": closure.memory.theta_lambda.tolist(),
        "normalizer": {
            "in_shift": norm.in_shift.tolist(),
            "in_scale": norm.in_scale.tolist(),
            "out_shift": norm.out_shift.tolist(),
            "out_scale": norm.out_scale.tolist(),
        },
        "layout": "per layer: W (out x in, row-major) then b; then theta_lambda",
        "n_params": closure.size,
    }
    meta.update(extra or {})
    write_json(directory / "closure.json", meta)
    write_array(directory / "weights.bin", closure.to_flat())


def load_closure(directory: str | Path) -> ClosureParams:
    directory = Path(directory)
    meta = read_json(directory / "closure.json")
    widths = [int(w) for w in meta["widths"]]
    memory = MemoryParams(np.array(meta["theta_lambda"]), int(meta["horizons"]), int(meta["input_dim"]))
    mlp = init_mlp(widths, zero_output=True)
    n = meta["normalizer"]
    template = ClosureParams(mlp, memory, Normalizer(n["in_shift"], n["in_scale"],
                                                     n["out_shift"], n["out_scale"]))
    return template.with_flat(read_array(directory / "weights.bin")[:, 0])
