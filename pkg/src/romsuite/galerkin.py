"""Galerkin-projected linear operators and the ridge velocity map.

The reduced right-hand side is

    R(a, a_u) = L a - sum_k a_u[k] A[k] a

with ``L = kappa V^T D2 V`` and ``A[k] = V^T diag(V_u[:, k]) D1 V``. D2 is the
full-order diffusion stencil and D1 the *central* first difference, both with
the full-order boundary rows (pinned inlet, mirrored outlet ghost). The
difference between central and upwind advection is left for the closure.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .arrays import read_array, read_json, write_array, write_json
from .errors import NumericalError, ValidationError
from .fom import Grid1D, PhysicalParams
from .pod import PodBasis


def diffusion_matrix(grid: Grid1D) -> np.ndarray:
    n = grid.n_c
    D = np.zeros((n, n))
    idx = np.arange(1, n - 1)
    D[idx, idx - 1] = 1.0
    D[idx, idx] = -2.0
    D[idx, idx + 1] = 1.0
    D[n - 1, n - 2] = 2.0
    D[n - 1, n - 1] = -2.0
    return D / grid.dx**2


def central_gradient_matrix(grid: Grid1D) -> np.ndarray:
    n = grid.n_c
    D = np.zeros((n, n))
    idx = np.arange(1, n - 1)
    D[idx, idx - 1] = -1.0
    D[idx, idx + 1] = 1.0
    # last row: (ghost - T[n-2]) / 2dx == 0 with the mirrored ghost
    return D / (2.0 * grid.dx)


def linear_rhs_full(T: np.ndarray, u: np.ndarray, grid: Grid1D, params: PhysicalParams) -> np.ndarray:
    """Full-space linear dynamics with central advection and no source."""
    return params.diffusivity * (diffusion_matrix(grid) @ T) - u * (central_gradient_matrix(grid) @ T)


@dataclass
class ReducedOperators:
    L_red: np.ndarray
    A_red: np.ndarray

    @property
    def n_T(self) -> int:
        return self.L_red.shape[0]

    @property
    def n_u(self) -> int:
        return self.A_red.shape[0]


@dataclass
class VelocityMap:
    W: np.ndarray
    b: np.ndarray
    ridge_lambda: float = 0.0

    @property
    def n_u(self) -> int:
        return self.W.shape[0]


def build_reduced_operators(V_T: PodBasis, V_u: PodBasis, grid: Grid1D,
                            params: PhysicalParams) -> ReducedOperators:
    VT = V_T.modes if isinstance(V_T, PodBasis) else np.asarray(V_T)
    Vu = V_u.modes if isinstance(V_u, PodBasis) else np.asarray(V_u)
    if VT.shape[0] != grid.n_c or Vu.shape[0] != grid.n_c:
        raise ValidationError(
            f"bases live on grids of size {VT.shape[0]} and {Vu.shape[0]}, expected {grid.n_c}")
    L_red = params.diffusivity * (VT.T @ (diffusion_matrix(grid) @ VT))
    grad_VT = central_gradient_matrix(grid) @ VT
    A_red = np.stack([(VT * Vu[:, k:k + 1]).T @ grad_VT for k in range(Vu.shape[1])]) \
        if Vu.shape[1] else np.zeros((0, VT.shape[1], VT.shape[1]))
    if not (np.all(np.isfinite(L_red)) and np.all(np.isfinite(A_red))):
        raise NumericalError("reduced operators contain non-finite entries")
    return ReducedOperators(L_red, A_red)


def eval_reduced_rhs(alpha_T: np.ndarray, alpha_u: np.ndarray, ops: ReducedOperators) -> np.ndarray:
    """Reducible dynamics; accepts single vectors or row-stacked batches."""
    a = np.asarray(alpha_T, dtype=np.float64)
    au = np.asarray(alpha_u, dtype=np.float64)
    if a.shape[-1] != ops.n_T or au.shape[-1] != ops.n_u:
        raise ValidationError(
            f"expected alpha_T of size {ops.n_T} and alpha_u of size {ops.n_u}, "
            f"got {a.shape[-1]} and {au.shape[-1]}")
    A_flat = ops.A_red.reshape(ops.n_u * ops.n_T, ops.n_T)
    Aa = (a @ A_flat.T).reshape(a.shape[:-1] + (ops.n_u, ops.n_T))
    return a @ ops.L_red.T - np.einsum("...k,...kj->...j", au, Aa)


def cholesky(A: np.ndarray) -> np.ndarray:
    """Lower-triangular Cholesky factor; raises on a non-positive pivot."""
    A = np.asarray(A, dtype=np.float64)
    n = A.shape[0]
    L = np.zeros_like(A)
    tol = n * np.finfo(float).eps * max(float(np.max(np.abs(np.diag(A)))), np.finfo(float).tiny)
    for j in range(n):
        d = A[j, j] - L[j, :j] @ L[j, :j]
        if not d > tol:
            raise NumericalError(f"matrix is not positive definite (pivot {j} = {d:.3e})")
        L[j, j] = np.sqrt(d)
        L[j + 1:, j] = (A[j + 1:, j] - L[j + 1:, :j] @ L[j, :j]) / L[j, j]
    return L


def cholesky_solve(L: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Solve ``L L^T X = B`` by forward then back substitution."""
    B = np.asarray(B, dtype=np.float64)
    n = L.shape[0]
    Y = np.zeros_like(B)
    for i in range(n):
        Y[i] = (B[i] - L[i, :i] @ Y[:i]) / L[i, i]
    X = np.zeros_like(B)
    for i in reversed(range(n)):
        X[i] = (Y[i] - L[i + 1:, i] @ X[i + 1:]) / L[i, i]
    return X


def _as_features(features) -> np.ndarray:
    if isinstance(features, np.ndarray):
        return np.asarray(features, dtype=np.float64)
    rows = [np.concatenate([np.ravel(a), [float(s)]]) for a, s in features]
    return np.array(rows)


def fit_velocity_map(features, targets, ridge_lambda: float) -> VelocityMap:
    """Ridge fit of ``a_u = W [a_T; S] + b`` with an unpenalized intercept.

    ``features`` is either an ``(N, n_T + 1)`` array or a list of ``(a_T, S)``
    pairs. Centering features and targets removes the intercept from the
    penalized normal equations ``(Xc^T Xc + lambda I) W^T = Xc^T Yc``.
    """
    X = _as_features(features)
    Y = np.asarray(targets, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.shape[0] < 2 or X.shape[0] != Y.shape[0]:
        raise ValidationError("need at least 2 samples with matching targets")
    if ridge_lambda < 0:
        raise ValidationError("ridge_lambda must be non-negative")
    x_mean = X.mean(axis=0)
    y_mean = Y.mean(axis=0)
    Xc = X - x_mean
    Yc = Y - y_mean
    G = Xc.T @ Xc + ridge_lambda * np.eye(X.shape[1])
    try:
        Wt = cholesky_solve(cholesky(G), Xc.T @ Yc)
    except NumericalError as exc:
        raise NumericalError(f"ridge normal equations are singular: {exc}") from None
    W = Wt.T
    b = y_mean - W @ x_mean
    return VelocityMap(W, b, float(ridge_lambda))


def predict_velocity(vmap: VelocityMap, alpha_T, S) -> np.ndarray:
    a = np.asarray(alpha_T, dtype=np.float64)
    if a.shape[-1] + 1 != vmap.W.shape[1]:
        raise ValidationError(
            f"velocity map expects {vmap.W.shape[1] - 1} temperature coordinates, got {a.shape[-1]}")
    S = np.asarray(S, dtype=np.float64)
    feat = np.concatenate([a, S[..., None]], axis=-1)
    return feat @ vmap.W.T + vmap.b


def cross_validate_ridge(features, targets, grid, folds: int = 5) -> tuple[float, list[float]]:
    """Pick the ridge penalty with the lowest k-fold validation MSE.

    Folds are contiguous blocks of samples, so the result is deterministic.
    Ties go to the first value in ``grid``.
    """
    X = _as_features(features)
    Y = np.asarray(targets, dtype=np.float64).reshape(X.shape[0], -1)
    n = X.shape[0]
    if n < folds:
        raise ValidationError(f"{folds}-fold cross-validation needs at least {folds} samples")
    bounds = np.linspace(0, n, folds + 1).astype(int)
    scores = []
    for lam in grid:
        err = 0.0
        for f in range(folds):
            lo, hi = bounds[f], bounds[f + 1]
            train = np.r_[0:lo, hi:n]
            vmap = fit_velocity_map(X[train], Y[train], lam)
            pred = X[lo:hi] @ vmap.W.T + vmap.b
            err += float(np.sum((pred - Y[lo:hi]) ** 2))
        scores.append(err / n)
    best = int(np.argmin(scores))
    return float(grid[best]), scores


def save_rom(directory: str | Path, ops: ReducedOperators, vmap: VelocityMap, extra: dict | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {"n_T": ops.n_T, "n_u": ops.n_u, "ridge_lambda": vmap.ridge_lambda,
            "A_red_layout": "rows k*n_T + j, columns i"}
    meta.update(extra or {})
    write_json(directory / "rom.json", meta)
    write_array(directory / "L_red.bin", ops.L_red)
    write_array(directory / "A_red.bin", ops.A_red.reshape(ops.n_u * ops.n_T, ops.n_T))
    write_array(directory / "vmap_W.bin", vmap.W)
    write_array(directory / "vmap_b.bin", vmap.b)


def load_rom(directory: str | Path) -> tuple[ReducedOperators, VelocityMap, dict]:
    directory = Path(directory)
    meta = read_json(directory / "rom.json")
    n_T, n_u = int(meta["n_T"]), int(meta["n_u"])
    ops = ReducedOperators(read_array(directory / "L_red.bin"),
                           read_array(directory / "A_red.bin").reshape(n_u, n_T, n_T))
    vmap = VelocityMap(read_array(directory / "vmap_W.bin"),
                       read_array(directory / "vmap_b.bin")[:, 0], float(meta["ridge_lambda"]))
    return ops, vmap, meta
