"""Proper orthogonal decomposition by the method of snapshots.

The symmetric eigenproblem is solved with a cyclic Jacobi iteration. Rotations
are scheduled in round-robin ("chess tournament") order so that each round
applies ``n // 2`` disjoint plane rotations as whole-array operations.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .arrays import read_array, read_json, write_array, write_json
from .errors import NumericalError, RankError, ValidationError

#: Eigenvalues below this fraction of the largest are treated as zero.
RANK_TOL = 1e-12


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Pairings covering every unordered pair of ``range(n)`` exactly once."""
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        p, q = [], []
        for i in range(m // 2):
            a, b = players[i], players[m - 1 - i]
            if a < n and b < n:
                p.append(min(a, b))
                q.append(max(a, b))
        rounds.append((np.array(p, dtype=np.intp), np.array(q, dtype=np.intp)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _off_norm(A: np.ndarray) -> float:
    off = A - np.diag(np.diag(A))
    return float(np.sqrt(np.sum(off * off)))


def jacobi_eigh(A: np.ndarray, tol: float = 1e-14, max_sweeps: int = 60):
    """Eigen-decomposition of a symmetric matrix.

    Returns ``(eigenvalues, eigenvectors)`` sorted by decreasing eigenvalue.
    Sweeps stop once the off-diagonal Frobenius norm is at most
    ``tol * ||A||_F``.
    """
    A = np.array(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValidationError("jacobi_eigh expects a square matrix")
    A = 0.5 * (A + A.T)
    n = A.shape[0]
    V = np.eye(n)
    scale = float(np.sqrt(np.sum(A * A)))
    if n == 1 or scale == 0.0:
        return np.diag(A).copy(), V
    rounds = _round_robin(n)
    for _ in range(max_sweeps):
        if _off_norm(A) <= tol * scale:
            break
        for p, q in rounds:
            if p.size == 0:
                continue
            apq = A[p, q]
            active = apq != 0.0
            if not np.any(active):
                continue
            app = A[p, p]
            aqq = A[q, q]
            with np.errstate(divide="ignore", invalid="ignore"):
                tau = np.where(active, (aqq - app) / (2.0 * apq), 0.0)
            sgn = np.where(tau >= 0.0, 1.0, -1.0)
            t = np.where(active, sgn / (np.abs(tau) + np.sqrt(1.0 + tau * tau)), 0.0)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c
            # A <- A J (columns), then J^T A (rows); V <- V J
            Ap, Aq = A[:, p], A[:, q]
            A[:, p] = c * Ap - s * Aq
            A[:, q] = s * Ap + c * Aq
            Ap, Aq = A[p, :], A[q, :]
            A[p, :] = c[:, None] * Ap - s[:, None] * Aq
            A[q, :] = s[:, None] * Ap + c[:, None] * Aq
            A[p, q] = np.where(active, 0.0, A[p, q])
            A[q, p] = A[p, q]
            Vp, Vq = V[:, p], V[:, q]
            V[:, p] = c * Vp - s * Vq
            V[:, q] = s * Vp + c * Vq
    else:
        if _off_norm(A) > tol * scale:
            raise NumericalError(f"Jacobi iteration did not converge in {max_sweeps} sweeps")
    w = np.diag(A).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], V[:, order]


def _canonical_signs(modes: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(modes), axis=0)
    signs = np.where(modes[idx, np.arange(modes.shape[1])] < 0, -1.0, 1.0)
    return modes * signs


@dataclass
class PodBasis:
    modes: np.ndarray
    singular_values: np.ndarray
    energy_captured: float
    total_snapshots: int
    total_energy: float
    mean: np.ndarray | None = None

    @property
    def rank(self) -> int:
        return self.modes.shape[1]

    @property
    def n_c(self) -> int:
        return self.modes.shape[0]

    @property
    def numerical_rank(self) -> int:
        return len(self._spectrum) if hasattr(self, "_spectrum") else self.rank

    def residual_energy(self) -> float:
        """Sum of squared singular values beyond the kept rank."""
        return max(self.total_energy - float(np.sum(self.singular_values**2)), 0.0)

    def truncated(self, r: int) -> "PodBasis":
        if r < 1 or r > self.rank:
            raise RankError(f"rank {r} outside 1..{self.rank}")
        sv = self.singular_values[:r]
        return PodBasis(self.modes[:, :r].copy(), sv.copy(),
                        float(np.sum(sv**2) / self.total_energy), self.total_snapshots,
                        self.total_energy, self.mean)


def compute_pod(X: np.ndarray, rank: int | None = None, energy: float | None = None,
                center: bool = False) -> PodBasis:
    """POD of the ``n_c x n_s`` snapshot matrix ``X`` (one snapshot per column).

    Exactly one of ``rank`` and ``energy`` may be given; with neither, every
    numerically nonzero mode is kept. When ``n_s > n_c`` the ``n_c x n_c``
    correlation matrix is diagonalized instead of the snapshot Gram matrix.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.size == 0:
        raise ValidationError("snapshot matrix must be a non-empty 2-D array")
    if not np.all(np.isfinite(X)):
        raise ValidationError("snapshot matrix contains non-finite values")
    if rank is not None and energy is not None:
        raise ValidationError("give either rank or energy, not both")
    if energy is not None and not 0 < energy <= 1:
        raise ValidationError("energy fraction must lie in (0, 1]")
    n_c, n_s = X.shape
    mean = None
    if center:
        mean = X.mean(axis=1)
        X = X - mean[:, None]

    total = float(np.sum(X * X))
    if total == 0.0:
        raise RankError("snapshot matrix is identically zero")
    if n_s <= n_c:
        lam, W = jacobi_eigh(X.T @ X)
    else:
        lam, W = jacobi_eigh(X @ X.T)
    keep = lam > RANK_TOL * lam[0]
    lam, W = lam[keep], W[:, keep]
    sigma = np.sqrt(lam)
    modes = (X @ W) / sigma if n_s <= n_c else W
    modes = _canonical_signs(modes)

    numerical = len(sigma)
    if rank is not None:
        if rank < 1:
            raise ValidationError("rank must be at least 1")
        if rank > numerical:
            raise RankError(f"requested rank {rank} exceeds numerical rank {numerical}")
        r = rank
    elif energy is not None:
        cum = np.cumsum(lam) / total
        hits = np.nonzero(cum >= energy)[0]
        r = int(hits[0]) + 1 if hits.size else numerical
    else:
        r = numerical
    basis = PodBasis(modes[:, :r].copy(), sigma[:r].copy(),
                     float(np.sum(lam[:r]) / total), n_s, total, mean)
    basis._spectrum = sigma
    return basis


def _check_len(n: int, expected: int, what: str):
    if n != expected:
        raise ValidationError(f"{what}: expected length {expected}, got {n}")


def project(basis: PodBasis, field: np.ndarray) -> np.ndarray:
    """Reduced coordinates ``V^T field``; columns of a 2-D input are fields."""
    field = np.asarray(field, dtype=np.float64)
    _check_len(field.shape[0], basis.n_c, "project")
    if basis.mean is not None:
        field = field - (basis.mean if field.ndim == 1 else basis.mean[:, None])
    return basis.modes.T @ field


def reconstruct(basis: PodBasis, coords: np.ndarray) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.float64)
    _check_len(coords.shape[0], basis.rank, "reconstruct")
    field = basis.modes @ coords
    if basis.mean is not None:
        field = field + (basis.mean if field.ndim == 1 else basis.mean[:, None])
    return field


def spectrum(basis: PodBasis) -> np.ndarray:
    """All numerically nonzero singular values seen when the basis was built."""
    return getattr(basis, "_spectrum", basis.singular_values)


def save_basis(directory: str | Path, basis: PodBasis) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {
        "r": basis.rank,
        "n_c": basis.n_c,
        "singular_values": basis.singular_values.tolist(),
        "energy_captured": basis.energy_captured,
        "total_energy": basis.total_energy,
        "total_snapshots": basis.total_snapshots,
        "centered": basis.mean is not None,
    }
    write_json(directory / "basis_meta.json", meta)
    write_array(directory / "modes.bin", basis.modes)
    if basis.mean is not None:
        write_array(directory / "mean.bin", basis.mean)


def load_basis(directory: str | Path) -> PodBasis:
    directory = Path(directory)
    meta = read_json(directory / "basis_meta.json")
    mean = read_array(directory / "mean.bin")[:, 0] if meta.get("centered") else None
    return PodBasis(read_array(directory / "modes.bin"),
                    np.array(meta["singular_values"]), float(meta["energy_captured"]),
                    int(meta["total_snapshots"]), float(meta["total_energy"]), mean)
