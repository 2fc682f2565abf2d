"""Pipeline commands over a workspace directory.

Layout under the workspace root::

    dataset/   dataset.json, traj_000/ ... (meta.json, temps.bin, vels.bin)
    basis/     T/, u/ (basis_meta.json, modes.bin), pod_report.json
    rom/       rom.json, L_red.bin, A_red.bin, vmap_W.bin, vmap_b.bin
    closure/   closure.json, weights.bin, history.csv
    eval/      eval.json, mode_1.csv ... mode_<n_T>.csv
    simulate/  simulate.json, traj_000.csv ...

Each stage checks that its inputs exist, writes its outputs and snapshots the
effective configuration as ``config.json`` in its own directory. Every
artifact except the wall-clock fields is a deterministic function of the
configuration.
"""

from __future__ import annotations

import logging
import math
import shutil
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from .arrays import read_json, write_json
from .closure import load_closure, make_closure, save_closure
from .config import WorkspaceConfig, snapshot_config
from .errors import NumericalError, RankError, RomsuiteError, ValidationError
from .fom import capped_dt, load_snapshots, save_snapshots, simulate_fom
from .galerkin import (build_reduced_operators, cross_validate_ridge, eval_reduced_rhs,
                       fit_velocity_map, linear_rhs_full, load_rom, save_rom)
from .odeint import CheckpointPolicy
from .pod import PodBasis, compute_pod, load_basis, project, save_basis
from .signals import ControlCoeffs, evaluate_signal, sample_coefficients
from .training import (build_dataset, evaluate_model, fit_normalizer, simulate_coefficients,
                       train_closure)

log = logging.getLogger("romsuite")

GALERKIN_TOL = 1e-11


def _fmt(x: float) -> str:
    return repr(float(x))


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise ValidationError(f"missing {path} (run 'romsuite {producer}' first)")
    return path


def _stage_dir(cfg: WorkspaceConfig, name: str) -> Path:
    path = cfg.root / name
    path.mkdir(parents=True, exist_ok=True)
    return path


# --------------------------------------------------------------------------- loaders


def load_dataset(cfg: WorkspaceConfig):
    """Snapshot sets in manifest order."""
    manifest_path = _require(cfg.root / "dataset" / "dataset.json", "generate")
    manifest = read_json(manifest_path)
    sets = []
    for entry in manifest["trajectories"]:
        snaps, grid, params = load_snapshots(cfg.root / "dataset" / entry["dir"])
        sets.append(snaps)
    return sets, grid, params


def _load_bases(cfg: WorkspaceConfig):
    basis_dir = cfg.root / "basis"
    _require(basis_dir / "T" / "modes.bin", "pod")
    _require(basis_dir / "u" / "modes.bin", "pod")
    return load_basis(basis_dir / "T"), load_basis(basis_dir / "u")


def _load_rom(cfg: WorkspaceConfig):
    _require(cfg.root / "rom" / "rom.json", "build-rom")
    ops, vmap, meta = load_rom(cfg.root / "rom")
    if meta.get("identity_basis"):
        raise ValidationError("rom/ was built with the identity-basis debug flag; "
                              "re-run 'romsuite build-rom' without it")
    return ops, vmap


def _dataset_split(cfg: WorkspaceConfig, basis_T: PodBasis):
    sets, grid, params = load_dataset(cfg)
    return build_dataset(sets, basis_T, cfg.train.split_fraction, cfg.seed), sets, grid, params


# --------------------------------------------------------------------------- generate


def cmd_generate(cfg: WorkspaceConfig) -> dict:
    """Simulate ``n_trajectories`` full-order trajectories and write the manifest."""
    out = _stage_dir(cfg, "dataset")
    grid, params = cfg.fom.grid(), cfg.fom.params()
    spec = cfg.signal_spec()
    n = cfg.signals.n_trajectories
    entries = []
    start = time.perf_counter()
    for i in range(n):
        coeffs = sample_coefficients(spec, i)
        try:
            dt = capped_dt(coeffs, grid, params, cfg.fom.dt, cfg.fom.snap_every)
            snaps = simulate_fom(coeffs, grid, params, cfg.fom.t_end, dt, cfg.fom.snap_every)
        except RomsuiteError as exc:
            raise type(exc)(f"trajectory {i}: {exc}") from None
        name = f"traj_{i:03d}"
        save_snapshots(out / name, snaps, grid, params)
        if dt < cfg.fom.dt:
            log.info("trajectory %d: dt reduced to %.6g by the CFL bound", i, dt)
        entries.append({"index": i, "dir": name, "dt": dt, "coeffs": coeffs.to_json(),
                        "n_snapshots": snaps.n_snapshots})
        log.info("generated %s (%d snapshots)", name, snaps.n_snapshots)
    # drop trajectory directories left over from a larger earlier run
    for stale in sorted(out.glob("traj_*")):
        if stale.is_dir() and stale.name not in {e["dir"] for e in entries}:
            shutil.rmtree(stale)
    manifest = {"n_trajectories": n, "n_c": grid.n_c, "t_end": cfg.fom.t_end,
                "snap_every": cfg.fom.snap_every, "trajectories": entries}
    write_json(out / "dataset.json", manifest)
    snapshot_config(out, cfg)
    log.info("generate: %d trajectories in %.1f s", n, time.perf_counter() - start)
    return manifest


# --------------------------------------------------------------------------- pod


def _energy_entry(basis: PodBasis, X: np.ndarray, requested: int, threshold: float) -> dict:
    sigma = np.asarray(basis._spectrum if hasattr(basis, "_spectrum") else basis.singular_values)
    energy = sigma**2
    cum = np.cumsum(energy) / basis.total_energy
    hits = np.nonzero(cum >= threshold)[0]
    data = X if basis.mean is None else X - basis.mean[:, None]
    resid = data - basis.modes @ (basis.modes.T @ data)
    actual = float(np.sum(resid * resid))
    predicted = float(np.sum(energy[basis.rank:])) + max(
        basis.total_energy - float(np.sum(energy)), 0.0)
    return {
        "rank_requested": requested,
        "rank": basis.rank,
        "numerical_rank": int(len(sigma)),
        "energy_captured": basis.energy_captured,
        "meets_threshold": bool(basis.energy_captured >= threshold),
        "smallest_rank_reaching_threshold": int(hits[0]) + 1 if hits.size else None,
        "residual_energy": actual,
        "tail_energy": predicted,
        "energy_identity_relative_error": abs(actual - predicted) / basis.total_energy,
        "singular_values": sigma.tolist(),
    }


def _pod_clamped(X: np.ndarray, requested: int, center: bool, what: str) -> PodBasis:
    full = compute_pod(X, center=center)
    r = min(requested, full.numerical_rank)
    if r < requested:
        log.warning("%s snapshots have numerical rank %d; using %d modes instead of %d",
                    what, full.numerical_rank, r, requested)
    basis = full.truncated(r)
    basis._spectrum = full._spectrum
    return basis


def cmd_pod(cfg: WorkspaceConfig) -> dict:
    """Temperature and velocity bases plus the energy report."""
    sets, grid, _ = load_dataset(cfg)
    X = np.hstack([s.temps.T for s in sets])
    U = np.hstack([s.vels.T for s in sets])
    out = _stage_dir(cfg, "basis")
    try:
        basis_T = _pod_clamped(X, cfg.pod.n_T, cfg.pod.center, "temperature")
        basis_u = _pod_clamped(U, cfg.pod.n_u, cfg.pod.center, "velocity")
    except RankError as exc:
        raise RankError(f"cannot build a basis: {exc}") from None
    save_basis(out / "T", basis_T)
    save_basis(out / "u", basis_u)
    threshold = cfg.pod.energy_threshold
    report = {
        "threshold": threshold,
        "n_snapshots": int(X.shape[1]),
        "temperature": _energy_entry(basis_T, X, cfg.pod.n_T, threshold),
        "velocity": _energy_entry(basis_u, U, cfg.pod.n_u, threshold),
    }
    write_json(out / "pod_report.json", report)
    snapshot_config(out, cfg)
    for key in ("temperature", "velocity"):
        e = report[key]
        log.info("pod %s: rank %d captures %.8f of the energy (threshold %.2f %s; "
                 "smallest rank reaching it: %s)", key, e["rank"], e["energy_captured"],
                 threshold, "met" if e["meets_threshold"] else "NOT met",
                 e["smallest_rank_reaching_threshold"])
    return report


# --------------------------------------------------------------------------- build-rom


def galerkin_spot_check(basis_T: PodBasis, basis_u: PodBasis, ops, grid, params,
                        n_samples: int = 100, seed: int = 0) -> float:
    """Largest relative gap between the reduced RHS and the projected full linear RHS."""
    rng = np.random.Generator(np.random.PCG64(seed))
    worst = 0.0
    for _ in range(n_samples):
        a = rng.standard_normal(ops.n_T)
        au = rng.standard_normal(ops.n_u)
        reduced = eval_reduced_rhs(a, au, ops)
        full = linear_rhs_full(basis_T.modes @ a, basis_u.modes @ au, grid, params)
        ref = basis_T.modes.T @ full
        scale = max(float(np.max(np.abs(ref))), 1e-300)
        worst = max(worst, float(np.max(np.abs(reduced - ref))) / scale)
    return worst


def cmd_build_rom(cfg: WorkspaceConfig) -> dict:
    """Galerkin operators and the cross-validated ridge velocity map."""
    basis_T, basis_u = _load_bases(cfg)
    if basis_T.mean is not None or basis_u.mean is not None:
        raise ValidationError("the Galerkin operators need uncentered bases (pod.center = false)")
    dataset, sets, grid, params = _dataset_split(cfg, basis_T)
    if basis_T.n_c != grid.n_c or basis_u.n_c != grid.n_c:
        raise ValidationError("bases and dataset were built on different grids")
    if cfg.rom.identity_basis:
        basis_T = PodBasis(np.eye(grid.n_c), np.ones(grid.n_c), 1.0, 0, float(grid.n_c))
    ops = build_reduced_operators(basis_T, basis_u, grid, params)

    by_index = {s.coeffs.index: s for s in sets}
    train = dataset.train
    features = np.vstack([np.column_stack([project(basis_T, by_index[r.coeffs.index].temps.T).T,
                                           r.controls]) for r in train])
    targets = np.vstack([project(basis_u, by_index[r.coeffs.index].vels.T).T for r in train])
    lam, scores = cross_validate_ridge(features, targets, cfg.rom.ridge_grid, cfg.rom.cv_folds)
    vmap = fit_velocity_map(features, targets, lam)
    log.info("ridge cross-validation picked lambda = %g", lam)

    worst = galerkin_spot_check(basis_T, basis_u, ops, grid, params, seed=cfg.seed)
    passed = worst <= GALERKIN_TOL
    log.info("Galerkin consistency spot check: max relative error %.3e (tolerance %.0e) %s",
             worst, GALERKIN_TOL, "passed" if passed else "FAILED")
    if not passed:
        raise NumericalError(
            f"Galerkin consistency check failed: relative error {worst:.3e} > {GALERKIN_TOL:.0e}")
    out = _stage_dir(cfg, "rom")
    meta = {"ridge_grid": list(cfg.rom.ridge_grid), "cv_scores": scores, "cv_folds": cfg.rom.cv_folds,
            "galerkin_check_max_rel_error": worst, "galerkin_check_tolerance": GALERKIN_TOL,
            "identity_basis": bool(cfg.rom.identity_basis)}
    save_rom(out, ops, vmap, meta)
    snapshot_config(out, cfg)
    return {"ridge_lambda": lam, **meta}


# --------------------------------------------------------------------------- train


def cmd_train(cfg: WorkspaceConfig) -> dict:
    """Fit the closure; writes the best parameters and ``history.csv``."""
    basis_T, basis_u = _load_bases(cfg)
    ops, vmap = _load_rom(cfg)
    if ops.n_T != basis_T.rank:
        raise ValidationError("rom/ does not match basis/T; re-run 'romsuite build-rom'")
    dataset, _, _, _ = _dataset_split(cfg, basis_T)
    init = make_closure(ops.n_T, ops.n_u, [int(w) for w in cfg.closure.hidden],
                        cfg.closure.timescales, seed=cfg.seed)
    init.normalizer = fit_normalizer(dataset.train, ops, vmap, init)
    out = _stage_dir(cfg, "closure")
    history_path = out / "history.csv"
    lines = ["epoch,train_loss,val_loss,wall_seconds"]

    def on_epoch(rec):
        lines.append(f"{rec.epoch},{_fmt(rec.train_loss)},{_fmt(rec.val_loss)},"
                     f"{rec.wall_seconds:.3f}")
        log.info("epoch %d  train %.6g  val %.6g  (%.1f s)", rec.epoch, rec.train_loss,
                 rec.val_loss, rec.wall_seconds)

    config = cfg.train.train_config(cfg.seed)
    best, history = train_closure(dataset, ops, vmap, init, config, cfg.rom.dt,
                                  CheckpointPolicy(cfg.train.segment_length), on_epoch)
    history_path.write_text("\n".join(lines) + "\n")
    best_val = min((h.val_loss for h in history), default=None)
    save_closure(out, best, {"rom_dt": cfg.rom.dt, "epochs": len(history),
                             "best_val_loss": best_val})
    snapshot_config(out, cfg)
    return {"epochs": len(history), "best_val_loss": best_val,
            "final_train_loss": history[-1].train_loss if history else None}


# --------------------------------------------------------------------------- eval


def _write_csv(path: Path, header: Sequence[str], columns: Sequence[np.ndarray]) -> None:
    rows = [",".join(header)]
    for row in zip(*columns):
        rows.append(",".join(_fmt(v) for v in row))
    path.write_text("\n".join(rows) + "\n")


def cmd_eval(cfg: WorkspaceConfig) -> dict:
    """Score corrected and uncorrected rollouts on the test split."""
    basis_T, _ = _load_bases(cfg)
    ops, vmap = _load_rom(cfg)
    _require(cfg.root / "closure" / "weights.bin", "train")
    closure = load_closure(cfg.root / "closure")
    dataset, _, _, _ = _dataset_split(cfg, basis_T)
    records = dataset.test
    report = evaluate_model(records, ops, vmap, closure, cfg.rom.dt)
    out = _stage_dir(cfg, "eval")
    payload = report.to_json()
    payload["split"] = "test"
    payload["plotted_trajectory"] = report.indices[0]
    payload["improvement_factor"] = (report.mean_uncorrected / report.mean_corrected
                                     if report.mean_corrected > 0 else math.inf)
    write_json(out / "eval.json", payload)
    for k in range(ops.n_T):
        _write_csv(out / f"mode_{k + 1}.csv", ("t", "truth", "corrected", "uncorrected"),
                   (report.times, report.truth[0][:, k], report.corrected[0][:, k],
                    report.uncorrected[0][:, k]))
    snapshot_config(out, cfg)
    log.info("eval: mean test NRMSE corrected %.4f, uncorrected %.4f",
             report.mean_corrected, report.mean_uncorrected)
    return payload


# --------------------------------------------------------------------------- simulate


def read_coeff_file(path: str | Path) -> list[ControlCoeffs]:
    """A JSON coefficient record or a list of them."""
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"coefficient file not found: {path}")
    try:
        payload = read_json(path)
    except ValueError as exc:
        raise ValidationError(f"coefficient file {path} is not valid JSON: {exc}") from None
    records = payload if isinstance(payload, list) else [payload]
    if not records:
        raise ValidationError(f"coefficient file {path} lists no trajectories")
    return [ControlCoeffs.from_json(r) for r in records]


def cmd_simulate(cfg: WorkspaceConfig, coeffs: Sequence[ControlCoeffs] | None = None,
                 batch: int | None = None) -> dict:
    """Roll out closure-corrected trajectories from the zero initial field.

    Without explicit coefficients, ``batch`` trajectories are sampled with the
    workspace seed at indices following the generated dataset's.
    """
    basis_T, _ = _load_bases(cfg)
    ops, vmap = _load_rom(cfg)
    _require(cfg.root / "closure" / "weights.bin", "train")
    closure = load_closure(cfg.root / "closure")
    if coeffs is None:
        n = 1 if batch is None else batch
        if n < 1:
            raise ValidationError("--batch must be at least 1")
        first = cfg.signals.n_trajectories
        coeffs = [sample_coefficients(cfg.signal_spec(), first + i) for i in range(n)]
    coeffs = list(coeffs)
    f = cfg.fom
    n_snaps = 1 + round(f.t_end / f.snap_every)
    times = np.arange(n_snaps) * f.snap_every
    alpha0 = project(basis_T, np.zeros(basis_T.n_c))

    # one short rollout first so the timing excludes loading the compiled kernels
    simulate_coefficients(coeffs[:1], times[:2], alpha0, ops, vmap, closure, cfg.rom.dt)
    start = time.perf_counter()
    traj = simulate_coefficients(coeffs, times, alpha0, ops, vmap, closure, cfg.rom.dt)
    wall = time.perf_counter() - start

    out = _stage_dir(cfg, "simulate")
    for stale in out.glob("traj_*.csv"):
        stale.unlink()
    header = ["t", "S"] + [f"a_{k + 1}" for k in range(ops.n_T)]
    for b, c in enumerate(coeffs):
        S = evaluate_signal(c, times)
        _write_csv(out / f"traj_{b:03d}.csv", header, [times, S] + [traj[:, b, k]
                                                                    for k in range(ops.n_T)])
    summary = {"n_trajectories": len(coeffs), "wall_seconds": wall,
               "trajectories_per_second": len(coeffs) / wall if wall > 0 else math.inf,
               "coeffs": [c.to_json() for c in coeffs]}
    write_json(out / "simulate.json", summary)
    snapshot_config(out, cfg)
    log.info("simulate: %d trajectories in %.3f s (%.1f trajectories/s)", len(coeffs), wall,
             summary["trajectories_per_second"])
    return summary

