import numpy as np
import pytest

# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []

from romsuite.closure import make_closure
from romsuite.fom import Grid1D, PhysicalParams, capped_dt, simulate_fom
from romsuite.galerkin import build_reduced_operators, fit_velocity_map
from romsuite.pod import compute_pod, project
from romsuite.signals import SignalSpec, sample_coefficients
from romsuite.training import build_dataset, fit_normalizer


class SmallProblem:
    """A few short full-order trajectories on a coarse grid and the ROM built from them."""

    def __init__(self, n_traj=5, n_c=64, t_end=4.0, n_T=4):
        self.grid = Grid1D(n_c)
        self.params = PhysicalParams()
        spec = SignalSpec(seed=11)
        self.sets = []
        for i in range(n_traj):
            c = sample_coefficients(spec, i)
            dt = capped_dt(c, self.grid, self.params, 1e-3, 0.25)
            self.sets.append(simulate_fom(c, self.grid, self.params, t_end, dt, 0.25))
        X = np.hstack([s.temps.T for s in self.sets])
        U = np.hstack([s.vels.T for s in self.sets])
        self.basis_T = compute_pod(X, rank=n_T)
        self.basis_u = compute_pod(U)
        self.ops = build_reduced_operators(self.basis_T, self.basis_u, self.grid, self.params)
        self.dataset = build_dataset(self.sets, self.basis_T, 0.8, seed=0)
        by_index = {s.coeffs.index: s for s in self.sets}
        feats = np.vstack([np.column_stack([r.targets, r.controls]) for r in self.dataset.train])
        tgts = np.vstack([project(self.basis_u, by_index[r.coeffs.index].vels.T).T
                          for r in self.dataset.train])
        self.vmap = fit_velocity_map(feats, tgts, 1e-8)

    def closure(self, hidden=(8, 8), seed=0, scale=0.3, timescales=(1.0, 4.0)):
        """Closure with normalizer fitted on the data and a nonzero random output layer."""
        c = make_closure(self.ops.n_T, self.ops.n_u, hidden, timescales, seed=seed)
        c.normalizer = fit_normalizer(self.dataset.train, self.ops, self.vmap, c)
        rng = np.random.Generator(np.random.PCG64(seed + 100))
        flat = c.to_flat()
        flat[:c.mlp.size] += scale * rng.standard_normal(c.mlp.size)
        return c.with_flat(flat)


@pytest.fixture(scope="session")
def small():
    return SmallProblem()


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
