"""Cross-solver certification against the unrestricted small-N solver.

Every scalable solver in the package (collective sector evolution, pair
cumulant closure, trajectory ensembles) is checked here against the 2^N
master-equation integration, which makes no structural assumptions at all.
The suite runs the full parameter cross N in {2, 4, 6}, drive ratio in
{0.5, 0.9}, single-particle decay in {0, 2} from the -x coherent state and
reports one row per comparison:

  collective  max absolute error over all ten collective moments (only the
              gamma_s = 0 cases; the sector solver does not apply otherwise)
  cumulant    max absolute error in the per-particle pair variables
              (sp, sz, zp, pm, zz, pp), the natural O(1) scale of the closure
  mcwf        worst deviation of the ensemble moment means from the exact
              values, in units of the ensemble standard error; cells whose
              sample spread is exactly zero are deterministic (initial-time
              rows, conserved J^2 at gamma_s = 0) and must agree to float
              round-off instead

Thresholds are fixed here, not configurable: they are the certification
contract that lets the sector-changing jump weights and the closure be
trusted at large N where no oracle exists.
"""

import numpy as np

from .bruteforce import brute_force_evolve, pi_pair_moments
from .cumulant import evolve_cumulant_states, init_from_css
from .dicke import coherent_spin_state
from .mcwf import EnsembleSpec, run_ensemble
from .params import SystemParams
from .series import moment_row

THETA0, PHI0 = np.pi / 2.0, np.pi     # -x coherent state

N_VALUES = (2, 4, 6)
RATIO_VALUES = (0.5, 0.9)
GAMMA_S_VALUES = (0.0, 2.0)
CHI = 1.0

COLLECTIVE_TOL = 1e-8
CUMULANT_TOL = 5e-2
MCWF_SIGMA = 3.0
FROZEN_TOL = 1e-12    # zero-spread ensemble cells: exact up to round-off

DEFAULT_N_TRAJ = 20000
DEFAULT_SEED = 1905
T_END = 1.0
N_TIMES = 21


class CheckRow:
    """One comparison outcome: a solver at one parameter point."""

    def __init__(self, solver, n_atoms, ratio, gamma_s, metric, threshold):
        self.solver = solver
        self.n_atoms = n_atoms
        self.ratio = ratio
        self.gamma_s = gamma_s
        self.metric = metric
        self.threshold = threshold
        self.passed = bool(metric <= threshold)

    def __repr__(self):
        tag = "pass" if self.passed else "FAIL"
        return (f"CheckRow({self.solver}, N={self.n_atoms}, "
                f"ratio={self.ratio}, gs={self.gamma_s}: "
                f"{self.metric:.3g} vs {self.threshold:g} -> {tag})")


def _pair_vector(d):
    """Flatten the pair-moment dict to the cumulant state vector layout."""
    return np.array([d["sp"].real, d["sp"].imag, float(np.real(d["sz"])),
                     d["zp"].real, d["zp"].imag, float(np.real(d["pm"])),
                     float(np.real(d["zz"])), d["pp"].real, d["pp"].imag])


def check_point(params, t_grid, n_traj=DEFAULT_N_TRAJ, master_seed=DEFAULT_SEED,
                workers=None):
    """All applicable solver comparisons at one parameter point."""
    n = params.n_atoms
    moments, densities = brute_force_evolve(params, (THETA0, PHI0), t_grid)
    exact_rows = np.array([moment_row(m) for m in moments])
    rows = []

    if params.gamma_s == 0.0:
        from .collective import CollectiveDensity, evolve_collective
        psi = coherent_spin_state(n, THETA0, PHI0)
        dens0 = CollectiveDensity.from_pure(psi)
        path = evolve_collective(dens0, params, t_grid, rtol=1e-11, atol=1e-13)
        coll_rows = np.array([moment_row(m) for m in path.moments])
        err = float(np.max(np.abs(coll_rows - exact_rows)))
        rows.append(CheckRow("collective", n, params.upsilon / params.upsilon_c,
                             params.gamma_s, err, COLLECTIVE_TOL))

    states = evolve_cumulant_states(init_from_css(THETA0, PHI0), params,
                                    t_grid, rtol=1e-10)
    cum = np.array([s.as_vector() for s in states])
    ref = np.array([_pair_vector(pi_pair_moments(r, n)) for r in densities])
    err = float(np.max(np.abs(cum - ref)))
    rows.append(CheckRow("cumulant", n, params.upsilon / params.upsilon_c,
                         params.gamma_s, err, CUMULANT_TOL))

    spec = EnsembleSpec(n_traj=n_traj, master_seed=master_seed, t_grid=t_grid)
    res = run_ensemble(spec, params, (THETA0, PHI0), workers=workers, rtol=1e-8)
    diff = np.abs(res.raw_mean - exact_rows)
    live = res.se > 0.0
    worst = float(np.max(diff[live] / res.se[live])) if live.any() else 0.0
    rows.append(CheckRow("mcwf", n, params.upsilon / params.upsilon_c,
                         params.gamma_s, worst, MCWF_SIGMA))
    frozen = float(diff[~live].max()) if (~live).any() else 0.0
    rows.append(CheckRow("mcwf-frozen", n, params.upsilon / params.upsilon_c,
                         params.gamma_s, frozen, FROZEN_TOL))
    return rows


def run_oracle_check(n_traj=DEFAULT_N_TRAJ, master_seed=DEFAULT_SEED,
                     workers=None, progress=None):
    """The full certification suite; returns a list of CheckRow."""
    t_grid = np.linspace(0.0, T_END, N_TIMES)
    rows = []
    for n in N_VALUES:
        for ratio in RATIO_VALUES:
            for gs in GAMMA_S_VALUES:
                p = SystemParams.from_upsilon_ratio(n, CHI, ratio, gamma_s=gs)
                rows.extend(check_point(p, t_grid, n_traj=n_traj,
                                        master_seed=master_seed,
                                        workers=workers))
                if progress is not None:
                    progress(n, ratio, gs)
    return rows


def all_passed(rows):
    return all(r.passed for r in rows)


def format_report(rows):
    """Fixed-width pass/fail table, one line per comparison."""
    out = [f"{'solver':<12} {'N':>2} {'ratio':>5} {'gamma_s':>7} "
           f"{'metric':>11} {'limit':>9}  result"]
    for r in rows:
        out.append(f"{r.solver:<12} {r.n_atoms:>2} {r.ratio:>5.2f} "
                   f"{r.gamma_s:>7.2f} {r.metric:>11.3e} {r.threshold:>9.1e}  "
                   f"{'pass' if r.passed else 'FAIL'}")
    n_bad = sum(not r.passed for r in rows)
    out.append(f"{len(rows)} checks, {len(rows) - n_bad} passed, {n_bad} failed")
    return "\n".join(out)
