"""Build (or rebuild) the cached heavy MCWF ensembles under tests/data/.

The enhancement and change-point checks need hours of single-core ensemble
integration, so their raw results are cached on disk and the test module
only regenerates a cache when its file is missing.  Run standalone to
pre-seed everything:

    python3 tests/make_heavy_data.py all
"""

import json
import sys
from pathlib import Path

import numpy as np

from dickesim.mcwf import EnsembleSpec, run_ensemble
from dickesim.params import SystemParams

DATA_DIR = Path(__file__).resolve().parent / "data"

RTOL = 1e-5

# gamma_s -> (master seed, ensemble size, time span, grid points)
ENHANCEMENT_RUNS = {
    0.0: (600, 64, 0.4, 161),
    1.0: (601, 4000, 0.4, 161),
    2.0: (602, 4000, 0.2, 161),
    4.0: (604, 4000, 0.12, 121),
}
ENHANCEMENT_N = 500
ENHANCEMENT_RATIO = 0.9
BOOTSTRAP_BLOCK = 40

CHANGEPOINT_SEED = 700
CHANGEPOINT_N = 2000
CHANGEPOINT_OMEGA = 2000.0
CHANGEPOINT_GAMMA_S = 2.0
CHANGEPOINT_SPAN = 0.25
CHANGEPOINT_PTS = 101
CHANGEPOINT_TRAJ = 100


def enhancement_path(gamma_s):
    return DATA_DIR / f"enhancement_n500_gs{gamma_s:g}.npz"


def changepoint_path():
    return DATA_DIR / "changepoint_n2000.npz"


def _write_manifest(path, extra):
    meta = {"rtol": RTOL, **extra}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2) + "\n",
                                         encoding="utf-8")


def build_enhancement(gamma_s, verbose=True):
    """One ensemble of the N = 500 enhancement study; returns the file path.

    Stores the ensemble mean and standard error of the ten moment columns
    plus fixed-size block means so nonlinear functionals (minimum squeezing,
    crossing times) can carry jackknife error bars.
    """
    seed, n_traj, span, n_pts = ENHANCEMENT_RUNS[gamma_s]
    path = enhancement_path(gamma_s)
    params = SystemParams.from_upsilon_ratio(ENHANCEMENT_N, 1.0,
                                             ENHANCEMENT_RATIO,
                                             gamma_s=gamma_s)
    spec = EnsembleSpec(n_traj=n_traj, master_seed=seed,
                        t_grid=np.linspace(0.0, span, n_pts))
    if verbose:
        print(f"[enhancement] gamma_s={gamma_s:g}: {n_traj} trajectories, "
              f"span {span}", flush=True)
    res = run_ensemble(spec, params, (np.pi / 2, np.pi), workers=1,
                       rtol=RTOL, keep_trajectories=True)
    rows = np.stack([tr.rows for tr in res.trajectories])
    n_blocks = max(1, n_traj // BOOTSTRAP_BLOCK)
    block_means = rows[: n_blocks * BOOTSTRAP_BLOCK].reshape(
        n_blocks, -1, n_pts, 10).mean(axis=1)
    DATA_DIR.mkdir(exist_ok=True)
    np.savez_compressed(path, t=res.t, raw_mean=res.raw_mean, se=res.se,
                        block_means=block_means,
                        n_traj=np.array(n_traj))
    _write_manifest(path, {
        "n_atoms": ENHANCEMENT_N, "ratio": ENHANCEMENT_RATIO,
        "gamma_s": gamma_s, "master_seed": seed, "n_traj": n_traj,
        "span": span, "block": BOOTSTRAP_BLOCK,
    })
    if verbose:
        print(f"[enhancement] wrote {path.name}", flush=True)
    return path


def build_changepoint(verbose=True):
    """The N = 2000 single-trajectory ensemble; returns the file path.

    Every trajectory's moment rows are kept: the check is per trajectory
    (its own squeezing change point against its own crossing time).
    """
    path = changepoint_path()
    params = SystemParams(n_atoms=CHANGEPOINT_N, chi=1.0,
                          omega=CHANGEPOINT_OMEGA,
                          gamma_s=CHANGEPOINT_GAMMA_S)
    spec = EnsembleSpec(n_traj=CHANGEPOINT_TRAJ, master_seed=CHANGEPOINT_SEED,
                        t_grid=np.linspace(0.0, CHANGEPOINT_SPAN,
                                           CHANGEPOINT_PTS))
    if verbose:
        print(f"[changepoint] {CHANGEPOINT_TRAJ} trajectories at "
              f"N={CHANGEPOINT_N}", flush=True)
    res = run_ensemble(spec, params, (np.pi / 2, np.pi), workers=1,
                       rtol=RTOL, keep_trajectories=True)
    rows = np.stack([tr.rows for tr in res.trajectories])
    twojs = np.stack([tr.two_j for tr in res.trajectories])
    DATA_DIR.mkdir(exist_ok=True)
    np.savez_compressed(path, t=res.t, rows=rows, twojs=twojs,
                        raw_mean=res.raw_mean)
    _write_manifest(path, {
        "n_atoms": CHANGEPOINT_N, "omega": CHANGEPOINT_OMEGA,
        "gamma_s": CHANGEPOINT_GAMMA_S, "master_seed": CHANGEPOINT_SEED,
        "n_traj": CHANGEPOINT_TRAJ, "span": CHANGEPOINT_SPAN,
    })
    if verbose:
        print(f"[changepoint] wrote {path.name}", flush=True)
    return path


def load_enhancement(gamma_s):
    path = enhancement_path(gamma_s)
    if not path.exists():
        build_enhancement(gamma_s)
    return np.load(path)


def load_changepoint():
    path = changepoint_path()
    if not path.exists():
        build_changepoint()
    return np.load(path)


def main(argv):
    what = argv[1] if len(argv) > 1 else "all"
    if what in ("all", "crit6"):
        for gs in (0.0, 4.0, 2.0, 1.0):
            if not enhancement_path(gs).exists():
                build_enhancement(gs)
            else:
                print(f"[enhancement] gamma_s={gs:g} cached", flush=True)
    if what in ("all", "crit7"):
        if not changepoint_path().exists():
            build_changepoint()
        else:
            print("[changepoint] cached", flush=True)


if __name__ == "__main__":
    main(sys.argv)
