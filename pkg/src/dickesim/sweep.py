"""Grid sweeps: evaluate one solver across parameter combinations.

Each grid point is an independent run; failures are recorded in that
point's row and the sweep continues. Rows always come back in grid order
(outermost axis slowest), never in completion order, so output files are
reproducible for any worker count.
"""

import math
import multiprocessing
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .analysis import jackknife_min_squeezing, min_transient_squeezing, xi2_of_rows
from .bruteforce import brute_force_oracle
from .collective import CollectiveDensity, evolve_collective
from .config import SweepSpec, sweep_spec_from_config
from .cumulant import evolve_cumulant, init_from_css, init_from_meanfield_ss
from .dicke import squeezing_db
from .meanfield import stable_steady_state
from .series import VERSION, _fmt

# de-correlates the trajectory streams of different grid points while
# keeping every point a pure function of (sweep seed, grid index)
_POINT_SEED_STRIDE = 1000003

_NAMED_STATES = {
    "minus_x": (math.pi / 2, math.pi),
    "plus_x": (math.pi / 2, 0.0),
    "down": (math.pi, 0.0),
    "up": (0.0, 0.0),
}


def parse_initial(text):
    """(theta, phi) from 'css <theta> <phi>' or a named alias."""
    if not text:
        return _NAMED_STATES["minus_x"]
    if text in _NAMED_STATES:
        return _NAMED_STATES[text]
    parts = str(text).split()
    if len(parts) == 3 and parts[0] == "css":
        return float(parts[1]), float(parts[2])
    raise ValueError(f"unknown initial state {text!r}; use css <theta> <phi>"
                     f" or one of {', '.join(sorted(_NAMED_STATES))}")


@dataclass
class SweepRow:
    index: int
    point: dict                  # axis name -> value
    status: str                  # "ok" or "error"
    values: dict = field(default_factory=dict)
    message: str = ""


def _series_values(t, moments, n_atoms, t_min):
    rows = [[m.mean[0], m.mean[1], m.mean[2], m.second[0, 0], m.second[1, 1],
             m.second[2, 2], m.second[0, 1], m.second[0, 2], m.second[1, 2],
             m.j2] for m in moments]
    xi2 = xi2_of_rows(rows, n_atoms)
    xi2_min, t_at = min_transient_squeezing(t, xi2, t_min=t_min)
    db = squeezing_db(xi2_min) if xi2_min > 0 else math.nan
    return {"xi2_min": xi2_min, "t_at_min": t_at, "xi2_min_db": db}


def _grid(cfg):
    t_max = float(cfg.get("t_max", 2.0))
    n_pts = int(cfg.get("t_points", 201))
    if t_max <= 0 or n_pts < 2:
        raise ValueError(f"bad time grid: t_max={t_max}, t_points={n_pts}")
    return np.linspace(0.0, t_max, n_pts)


def evaluate_point(spec, index, point):
    """One grid point, never raising: failures land in the row."""
    cfg = spec.point_config(point)
    try:
        params = spec.point_params(point)
        solver = spec.solver
        if solver == "meanfield":
            fp = stable_steady_state(params)
            values = {"r": fp.r, "z": fp.z, "phi": fp.phi,
                      "stable": float(fp.stable)}
        elif solver == "mcwf":
            values = _mcwf_point(spec, cfg, params, index)
        else:
            initial = cfg.get("initial", "")
            t = _grid(cfg)
            rtol = float(cfg.get("rtol", 1e-9))
            if solver == "cumulant":
                if initial == "meanfield_ss":
                    state0 = init_from_meanfield_ss(params,
                                                    fallback="saturated")
                else:
                    state0 = init_from_css(*parse_initial(initial))
                moments = evolve_cumulant(state0, params, t, rtol=rtol)
            elif solver == "collective":
                theta, phi = parse_initial(initial)
                rho0 = CollectiveDensity.from_angles(params.n_atoms, theta,
                                                     phi)
                moments = evolve_collective(rho0, params, t, rtol=rtol)
            else:  # oracle
                theta, phi = parse_initial(initial)
                if params.n_atoms > 12:
                    raise ValueError(
                        f"oracle solver holds the full 2^N state; "
                        f"N={params.n_atoms} is past the desk-scale limit 12")
                moments = brute_force_oracle(params, (theta, phi), t,
                                             rtol=rtol)
            values = _series_values(t, moments, params.n_atoms, spec.t_min)
        return SweepRow(index=index, point=dict(point), status="ok",
                        values=values)
    except Exception as exc:  # per-point isolation is the contract
        msg = f"{type(exc).__name__}: {exc}".replace("\n", " ")
        return SweepRow(index=index, point=dict(point), status="error",
                        message=msg)


def _mcwf_point(spec, cfg, params, index):
    from .mcwf import EnsembleSpec, run_ensemble

    theta, phi = parse_initial(cfg.get("initial", ""))
    t = _grid(cfg)
    n_traj = int(cfg.get("n_traj", 512))
    seed = (int(cfg.get("master_seed", 2024))
            + _POINT_SEED_STRIDE * index) % 2**64
    res = run_ensemble(EnsembleSpec(n_traj=n_traj, master_seed=seed,
                                    t_grid=t),
                       params, (theta, phi), workers=1,
                       rtol=float(cfg.get("rtol", 1e-6)),
                       keep_trajectories=True)
    rows = np.stack([tr.rows for tr in res.trajectories])
    if n_traj >= 4:
        n_blocks = min(20, n_traj)
        size = n_traj // n_blocks
        blocks = rows[: n_blocks * size].reshape(n_blocks, size, t.size, 10)
        est, t_at, se = jackknife_min_squeezing(t, blocks.mean(axis=1),
                                                params.n_atoms,
                                                t_min=spec.t_min)
    else:
        xi2 = xi2_of_rows(rows.mean(axis=0), params.n_atoms)
        est, t_at = min_transient_squeezing(t, xi2, t_min=spec.t_min)
        se = math.nan
    db = squeezing_db(est) if est > 0 else math.nan
    return {"xi2_min": est, "t_at_min": t_at, "xi2_min_db": db,
            "se_xi2_min": se, "n_traj": float(n_traj),
            "master_seed": float(seed)}


_SWEEP_CTX = {}


def _pool_eval(args):
    index, point = args
    return evaluate_point(_SWEEP_CTX["spec"], index, point)


def run_sweep(spec, workers=None):
    """Evaluate every grid point; returns rows in grid order.

    Writes spec.output (if set) through this single process once all
    points are in. Worker count only changes wall time, never results.
    """
    if workers is None:
        workers = int(os.environ.get("DICKESIM_WORKERS", "1"))
    points = spec.grid_points()
    jobs = list(enumerate(points))
    start = time.time()
    if workers > 1 and len(jobs) > 1:
        global _SWEEP_CTX
        _SWEEP_CTX = {"spec": spec}
        ctx = multiprocessing.get_context("fork")
        with ctx.Pool(processes=min(workers, len(jobs))) as pool:
            rows = pool.map(_pool_eval, jobs)
    else:
        rows = [evaluate_point(spec, i, pt) for i, pt in jobs]
    rows.sort(key=lambda r: r.index)
    if spec.output:
        write_sweep(spec.output, spec, rows, wall_time=time.time() - start)
    return rows


def _value_columns(rows):
    names = []
    for row in rows:
        for key in row.values:
            if key not in names:
                names.append(key)
    return names


def write_sweep(path, spec, rows, wall_time=0.0):
    """One CSV row per grid point, grid-ordered, with provenance header."""
    axis_names = [n for n, _ in spec.axes]
    value_names = _value_columns(rows)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# solver: {spec.solver}\n")
        for key, value in sorted(spec.base.items()):
            fh.write(f"# {key}: {_fmt(value)}\n")
        fh.write(f"# t_min: {spec.t_min:.17g}\n")
        fh.write(f"# version: {VERSION}\n")
        fh.write(f"# wall_time_s: {wall_time:.17g}\n")
        fh.write(",".join(["index"] + axis_names + ["status"] + value_names
                          + ["message"]) + "\n")
        for row in rows:
            cells = [str(row.index)]
            cells += [f"{row.point[a]:.17g}" for a in axis_names]
            cells.append(row.status)
            for name in value_names:
                v = row.values.get(name, math.nan)
                cells.append(f"{v:.17g}")
            cells.append(row.message.replace(",", ";"))
            fh.write(",".join(cells) + "\n")
    return path
