"""Post-processing of squeezing and effective-atom-number time series.

All routines work on plain (t, values) arrays so the same code serves every
solver's output, ensemble means and single trajectories alike.
"""

import math

import numpy as np

from .dicke import BlochVectorVanishes, CollectiveMoments, squeezing_parameter
from .params import n_critical

# minimum-squeezing searches skip everything before this time by default:
# the instant after t = 0 carries ringing at the numerical grid scale that
# is not the transient of interest
DEFAULT_T_MIN = 0.003


class SeriesTooShort(ValueError):
    """The sampled series does not reach past the requested window."""


def _as_series(t, values):
    t = np.asarray(t, dtype=float)
    v = np.asarray(values, dtype=float)
    if t.ndim != 1 or t.shape != v.shape:
        raise ValueError(f"series shapes differ: {t.shape} vs {v.shape}")
    if t.size >= 2 and not np.all(np.diff(t) > 0):
        raise ValueError("series times must be strictly increasing")
    return t, v


def min_transient_squeezing(t, xi2, t_min=DEFAULT_T_MIN):
    """Minimum of xi^2 over t >= t_min and where it occurs.

    Values above 1 are reported as-is (no clipping). NaN entries - times at
    which the squeezing parameter was undefined - are skipped.
    """
    t, xi2 = _as_series(t, xi2)
    keep = (t >= t_min) & np.isfinite(xi2)
    if not np.any(keep):
        raise SeriesTooShort(
            f"series too short: no finite samples at t >= {t_min:g} "
            f"(series ends at t = {t[-1] if t.size else float('nan'):g})")
    idx = np.flatnonzero(keep)
    best = idx[np.argmin(xi2[idx])]
    return float(xi2[best]), float(t[best])


def detect_crossing(t, n_eff_series, params):
    """Earliest time the effective atom number falls to the critical one.

    Linear interpolation between samples; None if N^eff stays above N_c
    throughout. A series starting at or below N_c crosses at its first time.
    """
    t, ne = _as_series(t, n_eff_series)
    nc = n_critical(params)
    below = ne <= nc
    if not np.any(below):
        return None
    i = int(np.argmax(below))
    if i == 0:
        return float(t[0])
    frac = (nc - ne[i - 1]) / (ne[i] - ne[i - 1])
    return float(t[i - 1] + frac * (t[i] - t[i - 1]))


def squeezing_change_point(t, xi2, window=1, t_min=0.0):
    """Time of the sharpest kink in log xi^2(t).

    Scores each interior sample by the discrete second difference of
    log xi^2 taken at lag `window` (larger windows average out trajectory
    noise) and returns the time of the maximum score. Restricting to
    t >= t_min keeps the initial transient from masquerading as the kink.
    """
    t, xi2 = _as_series(t, xi2)
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    if t.size < 2 * window + 1:
        raise SeriesTooShort(
            f"series too short: need {2 * window + 1} samples for "
            f"window {window}, got {t.size}")
    with np.errstate(divide="ignore", invalid="ignore"):
        g = np.log(xi2)
    d2 = g[2 * window:] - 2.0 * g[window:-window] + g[:-2 * window]
    centers = t[window:-window]
    ok = np.isfinite(d2) & (centers >= t_min)
    if not np.any(ok):
        raise SeriesTooShort(
            f"series too short: no usable change-point scores at "
            f"t >= {t_min:g}")
    d2 = np.where(ok, d2, -np.inf)
    return float(centers[int(np.argmax(d2))])


def moments_from_columns(row):
    """CollectiveMoments from one flat row of the ten moment columns
    (Jx, Jy, Jz, Jxx, Jyy, Jzz, Jxy, Jxz, Jyz, J2)."""
    second = np.array([[row[3], row[6], row[7]],
                       [row[6], row[4], row[8]],
                       [row[7], row[8], row[5]]])
    return CollectiveMoments(np.asarray(row[:3], dtype=float), second, row[9])


def xi2_of_rows(rows, n_atoms):
    """Squeezing parameter per flat moment row; NaN where undefined."""
    out = np.empty(len(rows))
    for i, row in enumerate(rows):
        try:
            out[i] = squeezing_parameter(moments_from_columns(row), n_atoms)
        except BlochVectorVanishes:
            out[i] = np.nan
    return out


def jackknife_min_squeezing(t, block_rows, n_atoms, t_min=DEFAULT_T_MIN):
    """Minimum transient squeezing of an ensemble with a jackknife error.

    block_rows: (n_blocks, n_t, 10) equal-weight block means of the flat
    moment columns. The point estimate comes from the full mean; the
    standard error from leave-one-block-out replicates (delete-1 jackknife),
    which respects the nonlinearity of the squeezing parameter in the
    moments.
    """
    block_rows = np.asarray(block_rows, dtype=float)
    if block_rows.ndim != 3 or block_rows.shape[0] < 2:
        raise ValueError("need at least two blocks of ensemble rows")
    nb = block_rows.shape[0]
    total = block_rows.mean(axis=0)
    est, t_at = min_transient_squeezing(t, xi2_of_rows(total, n_atoms),
                                        t_min=t_min)
    reps = np.empty(nb)
    for b in range(nb):
        loo = (total * nb - block_rows[b]) / (nb - 1)
        reps[b], _ = min_transient_squeezing(t, xi2_of_rows(loo, n_atoms),
                                             t_min=t_min)
    se = math.sqrt((nb - 1) / nb * np.sum((reps - reps.mean()) ** 2))
    return est, t_at, se
