"""One CSV schema for every solver's moment time series.

Rows carry the collective first/second moments plus the derived squeezing
and effective-atom-number columns; `#`-prefixed header lines carry the run
provenance so any file can be regenerated from its own header. All numbers
are written with 17 significant digits, making re-runs byte-comparable.
"""

import importlib.metadata
import math
from dataclasses import dataclass, field

import numpy as np

from .dicke import BlochVectorVanishes, n_eff, squeezing_db, squeezing_parameter
from .params import SystemParams

try:
    VERSION = importlib.metadata.version("dickesim")
except importlib.metadata.PackageNotFoundError:  # running from a checkout
    VERSION = "unknown"

MOMENT_COLUMNS = ["Jx", "Jy", "Jz", "Jxx", "Jyy", "Jzz", "Jxy", "Jxz",
                  "Jyz", "J2"]
SERIES_COLUMNS = ["t"] + MOMENT_COLUMNS + ["xi2", "xi2_db", "n_eff"]

# header entries that legitimately differ between a run and its re-run
VOLATILE_KEYS = ("wall_time_s",)

_PARAM_KEYS = ("n_atoms", "chi", "omega", "gamma_c", "gamma_s")


def _fmt(x):
    if isinstance(x, float):
        return f"{x:.17g}"
    return str(x)


@dataclass
class RunRecord:
    """Provenance attached to every output file: enough to re-run it."""

    solver: str
    params: SystemParams
    initial: str = ""            # e.g. "css 1.5707... 3.1415..."
    seeds: dict = field(default_factory=dict)
    settings: dict = field(default_factory=dict)
    version: str = VERSION
    wall_time_s: float = 0.0

    def header_items(self):
        items = [("solver", self.solver)]
        items += [(k, getattr(self.params, k)) for k in _PARAM_KEYS]
        if self.initial:
            items.append(("initial", self.initial))
        items += sorted(self.seeds.items())
        items += sorted(self.settings.items())
        items.append(("version", self.version))
        items.append(("wall_time_s", self.wall_time_s))
        return items


def record_from_header(header):
    """Rebuild a RunRecord from a parsed header mapping."""
    params = SystemParams(n_atoms=int(header["n_atoms"]),
                          chi=float(header["chi"]),
                          omega=float(header["omega"]),
                          gamma_c=float(header["gamma_c"]),
                          gamma_s=float(header["gamma_s"]))
    known = set(_PARAM_KEYS) | {"solver", "initial", "version", "wall_time_s"}
    extras = {k: v for k, v in header.items() if k not in known}
    seeds = {k: int(extras.pop(k)) for k in list(extras)
             if k in ("master_seed", "n_traj", "traj_index")}
    return RunRecord(solver=header["solver"], params=params,
                     initial=header.get("initial", ""), seeds=seeds,
                     settings=extras, version=header.get("version", ""),
                     wall_time_s=float(header.get("wall_time_s", 0.0)))


def moment_row(m):
    """The ten flat moment columns of one CollectiveMoments."""
    s = m.second
    return [m.mean[0], m.mean[1], m.mean[2], s[0, 0], s[1, 1], s[2, 2],
            s[0, 1], s[0, 2], s[1, 2], m.j2]


def derived_columns(m, n_atoms):
    """(xi2, xi2_db, n_eff) of one moment set; NaNs where undefined."""
    try:
        xi2 = squeezing_parameter(m, n_atoms)
        db = squeezing_db(xi2) if xi2 > 0 else math.nan
    except BlochVectorVanishes:
        xi2, db = math.nan, math.nan
    return xi2, db, n_eff(m.j2)


def series_table(t, moments, n_atoms, se=None):
    """Assemble the output table; returns (column_names, 2-D float array)."""
    t = np.asarray(t, dtype=float)
    if len(moments) != t.size:
        raise ValueError(f"{len(moments)} moment sets for {t.size} times")
    names = list(SERIES_COLUMNS)
    rows = []
    for ti, m in zip(t, moments):
        rows.append([ti] + moment_row(m) + list(derived_columns(m, n_atoms)))
    data = np.array(rows, dtype=float)
    if se is not None:
        se = np.asarray(se, dtype=float)
        if se.shape != (t.size, 10):
            raise ValueError(f"se must be ({t.size}, 10), got {se.shape}")
        names += [f"se_{c}" for c in MOMENT_COLUMNS]
        data = np.hstack([data, se])
    return names, data


def write_series(path, t, moments, record, se=None):
    """Write one time series with its provenance header; returns the path."""
    names, data = series_table(t, moments, record.params.n_atoms, se=se)
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in record.header_items():
            fh.write(f"# {key}: {_fmt(value)}\n")
        fh.write(",".join(names) + "\n")
        for row in data:
            fh.write(",".join(f"{x:.17g}" for x in row) + "\n")
    return path


def read_series(path):
    """Parse a series file; returns (RunRecord, column names, data array)."""
    header = {}
    names = None
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, value = line[1:].partition(":")
                header[key.strip()] = value.strip()
            elif names is None:
                names = line.split(",")
            else:
                rows.append([float(x) for x in line.split(",")])
    if names is None:
        raise ValueError(f"{path}: no column header found")
    return record_from_header(header), names, np.array(rows, dtype=float)


def series_equal(path_a, path_b):
    """Byte-for-byte comparison of two series files, volatile headers aside."""

    def essential(path):
        with open(path, "r", encoding="utf-8") as fh:
            return [ln for ln in fh
                    if not any(ln.startswith(f"# {k}:") for k in VOLATILE_KEYS)]

    return essential(path_a) == essential(path_b)


def column(names, data, name):
    """One named column of a parsed series table."""
    return data[:, names.index(name)]
