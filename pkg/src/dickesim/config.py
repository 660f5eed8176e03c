"""Flat key-value run configuration.

Grammar (UTF-8 text):

    # full-line or trailing comment
    key = value

One assignment per line. Values are parsed as int, float, a comma list of
numbers, ``linspace(start, stop, num)``, or left as strings. Keys of the
form ``axis.<name>`` declare sweep axes; their order in the file is the
nesting order of the sweep grid (first axis outermost). Command-line flags
override file values; the merged mapping drives every run.
"""

from dataclasses import dataclass, field

import numpy as np

from .params import params_from_config

SOLVERS = ("collective", "meanfield", "cumulant", "mcwf", "oracle")

AXIS_PREFIX = "axis."


class ConfigError(ValueError):
    """Malformed configuration file or incompatible settings."""


def parse_value(text):
    """Best-effort typed parse of one right-hand side."""
    text = text.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    if low.startswith("linspace(") and text.endswith(")"):
        inner = text[len("linspace("):-1]
        parts = [p.strip() for p in inner.split(",")]
        if len(parts) != 3:
            raise ConfigError(f"linspace needs 3 arguments, got {text!r}")
        return np.linspace(float(parts[0]), float(parts[1]), int(parts[2]))
    if "," in text:
        try:
            return np.array([float(p) for p in text.split(",")])
        except ValueError:
            pass
    return text


def load_config(path):
    """Parse a config file into an insertion-ordered mapping."""
    cfg = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', "
                                  f"got {raw.strip()!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            if not key:
                raise ConfigError(f"{path}:{lineno}: empty key")
            cfg[key] = parse_value(value)
    return cfg


def merge_overrides(cfg, overrides):
    """File values overridden by CLI-provided ones (None entries skipped)."""
    merged = dict(cfg)
    for key, value in overrides.items():
        if value is None:
            continue
        merged[key] = parse_value(value) if isinstance(value, str) else value
    return merged


@dataclass
class SweepSpec:
    """A grid of runs: sweep axes, solver, shared settings, output target."""

    axes: list                    # (name, values) pairs, outermost first
    solver: str
    base: dict = field(default_factory=dict)
    t_min: float = 0.003
    output: str = ""

    def __post_init__(self):
        if self.solver not in SOLVERS:
            raise ConfigError(f"unknown solver {self.solver!r}; "
                              f"choose from {', '.join(SOLVERS)}")
        if not self.axes:
            raise ConfigError("sweep needs at least one axis.<name> entry")
        for name, values in self.axes:
            values = np.atleast_1d(np.asarray(values, dtype=float))
            if values.size == 0 or not np.all(np.isfinite(values)):
                raise ConfigError(f"axis {name!r} values must be finite "
                                  f"and non-empty")
        if (self.solver in ("collective", "oracle")
                and float(self.base.get("gamma_s", 0.0)) != 0.0
                and not self.has_axis("gamma_s")):
            raise ConfigError(f"solver {self.solver!r} requires gamma_s = 0")

    def has_axis(self, name):
        return any(n == name for n, _ in self.axes)

    def grid_points(self):
        """All axis-value combinations, outermost axis varying slowest."""
        names = [n for n, _ in self.axes]
        grids = [np.atleast_1d(np.asarray(v, dtype=float))
                 for _, v in self.axes]
        points = []
        for combo in np.ndindex(*[g.size for g in grids]):
            points.append({n: float(g[i])
                           for n, g, i in zip(names, grids, combo)})
        return points

    def point_config(self, point):
        """The flat config of one grid point (base plus axis values)."""
        cfg = dict(self.base)
        cfg.update(point)
        return cfg

    def point_params(self, point):
        return params_from_config(self.point_config(point))


def sweep_spec_from_config(cfg):
    """Split a merged config mapping into a SweepSpec."""
    axes = [(k[len(AXIS_PREFIX):], v) for k, v in cfg.items()
            if k.startswith(AXIS_PREFIX)]
    base = {k: v for k, v in cfg.items()
            if not k.startswith(AXIS_PREFIX)
            and k not in ("solver", "t_min", "output")}
    if "solver" not in cfg:
        raise ConfigError("sweep config is missing 'solver'")
    return SweepSpec(axes=axes, solver=str(cfg["solver"]), base=base,
                     t_min=float(cfg.get("t_min", 0.003)),
                     output=str(cfg.get("output", "")))
