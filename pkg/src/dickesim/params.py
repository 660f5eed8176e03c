"""Model parameters for N driven spins with collective and single-particle decay.

Rates are quoted in units of the collective decay rate (gamma_c = 1 by default);
time is measured in 1/gamma_c throughout the package.
"""

import math
from dataclasses import dataclass, replace


# drive strength per atom; the superradiant phase transition sits at
# upsilon = upsilon_c in the large-N limit
def upsilon(p):
    return 2.0 * p.omega / p.n_atoms


def critical_upsilon(p):
    return math.sqrt(p.gamma_c**2 + 4.0 * p.chi**2)


# termination of the superradiant mean-field branch
def critical_upsilon_prime(p):
    return critical_upsilon(p) / math.sqrt(2.0)


# atom number at which a fixed drive omega sits exactly at threshold
def n_critical(p):
    return 2.0 * p.omega / critical_upsilon(p)


@dataclass(frozen=True)
class SystemParams:
    n_atoms: int
    chi: float          # collective dispersive shift
    omega: float        # transverse drive amplitude (total, not per atom)
    gamma_c: float = 1.0   # collective decay rate; sets the unit of time
    gamma_s: float = 0.0   # single-particle spontaneous emission rate

    def __post_init__(self):
        if int(self.n_atoms) != self.n_atoms or self.n_atoms < 1:
            raise ValueError(f"n_atoms must be a positive integer, got {self.n_atoms}")
        if self.gamma_c <= 0.0:
            raise ValueError(f"gamma_c must be > 0, got {self.gamma_c}")
        if self.gamma_s < 0.0:
            raise ValueError(f"gamma_s must be >= 0, got {self.gamma_s}")
        if self.chi < 0.0:
            raise ValueError(f"chi must be >= 0, got {self.chi}")
        if self.omega < 0.0:
            raise ValueError(f"omega must be >= 0, got {self.omega}")

    @property
    def upsilon(self):
        return upsilon(self)

    @property
    def upsilon_c(self):
        return critical_upsilon(self)

    @property
    def upsilon_c_prime(self):
        return critical_upsilon_prime(self)

    @classmethod
    def from_upsilon_ratio(cls, n_atoms, chi, ratio, gamma_c=1.0, gamma_s=0.0):
        """Build params with omega fixed by the drive ratio upsilon/upsilon_c."""
        uc = math.sqrt(gamma_c**2 + 4.0 * chi**2)
        omega = 0.5 * n_atoms * ratio * uc
        return cls(n_atoms=n_atoms, chi=chi, omega=omega,
                   gamma_c=gamma_c, gamma_s=gamma_s)

    def with_(self, **kw):
        return replace(self, **kw)


@dataclass(frozen=True)
class CavityParams:
    g: float        # single atom-cavity coupling
    kappa: float    # cavity linewidth
    delta_c: float  # drive-cavity detuning

    def __post_init__(self):
        if self.kappa <= 0.0:
            raise ValueError(f"kappa must be > 0, got {self.kappa}")


def cavity_map(cav):
    """Adiabatic elimination of the cavity mode: (g, kappa, delta_c) -> (chi, gamma_c).

    chi/gamma_c = delta_c/kappa holds exactly, so the dispersive-to-dissipative
    ratio is set by the detuning in linewidth units.
    """
    denom = 4.0 * cav.delta_c**2 + cav.kappa**2
    chi = 4.0 * cav.g**2 * cav.delta_c / denom
    gamma_c = 4.0 * cav.g**2 * cav.kappa / denom
    return chi, gamma_c


# accepted keys for params_from_config; anything else in the mapping is ignored
# here so harness-level keys can share the same file
_PARAM_KEYS = ("n_atoms", "chi", "gamma_c", "gamma_s", "omega", "upsilon_ratio")


def params_from_config(cfg):
    """Build SystemParams from a flat mapping of config keys.

    Exactly one of `omega` / `upsilon_ratio` must be present; `gamma_c`
    defaults to 1 and `gamma_s` to 0.
    """
    if "n_atoms" not in cfg:
        raise KeyError("config is missing required key 'n_atoms'")
    if "chi" not in cfg:
        raise KeyError("config is missing required key 'chi'")
    has_omega = "omega" in cfg
    has_ratio = "upsilon_ratio" in cfg
    if has_omega and has_ratio:
        raise ValueError("config sets both 'omega' and 'upsilon_ratio'; pick one")
    if not (has_omega or has_ratio):
        raise ValueError("config must set one of 'omega' or 'upsilon_ratio'")

    n = int(cfg["n_atoms"])
    chi = float(cfg["chi"])
    gamma_c = float(cfg.get("gamma_c", 1.0))
    gamma_s = float(cfg.get("gamma_s", 0.0))
    if has_omega:
        return SystemParams(n_atoms=n, chi=chi, omega=float(cfg["omega"]),
                            gamma_c=gamma_c, gamma_s=gamma_s)
    return SystemParams.from_upsilon_ratio(n, chi, float(cfg["upsilon_ratio"]),
                                           gamma_c=gamma_c, gamma_s=gamma_s)
