"""Collective spin algebra on fixed-J sectors, coherent states and squeezing.

Basis convention: sector states are indexed by k = 0 .. 2J with m = J - k,
i.e. m descending from the top of the ladder. All solvers share it.
"""

import math

import numpy as np


class BlochVectorVanishes(ValueError):
    """Mean spin length below the resolvable floor; squeezing is undefined."""


def bloch_floor(n_atoms):
    # resolvable mean-spin floor; below this the squeezing denominator is noise
    return 1e-9 * n_atoms


class SpinSector:
    """A fixed total-spin sector: N spins, total spin J (2J integer, 2J <= N)."""

    def __init__(self, n_atoms, two_j=None):
        if two_j is None:
            two_j = n_atoms
        if two_j < 0 or two_j > n_atoms or (n_atoms - two_j) % 2 != 0:
            raise ValueError(f"invalid sector: N={n_atoms}, 2J={two_j}")
        self.n_atoms = n_atoms
        self.two_j = int(two_j)

    @property
    def j(self):
        return 0.5 * self.two_j

    @property
    def dim(self):
        return self.two_j + 1

    def m_values(self):
        # m = J, J-1, ..., -J
        return self.j - np.arange(self.dim)

    def __eq__(self, other):
        return (isinstance(other, SpinSector)
                and self.n_atoms == other.n_atoms and self.two_j == other.two_j)

    def __repr__(self):
        return f"SpinSector(N={self.n_atoms}, J={self.j:g})"


def ladder_elements(sector):
    """Ladder couplings and J+J- diagonal for one sector.

    Returns (w, e): w[k] = sqrt(J(J+1) - m_{k+1}(m_{k+1}+1)) couples indices
    k and k+1 (length dim-1), and e[k] = J(J+1) - m_k(m_k - 1) is the diagonal
    of J+J- (length dim, e = w**2 padded with 0 at the dark state).
    """
    j = sector.j
    m = sector.m_values()
    e = j * (j + 1.0) - m * (m - 1.0)
    e[-1] = 0.0  # exact: m = -J is dark under J-
    w = np.sqrt(e[:-1])
    return w, e


def collective_operators(sector):
    """Dense (dim x dim) matrices for Jx, Jy, Jz in the descending-m basis."""
    w, _ = ladder_elements(sector)
    dim = sector.dim
    jz = np.diag(sector.m_values())
    jp = np.zeros((dim, dim))
    jp[np.arange(dim - 1), np.arange(1, dim)] = w
    jx = 0.5 * (jp + jp.T)
    jy = 0.5j * (jp.T - jp)
    return jx, jy, jz.astype(complex)


class DickeVector:
    """Pure state in one spin sector; amplitudes over descending m."""

    def __init__(self, sector, amplitudes):
        amplitudes = np.asarray(amplitudes, dtype=complex)
        if amplitudes.shape != (sector.dim,):
            raise ValueError(f"amplitude shape {amplitudes.shape} does not match "
                             f"sector dim {sector.dim}")
        self.sector = sector
        self.amplitudes = amplitudes

    def norm(self):
        return float(np.linalg.norm(self.amplitudes))

    def normalized(self):
        n = self.norm()
        if n == 0.0:
            raise ValueError("cannot normalize a zero state")
        return DickeVector(self.sector, self.amplitudes / n)


def _ln_binom(n, k):
    return math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)


def coherent_spin_state(n_atoms, theta, phi):
    """Product state of N spins tipped to polar angle theta, azimuth phi.

    Amplitudes c_m = sqrt(C(2J, J-m)) cos(theta/2)^(J+m) sin(theta/2)^(J-m)
    e^{-i(J-m)phi}, built in log space so large N stays finite.
    """
    sector = SpinSector(n_atoms)
    j = sector.j
    m = sector.m_values()
    c, s = math.cos(0.5 * theta), math.sin(0.5 * theta)
    # work on the support only so the poles (c or s exactly 0) stay exact
    mask = np.ones(sector.dim, dtype=bool)
    if c == 0.0:
        mask &= (j + m) == 0
    if s == 0.0:
        mask &= (j - m) == 0
    ln_mag = np.array([0.5 * _ln_binom(sector.two_j, int(round(j - mi)))
                       for mi in m])
    ln_mag += (j + m) * (math.log(c) if c > 0.0 else 0.0)
    ln_mag += (j - m) * (math.log(s) if s > 0.0 else 0.0)
    amps = np.zeros(sector.dim, dtype=complex)
    amps[mask] = np.exp(ln_mag[mask] - np.max(ln_mag[mask]))
    amps *= np.exp(-1j * (j - m) * phi)
    return DickeVector(sector, amps / np.linalg.norm(amps))


class CollectiveMoments:
    """First and second collective-spin moments plus <J^2>.

    mean: (3,) vector <J>; second: (3,3) symmetrized matrix <{J_a,J_b}>/2;
    j2: scalar <J^2> = trace(second).
    """

    def __init__(self, mean, second, j2):
        self.mean = np.asarray(mean, dtype=float)
        self.second = np.asarray(second, dtype=float)
        self.j2 = float(j2)

    def covariance(self):
        return self.second - np.outer(self.mean, self.mean)

    def __repr__(self):
        return (f"CollectiveMoments(mean={np.array2string(self.mean, precision=4)}, "
                f"j2={self.j2:.6g})")


def assemble_moments(jp, jz, jpjm, jpp, jzz, jzjp):
    """CollectiveMoments from the ladder-basis expectation set.

    Arguments are <J+>, <Jz>, <J+J->, <J+^2>, <Jz^2>, <JzJ+> of a single state
    or ensemble; the Cartesian symmetrized second moments follow from the
    commutation relations (no approximation).
    """
    mean = np.array([jp.real, jp.imag, jz])
    sym = jpjm - jz  # <J+J- + J-J+>/2 = <J+J-> - <Jz>
    jxx = 0.5 * (jpp.real + sym)
    jyy = 0.5 * (sym - jpp.real)
    jxy = 0.5 * jpp.imag
    jxz = jzjp.real - 0.5 * jp.real
    jyz = jzjp.imag - 0.5 * jp.imag
    second = np.array([[jxx, jxy, jxz],
                       [jxy, jyy, jyz],
                       [jxz, jyz, jzz]])
    return CollectiveMoments(mean, second, jxx + jyy + jzz)


def moments_of_state(state):
    """CollectiveMoments of a DickeVector (normalized internally)."""
    psi = state.normalized().amplitudes
    sector = state.sector
    j = sector.j
    m = sector.m_values()
    w, e = ladder_elements(sector)
    p = np.abs(psi) ** 2
    jz = float(np.dot(p, m))
    jzz = float(np.dot(p, m * m))
    jpjm = float(np.dot(p, e))
    # <J+>: overlap of psi with J+ psi; J+ couples k+1 -> k with weight w[k]
    jp = complex(np.sum(np.conj(psi[:-1]) * w * psi[1:]))
    jzjp = complex(np.sum(np.conj(psi[:-1]) * m[:-1] * w * psi[1:]))
    if sector.dim >= 3:
        jpp = complex(np.sum(np.conj(psi[:-2]) * w[:-1] * w[1:] * psi[2:]))
    else:
        jpp = 0.0 + 0.0j
    mom = assemble_moments(jp, jz, jpjm, jpp, jzz, jzjp)
    # states confined to one sector carry J^2 = J(J+1) exactly; keep the
    # assembled value (identical up to rounding) so the output stays honest
    assert abs(mom.j2 - j * (j + 1.0)) <= 1e-6 * (j * (j + 1.0) + 1.0)
    return mom


def squeezing_parameter(moments, n_atoms):
    """Squeezing of the minimal transverse spin variance, relative to the
    coherent-state limit: values below 1 witness metrologically useful
    entanglement.

    Raises BlochVectorVanishes when |<J>| is below the resolvable floor.
    """
    mean = moments.mean
    length = float(np.linalg.norm(mean))
    if length <= bloch_floor(n_atoms):
        raise BlochVectorVanishes(
            f"|<J>| = {length:.3e} <= floor {bloch_floor(n_atoms):.3e}")
    n_hat = mean / length
    # transverse frame: pick the coordinate axis least aligned with n_hat
    helper = np.zeros(3)
    helper[int(np.argmin(np.abs(n_hat)))] = 1.0
    n1 = helper - np.dot(helper, n_hat) * n_hat
    n1 /= np.linalg.norm(n1)
    n2 = np.cross(n_hat, n1)
    cov = moments.covariance()
    a = float(n1 @ cov @ n1)
    b = float(n1 @ cov @ n2)
    c = float(n2 @ cov @ n2)
    # smallest eigenvalue of the 2x2 transverse covariance block, closed form
    var_min = 0.5 * ((a + c) - math.hypot(a - c, 2.0 * b))
    return n_atoms * var_min / length**2


def squeezing_db(xi2):
    """Squeezing in decibels; positive values mean squeezed below shot noise."""
    return -10.0 * math.log10(xi2)


def n_eff(j2):
    """Effective atom number of a state with <J^2> = j2 (equals N when the
    maximal sector is pure)."""
    return 2.0 * math.sqrt(0.25 + j2) - 1.0


def upsilon_eff(p, j2):
    """Drive ratio per effective atom; crosses the critical point from below
    as single-particle decay shrinks <J^2>."""
    ne = n_eff(j2)
    if ne <= 1e-12:
        raise ValueError(f"effective atom number {ne:.3e} too small")
    return 2.0 * p.omega / ne
