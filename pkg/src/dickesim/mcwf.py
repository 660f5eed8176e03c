"""Monte Carlo wavefunction solver confined to total-spin sectors.

Each trajectory is a pure state in a single (J, m)-ladder; the deterministic
drift is sector-diagonal and jumps either stay in the sector (collective
channel, within-sector single-particle component) or move it to an adjacent
one (single-particle channel). The sector-branching weights are derived from
angular-momentum coupling with degeneracy counting and are certified against
the dense 2^N oracle by the ensemble tests, not taken on faith.

The hot path is a compiled kernel (waiting-time unraveling, embedded
Dormand-Prince stepper, counter-based RNG); thin Python operations mirror the
same algorithm step by step so it can be exercised and cross-checked directly.
"""

import math
import multiprocessing
import os
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy.integrate import solve_ivp

from .bruteforce import brute_force_oracle  # noqa: F401  (re-exported oracle)
from .dicke import (CollectiveMoments, DickeVector, SpinSector,
                    assemble_moments, coherent_spin_state, ladder_elements)

BLOCK = 64  # trajectories per reduction block; fixed so sums are
            # bit-identical no matter how blocks are farmed out


class ZeroJumpRate(RuntimeError):
    """Jump requested in a state with no decay channel open (dark state)."""


# -- counter-based RNG ---------------------------------------------------------
#
# splitmix64: one uint64 of state, constant-time jumps, no correlations across
# trajectory streams when each stream starts from an avalanched seed.

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)


@numba.njit(cache=True)
def _mix64(x):
    x = (x ^ (x >> np.uint64(30))) * _MIX1
    x = (x ^ (x >> np.uint64(27))) * _MIX2
    return x ^ (x >> np.uint64(31))


@numba.njit(cache=True)
def _next_uniform(state):
    state = state + _GOLDEN
    z = _mix64(state)
    return state, (np.float64(z >> np.uint64(11)) + 0.5) * 2.0 ** -53


def trajectory_seed_state(master_seed, traj_index):
    """Initial RNG state for one trajectory; the (master, index) -> stream map
    is part of the reproducibility contract."""
    master = np.uint64(master_seed & 0xFFFFFFFFFFFFFFFF)
    idx = np.uint64(traj_index)
    with np.errstate(over="ignore"):
        salted = (idx * _GOLDEN + np.uint64(0x632BE59BD9B4E019)) & _MASK
        return np.uint64(_mix64(master ^ _mix64(salted)))


class SplitMix64:
    """Python mirror of the kernel RNG; consumes the identical stream."""

    def __init__(self, state):
        self.state = np.uint64(state)

    def uniform(self):
        # re-wrap: the compiled helper boxes its state back as a python int,
        # and feeding that in again would select signed-shift arithmetic
        s, u = _next_uniform(self.state)
        self.state = np.uint64(s)
        return float(u)


# -- domain types --------------------------------------------------------------

@dataclass
class EnsembleSpec:
    n_traj: int
    master_seed: int
    t_grid: np.ndarray

    def __post_init__(self):
        if self.n_traj < 1:
            raise ValueError(f"n_traj must be >= 1, got {self.n_traj}")
        self.t_grid = np.asarray(self.t_grid, dtype=float)
        if self.t_grid.ndim != 1 or self.t_grid.size < 2:
            raise ValueError("t_grid must hold at least two times")
        if not np.all(np.diff(self.t_grid) > 0):
            raise ValueError("t_grid must be strictly increasing")
        if not (0 <= int(self.master_seed) < 2 ** 64):
            raise ValueError("master_seed must fit in 64 bits")


@dataclass
class TrajectoryState:
    psi: DickeVector
    rng: SplitMix64
    t: float = 0.0
    jump_log: list = field(default_factory=list)


# -- sector-diagonal drift -----------------------------------------------------

def effective_hamiltonian_apply(psi, params):
    """(H - (i/2)[Gamma J+J- + gamma_s(N/2 + Jz)]) psi.

    The single-particle loss rate uses sum_i s+_i s-_i = N/2 + Jz, so the
    whole non-Hermitian drift acts within psi's sector.
    """
    sector = psi.sector
    w, e = ladder_elements(sector)
    m = sector.m_values()
    amps = psi.amplitudes
    diag = (params.chi * e
            - 0.5j * (params.gamma_c * e
                      + params.gamma_s * (params.n_atoms / 2.0 + m)))
    out = diag * amps
    out[:-1] += 0.5 * params.omega * w * amps[1:]
    out[1:] += 0.5 * params.omega * w * amps[:-1]
    return out


def evolve_until_jump(traj, params, r, t_stop, rtol=1e-10, atol=1e-12):
    """No-jump evolution until the squared norm decays to r, or until t_stop.

    Returns True when the jump threshold was reached (traj sits exactly at
    the jump time, state un-normalized); False when t_stop arrived first.
    """
    if not (0.0 < r < 1.0):
        raise ValueError(f"threshold r must lie in (0,1), got {r}")
    n0 = traj.psi.norm() ** 2
    if n0 <= r:
        raise ValueError(f"state norm^2 {n0:g} already at or below r={r:g}")

    def rhs(t, y):
        vec = DickeVector(traj.psi.sector, y)
        return -1j * effective_hamiltonian_apply(vec, params)

    def hit(t, y):
        return float(np.real(y @ y.conj())) - r
    hit.terminal = True
    hit.direction = -1

    sol = solve_ivp(rhs, (traj.t, t_stop), traj.psi.amplitudes.astype(complex),
                    method="DOP853", rtol=rtol, atol=atol, events=hit,
                    dense_output=False)
    if not sol.success:
        raise RuntimeError(f"no-jump integration failed: {sol.message}")
    if sol.t_events[0].size:
        traj.t = float(sol.t_events[0][0])
        traj.psi = DickeVector(traj.psi.sector, sol.y_events[0][0])
        return True
    traj.t = float(sol.t[-1])
    traj.psi = DickeVector(traj.psi.sector, sol.y[:, -1])
    return False


# -- jump channels -------------------------------------------------------------

def _branch_prefactors(n_atoms, two_j):
    """m-independent weight prefactors (down, same, up) for the local
    lowering channel out of sector J = two_j / 2."""
    j = 0.5 * two_j
    half_n = 0.5 * n_atoms
    same = (half_n + 1.0) / (2.0 * j * (j + 1.0)) if two_j > 0 else 0.0
    down = ((half_n + j + 1.0) / (2.0 * j * (2.0 * j + 1.0))
            if two_j >= 2 else 0.0)
    up = ((half_n - j) / (2.0 * (j + 1.0) * (2.0 * j + 1.0))
          if two_j < n_atoms else 0.0)
    return down, same, up


def single_jump_branch_weights(n_atoms, two_j, m):
    """Weights of the J-1, J, J+1 destinations for one |J, m> component.

    They close exactly: their sum is the on-site factor N/2 + m.
    """
    j = 0.5 * two_j
    down_p, same_p, up_p = _branch_prefactors(n_atoms, two_j)
    down = down_p * (j + m) * (j + m - 1.0)
    same = same_p * (j + m) * (j - m + 1.0)
    up = up_p * (j - m + 1.0) * (j - m + 2.0)
    return down, same, up


def _apply_branch(amps, two_j, branch):
    """Map amplitudes m -> m-1 into the destination sector (un-normalized)."""
    j = 0.5 * two_j
    m = j - np.arange(two_j + 1)
    if branch == 0:  # J -> J-1, dimension shrinks by 2
        fac = np.sqrt(np.maximum((j + m) * (j + m - 1.0), 0.0))
        return (fac * amps)[:two_j - 1]
    if branch == 1:  # within-sector lowering
        out = np.zeros_like(amps)
        fac = np.sqrt(np.maximum((j + m) * (j - m + 1.0), 0.0))
        out[1:] = fac[:-1] * amps[:-1]
        return out
    # J -> J+1, dimension grows by 2; top two slots unreachable
    out = np.zeros(two_j + 3, dtype=complex)
    fac = np.sqrt((j - m + 1.0) * (j - m + 2.0))
    out[2:] = fac * amps
    return out


def select_and_apply_jump(traj, params):
    """Choose collective vs single-particle channel, apply it, renormalize.

    Draws one uniform for the channel and (single-particle only) one more for
    the destination sector, in that order, from traj.rng.
    """
    sector = traj.psi.sector
    amps = traj.psi.amplitudes / traj.psi.norm()
    w, e = ladder_elements(sector)
    m = sector.m_values()
    p2 = np.abs(amps) ** 2
    rate_coll = params.gamma_c * float(e @ p2)
    rate_single = params.gamma_s * float((params.n_atoms / 2.0 + m) @ p2)
    total = rate_coll + rate_single
    if total <= 1e-300:
        raise ZeroJumpRate(
            f"no open decay channel at t={traj.t:g} (J={sector.j:g})")

    u = traj.rng.uniform()
    two_j = sector.two_j
    if u * total < rate_coll:
        new = np.zeros_like(amps)
        new[1:] = w * amps[:-1]
        traj.psi = DickeVector(sector, new / np.linalg.norm(new))
        traj.jump_log.append((traj.t, "collective", 0.5 * two_j, 0.5 * two_j))
        return traj

    down_p, same_p, up_p = _branch_prefactors(params.n_atoms, two_j)
    j = sector.j
    wt_down = down_p * float(((j + m) * (j + m - 1.0)) @ p2)
    wt_same = same_p * float(((j + m) * (j - m + 1.0)) @ p2)
    wt_up = up_p * float(((j - m + 1.0) * (j - m + 2.0)) @ p2)
    wsum = wt_down + wt_same + wt_up
    v = traj.rng.uniform() * wsum
    if v < wt_down:
        branch, new_two_j = 0, two_j - 2
    elif v < wt_down + wt_same:
        branch, new_two_j = 1, two_j
    else:
        branch, new_two_j = 2, two_j + 2
    new = _apply_branch(amps, two_j, branch)
    nrm = np.linalg.norm(new)
    if nrm == 0.0:
        raise ZeroJumpRate(f"selected branch annihilated the state at "
                           f"t={traj.t:g} (J={sector.j:g})")
    new_sector = SpinSector(params.n_atoms, two_j=new_two_j)
    traj.psi = DickeVector(new_sector, new / nrm)
    traj.jump_log.append((traj.t, "single", 0.5 * two_j, 0.5 * new_two_j))
    return traj


# -- compiled trajectory kernel ------------------------------------------------

_STAT_OK = 0
_STAT_ZERO_RATE = 1
_STAT_LOG_FULL = 2
_STAT_STEP_UNDERFLOW = 3

# highest Taylor order kept per propagation interval; reaching it forces the
# interval to halve, which only rescales the terms already stored
_K_MAX = 24


@numba.njit(cache=True)
def _fill_tables(n, two_j, chi, omega, gamma_c, gamma_s, mv, wv, ev, hd, od):
    j = 0.5 * two_j
    dim = two_j + 1
    for k in range(dim):
        m = j - k
        mv[k] = m
        e = j * (j + 1.0) - m * (m - 1.0)
        if k == dim - 1:
            e = 0.0
        ev[k] = e
        hd[k] = (-1j * chi * e
                 - 0.5 * (gamma_c * e + gamma_s * (0.5 * n + m)))
    for k in range(dim - 1):
        wv[k] = math.sqrt(ev[k])
        od[k] = -0.5j * omega * wv[k]
    return dim


@numba.njit(cache=True, fastmath=True)
def _apply_shifted(out, v, hd, od, vlo, vhi, dim, shift):
    """out = (A - shift) v for the tridiagonal generator.

    v must be zero one slot beyond [vlo, vhi) (its guard slots); the result
    occupies the one-slot-wider support, whose own guard slots are zeroed
    here so applications can be chained blindly. Returns the new support.
    """
    olo = vlo - 1 if vlo > 0 else 0
    ohi = vhi + 1 if vhi < dim else dim
    for k in range(olo, ohi):
        acc = (hd[k] - shift) * v[k]
        if k > 0:
            acc += od[k - 1] * v[k - 1]
        if k + 1 < dim:
            acc += od[k] * v[k + 1]
        out[k] = acc
    if olo > 0:
        out[olo - 1] = 0.0
    if ohi < dim:
        out[ohi] = 0.0
    return olo, ohi


@numba.njit(cache=True, fastmath=True)
def _scale_term(v, lo, hi, factor):
    """v *= factor over its support; returns the resulting norm."""
    acc = 0.0
    for k in range(lo, hi):
        v[k] = factor * v[k]
        acc += v[k].real * v[k].real + v[k].imag * v[k].imag
    return math.sqrt(acc)


@numba.njit(cache=True, fastmath=True)
def _sum_terms(out, y, ylo, yhi, terms, tlo, thi, n_terms, theta, slo, shi):
    """out = y + sum_k theta^k terms[k] over [slo, shi); returns its norm^2.

    theta = 1 reproduces the full-interval propagation; fractions give the
    polynomial's dense output used to pin down jump times.
    """
    for k in range(slo, shi):
        out[k] = 0.0
    for k in range(ylo, yhi):
        out[k] = y[k]
    power = 1.0
    for j in range(1, n_terms + 1):
        power *= theta
        for k in range(tlo[j], thi[j]):
            out[k] += power * terms[j, k]
    acc = 0.0
    for k in range(slo, shi):
        acc += out[k].real * out[k].real + out[k].imag * out[k].imag
    return acc


@numba.njit(cache=True, fastmath=True)
def _rayleigh(y, dy, lo, hi):
    """<y|dy>/<y|y> of the current generator application."""
    num = 0.0 + 0.0j
    den = 0.0
    for k in range(lo, hi):
        num += y[k].conjugate() * dy[k]
        den += y[k].real * y[k].real + y[k].imag * y[k].imag
    return num / den


@numba.njit(cache=True, fastmath=True)
def _norm2(y, lo, hi):
    acc = 0.0
    for k in range(lo, hi):
        acc += y[k].real * y[k].real + y[k].imag * y[k].imag
    return acc


@numba.njit(cache=True, fastmath=True)
def _support_window(y, dim, lo, hi, margin, thr_rel):
    """Smallest window (plus margin) containing all non-negligible weight."""
    n2 = _norm2(y, lo, hi)
    thr = thr_rel * n2
    a = lo
    while a < hi - 1 and (y[a].real ** 2 + y[a].imag ** 2) <= thr:
        a += 1
    b = hi
    while b > a + 1 and (y[b - 1].real ** 2 + y[b - 1].imag ** 2) <= thr:
        b -= 1
    a = max(0, a - margin)
    b = min(dim, b + margin)
    return a, b


@numba.njit(cache=True, fastmath=True)
def _record_row(rows, twojs, idx, y, mv, wv, ev, lo, hi, dim, two_j):
    n2 = _norm2(y, lo, hi)
    inv = 1.0 / n2
    jp = 0.0 + 0.0j
    jz = 0.0
    jpjm = 0.0
    jzz = 0.0
    jzjp = 0.0 + 0.0j
    jpp = 0.0 + 0.0j
    for k in range(lo, hi):
        p = (y[k].real * y[k].real + y[k].imag * y[k].imag) * inv
        jz += mv[k] * p
        jzz += mv[k] * mv[k] * p
        jpjm += ev[k] * p
        if k + 1 < dim:
            c = y[k].conjugate() * y[k + 1] * inv
            jp += wv[k] * c
            jzjp += mv[k] * wv[k] * c
        if k + 2 < dim:
            jpp += wv[k] * wv[k + 1] * (y[k].conjugate() * y[k + 2]) * inv
    jxx = 0.5 * (jpp.real + jpjm - jz)
    jyy = 0.5 * (jpjm - jz - jpp.real)
    jxy = 0.5 * jpp.imag
    jxz = jzjp.real - 0.5 * jp.real
    jyz = jzjp.imag - 0.5 * jp.imag
    rows[idx, 0] = jp.real
    rows[idx, 1] = jp.imag
    rows[idx, 2] = jz
    rows[idx, 3] = jxx
    rows[idx, 4] = jyy
    rows[idx, 5] = jzz
    rows[idx, 6] = jxy
    rows[idx, 7] = jxz
    rows[idx, 8] = jyz
    rows[idx, 9] = jxx + jyy + jzz
    twojs[idx] = two_j


@numba.njit(cache=True)
def _apply_jump_kernel(y, tmp, mv, wv, dim, two_j, n, gamma_c, gamma_s,
                       state):
    """Channel selection and application at a jump event. Returns
    (status, new_two_j, channel_code, rng_state); channel codes:
    0 collective, 1 single same-J, 2 single J-1, 3 single J+1."""
    # normalize in place first
    n2 = _norm2(y, 0, dim)
    if n2 <= 0.0:
        return _STAT_ZERO_RATE, two_j, -1, state
    inv = 1.0 / math.sqrt(n2)
    for k in range(dim):
        y[k] = y[k] * inv

    j = 0.5 * two_j
    rate_coll = 0.0
    rate_single = 0.0
    for k in range(dim):
        p = y[k].real * y[k].real + y[k].imag * y[k].imag
        m = mv[k]
        e = j * (j + 1.0) - m * (m - 1.0)
        if k == dim - 1:
            e = 0.0
        rate_coll += gamma_c * e * p
        rate_single += gamma_s * (0.5 * n + m) * p
    total = rate_coll + rate_single
    if total <= 1e-300:
        return _STAT_ZERO_RATE, two_j, -1, state

    state, u = _next_uniform(state)
    if u * total < rate_coll:
        # J- within the sector
        for k in range(dim - 1, 0, -1):
            y[k] = wv[k - 1] * y[k - 1]
        y[0] = 0.0
        n2 = _norm2(y, 0, dim)
        inv = 1.0 / math.sqrt(n2)
        for k in range(dim):
            y[k] *= inv
        return _STAT_OK, two_j, 0, state

    # single-particle: branch weights with degeneracy prefactors
    half_n = 0.5 * n
    same_p = (half_n + 1.0) / (2.0 * j * (j + 1.0)) if two_j > 0 else 0.0
    down_p = ((half_n + j + 1.0) / (2.0 * j * (2.0 * j + 1.0))
              if two_j >= 2 else 0.0)
    up_p = ((half_n - j) / (2.0 * (j + 1.0) * (2.0 * j + 1.0))
            if two_j < n else 0.0)
    s_down = 0.0
    s_same = 0.0
    s_up = 0.0
    for k in range(dim):
        p = y[k].real * y[k].real + y[k].imag * y[k].imag
        m = mv[k]
        s_down += (j + m) * (j + m - 1.0) * p
        s_same += (j + m) * (j - m + 1.0) * p
        s_up += (j - m + 1.0) * (j - m + 2.0) * p
    wt_down = down_p * s_down
    wt_same = same_p * s_same
    wt_up = up_p * s_up
    wsum = wt_down + wt_same + wt_up
    if wsum <= 0.0:
        return _STAT_ZERO_RATE, two_j, -1, state
    state, v = _next_uniform(state)
    v *= wsum

    if v < wt_down:
        new_two_j = two_j - 2
        new_dim = new_two_j + 1
        for k in range(new_dim):
            m = j - k
            fac = (j + m) * (j + m - 1.0)
            tmp[k] = math.sqrt(fac if fac > 0.0 else 0.0) * y[k]
        code = 2
    elif v < wt_down + wt_same:
        new_two_j = two_j
        new_dim = dim
        tmp[0] = 0.0
        for k in range(dim - 1):
            m = j - k
            fac = (j + m) * (j - m + 1.0)
            tmp[k + 1] = math.sqrt(fac if fac > 0.0 else 0.0) * y[k]
        code = 1
    else:
        new_two_j = two_j + 2
        new_dim = new_two_j + 1
        tmp[0] = 0.0
        tmp[1] = 0.0
        for k in range(dim):
            m = j - k
            fac = (j - m + 1.0) * (j - m + 2.0)
            tmp[k + 2] = math.sqrt(fac) * y[k]
        code = 3

    n2 = 0.0
    for k in range(new_dim):
        n2 += tmp[k].real ** 2 + tmp[k].imag ** 2
    if n2 <= 0.0:
        return _STAT_ZERO_RATE, two_j, -1, state
    inv = 1.0 / math.sqrt(n2)
    for k in range(len(y)):
        y[k] = 0.0
    for k in range(new_dim):
        y[k] = tmp[k] * inv
    return _STAT_OK, new_two_j, code, state


@numba.njit(cache=True)
def _run_trajectory(n, two_j0, psi0, t_grid, chi, omega, gamma_c, gamma_s,
                    rtol, atol, thr_rel, seed_state, rows, twojs, jlog,
                    log_mode):
    """Integrate one trajectory across the whole grid.

    rows: (n_t, 10) per-grid collective moments of the normalized state;
    twojs: (n_t,) sector label; jlog: (max_log, 4) rows
    (t, channel_code, two_j_before, two_j_after) filtered by log_mode
    (0 none, 1 sector-changing only, 2 all).
    Returns (status, n_logged, n_jumps).
    """
    cap = n + 1
    y = np.zeros(cap, dtype=np.complex128)
    ynew = np.zeros(cap, dtype=np.complex128)
    tmp = np.zeros(cap, dtype=np.complex128)
    terms = np.zeros((_K_MAX + 1, cap), dtype=np.complex128)
    tlo = np.zeros(_K_MAX + 1, dtype=np.int64)
    thi = np.zeros(_K_MAX + 1, dtype=np.int64)
    rnorm = np.zeros(_K_MAX + 1, dtype=np.float64)
    mv = np.zeros(cap, dtype=np.float64)
    wv = np.zeros(cap, dtype=np.float64)
    ev = np.zeros(cap, dtype=np.float64)
    hd = np.zeros(cap, dtype=np.complex128)
    od = np.zeros(cap, dtype=np.complex128)

    two_j = two_j0
    dim = _fill_tables(n, two_j, chi, omega, gamma_c, gamma_s, mv, wv, ev,
                       hd, od)
    for k in range(dim):
        y[k] = psi0[k]
    lo, hi = _support_window(y, dim, 0, dim, 4, thr_rel)

    state = seed_state
    state, r_wait = _next_uniform(state)
    n_logged = 0
    n_jumps = 0
    max_log = jlog.shape[0]
    tol_rel = 0.02 * rtol
    if tol_rel < 1e-13:
        tol_rel = 1e-13
    t = t_grid[0]

    _record_row(rows, twojs, 0, y, mv, wv, ev, lo, hi, dim, two_j)

    for gi in range(1, t_grid.shape[0]):
        t_target = t_grid[gi]
        while t < t_target:
            # propagate by a truncated Taylor polynomial of the generator,
            # gauged by the Rayleigh quotient <A> so the expanded part only
            # carries the spectral spread around the instantaneous mean;
            # the exact scalar exp(shift*tau) is folded back in afterwards
            l1, h1 = _apply_shifted(terms[1], y, hd, od, lo, hi, dim,
                                    0.0 + 0.0j)
            shift = _rayleigh(y, terms[1], lo, hi)
            for k in range(lo, hi):
                terms[1, k] -= shift * y[k]
            n2_y = _norm2(y, lo, hi)
            y_norm = math.sqrt(n2_y)
            lam = math.sqrt(_norm2(terms[1], l1, h1)) / y_norm
            remaining = t_target - t
            if lam > 0.0 and 2.0 / lam < remaining:
                tau = 2.0 / lam
                clipped = False
            else:
                tau = remaining
                clipped = True
            if tau < 1e-14 * max(abs(t), 1.0):
                return _STAT_STEP_UNDERFLOW, n_logged, n_jumps
            tlo[1] = l1
            thi[1] = h1
            rnorm[1] = _scale_term(terms[1], l1, h1, tau)
            tol_abs = tol_rel * y_norm
            n_terms = 1
            while True:
                if (n_terms >= 2 and rnorm[n_terms] <= tol_abs
                        and rnorm[n_terms - 1] <= tol_abs):
                    break
                if (n_terms == _K_MAX
                        or (n_terms >= 3
                            and rnorm[n_terms] > 4.0 * rnorm[n_terms - 1])):
                    # polynomial not converging at this tau: halve it, which
                    # only rescales the terms already stored
                    tau *= 0.5
                    if tau < 1e-14 * max(abs(t), 1.0):
                        return _STAT_STEP_UNDERFLOW, n_logged, n_jumps
                    clipped = False
                    f = 0.5
                    for j in range(1, n_terms + 1):
                        rnorm[j] = _scale_term(terms[j], tlo[j], thi[j], f)
                        f *= 0.5
                    continue
                nk = n_terms + 1
                lk, hk = _apply_shifted(terms[nk], terms[n_terms], hd, od,
                                        tlo[n_terms], thi[n_terms], dim,
                                        shift)
                tlo[nk] = lk
                thi[nk] = hk
                rnorm[nk] = _scale_term(terms[nk], lk, hk, tau / nk)
                n_terms = nk
            # the last term has the widest support and contains all others
            slo = tlo[n_terms]
            shi = thi[n_terms]
            n2_end = _sum_terms(ynew, y, lo, hi, terms, tlo, thi, n_terms,
                                1.0, slo, shi)
            n2_new = n2_end * math.exp(2.0 * shift.real * tau)
            if n2_new < r_wait:
                # jump inside this interval: localize ||psi||^2 = r_wait by
                # an exponential-decay model iterated to relative tolerance,
                # re-evaluating the stored polynomial at each trial time
                lam_j = math.log(n2_y / n2_new) / tau
                dt = math.log(n2_y / r_wait) / lam_j
                if dt > tau:
                    dt = tau
                prev = -1.0
                for _ in range(80):
                    if abs(dt - prev) <= 1e-12 * max(dt, 1e-3 * tau):
                        break
                    prev = dt
                    n2_d = (_sum_terms(ynew, y, lo, hi, terms, tlo, thi,
                                       n_terms, dt / tau, slo, shi)
                            * math.exp(2.0 * shift.real * dt))
                    lam_j = math.log(n2_y / n2_d) / dt
                    dt_new = math.log(n2_y / r_wait) / lam_j
                    if dt_new <= 0.0 or not math.isfinite(dt_new):
                        dt_new = 0.5 * dt
                    if dt_new > tau:
                        dt_new = tau
                    dt = dt_new
                t = t + dt
                eS = np.exp(shift * dt)
                for k in range(slo, shi):
                    y[k] = eS * ynew[k]
                status, new_two_j, code, state = _apply_jump_kernel(
                    y, tmp, mv, wv, dim, two_j, n, gamma_c, gamma_s, state)
                if status != _STAT_OK:
                    return status, n_logged, n_jumps
                n_jumps += 1
                want_log = (log_mode == 2 or
                            (log_mode == 1 and new_two_j != two_j))
                if want_log:
                    if n_logged >= max_log:
                        return _STAT_LOG_FULL, n_logged, n_jumps
                    jlog[n_logged, 0] = t
                    jlog[n_logged, 1] = code
                    jlog[n_logged, 2] = 0.5 * two_j
                    jlog[n_logged, 3] = 0.5 * new_two_j
                    n_logged += 1
                if new_two_j != two_j:
                    two_j = new_two_j
                    dim = _fill_tables(n, two_j, chi, omega, gamma_c,
                                       gamma_s, mv, wv, ev, hd, od)
                lo, hi = _support_window(y, dim, 0, dim, 4, thr_rel)
                state, r_wait = _next_uniform(state)
                continue

            # no jump: fold the exact scalar factor back in and move on
            t = t_target if clipped else t + tau
            eS = np.exp(shift * tau)
            for k in range(slo, shi):
                y[k] = eS * ynew[k]
            lo, hi = _support_window(y, dim, slo, shi, 4, thr_rel)

        _record_row(rows, twojs, gi, y, mv, wv, ev, lo, hi, dim, two_j)

    return _STAT_OK, n_logged, n_jumps


# -- ensemble driver -----------------------------------------------------------

_CHANNEL_NAMES = {0: "collective", 1: "single", 2: "single", 3: "single"}

_STATUS_TEXT = {
    _STAT_ZERO_RATE: "jump requested with zero total rate",
    _STAT_LOG_FULL: "jump log overflow (raise max_logged_jumps)",
    _STAT_STEP_UNDERFLOW: "step size underflow",
}


def trajectory_moments(psi):
    """CollectiveMoments of one (normalized) sector state."""
    psi = psi.normalized()
    amps = psi.amplitudes
    w, e = ladder_elements(psi.sector)
    m = psi.sector.m_values()
    p2 = np.abs(amps) ** 2
    cross = np.conj(amps[:-1]) * amps[1:]
    jp = complex(w @ cross)
    jz = float(m @ p2)
    jpjm = float(e @ p2)
    jzz = float((m * m) @ p2)
    jzjp = complex((m[:-1] * w) @ cross)
    jpp = complex((w[:-1] * w[1:]) @ (np.conj(amps[:-2]) * amps[2:]))
    return assemble_moments(jp, jz, jpjm, jpp, jzz, jzjp)


def _row_from_moments(mom):
    sec = mom.second
    return np.array([mom.mean[0], mom.mean[1], mom.mean[2],
                     sec[0, 0], sec[1, 1], sec[2, 2],
                     sec[0, 1], sec[0, 2], sec[1, 2], mom.j2])


def moments_from_row(row):
    """Inverse of the flat 10-column layout used by the ensemble averages."""
    jx, jy, jz, jxx, jyy, jzz, jxy, jxz, jyz, j2 = row
    second = np.array([[jxx, jxy, jxz], [jxy, jyy, jyz], [jxz, jyz, jzz]])
    return CollectiveMoments([jx, jy, jz], second, j2)


def run_trajectory_python(params, initial, t_grid, master_seed, traj_index,
                          rtol=1e-10, atol=1e-12):
    """Pure-Python trajectory, drawing the same RNG stream as the kernel.

    Slow; exists so the compiled path can be cross-checked event by event.
    Returns (rows, two_js, jump_log).
    """
    t_grid = np.asarray(t_grid, dtype=float)
    psi0 = _coerce_initial(params, initial)
    rng = SplitMix64(trajectory_seed_state(master_seed, traj_index))
    traj = TrajectoryState(psi=psi0.normalized(), rng=rng, t=float(t_grid[0]))
    rows = np.zeros((t_grid.size, 10))
    twojs = np.zeros(t_grid.size, dtype=np.int64)
    rows[0] = _row_from_moments(trajectory_moments(traj.psi))
    twojs[0] = traj.psi.sector.two_j
    r = traj.rng.uniform()
    for gi in range(1, t_grid.size):
        t_target = float(t_grid[gi])
        while traj.t < t_target:
            jumped = evolve_until_jump(traj, params, r, t_target,
                                       rtol=rtol, atol=atol)
            if not jumped:
                break
            select_and_apply_jump(traj, params)
            r = traj.rng.uniform()
        rows[gi] = _row_from_moments(trajectory_moments(traj.psi))
        twojs[gi] = traj.psi.sector.two_j
    return rows, twojs, traj.jump_log


@dataclass
class TrajectoryRecord:
    index: int
    rows: np.ndarray          # (n_t, 10) moments of this trajectory
    two_j: np.ndarray         # (n_t,) sector label at each grid time
    jumps: list               # (t, channel, j_before, j_after) tuples
    n_jumps: int


@dataclass
class EnsembleResult:
    t: np.ndarray
    moments: list             # CollectiveMoments per grid time (ensemble mean)
    se: np.ndarray            # (n_t, 10) standard error of each mean column
    raw_mean: np.ndarray      # (n_t, 10) flat column means
    n_traj: int
    trajectories: list = None


def _coerce_initial(params, initial):
    if isinstance(initial, DickeVector):
        if initial.sector.n_atoms != params.n_atoms:
            raise ValueError("initial state is for a different atom number")
        return initial
    theta, phi = initial
    return coherent_spin_state(params.n_atoms, theta, phi)


def _default_log_cap(params, span, log_mode):
    if log_mode == 0:
        return 1
    est = 2.0 * params.gamma_s * params.n_atoms * span
    if log_mode == 2:
        j = params.n_atoms / 2.0
        est += 2.0 * params.gamma_c * j * (j + 1.0) * span
    return 256 + int(min(est, 5e7))


_JOB = {}  # worker context, inherited over fork


def _run_block(block_index):
    """Integrate one 64-trajectory block; returns partial sums plus extras.

    Trajectory order inside the block is fixed, so the partial sums are
    bit-identical no matter which process runs the block.
    """
    job = _JOB
    params = job["params"]
    t_grid = job["t_grid"]
    n_t = t_grid.size
    start = block_index * BLOCK
    stop = min(start + BLOCK, job["n_traj"])
    s1 = np.zeros((n_t, 10))
    s2 = np.zeros((n_t, 10))
    rows = np.zeros((n_t, 10))
    twojs = np.zeros(n_t, dtype=np.int64)
    kept = []
    for ti in range(start, stop):
        seed = trajectory_seed_state(job["master_seed"], ti)
        jlog = np.zeros((job["max_log"], 4))
        status, n_logged, n_jumps = _run_trajectory(
            params.n_atoms, job["two_j0"], job["psi0"], t_grid,
            params.chi, params.omega, params.gamma_c, params.gamma_s,
            job["rtol"], job["atol"], job["thr_rel"], seed, rows, twojs,
            jlog, job["log_mode"])
        if status != _STAT_OK:
            return ("error", block_index, ti, int(status))
        s1 += rows
        s2 += rows * rows
        if job["keep"]:
            jumps = [(jlog[i, 0], _CHANNEL_NAMES[int(jlog[i, 1])],
                      jlog[i, 2], jlog[i, 3]) for i in range(n_logged)]
            kept.append(TrajectoryRecord(ti, rows.copy(), twojs.copy(),
                                         jumps, n_jumps))
    return ("ok", block_index, s1, s2, kept)


def run_ensemble(spec, params, initial, workers=None, rtol=1e-8,
                 keep_trajectories=False, jump_log="none", atol=1e-12,
                 max_logged_jumps=None):
    """Average many trajectories on spec.t_grid.

    The ensemble mean is assembled from fixed 64-trajectory blocks combined
    in index order, so the result is bit-identical for any worker count.
    Worker processes default to the DICKESIM_WORKERS environment variable.
    """
    log_mode = {"none": 0, "sector": 1, "all": 2}[jump_log]
    if workers is None:
        workers = int(os.environ.get("DICKESIM_WORKERS", "1"))
    psi0 = _coerce_initial(params, initial).normalized()
    t_grid = np.ascontiguousarray(spec.t_grid, dtype=float)
    span = float(t_grid[-1] - t_grid[0])
    max_log = (max_logged_jumps if max_logged_jumps is not None
               else _default_log_cap(params, span, log_mode))

    _warm_up_kernel()
    global _JOB
    _JOB = {
        "params": params,
        "t_grid": t_grid,
        "n_traj": spec.n_traj,
        "master_seed": int(spec.master_seed),
        "two_j0": psi0.sector.two_j,
        "psi0": np.ascontiguousarray(psi0.amplitudes, dtype=np.complex128),
        "rtol": float(rtol),
        "atol": float(atol),
        # sector-population cutoff for the active window, tied to the step
        # tolerance so loose production runs also carry narrower windows
        "thr_rel": min(1e-12, 4e-6 * float(rtol)),
        "log_mode": log_mode,
        "max_log": int(max_log),
        "keep": bool(keep_trajectories),
    }
    n_blocks = (spec.n_traj + BLOCK - 1) // BLOCK
    procs = max(1, min(int(workers), n_blocks))
    if procs == 1:
        results = [_run_block(b) for b in range(n_blocks)]
    else:
        ctx = multiprocessing.get_context("fork")
        with ctx.Pool(processes=procs) as pool:
            results = pool.map(_run_block, range(n_blocks))

    n_t = t_grid.size
    s1 = np.zeros((n_t, 10))
    s2 = np.zeros((n_t, 10))
    kept = [] if keep_trajectories else None
    for res in sorted(results, key=lambda r: r[1]):
        if res[0] == "error":
            _, block, ti, status = res
            raise RuntimeError(
                f"trajectory {ti} (master_seed={spec.master_seed}, "
                f"block {block}) failed: "
                f"{_STATUS_TEXT.get(status, status)}")
        _, _, b1, b2, bkept = res
        s1 += b1
        s2 += b2
        if keep_trajectories:
            kept.extend(bkept)

    n = spec.n_traj
    mean = s1 / n
    if n > 1:
        var = np.maximum(s2 / n - mean * mean, 0.0)
        se = np.sqrt(var / (n - 1))
    else:
        se = np.zeros_like(mean)
    moments = [moments_from_row(mean[i]) for i in range(n_t)]
    return EnsembleResult(t=t_grid, moments=moments, se=se, raw_mean=mean,
                          n_traj=n, trajectories=kept)


_WARMED = False


def _warm_up_kernel():
    """Force JIT compilation in the parent so forked workers reuse it."""
    global _WARMED
    if _WARMED:
        return
    rows = np.zeros((2, 10))
    twojs = np.zeros(2, dtype=np.int64)
    jlog = np.zeros((4, 4))
    psi0 = np.zeros(3, dtype=np.complex128)
    psi0[0] = 1.0
    _run_trajectory(2, 2, psi0, np.array([0.0, 0.05]), 0.5, 1.0, 1.0, 0.5,
                    1e-8, 1e-12, 4e-14, trajectory_seed_state(1, 0), rows,
                    twojs,
                    jlog, 2)
    _WARMED = True
