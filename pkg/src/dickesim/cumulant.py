"""Second-order cumulant model: six coupled moments of a permutation-symmetric
spin ensemble, closed by factorizing third-order correlators.

Variables (one representative pair of distinct particles a != b):
    sp = <s+_a>        complex
    sz = <sz_a>        real
    zp = <sz_a s+_b>   complex
    pm = <s+_a s-_b>   real for permutation-symmetric states
    zz = <sz_a sz_b>   real
    pp = <s+_a s+_b>   complex

The right-hand side accepts optional externally supplied third-order moments
so the equations of motion can be certified against an exact density matrix
before the closure is trusted.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp

from .dicke import CollectiveMoments, assemble_moments
from .meanfield import mf_steady_state, saturated_state, stable_steady_state


class CumulantBoundsError(RuntimeError):
    """A moment left its physical range by more than the tolerated slack."""


# CSS initial conditions sit exactly on several bounds (|sp| = 1/2 at the
# equator, |sz| = 1 at the poles), so the check needs nonzero slack.
BOUND_SLACK = 1e-9


@dataclass(frozen=True)
class CumulantState:
    sp: complex
    sz: float
    zp: complex
    pm: float
    zz: float
    pp: complex

    def as_vector(self):
        return np.array([self.sp.real, self.sp.imag, self.sz,
                         self.zp.real, self.zp.imag, self.pm, self.zz,
                         self.pp.real, self.pp.imag])

    @classmethod
    def from_vector(cls, y):
        return cls(sp=complex(y[0], y[1]), sz=float(y[2]),
                   zp=complex(y[3], y[4]), pm=float(y[5]), zz=float(y[6]),
                   pp=complex(y[7], y[8]))

    def check(self, slack=BOUND_SLACK):
        bad = []
        if abs(self.sp) > 0.5 + slack:
            bad.append(f"|sp|={abs(self.sp):.6g}")
        if abs(self.sz) > 1.0 + slack:
            bad.append(f"|sz|={abs(self.sz):.6g}")
        if abs(self.zp) > 0.5 + slack:
            bad.append(f"|zp|={abs(self.zp):.6g}")
        if abs(self.pm) > 0.25 + slack:
            bad.append(f"|pm|={abs(self.pm):.6g}")
        if abs(self.zz) > 1.0 + slack:
            bad.append(f"|zz|={abs(self.zz):.6g}")
        if abs(self.pp) > 0.25 + slack:
            bad.append(f"|pp|={abs(self.pp):.6g}")
        return bad


def factor_third_order(pair_ab, pair_bc, pair_ac, s_a, s_b, s_c):
    """<ABC> ~ <AB><C> + <BC><A> + <AC><B> - 2<A><B><C> for distinct sites."""
    return pair_ab * s_c + pair_bc * s_a + pair_ac * s_b - 2.0 * s_a * s_b * s_c


def _closure_triples(sp, sz, zp, pm, zz, pp):
    """Factorized (zzp, ppm, mpp, zmp, zpm, pzm, mzp, zpp) slot values.

    Positional variants that coincide only when pm and zz are real are kept
    distinct here so the complex-consistency mode stays faithful.
    """
    csp = sp.conjugate()
    cpm = pm.conjugate()
    czp = zp.conjugate()
    zzp = factor_third_order(zz, zp, zp, sz, sz, sp)        # <sz sz s+>
    ppm = factor_third_order(pp, pm, pm, sp, sp, csp)       # <s+ s+ s->
    mpp = factor_third_order(cpm, pp, cpm, csp, sp, sp)     # <s- s+ s+>
    zmp = factor_third_order(czp, cpm, zp, sz, csp, sp)     # <sz s- s+>
    zpm = factor_third_order(zp, pm, czp, sz, sp, csp)      # <sz s+ s->
    pzm = factor_third_order(zp, czp, pm, sp, sz, csp)      # <s+ sz s->
    mzp = factor_third_order(czp, zp, cpm, csp, sz, sp)     # <s- sz s+>
    zpp = factor_third_order(zp, pp, zp, sz, sp, sp)        # <sz s+ s+>
    return zzp, ppm, mpp, zmp, zpm, pzm, mzp, zpp


def _cumulant_rhs_terms(state, params, triples=None):
    """Raw complex time derivatives of the six moments.

    `triples` overrides the closure with exact third-order values
    (zzp, ppm, zpm, zpp); with distinct commuting sites and permutation
    symmetry every other ordering reduces to one of those four.
    """
    n = params.n_atoms
    chi, omega = params.chi, params.omega
    gc, gs = params.gamma_c, params.gamma_s
    gm = gc - 2j * chi
    gp = gc + 2j * chi
    gt = gc + gs

    sp, sz, zp, pm, zz, pp = (state.sp, state.sz, state.zp, state.pm,
                              state.zz, state.pp)
    if triples is None:
        zzp, ppm, mpp, zmp, zpm, pzm, mzp, zpp = _closure_triples(
            sp, sz, zp, pm, zz, pp)
    else:
        zzp, ppm, zpm, zpp = triples
        mpp = ppm
        zmp = zpm
        pzm = zpm
        mzp = zpm

    cpm = pm.conjugate()

    dsp = (-0.5 * gt * sp + 0.5 * (n - 1) * gm * zp - 0.5j * omega * sz
           + 1j * chi * sp)

    dzp = (-1.5 * gt * zp - gt * sp - 0.5 * gp * sp - gc * zp
           + 0.5 * (n - 2) * gm * zzp
           - (n - 2) * gp * ppm
           - (n - 2) * gm * mpp
           - 0.5j * omega * (2.0 * (pp - cpm) + zz)
           + 1j * chi * zp)

    dsz = (-2j * chi * (n - 1) * (pm - cpm)
           - gc * (n - 1) * (pm + cpm)
           - gt * (sz + 1.0)
           + 2.0 * omega * sp.imag)

    dpm = (0.5 * (n - 2) * gm * zmp + 0.5 * (n - 2) * gp * zpm
           + 0.5 * gc * (zz + sz)
           - gt * pm
           - omega * zp.imag)

    dzz = (-4j * chi * (n - 2) * (pzm - mzp)
           - 2.0 * gc * (n - 2) * (pzm + mzp)
           - 2.0 * gt * sz - 2.0 * gt * zz
           + 4.0 * gc * pm.real
           + 4.0 * omega * zp.imag)

    dpp = ((n - 2) * gm * zpp - gt * pp - 1j * omega * zp
           + 2j * chi * pp)

    return dsp, dsz, dzp, dpm, dzz, dpp


def cumulant_rhs(state, params):
    """Time derivative of the six moments, as a CumulantState.

    With pm and zz held real the imaginary parts of dsz, dpm, dzz vanish
    identically term by term (checked by the complex-consistency mode).
    """
    dsp, dsz, dzp, dpm, dzz, dpp = _cumulant_rhs_terms(state, params)
    return CumulantState(sp=dsp, sz=dsz.real, zp=dzp, pm=dpm.real,
                         zz=dzz.real, pp=dpp)


def _rhs_vector(y, params):
    return cumulant_rhs(CumulantState.from_vector(y), params).as_vector()


def init_from_css(theta, phi):
    """All particles in the same pure state; pair moments factorize exactly."""
    sp = 0.5 * math.sin(theta) * complex(math.cos(phi), -math.sin(phi))
    sz = math.cos(theta)
    return CumulantState(sp=sp, sz=sz, zp=sz * sp, pm=abs(sp) ** 2,
                         zz=sz * sz, pp=sp * sp)


def init_from_meanfield_ss(params, fallback="error"):
    """Factorized state built on the collective-only mean-field steady state.

    Spontaneous emission is switched off for the fixed-point search: the
    intent is to seed the correlated dynamics from the stationary point of
    the underlying collective flow. The seeding convention takes the stable
    inverted ("deep") branch where it exists; past its termination drive
    there is no inverted fixed point, and `fallback` decides: "error" raises,
    "saturated" uses the depolarized z = 0 extrapolation of the branch
    (meanfield.saturated_state) rather than the near-fully-mixed finite-N
    root, which carries no usable polarization to squeeze.
    """
    p0 = params.with_(gamma_s=0.0)
    deep = [fp for fp in mf_steady_state(p0)
            if fp.stable and fp.branch in ("deep", "down")]
    if deep:
        mf = min(deep, key=lambda fp: fp.z).state
    elif fallback == "saturated":
        mf = saturated_state(p0).state
    else:
        mf = stable_steady_state(p0, fallback=fallback).state
    sp = mf.spin_plus
    sz = mf.sz
    return CumulantState(sp=sp, sz=sz, zp=sz * sp, pm=abs(sp) ** 2,
                         zz=sz * sz, pp=sp * sp)


def collective_moments_from_cumulants(state, n_atoms):
    """Resum pair moments into collective first/second moments."""
    n = n_atoms
    npairs = n * (n - 1)
    jp = n * state.sp
    jz = 0.5 * n * state.sz
    jpjm = npairs * state.pm + 0.5 * n * (1.0 + state.sz)
    jpp = npairs * state.pp
    jzz = 0.25 * npairs * state.zz + 0.25 * n
    jzjp = 0.5 * npairs * state.zp + 0.5 * n * state.sp
    return assemble_moments(jp, jz, jpjm, jpp, jzz, jzjp)


def evolve_cumulant_states(state0, params, t_grid, rtol=1e-10, atol=1e-12,
                           monitor_bounds=True):
    """Integrate the closed moment system; returns CumulantState per grid time.

    With monitor_bounds the run aborts (CumulantBoundsError, time-stamped)
    as soon as an output state violates its physical range.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    sol = solve_ivp(lambda t, y: _rhs_vector(y, params),
                    (t_grid[0], t_grid[-1]), state0.as_vector(),
                    t_eval=t_grid, method="DOP853", rtol=rtol, atol=atol)
    if not sol.success:
        raise RuntimeError(f"cumulant integration failed: {sol.message}")
    states = []
    for i in range(sol.y.shape[1]):
        state = CumulantState.from_vector(sol.y[:, i])
        if monitor_bounds:
            bad = state.check()
            if bad:
                raise CumulantBoundsError(
                    f"moment bounds violated at t={t_grid[i]:.6g}: "
                    + ", ".join(bad))
        states.append(state)
    return states


def evolve_cumulant(state0, params, t_grid, rtol=1e-10, atol=1e-12,
                    monitor_bounds=True):
    """Cumulant evolution reported as collective moments on the grid."""
    states = evolve_cumulant_states(state0, params, t_grid, rtol=rtol,
                                    atol=atol, monitor_bounds=monitor_bounds)
    return [collective_moments_from_cumulants(s, params.n_atoms)
            for s in states]


# -- complex-consistency mode --------------------------------------------------

def evolve_cumulant_complex(state0, params, t_grid, rtol=1e-10, atol=1e-12,
                            imag_tol=1e-8):
    """Debug integration keeping pm, zz, sz fully complex.

    Returns (states, max_imag): permutation symmetry forces Im pm = Im zz =
    Im sz = 0, so max_imag is a self-consistency residual of the equations;
    exceeding imag_tol raises.
    """
    t_grid = np.asarray(t_grid, dtype=float)

    def rhs(t, y):
        state = CumulantState(sp=complex(y[0], y[1]),
                              sz=complex(y[2], y[3]),
                              zp=complex(y[4], y[5]),
                              pm=complex(y[6], y[7]),
                              zz=complex(y[8], y[9]),
                              pp=complex(y[10], y[11]))
        dsp, dsz, dzp, dpm, dzz, dpp = _cumulant_rhs_terms(state, params)
        return np.array([dsp.real, dsp.imag, dsz.real, dsz.imag,
                         dzp.real, dzp.imag, dpm.real, dpm.imag,
                         dzz.real, dzz.imag, dpp.real, dpp.imag])

    y0 = np.array([state0.sp.real, state0.sp.imag, state0.sz, 0.0,
                   state0.zp.real, state0.zp.imag, state0.pm, 0.0,
                   state0.zz, 0.0, state0.pp.real, state0.pp.imag])
    sol = solve_ivp(rhs, (t_grid[0], t_grid[-1]), y0, t_eval=t_grid,
                    method="DOP853", rtol=rtol, atol=atol)
    if not sol.success:
        raise RuntimeError(f"cumulant integration failed: {sol.message}")
    max_imag = float(np.max(np.abs(sol.y[[3, 7, 9], :])))
    if max_imag > imag_tol:
        raise CumulantBoundsError(
            f"complex-consistency residual {max_imag:.3g} exceeds "
            f"{imag_tol:g}; the permutation-symmetric reduction broke")
    states = [CumulantState(sp=complex(sol.y[0, i], sol.y[1, i]),
                            sz=float(sol.y[2, i]),
                            zp=complex(sol.y[4, i], sol.y[5, i]),
                            pm=float(sol.y[6, i]),
                            zz=float(sol.y[8, i]),
                            pp=complex(sol.y[10, i], sol.y[11, i]))
              for i in range(sol.y.shape[1])]
    return states, max_imag
