"""Mean-field (factorized singles) dynamics of the driven collective-decay model.

The state is the Bloch vector of one representative spin, (sx, sy, sz) with
sx = 2 Re<s+>, sy = 2 Im<s+>, sz = <sz>. The polar variables r = |<s+>| and
phi = arg<s+> are a derived view; Cartesian components are used internally
because the azimuth equation carries a 1/r factor that blows up at the poles.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import brentq

log = logging.getLogger(__name__)

# linear-stability margin: eigenvalues this close to the imaginary axis are
# flagged marginal instead of being trusted either way
STABILITY_MARGIN = 1e-10


class NoStableFixedPoint(RuntimeError):
    """No linearly stable stationary point exists at these parameters."""


class RootBracketFailure(RuntimeError):
    """Sign-change scan failed to bracket a stationary-branch root."""


@dataclass(frozen=True)
class MeanFieldState:
    sx: float
    sy: float
    sz: float

    def as_array(self):
        return np.array([self.sx, self.sy, self.sz])

    @property
    def spin_plus(self):
        return 0.5 * (self.sx + 1j * self.sy)

    @property
    def r(self):
        return 0.5 * math.hypot(self.sx, self.sy)

    @property
    def phi(self):
        return math.atan2(self.sy, self.sx)

    @property
    def z(self):
        return self.sz

    def check(self):
        """Bloch-ball containment; factorized singles must stay inside."""
        n2 = self.sx**2 + self.sy**2 + self.sz**2
        if n2 > 1.0 + 1e-9 or abs(self.sz) > 1.0:
            log.warning("mean-field state outside the Bloch ball: |s|^2 = %.12g",
                        n2)
            return False
        return True


def _as_y(state):
    if isinstance(state, MeanFieldState):
        return state.as_array()
    return np.asarray(state, dtype=float)


def bloch_from_angles(theta, phi):
    # same (theta, phi) convention as the coherent-state constructor: the
    # amplitude phase e^{-i(J-m)phi} puts the azimuth of <s+> at -phi
    return MeanFieldState(math.sin(theta) * math.cos(phi),
                          -math.sin(theta) * math.sin(phi),
                          math.cos(theta))


def _rhs_arr(y, p):
    sx, sy, sz = y
    gt = p.gamma_c + p.gamma_s
    a = -0.5 * gt + 0.5 * p.gamma_c * (p.n_atoms - 1) * sz
    b = p.chi * (1.0 - (p.n_atoms - 1) * sz)
    return np.array([
        a * sx - b * sy,
        b * sx + a * sy - p.omega * sz,
        -0.5 * p.gamma_c * (p.n_atoms - 1) * (sx * sx + sy * sy)
        - gt * (1.0 + sz) + p.omega * sy,
    ])


def _jac_arr(y, p):
    sx, sy, sz = y
    gt = p.gamma_c + p.gamma_s
    nm1 = p.n_atoms - 1
    a = -0.5 * gt + 0.5 * p.gamma_c * nm1 * sz
    b = p.chi * (1.0 - nm1 * sz)
    return np.array([
        [a, -b, 0.5 * p.gamma_c * nm1 * sx + p.chi * nm1 * sy],
        [b, a, -p.chi * nm1 * sx + 0.5 * p.gamma_c * nm1 * sy - p.omega],
        [-p.gamma_c * nm1 * sx, -p.gamma_c * nm1 * sy + p.omega, -gt],
    ])


def mf_rhs(state, params):
    """Time derivative of the factorized singles (sx, sy, sz)."""
    return _rhs_arr(_as_y(state), params)


def mf_jacobian(state, params):
    """Analytic 3x3 Jacobian of mf_rhs at `state`."""
    return _jac_arr(_as_y(state), params)


@dataclass
class MeanFieldTrajectory:
    t: np.ndarray
    sx: np.ndarray
    sy: np.ndarray
    sz: np.ndarray

    def spin_plus(self):
        return 0.5 * (self.sx + 1j * self.sy)

    def state_at(self, i):
        return MeanFieldState(self.sx[i], self.sy[i], self.sz[i])


def evolve_meanfield(state0, params, t_grid, rtol=1e-10, atol=1e-12):
    """Integrate the mean-field flow over t_grid from `state0`.

    `state0` may be a MeanFieldState, a length-3 array, or None for the
    default -x product state.
    """
    if state0 is None:
        state0 = bloch_from_angles(0.5 * math.pi, math.pi)
    t_grid = np.asarray(t_grid, dtype=float)
    sol = solve_ivp(lambda t, y: _rhs_arr(y, params),
                    (t_grid[0], t_grid[-1]), _as_y(state0), t_eval=t_grid,
                    method="DOP853", rtol=rtol, atol=atol)
    if not sol.success:
        raise RuntimeError(f"mean-field integration failed: {sol.message}")
    traj = MeanFieldTrajectory(t=sol.t, sx=sol.y[0], sy=sol.y[1], sz=sol.y[2])
    traj.state_at(len(sol.t) - 1).check()
    return traj


# -- stationary points ---------------------------------------------------------
#
# At a fixed point the inversion and transverse radius obey z^2 + z + 2r^2 = 0,
# so z = -1/2 +/- sqrt(1 - 8 r^2)/2 and the deep branch ends at r = 1/sqrt(8).
# Eliminating sin(phi) (from the z equation) and cos(phi) (from the azimuth
# equation) against sin^2 + cos^2 = 1 leaves one scalar equation in r per
# z-branch; each root is then a candidate stationary point.

_R_MAX = 1.0 / math.sqrt(8.0)


def _branch_z(r, sign):
    disc = max(1.0 - 8.0 * r * r, 0.0)
    return 0.5 * (-1.0 + sign * math.sqrt(disc))


def _branch_residual(r, sign, p):
    # multiplied through by z^2 so the shallow branch stays finite as z -> 0
    gt = p.gamma_c + p.gamma_s
    nm1 = p.n_atoms - 1
    z = _branch_z(r, sign)
    su = 2.0 * nm1 * p.gamma_c * r * r + gt * (1.0 + z)
    zcu = 4.0 * p.chi * r * r * (1.0 - nm1 * z)
    return z * z * (4.0 * r * r * p.omega**2 - su * su) - zcu * zcu


def branch_termination_omega(p):
    """Drive at which the deep stationary branch reaches r = 1/sqrt(8) and ends."""
    gt = p.gamma_c + p.gamma_s
    lin = 0.25 * (p.n_atoms - 1) * p.gamma_c + 0.5 * gt
    quad = 0.5 * p.chi * (p.n_atoms + 1)
    return math.sqrt(2.0 * (lin * lin + quad * quad))


@dataclass
class FixedPoint:
    state: MeanFieldState
    stable: bool
    eigenvalues: np.ndarray
    marginal: bool = False
    branch: str = ""       # "deep", "shallow", or "down" (undriven pole)

    @property
    def r(self):
        return self.state.r

    @property
    def z(self):
        return self.state.sz

    @property
    def phi(self):
        return self.state.phi


def mf_stability(state, params, branch=""):
    """Classify a stationary point by the eigenvalues of the analytic Jacobian.

    The point must actually be stationary (residual below 1e-8); linear
    stability within STABILITY_MARGIN of the imaginary axis is flagged
    marginal rather than trusted.
    """
    y = _as_y(state)
    resid = float(np.max(np.abs(_rhs_arr(y, params))))
    if resid > 1e-8:
        raise ValueError(f"not a stationary point: max |rhs| = {resid:.3e}")
    eig = np.linalg.eigvals(_jac_arr(y, params))
    top = float(np.max(eig.real))
    return FixedPoint(state=MeanFieldState(*y),
                      stable=bool(top < -STABILITY_MARGIN),
                      marginal=bool(abs(top) <= STABILITY_MARGIN),
                      eigenvalues=eig, branch=branch)


def _polish(y, p):
    # Newton cleanup of the bracketed root; near the branch end the Jacobian
    # can go singular, in which case keep what brentq produced
    for _ in range(6):
        f = _rhs_arr(y, p)
        if np.max(np.abs(f)) < 1e-15:
            break
        try:
            step = np.linalg.solve(_jac_arr(y, p), f)
        except np.linalg.LinAlgError:
            break
        y = y - step
    return y


def _point_from_root(r, sign, p, branch):
    gt = p.gamma_c + p.gamma_s
    nm1 = p.n_atoms - 1
    z = _branch_z(r, sign)
    sin_phi = (2.0 * nm1 * p.gamma_c * r * r + gt * (1.0 + z)) / (2.0 * p.omega * r)
    cos_phi = 2.0 * r * p.chi * (1.0 - nm1 * z) / (p.omega * z)
    y = _polish(np.array([2.0 * r * cos_phi, 2.0 * r * sin_phi, z]), p)
    return mf_stability(MeanFieldState(*y), p, branch=branch)


def _scan_grid(n_scan):
    # geometric spacing near r = 0 catches weak-drive roots; linear elsewhere
    lo = np.geomspace(1e-12, 1e-3, 60)
    hi = np.linspace(1e-3, _R_MAX * (1.0 - 1e-12), n_scan)
    return np.concatenate([lo[:-1], hi])


def mf_steady_state(params, n_scan=900):
    """All stationary points of the mean-field flow, with stability tags.

    Roots are bracketed on r in (0, 1/sqrt(8)] separately for the two
    z-branches. The shallow branch's small-r root at large drive is the
    finite-N realization of the depolarized normal phase (z -> 0 as N grows);
    exactly z = 0 is never stationary at finite N, so no such point is
    fabricated. Raises RootBracketFailure if a driven system yields no root
    on either branch.
    """
    p = params
    if p.omega <= 0.0:
        fp = mf_stability(MeanFieldState(0.0, 0.0, -1.0), p, branch="down")
        return [fp]
    out = []
    rs = _scan_grid(n_scan)
    for sign, branch in ((-1.0, "deep"), (+1.0, "shallow")):
        vals = np.array([_branch_residual(r, sign, p) for r in rs])
        # strict product: at chi = 0 the shallow residual underflows to an
        # exact 0.0 plateau for r below ~1e-9, which a sign() comparison
        # would misread as a wall of crossings
        hits = np.flatnonzero(vals[:-1] * vals[1:] < 0.0)
        for i in hits:
            root = brentq(_branch_residual, rs[i], rs[i + 1], args=(sign, p),
                          xtol=1e-14, rtol=8.9e-16)
            if _branch_z(root, sign) == 0.0:
                continue
            out.append(_point_from_root(root, sign, p, branch))
    if not out:
        raise RootBracketFailure(
            f"no stationary root bracketed for omega={p.omega:g}, "
            f"chi={p.chi:g}, N={p.n_atoms}; residual at endpoints: "
            f"deep ({_branch_residual(rs[0], -1, p):.3e}, "
            f"{_branch_residual(rs[-1], -1, p):.3e}), "
            f"shallow ({_branch_residual(rs[0], 1, p):.3e}, "
            f"{_branch_residual(rs[-1], 1, p):.3e})")
    out.sort(key=lambda fp: fp.z)
    return out


def stable_steady_state(params, fallback="error"):
    """The attractor among the stationary points.

    Prefers the deepest-inversion stable point. If nothing is stable,
    `fallback` picks the behavior: "error" raises NoStableFixedPoint;
    "saturated" returns the conventional depolarized extrapolation
    (z = 0, r = min(upsilon/(2 upsilon_c), 1/2)) used only to seed other
    solvers, tagged unstable.
    """
    points = mf_steady_state(params)
    stable = [fp for fp in points if fp.stable]
    if stable:
        return min(stable, key=lambda fp: fp.z)
    if fallback == "error":
        raise NoStableFixedPoint(
            f"no stable stationary point at omega={params.omega:g} "
            f"(deep branch ends at omega={branch_termination_omega(params):g})")
    if fallback != "saturated":
        raise ValueError(f"unknown fallback {fallback!r}")
    return saturated_state(params)


def saturated_state(params):
    """Conventional depolarized extrapolation of the driven branch.

    z = 0 with r = min(upsilon/(2 upsilon_c), 1/2) continues the large-N
    driven-branch amplitude past its termination, and the phase keeps the
    branch's asymptotic value (sin phi, cos phi) = (gamma_c, -2 chi)/upsilon_c.
    Not a stationary point; used to seed other solvers where the inverted
    branch has ended. Tagged unstable, branch "saturated".
    """
    r = min(params.upsilon / (2.0 * params.upsilon_c), 0.5)
    sin_phi = min(params.gamma_c / params.upsilon_c, 1.0)
    cos_phi = -math.sqrt(max(1.0 - sin_phi * sin_phi, 0.0))
    state = MeanFieldState(2.0 * r * cos_phi, 2.0 * r * sin_phi, 0.0)
    eig = np.linalg.eigvals(_jac_arr(state.as_array(), params))
    return FixedPoint(state=state, stable=False, eigenvalues=eig,
                      branch="saturated")


def fixed_point_table(params_list):
    """Rows (upsilon_ratio, branch, r, z, stable, leading real part) for a
    parameter sweep; one row per stationary point."""
    rows = []
    for p in params_list:
        for fp in mf_steady_state(p):
            rows.append((p.upsilon / p.upsilon_c, fp.branch, fp.r, fp.z,
                         fp.stable, float(np.max(fp.eigenvalues.real))))
    return rows
