"""Exact quantum dynamics of the collective model (no single-particle decay).

Everything here lives in the maximal spin sector, so the density matrix is
(N+1) x (N+1) and one right-hand side costs O(N^2): the Hamiltonian is
tridiagonal in the descending-m basis and the decay term couples adjacent
diagonals only.
"""

import math

import numpy as np
from scipy.integrate import solve_ivp
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .dicke import (SpinSector, ladder_elements, assemble_moments,
                    coherent_spin_state)


class NonCollectiveParams(ValueError):
    """This solver handles the gamma_s = 0 model only."""


class NonConvergence(RuntimeError):
    """Steady-state search did not reach the requested residual."""


class CollectiveDensity:
    """Density matrix on the maximal sector (J = N/2), descending-m basis."""

    def __init__(self, sector, rho, check=True):
        rho = np.asarray(rho, dtype=complex)
        if rho.shape != (sector.dim, sector.dim):
            raise ValueError(f"rho shape {rho.shape} does not match sector "
                             f"dim {sector.dim}")
        self.sector = sector
        self.rho = rho
        if check:
            self.check()

    @classmethod
    def from_pure(cls, state):
        psi = state.normalized().amplitudes
        return cls(state.sector, np.outer(psi, psi.conj()))

    @classmethod
    def from_angles(cls, n_atoms, theta, phi):
        return cls.from_pure(coherent_spin_state(n_atoms, theta, phi))

    def check(self):
        h = np.max(np.abs(self.rho - self.rho.conj().T))
        if h > 1e-10:
            raise ValueError(f"density not Hermitian: asymmetry {h:.3e}")
        tr = np.trace(self.rho).real
        if abs(tr - 1.0) > 1e-10:
            raise ValueError(f"density trace {tr!r} is not 1")
        lo = float(np.linalg.eigvalsh(self.rho).min())
        if lo < -1e-8:
            raise ValueError(f"density has eigenvalue {lo:.3e} < -1e-8")
        return self


def _require_collective(params):
    if params.gamma_s != 0.0:
        raise NonCollectiveParams(
            f"gamma_s = {params.gamma_s:g}; the fixed-sector solver only "
            "covers gamma_s = 0")


def _rhs_matrix(rho, w, e, chi, omega, gamma_c):
    """Lindblad right-hand side using only diagonal-band operations.

    H = chi J+J- + omega Jx is tridiagonal: diag chi*e, off-diagonals omega*w/2.
    The decay term maps rho -> gamma_c (J- rho J+ - {J+J-, rho}/2) where
    (J- rho J+)[k+1, l+1] = w[k] w[l] rho[k, l].
    """
    hd = chi * e
    ho = 0.5 * omega * w
    # -i (H rho - rho H), tridiagonal H applied by shifted slices
    hrho = hd[:, None] * rho
    hrho[:-1, :] += ho[:, None] * rho[1:, :]
    hrho[1:, :] += ho[:, None] * rho[:-1, :]
    rhoh = rho * hd[None, :]
    rhoh[:, :-1] += rho[:, 1:] * ho[None, :]
    rhoh[:, 1:] += rho[:, :-1] * ho[None, :]
    out = -1j * (hrho - rhoh)
    out[1:, 1:] += gamma_c * (w[:, None] * w[None, :]) * rho[:-1, :-1]
    out -= (0.5 * gamma_c) * (e[:, None] + e[None, :]) * rho
    return out


def collective_rhs(density, params):
    """Master-equation derivative of a CollectiveDensity (gamma_s = 0 only)."""
    _require_collective(params)
    w, e = ladder_elements(density.sector)
    return _rhs_matrix(density.rho, w, e, params.chi, params.omega,
                       params.gamma_c)


def moments_of_density(density):
    """CollectiveMoments from rho by banded traces (O(N), no dense products)."""
    rho = density.rho
    sector = density.sector
    m = sector.m_values()
    w, e = ladder_elements(sector)
    d = np.diag(rho).real
    jz = float(np.dot(d, m))
    jzz = float(np.dot(d, m * m))
    jpjm = float(np.dot(d, e))
    # tr(rho J+) picks the first subdiagonal of rho: J+[k, k+1] = w[k]
    sub1 = np.diag(rho, k=-1)
    jp = complex(np.sum(w * sub1))
    jzjp = complex(np.sum(m[:-1] * w * sub1))
    if sector.dim >= 3:
        sub2 = np.diag(rho, k=-2)
        jpp = complex(np.sum(w[:-1] * w[1:] * sub2))
    else:
        jpp = 0.0 + 0.0j
    return assemble_moments(jp, jz, jpjm, jpp, jzz, jzjp)


def _integrate(density0, params, t_grid, rtol, atol):
    sector = density0.sector
    w, e = ladder_elements(sector)
    dim = sector.dim

    def rhs(t, y):
        rho = y.reshape(dim, dim)
        return _rhs_matrix(rho, w, e, params.chi, params.omega,
                           params.gamma_c).ravel()

    t_grid = np.asarray(t_grid, dtype=float)
    sol = solve_ivp(rhs, (t_grid[0], t_grid[-1]),
                    density0.rho.ravel().copy(), t_eval=t_grid,
                    method="DOP853", rtol=rtol, atol=atol)
    if not sol.success:
        raise RuntimeError(f"collective integration failed: {sol.message}")
    out = []
    rho = None
    for i in range(sol.y.shape[1]):
        rho = sol.y[:, i].reshape(dim, dim).copy()
        rho = 0.5 * (rho + rho.conj().T)
        tr = np.trace(rho).real
        if abs(tr - 1.0) > 1e-12:
            rho /= tr
        out.append(moments_of_density(CollectiveDensity(sector, rho,
                                                        check=False)))
    return out, CollectiveDensity(sector, rho, check=False)


def evolve_collective(density0, params, t_grid, rtol=1e-9, atol=1e-12):
    """Integrate the collective master equation; CollectiveMoments at each
    grid time. Trace drift beyond 1e-12 is renormalized away at output."""
    _require_collective(params)
    moments, _ = _integrate(density0, params, t_grid, rtol, atol)
    return moments


def _liouvillian_sparse(sector, params):
    """Sparse superoperator L with vec(rho) row-major: vec(A rho B) =
    (A kron B^T) vec(rho)."""
    w, e = ladder_elements(sector)
    dim = sector.dim
    hd = params.chi * e
    ho = 0.5 * params.omega * w
    h = sp.diags([ho, hd, ho], offsets=[-1, 0, 1], format="csr")
    # J- lowers m: (J- psi)_{k+1} = w[k] psi_k, so J-[k+1, k] = w[k]
    jm = sp.diags([w], offsets=[-1], format="csr")
    jp = jm.T
    eye = sp.identity(dim, format="csr")
    jpjm = sp.diags([e], offsets=[0], format="csr")
    lind = -1j * (sp.kron(h, eye) - sp.kron(eye, h.T))
    lind = lind + params.gamma_c * (sp.kron(jm, jm.conj())
                                    - 0.5 * sp.kron(jpjm, eye)
                                    - 0.5 * sp.kron(eye, jpjm.T))
    return lind.tocsr()


def steady_state_collective(params, method=None, t_max=2000.0,
                            residual_tol=1e-10):
    """Stationary density of the collective master equation.

    method "nullspace" (default for N <= 200) replaces one row of the sparse
    Liouvillian with the trace functional and solves the bordered system;
    "evolve" (default above) integrates from the down-polarized state in
    chunks until the residual drops below tolerance, raising NonConvergence
    at t_max otherwise.
    """
    _require_collective(params)
    sector = SpinSector(params.n_atoms)
    if method is None:
        method = "nullspace" if params.n_atoms <= 200 else "evolve"
    if method == "nullspace":
        dim = sector.dim
        lio = _liouvillian_sparse(sector, params).tolil()
        # trace row: sum of rho[k, k] entries of vec(rho), pinned to 1
        row = np.zeros(dim * dim)
        row[::dim + 1] = 1.0
        lio[0, :] = row
        rhs = np.zeros(dim * dim, dtype=complex)
        rhs[0] = 1.0
        vec = spla.spsolve(lio.tocsc(), rhs)
        rho = vec.reshape(dim, dim)
        rho = 0.5 * (rho + rho.conj().T)
        rho /= np.trace(rho).real
        density = CollectiveDensity(sector, rho, check=False)
        resid = float(np.linalg.norm(collective_rhs(density, params)))
        if not math.isfinite(resid) or resid > residual_tol:
            raise NonConvergence(
                f"bordered solve residual {resid:.3e} > {residual_tol:g}")
        return density.check()
    if method != "evolve":
        raise ValueError(f"unknown method {method!r}")
    density = CollectiveDensity.from_angles(params.n_atoms, math.pi, 0.0)
    t, chunk = 0.0, 25.0
    while t < t_max:
        _, density = _integrate(density, params, np.linspace(0.0, chunk, 2),
                                rtol=1e-9, atol=1e-12)
        t += chunk
        resid = float(np.linalg.norm(collective_rhs(density, params)))
        if resid < residual_tol:
            return density.check()
        chunk = min(2.0 * chunk, 400.0)
    raise NonConvergence(
        f"residual {resid:.3e} still above {residual_tol:g} at t = {t_max:g}")
