"""Dense 2^N master-equation reference solver, used to certify every other
solver at small N. No permutation symmetry or sector structure is assumed
anywhere here; that is the point.
"""

import math

import numpy as np
import scipy.sparse as sp
from scipy.integrate import solve_ivp

from .dicke import assemble_moments

MAX_BRUTE_ATOMS = 8

_SM = np.array([[0.0, 0.0], [1.0, 0.0]])           # |down><up|
_SZ = np.array([[1.0, 0.0], [0.0, -1.0]])
_ID = np.eye(2)


def site_operator(n_atoms, site, op):
    """Sparse 2^N operator acting with 2x2 `op` on one site (site 0 = leftmost
    factor, matching bit N-1 of the basis index)."""
    mats = [sp.csr_matrix(op if i == site else _ID) for i in range(n_atoms)]
    out = mats[0]
    for m in mats[1:]:
        out = sp.kron(out, m, format="csr")
    return out


def collective_ops_full(n_atoms):
    """Sparse (Jm, Jz) in the full 2^N space."""
    jm = sp.csr_matrix((2**n_atoms, 2**n_atoms))
    jz = sp.csr_matrix((2**n_atoms, 2**n_atoms))
    for i in range(n_atoms):
        jm = jm + site_operator(n_atoms, i, _SM)
        jz = jz + 0.5 * site_operator(n_atoms, i, _SZ)
    return jm.tocsr(), jz.tocsr()


def product_state(n_atoms, theta, phi):
    """Dense 2^N ket: every spin at (theta, phi), matching coherent_spin_state."""
    up = math.cos(0.5 * theta)
    dn = math.sin(0.5 * theta) * np.exp(-1j * phi)
    psi = np.array([1.0 + 0.0j])
    for _ in range(n_atoms):
        psi = np.concatenate([up * psi, dn * psi])
    return psi


def _as_density(n_atoms, initial):
    dim = 2**n_atoms
    if isinstance(initial, tuple) and len(initial) == 2:
        psi = product_state(n_atoms, *initial)
        return np.outer(psi, psi.conj())
    arr = np.asarray(initial, dtype=complex)
    if arr.shape == (dim,):
        arr = arr / np.linalg.norm(arr)
        return np.outer(arr, arr.conj())
    if arr.shape == (dim, dim):
        return arr.copy()
    raise ValueError(f"initial state shape {arr.shape} fits neither a ket nor "
                     f"a density for N={n_atoms}")


class BruteForceModel:
    """Precomputed operators for one atom number; reusable across runs."""

    def __init__(self, n_atoms):
        if n_atoms > MAX_BRUTE_ATOMS:
            raise ValueError(f"brute force capped at N={MAX_BRUTE_ATOMS}, "
                             f"got {n_atoms}")
        self.n_atoms = n_atoms
        self.jm, self.jz = collective_ops_full(n_atoms)
        self.jp = self.jm.conj().T.tocsr()
        self.jx = 0.5 * (self.jp + self.jm)
        self.jpjm = (self.jp @ self.jm).tocsr()
        self.sm_sites = [site_operator(n_atoms, i, _SM) for i in range(n_atoms)]
        self.num_sites = [(s.conj().T @ s).tocsr() for s in self.sm_sites]

    def rhs(self, rho, params):
        h = params.chi * self.jpjm + params.omega * self.jx
        out = -1j * (h @ rho - rho @ h)
        out += params.gamma_c * (self.jm @ rho @ self.jp
                                 - 0.5 * (self.jpjm @ rho + rho @ self.jpjm))
        if params.gamma_s != 0.0:
            for s, num in zip(self.sm_sites, self.num_sites):
                out += params.gamma_s * (s @ rho @ s.conj().T
                                         - 0.5 * (num @ rho + rho @ num))
        return out

    def moments(self, rho):
        jp, jz = self.jp, self.jz
        jzjp = (jz @ jp).tocsr()
        tr = lambda op: complex((op @ rho).diagonal().sum())
        mom = assemble_moments(tr(jp), tr(jz).real, tr(self.jpjm).real,
                               tr(jp @ jp), tr(jz @ jz).real, tr(jzjp))
        return mom


def brute_force_evolve(params, initial, t_grid, rtol=1e-10, atol=1e-12):
    """Integrate the unrestricted master equation; returns (list of
    CollectiveMoments, list of densities) at the grid times."""
    model = BruteForceModel(params.n_atoms)
    rho0 = _as_density(params.n_atoms, initial)
    dim = rho0.shape[0]

    def rhs(t, y):
        return model.rhs(y.reshape(dim, dim), params).ravel()

    t_grid = np.asarray(t_grid, dtype=float)
    sol = solve_ivp(rhs, (t_grid[0], t_grid[-1]), rho0.ravel(),
                    t_eval=t_grid, method="DOP853", rtol=rtol, atol=atol)
    if not sol.success:
        raise RuntimeError(f"brute-force integration failed: {sol.message}")
    moments, densities = [], []
    for i in range(sol.y.shape[1]):
        rho = sol.y[:, i].reshape(dim, dim)
        rho = 0.5 * (rho + rho.conj().T)
        tr = np.trace(rho).real
        if abs(tr - 1.0) > 1e-10:
            raise RuntimeError(f"trace drifted to {tr!r} at t={t_grid[i]:g}")
        densities.append(rho)
        moments.append(model.moments(rho))
    return moments, densities


def brute_force_oracle(params, initial, t_grid, rtol=1e-10, atol=1e-12):
    """Reference time series of CollectiveMoments from the full 2^N model.

    `initial` is a (theta, phi) pair, a 2^N ket, or a 2^N x 2^N density.
    """
    moments, _ = brute_force_evolve(params, initial, t_grid, rtol=rtol,
                                    atol=atol)
    return moments


# -- permutation-symmetric correlators (for closing-the-hierarchy checks) ------

def symmetrize_density(rho, n_atoms):
    """Average rho over all particle permutations (exact group average)."""
    from itertools import permutations
    dim = 2**n_atoms
    idx = np.arange(dim)
    bits = (idx[:, None] >> np.arange(n_atoms)[None, :]) & 1
    out = np.zeros_like(rho)
    count = 0
    for perm in permutations(range(n_atoms)):
        # spin i of the new labeling reads spin perm[i] of the old
        new_idx = np.zeros(dim, dtype=int)
        for i in range(n_atoms):
            new_idx |= bits[:, perm[i]] << i
        out += rho[np.ix_(new_idx, new_idx)]
        count += 1
    out /= count
    return 0.5 * (out + out.conj().T)


def pi_pair_moments(rho, n_atoms):
    """The six permutation-symmetric moments (sp, sz, zp, pm, zz, pp) read off
    sites 0, 1 of a permutation-symmetric density."""
    sp_op = site_operator(n_atoms, 0, _SM.T)
    sz_op = site_operator(n_atoms, 0, _SZ)
    tr = lambda op: complex((op @ rho).diagonal().sum())
    z1 = site_operator(n_atoms, 1, _SZ)
    p1 = site_operator(n_atoms, 1, _SM.T)
    m1 = site_operator(n_atoms, 1, _SM)
    return dict(
        sp=tr(sp_op),
        sz=tr(sz_op).real,
        zp=tr(sz_op @ p1),
        pm=tr(sp_op @ m1),
        zz=tr(sz_op @ z1).real,
        pp=tr(sp_op @ p1),
    )


def pi_triple_moments(rho, n_atoms):
    """Exact distinct-site triples (zz+, ++-, z+-, z++) from sites 0, 1, 2."""
    z0 = site_operator(n_atoms, 0, _SZ)
    z1 = site_operator(n_atoms, 1, _SZ)
    p0 = site_operator(n_atoms, 0, _SM.T)
    p1 = site_operator(n_atoms, 1, _SM.T)
    p2 = site_operator(n_atoms, 2, _SM.T)
    m2 = site_operator(n_atoms, 2, _SM)
    tr = lambda op: complex((op @ rho).diagonal().sum())
    return dict(
        zzp=tr(z0 @ z1 @ p2),
        ppm=tr(p0 @ p1 @ m2),
        zpm=tr(z0 @ p1 @ m2),
        zpp=tr(z0 @ p1 @ p2),
    )
