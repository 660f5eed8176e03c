import numpy as np
import pytest

from dickesim.bruteforce import (BruteForceModel, brute_force_oracle,
                                 collective_ops_full, product_state,
                                 site_operator)
from dickesim.dicke import (DickeVector, SpinSector, coherent_spin_state,
                            ladder_elements)
from dickesim.mcwf import (EnsembleSpec, SplitMix64, TrajectoryState,
                           ZeroJumpRate, effective_hamiltonian_apply,
                           evolve_until_jump, moments_from_row,
                           run_ensemble, run_trajectory_python,
                           select_and_apply_jump, single_jump_branch_weights,
                           trajectory_moments, trajectory_seed_state,
                           _row_from_moments, _run_trajectory)
from dickesim.params import SystemParams

_M64 = (1 << 64) - 1


def _ref_mix(x):
    x ^= x >> 30
    x = (x * 0xBF58476D1CE4E5B9) & _M64
    x ^= x >> 27
    x = (x * 0x94D049BB133111EB) & _M64
    return x ^ (x >> 31)


def _ref_next(state):
    state = (state + 0x9E3779B97F4A7C15) & _M64
    return state, ((_ref_mix(state) >> 11) + 0.5) * 2.0 ** -53


# -- RNG -----------------------------------------------------------------------

def test_splitmix_matches_masked_reference():
    for seed in (0, 1, 0xDEADBEEF, _M64):
        rng = SplitMix64(seed)
        state = seed
        for _ in range(500):
            state, expect = _ref_next(state)
            assert rng.uniform() == expect
            assert int(rng.state) == state


def test_trajectory_streams_are_decorrelated_and_reproducible():
    for master in (0, 42, 2 ** 63 + 17):
        for idx in (0, 1, 63, 10 ** 6):
            salted = (idx * 0x9E3779B97F4A7C15 + 0x632BE59BD9B4E019) & _M64
            expect = _ref_mix(master ^ _ref_mix(salted))
            assert int(trajectory_seed_state(master, idx)) == expect
    # neighboring trajectories must not share leading uniforms
    u0 = SplitMix64(trajectory_seed_state(7, 0)).uniform()
    u1 = SplitMix64(trajectory_seed_state(7, 1)).uniform()
    assert abs(u0 - u1) > 1e-6


def test_uniforms_open_interval():
    rng = SplitMix64(987654321)
    draws = np.array([rng.uniform() for _ in range(4000)])
    assert np.all(draws > 0.0) and np.all(draws < 1.0)
    assert abs(draws.mean() - 0.5) < 0.03


# -- branching weights ---------------------------------------------------------

def test_branch_weights_close_to_on_site_rate():
    # sum over destinations must equal N/2 + m for every component
    for n in range(1, 7):
        for two_j in range(n % 2, n + 1, 2):
            j = two_j / 2
            m = j
            while m >= -j - 1e-9:
                down, same, up = single_jump_branch_weights(n, two_j, m)
                assert down >= -1e-15 and same >= -1e-15 and up >= -1e-15
                assert down + same + up == pytest.approx(n / 2 + m, abs=1e-12)
                m -= 1.0


def test_branch_weights_edge_sectors():
    # maximal sector cannot be promoted
    _, _, up = single_jump_branch_weights(8, 8, 2.0)
    assert up == 0.0
    # the J=0 sector of an even system decays only upward, at the full rate
    down, same, up = single_jump_branch_weights(4, 0, 0.0)
    assert down == 0.0 and same == 0.0
    assert up == pytest.approx(2.0, abs=1e-14)


def test_single_decay_from_singlet_lands_on_triplet_floor():
    # dense check: sum_i s-_i rho s+_i maps the two-atom singlet straight
    # to |J=1, m=-1>
    up = np.array([1.0, 0.0])
    dn = np.array([0.0, 1.0])
    singlet = (np.kron(up, dn) - np.kron(dn, up)) / np.sqrt(2)
    rho = np.outer(singlet, singlet.conj())
    out = np.zeros_like(rho)
    for i in range(2):
        sm = site_operator(2, i, [[0, 0], [1, 0]]).toarray()
        out += sm @ rho @ sm.conj().T
    assert np.trace(out).real == pytest.approx(1.0, abs=1e-12)  # N/2 + m
    dndn = np.kron(dn, dn)
    assert np.outer(dndn, dndn) == pytest.approx(out, abs=1e-12)

    p = SystemParams(n_atoms=2, chi=0.0, omega=0.0, gamma_c=1.0, gamma_s=1.0)
    traj = TrajectoryState(
        psi=DickeVector(SpinSector(2, two_j=0), [1.0]),
        rng=SplitMix64(3))
    select_and_apply_jump(traj, p)
    assert traj.psi.sector.two_j == 2
    assert np.allclose(traj.psi.amplitudes, [0, 0, 1])
    t, channel, j_from, j_to = traj.jump_log[0]
    assert channel == "single" and j_from == 0.0 and j_to == 1.0


def test_branch_mixture_matches_dense_single_decay():
    # from the maximal sector the weighted branch outcomes must reproduce
    # the moments of sum_i s-_i rho s+_i computed in the full product space
    n = 4
    theta, phi = 1.1, 0.7
    model = BruteForceModel(n)
    ket = product_state(n, theta, phi)
    rho = np.outer(ket, ket.conj())
    out = np.zeros_like(rho)
    for i in range(n):
        sm = site_operator(n, i, [[0, 0], [1, 0]]).toarray()
        out += sm @ rho @ sm.conj().T
    tr = np.trace(out).real
    dense = model.moments(out / tr)

    psi = coherent_spin_state(n, theta, phi)
    amps = psi.amplitudes
    m = psi.sector.m_values()
    p2 = np.abs(amps) ** 2
    mix_mean = np.zeros(3)
    mix_second = np.zeros((3, 3))
    mix_j2 = 0.0
    total = 0.0
    for branch, new_two_j in ((0, n - 2), (1, n)):
        per = np.array([single_jump_branch_weights(n, n, mm)[branch]
                        for mm in m])
        weight = float(per @ p2)
        if weight == 0.0:
            continue
        traj = TrajectoryState(psi=DickeVector(psi.sector, amps.copy()),
                               rng=SplitMix64(0))
        # force the branch by reusing the mapping helper through the
        # public jump with a rigged rng is brittle; apply directly instead
        from dickesim.mcwf import _apply_branch
        mapped = _apply_branch(amps, n, branch)
        mapped = DickeVector(SpinSector(n, two_j=new_two_j),
                             mapped / np.linalg.norm(mapped))
        mom = trajectory_moments(mapped)
        mix_mean += weight * mom.mean
        mix_second += weight * mom.second
        mix_j2 += weight * mom.j2
        total += weight
    assert total == pytest.approx(tr, abs=1e-12)
    assert mix_mean / total == pytest.approx(dense.mean, abs=1e-10)
    assert mix_second / total == pytest.approx(dense.second, abs=1e-10)
    assert mix_j2 / total == pytest.approx(dense.j2, abs=1e-10)


# -- drift operator ------------------------------------------------------------

def test_effective_hamiltonian_matches_dense_matrix():
    rng = np.random.default_rng(5)
    p = SystemParams(n_atoms=7, chi=0.8, omega=2.3, gamma_c=1.0,
                     gamma_s=0.6)
    for two_j in (7, 5, 1):
        sector = SpinSector(7, two_j=two_j)
        w, e = ladder_elements(sector)
        m = sector.m_values()
        dim = sector.dim
        jop = np.diag(w, 1)  # J+ action: couples k to k+1
        h = (p.chi * np.diag(e)
             + 0.5 * p.omega * (jop + jop.T))
        heff = h - 0.5j * (p.gamma_c * np.diag(e)
                           + p.gamma_s * np.diag(p.n_atoms / 2 + m))
        amps = rng.normal(size=dim) + 1j * rng.normal(size=dim)
        psi = DickeVector(sector, amps)
        assert effective_hamiltonian_apply(psi, p) == pytest.approx(
            heff @ amps, abs=1e-12)


def test_norm_decay_rate_is_total_jump_rate():
    # d||psi||^2/dt = -<Gamma J+J- + gamma_s (N/2 + Jz)>
    p = SystemParams(n_atoms=5, chi=0.4, omega=1.7, gamma_c=1.0,
                     gamma_s=0.9)
    psi = coherent_spin_state(5, 0.9, 0.3)
    w, e = ladder_elements(psi.sector)
    m = psi.sector.m_values()
    p2 = np.abs(psi.amplitudes) ** 2
    expect = -(p.gamma_c * e @ p2 + p.gamma_s * (p.n_atoms / 2 + m) @ p2)
    out = effective_hamiltonian_apply(psi, p)
    got = 2.0 * np.real(psi.amplitudes.conj() @ (-1j * out))
    assert got == pytest.approx(expect, abs=1e-12)


# -- single-trajectory operations ---------------------------------------------

def test_single_atom_waiting_time_is_exponential_inverse():
    p = SystemParams(n_atoms=1, chi=0.3, omega=0.0, gamma_c=1.0,
                     gamma_s=2.0)
    # |up>: total rate Gamma*1 + gamma_s*1 = 3
    for r in (0.9, 0.5, 0.07):
        traj = TrajectoryState(psi=DickeVector(SpinSector(1), [1.0, 0.0]),
                               rng=SplitMix64(0))
        assert evolve_until_jump(traj, p, r, t_stop=50.0)
        assert traj.t == pytest.approx(-np.log(r) / 3.0, rel=1e-8)
        assert traj.psi.norm() ** 2 == pytest.approx(r, rel=1e-8)


def test_no_jump_before_t_stop_keeps_norm_above_threshold():
    p = SystemParams.from_upsilon_ratio(4, 1.0, 0.5, gamma_s=0.0)
    traj = TrajectoryState(psi=coherent_spin_state(4, np.pi / 2, np.pi),
                           rng=SplitMix64(11))
    jumped = evolve_until_jump(traj, p, r=1e-6, t_stop=0.01)
    assert not jumped
    assert traj.t == pytest.approx(0.01)
    assert 1e-6 < traj.psi.norm() ** 2 < 1.0


def test_jump_from_dark_state_raises():
    p = SystemParams(n_atoms=2, chi=1.0, omega=0.0, gamma_c=1.0,
                     gamma_s=0.0)
    traj = TrajectoryState(psi=DickeVector(SpinSector(2), [0, 0, 1.0]),
                           rng=SplitMix64(4))
    with pytest.raises(ZeroJumpRate):
        select_and_apply_jump(traj, p)


def test_evolve_rejects_bad_threshold():
    p = SystemParams(n_atoms=2, chi=0.0, omega=1.0, gamma_c=1.0)
    traj = TrajectoryState(psi=coherent_spin_state(2, 0.4, 0.0),
                           rng=SplitMix64(1))
    with pytest.raises(ValueError):
        evolve_until_jump(traj, p, r=1.5, t_stop=1.0)


def test_compiled_kernel_reproduces_python_operations():
    # same seed => same jump sequence, sectors, and grid moments
    p = SystemParams.from_upsilon_ratio(6, 1.0, 0.9, gamma_s=2.0)
    tg = np.linspace(0.0, 1.0, 11)
    rows = np.zeros((tg.size, 10))
    twojs = np.zeros(tg.size, dtype=np.int64)
    jlog = np.zeros((200, 4))
    psi0 = coherent_spin_state(6, np.pi / 2, np.pi).amplitudes
    status, n_logged, n_jumps = _run_trajectory(
        6, 6, np.ascontiguousarray(psi0), tg, p.chi, p.omega, p.gamma_c,
        p.gamma_s, 1e-10, 1e-12, 4e-16, trajectory_seed_state(12345, 7),
        rows, twojs, jlog, 2)
    assert status == 0
    prow, ptj, plog = run_trajectory_python(p, (np.pi / 2, np.pi), tg,
                                            12345, 7)
    assert n_jumps == len(plog)
    assert np.array_equal(twojs, ptj)
    kernel_times = jlog[:n_logged, 0]
    python_times = np.array([entry[0] for entry in plog])
    assert kernel_times == pytest.approx(python_times, abs=1e-8)
    assert np.abs(rows - prow).max() < 1e-6
    for i in range(n_logged):
        assert jlog[i, 2] == plog[i][2] and jlog[i, 3] == plog[i][3]


def test_collective_only_decay_conserves_sector():
    p = SystemParams.from_upsilon_ratio(6, 0.5, 0.9, gamma_s=0.0)
    spec = EnsembleSpec(n_traj=8, master_seed=3, t_grid=np.linspace(0, 2, 5))
    res = run_ensemble(spec, p, (np.pi / 2, np.pi), keep_trajectories=True,
                       jump_log="all")
    assert len(res.trajectories) == 8
    saw_jump = False
    for rec in res.trajectories:
        assert np.all(rec.two_j == 6)
        saw_jump = saw_jump or rec.n_jumps > 0
        for _, channel, j_from, j_to in rec.jumps:
            assert channel == "collective" and j_from == j_to == 3.0
    assert saw_jump


def test_each_trajectory_reports_sharp_total_spin():
    p = SystemParams.from_upsilon_ratio(6, 1.0, 0.9, gamma_s=2.0)
    spec = EnsembleSpec(n_traj=12, master_seed=8,
                        t_grid=np.linspace(0, 1.5, 7))
    res = run_ensemble(spec, p, (np.pi / 2, np.pi), keep_trajectories=True)
    for rec in res.trajectories:
        j = rec.two_j / 2.0
        assert rec.rows[:, 9] == pytest.approx(j * (j + 1), abs=1e-8)


# -- ensembles -----------------------------------------------------------------

def test_ensemble_matches_brute_force_two_atoms():
    p = SystemParams.from_upsilon_ratio(2, 1.0, 0.5, gamma_s=2.0)
    tg = np.linspace(0.0, 1.0, 6)
    spec = EnsembleSpec(n_traj=2000, master_seed=99, t_grid=tg)
    res = run_ensemble(spec, p, (np.pi / 2, np.pi))
    oracle = brute_force_oracle(p, (np.pi / 2, np.pi), tg)
    for i in range(tg.size):
        target = _row_from_moments(oracle[i])
        gap = np.abs(res.raw_mean[i] - target)
        assert np.all(gap <= 3.0 * res.se[i] + 1e-10)


def test_standard_error_scales_as_inverse_sqrt():
    p = SystemParams.from_upsilon_ratio(4, 1.0, 0.9, gamma_s=1.0)
    tg = np.linspace(0.0, 0.5, 3)
    sizes = (100, 1000, 10000)
    med = []
    for n_traj in sizes:
        spec = EnsembleSpec(n_traj=n_traj, master_seed=5, t_grid=tg)
        res = run_ensemble(spec, p, (np.pi / 2, np.pi))
        med.append(np.median(res.se[1:]))
    slope = np.polyfit(np.log(sizes), np.log(med), 1)[0]
    assert slope == pytest.approx(-0.5, abs=0.05)


def test_ensemble_reduction_is_bitwise_worker_invariant():
    p = SystemParams.from_upsilon_ratio(4, 1.0, 0.9, gamma_s=2.0)
    spec = EnsembleSpec(n_traj=130, master_seed=17,
                        t_grid=np.linspace(0, 0.8, 5))
    base = run_ensemble(spec, p, (np.pi / 2, np.pi), workers=1)
    for workers in (4, 16):
        other = run_ensemble(spec, p, (np.pi / 2, np.pi), workers=workers)
        assert np.array_equal(base.raw_mean, other.raw_mean)
        assert np.array_equal(base.se, other.se)


def test_ensemble_moment_objects_mirror_raw_rows():
    p = SystemParams.from_upsilon_ratio(4, 0.5, 0.5, gamma_s=0.5)
    spec = EnsembleSpec(n_traj=16, master_seed=2,
                        t_grid=np.array([0.0, 0.3]))
    res = run_ensemble(spec, p, (np.pi / 2, np.pi))
    for i, mom in enumerate(res.moments):
        assert _row_from_moments(mom) == pytest.approx(res.raw_mean[i])
    back = moments_from_row(res.raw_mean[1])
    assert back.second == pytest.approx(back.second.T)


def test_ensemble_spec_validation():
    good = np.linspace(0, 1, 4)
    with pytest.raises(ValueError):
        EnsembleSpec(n_traj=0, master_seed=1, t_grid=good)
    with pytest.raises(ValueError):
        EnsembleSpec(n_traj=4, master_seed=1, t_grid=np.array([0.0, 0.0, 1.0]))
    with pytest.raises(ValueError):
        EnsembleSpec(n_traj=4, master_seed=1, t_grid=np.array([0.5]))
    with pytest.raises(ValueError):
        EnsembleSpec(n_traj=4, master_seed=-3, t_grid=good)


def test_initial_state_atom_count_must_match():
    p = SystemParams(n_atoms=4, chi=0.1, omega=1.0, gamma_c=1.0)
    spec = EnsembleSpec(n_traj=2, master_seed=0, t_grid=np.array([0.0, 0.1]))
    wrong = coherent_spin_state(6, 0.5, 0.5)
    with pytest.raises(ValueError):
        run_ensemble(spec, p, wrong)
