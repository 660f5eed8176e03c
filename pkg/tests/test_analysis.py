import numpy as np
import pytest

from dickesim.analysis import (SeriesTooShort, detect_crossing,
                               min_transient_squeezing,
                               squeezing_change_point)
from dickesim.collective import CollectiveDensity, evolve_collective
from dickesim.dicke import squeezing_parameter
from dickesim.params import SystemParams, n_critical


def test_monotone_series_minimum_sits_at_window_start():
    t = np.linspace(0.0, 1.0, 101)
    xi2 = 0.5 + t  # strictly increasing
    val, at = min_transient_squeezing(t, xi2, t_min=0.25)
    assert at == t[t >= 0.25][0]
    assert val == 0.5 + at


def test_dip_before_window_is_ignored_for_the_later_dip():
    t = np.linspace(0.0, 1.0, 1001)
    xi2 = np.ones_like(t)
    xi2[t < 0.002] = 0.3          # deep dip, but before the window opens
    xi2[np.abs(t - 0.5) < 0.01] = 0.7
    val, at = min_transient_squeezing(t, xi2, t_min=0.003)
    assert val == pytest.approx(0.7)
    assert abs(at - 0.5) <= 0.011


def test_series_ending_before_window_raises():
    t = np.linspace(0.0, 0.002, 20)
    with pytest.raises(SeriesTooShort, match="too short"):
        min_transient_squeezing(t, np.ones_like(t), t_min=0.003)


def test_nan_samples_are_skipped():
    t = np.linspace(0.0, 1.0, 11)
    xi2 = np.ones(11)
    xi2[5] = np.nan
    xi2[7] = 0.8
    val, at = min_transient_squeezing(t, xi2, t_min=0.0)
    assert (val, at) == (0.8, t[7])


def test_flat_collective_series_never_crosses():
    p = SystemParams.from_upsilon_ratio(100, 1.0, 0.5)
    t = np.linspace(0.0, 2.0, 50)
    assert detect_crossing(t, np.full_like(t, 100.0), p) is None


def test_linear_decay_crossing_is_interpolated():
    p = SystemParams.from_upsilon_ratio(100, 1.0, 0.9)
    t = np.linspace(0.0, 1.0, 13)   # crossing falls between samples
    ne = 100.0 * (1.0 - t)
    t_star = detect_crossing(t, ne, p)
    # analytic: 100 (1 - t) = N_c
    assert t_star == pytest.approx(1.0 - n_critical(p) / 100.0, abs=1e-12)


def test_series_starting_below_threshold_crosses_immediately():
    p = SystemParams.from_upsilon_ratio(100, 1.0, 0.9)
    t = np.linspace(0.5, 1.0, 6)
    ne = np.full_like(t, 10.0)
    assert detect_crossing(t, ne, p) == 0.5


def test_change_point_finds_synthetic_kink():
    t = np.linspace(0.0, 1.0, 201)
    log_xi2 = np.where(t < 0.6, -1.0, -1.0 + 8.0 * (t - 0.6))
    rng = np.random.default_rng(5)
    log_xi2 = log_xi2 + 0.01 * rng.standard_normal(t.size)
    found = squeezing_change_point(t, np.exp(log_xi2), window=3)
    assert abs(found - 0.6) <= 3 * (t[1] - t[0])


def test_change_point_window_needs_enough_samples():
    t = np.linspace(0.0, 1.0, 6)
    with pytest.raises(SeriesTooShort):
        squeezing_change_point(t, np.ones_like(t), window=3)


def test_overcritical_collective_run_reports_no_late_squeezing():
    # gamma_s = 0 above the critical drive: any early squeezing is abruptly
    # lost, so the windowed minimum past the transient stays at or above 1
    p = SystemParams.from_upsilon_ratio(60, 1.0, 1.5)
    t = np.linspace(0.0, 6.0, 121)
    rho0 = CollectiveDensity.from_angles(60, np.pi / 2, np.pi)
    moments = evolve_collective(rho0, p, t, rtol=1e-8, atol=1e-10)
    xi2 = np.array([squeezing_parameter(m, 60) for m in moments])
    val, _ = min_transient_squeezing(t, xi2, t_min=1.0)
    assert val >= 1.0 - 1e-6
