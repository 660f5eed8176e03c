import math

import numpy as np
import pytest

from dickesim.analysis import min_transient_squeezing
from dickesim.config import SweepSpec
from dickesim.cumulant import evolve_cumulant, init_from_css
from dickesim.params import SystemParams
from dickesim.sweep import parse_initial, run_sweep, write_sweep


def test_initial_state_aliases():
    assert parse_initial("") == (math.pi / 2, math.pi)
    assert parse_initial("minus_x") == (math.pi / 2, math.pi)
    assert parse_initial("css 0.5 1.5") == (0.5, 1.5)
    with pytest.raises(ValueError, match="unknown initial state"):
        parse_initial("sideways")


def test_single_point_sweep_matches_direct_run():
    base = {"n_atoms": 200, "gamma_s": 20.0, "chi": 1.0,
            "t_max": 0.5, "t_points": 101}
    spec = SweepSpec(axes=[("upsilon_ratio", [0.9])], solver="cumulant",
                     base=base)
    row = run_sweep(spec)[0]
    assert row.status == "ok"
    p = SystemParams.from_upsilon_ratio(200, 1.0, 0.9, gamma_s=20.0)
    t = np.linspace(0.0, 0.5, 101)
    moments = evolve_cumulant(init_from_css(math.pi / 2, math.pi), p, t,
                              rtol=1e-9)
    from dickesim.dicke import squeezing_parameter
    xi2 = [squeezing_parameter(m, 200) for m in moments]
    ref, t_ref = min_transient_squeezing(t, xi2, t_min=spec.t_min)
    assert row.values["xi2_min"] == pytest.approx(ref, rel=1e-9)
    assert row.values["t_at_min"] == pytest.approx(t_ref, abs=1e-12)


def test_meanfield_sweep_shows_branch_termination():
    ratios = np.linspace(0.3, 1.2, 46)
    spec = SweepSpec(axes=[("upsilon_ratio", ratios)], solver="meanfield",
                     base={"n_atoms": 10000, "chi": 1.0})
    rows = run_sweep(spec)
    assert all(r.status == "ok" for r in rows)
    # the inverted (z <= -1/2) branch terminates at Upsilon_c' = Upsilon_c
    # / sqrt(2); past it the stable point jumps to the depolarized branch
    deep = [r.point["upsilon_ratio"] for r in rows if r.values["z"] < -0.4]
    shallow = [r.point["upsilon_ratio"] for r in rows
               if abs(r.values["z"]) < 0.1]
    edge = 1.0 / math.sqrt(2.0)
    step = ratios[1] - ratios[0]
    assert abs(max(deep) - edge) <= step
    assert abs(min(shallow) - edge) <= step
    assert all(r.values["stable"] == 1.0 for r in rows)


def test_failures_stay_in_their_row():
    spec = SweepSpec(axes=[("gamma_s", [0.0, 2.0])], solver="collective",
                     base={"n_atoms": 20, "chi": 1.0, "upsilon_ratio": 0.9,
                           "t_max": 0.3, "t_points": 31})
    rows = run_sweep(spec)
    assert [r.status for r in rows] == ["ok", "error"]
    assert rows[1].message  # the reason is recorded in-row


def test_oracle_rejects_large_systems_in_row():
    spec = SweepSpec(axes=[("upsilon_ratio", [0.5])], solver="oracle",
                     base={"n_atoms": 20, "chi": 1.0, "t_max": 0.1,
                           "t_points": 11})
    row = run_sweep(spec)[0]
    assert row.status == "error"
    assert "desk-scale" in row.message


def test_mcwf_point_carries_error_bars():
    spec = SweepSpec(axes=[("upsilon_ratio", [0.9])], solver="mcwf",
                     base={"n_atoms": 4, "chi": 1.0, "gamma_s": 2.0,
                           "t_max": 0.4, "t_points": 41, "n_traj": 64,
                           "master_seed": 7, "rtol": 1e-8})
    row = run_sweep(spec)[0]
    assert row.status == "ok"
    assert row.values["n_traj"] == 64
    assert math.isfinite(row.values["se_xi2_min"])
    assert row.values["se_xi2_min"] > 0


def test_sweep_file_and_worker_independence(tmp_path):
    spec = SweepSpec(axes=[("chi", [0.0, 1.0]), ("upsilon_ratio", [0.5, 0.9])],
                     solver="cumulant",
                     base={"n_atoms": 100, "gamma_s": 10.0, "t_max": 0.3,
                           "t_points": 61},
                     output=str(tmp_path / "sweep.csv"))
    rows1 = run_sweep(spec, workers=1)
    rows2 = run_sweep(spec, workers=2)
    for a, b in zip(rows1, rows2):
        assert a.point == b.point and a.status == b.status
        assert a.values == b.values
    text = (tmp_path / "sweep.csv").read_text(encoding="utf-8").splitlines()
    header = [ln for ln in text if ln.startswith("#")]
    assert any(ln.startswith("# solver: cumulant") for ln in header)
    body = [ln for ln in text if not ln.startswith("#")]
    assert body[0].startswith("index,chi,upsilon_ratio,status,xi2_min")
    assert len(body) == 5  # column line + four grid points
