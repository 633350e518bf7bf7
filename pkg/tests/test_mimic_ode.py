import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from mimicry.errors import DomainError, ModelValidityError, SolverError
from mimicry.mimic_ode import (
    PathTable,
    SolverOptions,
    Trajectory,
    check_survival_constraints,
    gronwall_gap_bound,
    solve_backward,
)
from mimicry.paths import SamplePath
from mimicry.shift_models import RegularityBudget, ShiftModel, closed_form_mimic

GVHD_NAMES = ["alive", "cmv", "gvhd"]


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), 1.0)))


def test_zero_psi_constant():
    p = SamplePath(1.0, [0.0, 0.3, 0.8], [[1, 0, 0], [1, 1, 1], [1, 0, 1]], GVHD_NAMES)
    tr = solve_backward(ShiftModel("GvHDMultiplicative", [0.0]), p, 3.7)
    assert np.all(tr.values == 3.7)


def test_example_treated_throughout():
    p = SamplePath(1.0, [0.0], [[1, 0, 1]], GVHD_NAMES)
    m = ShiftModel("GvHDMultiplicative", [math.log(2)])
    tr = solve_backward(m, p, 1.0)
    assert tr.values[0] == pytest.approx(2.0, rel=1e-12)
    assert tr.mesh[0] == 0.0


def test_held_at_y_after_event():
    p = SamplePath(1.0, [0.0, 0.2, 0.6], [[1, 0, 0], [1, 0, 1], [0, 0, 1]], GVHD_NAMES)
    m = ShiftModel("GvHDMultiplicative", [math.log(2)])
    tr = solve_backward(m, p, 0.6)
    after = tr.mesh >= 0.6
    assert after.sum() >= 2
    assert np.all(tr.values[after] == 0.6)
    # before the event the exact answer is t + int_t^0.6 2^{gvhd}
    assert tr.at(0.0) == pytest.approx(0.2 + 2 * 0.4, rel=1e-12)


def test_final_condition_exact():
    rng = np.random.default_rng(5)
    for _ in range(20):
        y = float(rng.normal())
        p = oracles.random_path(rng, ["treated", "pcp", "arm"])
        tr = solve_backward(ShiftModel("PCPProphylaxis", rng.uniform(-1, 1, 3), "Continuous"), p, y)
        assert tr.mesh[-1] == 1.0 and tr.values[-1] == y


FAMILIES = oracles.FAMILIES


@pytest.mark.parametrize("family", FAMILIES)
def test_closed_form_oracle(family):
    rng = np.random.default_rng(sum(map(ord, family)))
    worst = 0.0
    for i in range(100):
        m, p, y, ref = oracles.case(family, rng, i)
        tr = solve_backward(m, p, y)
        worst = max(worst, rel_err(tr.values, [ref(t) for t in tr.mesh]))
        if m.y_independent:
            assert rel_err([closed_form_mimic(m, p, y, t) for t in tr.mesh], [ref(t) for t in tr.mesh]) < 1e-13
    assert worst <= 1e-8


def test_delayed_effect_switch_is_located():
    p = SamplePath(1.0, [0.0], [[1.0]], ("treated",))
    m = ShiftModel("DelayedEffect", [math.log(2)], "Continuous", window=0.5)
    # D = -1 inside the window. Going back from X(1) = 1.2, X - t = 0.2 + 2(1 - t) hits 0.5 at t = 0.85.
    tr = solve_backward(m, p, 1.2)
    assert tr.report["branch_switches"] == 1
    assert tr.at(0.0) == pytest.approx(1.35, abs=1e-13)
    assert np.any(np.abs(tr.mesh - 0.85) < 1e-12)


@given(st.floats(-1.5, 1.5), st.floats(0.05, 2.5), st.floats(0.0, 0.5), st.integers(0, 2**31))
@settings(max_examples=60, deadline=None)
def test_monotone_in_y(psi, y1, dy, seed):
    rng = np.random.default_rng(seed)
    p = oracles.random_path(rng, ["treated", "pcp", "arm"])
    m = ShiftModel("PCPProphylaxis", [psi, 0.2, -0.1], "Continuous")
    t = np.linspace(0, 1, 11)
    lo, hi = solve_backward(m, p, y1).at(t), solve_backward(m, p, y1 + dy).at(t)
    assert np.all(lo <= hi + 1e-12)


def test_monotone_in_y_tabulated():
    yg, tg = np.linspace(-5, 5, 11), np.linspace(0, 1, 5)
    table = np.sin(yg)[:, None] * np.cos(3 * tg)[None, :]
    m = ShiftModel("UserTabulated", [0.8], "Continuous", table=table, y_grid=yg, t_grid=tg)
    p = SamplePath(1.0, [0.0], [[0.0]], ("bin",))
    ys = np.linspace(-3, 3, 25)
    starts = [solve_backward(m, p, y).values[0] for y in ys]
    assert np.all(np.diff(starts) > 0)


def test_survival_trajectories_stay_above_diagonal():
    rng = np.random.default_rng(11)
    for _ in range(200):
        y = float(rng.uniform(0.01, 2.0))
        p = oracles.random_path(rng, GVHD_NAMES, death=y)
        tr = solve_backward(ShiftModel("GvHDMultiplicative", [float(rng.uniform(-2, 2))]), p, y)
        rep = check_survival_constraints(tr, y)
        assert rep.passed, rep


def test_closed_form_trajectory_passes_constraints_with_zero_violation():
    p = SamplePath(1.0, [0.0, 0.4], [[1, 0, 0], [1, 0, 1]], GVHD_NAMES)
    m = ShiftModel("GvHDMultiplicative", [-0.5])
    mesh = np.linspace(0, 1, 21)
    y = 0.9
    vals = np.array([closed_form_mimic(m, p, y, t) for t in mesh])
    rep = check_survival_constraints(Trajectory(mesh, vals, y, "Survival"), y)
    assert rep.passed and rep.max_post_event_deviation == 0.0 and rep.min_margin > 0


def test_constraint_checker_cases():
    mesh = np.linspace(0, 1, 11)
    ok = check_survival_constraints(Trajectory(mesh, np.full(11, 1.0), 1.0, "Survival"), 1.0)
    assert ok.passed
    vals = np.full(11, 1.0)
    vals[5] = 0.3
    bad = check_survival_constraints(Trajectory(mesh, vals, 1.0, "Survival"), 1.0)
    assert not bad.passed and bad.worst_time == 0.5


def test_below_diagonal_raises():
    # a tabulated shift far above 1 drives the trajectory below t
    yg, tg = np.array([0.0, 5.0]), np.array([0.0, 1.0])
    m = ShiftModel("UserTabulated", [1.0], "Survival", table=np.full((2, 2), 3.0), y_grid=yg, t_grid=tg)
    p = SamplePath(1.0, [0.0], [[1, 0]], ("alive", "bin"))
    with pytest.warns(Warning):
        with pytest.raises(ModelValidityError):
            solve_backward(m, p, 0.9)


def test_step_budget():
    yg, tg = np.linspace(-5, 5, 3), np.array([0.0, 1.0])
    m = ShiftModel("UserTabulated", [1.0], "Continuous", table=np.outer(yg, [1.0, 1.0]), y_grid=yg, t_grid=tg)
    p = SamplePath(1.0, [0.0], [[0]], ("bin",))
    with pytest.raises(SolverError):
        solve_backward(m, p, 1.0, SolverOptions(max_steps=2, max_step=0.01))


def test_non_finite_outcome():
    p = SamplePath(1.0, [0.0], [[1, 0, 0]], GVHD_NAMES)
    with pytest.raises(DomainError):
        solve_backward(ShiftModel("GvHDMultiplicative", [0.1]), p, math.nan)


def test_trajectory_csv_and_report():
    p = SamplePath(1.0, [0.0, 0.5], [[1, 0, 0], [1, 0, 1]], GVHD_NAMES)
    tr = solve_backward(ShiftModel("GvHDMultiplicative", [0.3]), p, 2.0)
    buf = io.StringIO()
    tr.write_csv(buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "t,x" and len(lines) == len(tr.mesh) + 1
    assert '"steps"' in tr.report_json()
    with pytest.raises(DomainError):
        tr.at(1.5)


class TestGronwallBound:
    def traj(self):
        mesh = np.linspace(0, 2.0, 41)
        return Trajectory(mesh, np.ones_like(mesh), 1.0, "Continuous")

    def test_zero_gap(self):
        tr = self.traj()
        assert gronwall_gap_bound(tr, np.zeros_like(tr.mesh), lipschitz=3.0) == 0.0
        assert gronwall_gap_bound(tr, lambda x, t: np.zeros_like(t), lipschitz=3.0) == 0.0

    def test_constant_gap_no_growth(self):
        tr = self.traj()
        assert gronwall_gap_bound(tr, np.full_like(tr.mesh, 0.25), lipschitz=0.0) == pytest.approx(0.5)
        assert gronwall_gap_bound(tr, lambda x, t: np.full_like(t, 0.25), lipschitz=0.0) == pytest.approx(0.5)

    def test_exponential_weight(self):
        tr = self.traj()
        budget = RegularityBudget(eps=1.0, c1=1.0, c2=0.0, l1=0.0, l2=0.5, y1=0.0, y2=3.0)  # C = 0.5
        got = gronwall_gap_bound(tr, lambda x, t: np.ones_like(t), budget)
        assert got == pytest.approx(2.0 * (math.exp(1.0) - 1.0), rel=1e-3)

    def test_argument_errors(self):
        tr = self.traj()
        with pytest.raises(DomainError):
            gronwall_gap_bound(tr, np.zeros(3), lipschitz=1.0)
        with pytest.raises(DomainError):
            gronwall_gap_bound(tr, np.zeros_like(tr.mesh))
        with pytest.raises(DomainError):
            gronwall_gap_bound(tr, np.zeros_like(tr.mesh), lipschitz=-1.0)


class TestPathTable:
    def paths(self, n=50, seed=1):
        rng = np.random.default_rng(seed)
        ys = rng.uniform(0.05, 2.5, n)
        return [oracles.random_path(rng, GVHD_NAMES, death=y) for y in ys], ys

    @pytest.mark.parametrize("psi", [-1.0, 0.0, math.log(2)])
    def test_matches_solver(self, psi):
        paths, ys = self.paths()
        m = ShiftModel("GvHDMultiplicative", [psi])
        times = np.linspace(0, 1, 9)
        bulk = PathTable(paths, ys).mimic(m, times)
        for i, (p, y) in enumerate(zip(paths, ys)):
            ref = [oracles.gvhd_survival(p, psi, y, t) for t in times]
            assert rel_err(bulk[i], ref) < 1e-13
            assert rel_err(solve_backward(m, p, y).at(times), ref) < 1e-8

    def test_continuous_kind(self):
        rng = np.random.default_rng(2)
        paths = [oracles.random_path(rng, ["treated", "pcp", "arm"]) for _ in range(30)]
        ys = rng.normal(size=30)
        psi = [0.4, -0.3, 0.1]
        m = ShiftModel("PCPProphylaxis", psi, "Continuous")
        times = np.linspace(0, 1, 5)
        bulk = PathTable(paths, ys).mimic(m, times)
        ref = [[oracles.pcp_continuous(p, psi, y, t) for t in times] for p, y in zip(paths, ys)]
        assert rel_err(bulk, ref) < 1e-13

    def test_validation(self):
        paths, ys = self.paths(3)
        with pytest.raises(DomainError):
            PathTable([], [])
        with pytest.raises(DomainError):
            PathTable(paths, ys[:2])
        other = SamplePath(2.0, [0.0], [[1, 0, 0]], GVHD_NAMES)
        with pytest.raises(DomainError):
            PathTable([paths[0], other], [1.0, 1.0])
        with pytest.raises(DomainError):
            PathTable(paths, ys).mimic(ShiftModel("DelayedEffect", [0.1]), [0.5])
