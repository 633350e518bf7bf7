import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mimicry.errors import DomainError, ModelValidityWarning
from mimicry.paths import SamplePath
from mimicry.shift_models import (
    RegularityBudget,
    ShiftModel,
    gronwall_constant,
    shift,
    survival_limit_at_diagonal,
)

GVHD_ON = SamplePath(1.0, [0.0], [[1, 0, 1]], ("alive", "cmv", "gvhd"))
GVHD_OFF = SamplePath(1.0, [0.0], [[1, 0, 0]], ("alive", "cmv", "gvhd"))
DEAD = SamplePath(1.0, [0.0, 0.3], [[1, 0, 1], [0, 0, 1]], ("alive", "cmv", "gvhd"))
PCP_PATH = SamplePath(1.0, [0.0, 0.5], [[1, 1, 0, 1], [1, 1, 1, 1]], ("alive", "treated", "pcp", "arm"))
TREATED = SamplePath(1.0, [0.0], [[1, 1]], ("alive", "treated"))


def tabulated(psi=1.0, kind="Survival"):
    yg = np.array([0.0, 1.0, 2.0])
    tg = np.array([0.0, 1.0])
    table = np.array([[[0.1, 0.2], [0.3, 0.4], [0.5, 0.6]], [[-0.1, -0.2], [-0.3, -0.4], [-0.5, -0.6]]])
    return ShiftModel("UserTabulated", [psi], kind, table=table, y_grid=yg, t_grid=tg)


BIN_PATH = SamplePath(1.0, [0.0, 0.5], [[1, 0], [1, 1]], ("alive", "bin"))


def test_gvhd_value():
    m = ShiftModel("GvHDMultiplicative", [math.log(2)])
    assert shift(m, 0.8, 0.5, GVHD_ON) == pytest.approx(-1.0, abs=1e-15)
    assert shift(m, 0.8, 0.5, GVHD_OFF) == 0.0


def test_pcp_value():
    m = ShiftModel("PCPProphylaxis", [0.4, -0.3, 0.1])
    assert shift(m, 2.0, 0.2, PCP_PATH) == pytest.approx(1 - math.exp(0.4 + 0.1))
    assert shift(m, 2.0, 0.7, PCP_PATH) == pytest.approx(1 - math.exp(0.4 - 0.3 + 0.1))


@pytest.mark.parametrize(
    "model, path",
    [
        (ShiftModel("GvHDMultiplicative", [0.0]), GVHD_ON),
        (ShiftModel("PCPProphylaxis", [0.0, 0.0, 0.0]), PCP_PATH),
        (ShiftModel("DelayedEffect", [0.0]), TREATED),
        (tabulated(0.0), BIN_PATH),
    ],
)
@pytest.mark.parametrize("y, t", [(0.9, 0.1), (3.0, 0.5), (1.0, 1.0)])
def test_zero_psi_gives_zero(model, path, y, t):
    assert shift(model, y, t, path) == 0.0


def test_delayed_effect_window():
    m = ShiftModel("DelayedEffect", [math.log(2)])
    p = SamplePath(10.0, [0.0], [[1, 1]], ("alive", "treated"))
    assert shift(m, 10.0, 2.0, p) == 0.0  # y - t = 8 > 5
    assert shift(m, 6.0, 2.0, p) == pytest.approx(-1.0)
    assert shift(m, 7.0, 2.0, p) == pytest.approx(-1.0)  # boundary is inside the window


def test_tabulated_bilinear():
    m = tabulated(2.0, "Continuous")
    # bin 0, (y, t) = (0.5, 0.25): bilinear in the 2x2 cell
    expected = 2.0 * (0.75 * (0.5 * 0.1 + 0.5 * 0.3) + 0.25 * (0.5 * 0.2 + 0.5 * 0.4))
    assert shift(m, 0.5, 0.25, BIN_PATH) == pytest.approx(expected)
    # bin 1 after the jump at 0.5
    assert shift(m, 1.0, 0.5, BIN_PATH) == pytest.approx(2.0 * (-0.35))


def test_survival_guard_below_diagonal_and_dead():
    m = ShiftModel("GvHDMultiplicative", [1.2])
    assert shift(m, 0.4, 0.5, GVHD_ON) == 0.0
    assert shift(m, 0.9, 0.5, DEAD) == 0.0
    assert shift(m, 0.9, 0.2, DEAD) != 0.0


@given(st.floats(-2, 2), st.floats(0, 1), st.floats(0, 3))
@settings(max_examples=100, deadline=None)
def test_survival_guard_property(psi, t, y):
    for model, path in (
        (ShiftModel("GvHDMultiplicative", [psi]), GVHD_ON),
        (ShiftModel("DelayedEffect", [psi]), TREATED),
        (tabulated(psi), BIN_PATH),
    ):
        if y < t:
            assert shift(model, y, t, path) == 0.0
    if t >= 0.3:
        assert shift(ShiftModel("GvHDMultiplicative", [psi]), y, t, DEAD) == 0.0


@given(st.floats(0.0, 1.0), st.floats(0.0, 0.99), st.floats(0.0, 0.99))
@settings(max_examples=60, deadline=None)
def test_lipschitz_in_y_on_branch(t, a, b):
    m = ShiftModel("GvHDMultiplicative", [0.7])
    ya, yb = t + 0.01 + a, t + 0.01 + b
    assert shift(m, ya, t, GVHD_ON) == shift(m, yb, t, GVHD_ON)
    d = ShiftModel("DelayedEffect", [0.7], window=0.5)
    # branch inside the window and branch outside it are each constant
    assert shift(d, t + 0.1 + 0.3 * a, t, TREATED) == shift(d, t + 0.1 + 0.3 * b, t, TREATED)
    assert shift(d, t + 0.6 + a, t, TREATED) == shift(d, t + 0.6 + b, t, TREATED) == 0.0


@pytest.mark.parametrize("family", ["GvHDMultiplicative", "DelayedEffect", "UserTabulated"])
def test_continuous_in_psi(family):
    grid = np.linspace(-1.5, 1.5, 31)
    path = {"GvHDMultiplicative": GVHD_ON, "DelayedEffect": TREATED, "UserTabulated": BIN_PATH}[family]
    make = (lambda p: tabulated(p)) if family == "UserTabulated" else (lambda p: ShiftModel(family, [p]))
    for p in grid:
        h = 1e-7
        a, b = shift(make(p - h), 0.8, 0.4, path), shift(make(p + h), 0.8, 0.4, path)
        assert abs(a - b) < 1e-5


def test_pcp_continuous_in_psi():
    rng = np.random.default_rng(3)
    for _ in range(30):
        psi = rng.uniform(-1.5, 1.5, 3)
        d = rng.normal(size=3) * 1e-7
        a = shift(ShiftModel("PCPProphylaxis", psi), 1.5, 0.7, PCP_PATH)
        b = shift(ShiftModel("PCPProphylaxis", psi + d), 1.5, 0.7, PCP_PATH)
        assert abs(a - b) < 1e-5


def test_diagonal_limit_nonpositive_psi():
    for psi in (-1.0, -0.2, 0.0):
        m = ShiftModel("GvHDMultiplicative", [psi])
        val = survival_limit_at_diagonal(m, 0.5, GVHD_ON)
        assert val == pytest.approx(1 - math.exp(psi))
        assert 0.0 <= val < 1.0


def test_diagonal_limit_tabulated_extrapolates():
    m = tabulated(1.0)
    # bin 0 at t = 0.25: table along y = t is smooth, the limit equals the interpolant on the diagonal
    expected = 0.75 * (0.75 * 0.1 + 0.25 * 0.3) + 0.25 * (0.75 * 0.2 + 0.25 * 0.4)
    assert survival_limit_at_diagonal(m, 0.25, BIN_PATH) == pytest.approx(expected, abs=1e-9)


def test_diagonal_limit_above_one_warns():
    m = ShiftModel("PCPProphylaxis", [-1.0, 0.0, 0.0])
    p = SamplePath(1.0, [0.0], [[1, 1, 0, 0]], ("alive", "treated", "pcp", "arm"))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        survival_limit_at_diagonal(m, 0.5, p)  # 1 - e^-1 < 1, no warning
    big = tabulated(5.0)
    with pytest.warns(ModelValidityWarning):
        survival_limit_at_diagonal(big, 0.9, SamplePath(1.0, [0.0], [[1, 0]], ("alive", "bin")))


@pytest.mark.parametrize(
    "eps, l1, l2, c2, expected",
    [(0.1, 1, 1, 1, 110.0), (1.0, 0, 0, 7.3, 0.0), (0.5, 2, 3, 1, 14.0)],
)
def test_gronwall_constant(eps, l1, l2, c2, expected):
    b = RegularityBudget(eps=eps, c1=1.0, c2=c2, l1=l1, l2=l2, y1=0.0, y2=1.0)
    assert gronwall_constant(b) == pytest.approx(expected, rel=1e-14)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(eps=0.0, c1=1, c2=1, l1=1, l2=1, y1=0, y2=1),
        dict(eps=0.1, c1=-1, c2=1, l1=1, l2=1, y1=0, y2=1),
        dict(eps=0.1, c1=1, c2=1, l1=1, l2=1, y1=1, y2=1),
    ],
)
def test_budget_validation(kwargs):
    with pytest.raises(DomainError):
        RegularityBudget(**kwargs)


def test_survival_budget_support():
    b = RegularityBudget(0.1, 1, 1, 1, 1, 0.0, 0.5)
    with pytest.raises(DomainError):
        b.check_outcome("Survival", 1.0)
    b.check_outcome("Continuous", 1.0)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(family="Nope", psi=[1.0]),
        dict(family="PCPProphylaxis", psi=[1.0]),
        dict(family="GvHDMultiplicative", psi=[math.nan]),
        dict(family="GvHDMultiplicative", psi=[1.0], outcome_kind="Binary"),
        dict(family="UserTabulated", psi=[1.0]),
    ],
)
def test_model_validation(kwargs):
    with pytest.raises(DomainError):
        ShiftModel(**kwargs)


@pytest.mark.parametrize(
    "model, path",
    [
        (ShiftModel("GvHDMultiplicative", [0.3], budget=RegularityBudget(0.1, 1, 1, 1, 1, 0, 10)), GVHD_ON),
        (ShiftModel("PCPProphylaxis", [0.4, -0.3, 0.1], "Continuous"), PCP_PATH),
        (ShiftModel("DelayedEffect", [0.2], window=2.5), TREATED),
        (tabulated(0.7), BIN_PATH),
    ],
)
def test_json_round_trip(model, path):
    back = ShiftModel.from_json(model.to_json())
    assert back.to_dict() == model.to_dict()
    assert shift(back, 0.9, 0.6, path) == shift(model, 0.9, 0.6, path)
