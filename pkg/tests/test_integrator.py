import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from supercap.cellmodel import CellModel, CellParameters, build_mesh
from supercap.integrator import (
    ConstantCurrent,
    ConstantVoltage,
    NewtonFailure,
    Protocol,
    Sinusoid,
    StepFailure,
    StepperConfig,
    TabulatedCurrent,
    integrate,
    measure_runtime,
    step_implicit,
    time_samples,
)

STANDARD = Protocol((ConstantCurrent(100.0, 23.2), ConstantVoltage(None, 6.0)))


def model(scheme="sem", order=5, variant="linear", params=None):
    params = params or CellParameters()
    return CellModel(params, build_mesh(params, scheme, order), variant)


@pytest.fixture(scope="module")
def standard_run():
    m = model("sem", 6)
    return m, integrate(m.initial_state(1.63), STANDARD, m, store_states=True)


# --------------------------------------------------------------- validation
@pytest.mark.parametrize(
    "kwargs",
    [
        dict(rel_tol=0.0),
        dict(abs_tol=-1.0),
        dict(min_step=0.0),
        dict(min_step=1.0, initial_step=0.1),
        dict(initial_step=10.0, max_step=1.0),
        dict(max_newton_iters=0),
    ],
)
def test_stepper_config_invariants(kwargs):
    with pytest.raises(ValueError):
        StepperConfig(**kwargs)


def test_segment_validation():
    with pytest.raises(ValueError):
        ConstantCurrent(1.0, 0.0)
    with pytest.raises(ValueError):
        ConstantVoltage(1.0, -1.0)
    with pytest.raises(ValueError):
        Sinusoid(0.0, 0.1, 0.0, 3)
    with pytest.raises(ValueError):
        Sinusoid(0.0, -0.1, 1.0, 3)
    with pytest.raises(ValueError):
        TabulatedCurrent((0.0, 0.0), (1.0, 1.0))


def test_sinusoid_current_and_duration():
    s = Sinusoid(2.0, 0.1, 0.5, 3)
    assert s.duration == 6.0
    assert s.current(0.5) == pytest.approx(2.1)
    assert s.current(1.5) == pytest.approx(1.9)


def test_protocol_boundaries():
    p = Protocol([ConstantCurrent(1.0, 2.0), ConstantVoltage(None, 3.0)])
    np.testing.assert_array_equal(p.boundaries(), [0.0, 2.0, 5.0])
    assert p.duration == 5.0 and isinstance(p.segments, tuple)


# ---------------------------------------------------------- single steps
def test_step_exponential_decay():
    cfg = StepperConfig()
    res = step_implicit(lambda t, y: -y, 0.0, np.array([1.0]), 0.1, cfg, np.array([[-1.0]]))
    err = abs(res.y[0] - math.exp(-0.1))
    assert err < 1e-4
    # the embedded estimate has the size of the true local error
    assert 0.1 * err < abs(res.error[0]) < 10 * err


def test_step_local_error_is_third_order():
    cfg = StepperConfig()
    errs = []
    for h in (0.1, 0.05):
        res = step_implicit(lambda t, y: -y, 0.0, np.array([1.0]), h, cfg, np.array([[-1.0]]))
        errs.append(abs(res.y[0] - math.exp(-h)))
    assert math.log2(errs[0] / errs[1]) == pytest.approx(3.0, abs=0.3)


def test_zero_rhs_leaves_state_unchanged():
    y = np.array([1.0, -2.0, 3.5])
    res = step_implicit(lambda t, y: np.zeros_like(y), 0.0, y, 0.7, StepperConfig(), np.zeros((3, 3)))
    np.testing.assert_array_equal(res.y, y)
    assert res.error_norm == 0.0


def test_stiff_scalar_against_explicit_reference():
    lam = 1e6
    f = lambda t, y: -lam * (y - np.cos(t))  # noqa: E731
    jac = np.array([[-lam]])
    t_end = 1e-3
    # explicit Euler with dt = 1e-8 (stable: dt * lam = 0.01)
    dt = 1e-8
    y_ref = 0.0
    for k in range(int(round(t_end / dt))):
        y_ref += dt * (-lam * (y_ref - math.cos(k * dt)))
    y, t, h = np.array([0.0]), 0.0, 1e-4  # h is 100x the stiff time scale
    cfg = StepperConfig(max_step=1.0)
    while t < t_end - 1e-15:
        res = step_implicit(f, t, y, h, cfg, jac)
        y, t = res.y, t + h
        assert np.all(np.isfinite(y))
    assert abs(y[0] - y_ref) < 1e-5


def test_algebraic_component_is_enforced():
    # y0' = -y0 + z, 0 = z - 2 y0
    f = lambda t, u: np.array([-u[0] + u[1], u[1] - 2 * u[0]])  # noqa: E731
    jac = np.array([[-1.0, 1.0], [-2.0, 1.0]])
    u = np.array([1.0, 2.0])
    res = step_implicit(f, 0.0, u, 0.1, StepperConfig(), jac, mass=np.array([1.0, 0.0]))
    assert res.y[1] == pytest.approx(2 * res.y[0], rel=1e-10)
    assert res.y[0] == pytest.approx(math.exp(0.1), rel=1e-4)


def test_newton_failure_is_raised():
    cfg = StepperConfig(max_newton_iters=1)
    with pytest.raises(NewtonFailure):
        step_implicit(lambda t, y: -(y**3), 0.0, np.array([5.0]), 1.0, cfg, np.array([[0.0]]))


# ---------------------------------------------------------- integration
def test_cc_current_density(standard_run):
    m, tr = standard_run
    cc = (tr.segment == 0) & (tr.times > 0)
    np.testing.assert_allclose(tr.current_density[cc], 100.0 / 2.747)
    assert round(tr.current_density[cc][0], 3) == 36.403
    assert tr.current_density[0] == 0.0 and tr.voltage[0] == pytest.approx(1.63)


def test_times_increase_and_boundaries_are_hit(standard_run):
    _, tr = standard_run
    assert np.all(np.diff(tr.times) > 0)
    assert 23.2 in tr.times.tolist()
    assert tr.times[-1] == pytest.approx(29.2, abs=1e-12)


def test_cv_segment_holds_voltage(standard_run):
    _, tr = standard_run
    cfg = StepperConfig()
    hold = tr.voltage[tr.index_of([23.2])[0]]
    cv = tr.segment == 1
    assert np.abs(tr.voltage[cv] - hold).max() < 10 * cfg.abs_tol


def test_cc_slope_matches_series_capacitance(standard_run):
    m, tr = standard_run
    window = (tr.segment == 0) & (tr.times >= 2 * 7.4)
    slope = np.polyfit(tr.times[window], tr.voltage[window], 1)[0]
    expected = 100.0 / m.params.cell_capacitance
    assert abs(slope - expected) < 0.05 * expected


def test_diagnostics_recorded(standard_run):
    _, tr = standard_run
    d = tr.diagnostics
    assert d["steps"] == len(tr.times) - 1
    assert d["newton_iterations"] >= 2 * d["steps"]
    assert d["max_algebraic_residual"] < 1e-8
    assert d["max_salt_balance_error"] < 1e-8
    assert d["wall_time"] > 0


def test_determinism():
    m = model("fdm", 6, "quadratic")
    a = integrate(m.initial_state(1.63), STANDARD, m)
    b = integrate(m.initial_state(1.63), STANDARD, m)
    np.testing.assert_array_equal(a.times, b.times)
    np.testing.assert_array_equal(a.voltage, b.voltage)
    np.testing.assert_array_equal(a.current_density, b.current_density)


def test_tolerance_tightening_changes_final_voltage_within_estimate():
    m = model("sem", 6)
    loose_cfg = StepperConfig(rel_tol=1e-5, abs_tol=1e-8)
    tight_cfg = StepperConfig(rel_tol=0.5e-5, abs_tol=0.5e-8)
    loose = integrate(m.initial_state(1.63), STANDARD, m, loose_cfg)
    tight = integrate(m.initial_state(1.63), STANDARD, m, tight_cfg)
    change = abs(loose.voltage[-1] - tight.voltage[-1])
    assert change < loose.diagnostics["voltage_error_estimate"]


@given(
    cuts=st.lists(st.floats(0.01, 4.0), min_size=1, max_size=4),
    t_eval=st.lists(st.floats(0.0, 10.0), max_size=5),
)
def test_event_exactness(cuts, t_eval):
    m = model("fdm", 3)
    segs = [ConstantCurrent(10.0 * (-1) ** k, d) for k, d in enumerate(cuts)]
    tr = integrate(m.initial_state(0.5), Protocol(segs), m, t_eval=t_eval)
    times = tr.times.tolist()
    for b in Protocol(segs).boundaries():
        assert b in times
    assert np.all(np.diff(tr.times) > 0)
    inside = [t for t in t_eval if t <= Protocol(segs).duration]
    tr.index_of(inside)


def test_cv_current_replayed_as_cc_reproduces_voltage():
    m = model("sem", 6)
    cfg = StepperConfig()
    cv = Protocol((ConstantCurrent(100.0, 23.2), ConstantVoltage(None, 6.0)))
    grid = 23.2 + np.linspace(0.0, 6.0, 601)
    tr = integrate(m.initial_state(1.63), cv, m, cfg, t_eval=grid, store_states=True)
    k = tr.index_of([23.2])[0]
    rows = tr.index_of(grid[1:])
    times = np.concatenate([[0.0], grid[1:] - 23.2])
    # current at the window start from the consistent CV solution
    hold = tr.voltage[k]
    y0 = tr.states[k]
    lin = m.linearise(y0, tr.current_density[k])
    i0 = tr.current_density[k] - (m.voltage(y0, m.evaluate(y0, tr.current_density[k]).phi2) - hold) / lin.dv_di
    currents = np.concatenate([[i0], tr.current_density[rows]]) * m.params.area
    replay = integrate(
        m.state_from_y(y0, 0.0), Protocol((TabulatedCurrent(tuple(times), tuple(currents)),)), m, cfg, t_eval=times
    )
    v_replay = replay.voltage[replay.index_of(times[1:])]
    tol = cfg.rel_tol * abs(hold) + cfg.abs_tol
    assert np.abs(v_replay - hold).max() < 10 * tol


def test_sinusoid_current_follows_drive():
    m = model("sem", 4)
    seg = Sinusoid(2.0, 0.5, 0.2, 2)
    t_eval = np.linspace(0, 10, 41)
    tr = integrate(m.initial_state(0.0), Protocol((seg,)), m, t_eval=t_eval)
    rows = tr.index_of(t_eval[1:])
    expected = [seg.current(t) / m.params.area for t in t_eval[1:]]
    np.testing.assert_allclose(tr.current_density[rows], expected, rtol=1e-12)


def test_extended_offset_set_point():
    m = model("sem", 5)
    prot = Protocol((ConstantCurrent(100.0, 130.0), ConstantVoltage(None, 70.0, offset=-1.08)))
    tr = integrate(m.initial_state(-2.37), prot, m)
    v130 = tr.voltage[tr.index_of([130.0])[0]]
    cv = tr.segment == 1
    np.testing.assert_allclose(tr.voltage[cv], v130 - 1.08, atol=1e-8)
    assert tr.times[-1] == pytest.approx(200.0, abs=1e-9)


def test_step_failure_reports_time_and_segment():
    m = model("sem", 4)
    cfg = StepperConfig(rel_tol=1e-14, abs_tol=1e-16, min_step=0.5, initial_step=0.5, max_step=0.5)
    with pytest.raises(StepFailure) as info:
        integrate(m.initial_state(1.63), STANDARD, m, cfg)
    assert info.value.segment == 0
    assert "segment 0" in str(info.value)


def test_empty_protocol():
    m = model("sem", 4)
    tr = integrate(m.initial_state(1.0), Protocol(()), m)
    assert tr.times.tolist() == [0.0]
    assert measure_runtime(lambda: integrate(m.initial_state(1.0), Protocol(()), m)) < 0.05


def test_measure_runtime_median_and_repeats():
    calls = []
    samples = time_samples(lambda: calls.append(1), repeats=5)
    assert len(samples) == 5 and len(calls) == 5
    m = model("sem", 4)
    a = measure_runtime(lambda: integrate(m.initial_state(1.63), STANDARD, m))
    b = measure_runtime(lambda: integrate(m.initial_state(1.63), STANDARD, m))
    assert 0.25 < a / b < 4.0
