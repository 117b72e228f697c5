import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from supercap.cellmodel import (
    CellModel,
    CellParameters,
    CellState,
    ConcentrationError,
    ModelVariant,
    ParameterError,
    RegionParameters,
    build_mesh,
    derive_transport,
)

schemes = st.sampled_from(["sem", "fdm"])
variants = st.sampled_from(list(ModelVariant))


def model(scheme="sem", order=5, variant="linear", params=None, order_separator=None):
    params = params or CellParameters()
    return CellModel(params, build_mesh(params, scheme, order, order_separator), variant)


def perturbed_y(m, seed, amplitude=0.05):
    rng = np.random.default_rng(seed)
    y = m.pack(m.initial_state(1.0))
    scale = np.concatenate([np.full(m.n_c, m.params.c0), np.ones(m.n_q)])
    return y + amplitude * scale * rng.standard_normal(m.n_y)


# ---------------------------------------------------------------- parameters
def test_default_parameters():
    p = CellParameters()
    assert (p.electrode.epsilon, p.electrode.gamma, p.electrode.length, p.electrode.sigma) == (
        0.67, 2.3, 50e-6, 0.0521,
    )
    assert (p.separator.epsilon, p.separator.gamma, p.separator.length) == (0.6, 1.29, 25e-6)
    assert (p.aC, p.c0, p.kappa_inf, p.t_plus, p.area) == (42e6, 930.0, 0.067, 0.5, 2.747)


def test_current_density_standard_value():
    assert round(CellParameters().current_density(100.0), 3) == 36.403


def test_cell_capacitance_series_value():
    p = CellParameters()
    single = p.aC * p.electrode.length * p.area
    assert p.cell_capacitance == pytest.approx(1.0 / (1.0 / single + 1.0 / single))


def test_rc_time_matches_quoted_time_constant():
    assert CellParameters().rc_time == pytest.approx(7.4, rel=0.01)


@pytest.mark.parametrize("t_plus", [0.0, 1.0, 1.2, -0.1])
def test_transference_out_of_range(t_plus):
    with pytest.raises(ParameterError, match="t_plus"):
        CellParameters(t_plus=t_plus)


@pytest.mark.parametrize("name", ["c0", "aC", "area", "kappa_inf", "temperature"])
def test_non_positive_constants_rejected(name):
    with pytest.raises(ParameterError, match=name):
        CellParameters().with_changes(**{name: 0.0})


def test_region_validation():
    with pytest.raises((ParameterError, ValueError)):
        RegionParameters(epsilon=1.5, gamma=2.0, length=1e-5)
    with pytest.raises(ParameterError):
        CellParameters(electrode=RegionParameters(0.5, 2.0, 1e-5))


def test_variant_parse_aliases():
    assert ModelVariant.parse("LOG") is ModelVariant.LOGARITHMIC
    assert ModelVariant.parse("quadratic") is ModelVariant.QUADRATIC
    with pytest.raises(ValueError):
        ModelVariant.parse("cubic")


def test_derived_transport_relations():
    p = CellParameters(t_plus=0.7)
    tr = derive_transport(p)
    rt = p.gas_constant * p.temperature
    for region, params in ((tr.electrode, p.electrode), (tr.separator, p.separator)):
        assert region.kappa == pytest.approx(p.kappa_inf * params.epsilon / params.gamma)
        # kappa = F^2/(RT) * D/2 * (1/t- + 1/t+) * c0
        kappa_back = p.faraday**2 / rt * region.diffusivity / 2 * (1 / 0.3 + 1 / 0.7) * p.c0
        assert kappa_back == pytest.approx(region.kappa, rel=1e-12)
        assert region.beta * p.c0 == pytest.approx(region.kappa)
    assert tr.f == pytest.approx(p.faraday / rt)


def test_dilution_scales_diffusivity_and_slope():
    nominal = derive_transport(CellParameters())
    dilute = derive_transport(CellParameters(c0=250.0))
    assert dilute.electrode.diffusivity / nominal.electrode.diffusivity == pytest.approx(930 / 250)
    assert dilute.electrode.beta / nominal.electrode.beta == pytest.approx(930 / 250)
    assert dilute.electrode.kappa == nominal.electrode.kappa


# ---------------------------------------------------------------------- mesh
@given(scheme=schemes, ne=st.integers(2, 12), ns=st.integers(2, 12))
def test_mesh_layout(scheme, ne, ns):
    p = CellParameters()
    mesh = build_mesh(p, scheme, ne, ns)
    assert mesh.n_nodes == 2 * ne + ns + 1
    assert len(mesh.coordinates) == 2 * ne + ns + 3
    assert np.all(np.diff(mesh.x) > 0)
    assert mesh.x[0] == 0.0 and mesh.x[-1] == pytest.approx(p.total_length)
    assert mesh.interfaces == (p.electrode.length, p.electrode.length + p.separator.length)
    assert mesh.left.index[-1] == mesh.separator.index[0]
    assert mesh.separator.index[-1] == mesh.right.index[0]


def test_mesh_split_shares_interface_values():
    mesh = build_mesh(CellParameters(), "sem", 4)
    parts = mesh.split(mesh.x)
    assert parts[0][-1] == parts[1][0] and parts[1][-1] == parts[2][0]


# --------------------------------------------------------------- rest state
@pytest.mark.parametrize("variant", list(ModelVariant))
@pytest.mark.parametrize("scheme", ["sem", "fdm"])
def test_rest_state_is_steady_and_consistent(scheme, variant):
    m = model(scheme, 6, variant)
    s = m.initial_state(1.63)
    assert m.terminal_voltage(s) == pytest.approx(1.63, abs=1e-14)
    y = m.pack(s)
    ev = m.evaluate(y, 0.0)
    assert np.abs(ev.ydot).max() < 1e-9
    assert np.abs(ev.phi2).max() < 1e-12
    assert m.algebraic_residual(y, s.phi2, 0.0) < 1e-10


def test_state_roundtrip():
    m = model()
    y = perturbed_y(m, 1)
    s = m.state_from_y(y, 3.0)
    np.testing.assert_array_equal(m.pack(s), y)
    assert s.i_app == 3.0


# ------------------------------------------------------------- conservation
@given(scheme=schemes, order=st.integers(2, 14), variant=variants, seed=st.integers(0, 10**6), i=st.floats(-100, 100))
def test_salt_balance_is_exact(scheme, order, variant, seed, i):
    m = model(scheme, order, variant)
    ydot = m.evaluate(perturbed_y(m, seed), i).ydot
    lhs, src, scale = m.salt_balance(ydot)
    assert abs(lhs - src) <= 1e-11 * scale + 1e-300


@given(scheme=schemes, order=st.integers(2, 14), variant=variants, seed=st.integers(0, 10**6), i=st.floats(-100, 100))
def test_charge_balance_per_electrode(scheme, order, variant, seed, i):
    m = model(scheme, order, variant)
    ydot = m.evaluate(perturbed_y(m, seed), i).ydot
    ne = m.mesh.left.size
    qdot = ydot[m.n_c :]
    aC = m.params.aC
    assert aC * m.mesh.left.weights @ qdot[:ne] == pytest.approx(i, abs=1e-9 * (abs(i) + 1))
    assert aC * m.mesh.right.weights @ qdot[ne:] == pytest.approx(-i, abs=1e-9 * (abs(i) + 1))


@given(scheme=schemes, order=st.integers(2, 14), variant=variants, seed=st.integers(0, 10**6))
def test_algebraic_residual_vanishes(scheme, order, variant, seed):
    m = model(scheme, order, variant)
    y = perturbed_y(m, seed)
    ev = m.evaluate(y, 20.0)
    assert m.algebraic_residual(y, ev.phi2, 20.0) < 1e-10


# ----------------------------------------------------------------- variants
@given(seed=st.integers(0, 10**6), scheme=schemes)
def test_log_equals_linear_for_symmetric_transference(seed, scheme):
    lin, log = model(scheme, 6, "linear"), model(scheme, 6, "log")
    y = perturbed_y(lin, seed)
    np.testing.assert_allclose(log.evaluate(y, 30.0).ydot, lin.evaluate(y, 30.0).ydot, rtol=1e-12, atol=1e-12)


def test_quadratic_equals_linear_at_uniform_reference_concentration():
    lin, quad = model("sem", 6, "linear"), model("sem", 6, "quadratic")
    y = lin.pack(lin.initial_state(1.0))
    np.testing.assert_allclose(quad.evaluate(y, 36.4).phi2, lin.evaluate(y, 36.4).phi2, rtol=1e-12, atol=1e-15)


@given(seed=st.integers(0, 10**6), a=st.floats(-50, 50), b=st.floats(-50, 50))
def test_linear_phi2_is_affine_in_current(seed, a, b):
    m = model("fdm", 6)
    c, q = m.unpack(perturbed_y(m, seed))
    p0, pa, pb = (m.solve_phi2(c, q, i) for i in (0.0, a, b))
    lhs = pa - p0
    rhs = (pb - p0) * (a / b) if abs(b) > 1e-3 else lhs
    np.testing.assert_allclose(lhs, rhs, atol=1e-12 * (abs(a) + 1))


@pytest.mark.parametrize("variant", ["log", "quadratic"])
def test_non_positive_concentration_rejected(variant):
    m = model("sem", 4, variant)
    y = m.pack(m.initial_state(0.0))
    y[3] = -1.0
    with pytest.raises(ConcentrationError):
        m.evaluate(y, 1.0)


# ----------------------------------------------------------------- jacobian
@pytest.mark.parametrize("variant", list(ModelVariant))
@pytest.mark.parametrize("scheme", ["sem", "fdm"])
def test_jacobian_matches_finite_differences(scheme, variant):
    m = model(scheme, 5, variant, CellParameters(t_plus=0.7))
    y = perturbed_y(m, 7, 0.02)
    i = 25.0
    lin = m.linearise(y, i)
    f0 = m.evaluate(y, i)
    scale = np.concatenate([np.full(m.n_c, m.params.c0), np.ones(m.n_q)])
    fd = np.zeros_like(lin.jac)
    dv = np.zeros(m.n_y)
    for k in range(m.n_y):
        h = 1e-6 * scale[k]
        e = np.zeros(m.n_y)
        e[k] = h
        fp, fm = m.evaluate(y + e, i), m.evaluate(y - e, i)
        fd[:, k] = (fp.ydot - fm.ydot) / (2 * h)
        dv[k] = (m.voltage(y + e, fp.phi2) - m.voltage(y - e, fm.phi2)) / (2 * h)
    err = np.abs(fd - lin.jac) / (np.abs(lin.jac).max(axis=0) + 1e-30)
    assert err.max() < 1e-6
    np.testing.assert_allclose(lin.dv_dy, dv, atol=1e-7)
    di = (m.evaluate(y, i + 1e-3).ydot - m.evaluate(y, i - 1e-3).ydot) / 2e-3
    np.testing.assert_allclose(lin.dydot_di, di, rtol=1e-6, atol=1e-6 * np.abs(di).max())
    v_i = (m.voltage(y, m.evaluate(y, i + 1e-3).phi2) - m.voltage(y, m.evaluate(y, i - 1e-3).phi2)) / 2e-3
    assert lin.dv_di == pytest.approx(v_i, rel=1e-6)
    assert np.array_equal(m.voltage(y, f0.phi2), m.voltage(y, f0.phi2))


@pytest.mark.parametrize("scheme", ["sem", "fdm"])
@pytest.mark.parametrize("order", [2, 8, 20])
def test_spectrum_is_stable(scheme, order):
    m = model(scheme, order, "linear")
    lin = m.linearise(m.pack(m.initial_state(1.0)), 0.0)
    eig = np.linalg.eigvals(lin.jac)
    assert eig.real.max() < 1e-8 * np.abs(eig).max()


# ----------------------------------------------------------------- currents
@pytest.mark.parametrize("scheme, order", [("sem", 10), ("fdm", 40)])
def test_reconstructed_currents(scheme, order):
    m = model(scheme, order)
    i = 36.4
    y = perturbed_y(m, 3, 0.0)
    s = m.state_from_y(y, i)
    i1, i2 = m.reconstruct_currents(s)
    assert i1[0][0] == pytest.approx(i) and i1[0][-1] == 0.0
    assert i1[2][0] == 0.0 and i1[2][-1] == pytest.approx(i)
    np.testing.assert_allclose(i2[1], i, rtol=1e-8)
    assert i2[2][-1] == pytest.approx(0.0, abs=1e-9 * i)


def test_terminal_voltage_definition():
    m = model("fdm", 4)
    q = np.linspace(0.3, -0.2, m.n_q)
    phi2 = np.linspace(0.01, 0.05, m.n_c)
    s = CellState(np.full(m.n_c, 930.0), q, phi2)
    assert m.terminal_voltage(s) == pytest.approx((q[0] + phi2[0]) - (q[-1] + phi2[-1]))


# ------------------------------------------------------- worked values
def test_nominal_transport_values():
    p = CellParameters()
    tr = derive_transport(p)
    assert tr.electrode.kappa == pytest.approx(1.9517e-2, rel=1e-4)
    assert tr.f == pytest.approx(38.94, rel=1e-3)
    rt = p.gas_constant * p.temperature
    expected = tr.electrode.kappa * rt / (2 * p.faraday**2 * p.c0)
    assert tr.electrode.diffusivity == pytest.approx(expected, rel=1e-12)


def test_mesh_five_five_coordinates():
    mesh = build_mesh(CellParameters(), "sem", 5, 5)
    assert len(mesh.coordinates) == 18
    assert mesh.interfaces == pytest.approx((50e-6, 75e-6))
    assert mesh.x[-1] == pytest.approx(125e-6)


@pytest.mark.parametrize("scheme", ["sem", "fdm"])
def test_uncharged_initial_state(scheme):
    m = model(scheme, 5)
    s = m.initial_state(0.0)
    assert np.all(s.q == 0.0)
    assert np.all(s.c == 930.0)
    assert m.terminal_voltage(s) == 0.0
    i1, i2 = m.reconstruct_currents(s)
    for part in i1 + i2:
        np.testing.assert_allclose(part, 0.0, atol=1e-12)


@pytest.mark.parametrize("scheme", ["sem", "fdm"])
def test_separator_ohmic_slope(scheme):
    p = CellParameters()
    m = model(scheme, 6)
    i = 36.403
    c, q = m.unpack(m.pack(m.initial_state(1.0)))
    phi2 = m.mesh.split(m.solve_phi2(c, q, i))[1]
    x = m.mesh.split(m.mesh.x)[1]
    slope = np.diff(phi2) / np.diff(x)
    np.testing.assert_allclose(slope, -i / derive_transport(p).separator.kappa, rtol=1e-9)


def test_log_matches_linear_at_uniform_concentration():
    params = CellParameters(t_plus=0.75)
    lin = model("sem", 6, "linear", params)
    log = model("sem", 6, "log", params)
    y = lin.pack(lin.initial_state(1.0))
    np.testing.assert_allclose(log.evaluate(y, 36.4).ydot, lin.evaluate(y, 36.4).ydot, rtol=1e-9, atol=1e-9)


def test_quadratic_rhs_matches_linear_at_reference_concentration():
    lin, quad = model("fdm", 6, "linear"), model("fdm", 6, "quadratic")
    y = lin.pack(lin.initial_state(0.5))
    np.testing.assert_allclose(quad.evaluate(y, 20.0).ydot, lin.evaluate(y, 20.0).ydot, rtol=1e-9, atol=1e-9)


def test_voltage_invariant_under_phi2_shift():
    m = model("sem", 5)
    q = np.linspace(0.4, -0.1, m.n_q)
    phi2 = np.linspace(-0.02, 0.03, m.n_c)
    c = np.full(m.n_c, 930.0)
    v = m.terminal_voltage(CellState(c, q, phi2))
    assert m.terminal_voltage(CellState(c, q, phi2 + 0.37)) == pytest.approx(v, abs=1e-14)
