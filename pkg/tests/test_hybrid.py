import numpy as np
import pytest
from hypothesis import given, strategies as st

from neuralme.cardio import build_model, inflow_input
from neuralme.errors import DimensionMismatch, ParseError, ValidationError
from neuralme.hybrid import (AffineScaler, HybridModel, HybridTopology, ParameterVector, build_hybrid,
                             build_topology, fit_scalers, hybrid_rhs, hybrid_vjp, init_params, load_checkpoint,
                             read_checkpoint, save_checkpoint)
from neuralme.me_interface import jvp, jvp_fd, vjp
from neuralme.odesolve import SolverConfig, integrate

from oracles import relerr


def randomized(desk, variant, rng, skip=True, scale=0.3, data=None):
    inner = build_model(desk, "simple_" + variant)
    m = build_hybrid(inner, variant, seed=3, skip=skip)
    if data is not None:
        m.scalers = fit_scalers(data, m.topology)
    m.params.flat[:] = scale * rng.standard_normal(m.params.size)
    return m


def state_near_equilibrium(m, rng, spread=0.05):
    inner = m.inner
    x = inner.steady_state(inner.heart.mean_volume_flow * inner.fluid.density)
    return x * (1 + spread * rng.standard_normal(x.size))


# -- topology ----------------------------------------------------------------
@given(st.integers(1, 60), st.integers(1, 20), st.sampled_from(["C", "LC", "c", "lc"]), st.integers(1, 64))
def test_topology_counts(n_wk, n_obs, variant, hidden):
    t = build_topology(n_wk, n_obs, variant, hidden)
    a = n_obs * (2 if variant.upper() == "LC" else 1)
    assert t.n_art == a and t.n_states == n_wk + a
    assert len(t.layers) == 12
    assert t.n_params == a + 2 * a * hidden + hidden + a
    assert [lay.activation for lay in t.layers if lay.kind == "dense"] == ["tanh", ""]


def test_topology_rejects_bad_input():
    with pytest.raises(ValidationError):
        build_topology(4, 5, "RLC")
    with pytest.raises(ValidationError):
        build_topology(0, 5, "C")


# -- parameters and scalers -----------------------------------------------------
def test_parameter_layout_and_groups():
    t = build_topology(4, 5, "C", 7)
    p = ParameterVector(t, np.arange(float(t.n_params)))
    assert p.state_bias.shape == (5,) and p.dense1_weights.shape == (7, 5)
    assert p.dense2_weights.shape == (5, 7) and p.dense2_bias.shape == (5,)
    assert p.state_bias[0] == 0.0 and p.dense1_weights[0, 0] == 5.0
    m_s, m_d = p.group_mask("state_ann"), p.group_mask("derivative_ann")
    assert not np.any(m_s & m_d) and np.all(m_s | m_d)
    p.freeze("derivative_ann")
    np.testing.assert_array_equal(p.trainable_mask(), m_s)
    q = p.copy()
    q.flat[0] = 99.0
    assert p.flat[0] == 0.0 and q.frozen["derivative_ann"]
    with pytest.raises(DimensionMismatch):
        ParameterVector(t, np.zeros(3))
    with pytest.raises(ValueError):
        p.freeze("everything")


def test_init_is_seeded_glorot_with_zero_output():
    t = build_topology(46, 10, "C", 30)
    p1, p2, p3 = init_params(t, 0), init_params(t, 0), init_params(t, 1)
    np.testing.assert_array_equal(p1.flat, p2.flat)
    assert not np.array_equal(p1.flat, p3.flat)
    bound = np.sqrt(6.0 / 40.0)
    assert np.all(np.abs(p1.dense1_weights) <= bound)
    assert not p1.state_bias.any() and not p1.dense2_weights.any() and not p1.dense2_bias.any()


@given(st.lists(st.floats(-1e4, 1e4), min_size=2, max_size=30))
def test_scaler_post_inverts_pre(values):
    s = AffineScaler.fit(np.array(values).reshape(-1, 1))
    x = np.array(values)[:, None]
    np.testing.assert_allclose(s.post(s.pre(x)), x, atol=1e-9 * (1 + np.abs(x).max()))


def test_constant_channel_is_flagged():
    s = AffineScaler.fit(np.column_stack([np.ones(5), np.arange(5.0)]))
    assert s.degenerate == (0,)
    assert s.scale[0] == 1.0
    with pytest.raises(ValidationError):
        AffineScaler([0.0], [0.0])


def test_fit_scalers_shapes(data_a):
    t = build_topology(4, 5, "LC")
    sc = fit_scalers(data_a, t, np.zeros((data_a.n_samples, 5)))
    assert sc.state.size == 10 and sc.deriv.size == 10
    assert set(sc.degenerate["state"]) == set(range(5, 10))
    with pytest.raises(DimensionMismatch):
        fit_scalers(data_a, build_topology(4, 3, "C"))


# -- forward behaviour --------------------------------------------------------
@pytest.mark.parametrize("variant", ["C", "LC"])
def test_fresh_model_equals_inner(desk, rng, variant):
    inner = build_model(desk, "simple_" + variant)
    m = build_hybrid(inner, variant, seed=5)
    x = state_near_equilibrium(m, rng)
    np.testing.assert_array_equal(m.derivatives(0.1, x, [0.3]), inner.derivatives(0.1, x, [0.3]))
    np.testing.assert_array_equal(hybrid_rhs(m, 0.1, x, [0.3]), inner.derivatives(0.1, x, [0.3]))


def test_bypass_ignores_parameters(desk, rng):
    m = randomized(desk, "C", rng)
    x = state_near_equilibrium(m, rng)
    m.bypass_mode = True
    np.testing.assert_array_equal(m.derivatives(0.0, x, [0.1]), m.inner.derivatives(0.0, x, [0.1]))
    _, _, g = hybrid_vjp(m, 0.0, x, [0.1], np.ones(m.n_states))
    assert not g.any()


def test_state_bias_shifts_the_inner_input(desk, rng):
    m = build_hybrid(build_model(desk, "simple_C"), "C")
    x = state_near_equilibrium(m, rng)
    b = np.linspace(-0.5, 0.5, m.topology.n_art)
    m.params.state_bias[...] = b
    shifted = x.copy()
    shifted[m.partition.art_index] += b / m.scalers.state.scale
    np.testing.assert_allclose(m.derivatives(0.0, x, [0.2]), m.inner.derivatives(0.0, shifted, [0.2]), rtol=1e-13)


def test_no_skip_outputs_only_the_network(desk, rng):
    m = randomized(desk, "C", rng, skip=False)
    m.params.dense2_weights[...] = 0.0
    m.params.dense2_bias[...] = 0.0
    x = state_near_equilibrium(m, rng)
    out = m.derivatives(0.0, x, [0.2])
    np.testing.assert_allclose(out[m.partition.art_index], m.scalers.deriv.shift)
    np.testing.assert_array_equal(out[m.partition.wk_index],
                                  m.inner.derivatives(0.0, m._shifted(x, m.params.state_bias), [0.2])[
                                      m.partition.wk_index])


def test_partition_mismatch_rejected(desk):
    inner = build_model(desk, "simple_C")
    with pytest.raises(DimensionMismatch):
        HybridModel(inner, build_topology(4, 5, "LC"))


# -- derivatives ----------------------------------------------------------------
@pytest.mark.parametrize("variant,skip", [("C", True), ("LC", True), ("C", False)])
def test_jvp_and_vjp_consistent(desk, data_a, rng, variant, skip):
    m = randomized(desk, variant, rng, skip=skip, data=data_a if variant == "C" else None)
    x = state_near_equilibrium(m, rng)
    v, w = rng.standard_normal(m.n_states), rng.standard_normal(m.n_states)
    jv = jvp(m, 0.2, x, [0.25], v)
    assert relerr(jvp_fd(m, 0.2, x, [0.25], v, eps=1e-7), jv) <= 1e-6
    wx, _ = vjp(m, 0.2, x, [0.25], w)
    assert abs(w @ jv - wx @ v) <= 1e-10 * (np.abs(w) @ np.abs(jv))


@pytest.mark.parametrize("variant", ["C", "LC"])
def test_parameter_gradient_matches_fd(desk, data_a, rng, variant):
    m = randomized(desk, variant, rng, data=data_a if variant == "C" else None)
    x = state_near_equilibrium(m, rng)
    w = rng.standard_normal(m.n_states)
    _, _, g = m.hybrid_vjp(0.1, x, [0.3], w)
    theta = m.params.flat.copy()
    fd = np.empty_like(theta)
    for i in range(theta.size):
        h = 1e-6 * max(1.0, abs(theta[i]))
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h
        tm[i] -= h
        fd[i] = w @ (m.rhs_with_params(0.1, x, [0.3], tp) - m.rhs_with_params(0.1, x, [0.3], tm)) / (2 * h)
    assert relerr(g, fd) <= 1e-6


def test_frozen_groups_get_zero_gradient(desk, rng):
    m = randomized(desk, "C", rng)
    m.params.freeze("derivative_ann")
    x = state_near_equilibrium(m, rng)
    _, _, g = m.hybrid_vjp(0.0, x, [0.1], rng.standard_normal(m.n_states))
    assert not g[m.params.group_mask("derivative_ann")].any()
    assert g[m.params.group_mask("state_ann")].any()
    with pytest.raises(DimensionMismatch):
        m.hybrid_vjp(0.0, x, [0.1], np.ones(3))


def test_with_params_and_clone_are_independent(desk, rng):
    m = randomized(desk, "LC", rng)
    c = m.clone()
    c.params.flat[:] = 0.0
    assert m.params.flat.any()
    n = m.with_params(np.zeros(m.params.size))
    x = state_near_equilibrium(m, rng)
    np.testing.assert_array_equal(n.derivatives(0.0, x, [0.1]), m.inner.derivatives(0.0, x, [0.1]))


# -- checkpoints ------------------------------------------------------------------
@pytest.mark.parametrize("variant", ["C", "LC"])
def test_checkpoint_roundtrip_is_bit_exact(tmp_path, desk, data_a, rng, variant):
    m = randomized(desk, variant, rng, data=data_a if variant == "C" else None)
    p = tmp_path / "ck.csv"
    save_checkpoint(p, m, {"network": "desk7"})
    header, topo, params, scalers = read_checkpoint(p)
    assert header["network"] == "desk7" and topo == m.topology
    np.testing.assert_array_equal(params.flat, m.params.flat)
    back = load_checkpoint(p, m.inner)
    x = state_near_equilibrium(m, rng)
    np.testing.assert_array_equal(back.derivatives(0.0, x, [0.2]), m.derivatives(0.0, x, [0.2]))
    assert p.read_text().split("\n")[1] == "index,name,value"


def test_checkpoint_errors(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("index,name,value\n")
    with pytest.raises(ParseError, match="header"):
        read_checkpoint(p)
    with pytest.raises(ParseError, match="cannot read"):
        read_checkpoint(tmp_path / "missing.csv")


def test_fresh_trajectory_matches_inner(desk, heart_a):
    inner = build_model(desk, "simple_LC", heart=heart_a)
    m = build_hybrid(inner, "LC")
    x0 = inner.steady_state(heart_a.mean_volume_flow * inner.fluid.density)
    cfg = SolverConfig(method="rk4", save_times=np.linspace(0.0, heart_a.period, 50))
    u = inflow_input(heart_a)
    a, _ = integrate(m.rhs, x0, u, cfg, t0=0.0)
    b, _ = integrate(inner.derivatives, x0, u, cfg, t0=0.0)
    np.testing.assert_array_equal(a.states, b.states)
    assert isinstance(HybridTopology(4, 5, "lc").variant, str)
