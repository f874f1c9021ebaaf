import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from brpsnn.core import (
    NEVER,
    ContractError,
    LifParams,
    lif_run,
    lif_step,
    reset_state,
    surrogate_grad,
)

P = LifParams()


def run_inputs(currents, params=P):
    state = reset_state(1, params)
    spikes = []
    for t, c in enumerate(currents, start=1):
        state, s, _ = lif_step(state, np.array([c]), params, t)
        spikes.append(int(s[0]))
    return state, spikes


class TestLifStep:
    def test_rest_is_fixed_point(self):
        state, s, mem = lif_step(reset_state(1), np.zeros(1), P, 1)
        assert state.v[0] == 0.0 and s[0] == 0 and mem[0] == 0.0

    def test_pure_decay(self):
        state = reset_state(1)
        state.v[:] = 0.4
        state, s, _ = lif_step(state, np.zeros(1), P, 1)
        assert state.v[0] == pytest.approx(0.08)
        assert s[0] == 0

    def test_constant_drive_fires_on_second_step(self):
        state = reset_state(1)
        state, s1, m1 = lif_step(state, np.array([0.45]), P, 1)
        assert s1[0] == 0 and state.v[0] == pytest.approx(0.45)
        state, s2, m2 = lif_step(state, np.array([0.45]), P, 2)
        assert m2[0] == pytest.approx(0.2 * 0.45 + 0.45)
        assert s2[0] == 1
        assert state.v[0] == 0.0
        assert state.last_spike[0] == 2

    def test_order_sensitivity_same_rate(self):
        close = np.zeros(10)
        close[[0, 1]] = 0.45
        apart = np.zeros(10)
        apart[[0, 9]] = 0.45
        _, s_close = run_inputs(close)
        _, s_apart = run_inputs(apart)
        assert sum(s_close) == 1
        assert sum(s_apart) == 0

    def test_threshold_is_inclusive(self):
        _, s = run_inputs([0.5])
        assert s == [1]

    def test_dimension_mismatch(self):
        with pytest.raises(ContractError):
            lif_step(reset_state(3), np.zeros(2), P, 1)

    def test_non_finite_input(self):
        with pytest.raises(FloatingPointError):
            lif_step(reset_state(2), np.array([0.0, np.nan]), P, 1)

    def test_step_starts_at_one(self):
        with pytest.raises(ContractError):
            lif_step(reset_state(1), np.zeros(1), P, 0)

    def test_does_not_mutate_input_state(self):
        state = reset_state(2)
        state.v[:] = 0.3
        lif_step(state, np.array([1.0, 0.0]), P, 1)
        np.testing.assert_array_equal(state.v, [0.3, 0.3])
        np.testing.assert_array_equal(state.last_spike, [NEVER, NEVER])

    def test_refractory_suppresses_decay_only(self):
        params = LifParams(tau_ref=3, v_reset=0.1)
        state = reset_state(1, params)
        state, s, _ = lif_step(state, np.array([0.6]), params, 1)
        assert s[0] == 1 and state.v[0] == pytest.approx(0.1)
        # steps 2 and 3 are inside the window: v' - v equals the input exactly
        state, s, _ = lif_step(state, np.array([0.05]), params, 2)
        assert state.v[0] == pytest.approx(0.15)
        state, s, _ = lif_step(state, np.array([0.0]), params, 3)
        assert state.v[0] == pytest.approx(0.15)
        # step 4 leaves it: decay resumes
        state, s, _ = lif_step(state, np.array([0.0]), params, 4)
        assert state.v[0] == pytest.approx(0.2 * 0.15)

    def test_firing_possible_during_refractory(self):
        params = LifParams(tau_ref=5)
        _, s = run_inputs([0.6, 0.6], params)
        assert s == [1, 1]


class TestResetState:
    def test_three(self):
        st_ = reset_state(3)
        np.testing.assert_array_equal(st_.v, [0, 0, 0])
        assert not st_.in_refractory(1, P).any()

    def test_one(self):
        np.testing.assert_array_equal(reset_state(1).v, [0.0])

    def test_zero_rejected(self):
        with pytest.raises(ContractError):
            reset_state(0)

    def test_uses_v_rest(self):
        np.testing.assert_array_equal(reset_state(2, LifParams(v_rest=-0.1)).v, [-0.1, -0.1])


class TestSurrogate:
    @pytest.mark.parametrize("v,expected", [(0.5, 1.0), (2.0, 0.0), (0.1, 1.0), (1.0, 1.0), (-0.01, 0.0)])
    def test_window(self, v, expected):
        assert surrogate_grad(v, P) == expected

    def test_vectorized(self):
        out = surrogate_grad(np.array([0.0, 0.5, 1.2]), P)
        np.testing.assert_array_equal(out, [1.0, 1.0, 0.0])


class TestParams:
    @pytest.mark.parametrize("kw", [dict(g=0.0), dict(g=1.0), dict(v_reset=0.6), dict(tau_ref=-1),
                                    dict(surrogate_width=0.0)])
    def test_invalid(self, kw):
        with pytest.raises(ContractError):
            LifParams(**kw)


currents_st = st.lists(st.floats(-1.0, 1.0, allow_nan=False), min_size=1, max_size=30)


@settings(max_examples=60, deadline=None)
@given(currents_st, st.integers(0, 4))
def test_lif_run_matches_stepping(currents, tau_ref):
    params = LifParams(tau_ref=tau_ref)
    c = np.array(currents)[:, None]
    spikes, mem = lif_run(c, params)
    state = reset_state(1, params)
    for t in range(len(c)):
        state, s, m = lif_step(state, c[t], params, t + 1)
        assert s[0] == spikes[t, 0]
        assert m[0] == mem[t, 0]


@settings(max_examples=60, deadline=None)
@given(currents_st)
def test_binary_output_and_reset(currents):
    state = reset_state(1)
    for t, c in enumerate(currents, start=1):
        state, s, _ = lif_step(state, np.array([c]), P, t)
        assert s[0] in (0, 1)
        if s[0]:
            assert state.v[0] == P.v_reset


@settings(max_examples=60, deadline=None)
@given(st.floats(-0.49, 0.49), st.integers(0, 12))
def test_decay_geometry(v0, k):
    state = reset_state(1)
    state.v[:] = v0
    for t in range(1, k + 1):
        state, s, _ = lif_step(state, np.zeros(1), P, t)
        assert s[0] == 0
    assert state.v[0] == pytest.approx(P.g ** k * v0, abs=1e-12)


def test_determinism():
    state = reset_state(4)
    state.v[:] = [0.1, 0.2, 0.3, 0.4]
    cur = np.array([0.3, 0.1, 0.4, 0.0])
    a = lif_step(state, cur, P, 3)
    b = lif_step(state, cur, P, 3)
    for x, y in zip(a[1:], b[1:]):
        np.testing.assert_array_equal(x, y)
    np.testing.assert_array_equal(a[0].v, b[0].v)
