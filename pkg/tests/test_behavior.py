import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from riskbmpc.behavior import (
    Path,
    SelectionWeights,
    build_corridor,
    choose_samples,
    sample_trajectories,
    select_reference_tree,
    simulate_tracking,
)
from riskbmpc.core import build_tree
from riskbmpc.scenario import build_instance, make_scenario
from riskbmpc.vehicle import BicycleParams, step

P = BicycleParams()
STRAIGHT = Path([[0.0, 0.0], [200.0, 0.0]])


def left_turn():
    arc = [[10 + 8 * np.sin(a), 8 - 8 * np.cos(a)] for a in np.linspace(0, np.pi / 2, 20)]
    return Path([[0.0, 0.0], *arc, [18.0, 40.0]])


class TestPath:
    def test_projection_and_point(self):
        assert STRAIGHT.project([50.0, 3.0]) == pytest.approx(50.0)
        np.testing.assert_allclose(STRAIGHT.point(20.0), [20.0, 0.0])
        # Extended past both ends.
        np.testing.assert_allclose(STRAIGHT.point(-5.0), [-5.0, 0.0])
        assert STRAIGHT.project([250.0, 0.0]) == pytest.approx(250.0)

    def test_heading(self):
        path = left_turn()
        assert path.heading(0.5) == pytest.approx(0.0)
        assert path.heading(path.length - 0.1) == pytest.approx(np.pi / 2, abs=1e-9)

    def test_degenerate_rejected(self):
        with pytest.raises(ValueError):
            Path([[0.0, 0.0]])
        with pytest.raises(ValueError):
            Path([[1.0, 1.0], [1.0, 1.0]])


class TestTracking:
    def test_equilibrium(self):
        x0 = np.array([0.0, 0.0, 0.0, 6.0, 0.0, 0.0])
        s = simulate_tracking(x0, STRAIGHT, 6.0, 40, P)
        assert np.max(np.abs(s.inputs)) < 1e-9
        np.testing.assert_allclose(s.states[:, 3], 6.0)

    def test_stop(self):
        x0 = np.array([0.0, 0.0, 0.0, 6.0, 0.0, 0.0])
        s = simulate_tracking(x0, STRAIGHT, 0.0, 200, P)
        assert s.states[-1, 3] == pytest.approx(0.0, abs=1e-3)
        assert abs(s.states[-1, 0] - s.states[-20, 0]) < 1e-2

    def test_left_turn_ends_aligned(self):
        path = left_turn()
        x0 = np.array([0.0, 0.0, 0.0, 3.0, 0.0, 0.0])
        s = simulate_tracking(x0, path, 3.0, 150, P)
        assert s.states[-1, 1] > 15.0
        assert abs(s.states[-1, 2] - np.pi / 2) < np.deg2rad(15)

    def test_rollout_is_consistent_with_dynamics(self):
        x0 = np.array([0.0, 0.0, 0.1, 4.0, 0.0, 0.0])
        s = simulate_tracking(x0, left_turn(), 5.0, 30, P)
        for k in range(30):
            np.testing.assert_allclose(s.states[k + 1], step(s.states[k], s.inputs[k], P))

    def test_inputs_respect_limits(self):
        x0 = np.array([0.0, 2.0, 0.5, 1.0, 0.0, 0.0])
        s = simulate_tracking(x0, left_turn(), 12.0, 100, P)
        assert np.all(s.inputs[:, 0] <= P.a_bounds[1] + 1e-12) and np.all(s.inputs[:, 0] >= P.a_bounds[0] - 1e-12)
        assert np.all(np.abs(s.inputs[:, 1]) <= P.delta_bounds[1] + 1e-12)
        rates = np.diff(np.concatenate([x0[None, 4:], s.inputs]), axis=0) / P.dt
        assert np.all(rates[:, 1] <= P.delta_rate_bounds[1] + 1e-9)


def test_empty_speed_list_rejected():
    with pytest.raises(ValueError):
        sample_trajectories(np.zeros(6), STRAIGHT, [], P, 10)
    with pytest.raises(ValueError):
        sample_trajectories(np.zeros(6), STRAIGHT, [-1.0], P, 10)


@settings(max_examples=30, deadline=None)
@given(v0=st.floats(0.0, 15.0), vd=st.floats(0.0, 20.0), th=st.floats(-0.5, 0.5))
def test_speeds_stay_in_bounds(v0, vd, th):
    x0 = np.array([0.0, 0.0, th, v0, 0.0, 0.0])
    (s,) = sample_trajectories(x0, left_turn(), [vd], P, 40)
    assert np.all(s.states[:, 3] >= P.v_bounds[0] - 1e-9)
    assert np.all(s.states[:, 3] <= P.v_bounds[1] + 1e-9)


def samples_and_obstacles(blocked_modes=(), d=3, steps=30):
    x0 = np.array([0.0, 0.0, 0.0, 8.0, 0.0, 0.0])
    samples = sample_trajectories(x0, STRAIGHT, [0, 2, 4, 6, 8, 10], P, steps)
    obs = np.zeros((d, steps + 1, 1, 3))
    obs[:, :, 0, 0] = -100.0  # far behind
    for m in blocked_modes:
        obs[m, :, 0, 0] = 20.0  # parked in the lane ahead
    return x0, samples, obs


class TestSelection:
    def test_identical_modes_identical_branches(self):
        x0, samples, obs = samples_and_obstacles()
        ref, init = select_reference_tree(x0, STRAIGHT, samples, obs, P, 5)
        for tree in (ref, init):
            for i in range(1, 3):
                np.testing.assert_array_equal(tree.branch_states[i], tree.branch_states[0])
                np.testing.assert_array_equal(tree.branch_inputs[i], tree.branch_inputs[0])

    def test_blocked_mode_selects_slower_sample(self):
        x0, samples, obs = samples_and_obstacles(blocked_modes=(1,))
        chosen = choose_samples(samples, obs, SelectionWeights())
        assert chosen[1].desired_speed < chosen[0].desired_speed
        assert chosen[0].desired_speed == chosen[2].desired_speed

    def test_shared_segment_follows_conservative_sample(self):
        x0, samples, obs = samples_and_obstacles(blocked_modes=(1,))
        ref, init = select_reference_tree(x0, STRAIGHT, samples, obs, P, 5)
        chosen = choose_samples(samples, obs, SelectionWeights())
        np.testing.assert_array_equal(ref.shared_states, chosen[1].states[:6])
        # Past the split every branch references its own candidate.
        np.testing.assert_array_equal(ref.branch_states[0], chosen[0].states[6:])

    def test_initial_guess_is_a_rollout(self):
        x0, samples, obs = samples_and_obstacles(blocked_modes=(2,))
        _, init = select_reference_tree(x0, STRAIGHT, samples, obs, P, 5)
        again = build_tree(x0, init.shared_inputs, init.branch_inputs, lambda x, u: step(x, u, P))
        np.testing.assert_allclose(again.branch_states, init.branch_states, atol=1e-12)
        np.testing.assert_allclose(again.shared_states, init.shared_states, atol=1e-12)

    def test_split_step_validated(self):
        x0, samples, obs = samples_and_obstacles()
        for bad in (0, 30):
            with pytest.raises(ValueError):
                select_reference_tree(x0, STRAIGHT, samples, obs, P, bad)

    def test_ts1_dimensions(self):
        cfg = make_scenario("TS1")
        inst = build_instance(cfg, cfg.ego_x0())
        ref = inst.problem.ref_tree
        assert ref.num_branches == 4 and ref.split_step == 5 and ref.horizon == 50
        assert inst.initial.num_branches == 4 and inst.initial.split_step == 5


class TestCorridor:
    def test_straight_axis(self):
        ref = np.array([[5.0, 1.0, 0.0]])
        c = build_corridor(ref, 2.0)
        np.testing.assert_allclose(c.evaluate([[7.0, 2.5]]), [[1.5 - 2.0, -1.5 - 2.0]])
        np.testing.assert_allclose(c.evaluate([[5.0, 1.0]]), [[-2.0, -2.0]])

    def test_rotated_acts_on_x(self):
        c = build_corridor(np.array([[5.0, 1.0, np.pi / 2]]), 2.0)
        h = c.evaluate([[8.0, 50.0]])
        np.testing.assert_allclose(np.sort(h[0]), np.sort([3.0 - 2.0, -3.0 - 2.0]), atol=1e-12)

    def test_reference_is_feasible(self):
        cfg = make_scenario("TS2")
        ref = build_instance(cfg, cfg.ego_x0()).problem.ref_tree
        for states in (ref.shared_states, ref.branch_states.reshape(-1, 6)):
            c = build_corridor(states, 2.0)
            assert np.all(c.evaluate(states[:, :2]) <= 0.0)

    def test_half_width_validated(self):
        with pytest.raises(ValueError):
            build_corridor(np.zeros((1, 3)), 0.0)
