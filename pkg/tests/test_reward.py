"""
Tests for the reward terms, coefficient registry and curriculum
"""

import math
from dataclasses import replace

import numpy as np
import pytest

from reward import (
    AIR_TIME_TARGET,
    NUM_TERMS,
    SINGLE_REWARD_SET,
    RewardCoefficients,
    RewardConfigError,
    compute_reward,
    curriculum_coefficient,
    load_coefficients,
    resolve_coefficients,
    symmetry_pairs,
)
from surrogate_env import reset


@pytest.fixture
def standing(a1, quiet_env):
    """Nominal pose with the trunk velocity matching the command"""
    state, _ = reset(a1, quiet_env, np.random.default_rng(0))
    cmd = state.command
    tracked = replace(state, v=np.array([cmd[0], cmd[1], 0.0]), omega=np.array([0.0, 0.0, cmd[2]]))
    return state, tracked


def test_a1_coefficients():
    coeffs = load_coefficients('a1')
    assert coeffs.values[0] == 2.0
    assert coeffs.values[1] == 1.0
    assert coeffs.curriculum_steps == 12e6
    assert coeffs.tracking_max == 3.0


@pytest.mark.parametrize("name, expected", [
    ('Unitree A1', 'a1'),
    ('unitree_go2', 'go2'),
    ('Agility-Cassie', 'cassie'),
    ('NAO V5', 'naov5'),
])
def test_names_resolve_with_vendor_prefixes(name, expected):
    assert load_coefficients(name) == load_coefficients(expected)


def test_cassie_torque_coefficient():
    assert load_coefficients('cassie').values[8] == 2e-5


def test_unknown_robot_raises():
    with pytest.raises(RewardConfigError):
        load_coefficients('mystery walker')
    assert load_coefficients('mystery walker', single_reward_set=True) == SINGLE_REWARD_SET


@pytest.mark.parametrize("values, steps", [
    ((1.0,) * 13, 1e6),
    ((1.0,) * 13 + (-0.1,), 1e6),
    ((0.0,) + (1.0,) * 13, 1e6),
    ((1.0,) * 14, 0.0),
    ((1.0,) * 13 + (float('nan'),), 1e6),
])
def test_malformed_coefficients_raise(values, steps):
    with pytest.raises(RewardConfigError):
        RewardCoefficients(values=values, curriculum_steps=steps)


def test_coefficient_dict_roundtrip_and_missing_key():
    coeffs = load_coefficients('op3')
    assert RewardCoefficients.from_dict(coeffs.to_dict()) == coeffs
    data = coeffs.to_dict()
    data.pop('t7')
    with pytest.raises(RewardConfigError):
        RewardCoefficients.from_dict(data)


def test_curriculum_is_linear_then_flat():
    assert curriculum_coefficient(0, 100, 4.0) == 0.0
    assert curriculum_coefficient(50, 100, 4.0) == pytest.approx(2.0)
    assert curriculum_coefficient(100, 100, 4.0) == 4.0
    assert curriculum_coefficient(1e9, 100, 4.0) == 4.0
    with pytest.raises(RewardConfigError):
        curriculum_coefficient(1, 0, 4.0)


def test_perfect_tracking_at_curriculum_start(a1, standing):
    state, tracked = standing
    action = np.zeros(a1.num_joints)
    out = compute_reward(state, tracked, action, action, a1, t=0)
    assert out.raw[0] == pytest.approx(1.0)
    assert out.raw[1] == pytest.approx(1.0)
    assert out.total == pytest.approx(3.0)
    assert out.tracking == pytest.approx(3.0)
    assert len(out.raw) == len(out.weighted) == NUM_TERMS


def test_touchdown_after_short_flight_rewards_air_time(a1, standing):
    # All four feet land with zero air time: 4 * 0.5 toward the target
    state, tracked = standing
    action = np.zeros(a1.num_joints)
    coeffs = load_coefficients('a1')
    out = compute_reward(state, tracked, action, action, a1, t=coeffs.curriculum_steps)
    assert out.raw[12] == pytest.approx(2.0)
    assert out.total == pytest.approx(3.0 + coeffs.values[12] * 2.0)


def test_symmetry_counts_pairs_in_flight(a1, standing):
    state, tracked = standing
    airborne = replace(tracked, contact=np.zeros(a1.num_feet, dtype=bool))
    action = np.zeros(a1.num_joints)
    out = compute_reward(state, airborne, action, action, a1, t=0)
    assert symmetry_pairs([f.side for f in a1.feet]) == ((0, 1), (2, 3))
    assert out.raw[13] == -2.0
    assert out.raw[12] == 0.0

    one_pair = np.array([False, False, True, True])
    out = compute_reward(state, replace(tracked, contact=one_pair), action, action, a1, t=0)
    assert out.raw[13] == -1.0


def test_total_is_clipped_at_zero(a1, standing):
    state, tracked = standing
    fallen = replace(tracked, v=np.array([5.0, 5.0, 3.0]), omega=np.array([4.0, 4.0, 5.0]), collision=1)
    action = np.zeros(a1.num_joints)
    out = compute_reward(state, fallen, action, action, a1, t=1e12)
    assert sum(out.weighted) < 0.0
    assert out.total == 0.0


def test_action_rate_penalty(a1, standing):
    state, tracked = standing
    action = np.full(a1.num_joints, 0.1)
    out = compute_reward(state, tracked, action, np.zeros(a1.num_joints), a1, t=0, dt=0.02)
    assert out.raw[9] == pytest.approx(-a1.num_joints * 25.0)
    # Penalties carry no weight at the start of the curriculum
    assert out.weighted[9] == 0.0


def test_arity_mismatch_raises(a1, standing):
    state, tracked = standing
    with pytest.raises(RewardConfigError):
        compute_reward(state, tracked, np.zeros(3), np.zeros(3), a1, t=0)


def _reference_terms(state, next_state, action, previous_action, robot, dt):
    """Term-by-term evaluation with plain loops"""
    cx, cy, cyaw = (float(c) for c in state.command)
    vx, vy, vz = (float(v) for v in next_state.v)
    wx, wy, wz = (float(w) for w in next_state.omega)
    t1 = math.exp(-((vx - cx) ** 2 + (vy - cy) ** 2) / 0.25)
    t2 = math.exp(-((wz - cyaw) ** 2) / 0.25)
    t3 = -vz ** 2
    t4 = -(wx ** 2 + wy ** 2)
    t5 = -(next_state.roll ** 2 + next_state.pitch ** 2)
    t6 = t7 = t8 = t9 = t10 = 0.0
    for j, joint in enumerate(robot.joints):
        q = float(next_state.q[j])
        t6 -= (q - joint.q_nominal) ** 2
        margin = 0.05 * (joint.control_max - joint.control_min)
        if q < joint.control_min + margin or q > joint.control_max - margin:
            t7 -= 1.0
        t8 -= ((next_state.qd[j] - state.qd[j]) / dt) ** 2
        t9 -= next_state.torque[j] ** 2
        t10 -= ((action[j] - previous_action[j]) / dt) ** 2
    t11 = -(next_state.h - robot.nominal_height) ** 2
    t12 = -float(next_state.collision)
    t13 = 0.0
    for f in range(robot.num_feet):
        if next_state.contact[f]:
            t13 -= state.air_time[f] - 0.5
    lefts = [f for f, foot in enumerate(robot.feet) if foot.side == 'left']
    rights = [f for f, foot in enumerate(robot.feet) if foot.side == 'right']
    t14 = 0.0
    for left, right in zip(lefts, rights):
        if not next_state.contact[left] and not next_state.contact[right]:
            t14 -= 1.0
    return [t1, t2, t3, t4, t5, t6, t7, t8, t9, t10, t11, t12, t13, t14]


def _random_transition(robot, base, rng):
    nj, nf = robot.num_joints, robot.num_feet
    lower, upper = robot.joint_array('control_min'), robot.joint_array('control_max')
    state = replace(base, qd=rng.normal(0.0, 2.0, nj), air_time=rng.uniform(0.0, 1.0, nf),
                    command=rng.uniform(-1.0, 1.0, 3))
    next_state = replace(
        base,
        q=rng.uniform(lower, upper),
        qd=rng.normal(0.0, 2.0, nj),
        v=rng.normal(0.0, 0.7, 3),
        omega=rng.normal(0.0, 0.7, 3),
        roll=float(rng.normal(0.0, 0.2)),
        pitch=float(rng.normal(0.0, 0.2)),
        h=float(robot.nominal_height + rng.normal(0.0, 0.05)),
        torque=rng.normal(0.0, 5.0, nj),
        contact=rng.random(nf) < 0.5,
        collision=int(rng.random() < 0.1),
    )
    return state, next_state, rng.normal(0.0, 1.0, nj), rng.normal(0.0, 1.0, nj)


@pytest.mark.parametrize("robot_name", ['a1', 'small_robot'])
def test_reward_matches_term_by_term_reference(robot_name, request, quiet_env):
    robot = request.getfixturevalue(robot_name)
    coeffs = resolve_coefficients(robot, single_reward_set=robot_name != 'a1')
    base, _ = reset(robot, quiet_env, np.random.default_rng(0))
    rng = np.random.default_rng(21)
    for _ in range(1000):
        state, next_state, action, previous = _random_transition(robot, base, rng)
        t = float(rng.uniform(0.0, 2.0 * coeffs.curriculum_steps))
        out = compute_reward(state, next_state, action, previous, robot, t=t, dt=0.02, coefficients=coeffs)
        raw = _reference_terms(state, next_state, action, previous, robot, 0.02)
        ramp = min(t / coeffs.curriculum_steps, 1.0)
        weighted = [c * r if i < 2 else ramp * c * r for i, (c, r) in enumerate(zip(coeffs.values, raw))]
        np.testing.assert_allclose(out.raw, raw, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(out.weighted, weighted, rtol=1e-12, atol=1e-12)
        assert out.total == pytest.approx(max(0.0, math.fsum(weighted)), rel=1e-12, abs=1e-12)


def test_term_signs(a1, quiet_env):
    base, _ = reset(a1, quiet_env, np.random.default_rng(0))
    rng = np.random.default_rng(5)
    for _ in range(500):
        state, next_state, action, previous = _random_transition(a1, base, rng)
        raw = compute_reward(state, next_state, action, previous, a1, t=0).raw
        assert 0.0 < raw[0] <= 1.0 and 0.0 < raw[1] <= 1.0
        assert all(r <= 0.0 for i, r in enumerate(raw[2:], start=2) if i != 12)
        # Landing before the air-time target is the one rewarded penalty
        assert raw[12] <= AIR_TIME_TARGET * a1.num_feet


def test_xy_tracking_decreases_with_error(a1, standing):
    state, tracked = standing
    action = np.zeros(a1.num_joints)
    direction = np.array([0.6, -0.8, 0.0])
    values = [compute_reward(state, replace(tracked, v=tracked.v + d * direction), action, action, a1, t=0).raw[0]
              for d in np.linspace(0.0, 2.0, 41)]
    assert values[0] == 1.0
    assert all(b < a for a, b in zip(values, values[1:]))
