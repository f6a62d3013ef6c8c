"""
Tests for the surrogate locomotion environment
"""

import os
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

from morphology import general_part_index, load_robot_spec
from surrogate_env import (
    GENERAL_OBS_SIZE,
    EnvConfig,
    LocomotionEnv,
    TrajectoryRecorder,
    advance_phase,
    build_leg_geometry,
    integrate_joints,
    kinetic_energy,
    maybe_resample,
    pd_torque,
    perturb,
    phase_contact,
    reset,
    stack_bundles,
    step,
)


def test_bundle_shapes(a1, quiet_env):
    _, bundle = reset(a1, quiet_env, np.random.default_rng(0))
    assert GENERAL_OBS_SIZE == 16
    assert bundle.joint_obs.shape == (12, 3)
    assert bundle.foot_obs.shape == (4, 2)
    assert bundle.general_obs.shape == (16,)
    assert bundle.privileged_obs.shape == (4,)
    assert bundle.joint_descriptions.shape == (12, 23)
    assert bundle.foot_descriptions.shape == (4, 10)


def test_reset_at_rest_reads_nominal_pose(a1, quiet_env):
    state, bundle = reset(a1, quiet_env, np.random.default_rng(0))
    np.testing.assert_array_equal(bundle.joint_obs, np.zeros((12, 3)))
    assert state.contact.all()
    np.testing.assert_allclose(bundle.general_obs[6:9], [0.0, 0.0, -1.0], atol=1e-12)
    assert bundle.privileged_obs[3] == pytest.approx(a1.nominal_height)


def test_reset_is_reproducible(a1):
    config = EnvConfig()
    _, b1 = reset(a1, config, np.random.default_rng(11))
    _, b2 = reset(a1, config, np.random.default_rng(11))
    np.testing.assert_array_equal(b1.joint_obs, b2.joint_obs)
    np.testing.assert_array_equal(b1.general_obs, b2.general_obs)


def test_zero_action_at_nominal_pose_stands_still(a1, quiet_env):
    state, _ = reset(a1, quiet_env, np.random.default_rng(0))
    action = np.zeros(a1.num_joints)
    for _ in range(20):
        state, _, breakdown, done = step(state, action, a1, quiet_env)
        assert not done
    np.testing.assert_allclose(state.q, a1.joint_array('q_nominal'))
    assert state.h == pytest.approx(a1.nominal_height)
    assert breakdown.total >= 0.0


def test_episode_times_out(a1):
    config = EnvConfig.deterministic(episode_length=5)
    state, _ = reset(a1, config, np.random.default_rng(0))
    action = np.zeros(a1.num_joints)
    for i in range(5):
        state, _, _, done = step(state, action, a1, config)
        assert done == (i == 4)
    assert state.time_out
    assert not state.terminated


def test_large_tilt_terminates(a1, quiet_env):
    state, _ = reset(a1, quiet_env, np.random.default_rng(0))
    tilted = replace(state, roll=1.5)
    state, _, _, done = step(tilted, np.zeros(a1.num_joints), a1, quiet_env)
    assert done
    assert state.terminated
    assert state.collision == 1


def test_action_arity_mismatch_raises(a1, quiet_env):
    state, _ = reset(a1, quiet_env, np.random.default_rng(0))
    with pytest.raises(ValueError):
        step(state, np.zeros(5), a1, quiet_env)
    with pytest.raises(ValueError):
        pd_torque(state, np.zeros(5))


def test_pd_torque_respects_limits(a1, quiet_env):
    state, _ = reset(a1, quiet_env, np.random.default_rng(0))
    tau = pd_torque(state, np.full(a1.num_joints, 1e3))
    assert np.all(np.abs(tau) <= a1.joint_array('torque_limit'))
    np.testing.assert_allclose(pd_torque(state, np.zeros(a1.num_joints)), 0.0, atol=1e-12)


def test_unforced_joints_lose_energy(a1):
    rng = np.random.default_rng(2)
    q = a1.joint_array('q_nominal').copy()
    qd = rng.uniform(-3.0, 3.0, a1.num_joints)
    energy = kinetic_energy(qd, a1)
    for _ in range(50):
        q, qd = integrate_joints(q, qd, np.zeros(a1.num_joints), a1, 0.005, 0.01)
        current = kinetic_energy(qd, a1)
        assert current <= energy + 1e-12
        energy = current
    assert np.all(q >= a1.joint_array('control_min'))
    assert np.all(q <= a1.joint_array('control_max'))


def test_raised_joints_drive_no_foot(robot_dir):
    badger = load_robot_spec(os.path.join(robot_dir, 'silver_badger.yaml'))
    geometry = build_leg_geometry(badger)
    spine = badger.joint_names.index('spine')
    assert geometry.joint_foot[spine] == -1
    assert np.all(geometry.lever[:, :, spine] == 0.0)
    others = [j for j in range(badger.num_joints) if j != spine]
    assert np.all(geometry.joint_foot[others] >= 0)


def test_group_dropout_zeroes_a_group(a1):
    config = EnvConfig.deterministic(group_dropout=(('joints', 1.0),))
    state, bundle = reset(a1, config, np.random.default_rng(0))
    state, bundle, _, _ = step(state, np.full(a1.num_joints, 0.5), a1, config)
    np.testing.assert_array_equal(bundle.joint_obs, 0.0)
    assert config.dropout_for('feet') == 0.0


def test_mass_dims_can_be_hidden(a1):
    config = EnvConfig.deterministic(include_mass_dims=False)
    _, bundle = reset(a1, config, np.random.default_rng(0))
    assert bundle.general_obs[9 + 3] == 0.0
    assert np.all(bundle.joint_descriptions[:, general_part_index('mass')] == 0.0)


@pytest.mark.parametrize("kwargs", [
    dict(dt=0.0),
    dict(episode_length=0),
    dict(substeps=0),
    dict(dropout_probability=1.5),
    dict(group_dropout=(('tail', 0.5),)),
])
def test_invalid_env_config_raises(kwargs):
    with pytest.raises(ValueError):
        EnvConfig(**kwargs)


def test_default_resample_rate():
    assert EnvConfig(episode_length=400).resample_rate == pytest.approx(0.005)
    assert EnvConfig.deterministic().resample_rate == 0.0


def test_stack_bundles_rejects_mixed_arity(a1, small_robot, quiet_env):
    _, b1 = reset(a1, quiet_env, np.random.default_rng(0))
    _, b2 = reset(small_robot, quiet_env, np.random.default_rng(0))
    assert stack_bundles([b1, b1]).batch_size == 2
    with pytest.raises(ValueError):
        stack_bundles([b1, b2])
    with pytest.raises(ValueError):
        stack_bundles([])


def test_env_auto_resets_and_reports_episode(a1, tmp_path):
    config = EnvConfig.deterministic(episode_length=3)
    recorder = TrajectoryRecorder(str(tmp_path))
    env = LocomotionEnv(a1, config, np.random.default_rng(0), recorder=recorder)
    env.reset()
    total = 0.0
    for i in range(3):
        bundle, breakdown, done, info = env.step(np.zeros(a1.num_joints))
        total += breakdown.total
    assert done
    assert info.time_out
    assert info.episode_length == 3
    assert info.episode_return == pytest.approx(total)
    assert info.final_bundle is not None
    assert env.state.step_index == 0
    assert env.episodes_completed == 1

    written = os.path.join(str(tmp_path), 'unitree_a1_episode_0000.csv')
    frame = pd.read_csv(written)
    assert len(frame) == 3
    assert 'total' in frame.columns


def test_integrator_agrees_with_explicit_update(a1):
    rng = np.random.default_rng(4)
    dt, base = 1e-3, 0.01
    nj = a1.num_joints
    inertia = a1.joint_array('rotor_inertia') + base
    damping, friction = a1.joint_array('damping'), a1.joint_array('friction')
    vmax = a1.joint_array('velocity_limit')
    q = 0.5 * (a1.joint_array('control_min') + a1.joint_array('control_max'))
    for _ in range(100):
        qd = rng.choice([-1.0, 1.0], nj) * rng.uniform(0.2, 0.5, nj) * vmax
        tau = rng.uniform(-0.1, 0.1, nj) * np.abs(qd) * inertia / dt
        q_new, qd_new = integrate_joints(q, qd, tau, a1, dt, base)

        qdd = (tau - damping * qd - friction * np.sign(qd)) / inertia
        qd_ref = np.clip(qd + dt * qdd, -vmax, vmax)
        x = dt * damping / inertia
        gap = x * (x * np.abs(qd) + dt * np.abs(tau) / inertia) + 1e-12
        assert np.all(np.abs(qd_new - qd_ref) <= gap)
        assert np.all(np.abs(q_new - (q + dt * qd_ref)) <= dt * gap + 1e-12)


def test_phase_contact_half_cycles():
    phase = np.array([0.0, np.pi - 1e-9, np.pi, 2.0 * np.pi - 1e-9, 2.0 * np.pi, 3.5 * np.pi])
    np.testing.assert_array_equal(phase_contact(phase), [True, True, False, False, True, False])


def test_phase_advances_with_fore_aft_sweep_only(a1, quiet_env):
    geometry = build_leg_geometry(a1)
    stride = quiet_env.stride_fraction * a1.nominal_height
    zero = np.zeros(a1.num_feet)

    abduction = np.zeros(a1.num_joints)
    abduction[a1.joint_names.index('FL_hip_abduction')] = 0.3
    np.testing.assert_array_equal(advance_phase(zero, abduction, a1, geometry, quiet_env), zero)

    hip = a1.joint_names.index('FL_hip_flexion')
    foot = geometry.joint_foot[hip]
    for sign in (1.0, -1.0):
        dq = np.zeros(a1.num_joints)
        dq[hip] = sign * stride / abs(geometry.lever[foot, 0, hip])
        phase = advance_phase(zero, dq, a1, geometry, quiet_env)
        assert phase[foot] == pytest.approx(np.pi)
        assert np.all(np.delete(phase, foot) == 0.0)


def test_reset_restarts_every_phase(a1, quiet_env):
    rng = np.random.default_rng(0)
    state, _ = reset(a1, quiet_env, rng)
    for _ in range(5):
        state, _, _, _ = step(state, rng.normal(0.0, 1.0, a1.num_joints), a1, quiet_env)
    assert np.any(state.phase > 0.0)
    state, _ = reset(a1, quiet_env, rng)
    np.testing.assert_array_equal(state.phase, 0.0)
    assert state.contact.all()


class DiagonalTrot:
    """
    Contact-driven trot: a leg sweeps back while in stance and forward while
    airborne. The second diagonal joins once the first one lifts off.
    """

    def __init__(self, state):
        geometry = state.geometry
        self.leg = geometry.joint_foot
        self.backward = np.sign(geometry.lever[:, 0, :].sum(axis=0))
        self.first_feet = geometry.foot_xy[:, 0] * geometry.foot_xy[:, 1] > 0
        self.first_joints = (self.leg >= 0) & self.first_feet[self.leg]
        self.started = False

    def __call__(self, state):
        self.started = self.started or not state.contact[self.first_feet].all()
        stance = state.contact[self.leg]
        action = np.where(stance, -1.0, 1.0) * self.backward
        active = (self.leg >= 0) & (self.first_joints | self.started)
        return np.where(active, action, 0.0)


def _mean_forward_velocity(robot, config, controller, seed, steps=150, settle=50):
    state, _ = reset(robot, config, np.random.default_rng(seed))
    state = replace(state, command=np.zeros(3))
    velocities = []
    for t in range(steps):
        state, _, _, done = step(state, controller(state), robot, config)
        if t >= settle:
            velocities.append(state.v[0])
        if done:
            break
    return float(np.mean(velocities)) if velocities else 0.0


def test_coordinated_gait_outruns_random_motion(a1):
    config = EnvConfig.deterministic(episode_length=1000)

    def random_motion(seed):
        rng = np.random.default_rng(100 + seed)
        return lambda state: rng.normal(0.0, 1.0, a1.num_joints)

    state, _ = reset(a1, config, np.random.default_rng(0))
    trot = _mean_forward_velocity(a1, config, DiagonalTrot(state), seed=0)
    random = np.mean([_mean_forward_velocity(a1, config, random_motion(s), seed=s) for s in range(3)])
    assert trot > 0.2
    assert abs(random) < 0.5 * trot


def test_standing_is_a_fixed_point(a1, quiet_env):
    state, _ = reset(a1, quiet_env, np.random.default_rng(0))
    state = replace(state, command=np.zeros(3), v=np.array([0.4, -0.3, 0.0]),
                    omega=np.array([0.2, -0.2, 0.3]), roll=0.15, pitch=-0.1)
    action = np.zeros(a1.num_joints)
    for _ in range(100):
        state, _, _, done = step(state, action, a1, quiet_env)
        assert not done
    assert np.abs(state.v).max() < 1e-3
    assert np.abs(state.omega).max() < 1e-3
    assert abs(state.roll) < 1e-3 and abs(state.pitch) < 1e-3
    assert state.contact.all()
    np.testing.assert_array_equal(state.phase, 0.0)


def test_air_timer_resets_on_contact_and_counts_dt(a1):
    config = EnvConfig.deterministic(episode_length=1000)
    rng = np.random.default_rng(5)
    state, _ = reset(a1, config, np.random.default_rng(0))
    airborne_seen = False
    for _ in range(100):
        previous = state
        state, _, _, done = step(state, rng.normal(0.0, 1.0, a1.num_joints), a1, config)
        np.testing.assert_array_equal(state.air_time[state.contact], 0.0)
        np.testing.assert_array_equal(state.air_time[~state.contact],
                                      previous.air_time[~state.contact] + config.dt)
        assert np.all(state.air_time >= 0.0)
        airborne_seen = airborne_seen or not state.contact.all()
        if done:
            break
    assert airborne_seen


def test_commands_resample_twice_per_episode_on_average(a1):
    config = EnvConfig.deterministic(resample_probability=None, episode_length=500)
    assert config.resample_rate == pytest.approx(0.004)
    rng = np.random.default_rng(0)
    state, _ = reset(a1, config, rng)
    counts = []
    for _ in range(2000):
        counts.append(sum(maybe_resample(state, config, rng) is not state for _ in range(500)))
    assert 1.9 <= np.mean(counts) <= 2.1


def test_no_resampling_at_zero_probability(a1, quiet_env):
    rng = np.random.default_rng(0)
    state, _ = reset(a1, quiet_env, rng)
    assert all(maybe_resample(state, quiet_env, rng) is state for _ in range(1000))


def test_pushes_are_bounded(a1):
    config = EnvConfig.deterministic(perturb_probability=1.0, perturb_bound=0.5)
    rng = np.random.default_rng(1)
    state, _ = reset(a1, config, rng)
    for _ in range(1000):
        dv = perturb(state, config, rng).v - state.v
        assert np.hypot(dv[0], dv[1]) <= 0.5 + 1e-12
        assert dv[2] == 0.0
    assert perturb(state, replace(config, perturb_probability=0.0), rng) is state


def _within(ratio, half_width):
    return np.all((ratio >= 1.0 - half_width - 1e-12) & (ratio <= 1.0 + half_width + 1e-12))


def test_reset_draws_stay_in_randomization_ranges(a1):
    config = EnvConfig()
    r = config.randomization
    rng = np.random.default_rng(0)
    size = min(1.0, a1.length / config.command_reference_length)
    for _ in range(1000):
        state, _ = reset(a1, config, rng)
        drawn = state.robot
        assert _within(drawn.mass / a1.mass, r.mass)
        assert _within(np.array([drawn.kp / a1.kp, drawn.kd / a1.kd]), r.gains)
        assert _within(drawn.action_scale / a1.action_scale, r.action_scale)
        for name, half_width in (('damping', r.damping), ('rotor_inertia', r.rotor_inertia),
                                 ('friction', r.friction), ('torque_limit', r.limits),
                                 ('velocity_limit', r.limits)):
            assert _within(drawn.joint_array(name) / a1.joint_array(name), half_width)
        lower, upper = drawn.joint_array('control_min'), drawn.joint_array('control_max')
        for name in ('control_min', 'control_max'):
            assert np.all(np.abs(drawn.joint_array(name) - a1.joint_array(name)) <= r.control_range_offset + 1e-12)
        assert np.all(np.abs(drawn.joint_array('q_nominal') - a1.joint_array('q_nominal'))
                      <= r.q_nominal_offset + r.control_range_offset + 1e-12)
        assert np.all((state.q >= lower) & (state.q <= upper))
        assert np.all(np.abs(state.command[:2]) <= config.max_command_xy * size + 1e-12)
        assert abs(state.command[2]) <= config.max_command_yaw


def test_same_seed_gives_identical_trajectories(a1):
    config = EnvConfig(perturb_probability=0.05)
    actions = np.random.default_rng(99).normal(size=(60, a1.num_joints))

    def rollout(seed):
        env = LocomotionEnv(a1, config, np.random.default_rng(seed))
        env.reset()
        rows = []
        for action in actions:
            bundle, breakdown, done, _ = env.step(action)
            rows.append(np.concatenate([bundle.joint_obs.ravel(), bundle.foot_obs.ravel(), bundle.general_obs,
                                        bundle.privileged_obs, [breakdown.total, float(done)]]))
        return np.array(rows)

    first = rollout(3)
    np.testing.assert_array_equal(first, rollout(3))
    assert not np.array_equal(first, rollout(4))
