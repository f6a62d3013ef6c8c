"""
Tests for the multi-head and padding comparison policies
"""

import numpy as np
import pytest

from baselines import expand_head, morphology_group, register_task
from morphology import generate_surrogate_robot
from policy import (
    PolicyConfig,
    PolicyError,
    check_robot_supported,
    init_policy_params,
    load_checkpoint,
    params_digest,
    policy_forward,
    policy_value,
    save_checkpoint,
)
from surrogate_env import EnvConfig, reset, stack_bundles


def _config(architecture, **overrides):
    base = dict(
        architecture=architecture,
        multihead_encoder_hidden=(16,),
        multihead_core_hidden=(16, 16),
        padding_hidden=(16, 16),
        max_joints=16,
        max_feet=6,
        max_tasks=3,
    )
    base.update(overrides)
    return PolicyConfig(**base)


def _batch(robot, size=2):
    rng = np.random.default_rng(0)
    return stack_bundles([reset(robot, EnvConfig(), rng)[1] for _ in range(size)])


@pytest.fixture(scope='module')
def quads():
    return [generate_surrogate_robot(1, 'quadruped', (8, 8)), generate_surrogate_robot(2, 'quadruped', (12, 12))]


def test_morphology_groups(quads, small_robot):
    assert morphology_group(quads[0]) == 'quadruped'
    assert morphology_group(small_robot) == 'biped_humanoid'
    with pytest.raises(PolicyError):
        morphology_group(generate_surrogate_robot(0, 'other', (4, 12)))


def test_multihead_sizes_heads_to_largest_robot(quads, small_robot):
    params = init_policy_params(_config('multihead'), np.random.default_rng(0), quads + [small_robot])
    heads = params.registry['heads']
    assert heads['quadruped'] == {'joint_slots': 12, 'foot_slots': 4}
    assert heads['biped_humanoid']['joint_slots'] == small_robot.num_joints
    for robot in quads + [small_robot]:
        dist = policy_forward(_batch(robot), robot, params)
        assert dist.mean.shape == (2, robot.num_joints)
        assert policy_value(_batch(robot), robot, params).shape == (2,)


def test_multihead_needs_robots():
    with pytest.raises(PolicyError):
        init_policy_params(_config('multihead'), np.random.default_rng(0))


def test_multihead_rejects_overflow_and_missing_head(quads, small_robot):
    params = init_policy_params(_config('multihead'), np.random.default_rng(0), quads[:1])
    with pytest.raises(PolicyError):
        check_robot_supported(params, quads[1])
    with pytest.raises(PolicyError):
        policy_forward(_batch(quads[1]), quads[1], params)
    with pytest.raises(PolicyError):
        check_robot_supported(params, small_robot)


def test_expand_head_keeps_existing_outputs(quads):
    params = init_policy_params(_config('multihead'), np.random.default_rng(0), quads)
    grown = expand_head(params, 'quadruped', 16, np.random.default_rng(1))
    assert grown.registry['heads']['quadruped']['joint_slots'] == 16
    for robot in quads:
        batch = _batch(robot)
        np.testing.assert_allclose(policy_forward(batch, robot, grown).mean.values,
                                   policy_forward(batch, robot, params).mean.values, atol=1e-12)
        np.testing.assert_allclose(policy_value(batch, robot, grown).values,
                                   policy_value(batch, robot, params).values, atol=1e-12)
    big = generate_surrogate_robot(3, 'quadruped', (16, 16))
    check_robot_supported(grown, big)
    assert policy_forward(_batch(big), big, grown).mean.shape == (2, 16)


def test_expand_head_cannot_shrink(quads):
    params = init_policy_params(_config('multihead'), np.random.default_rng(0), quads)
    with pytest.raises(PolicyError):
        expand_head(params, 'quadruped', 8, np.random.default_rng(1))
    with pytest.raises(PolicyError):
        expand_head(params, 'hexapod', 18, np.random.default_rng(1))


def test_padding_policy_task_slots(quads, small_robot):
    params = init_policy_params(_config('padding'), np.random.default_rng(0), quads)
    assert params.registry['tasks'] == [r.name for r in quads]
    assert policy_forward(_batch(quads[1]), quads[1], params).mean.shape == (2, 12)
    with pytest.raises(PolicyError):
        check_robot_supported(params, small_robot)

    registered = register_task(params, small_robot)
    check_robot_supported(registered, small_robot)
    assert policy_forward(_batch(small_robot), small_robot, registered).mean.shape == (2, small_robot.num_joints)
    assert register_task(registered, small_robot) is registered

    extra = generate_surrogate_robot(9, 'quadruped', (8, 8))
    with pytest.raises(PolicyError):
        register_task(registered, extra)


def test_padding_rejects_oversized_robot():
    big = generate_surrogate_robot(0, 'humanoid', (20, 20))
    with pytest.raises(PolicyError):
        init_policy_params(_config('padding'), np.random.default_rng(0), [big])


@pytest.mark.parametrize("architecture", ['multihead', 'padding'])
def test_baseline_checkpoints_roundtrip(quads, tmp_path, architecture):
    params = init_policy_params(_config(architecture), np.random.default_rng(0), quads)
    loaded = load_checkpoint(save_checkpoint(params, str(tmp_path / f'{architecture}.npz'))).params
    assert params_digest(loaded) == params_digest(params)
    assert loaded.registry == params.registry
