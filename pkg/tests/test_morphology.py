"""
Tests for robot specs, description vectors and the surrogate robot generator
"""

import copy
import os

import numpy as np
import pytest

from morphology import (
    FOOT_DESCRIPTION_SIZE,
    JOINT_DESCRIPTION_SIZE,
    RandomizationConfig,
    RobotSpecError,
    dump_robot_spec,
    foot_descriptions,
    general_part_index,
    generate_surrogate_robot,
    joint_descriptions,
    load_robot_fleet,
    load_robot_spec,
    perturb_descriptions,
    randomize_robot,
    robot_spec_from_dict,
    robot_spec_to_dict,
    shuffle_descriptions,
)


def test_a1_spec_values(a1):
    assert a1.num_joints == 12
    assert a1.num_feet == 4
    assert a1.morphology_class == 'quadruped'
    assert a1.kp == 20.0
    assert a1.kd == 0.5
    assert a1.action_scale == 0.25
    assert a1.nominal_height == pytest.approx(0.8 * 0.48)
    assert [f.side for f in a1.feet] == ['left', 'right', 'left', 'right']


def test_description_sizes(a1):
    assert JOINT_DESCRIPTION_SIZE == 23
    assert FOOT_DESCRIPTION_SIZE == 10
    assert joint_descriptions(a1).shape == (12, 23)
    assert foot_descriptions(a1).shape == (4, 10)


def test_description_normalization(a1):
    desc = joint_descriptions(a1)
    assert desc[0, general_part_index('kp')] == pytest.approx(0.2)
    assert desc[0, general_part_index('mass')] == pytest.approx(0.125)
    np.testing.assert_allclose(desc[1, 3:6], [0.0, 1.0, 0.0])
    # Shared general part is identical for every joint
    assert np.all(desc[:, 16:] == desc[0, 16:])


def test_mass_dims_can_be_zeroed(a1):
    desc = joint_descriptions(a1, include_mass_dims=False)
    for name in ('mass', 'length', 'width', 'height'):
        assert np.all(desc[:, general_part_index(name)] == 0.0)
    assert np.all(desc[:, general_part_index('kp')] > 0.0)


def test_description_matrices_are_read_only(a1):
    with pytest.raises(ValueError):
        joint_descriptions(a1)[0, 0] = 1.0


def test_fleet_loads_from_directory(robot_dir):
    fleet = load_robot_fleet([robot_dir])
    assert len(fleet) == 16
    assert len({r.name for r in fleet}) == 16
    for robot in fleet:
        assert 4 <= robot.num_joints <= 24
        assert robot.reward_coefficients is not None


def test_fleet_rejects_duplicate_names(robot_dir):
    path = os.path.join(robot_dir, 'unitree_a1.yaml')
    with pytest.raises(RobotSpecError):
        load_robot_fleet([path, path])


def test_dump_and_reload_gives_equal_spec(a1, tmp_path):
    path = dump_robot_spec(a1, str(tmp_path / 'a1.yaml'))
    assert load_robot_spec(path) == a1


@pytest.mark.parametrize("mutate, field", [
    (lambda d: d['joints'][0].update(axis=[1.0, 1.0, 0.0]), 'joints[0].axis'),
    (lambda d: d['joints'][0].update(q_nominal=5.0), 'joints[0].q_nominal'),
    (lambda d: d['joints'][0].update(control_range=[0.5, -0.5]), 'joints[0].control_range'),
    (lambda d: d['joints'][1].update(name=d['joints'][0]['name']), 'joints[1].name'),
    (lambda d: d['joints'][0].update(torque_limit=0.0), 'joints[0].torque_limit'),
    (lambda d: d['feet'][0].update(side='up'), 'feet[0].side'),
    (lambda d: d['body'].update(mass=-1.0), 'body.mass'),
    (lambda d: d.update({'class': 'snake'}), 'class'),
    (lambda d: d.pop('pd'), 'pd'),
])
def test_invalid_spec_names_the_field(a1, mutate, field):
    data = copy.deepcopy(robot_spec_to_dict(a1))
    mutate(data)
    with pytest.raises(RobotSpecError) as exc:
        robot_spec_from_dict(data)
    assert exc.value.field == field


def test_missing_file_and_parse_error(tmp_path):
    with pytest.raises(RobotSpecError) as exc:
        load_robot_spec(str(tmp_path / 'nope.yaml'))
    assert exc.value.field == '<file>'

    bad = tmp_path / 'bad.yaml'
    bad.write_text("name: broken\njoints: [unclosed\n", encoding='utf-8')
    with pytest.raises(RobotSpecError) as exc:
        load_robot_spec(str(bad))
    assert exc.value.field == '<parse>'
    assert exc.value.source == str(bad)


def test_unknown_robot_without_coefficients_is_rejected(a1):
    data = robot_spec_to_dict(a1)
    data.pop('reward_coefficients')
    data['name'] = 'mystery_walker'
    with pytest.raises(RobotSpecError) as exc:
        robot_spec_from_dict(data)
    assert exc.value.field == 'reward_coefficients'
    assert robot_spec_from_dict(data, single_reward_set=True).name == 'mystery_walker'


def test_generator_is_deterministic():
    a = generate_surrogate_robot(3, 'quadruped', (12, 12))
    b = generate_surrogate_robot(3, 'quadruped', (12, 12))
    c = generate_surrogate_robot(4, 'quadruped', (12, 12))
    assert a == b
    assert a.num_joints == 12
    assert a != c


@pytest.mark.parametrize("morphology_class, joint_range", [
    ('quadruped', (8, 16)),
    ('biped', (4, 12)),
    ('humanoid', (10, 24)),
    ('hexapod', (6, 18)),
    ('other', (4, 20)),
])
def test_generator_respects_joint_range(morphology_class, joint_range):
    for seed in range(5):
        robot = generate_surrogate_robot(seed, morphology_class, joint_range)
        assert joint_range[0] <= robot.num_joints <= joint_range[1]
        assert robot.morphology_class == morphology_class
        assert robot.num_feet >= 2


@pytest.mark.parametrize("kwargs", [
    dict(morphology_class='snake'),
    dict(joint_count_range=(2, 8)),
    dict(joint_count_range=(12, 30)),
    dict(morphology_class='hexapod', joint_count_range=(7, 11)),
])
def test_generator_rejects_bad_arguments(kwargs):
    with pytest.raises(RobotSpecError):
        generate_surrogate_robot(0, **kwargs)


def test_perturb_descriptions_scales_one_group(a1):
    desc = joint_descriptions(a1)
    out = perturb_descriptions(desc, 'pd', 2.0)
    for name in ('kp', 'kd', 'action_scale'):
        idx = general_part_index(name)
        np.testing.assert_allclose(out[:, idx], 2.0 * desc[:, idx])
    untouched = [i for i in range(desc.shape[1])
                 if i not in {general_part_index(n) for n in ('kp', 'kd', 'action_scale')}]
    np.testing.assert_array_equal(out[:, untouched], desc[:, untouched])

    feet = foot_descriptions(a1)
    scaled = perturb_descriptions(feet, 'mass_dims', 0.5, kind='foot')
    idx = general_part_index('mass', kind='foot')
    np.testing.assert_allclose(scaled[:, idx], 0.5 * feet[:, idx])

    with pytest.raises(ValueError):
        perturb_descriptions(desc, 'colour', 2.0)


def test_shuffle_descriptions_keeps_rows(a1):
    desc = joint_descriptions(a1)
    shuffled = shuffle_descriptions(desc, np.random.default_rng(1))
    assert sorted(map(tuple, shuffled)) == sorted(map(tuple, desc))


def test_randomization_disabled_is_identity(a1):
    assert randomize_robot(a1, np.random.default_rng(0), RandomizationConfig.disabled()) is a1


def test_randomization_keeps_ranges_valid(a1):
    rng = np.random.default_rng(5)
    config = RandomizationConfig(control_range_offset=0.5, q_nominal_offset=0.5)
    for _ in range(20):
        drawn = randomize_robot(a1, rng, config)
        assert np.all(drawn.joint_array('control_min') < drawn.joint_array('control_max'))
        assert 0.8 * a1.mass <= drawn.mass <= 1.2 * a1.mass
        assert drawn.num_joints == a1.num_joints
