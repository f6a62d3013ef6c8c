"""
Morphology Module
Robot morphology specs: loading, validation, description vectors,
procedural surrogate robots and domain randomization of robot attributes
"""

import logging
import math
import os
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import yaml

from reward import RewardCoefficients, RewardConfigError, load_coefficients

logger = logging.getLogger(__name__)

MORPHOLOGY_CLASSES = ('quadruped', 'biped', 'humanoid', 'hexapod', 'other')
FOOT_SIDES = ('left', 'right', 'center')
AXIS_TOLERANCE = 1e-9

# Global normalization constants, one per description field
JOINT_DESCRIPTION_FIELDS: Tuple[Tuple[str, float], ...] = (
    ('position_x', 1.0),
    ('position_y', 1.0),
    ('position_z', 1.0),
    ('axis_x', 1.0),
    ('axis_y', 1.0),
    ('axis_z', 1.0),
    ('child_count', 4.0),
    ('q_nominal', math.pi),
    ('torque_limit', 200.0),
    ('velocity_limit', 50.0),
    ('damping', 10.0),
    ('rotor_inertia', 0.1),
    ('stiffness', 100.0),
    ('friction', 1.0),
    ('control_min', math.pi),
    ('control_max', math.pi),
)

FOOT_DESCRIPTION_FIELDS: Tuple[Tuple[str, float], ...] = (
    ('position_x', 1.0),
    ('position_y', 1.0),
    ('position_z', 1.0),
)

GENERAL_FIELDS: Tuple[Tuple[str, float], ...] = (
    ('kp', 100.0),
    ('kd', 10.0),
    ('action_scale', 1.0),
    ('mass', 100.0),
    ('length', 2.0),
    ('width', 2.0),
    ('height', 2.0),
)

MASS_DIM_FIELDS = ('mass', 'length', 'width', 'height')

JOINT_DESCRIPTION_SIZE = len(JOINT_DESCRIPTION_FIELDS) + len(GENERAL_FIELDS)
FOOT_DESCRIPTION_SIZE = len(FOOT_DESCRIPTION_FIELDS) + len(GENERAL_FIELDS)

# Column groups touched by description perturbations
DESCRIPTION_GROUPS: Dict[str, Tuple[str, ...]] = {
    'pd': ('kp', 'kd', 'action_scale'),
    'rotor_inertia': ('rotor_inertia',),
    'friction': ('friction',),
    'damping': ('damping',),
    'mass_dims': MASS_DIM_FIELDS,
}


class RobotSpecError(ValueError):
    """Raised when a robot spec cannot be parsed or violates an invariant"""

    def __init__(self, field_name: str, message: str, line: Optional[int] = None, source: Optional[str] = None):
        self.field = field_name
        self.line = line
        self.source = source
        self.message = message
        where = f"{source}: " if source else ""
        at_line = f" (line {line})" if line is not None else ""
        super().__init__(f"{where}{field_name}: {message}{at_line}")


@dataclass(frozen=True)
class JointSpec:
    """One actuated joint in its nominal configuration (trunk frame)"""
    name: str
    position: Tuple[float, float, float]
    axis: Tuple[float, float, float]
    child_count: int
    q_nominal: float
    torque_limit: float
    velocity_limit: float
    damping: float
    rotor_inertia: float
    stiffness: float
    friction: float
    control_min: float
    control_max: float

    @property
    def control_range(self) -> float:
        return self.control_max - self.control_min


@dataclass(frozen=True)
class FootSpec:
    """Foot position in the nominal configuration and its symmetry side"""
    name: str
    position: Tuple[float, float, float]
    side: str


@dataclass(frozen=True)
class RobotSpec:
    """Complete morphology of one robot; validated on construction"""
    name: str
    morphology_class: str
    joints: Tuple[JointSpec, ...]
    feet: Tuple[FootSpec, ...]
    kp: float
    kd: float
    action_scale: float
    mass: float
    length: float
    width: float
    height: float
    nominal_height: float
    reward_coefficients: Optional[RewardCoefficients] = field(default=None, compare=True)

    def __post_init__(self):
        object.__setattr__(self, 'joints', tuple(self.joints))
        object.__setattr__(self, 'feet', tuple(self.feet))
        validate_robot_spec(self)
        arrays = {}
        for attr in ('q_nominal', 'torque_limit', 'velocity_limit', 'damping', 'rotor_inertia',
                     'stiffness', 'friction', 'control_min', 'control_max'):
            arr = np.array([getattr(j, attr) for j in self.joints], dtype=np.float64)
            arr.setflags(write=False)
            arrays[attr] = arr
        object.__setattr__(self, '_arrays', arrays)
        object.__setattr__(self, '_descriptions', {})

    @property
    def num_joints(self) -> int:
        return len(self.joints)

    @property
    def num_feet(self) -> int:
        return len(self.feet)

    @property
    def joint_names(self) -> List[str]:
        return [j.name for j in self.joints]

    def joint_array(self, attribute: str) -> np.ndarray:
        """Per-joint attribute as a read-only array in joint order"""
        return self._arrays[attribute]


def _fail(field_name: str, message: str) -> None:
    raise RobotSpecError(field_name, message)


def validate_robot_spec(spec: RobotSpec) -> None:
    """
    Check every RobotSpec invariant.

    Raises:
        RobotSpecError naming the offending field
    """
    if not spec.name:
        _fail('name', "must be non-empty")
    if spec.morphology_class not in MORPHOLOGY_CLASSES:
        _fail('class', f"unknown morphology class '{spec.morphology_class}', expected one of {MORPHOLOGY_CLASSES}")
    if len(spec.joints) < 1:
        _fail('joints', "at least one joint is required")
    if len(spec.feet) < 1:
        _fail('feet', "at least one foot is required")
    for attr in ('mass', 'length', 'width', 'height', 'action_scale', 'nominal_height'):
        value = getattr(spec, attr)
        if not np.isfinite(value) or value <= 0:
            _fail(f'body.{attr}' if attr != 'action_scale' else 'pd.action_scale', f"must be positive, got {value}")
    for attr in ('kp', 'kd'):
        value = getattr(spec, attr)
        if not np.isfinite(value) or value < 0:
            _fail(f'pd.{attr}', f"must be nonnegative, got {value}")

    seen = set()
    for i, joint in enumerate(spec.joints):
        where = f'joints[{i}]'
        if joint.name in seen:
            _fail(f'{where}.name', f"duplicate joint name '{joint.name}'")
        seen.add(joint.name)
        if len(joint.position) != 3 or not np.all(np.isfinite(joint.position)):
            _fail(f'{where}.position', "must be three finite numbers")
        if len(joint.axis) != 3:
            _fail(f'{where}.axis', "must be a 3-vector")
        norm = float(np.linalg.norm(joint.axis))
        if abs(norm - 1.0) > AXIS_TOLERANCE:
            _fail(f'{where}.axis', f"must have unit norm, got {norm}")
        if joint.child_count < 0:
            _fail(f'{where}.children', "must be nonnegative")
        if not joint.control_min < joint.control_max:
            _fail(f'{where}.control_range', f"min {joint.control_min} must be below max {joint.control_max}")
        if not joint.control_min <= joint.q_nominal <= joint.control_max:
            _fail(f'{where}.q_nominal', f"{joint.q_nominal} outside control range")
        if joint.torque_limit <= 0:
            _fail(f'{where}.torque_limit', "must be positive")
        if joint.velocity_limit <= 0:
            _fail(f'{where}.velocity_limit', "must be positive")
        for attr in ('damping', 'rotor_inertia', 'stiffness', 'friction'):
            value = getattr(joint, attr)
            if not np.isfinite(value) or value < 0:
                _fail(f'{where}.{attr}', f"must be nonnegative, got {value}")

    for i, foot in enumerate(spec.feet):
        where = f'feet[{i}]'
        if foot.side not in FOOT_SIDES:
            _fail(f'{where}.side', f"must be one of {FOOT_SIDES}, got '{foot.side}'")
        if len(foot.position) != 3 or not np.all(np.isfinite(foot.position)):
            _fail(f'{where}.position', "must be three finite numbers")


# ---------------------------------------------------------------------------
# Spec files
# ---------------------------------------------------------------------------

def _require(data: dict, key: str, where: str):
    if not isinstance(data, dict) or key not in data:
        raise RobotSpecError(f'{where}{key}' if where else key, "missing required field")
    return data[key]


def _vec3(value, where: str) -> Tuple[float, float, float]:
    try:
        vec = tuple(float(v) for v in value)
    except (TypeError, ValueError):
        raise RobotSpecError(where, f"expected three numbers, got {value!r}")
    if len(vec) != 3:
        raise RobotSpecError(where, f"expected three numbers, got {len(vec)}")
    return vec


def _number(data: dict, key: str, where: str) -> float:
    value = _require(data, key, where)
    try:
        return float(value)
    except (TypeError, ValueError):
        raise RobotSpecError(f'{where}{key}', f"expected a number, got {value!r}")


def _parse_joint(entry: dict, index: int) -> JointSpec:
    where = f'joints[{index}].'
    control = _require(entry, 'control_range', where)
    if not isinstance(control, (list, tuple)) or len(control) != 2:
        raise RobotSpecError(f'{where}control_range', "expected [min, max]")
    return JointSpec(
        name=str(_require(entry, 'name', where)),
        position=_vec3(_require(entry, 'position', where), f'{where}position'),
        axis=_vec3(_require(entry, 'axis', where), f'{where}axis'),
        child_count=int(entry.get('children', 0)),
        q_nominal=_number(entry, 'q_nominal', where),
        torque_limit=_number(entry, 'torque_limit', where),
        velocity_limit=_number(entry, 'velocity_limit', where),
        damping=float(entry.get('damping', 0.0)),
        rotor_inertia=float(entry.get('rotor_inertia', 0.0)),
        stiffness=float(entry.get('stiffness', 0.0)),
        friction=float(entry.get('friction', 0.0)),
        control_min=float(control[0]),
        control_max=float(control[1]),
    )


def _parse_foot(entry: dict, index: int) -> FootSpec:
    where = f'feet[{index}].'
    return FootSpec(
        name=str(_require(entry, 'name', where)),
        position=_vec3(_require(entry, 'position', where), f'{where}position'),
        side=str(_require(entry, 'side', where)),
    )


def robot_spec_from_dict(data: dict, single_reward_set: bool = False) -> RobotSpec:
    """Build a validated RobotSpec from a parsed spec document"""
    if not isinstance(data, dict):
        raise RobotSpecError('<root>', "spec document must be a mapping")
    pd_block = _require(data, 'pd', '')
    body = _require(data, 'body', '')
    joints = _require(data, 'joints', '')
    feet = _require(data, 'feet', '')
    if not isinstance(joints, list):
        raise RobotSpecError('joints', "expected a list")
    if not isinstance(feet, list):
        raise RobotSpecError('feet', "expected a list")

    name = str(_require(data, 'name', ''))
    coeff_block = data.get('reward_coefficients')
    try:
        if single_reward_set:
            coefficients = load_coefficients(name, single_reward_set=True)
        elif coeff_block is not None:
            coefficients = RewardCoefficients.from_dict(coeff_block)
        else:
            coefficients = load_coefficients(name)
    except RewardConfigError as e:
        raise RobotSpecError('reward_coefficients', str(e))

    morph_class = str(_require(data, 'class', ''))
    height = _number(body, 'height', 'body.')
    nominal = body.get('nominal_height')
    if nominal is None:
        nominal = default_nominal_height(morph_class, height)

    return RobotSpec(
        name=name,
        morphology_class=morph_class,
        joints=tuple(_parse_joint(j, i) for i, j in enumerate(joints)),
        feet=tuple(_parse_foot(f, i) for i, f in enumerate(feet)),
        kp=_number(pd_block, 'kp', 'pd.'),
        kd=_number(pd_block, 'kd', 'pd.'),
        action_scale=_number(pd_block, 'action_scale', 'pd.'),
        mass=_number(body, 'mass', 'body.'),
        length=_number(body, 'length', 'body.'),
        width=_number(body, 'width', 'body.'),
        height=height,
        nominal_height=float(nominal),
        reward_coefficients=coefficients,
    )


def load_robot_spec(path: str, single_reward_set: bool = False) -> RobotSpec:
    """
    Load and validate a robot spec file

    Args:
        path: Path to the YAML spec file
        single_reward_set: Replace the file's coefficients with the shared set

    Returns:
        Validated RobotSpec
    """
    if not os.path.exists(path):
        raise RobotSpecError('<file>', "spec file not found", source=path)
    with open(path, 'r', encoding='utf-8') as f:
        text = f.read()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, 'problem_mark', None)
        line = mark.line + 1 if mark is not None else None
        problem = getattr(e, 'problem', None) or str(e)
        raise RobotSpecError('<parse>', problem, line=line, source=path)
    try:
        spec = robot_spec_from_dict(data, single_reward_set=single_reward_set)
    except RobotSpecError as e:
        raise RobotSpecError(e.field, e.message, line=e.line, source=path)
    logger.debug(f"Loaded robot spec '{spec.name}' ({spec.num_joints} joints) from {path}")
    return spec


def robot_spec_to_dict(spec: RobotSpec) -> dict:
    data = {
        'name': spec.name,
        'class': spec.morphology_class,
        'pd': {'kp': spec.kp, 'kd': spec.kd, 'action_scale': spec.action_scale},
        'body': {
            'mass': spec.mass,
            'length': spec.length,
            'width': spec.width,
            'height': spec.height,
            'nominal_height': spec.nominal_height,
        },
        'joints': [
            {
                'name': j.name,
                'position': [float(v) for v in j.position],
                'axis': [float(v) for v in j.axis],
                'children': j.child_count,
                'q_nominal': j.q_nominal,
                'torque_limit': j.torque_limit,
                'velocity_limit': j.velocity_limit,
                'damping': j.damping,
                'rotor_inertia': j.rotor_inertia,
                'stiffness': j.stiffness,
                'friction': j.friction,
                'control_range': [j.control_min, j.control_max],
            }
            for j in spec.joints
        ],
        'feet': [
            {'name': f.name, 'position': [float(v) for v in f.position], 'side': f.side}
            for f in spec.feet
        ],
    }
    if spec.reward_coefficients is not None:
        data['reward_coefficients'] = spec.reward_coefficients.to_dict()
    return data


def dump_robot_spec(spec: RobotSpec, path: str) -> str:
    """Write a spec file that load_robot_spec reads back to an equal spec"""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        yaml.safe_dump(robot_spec_to_dict(spec), f, sort_keys=False, default_flow_style=None)
    logger.info(f"✓ Wrote robot spec '{spec.name}' to {path}")
    return path


def load_robot_fleet(paths: Sequence[str], single_reward_set: bool = False) -> List[RobotSpec]:
    """Load spec files; directories contribute every *.yaml inside, sorted by name"""
    files: List[str] = []
    for path in paths:
        if os.path.isdir(path):
            files.extend(sorted(
                os.path.join(path, f) for f in os.listdir(path) if f.endswith(('.yaml', '.yml'))
            ))
        else:
            files.append(path)
    robots = [load_robot_spec(p, single_reward_set=single_reward_set) for p in files]
    names = [r.name for r in robots]
    duplicates = sorted({n for n in names if names.count(n) > 1})
    if duplicates:
        raise RobotSpecError('name', f"duplicate robot names in fleet: {duplicates}")
    return robots


def default_nominal_height(morphology_class: str, height: float) -> float:
    if morphology_class in ('biped', 'humanoid'):
        return 0.95 * height
    return 0.8 * height


# ---------------------------------------------------------------------------
# Description vectors
# ---------------------------------------------------------------------------

def _general_part(robot: RobotSpec, include_mass_dims: bool) -> np.ndarray:
    values = []
    for name, scale in GENERAL_FIELDS:
        if not include_mass_dims and name in MASS_DIM_FIELDS:
            values.append(0.0)
        else:
            values.append(getattr(robot, name) / scale)
    return np.array(values, dtype=np.float64)


def general_part_index(name: str, kind: str = 'joint') -> int:
    """Column of a general-part field inside a joint or foot description"""
    offset = len(JOINT_DESCRIPTION_FIELDS) if kind == 'joint' else len(FOOT_DESCRIPTION_FIELDS)
    names = [n for n, _ in GENERAL_FIELDS]
    return offset + names.index(name)


def build_joint_description(robot: RobotSpec, index: int, include_mass_dims: bool = True) -> np.ndarray:
    """
    Normalized description vector of one joint.

    Args:
        robot: Robot spec
        index: Joint index
        include_mass_dims: When False, mass and dimensions read as zero

    Returns:
        Array of JOINT_DESCRIPTION_SIZE entries in the fixed field order
    """
    if not 0 <= index < robot.num_joints:
        raise IndexError(f"Joint index {index} out of range for {robot.num_joints} joints")
    joint = robot.joints[index]
    raw = list(joint.position) + list(joint.axis) + [
        joint.child_count,
        joint.q_nominal,
        joint.torque_limit,
        joint.velocity_limit,
        joint.damping,
        joint.rotor_inertia,
        joint.stiffness,
        joint.friction,
        joint.control_min,
        joint.control_max,
    ]
    scales = [s for _, s in JOINT_DESCRIPTION_FIELDS]
    specific = np.array(raw, dtype=np.float64) / np.array(scales)
    return np.concatenate([specific, _general_part(robot, include_mass_dims)])


def build_foot_description(robot: RobotSpec, index: int, include_mass_dims: bool = True) -> np.ndarray:
    """Normalized description vector of one foot (FOOT_DESCRIPTION_SIZE entries)"""
    if not 0 <= index < robot.num_feet:
        raise IndexError(f"Foot index {index} out of range for {robot.num_feet} feet")
    specific = np.array(robot.feet[index].position, dtype=np.float64) / np.array(
        [s for _, s in FOOT_DESCRIPTION_FIELDS])
    return np.concatenate([specific, _general_part(robot, include_mass_dims)])


def _cached(robot: RobotSpec, key: tuple, build) -> np.ndarray:
    cache = robot._descriptions
    if key not in cache:
        arr = build()
        arr.setflags(write=False)
        cache[key] = arr
    return cache[key]


def joint_descriptions(robot: RobotSpec, include_mass_dims: bool = True) -> np.ndarray:
    """(J, JOINT_DESCRIPTION_SIZE) read-only description matrix"""
    return _cached(robot, ('joint', include_mass_dims), lambda: np.stack(
        [build_joint_description(robot, i, include_mass_dims) for i in range(robot.num_joints)]))


def foot_descriptions(robot: RobotSpec, include_mass_dims: bool = True) -> np.ndarray:
    """(F, FOOT_DESCRIPTION_SIZE) read-only description matrix"""
    return _cached(robot, ('foot', include_mass_dims), lambda: np.stack(
        [build_foot_description(robot, i, include_mass_dims) for i in range(robot.num_feet)]))


def perturb_descriptions(descriptions: np.ndarray, group: str, factor: float, kind: str = 'joint') -> np.ndarray:
    """
    Multiply one group of description columns by a factor.

    Args:
        descriptions: (N, width) description matrix
        group: Key of DESCRIPTION_GROUPS
        factor: Multiplier
        kind: 'joint' or 'foot'

    Returns:
        Perturbed copy
    """
    if group not in DESCRIPTION_GROUPS:
        raise ValueError(f"Unknown description group '{group}', expected one of {sorted(DESCRIPTION_GROUPS)}")
    out = np.array(descriptions, dtype=np.float64, copy=True)
    joint_names = [n for n, _ in JOINT_DESCRIPTION_FIELDS]
    general_names = [n for n, _ in GENERAL_FIELDS]
    for name in DESCRIPTION_GROUPS[group]:
        if name in general_names:
            out[:, general_part_index(name, kind)] *= factor
        elif kind == 'joint':
            out[:, joint_names.index(name)] *= factor
    return out


def shuffle_descriptions(descriptions: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Reassign description rows to elements in a random order"""
    return np.array(descriptions, copy=True)[rng.permutation(descriptions.shape[0])]


# ---------------------------------------------------------------------------
# Procedural surrogate robots
# ---------------------------------------------------------------------------

# Attribute ranges per class, inside the spread of the shipped fleet
CLASS_BODY_RANGES: Dict[str, Dict[str, Tuple[float, float]]] = {
    'quadruped': {'mass': (0.2, 45.0), 'length': (0.17, 1.21), 'width': (0.12, 0.88), 'height': (0.12, 1.37)},
    'biped': {'mass': (3.1, 60.0), 'length': (0.2, 0.6), 'width': (0.28, 0.8), 'height': (0.5, 1.3)},
    'humanoid': {'mass': (3.1, 93.3), 'length': (0.17, 0.55), 'width': (0.28, 1.10), 'height': (0.53, 1.77)},
    'hexapod': {'mass': (0.5, 13.0), 'length': (0.3, 0.8), 'width': (0.3, 0.8), 'height': (0.15, 0.5)},
    'other': {'mass': (0.2, 45.0), 'length': (0.17, 1.21), 'width': (0.12, 0.88), 'height': (0.12, 1.37)},
}

CLASS_COEFFICIENT_TEMPLATE = {
    'quadruped': 'a1',
    'biped': 'cassie',
    'humanoid': 'h1',
    'hexapod': 'hexapod',
    'other': 'a1',
}

MIN_JOINTS, MAX_JOINTS = 4, 24


def _leg_hips(morphology_class: str, legs: int, length: float, width: float) -> List[Tuple[str, float, float]]:
    x, y = 0.4 * length, 0.4 * width
    if morphology_class in ('quadruped',) or (morphology_class == 'other' and legs == 4):
        return [('fl', x, y), ('fr', x, -y), ('rl', -x, y), ('rr', -x, -y)]
    if morphology_class == 'hexapod':
        return [('fl', x, y), ('fr', x, -y), ('ml', 0.0, y), ('mr', 0.0, -y), ('rl', -x, y), ('rr', -x, -y)]
    if morphology_class in ('biped', 'humanoid'):
        return [('l', 0.0, 0.5 * y), ('r', 0.0, -0.5 * y)]
    hips = []
    for k in range(legs):
        angle = 2.0 * math.pi * k / legs
        hips.append((f'leg{k}', round(x * math.cos(angle), 6), round(y * math.sin(angle), 6)))
    return hips


def _foot_side(morphology_class: str, leg_name: str, y: float) -> str:
    if morphology_class == 'hexapod' and leg_name.startswith('m'):
        return 'center'
    if y > 1e-9:
        return 'left'
    if y < -1e-9:
        return 'right'
    return 'center'


def _sample_layout(rng: np.random.Generator, morphology_class: str, low: int, high: int) -> Dict[str, int]:
    """Choose leg count, joints per leg and extra arm/torso joints"""
    options: List[Dict[str, int]] = []
    if morphology_class == 'quadruped':
        options = [{'legs': 4, 'per_leg': k, 'arm': 0, 'torso': 0} for k in range(1, 7) if low <= 4 * k <= high]
    elif morphology_class == 'biped':
        options = [{'legs': 2, 'per_leg': k, 'arm': 0, 'torso': 0} for k in range(2, 7) if low <= 2 * k <= high]
    elif morphology_class == 'hexapod':
        options = [{'legs': 6, 'per_leg': k, 'arm': 0, 'torso': 0} for k in range(1, 5) if low <= 6 * k <= high]
    elif morphology_class == 'humanoid':
        options = [
            {'legs': 2, 'per_leg': k, 'arm': a, 'torso': t}
            for k in range(2, 7) for a in range(0, 5) for t in (0, 1)
            if low <= 2 * k + 2 * a + t <= high
        ]
    elif morphology_class == 'other':
        options = [
            {'legs': n, 'per_leg': k, 'arm': 0, 'torso': 0}
            for n in (3, 5) for k in range(1, 5) if low <= n * k <= high
        ]
    if not options:
        raise RobotSpecError('joint_count_range', f"no {morphology_class} layout with {low}..{high} joints")
    return options[int(rng.integers(len(options)))]


def _make_joint(rng: np.random.Generator, name: str, position, axis, children: int,
                q_nominal: float, torque_scale: float) -> JointSpec:
    lower = q_nominal - float(rng.uniform(0.4, 1.2))
    upper = q_nominal + float(rng.uniform(0.4, 1.2))
    return JointSpec(
        name=name,
        position=tuple(round(float(v), 6) for v in position),
        axis=tuple(float(v) for v in axis),
        child_count=children,
        q_nominal=q_nominal,
        torque_limit=float(np.clip(rng.uniform(10.0, 40.0) * torque_scale, 2.0, 400.0)),
        velocity_limit=float(rng.uniform(10.0, 30.0)),
        damping=float(rng.uniform(0.0, 0.5)),
        rotor_inertia=float(rng.uniform(0.0, 0.02)),
        stiffness=float(rng.uniform(0.0, 0.5)),
        friction=float(rng.uniform(0.0, 0.2)),
        control_min=lower,
        control_max=upper,
    )


def generate_surrogate_robot(seed: int,
                             morphology_class: str = 'quadruped',
                             joint_count_range: Tuple[int, int] = (8, 16)) -> RobotSpec:
    """
    Procedurally generate a robot morphology.

    Legs are vertical chains under hip mounts with alternating knee
    offsets so joint motion moves the foot both along and across the
    ground. Humanoids add arm chains (no feet) and an optional torso
    joint. Same seed and arguments give an identical spec.

    Args:
        seed: Generator seed
        morphology_class: One of MORPHOLOGY_CLASSES
        joint_count_range: Inclusive (low, high) joint count inside [4, 24]

    Returns:
        Validated RobotSpec
    """
    if morphology_class not in MORPHOLOGY_CLASSES:
        raise RobotSpecError('class', f"unknown morphology class '{morphology_class}'")
    low, high = int(joint_count_range[0]), int(joint_count_range[1])
    if not MIN_JOINTS <= low <= high <= MAX_JOINTS:
        raise RobotSpecError('joint_count_range', f"({low}, {high}) not inside [{MIN_JOINTS}, {MAX_JOINTS}]")

    rng = np.random.default_rng(seed)
    layout = _sample_layout(rng, morphology_class, low, high)

    ranges = CLASS_BODY_RANGES[morphology_class]
    size = float(rng.uniform(0.0, 1.0))
    mass_lo, mass_hi = ranges['mass']
    mass = mass_lo * (mass_hi / mass_lo) ** size

    def dim(key: str) -> float:
        lo, hi = ranges[key]
        return lo + (hi - lo) * float(np.clip(size + rng.uniform(-0.1, 0.1), 0.0, 1.0))

    length, width, height = dim('length'), dim('width'), dim('height')
    kp = float(rng.uniform(20.0, 80.0))
    kd = float(np.clip(kp / 40.0 * rng.uniform(0.8, 1.2), 0.5, 2.0))
    action_scale = float(rng.uniform(0.25, 0.75))
    nominal_height = default_nominal_height(morphology_class, height)
    torque_scale = math.sqrt(mass / 10.0)

    joints: List[JointSpec] = []
    feet: List[FootSpec] = []
    per_leg = layout['per_leg']
    leg_length = nominal_height
    knee_offset = 0.15 * leg_length
    foot_offset = -0.05 * leg_length

    if layout['torso']:
        joints.append(_make_joint(rng, 'torso_yaw', (0.0, 0.0, 0.1 * height), (0.0, 0.0, 1.0),
                                  layout['legs'] + (2 if layout['arm'] else 0), 0.0, torque_scale))

    for leg_name, hx, hy in _leg_hips(morphology_class, layout['legs'], length, width):
        abduction = per_leg >= 3
        pitch_count = per_leg - (1 if abduction else 0)
        if abduction:
            joints.append(_make_joint(rng, f'{leg_name}_abduction', (hx, hy, 0.0), (1.0, 0.0, 0.0),
                                      1, 0.0, torque_scale))
        for i in range(pitch_count):
            depth = -leg_length * i / max(pitch_count, 1)
            x = hx + (knee_offset if i % 2 == 1 else 0.0)
            if i == 0:
                q_nominal = float(rng.uniform(0.3, 0.9))
            else:
                q_nominal = -float(rng.uniform(0.8, 1.6)) * (1 if i % 2 == 1 else -1)
            children = 1 if i < pitch_count - 1 else 0
            joints.append(_make_joint(rng, f'{leg_name}_pitch{i}', (x, hy, depth), (0.0, 1.0, 0.0),
                                      children, q_nominal, torque_scale))
        feet.append(FootSpec(
            name=f'{leg_name}_foot',
            position=(round(hx + foot_offset, 6), round(hy, 6), round(-leg_length, 6)),
            side=_foot_side(morphology_class, leg_name, hy),
        ))

    for arm_side, sign in (('larm', 1.0), ('rarm', -1.0)):
        for i in range(layout['arm']):
            axis = (0.0, 1.0, 0.0) if i % 2 == 0 else (1.0, 0.0, 0.0)
            position = (0.0, sign * 0.45 * width, 0.3 * height - 0.15 * height * i)
            children = 1 if i < layout['arm'] - 1 else 0
            joints.append(_make_joint(rng, f'{arm_side}_{i}', position, axis, children,
                                      float(rng.uniform(-0.3, 0.3)), torque_scale))

    coefficients = load_coefficients(CLASS_COEFFICIENT_TEMPLATE[morphology_class])
    return RobotSpec(
        name=f'surrogate_{morphology_class}_{seed}',
        morphology_class=morphology_class,
        joints=tuple(joints),
        feet=tuple(feet),
        kp=kp,
        kd=kd,
        action_scale=action_scale,
        mass=mass,
        length=length,
        width=width,
        height=height,
        nominal_height=nominal_height,
        reward_coefficients=coefficients,
    )


# ---------------------------------------------------------------------------
# Domain randomization of robot attributes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RandomizationConfig:
    """Half-widths of the randomization ranges (multiplicative unless noted)"""
    enabled: bool = True
    mass: float = 0.2
    limits: float = 0.2
    damping: float = 0.2
    rotor_inertia: float = 0.2
    stiffness: float = 0.2
    friction: float = 0.2
    gains: float = 0.2
    action_scale: float = 0.2
    q_nominal_offset: float = 0.05      # additive, rad
    control_range_offset: float = 0.05  # additive, rad

    @classmethod
    def disabled(cls) -> 'RandomizationConfig':
        return cls(enabled=False, mass=0.0, limits=0.0, damping=0.0, rotor_inertia=0.0, stiffness=0.0,
                   friction=0.0, gains=0.0, action_scale=0.0, q_nominal_offset=0.0, control_range_offset=0.0)

    @property
    def is_identity(self) -> bool:
        widths = (self.mass, self.limits, self.damping, self.rotor_inertia, self.stiffness, self.friction,
                  self.gains, self.action_scale, self.q_nominal_offset, self.control_range_offset)
        return not self.enabled or all(w == 0.0 for w in widths)


def _factor(rng: np.random.Generator, half_width: float) -> float:
    if half_width == 0.0:
        return 1.0
    return float(rng.uniform(1.0 - half_width, 1.0 + half_width))


def _offset(rng: np.random.Generator, half_width: float) -> float:
    if half_width == 0.0:
        return 0.0
    return float(rng.uniform(-half_width, half_width))


def randomize_robot(spec: RobotSpec,
                    rng: np.random.Generator,
                    config: Optional[RandomizationConfig] = None) -> RobotSpec:
    """
    Draw a randomized copy of a robot.

    Control ranges never invert: an offset draw that would close the range
    keeps the original bounds, and q_nominal is clamped inside the range.

    Args:
        spec: Base robot
        rng: Random generator (advanced by the draw)
        config: Randomization ranges; defaults to RandomizationConfig()

    Returns:
        Randomized RobotSpec (identical to spec when every range is zero)
    """
    config = config or RandomizationConfig()
    if config.is_identity:
        return spec

    joints = []
    for joint in spec.joints:
        lower = joint.control_min + _offset(rng, config.control_range_offset)
        upper = joint.control_max + _offset(rng, config.control_range_offset)
        if not lower < upper:
            lower, upper = joint.control_min, joint.control_max
        q_nominal = joint.q_nominal + _offset(rng, config.q_nominal_offset)
        q_nominal = min(max(q_nominal, lower), upper)
        joints.append(replace(
            joint,
            q_nominal=q_nominal,
            torque_limit=joint.torque_limit * _factor(rng, config.limits),
            velocity_limit=joint.velocity_limit * _factor(rng, config.limits),
            damping=joint.damping * _factor(rng, config.damping),
            rotor_inertia=joint.rotor_inertia * _factor(rng, config.rotor_inertia),
            stiffness=joint.stiffness * _factor(rng, config.stiffness),
            friction=joint.friction * _factor(rng, config.friction),
            control_min=lower,
            control_max=upper,
        ))

    return replace(
        spec,
        joints=tuple(joints),
        mass=spec.mass * _factor(rng, config.mass),
        kp=spec.kp * _factor(rng, config.gains),
        kd=spec.kd * _factor(rng, config.gains),
        action_scale=spec.action_scale * _factor(rng, config.action_scale),
    )
