"""
Reward Module
Fourteen-term locomotion reward, per-robot coefficient registry and the
linear penalty curriculum
"""

import logging
import re
from dataclasses import dataclass, replace
from typing import TYPE_CHECKING, Dict, Optional, Sequence, Tuple

import numpy as np

if TYPE_CHECKING:
    from morphology import RobotSpec

logger = logging.getLogger(__name__)

NUM_TERMS = 14

TERM_NAMES = (
    'xy_velocity_tracking',
    'yaw_velocity_tracking',
    'z_velocity',
    'pitch_roll_velocity',
    'pitch_roll_position',
    'joint_nominal_difference',
    'joint_limits',
    'joint_acceleration',
    'joint_torque',
    'action_rate',
    'walking_height',
    'collisions',
    'air_time',
    'symmetry',
)

# Penalty terms (T3..T14) are ramped by the curriculum, tracking terms are not
TRACKING_TERMS = (0, 1)
TRACKING_SIGMA_SQ = 0.25
AIR_TIME_TARGET = 0.5
JOINT_LIMIT_MARGIN = 0.05


class RewardConfigError(ValueError):
    """Raised for unknown robots or malformed coefficient sets"""


@dataclass(frozen=True)
class RewardCoefficients:
    """Final reward coefficients c_1..c_14 and the curriculum length T (env steps)"""
    values: Tuple[float, ...]
    curriculum_steps: float

    def __post_init__(self):
        if len(self.values) != NUM_TERMS:
            raise RewardConfigError(f"Expected {NUM_TERMS} coefficients, got {len(self.values)}")
        vals = tuple(float(v) for v in self.values)
        object.__setattr__(self, 'values', vals)
        if not all(np.isfinite(v) for v in vals) or not np.isfinite(self.curriculum_steps):
            raise RewardConfigError("Reward coefficients must be finite")
        if any(v < 0.0 for v in vals):
            raise RewardConfigError("Reward coefficients must be nonnegative")
        if vals[0] <= 0.0 or vals[1] <= 0.0:
            raise RewardConfigError("Tracking coefficients c_1 and c_2 must be positive")
        if self.curriculum_steps <= 0:
            raise RewardConfigError("Curriculum length must be positive")

    @property
    def tracking_max(self) -> float:
        """Largest per-step reward: both tracking terms at 1"""
        return self.values[0] + self.values[1]

    def with_curriculum(self, curriculum_steps: float) -> 'RewardCoefficients':
        return replace(self, curriculum_steps=float(curriculum_steps))

    def to_dict(self) -> Dict[str, float]:
        out = {f't{i + 1}': v for i, v in enumerate(self.values)}
        out['curriculum_steps'] = self.curriculum_steps
        return out

    @classmethod
    def from_dict(cls, data: Dict[str, float]) -> 'RewardCoefficients':
        missing = [f't{i + 1}' for i in range(NUM_TERMS) if f't{i + 1}' not in data]
        if missing or 'curriculum_steps' not in data:
            raise RewardConfigError(f"Missing reward coefficients: {missing or ['curriculum_steps']}")
        return cls(
            values=tuple(float(data[f't{i + 1}']) for i in range(NUM_TERMS)),
            curriculum_steps=float(data['curriculum_steps']),
        )


@dataclass(frozen=True)
class RewardBreakdown:
    """Raw term values, curriculum-weighted values and the clipped total"""
    raw: Tuple[float, ...]
    weighted: Tuple[float, ...]
    total: float

    @property
    def tracking(self) -> float:
        return self.weighted[0] + self.weighted[1]

    def to_dict(self) -> Dict[str, float]:
        out = {f'raw_{name}': v for name, v in zip(TERM_NAMES, self.raw)}
        out.update({f'weighted_{name}': v for name, v in zip(TERM_NAMES, self.weighted)})
        out['total'] = self.total
        return out


def _coeffs(t1: float, t2: float, steps: float, **overrides: float) -> RewardCoefficients:
    base = {
        3: 2.0, 4: 0.05, 5: 0.2, 6: 0.0, 7: 10.0, 8: 2.5e-7, 9: 2e-4,
        10: 0.01, 11: 30.0, 12: 1.0, 13: 0.1, 14: 0.5,
    }
    for key, value in overrides.items():
        base[int(key[1:])] = value
    values = (t1, t2) + tuple(base[i] for i in range(3, NUM_TERMS + 1))
    return RewardCoefficients(values=values, curriculum_steps=steps)


# Keys are lowercase alphanumeric robot names
COEFFICIENT_REGISTRY: Dict[str, RewardCoefficients] = {
    'anymalb': _coeffs(2.0, 1.0, 20e6),
    'anymalc': _coeffs(2.0, 1.0, 20e6),
    'barkourv0': _coeffs(3.0, 1.5, 15e6),
    'barkourvb': _coeffs(2.0, 1.0, 15e6),
    'silverbadger': _coeffs(2.0, 1.0, 12e6),
    'bittle': _coeffs(5.0, 2.5, 40e6),
    'a1': _coeffs(2.0, 1.0, 12e6),
    'go1': _coeffs(2.0, 1.0, 12e6),
    'go2': _coeffs(2.0, 1.0, 12e6),
    'cassie': _coeffs(3.0, 1.5, 50e6, t9=2e-5),
    'talos': _coeffs(4.0, 2.0, 80e6, t6=0.2, t9=2e-5),
    'op3': _coeffs(4.0, 2.0, 40e6, t4=0.1, t6=0.4, t8=1.2e-6, t9=4e-4, t10=6e-3),
    'naov5': _coeffs(4.0, 2.0, 40e6, t4=0.1, t6=0.15, t8=1.2e-6, t9=4e-4, t10=6e-3),
    'g1': _coeffs(3.0, 1.5, 50e6, t6=0.2, t9=5e-5),
    'h1': _coeffs(2.0, 1.0, 50e6, t6=0.2, t9=2e-5),
    'hexapod': _coeffs(4.0, 2.0, 15e6),
}

# Conservative set shared by every robot: high tracking, low penalties
SINGLE_REWARD_SET = _coeffs(5.0, 2.5, 80e6, t6=0.2, t9=2e-5, t10=6e-3)


def normalize_robot_name(name: str) -> str:
    return re.sub(r'[^a-z0-9]', '', name.lower())


def load_coefficients(robot_name: str, single_reward_set: bool = False) -> RewardCoefficients:
    """
    Look up the reward coefficients of a robot.

    Args:
        robot_name: Robot name, matched case- and punctuation-insensitively;
            vendor prefixes are tolerated ("Unitree A1" -> "a1")
        single_reward_set: Return the shared conservative set instead

    Returns:
        RewardCoefficients for the robot
    """
    if single_reward_set:
        return SINGLE_REWARD_SET
    key = normalize_robot_name(robot_name)
    if key in COEFFICIENT_REGISTRY:
        return COEFFICIENT_REGISTRY[key]
    suffixes = [k for k in COEFFICIENT_REGISTRY if key.endswith(k)]
    if suffixes:
        return COEFFICIENT_REGISTRY[max(suffixes, key=len)]
    raise RewardConfigError(
        f"No reward coefficients registered for robot '{robot_name}' "
        f"(enable the single reward set or add a reward_coefficients block)"
    )


def resolve_coefficients(robot: 'RobotSpec', single_reward_set: bool = False) -> RewardCoefficients:
    """Coefficients carried by the robot spec, else the registry entry for its name"""
    if single_reward_set:
        return SINGLE_REWARD_SET
    if robot.reward_coefficients is not None:
        return robot.reward_coefficients
    return load_coefficients(robot.name)


def curriculum_coefficient(t: float, T: float, r_final: float) -> float:
    """Linear ramp r_c(t) = min(t / T, 1) * r_final"""
    if T <= 0:
        raise RewardConfigError(f"Curriculum length must be positive, got {T}")
    return min(t / T, 1.0) * r_final


def symmetry_pairs(sides: Sequence[str]) -> Tuple[Tuple[int, int], ...]:
    """Pair the k-th left foot with the k-th right foot in listed order"""
    lefts = [i for i, s in enumerate(sides) if s == 'left']
    rights = [i for i, s in enumerate(sides) if s == 'right']
    return tuple(zip(lefts, rights))


def compute_reward(state,
                   next_state,
                   action: np.ndarray,
                   previous_action: np.ndarray,
                   robot: 'RobotSpec',
                   t: float,
                   dt: float = 0.02,
                   coefficients: Optional[RewardCoefficients] = None) -> RewardBreakdown:
    """
    Evaluate all reward terms for one transition.

    Args:
        state: Environment state before the step (command, velocities, air timers)
        next_state: Environment state after the step
        action: Action applied during the step
        previous_action: Action of the step before
        robot: Robot the transition belongs to
        t: Training step driving the penalty curriculum
        dt: Control period used for finite differences
        coefficients: Override for the robot's coefficients

    Returns:
        RewardBreakdown with raw, weighted and clipped total values
    """
    action = np.asarray(action, dtype=np.float64)
    previous_action = np.asarray(previous_action, dtype=np.float64)
    nj = robot.num_joints
    if action.shape != (nj,) or previous_action.shape != (nj,):
        raise RewardConfigError(
            f"Action arity mismatch: robot has {nj} joints, got {action.shape} and {previous_action.shape}"
        )
    if next_state.q.shape != (nj,) or next_state.contact.shape != (robot.num_feet,):
        raise RewardConfigError("State arity does not match robot")
    coeffs = coefficients or resolve_coefficients(robot)

    cmd = state.command
    v = next_state.v
    omega = next_state.omega

    q_nom = robot.joint_array('q_nominal')
    q_min = robot.joint_array('control_min')
    q_max = robot.joint_array('control_max')
    margin = JOINT_LIMIT_MARGIN * (q_max - q_min)
    q = next_state.q
    outside = (q < q_min + margin) | (q > q_max - margin)

    qdd = (next_state.qd - state.qd) / dt
    adot = (action - previous_action) / dt

    touchdown = next_state.contact.astype(np.float64)
    air_term = -float(np.sum(touchdown * (state.air_time - AIR_TIME_TARGET)))

    airborne = ~next_state.contact
    pairs = symmetry_pairs([f.side for f in robot.feet])
    symmetry = -float(sum(1.0 for l, r in pairs if airborne[l] and airborne[r]))

    raw = (
        float(np.exp(-np.sum((v[:2] - cmd[:2]) ** 2) / TRACKING_SIGMA_SQ)),
        float(np.exp(-(omega[2] - cmd[2]) ** 2 / TRACKING_SIGMA_SQ)),
        -float(v[2] ** 2),
        -float(omega[0] ** 2 + omega[1] ** 2),
        -float(next_state.roll ** 2 + next_state.pitch ** 2),
        -float(np.sum((q - q_nom) ** 2)),
        -float(np.count_nonzero(outside)),
        -float(np.sum(qdd ** 2)),
        -float(np.sum(next_state.torque ** 2)),
        -float(np.sum(adot ** 2)),
        -float((next_state.h - robot.nominal_height) ** 2),
        -float(next_state.collision),
        air_term,
        symmetry,
    )

    weighted = []
    for i, (value, c) in enumerate(zip(raw, coeffs.values)):
        weight = c if i in TRACKING_TERMS else curriculum_coefficient(t, coeffs.curriculum_steps, c)
        weighted.append(weight * value)
    total = max(0.0, float(np.sum(weighted)))
    return RewardBreakdown(raw=raw, weighted=tuple(weighted), total=total)
