"""
Surrogate Environment Module
Desk-scale legged locomotion surrogate: PD-driven joint dynamics, a
gait-coordination trunk model, per-leg phase contacts, command
sampling, domain randomization and observation assembly
"""

import logging
import os
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from morphology import (
    GENERAL_FIELDS,
    MASS_DIM_FIELDS,
    RandomizationConfig,
    RobotSpec,
    foot_descriptions,
    joint_descriptions,
    randomize_robot,
)
from reward import RewardBreakdown, compute_reward, resolve_coefficients

logger = logging.getLogger(__name__)

GRAVITY = 9.81
JOINT_OBS_SIZE = 3
FOOT_OBS_SIZE = 2
GENERAL_OBS_SIZE = 9 + len(GENERAL_FIELDS)
PRIVILEGED_OBS_SIZE = 4
OBSERVATION_GROUPS = ('joints', 'feet', 'general')

# Observation normalization constants
OBSERVATION_SCALES: Dict[str, float] = {
    'joint_position': 1.0,
    'joint_velocity': 0.05,
    'previous_action': 0.25,
    'contact': 1.0,
    'air_time': 1.0,
    'angular_velocity': 0.25,
    'command': 1.0,
    'gravity': 1.0,
    'linear_velocity': 1.0,
    'height': 1.0,
}


@dataclass(frozen=True)
class EnvConfig:
    """Surrogate environment settings"""
    dt: float = 0.02
    substeps: int = 4
    episode_length: int = 500

    # Commands
    max_command_xy: float = 1.0
    max_command_yaw: float = 1.0
    command_reference_length: float = 0.67
    resample_probability: Optional[float] = None  # defaults to 2 / episode_length

    # Domain randomization
    domain_randomization: bool = True
    randomization: RandomizationConfig = field(default_factory=RandomizationConfig)
    init_joint_noise: float = 0.1
    init_joint_velocity_noise: float = 0.2
    init_trunk_velocity_noise: float = 0.1
    init_orientation_noise: float = 0.05
    perturb_probability: float = 0.002
    perturb_bound: float = 0.5

    # Sensing
    joint_noise: float = 0.01
    foot_noise: float = 0.01
    angular_velocity_noise: float = 0.05
    gravity_noise: float = 0.02
    dropout_probability: float = 0.05
    group_dropout: Tuple[Tuple[str, float], ...] = ()
    include_mass_dims: bool = True

    # Termination
    tilt_limit: float = 1.0
    min_height_fraction: float = 0.3

    # Surrogate dynamics
    base_inertia: float = 0.01
    stride_fraction: float = 0.2  # foot sweep per contact half-cycle, in units of nominal height
    stance_gain: float = 20.0
    drag: float = 1.0
    height_gain: float = 10.0
    tilt_gain: float = 20.0
    tilt_spring: float = 100.0
    tilt_damping: float = 14.0

    # Reward
    single_reward_set: bool = False
    curriculum_scale: float = 1.0

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.episode_length < 1:
            raise ValueError(f"episode_length must be >= 1, got {self.episode_length}")
        if self.substeps < 1:
            raise ValueError(f"substeps must be >= 1, got {self.substeps}")
        for group, p in self.group_dropout:
            if group not in OBSERVATION_GROUPS or not 0.0 <= p <= 1.0:
                raise ValueError(f"Invalid group dropout ({group}, {p})")
        if not 0.0 <= self.dropout_probability <= 1.0:
            raise ValueError(f"dropout_probability must be in [0, 1], got {self.dropout_probability}")
        if self.stride_fraction <= 0:
            raise ValueError(f"stride_fraction must be positive, got {self.stride_fraction}")

    @property
    def resample_rate(self) -> float:
        if self.resample_probability is not None:
            return self.resample_probability
        return 2.0 / self.episode_length

    def dropout_for(self, group: str) -> float:
        return dict(self.group_dropout).get(group, self.dropout_probability)

    @classmethod
    def deterministic(cls, **overrides) -> 'EnvConfig':
        """No randomization, noise, dropout, perturbation or resampling"""
        base = dict(
            domain_randomization=False,
            randomization=RandomizationConfig.disabled(),
            init_joint_noise=0.0,
            init_joint_velocity_noise=0.0,
            init_trunk_velocity_noise=0.0,
            init_orientation_noise=0.0,
            perturb_probability=0.0,
            joint_noise=0.0,
            foot_noise=0.0,
            angular_velocity_noise=0.0,
            gravity_noise=0.0,
            dropout_probability=0.0,
            resample_probability=0.0,
        )
        base.update(overrides)
        return cls(**base)


@dataclass(frozen=True)
class LegGeometry:
    """
    Linearized foot kinematics of a robot.

    lever[f, :, j] is axis_j x (p_foot_f - p_joint_j) for the joints driving
    foot f (zero elsewhere); joints above the trunk plane drive no foot.
    """
    lever: np.ndarray
    joint_foot: np.ndarray
    foot_xy: np.ndarray
    left: np.ndarray
    right: np.ndarray
    front: np.ndarray
    back: np.ndarray


def build_leg_geometry(robot: RobotSpec) -> LegGeometry:
    joints_p = np.array([j.position for j in robot.joints], dtype=np.float64)
    axes = np.array([j.axis for j in robot.joints], dtype=np.float64)
    feet_p = np.array([f.position for f in robot.feet], dtype=np.float64)
    nf, nj = robot.num_feet, robot.num_joints

    joint_foot = np.full(nj, -1, dtype=np.int64)
    lever = np.zeros((nf, 3, nj), dtype=np.float64)
    for j in range(nj):
        if joints_p[j, 2] > 1e-6:
            continue
        dist = np.linalg.norm(feet_p[:, :2] - joints_p[j, :2], axis=1)
        f = int(np.argmin(dist))
        joint_foot[j] = f
        lever[f, :, j] = np.cross(axes[j], feet_p[f] - joints_p[j])

    y, x = feet_p[:, 1], feet_p[:, 0]
    return LegGeometry(
        lever=lever,
        joint_foot=joint_foot,
        foot_xy=feet_p[:, :2],
        left=y > 1e-9,
        right=y < -1e-9,
        front=x > 1e-9,
        back=x < -1e-9,
    )


def leg_jacobian(robot: RobotSpec, foot_index: int) -> np.ndarray:
    """(3, J) map from joint displacements to the foot displacement in the trunk frame"""
    return build_leg_geometry(robot).lever[foot_index].copy()


@dataclass(frozen=True)
class EnvState:
    """Complete surrogate state; arrays are never mutated after construction"""
    q: np.ndarray
    qd: np.ndarray
    v: np.ndarray               # trunk linear velocity (x, y, z)
    roll: float
    pitch: float
    omega: np.ndarray           # trunk angular velocity (roll, pitch, yaw rates)
    h: float
    contact: np.ndarray
    air_time: np.ndarray
    phase: np.ndarray           # per-leg gait phase (rad), stance on [0, pi) mod 2pi
    foot_lift: np.ndarray
    command: np.ndarray         # (v_x, v_y, yaw rate)
    step_index: int
    robot: RobotSpec            # active randomized draw
    base_robot: RobotSpec
    geometry: LegGeometry
    previous_action: np.ndarray
    torque: np.ndarray
    collision: int = 0
    terminated: bool = False
    time_out: bool = False
    rng: Optional[np.random.Generator] = field(default=None, compare=False, repr=False)

    @property
    def done(self) -> bool:
        return self.terminated or self.time_out


@dataclass(frozen=True)
class ObservationBundle:
    """Policy inputs for one robot at one step (privileged part is critic-only)"""
    joint_obs: np.ndarray           # (J, 3)
    foot_obs: np.ndarray            # (F, 2)
    general_obs: np.ndarray         # (16,)
    privileged_obs: Optional[np.ndarray]  # (4,)
    joint_descriptions: np.ndarray  # (J, 23)
    foot_descriptions: np.ndarray   # (F, 10)

    @property
    def num_joints(self) -> int:
        return self.joint_obs.shape[0]

    @property
    def num_feet(self) -> int:
        return self.foot_obs.shape[0]


@dataclass(frozen=True)
class ObservationBatch:
    """Bundles of one robot stacked along a leading batch axis"""
    joint_obs: np.ndarray           # (B, J, 3)
    foot_obs: np.ndarray            # (B, F, 2)
    general_obs: np.ndarray         # (B, 16)
    privileged_obs: Optional[np.ndarray]  # (B, 4)
    joint_descriptions: np.ndarray  # (B, J, 23)
    foot_descriptions: np.ndarray   # (B, F, 10)

    @property
    def batch_size(self) -> int:
        return self.joint_obs.shape[0]

    @property
    def num_joints(self) -> int:
        return self.joint_obs.shape[1]

    @property
    def num_feet(self) -> int:
        return self.foot_obs.shape[1]

    def select(self, indices: np.ndarray) -> 'ObservationBatch':
        return ObservationBatch(
            joint_obs=self.joint_obs[indices],
            foot_obs=self.foot_obs[indices],
            general_obs=self.general_obs[indices],
            privileged_obs=None if self.privileged_obs is None else self.privileged_obs[indices],
            joint_descriptions=self.joint_descriptions[indices],
            foot_descriptions=self.foot_descriptions[indices],
        )


def stack_bundles(bundles: Sequence[ObservationBundle]) -> ObservationBatch:
    """Stack same-arity bundles into a batch"""
    if not bundles:
        raise ValueError("Cannot stack an empty list of bundles")
    arities = {(b.num_joints, b.num_feet) for b in bundles}
    if len(arities) != 1:
        raise ValueError(f"Bundles have mixed joint/foot counts: {sorted(arities)}")
    has_priv = all(b.privileged_obs is not None for b in bundles)
    return ObservationBatch(
        joint_obs=np.stack([b.joint_obs for b in bundles]),
        foot_obs=np.stack([b.foot_obs for b in bundles]),
        general_obs=np.stack([b.general_obs for b in bundles]),
        privileged_obs=np.stack([b.privileged_obs for b in bundles]) if has_priv else None,
        joint_descriptions=np.stack([b.joint_descriptions for b in bundles]),
        foot_descriptions=np.stack([b.foot_descriptions for b in bundles]),
    )


def as_batch(observations) -> ObservationBatch:
    if isinstance(observations, ObservationBatch):
        return observations
    return stack_bundles([observations])


# ---------------------------------------------------------------------------
# Control and dynamics
# ---------------------------------------------------------------------------

def _pd(q: np.ndarray, qd: np.ndarray, action: np.ndarray, robot: RobotSpec) -> np.ndarray:
    target = robot.joint_array('q_nominal') + robot.action_scale * action
    tau = robot.kp * (target - q) - robot.kd * qd
    limit = robot.joint_array('torque_limit')
    return np.clip(tau, -limit, limit)


def pd_torque(state: EnvState, action: np.ndarray, robot: Optional[RobotSpec] = None) -> np.ndarray:
    """
    Joint torques of the PD controller

    Args:
        state: Current state (joint positions and velocities)
        action: One action per joint; target = q_nominal + action_scale * action
        robot: Robot whose gains apply (defaults to the state's active draw)

    Returns:
        Torques clipped to each joint's torque limit
    """
    robot = robot or state.robot
    action = np.asarray(action, dtype=np.float64)
    if action.shape != (robot.num_joints,):
        raise ValueError(f"Action arity {action.shape} does not match {robot.num_joints} joints")
    return _pd(state.q, state.qd, action, robot)


def integrate_joints(q: np.ndarray, qd: np.ndarray, torque: np.ndarray, robot: RobotSpec,
                     dt: float, base_inertia: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    One semi-implicit Euler step of the joint dynamics.

    Damping is integrated implicitly and Coulomb friction never reverses
    the velocity, so with zero torque kinetic energy cannot grow.
    """
    inertia = robot.joint_array('rotor_inertia') + base_inertia
    damping = robot.joint_array('damping')
    friction = robot.joint_array('friction')
    qd_new = (qd + dt * torque / inertia) / (1.0 + dt * damping / inertia)
    slip = dt * friction / inertia
    qd_new = np.where(np.abs(qd_new) <= slip, 0.0, qd_new - np.sign(qd_new) * slip)

    vmax = robot.joint_array('velocity_limit')
    qd_new = np.clip(qd_new, -vmax, vmax)
    q_new = q + dt * qd_new

    lower, upper = robot.joint_array('control_min'), robot.joint_array('control_max')
    at_lower, at_upper = q_new < lower, q_new > upper
    q_new = np.clip(q_new, lower, upper)
    qd_new = np.where((at_lower & (qd_new < 0)) | (at_upper & (qd_new > 0)), 0.0, qd_new)
    return q_new, qd_new


def kinetic_energy(qd: np.ndarray, robot: RobotSpec, base_inertia: float = 0.01) -> float:
    inertia = robot.joint_array('rotor_inertia') + base_inertia
    return float(0.5 * np.sum(inertia * qd * qd))


def _foot_lift(q: np.ndarray, robot: RobotSpec, geometry: LegGeometry) -> np.ndarray:
    return geometry.lever[:, 2, :] @ (q - robot.joint_array('q_nominal'))


def advance_phase(phase: np.ndarray, dq: np.ndarray, robot: RobotSpec, geometry: LegGeometry,
                  config: EnvConfig) -> np.ndarray:
    """
    Advance each leg's gait phase by the fore-aft distance its foot swept.

    A sweep of stride_fraction * nominal_height moves the phase by pi, so a
    leg holding still keeps its phase and its contact flag.
    """
    sweep = np.abs(geometry.lever[:, 0, :] @ dq)
    stride = config.stride_fraction * robot.nominal_height
    return phase + np.pi * sweep / stride


def phase_contact(phase: np.ndarray) -> np.ndarray:
    return np.mod(phase, 2.0 * np.pi) < np.pi


def _side_fraction(stance: np.ndarray, mask: np.ndarray) -> float:
    if not mask.any():
        return 0.0
    return float(stance[mask].mean())


def _side_lift(lift: np.ndarray, mask: np.ndarray) -> float:
    if not mask.any():
        return 0.0
    return float(lift[mask].mean())


def sample_command(robot: RobotSpec, config: EnvConfig, rng: np.random.Generator) -> np.ndarray:
    """Uniform command; planar range scaled by robot length relative to a mid-size quadruped"""
    size = min(1.0, robot.length / config.command_reference_length)
    xy = rng.uniform(-config.max_command_xy, config.max_command_xy, size=2) * size
    yaw = rng.uniform(-config.max_command_yaw, config.max_command_yaw)
    return np.array([xy[0], xy[1], yaw], dtype=np.float64)


# ---------------------------------------------------------------------------
# Episode operations
# ---------------------------------------------------------------------------

def reset(robot: RobotSpec, config: EnvConfig, rng: np.random.Generator) -> Tuple[EnvState, ObservationBundle]:
    """
    Start an episode.

    Args:
        robot: Nominal robot spec
        config: Environment config
        rng: Episode generator, kept in the state for later draws

    Returns:
        (state, observations)
    """
    randomize = config.domain_randomization
    drawn = randomize_robot(robot, rng, config.randomization) if randomize else robot
    geometry = build_leg_geometry(drawn)
    nj = drawn.num_joints

    q = drawn.joint_array('q_nominal')
    qd = np.zeros(nj)
    v = np.zeros(3)
    omega = np.zeros(3)
    roll = pitch = 0.0
    if randomize:
        span = drawn.joint_array('control_max') - drawn.joint_array('control_min')
        q = np.clip(q + rng.uniform(-1.0, 1.0, nj) * config.init_joint_noise * span,
                    drawn.joint_array('control_min'), drawn.joint_array('control_max'))
        qd = rng.uniform(-config.init_joint_velocity_noise, config.init_joint_velocity_noise, nj)
        v[:2] = rng.uniform(-config.init_trunk_velocity_noise, config.init_trunk_velocity_noise, 2)
        omega = rng.uniform(-config.init_trunk_velocity_noise, config.init_trunk_velocity_noise, 3)
        roll, pitch = rng.uniform(-config.init_orientation_noise, config.init_orientation_noise, 2)

    lift = _foot_lift(q, drawn, geometry)
    state = EnvState(
        q=q,
        qd=qd,
        v=v,
        roll=float(roll),
        pitch=float(pitch),
        omega=omega,
        h=drawn.nominal_height,
        contact=np.ones(drawn.num_feet, dtype=bool),
        air_time=np.zeros(drawn.num_feet),
        phase=np.zeros(drawn.num_feet),
        foot_lift=lift,
        command=sample_command(drawn, config, rng),
        step_index=0,
        robot=drawn,
        base_robot=robot,
        geometry=geometry,
        previous_action=np.zeros(nj),
        torque=np.zeros(nj),
        rng=rng,
    )
    return state, assemble_observations(state, drawn, config, rng)


def _advance(state: EnvState, action: np.ndarray, config: EnvConfig) -> EnvState:
    """Integrate joints and trunk over one control period"""
    robot, geo, dt = state.robot, state.geometry, config.dt
    sub_dt = dt / config.substeps

    q, qd = state.q, state.qd
    torque_sum = np.zeros_like(q)
    for _ in range(config.substeps):
        tau = _pd(q, qd, action, robot)
        q, qd = integrate_joints(q, qd, tau, robot, sub_dt, config.base_inertia)
        torque_sum += tau
    joint_rate = (q - state.q) / dt

    lift = _foot_lift(q, robot, geo)
    phase = advance_phase(state.phase, q - state.q, robot, geo, config)
    contact = phase_contact(phase)
    foot_velocity = np.einsum('fcj,j->fc', geo.lever, joint_rate)

    v = state.v.copy()
    omega = state.omega.copy()
    stance_count = int(contact.sum())
    if stance_count > 0:
        share = stance_count / robot.num_feet
        push = -foot_velocity[contact, :2]
        target_xy = push.mean(axis=0)
        pos = geo.foot_xy[contact]
        radius_sq = np.sum(pos * pos, axis=1) + 1e-6
        target_yaw = float(np.mean((pos[:, 0] * push[:, 1] - pos[:, 1] * push[:, 0]) / radius_sq))
        v[:2] += dt * (config.stance_gain * share * (target_xy - v[:2]) - config.drag * v[:2])
        omega[2] += dt * (config.stance_gain * share * (target_yaw - omega[2]) - config.drag * omega[2])
        h_target = robot.nominal_height - float(lift[contact].mean())
        v[2] = config.height_gain * (h_target - state.h)
    else:
        v[:2] -= dt * config.drag * v[:2]
        omega[2] -= dt * config.drag * omega[2]
        v[2] = state.v[2] - GRAVITY * dt
    h = max(0.0, state.h + dt * v[2])

    roll_eq = np.clip((_side_lift(lift, geo.right) - _side_lift(lift, geo.left)) / robot.width, -0.5, 0.5)
    pitch_eq = np.clip((_side_lift(lift, geo.back) - _side_lift(lift, geo.front)) / robot.length, -0.5, 0.5)
    roll_drive = _side_fraction(contact, geo.left) - _side_fraction(contact, geo.right)
    pitch_drive = _side_fraction(contact, geo.front) - _side_fraction(contact, geo.back)
    roll_acc = (config.tilt_spring * (roll_eq - state.roll) + config.tilt_gain * roll_drive
                - config.tilt_damping * omega[0])
    pitch_acc = (config.tilt_spring * (pitch_eq - state.pitch) + config.tilt_gain * pitch_drive
                 - config.tilt_damping * omega[1])
    omega[0] += dt * roll_acc
    omega[1] += dt * pitch_acc
    roll = state.roll + dt * omega[0]
    pitch = state.pitch + dt * omega[1]

    air_time = np.where(contact, 0.0, state.air_time + dt)
    fallen = (abs(roll) > config.tilt_limit or abs(pitch) > config.tilt_limit
              or h < config.min_height_fraction * robot.nominal_height)
    step_index = state.step_index + 1

    return replace(
        state,
        q=q,
        qd=qd,
        v=v,
        roll=float(roll),
        pitch=float(pitch),
        omega=omega,
        h=float(h),
        contact=contact,
        air_time=air_time,
        phase=phase,
        foot_lift=lift,
        step_index=step_index,
        previous_action=action.copy(),
        torque=torque_sum / config.substeps,
        collision=int(fallen),
        terminated=bool(fallen),
        time_out=step_index >= config.episode_length,
    )


def step(state: EnvState,
         action: np.ndarray,
         robot: RobotSpec,
         config: EnvConfig,
         training_step: int = 0) -> Tuple[EnvState, ObservationBundle, RewardBreakdown, bool]:
    """
    Advance the surrogate by one control period.

    Args:
        state: Current state
        action: One action per joint
        robot: Nominal robot the episode was reset with
        config: Environment config
        training_step: Global training step for the penalty curriculum

    Returns:
        (next state, observations, reward breakdown, done)
    """
    action = np.asarray(action, dtype=np.float64)
    if robot.num_joints != state.robot.num_joints or action.shape != (robot.num_joints,):
        raise ValueError(
            f"Action arity {action.shape} does not match robot '{robot.name}' with {robot.num_joints} joints"
        )
    rng = state.rng
    advanced = _advance(state, action, config)

    coefficients = resolve_coefficients(state.robot, config.single_reward_set)
    coefficients = coefficients.with_curriculum(coefficients.curriculum_steps * config.curriculum_scale)
    breakdown = compute_reward(state, advanced, action, state.previous_action, state.robot,
                               t=training_step, dt=config.dt, coefficients=coefficients)

    if not advanced.done:
        advanced = perturb(advanced, config, rng)
        advanced = maybe_resample(advanced, config, rng)
    bundle = assemble_observations(advanced, advanced.robot, config, rng)
    return advanced, bundle, breakdown, advanced.done


def assemble_observations(state: EnvState,
                          robot: RobotSpec,
                          config: EnvConfig,
                          rng: np.random.Generator) -> ObservationBundle:
    """
    Build the scaled, noised and dropped-out observation bundle.

    Args:
        state: Environment state
        robot: Robot whose description vectors and general attributes are observed
        config: Noise, dropout and ablation settings
        rng: Generator for noise and dropout draws

    Returns:
        ObservationBundle with privileged extras attached
    """
    s = OBSERVATION_SCALES
    joint_obs = np.stack([
        (state.q - robot.joint_array('q_nominal')) * s['joint_position'],
        state.qd * s['joint_velocity'],
        state.previous_action * s['previous_action'],
    ], axis=1)
    foot_obs = np.stack([
        state.contact.astype(np.float64) * s['contact'],
        state.air_time * s['air_time'],
    ], axis=1)

    gravity = np.array([
        np.sin(state.pitch),
        -np.sin(state.roll) * np.cos(state.pitch),
        -np.cos(state.roll) * np.cos(state.pitch),
    ]) * s['gravity']
    general_attrs = np.array([
        0.0 if (not config.include_mass_dims and name in MASS_DIM_FIELDS) else getattr(robot, name) / scale
        for name, scale in GENERAL_FIELDS
    ])
    omega = state.omega * s['angular_velocity']
    command = state.command * s['command']

    if config.joint_noise > 0:
        joint_obs[:, :2] += rng.normal(0.0, config.joint_noise, size=joint_obs[:, :2].shape)
    if config.foot_noise > 0:
        foot_obs[:, 1] += rng.normal(0.0, config.foot_noise, size=foot_obs.shape[0])
    if config.angular_velocity_noise > 0:
        omega = omega + rng.normal(0.0, config.angular_velocity_noise, size=3)
    if config.gravity_noise > 0:
        gravity = gravity + rng.normal(0.0, config.gravity_noise, size=3)

    joint_obs = _dropout(joint_obs, config.dropout_for('joints'), rng)
    foot_obs = _dropout(foot_obs, config.dropout_for('feet'), rng)
    sensed = _dropout(np.concatenate([omega, gravity]), config.dropout_for('general'), rng)
    general_obs = np.concatenate([sensed[:3], command, sensed[3:], general_attrs])

    privileged = np.concatenate([state.v * s['linear_velocity'], [state.h * s['height']]])
    return ObservationBundle(
        joint_obs=joint_obs,
        foot_obs=foot_obs,
        general_obs=general_obs,
        privileged_obs=privileged,
        joint_descriptions=joint_descriptions(robot, config.include_mass_dims),
        foot_descriptions=foot_descriptions(robot, config.include_mass_dims),
    )


def _dropout(values: np.ndarray, probability: float, rng: np.random.Generator) -> np.ndarray:
    if probability <= 0.0:
        return values
    if probability >= 1.0:
        return np.zeros_like(values)
    keep = rng.random(values.shape) >= probability
    return np.where(keep, values, 0.0)


def maybe_resample(state: EnvState, config: EnvConfig, rng: np.random.Generator) -> EnvState:
    """
    Independently redraw the command and the randomized robot, each with
    probability config.resample_rate (twice per episode on average).
    """
    p = config.resample_rate
    if p <= 0.0:
        return state
    updates = {}
    if rng.random() < p:
        updates['command'] = sample_command(state.robot, config, rng)
    if rng.random() < p and config.domain_randomization:
        drawn = randomize_robot(state.base_robot, rng, config.randomization)
        lower, upper = drawn.joint_array('control_min'), drawn.joint_array('control_max')
        updates.update(robot=drawn, geometry=build_leg_geometry(drawn), q=np.clip(state.q, lower, upper))
    if not updates:
        return state
    return replace(state, **updates)


def perturb(state: EnvState, config: EnvConfig, rng: np.random.Generator) -> EnvState:
    """With config.perturb_probability, push the trunk by a planar impulse of bounded magnitude"""
    if config.perturb_probability <= 0.0 or rng.random() >= config.perturb_probability:
        return state
    angle = rng.uniform(0.0, 2.0 * np.pi)
    magnitude = rng.uniform(0.0, config.perturb_bound)
    v = state.v.copy()
    v[:2] += magnitude * np.array([np.cos(angle), np.sin(angle)])
    return replace(state, v=v)


# ---------------------------------------------------------------------------
# Stateful wrapper
# ---------------------------------------------------------------------------

@dataclass
class StepInfo:
    """Bookkeeping returned by LocomotionEnv.step"""
    terminated: bool = False
    time_out: bool = False
    final_bundle: Optional[ObservationBundle] = None
    episode_return: Optional[float] = None
    episode_length: Optional[int] = None
    tracking: float = 0.0


class TrajectoryRecorder:
    """Collects per-step rows and writes one CSV per episode"""

    def __init__(self, output_dir: str):
        self.output_dir = output_dir
        self.rows: List[dict] = []
        self.episodes_written = 0
        os.makedirs(output_dir, exist_ok=True)

    def record(self, state: EnvState, action: np.ndarray, breakdown: RewardBreakdown) -> None:
        row = {'step': state.step_index, 'h': state.h, 'roll': state.roll, 'pitch': state.pitch}
        row.update({f'v_{axis}': val for axis, val in zip('xyz', state.v)})
        row.update({f'omega_{axis}': val for axis, val in zip('xyz', state.omega)})
        row.update({f'cmd_{k}': val for k, val in zip(('vx', 'vy', 'yaw'), state.command)})
        row.update({f'q_{name}': val for name, val in zip(state.robot.joint_names, state.q)})
        row.update({f'qd_{name}': val for name, val in zip(state.robot.joint_names, state.qd)})
        row.update({f'action_{name}': val for name, val in zip(state.robot.joint_names, action)})
        row.update({f'contact_{f.name}': int(c) for f, c in zip(state.robot.feet, state.contact)})
        row.update(breakdown.to_dict())
        self.rows.append(row)

    def flush(self, robot_name: str) -> Optional[str]:
        if not self.rows:
            return None
        path = os.path.join(self.output_dir, f'{robot_name}_episode_{self.episodes_written:04d}.csv')
        pd.DataFrame(self.rows).to_csv(path, index=False, encoding='utf-8')
        self.rows = []
        self.episodes_written += 1
        return path


class LocomotionEnv:
    """Auto-resetting environment instance for one robot"""

    def __init__(self, robot: RobotSpec, config: EnvConfig, rng: np.random.Generator,
                 recorder: Optional[TrajectoryRecorder] = None):
        """
        Args:
            robot: Nominal robot spec
            config: Environment config
            rng: Independent generator owned by this instance
            recorder: Optional trajectory dump
        """
        self.robot = robot
        self.config = config
        self.rng = rng
        self.recorder = recorder
        self.state: Optional[EnvState] = None
        self.bundle: Optional[ObservationBundle] = None
        self.episode_return = 0.0
        self.episodes_completed = 0

    def reset(self) -> ObservationBundle:
        self.state, self.bundle = reset(self.robot, self.config, self.rng)
        self.episode_return = 0.0
        return self.bundle

    def step(self, action: np.ndarray, training_step: int = 0) -> Tuple[ObservationBundle, RewardBreakdown, bool, StepInfo]:
        if self.state is None:
            self.reset()
        next_state, bundle, breakdown, done = step(self.state, action, self.robot, self.config, training_step)
        self.episode_return += breakdown.total
        if self.recorder is not None:
            self.recorder.record(next_state, np.asarray(action), breakdown)

        info = StepInfo(terminated=next_state.terminated, time_out=next_state.time_out, tracking=breakdown.tracking)
        if done:
            info.final_bundle = bundle
            info.episode_return = self.episode_return
            info.episode_length = next_state.step_index
            self.episodes_completed += 1
            if self.recorder is not None:
                self.recorder.flush(self.robot.name)
            bundle = self.reset()
        else:
            self.state, self.bundle = next_state, bundle
        return bundle, breakdown, done, info
