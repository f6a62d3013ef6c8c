"""
Baselines Module
Comparison architectures: a multi-head policy with one encoder/decoder
pair per morphology group around a shared core, and a padding policy over
a fixed maximum joint count with a one-hot task identifier.
"""

import logging
from collections import OrderedDict
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

import tensorgrad as tg
from morphology import RobotSpec
from policy import (
    ActionDistribution,
    MLPSpec,
    PolicyConfig,
    PolicyError,
    PolicyParams,
    init_mlp,
    mlp_forward,
    orthogonal,
    params_from_arrays,
    softplus_inverse,
)
from surrogate_env import (
    FOOT_OBS_SIZE,
    GENERAL_OBS_SIZE,
    JOINT_OBS_SIZE,
    PRIVILEGED_OBS_SIZE,
    ObservationBatch,
    as_batch,
)
from tensorgrad import Tensor

logger = logging.getLogger(__name__)

MORPHOLOGY_GROUPS: Dict[str, str] = {
    'quadruped': 'quadruped',
    'biped': 'biped_humanoid',
    'humanoid': 'biped_humanoid',
    'hexapod': 'hexapod',
}


def morphology_group(robot: RobotSpec) -> str:
    """Head a robot is routed to by the multi-head baseline"""
    try:
        return MORPHOLOGY_GROUPS[robot.morphology_class]
    except KeyError:
        raise PolicyError(
            f"Robot '{robot.name}' of class '{robot.morphology_class}' has no multi-head group"
        )


def _pad(values: np.ndarray, slots: int) -> np.ndarray:
    """(B, N, k) -> (B, slots * k) with zero blocks for unused slots"""
    b, n, k = values.shape
    out = np.zeros((b, slots, k))
    out[:, :n] = values
    return out.reshape(b, slots * k)


def _check_slots(robot: RobotSpec, joint_slots: int, foot_slots: int, where: str) -> None:
    if robot.num_joints > joint_slots or robot.num_feet > foot_slots:
        raise PolicyError(
            f"Robot '{robot.name}' ({robot.num_joints} joints, {robot.num_feet} feet) overflows "
            f"{where} ({joint_slots} joint slots, {foot_slots} foot slots)"
        )


def _std(bias: Tensor, config: PolicyConfig, num_joints: int, batch_size: int) -> Tensor:
    std = tg.take(tg.softplus(bias), np.arange(num_joints), axis=0)
    return tg.clip(tg.expand(std, 0, batch_size), config.std_min, config.std_max)


# ---------------------------------------------------------------------------
# Multi-head
# ---------------------------------------------------------------------------

def _multihead_specs(config: PolicyConfig, head: str, joint_slots: int, foot_slots: int,
                     role: str) -> Dict[str, MLPSpec]:
    in_dim = joint_slots * JOINT_OBS_SIZE + foot_slots * FOOT_OBS_SIZE + GENERAL_OBS_SIZE
    if role == 'critic':
        in_dim += PRIVILEGED_OBS_SIZE
    enc = MLPSpec(f'{role}.head.{head}.enc', (in_dim,) + config.multihead_encoder_hidden,
                  hidden_norm=config.layer_norm)
    core = MLPSpec(f'{role}.core', (enc.out_dim,) + config.multihead_core_hidden, hidden_norm=False)
    if role == 'critic':
        out = MLPSpec(f'{role}.head.{head}.value', (core.out_dim, 1), hidden_norm=False,
                      final_activation=False, output_gain=1.0)
    else:
        out = MLPSpec(f'{role}.head.{head}.mean', (core.out_dim, joint_slots), hidden_norm=False,
                      final_activation=False, output_gain=config.mean_output_gain)
    return {'enc': enc, 'core': core, 'out': out}


def multihead_shapes(config: PolicyConfig, registry: Mapping[str, Any]) -> Dict[str, Tuple[int, ...]]:
    shapes: Dict[str, Tuple[int, ...]] = OrderedDict()
    for head, slots in registry.get('heads', {}).items():
        for role in ('actor', 'critic'):
            for spec in _multihead_specs(config, head, slots['joint_slots'], slots['foot_slots'], role).values():
                shapes.update(spec.parameter_shapes())
        shapes[f'actor.head.{head}.std_bias'] = (slots['joint_slots'],)
    return shapes


def init_multihead_params(config: PolicyConfig, rng: np.random.Generator,
                          robots: Sequence[RobotSpec]) -> PolicyParams:
    """
    One head per morphology group present in `robots`, each sized to the
    largest joint and foot count of its group, around a shared core.
    """
    if not robots:
        raise PolicyError("The multi-head baseline needs its training robots to size its heads")
    heads: Dict[str, Dict[str, int]] = OrderedDict()
    for robot in robots:
        slots = heads.setdefault(morphology_group(robot), {'joint_slots': 0, 'foot_slots': 0})
        slots['joint_slots'] = max(slots['joint_slots'], robot.num_joints)
        slots['foot_slots'] = max(slots['foot_slots'], robot.num_feet)

    arrays: Dict[str, np.ndarray] = OrderedDict()
    for head, slots in heads.items():
        for role in ('actor', 'critic'):
            for key, spec in _multihead_specs(config, head, slots['joint_slots'], slots['foot_slots'], role).items():
                if key == 'core' and spec.parameter_shapes()[0][0] in arrays:
                    continue
                arrays.update(init_mlp(spec, rng))
        arrays[f'actor.head.{head}.std_bias'] = np.full(slots['joint_slots'], softplus_inverse(config.init_std))
    logger.info(f"Multi-head slots: {dict(heads)}")
    return params_from_arrays(arrays, config, {'heads': heads})


def _multihead_input(batch: ObservationBatch, robot: RobotSpec, params: PolicyParams,
                     privileged: bool) -> Tuple[str, Dict[str, int], Tensor]:
    head = morphology_group(robot)
    slots = params.registry.get('heads', {}).get(head)
    if slots is None:
        raise PolicyError(f"No '{head}' head in this multi-head policy (robot '{robot.name}')")
    if batch.num_joints != robot.num_joints or batch.num_feet != robot.num_feet:
        raise PolicyError(f"Observations do not match robot '{robot.name}'")
    _check_slots(robot, slots['joint_slots'], slots['foot_slots'], f"head '{head}'")
    parts = [_pad(batch.joint_obs, slots['joint_slots']), _pad(batch.foot_obs, slots['foot_slots']),
             batch.general_obs]
    if privileged:
        if batch.privileged_obs is None:
            raise PolicyError("Critic requires privileged observations")
        parts.append(batch.privileged_obs)
    return head, slots, tg.constant(np.concatenate(parts, axis=1))


def multihead_forward(observations, robot: RobotSpec, params: PolicyParams) -> ActionDistribution:
    """Actor pass through the robot's morphology-group head; outputs truncated to its joints"""
    batch = as_batch(observations)
    head, slots, x = _multihead_input(batch, robot, params, privileged=False)
    specs = _multihead_specs(params.config, head, slots['joint_slots'], slots['foot_slots'], 'actor')
    hidden = mlp_forward(params, specs['core'], mlp_forward(params, specs['enc'], x))
    mean = tg.take(mlp_forward(params, specs['out'], hidden), np.arange(robot.num_joints), axis=1)
    config = params.config
    return ActionDistribution(
        mean=tg.clip(mean, -config.mean_clip, config.mean_clip),
        std=_std(params[f'actor.head.{head}.std_bias'], config, robot.num_joints, batch.batch_size),
    )


def multihead_value(observations, robot: RobotSpec, params: PolicyParams) -> Tensor:
    batch = as_batch(observations)
    head, slots, x = _multihead_input(batch, robot, params, privileged=True)
    specs = _multihead_specs(params.config, head, slots['joint_slots'], slots['foot_slots'], 'critic')
    hidden = mlp_forward(params, specs['core'], mlp_forward(params, specs['enc'], x))
    return tg.reshape(mlp_forward(params, specs['out'], hidden), (batch.batch_size,))


def expand_head(params: PolicyParams, head: str, joint_slots: int, rng: np.random.Generator,
                foot_slots: Optional[int] = None) -> PolicyParams:
    """
    Grow a head's joint (and optionally foot) slots for fine-tuning on a
    larger robot of the same group.

    New encoder input rows start at zero and new decoder columns are freshly
    initialized, so the outputs for robots that fit the old slots are unchanged.

    Args:
        params: Multi-head params
        head: Head name (see MORPHOLOGY_GROUPS)
        joint_slots: New joint slot count (>= current)
        rng: Generator for the new decoder columns
        foot_slots: New foot slot count (defaults to current)

    Returns:
        New PolicyParams with the enlarged head
    """
    if params.config.architecture != 'multihead':
        raise PolicyError("Head surgery applies to the multi-head baseline only")
    heads = {h: dict(s) for h, s in params.registry.get('heads', {}).items()}
    if head not in heads:
        raise PolicyError(f"Unknown head '{head}', available: {sorted(heads)}")
    old_j, old_f = heads[head]['joint_slots'], heads[head]['foot_slots']
    foot_slots = old_f if foot_slots is None else foot_slots
    if joint_slots < old_j or foot_slots < old_f:
        raise PolicyError(f"Head '{head}' can only grow ({old_j}/{old_f} -> {joint_slots}/{foot_slots})")

    updates: Dict[str, np.ndarray] = {}
    for role in ('actor', 'critic'):
        name = f'{role}.head.{head}.enc.l0.w'
        w = params[name].values
        joint_rows = np.zeros(((joint_slots - old_j) * JOINT_OBS_SIZE, w.shape[1]))
        foot_rows = np.zeros(((foot_slots - old_f) * FOOT_OBS_SIZE, w.shape[1]))
        j_end = old_j * JOINT_OBS_SIZE
        f_end = j_end + old_f * FOOT_OBS_SIZE
        updates[name] = np.concatenate([w[:j_end], joint_rows, w[j_end:f_end], foot_rows, w[f_end:]], axis=0)

    extra = joint_slots - old_j
    if extra > 0:
        w = params[f'actor.head.{head}.mean.l0.w'].values
        new_cols = orthogonal(rng, w.shape[0], extra, params.config.mean_output_gain)
        updates[f'actor.head.{head}.mean.l0.w'] = np.concatenate([w, new_cols], axis=1)
        b = params[f'actor.head.{head}.mean.l0.b'].values
        updates[f'actor.head.{head}.mean.l0.b'] = np.concatenate([b, np.zeros(extra)])
        s = params[f'actor.head.{head}.std_bias'].values
        updates[f'actor.head.{head}.std_bias'] = np.concatenate(
            [s, np.full(extra, softplus_inverse(params.config.init_std))])

    heads[head] = {'joint_slots': joint_slots, 'foot_slots': foot_slots}
    logger.info(f"Expanded head '{head}': {old_j}/{old_f} -> {joint_slots}/{foot_slots} joint/foot slots")
    return params.with_arrays(updates, registry={**params.registry, 'heads': heads})


# ---------------------------------------------------------------------------
# Padding
# ---------------------------------------------------------------------------

def _padding_specs(config: PolicyConfig) -> Dict[str, MLPSpec]:
    in_dim = (config.max_joints * JOINT_OBS_SIZE + config.max_feet * FOOT_OBS_SIZE
              + GENERAL_OBS_SIZE + config.max_tasks)
    return {
        'actor': MLPSpec('actor.mlp', (in_dim,) + config.padding_hidden + (config.max_joints,),
                         hidden_norm=config.layer_norm, final_activation=False,
                         output_gain=config.mean_output_gain),
        'critic': MLPSpec('critic.mlp', (in_dim + PRIVILEGED_OBS_SIZE,) + config.padding_hidden + (1,),
                          hidden_norm=config.layer_norm, final_activation=False, output_gain=1.0),
    }


def padding_shapes(config: PolicyConfig) -> Dict[str, Tuple[int, ...]]:
    shapes: Dict[str, Tuple[int, ...]] = OrderedDict()
    specs = _padding_specs(config)
    shapes.update(specs['actor'].parameter_shapes())
    shapes['actor.std_bias'] = (config.max_joints,)
    shapes.update(specs['critic'].parameter_shapes())
    return shapes


def init_padding_params(config: PolicyConfig, rng: np.random.Generator,
                        robots: Sequence[RobotSpec]) -> PolicyParams:
    """Padding policy with a task slot for each training robot"""
    tasks: List[str] = []
    for robot in robots:
        _check_slots(robot, config.max_joints, config.max_feet, 'the padding layout')
        if robot.name not in tasks:
            tasks.append(robot.name)
    if len(tasks) > config.max_tasks:
        raise PolicyError(f"{len(tasks)} training robots exceed max_tasks={config.max_tasks}")
    specs = _padding_specs(config)
    arrays: Dict[str, np.ndarray] = OrderedDict()
    arrays.update(init_mlp(specs['actor'], rng))
    arrays['actor.std_bias'] = np.full(config.max_joints, softplus_inverse(config.init_std))
    arrays.update(init_mlp(specs['critic'], rng))
    return params_from_arrays(arrays, config, {'tasks': tasks})


def register_task(params: PolicyParams, robot: RobotSpec) -> PolicyParams:
    """Assign a free task slot to an unseen robot"""
    tasks = list(params.registry.get('tasks', []))
    if robot.name in tasks:
        return params
    _check_slots(robot, params.config.max_joints, params.config.max_feet, 'the padding layout')
    if len(tasks) >= params.config.max_tasks:
        raise PolicyError(f"No free task slot for '{robot.name}' (max_tasks={params.config.max_tasks})")
    tasks.append(robot.name)
    logger.info(f"Registered task {len(tasks) - 1} for robot '{robot.name}'")
    return params.with_arrays({}, registry={**params.registry, 'tasks': tasks})


def _padding_input(batch: ObservationBatch, robot: RobotSpec, params: PolicyParams, privileged: bool) -> Tensor:
    config = params.config
    tasks = params.registry.get('tasks', [])
    if robot.name not in tasks:
        raise PolicyError(f"Robot '{robot.name}' has no task slot in this padding policy")
    if batch.num_joints != robot.num_joints or batch.num_feet != robot.num_feet:
        raise PolicyError(f"Observations do not match robot '{robot.name}'")
    _check_slots(robot, config.max_joints, config.max_feet, 'the padding layout')
    one_hot = np.zeros((batch.batch_size, config.max_tasks))
    one_hot[:, tasks.index(robot.name)] = 1.0
    parts = [_pad(batch.joint_obs, config.max_joints), _pad(batch.foot_obs, config.max_feet),
             batch.general_obs, one_hot]
    if privileged:
        if batch.privileged_obs is None:
            raise PolicyError("Critic requires privileged observations")
        parts.append(batch.privileged_obs)
    return tg.constant(np.concatenate(parts, axis=1))


def padding_forward(observations, robot: RobotSpec, params: PolicyParams) -> ActionDistribution:
    """Actor pass over the padded layout; outputs truncated to the robot's joints"""
    batch = as_batch(observations)
    config = params.config
    x = _padding_input(batch, robot, params, privileged=False)
    out = mlp_forward(params, _padding_specs(config)['actor'], x)
    mean = tg.take(out, np.arange(robot.num_joints), axis=1)
    return ActionDistribution(
        mean=tg.clip(mean, -config.mean_clip, config.mean_clip),
        std=_std(params['actor.std_bias'], config, robot.num_joints, batch.batch_size),
    )


def padding_value(observations, robot: RobotSpec, params: PolicyParams) -> Tensor:
    batch = as_batch(observations)
    x = _padding_input(batch, robot, params, privileged=True)
    value = mlp_forward(params, _padding_specs(params.config)['critic'], x)
    return tg.reshape(value, (batch.batch_size,))
