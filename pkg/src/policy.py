"""
Policy Module
Morphology-agnostic actor-critic: attention set encoders over joints and
feet, a shared core MLP, and a universal per-joint action decoder.
Also hosts the shared parameter container, sampling and checkpoints used
by the baseline architectures.
"""

import hashlib
import json
import logging
import math
import os
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from typing import Any, Dict, Iterable, List, Mapping, Optional, Tuple, Union

import numpy as np

import tensorgrad as tg
from morphology import FOOT_DESCRIPTION_SIZE, JOINT_DESCRIPTION_SIZE, RobotSpec
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

CHECKPOINT_VERSION = 1
ARCHITECTURES = ('urma', 'multihead', 'padding')
SHARED_ENCODER_MODES = (None, 'full', 'partial')
HIDDEN_GAIN = math.sqrt(2.0)


class PolicyError(ValueError):
    """Raised when a policy cannot evaluate the given robot or observations"""


class CheckpointError(ValueError):
    """Raised when a checkpoint is missing, malformed or incompatible"""


@dataclass(frozen=True)
class PolicyConfig:
    """Network architecture and initialization settings"""
    architecture: str = 'urma'
    latent_dim: int = 32
    description_hidden: Tuple[int, ...] = (64, 64)
    observation_hidden: Tuple[int, ...] = (64, 64)
    core_hidden: Tuple[int, ...] = (256, 256)
    decoder_description_hidden: Tuple[int, ...] = (64, 64)
    mean_hidden: Tuple[int, ...] = (128, 128)
    std_hidden: Tuple[int, ...] = (64,)
    layer_norm: bool = True
    shared_description_encoder: Optional[str] = None
    tau_init: float = 1.0
    tau_floor: float = 0.015
    init_std: float = 1.0
    std_min: float = 1e-8
    std_max: float = 2.0
    mean_clip: float = 10.0
    mean_output_gain: float = 0.01
    include_mass_dims: bool = True

    # Baselines
    multihead_encoder_hidden: Tuple[int, ...] = (256,)
    multihead_core_hidden: Tuple[int, ...] = (256, 256)
    padding_hidden: Tuple[int, ...] = (256, 256)
    max_joints: int = 24
    max_feet: int = 6
    max_tasks: int = 16

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise PolicyError(f"Unknown architecture '{self.architecture}', expected one of {ARCHITECTURES}")
        if self.shared_description_encoder not in SHARED_ENCODER_MODES:
            raise PolicyError(f"Unknown shared description encoder mode '{self.shared_description_encoder}'")
        if self.tau_floor <= 0:
            raise PolicyError("tau_floor must be positive")
        if not 0 < self.std_min < self.std_max:
            raise PolicyError("std clip range must satisfy 0 < min < max")
        for name in ('description_hidden', 'observation_hidden', 'core_hidden', 'decoder_description_hidden',
                     'mean_hidden', 'std_hidden', 'multihead_encoder_hidden', 'multihead_core_hidden',
                     'padding_hidden'):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
            if not getattr(self, name):
                raise PolicyError(f"{name} needs at least one layer")

    @classmethod
    def full_scale(cls, **overrides) -> 'PolicyConfig':
        """Wider core sized to roughly 430k actor parameters"""
        return cls(**{'core_hidden': (512, 512), **overrides})

    def to_dict(self) -> Dict[str, Any]:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> 'PolicyConfig':
        known = {f for f in cls.__dataclass_fields__}
        unknown = sorted(set(data) - known)
        if unknown:
            raise CheckpointError(f"Unknown policy config fields: {unknown}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in data.items()})


# ---------------------------------------------------------------------------
# MLP building blocks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MLPSpec:
    """
    Layer layout of one multilayer perceptron.

    Forward: optional input LayerNorm, then per layer linear -> (LayerNorm
    after the first layer) -> tanh, the last tanh only if final_activation.
    """
    name: str
    sizes: Tuple[int, ...]
    input_norm: bool = False
    hidden_norm: bool = True
    final_activation: bool = True
    output_gain: float = HIDDEN_GAIN
    output_bias: float = 0.0

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def parameter_shapes(self) -> List[Tuple[str, Tuple[int, ...]]]:
        shapes = []
        if self.input_norm:
            shapes += [(f'{self.name}.ln_in.g', (self.sizes[0],)), (f'{self.name}.ln_in.b', (self.sizes[0],))]
        for i in range(len(self.sizes) - 1):
            shapes += [(f'{self.name}.l{i}.w', (self.sizes[i], self.sizes[i + 1])),
                       (f'{self.name}.l{i}.b', (self.sizes[i + 1],))]
            if i == 0 and self.hidden_norm:
                shapes += [(f'{self.name}.ln0.g', (self.sizes[1],)), (f'{self.name}.ln0.b', (self.sizes[1],))]
        return shapes


def orthogonal(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float) -> np.ndarray:
    """Orthogonal (fan_in, fan_out) matrix scaled by gain"""
    rows, cols = max(fan_in, fan_out), min(fan_in, fan_out)
    a = rng.standard_normal((rows, cols))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.where(np.diag(r) == 0, 1.0, np.diag(r)))
    if fan_in < fan_out:
        q = q.T
    return gain * q[:fan_in, :fan_out]


def init_mlp(spec: MLPSpec, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    arrays: Dict[str, np.ndarray] = OrderedDict()
    last = len(spec.sizes) - 2
    for name, shape in spec.parameter_shapes():
        if name.endswith('.g'):
            arrays[name] = np.ones(shape)
        elif name.endswith('.w'):
            gain = spec.output_gain if name.endswith(f'.l{last}.w') else HIDDEN_GAIN
            arrays[name] = orthogonal(rng, shape[0], shape[1], gain)
        elif name.endswith(f'.l{last}.b'):
            arrays[name] = np.full(shape, spec.output_bias)
        else:
            arrays[name] = np.zeros(shape)
    return arrays


def mlp_forward(params: 'PolicyParams', spec: MLPSpec, x: Tensor) -> Tensor:
    if spec.input_norm:
        x = tg.layer_norm(x, params[f'{spec.name}.ln_in.g'], params[f'{spec.name}.ln_in.b'])
    layers = len(spec.sizes) - 1
    for i in range(layers):
        x = tg.linear(x, params[f'{spec.name}.l{i}.w'], params[f'{spec.name}.l{i}.b'])
        if i == 0 and spec.hidden_norm:
            x = tg.layer_norm(x, params[f'{spec.name}.ln0.g'], params[f'{spec.name}.ln0.b'])
        if i < layers - 1 or spec.final_activation:
            x = tg.tanh(x)
    return x


def softplus_inverse(y: float) -> float:
    return float(math.log(math.expm1(y)))


@lru_cache(maxsize=64)
def urma_networks(config: PolicyConfig, role: str) -> Dict[str, MLPSpec]:
    """MLP layouts of the URMA actor ('actor') or critic ('critic')"""
    ln = config.layer_norm
    L = config.latent_dim
    nets: Dict[str, MLPSpec] = OrderedDict()
    nets['joint_desc'] = MLPSpec(f'{role}.joint_desc', (JOINT_DESCRIPTION_SIZE,) + config.description_hidden + (L,),
                                 hidden_norm=ln)
    nets['joint_obs'] = MLPSpec(f'{role}.joint_obs', (JOINT_OBS_SIZE,) + config.observation_hidden + (L,),
                                hidden_norm=ln)
    nets['foot_desc'] = MLPSpec(f'{role}.foot_desc', (FOOT_DESCRIPTION_SIZE,) + config.description_hidden + (L,),
                                hidden_norm=ln)
    nets['foot_obs'] = MLPSpec(f'{role}.foot_obs', (FOOT_OBS_SIZE,) + config.observation_hidden + (L,),
                               hidden_norm=ln)
    general = GENERAL_OBS_SIZE + (PRIVILEGED_OBS_SIZE if role == 'critic' else 0)
    nets['core'] = MLPSpec(f'{role}.core', (general + 2 * L,) + config.core_hidden, hidden_norm=ln)
    core_out = config.core_hidden[-1]
    if role == 'critic':
        nets['value'] = MLPSpec(f'{role}.value', (core_out, 1), hidden_norm=False,
                                final_activation=False, output_gain=1.0)
        return nets
    if config.shared_description_encoder is None:
        nets['decoder_desc'] = MLPSpec(f'{role}.decoder_desc',
                                       (JOINT_DESCRIPTION_SIZE,) + config.decoder_description_hidden + (L,),
                                       hidden_norm=ln)
    nets['mean'] = MLPSpec(f'{role}.mean', (2 * L + core_out,) + config.mean_hidden + (1,),
                           input_norm=ln, hidden_norm=ln, final_activation=False,
                           output_gain=config.mean_output_gain)
    nets['std'] = MLPSpec(f'{role}.std', (L,) + config.std_hidden + (1,), hidden_norm=False,
                          final_activation=False, output_gain=0.01,
                          output_bias=softplus_inverse(config.init_std))
    return nets


# ---------------------------------------------------------------------------
# Parameter container
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PolicyParams:
    """
    Immutable set of named parameter tensors plus the config and registry
    they were built for. Updates produce a new PolicyParams.
    """
    tensors: Mapping[str, Tensor]
    config: PolicyConfig
    registry: Mapping[str, Any] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self.tensors[name]
        except KeyError:
            raise PolicyError(f"Parameter '{name}' not found ({self.config.architecture} policy)")

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self, role: Optional[str] = None) -> List[str]:
        if role is None:
            return list(self.tensors)
        return [n for n in self.tensors if n.startswith(f'{role}.')]

    def arrays(self) -> Dict[str, np.ndarray]:
        return OrderedDict((n, t.values) for n, t in self.tensors.items())

    def with_arrays(self, updates: Mapping[str, np.ndarray], registry: Optional[Mapping[str, Any]] = None) -> 'PolicyParams':
        """New params with some tensors replaced (names may also be added)"""
        tensors = OrderedDict(self.tensors)
        for name, arr in updates.items():
            tensors[name] = tg.parameter(arr, name=name)
        return replace(self, tensors=tensors, registry=self.registry if registry is None else registry)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(t.values)) for t in self.tensors.values())


def params_from_arrays(arrays: Mapping[str, np.ndarray], config: PolicyConfig,
                       registry: Optional[Mapping[str, Any]] = None) -> PolicyParams:
    tensors = OrderedDict((name, tg.parameter(arr, name=name)) for name, arr in arrays.items())
    return PolicyParams(tensors=tensors, config=config, registry=dict(registry or {}))


def init_policy_params(config: PolicyConfig,
                       rng: np.random.Generator,
                       robots: Optional[Iterable[RobotSpec]] = None) -> PolicyParams:
    """
    Initialize a policy of config.architecture.

    Args:
        config: Architecture settings
        rng: Generator for weight initialization
        robots: Training robots (needed to size multi-head slots and the
            padding task registry; ignored by URMA)

    Returns:
        PolicyParams with actor and critic parameters
    """
    if config.architecture == 'multihead':
        from baselines import init_multihead_params
        params = init_multihead_params(config, rng, list(robots or []))
    elif config.architecture == 'padding':
        from baselines import init_padding_params
        params = init_padding_params(config, rng, list(robots or []))
    else:
        arrays: Dict[str, np.ndarray] = OrderedDict()
        for role in ('actor', 'critic'):
            for spec in urma_networks(config, role).values():
                arrays.update(init_mlp(spec, rng))
            arrays[f'{role}.tau_joint'] = np.array(config.tau_init)
            arrays[f'{role}.tau_foot'] = np.array(config.tau_init)
        params = params_from_arrays(arrays, config)
    actor, critic = count_parameters(params, 'actor'), count_parameters(params, 'critic')
    logger.info(f"Initialized {config.architecture} policy: {actor:,} actor / {critic:,} critic parameters")
    return params


def count_parameters(params: Union[PolicyParams, Mapping[str, Tensor]], role: Optional[str] = None) -> int:
    """Exact number of learnable scalars (optionally only names under `role.`)"""
    tensors = params.tensors if isinstance(params, PolicyParams) else params
    return int(sum(t.size for n, t in tensors.items() if role is None or n.startswith(f'{role}.')))


def parameter_breakdown(params: PolicyParams) -> Dict[str, int]:
    """Parameter count per sub-network (first two name components)"""
    out: Dict[str, int] = OrderedDict()
    for name, tensor in params.tensors.items():
        parts = name.split('.')
        key = '.'.join(parts[:2]) if len(parts) > 2 else name
        out[key] = out.get(key, 0) + tensor.size
    return out


# ---------------------------------------------------------------------------
# URMA forward passes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ActionDistribution:
    """Diagonal Gaussian over joint actions, shape (B, J)"""
    mean: Tensor
    std: Tensor

    @property
    def num_joints(self) -> int:
        return self.mean.shape[-1]


@dataclass(frozen=True)
class SetEncoding:
    pooled: Tensor               # (B, L)
    elements: Tensor             # (B, N, L)
    attention: Tensor            # (B, N, L) softmax routing weights
    description_latent: Tensor   # (B, N, L) pre-softmax description encoding


def _encode(params: PolicyParams, role: str, kind: str,
            observations: Tensor, descriptions: Tensor) -> SetEncoding:
    nets = urma_networks(params.config, role)
    if observations.ndim != 3 or observations.shape[:2] != descriptions.shape[:2]:
        raise PolicyError(f"Set shapes do not match: observations {observations.shape}, "
                          f"descriptions {descriptions.shape}")
    if observations.shape[1] == 0:
        raise PolicyError(f"Empty {kind} set")
    desc_net, obs_net = nets[f'{kind}_desc'], nets[f'{kind}_obs']
    if descriptions.shape[-1] != desc_net.sizes[0] or observations.shape[-1] != obs_net.sizes[0]:
        raise PolicyError(f"{kind} element widths {observations.shape[-1]}/{descriptions.shape[-1]} "
                          f"do not match encoder inputs {obs_net.sizes[0]}/{desc_net.sizes[0]}")
    latent = mlp_forward(params, desc_net, descriptions)
    attention = tg.softmax_with_temperature(latent, params[f'{role}.tau_{kind}'], params.config.tau_floor)
    elements = tg.mul(attention, mlp_forward(params, obs_net, observations))
    pooled = tg.reduce_sum_over_set(elements, axis=1)
    return SetEncoding(pooled=pooled, elements=elements, attention=attention, description_latent=latent)


def encode_set(observations: Union[np.ndarray, Tensor],
               descriptions: Union[np.ndarray, Tensor],
               params: PolicyParams,
               kind: str = 'joint',
               role: str = 'actor') -> Tuple[Tensor, Tensor]:
    """
    Attention set encoding: z_j = softmax(f_phi(d_j) / (tau + eps)) * f_psi(o_j), z = sum_j z_j.

    Args:
        observations: (N, o) or (B, N, o) element observations
        descriptions: (N, d) or (B, N, d) element descriptions
        params: URMA params
        kind: 'joint' or 'foot'
        role: 'actor' or 'critic' encoder weights

    Returns:
        (pooled latent (B, L), per-element latents (B, N, L))
    """
    obs = observations if isinstance(observations, Tensor) else tg.constant(observations)
    desc = descriptions if isinstance(descriptions, Tensor) else tg.constant(descriptions)
    if obs.ndim == 2:
        obs, desc = tg.reshape(obs, (1,) + obs.shape), tg.reshape(desc, (1,) + desc.shape)
    enc = _encode(params, role, kind, obs, desc)
    return enc.pooled, enc.elements


def _check_arity(batch: ObservationBatch, robot: RobotSpec) -> None:
    if batch.num_joints != robot.num_joints or batch.num_feet != robot.num_feet:
        raise PolicyError(
            f"Observations have {batch.num_joints} joints/{batch.num_feet} feet but robot "
            f"'{robot.name}' has {robot.num_joints}/{robot.num_feet}"
        )


def _encode_robot(batch: ObservationBatch, params: PolicyParams, role: str) -> Tuple[SetEncoding, SetEncoding]:
    enc_j = _encode(params, role, 'joint', tg.constant(batch.joint_obs), tg.constant(batch.joint_descriptions))
    enc_f = _encode(params, role, 'foot', tg.constant(batch.foot_obs), tg.constant(batch.foot_descriptions))
    return enc_j, enc_f


def urma_forward(observations, robot: RobotSpec, params: PolicyParams) -> ActionDistribution:
    """
    Actor forward pass for any joint count.

    Args:
        observations: ObservationBundle or ObservationBatch of this robot
        robot: Robot the observations belong to
        params: URMA params

    Returns:
        ActionDistribution with mean and std of shape (B, J)
    """
    batch = as_batch(observations)
    _check_arity(batch, robot)
    config = params.config
    nets = urma_networks(config, 'actor')
    enc_j, enc_f = _encode_robot(batch, params, 'actor')

    core_in = tg.concat([tg.constant(batch.general_obs), enc_j.pooled, enc_f.pooled], axis=-1)
    action_latent = mlp_forward(params, nets['core'], core_in)

    if config.shared_description_encoder == 'full':
        joint_latent = enc_j.attention
    elif config.shared_description_encoder == 'partial':
        joint_latent = enc_j.description_latent
    else:
        joint_latent = mlp_forward(params, nets['decoder_desc'], tg.constant(batch.joint_descriptions))

    num_joints = batch.num_joints
    mean_in = tg.concat([joint_latent, tg.expand(action_latent, 1, num_joints), enc_j.elements], axis=-1)
    mean = tg.reshape(mlp_forward(params, nets['mean'], mean_in), (batch.batch_size, num_joints))
    std = tg.reshape(tg.softplus(mlp_forward(params, nets['std'], joint_latent)), (batch.batch_size, num_joints))
    return ActionDistribution(
        mean=tg.clip(mean, -config.mean_clip, config.mean_clip),
        std=tg.clip(std, config.std_min, config.std_max),
    )


def critic_value(observations, robot: RobotSpec, params: PolicyParams) -> Tensor:
    """
    State value from a mirrored trunk that also sees the privileged
    trunk velocity and height.

    Returns:
        Tensor of shape (B,)
    """
    batch = as_batch(observations)
    _check_arity(batch, robot)
    if batch.privileged_obs is None:
        raise PolicyError("Critic requires privileged observations (trunk velocity and height)")
    nets = urma_networks(params.config, 'critic')
    enc_j, enc_f = _encode_robot(batch, params, 'critic')
    core_in = tg.concat([
        tg.constant(batch.general_obs), tg.constant(batch.privileged_obs), enc_j.pooled, enc_f.pooled,
    ], axis=-1)
    hidden = mlp_forward(params, nets['core'], core_in)
    return tg.reshape(mlp_forward(params, nets['value'], hidden), (batch.batch_size,))


def policy_forward(observations, robot: RobotSpec, params: PolicyParams) -> ActionDistribution:
    """Actor forward pass of whichever architecture the params hold"""
    arch = params.config.architecture
    if arch == 'multihead':
        from baselines import multihead_forward
        return multihead_forward(observations, robot, params)
    if arch == 'padding':
        from baselines import padding_forward
        return padding_forward(observations, robot, params)
    return urma_forward(observations, robot, params)


def policy_value(observations, robot: RobotSpec, params: PolicyParams) -> Tensor:
    """Critic forward pass of whichever architecture the params hold"""
    arch = params.config.architecture
    if arch == 'multihead':
        from baselines import multihead_value
        return multihead_value(observations, robot, params)
    if arch == 'padding':
        from baselines import padding_value
        return padding_value(observations, robot, params)
    return critic_value(observations, robot, params)


def check_robot_supported(params: PolicyParams, robot: RobotSpec) -> None:
    """Raise PolicyError before any compute if the policy cannot drive this robot"""
    arch = params.config.architecture
    if arch == 'multihead':
        from baselines import morphology_group
        head = morphology_group(robot)
        slots = params.registry.get('heads', {}).get(head)
        if slots is None:
            raise PolicyError(f"No '{head}' head in this multi-head policy (robot '{robot.name}')")
        if robot.num_joints > slots['joint_slots'] or robot.num_feet > slots['foot_slots']:
            raise PolicyError(f"Robot '{robot.name}' overflows head '{head}' "
                              f"({slots['joint_slots']} joint / {slots['foot_slots']} foot slots)")
    elif arch == 'padding':
        if robot.name not in params.registry.get('tasks', []):
            raise PolicyError(f"Robot '{robot.name}' has no task slot in this padding policy")
        if robot.num_joints > params.config.max_joints or robot.num_feet > params.config.max_feet:
            raise PolicyError(f"Robot '{robot.name}' overflows the padding layout")


def sample_and_logprob(dist: ActionDistribution, rng: np.random.Generator) -> Tuple[np.ndarray, Tensor]:
    """
    Draw a diagonal-Gaussian action and its differentiable log-probability.

    Returns:
        (actions (B, J), log-probabilities (B,))
    """
    noise = rng.standard_normal(dist.mean.shape)
    action = dist.mean.values + dist.std.values * noise
    return action, tg.gaussian_logprob(dist.mean, dist.std, tg.constant(action))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def params_digest(params: PolicyParams) -> str:
    """SHA-256 over parameter names and bytes in sorted name order"""
    h = hashlib.sha256()
    for name in sorted(params.tensors):
        arr = np.ascontiguousarray(params.tensors[name].values, dtype=np.float64)
        h.update(name.encode('utf-8'))
        h.update(str(arr.shape).encode('utf-8'))
        h.update(arr.tobytes())
    return h.hexdigest()


def save_checkpoint(params: PolicyParams, path: str,
                    rng: Optional[np.random.Generator] = None,
                    extras: Optional[Mapping[str, Any]] = None) -> str:
    """
    Write params, config, registry, RNG state and extras to an .npz container

    Returns:
        Path written
    """
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    meta = {
        'version': CHECKPOINT_VERSION,
        'config': params.config.to_dict(),
        'registry': params.registry,
        'rng_state': rng.bit_generator.state if rng is not None else None,
        'extras': dict(extras or {}),
        'digest': params_digest(params),
        'order': list(params.tensors),
    }
    payload = {f'param::{name}': np.asarray(t.values) for name, t in params.tensors.items()}
    payload['__meta__'] = np.array(json.dumps(meta, default=str))
    with open(path, 'wb') as f:
        np.savez(f, **payload)
    logger.info(f"✓ Saved checkpoint to {path}")
    return path


@dataclass(frozen=True)
class Checkpoint:
    params: PolicyParams
    rng_state: Optional[Dict[str, Any]]
    extras: Dict[str, Any]

    def restore_rng(self) -> Optional[np.random.Generator]:
        if self.rng_state is None:
            return None
        rng = np.random.default_rng()
        rng.bit_generator.state = self.rng_state
        return rng


def load_checkpoint(path: str) -> Checkpoint:
    """Read a checkpoint written by save_checkpoint and check its layout"""
    if not os.path.exists(path):
        raise CheckpointError(f"Checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data['__meta__']))
            arrays = {k[len('param::'):]: np.array(data[k]) for k in data.files if k.startswith('param::')}
    except (OSError, ValueError, KeyError) as e:
        raise CheckpointError(f"Unreadable checkpoint {path}: {e}") from e
    if meta.get('version') != CHECKPOINT_VERSION:
        raise CheckpointError(f"Checkpoint version {meta.get('version')} != {CHECKPOINT_VERSION}")
    config = PolicyConfig.from_dict(meta['config'])
    order = meta.get('order') or sorted(arrays)
    missing = [n for n in order if n not in arrays]
    if missing:
        raise CheckpointError(f"Checkpoint {path} is missing parameters: {missing[:5]}")
    params = params_from_arrays(OrderedDict((n, arrays[n]) for n in order), config, meta.get('registry'))
    _check_layout(params)
    return Checkpoint(params=params, rng_state=meta.get('rng_state'), extras=meta.get('extras') or {})


def expected_shapes(params: PolicyParams) -> Dict[str, Tuple[int, ...]]:
    """Parameter shapes a freshly built policy with the same config and registry would have"""
    config = params.config
    if config.architecture == 'multihead':
        from baselines import multihead_shapes
        return multihead_shapes(config, params.registry)
    if config.architecture == 'padding':
        from baselines import padding_shapes
        return padding_shapes(config)
    shapes: Dict[str, Tuple[int, ...]] = OrderedDict()
    for role in ('actor', 'critic'):
        for spec in urma_networks(config, role).values():
            shapes.update(spec.parameter_shapes())
        shapes[f'{role}.tau_joint'] = ()
        shapes[f'{role}.tau_foot'] = ()
    return shapes


def _check_layout(params: PolicyParams) -> None:
    expected = expected_shapes(params)
    actual = {n: t.shape for n, t in params.tensors.items()}
    if set(expected) != set(actual):
        diff = sorted(set(expected) ^ set(actual))
        raise CheckpointError(f"Parameter names do not match the config: {diff[:5]}")
    wrong = [n for n in expected if tuple(expected[n]) != tuple(actual[n])]
    if wrong:
        raise CheckpointError(f"Parameter shapes do not match the config: {wrong[:5]}")
