"""
Trainer Module
Multi-task PPO over a robot fleet: rollout collection, generalized
advantage estimation, clipped-surrogate updates on per-robot mini-batches,
deterministic evaluation, zero-shot tracking and fine-tuning.
"""

import json
import logging
import math
import os
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

import tensorgrad as tg
from morphology import RobotSpec, perturb_descriptions
from policy import (
    PolicyError,
    PolicyParams,
    check_robot_supported,
    params_digest,
    policy_forward,
    policy_value,
    save_checkpoint,
)
from reward import resolve_coefficients
from surrogate_env import EnvConfig, LocomotionEnv, ObservationBatch, reset, stack_bundles, step
from theory import BoundConfig, advantage_bounds, normalize_loss, ppo_sample_loss, ratio_filter

logger = logging.getLogger(__name__)

FINE_TUNE_LR_FACTOR = 1.0 / 3.0
EVAL_TRAINING_STEP = 10 ** 12  # past every curriculum: full penalty weights
ENTROPY_CONSTANT = 0.5 * math.log(2.0 * math.pi * math.e)

CURVE_COLUMNS = [
    'global_step', 'iteration', 'robot', 'zero_shot', 'mean_return', 'mean_episode_length',
    'mean_step_reward', 'tracking_share', 'mean_abs_action', 'policy_loss', 'value_loss', 'entropy',
    'approx_kl', 'clip_fraction', 'grad_norm', 'filtered_fraction', 'normalized_loss', 'lr',
    'tau_joints', 'tau_feet',
]


class TrainConfigError(ValueError):
    """Raised for inconsistent training settings"""


class NonFiniteLossError(RuntimeError):
    """Raised when a PPO loss turns NaN or infinite; carries a diagnostic dict"""

    def __init__(self, message: str, diagnostics: Dict[str, Any]):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class TrainConfig:
    """PPO settings; defaults are the desk-scale shrink of the full-size run"""
    steps_per_env: int = 256
    envs_per_robot: int = 3
    samples_per_robot: int = 192
    epochs: int = 10
    clip: float = 0.1
    gamma: float = 0.99
    gae_lambda: float = 0.9
    entropy_coef: float = 0.0
    value_coef: float = 0.5
    max_grad_norm: float = 5.0
    learning_rate: float = 4e-4
    lr_scale: float = 1.0
    adam_betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    total_steps: int = 2_000_000
    normalize_advantages: bool = True
    ratio_cap: Optional[float] = None
    tau_min: float = 0.0
    num_workers: int = 1
    eval_episodes: int = 2
    eval_interval: int = 10
    checkpoint_interval: int = 25
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'adam_betas', tuple(float(b) for b in self.adam_betas))
        positive = ('steps_per_env', 'envs_per_robot', 'samples_per_robot', 'epochs', 'max_grad_norm',
                    'learning_rate', 'total_steps', 'num_workers', 'eval_interval', 'checkpoint_interval')
        for name in positive:
            if getattr(self, name) <= 0:
                raise TrainConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 < self.clip < 1.0:
            raise TrainConfigError(f"clip must lie in (0, 1), got {self.clip}")
        if not 0.0 <= self.gamma < 1.0 or not 0.0 <= self.gae_lambda <= 1.0:
            raise TrainConfigError(f"Invalid gamma/lambda ({self.gamma}, {self.gae_lambda})")
        if self.lr_scale < 0 or self.entropy_coef < 0 or self.value_coef < 0:
            raise TrainConfigError("lr_scale and loss coefficients must be nonnegative")
        if self.samples_per_robot > self.steps_per_robot:
            raise TrainConfigError(
                f"samples_per_robot={self.samples_per_robot} exceeds the {self.steps_per_robot} "
                f"transitions each robot collects per rollout"
            )
        if self.ratio_cap is not None and self.ratio_cap <= self.clip:
            raise TrainConfigError(f"ratio_cap={self.ratio_cap} must exceed clip={self.clip}")
        if self.ratio_cap is not None and self.gamma <= 0.0:
            raise TrainConfigError("The ratio filter needs gamma > 0 for its advantage bounds")
        if self.tau_min < 0:
            raise TrainConfigError("tau_min must be nonnegative")

    @classmethod
    def full_scale(cls, num_robots: int = 16, **overrides) -> 'TrainConfig':
        """Full-size rollout and mini-batch sizes, 100M steps per robot"""
        base = dict(steps_per_env=10880, samples_per_robot=2040, total_steps=100_000_000 * num_robots)
        base.update(overrides)
        return cls(**base)

    @property
    def steps_per_robot(self) -> int:
        return self.steps_per_env * self.envs_per_robot

    @property
    def minibatches(self) -> int:
        return self.steps_per_robot // self.samples_per_robot

    def steps_per_iteration(self, num_robots: int) -> int:
        return self.steps_per_robot * num_robots

    def to_dict(self) -> Dict[str, Any]:
        out = asdict(self)
        out['adam_betas'] = list(self.adam_betas)
        return out


def learning_rate_at(progress: float, config: TrainConfig) -> float:
    """Linearly annealed learning rate; exactly zero at progress >= 1"""
    remaining = max(0.0, 1.0 - min(max(progress, 0.0), 1.0))
    return config.learning_rate * config.lr_scale * remaining


# ---------------------------------------------------------------------------
# Rollouts
# ---------------------------------------------------------------------------

def concat_batches(batches: Sequence[ObservationBatch]) -> ObservationBatch:
    has_priv = all(b.privileged_obs is not None for b in batches)
    return ObservationBatch(
        joint_obs=np.concatenate([b.joint_obs for b in batches]),
        foot_obs=np.concatenate([b.foot_obs for b in batches]),
        general_obs=np.concatenate([b.general_obs for b in batches]),
        privileged_obs=np.concatenate([b.privileged_obs for b in batches]) if has_priv else None,
        joint_descriptions=np.concatenate([b.joint_descriptions for b in batches]),
        foot_descriptions=np.concatenate([b.foot_descriptions for b in batches]),
    )


@dataclass
class RobotSegment:
    """
    One robot's share of a rollout.

    Flat arrays index transitions time-major (t * envs + e); (T, E) arrays
    keep the time/env layout needed by GAE.
    """
    robot: RobotSpec
    observations: ObservationBatch
    actions: np.ndarray         # (N, J)
    logprobs: np.ndarray        # (N,)
    rewards: np.ndarray         # (T, E), time-out bootstraps folded in
    values: np.ndarray          # (T, E)
    dones: np.ndarray           # (T, E)
    last_values: np.ndarray     # (E,)
    tracking: np.ndarray        # (T, E) weighted T1 + T2
    raw_rewards: np.ndarray     # (T, E)
    r_max: float
    episode_returns: List[float] = field(default_factory=list)
    episode_lengths: List[int] = field(default_factory=list)
    mean_abs_action: float = 0.0
    advantages: Optional[np.ndarray] = None
    returns: Optional[np.ndarray] = None

    @property
    def size(self) -> int:
        return self.actions.shape[0]


@dataclass
class RolloutBuffer:
    """Per-robot rollout segments of equal length"""
    segments: List[RobotSegment]
    global_step: int = 0

    @property
    def num_transitions(self) -> int:
        return sum(seg.size for seg in self.segments)

    @property
    def has_advantages(self) -> bool:
        return all(seg.advantages is not None for seg in self.segments)

    def compute_advantages(self, gamma: float, lam: float) -> None:
        for seg in self.segments:
            adv, ret = compute_gae(seg.rewards, seg.values, seg.dones, seg.last_values, gamma, lam)
            seg.advantages = adv.reshape(-1)
            seg.returns = ret.reshape(-1)

    def robot_ids(self) -> np.ndarray:
        """Robot index of every transition in segment order"""
        return np.concatenate([np.full(seg.size, i) for i, seg in enumerate(self.segments)])


def compute_gae(rewards: np.ndarray,
                values: np.ndarray,
                dones: np.ndarray,
                last_values,
                gamma: float,
                lam: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    Generalized advantage estimation.

    Args:
        rewards: (T,) or (T, E) rewards
        values: Critic values aligned with rewards
        dones: 1 where the episode ended at that step (no bootstrap across it)
        last_values: Values of the observations after the final step
        gamma: Discount
        lam: GAE lambda

    Returns:
        (advantages, returns) with returns = advantages + values
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    if rewards.shape != values.shape or rewards.shape != dones.shape or rewards.ndim == 0:
        raise ValueError(f"GAE inputs differ in shape: rewards {rewards.shape}, values {values.shape}, "
                         f"dones {dones.shape}")
    last = np.asarray(last_values, dtype=np.float64)
    if last.shape not in ((), rewards.shape[1:]):
        raise ValueError(f"Bootstrap values {last.shape} do not match {rewards.shape[1:]}")

    advantages = np.zeros_like(rewards)
    gae = np.zeros(rewards.shape[1:])
    for t in reversed(range(rewards.shape[0])):
        next_value = last if t == rewards.shape[0] - 1 else values[t + 1]
        nonterminal = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * nonterminal - values[t]
        gae = delta + gamma * lam * nonterminal * gae
        advantages[t] = gae
    return advantages, advantages + values


def make_envs(robots: Sequence[RobotSpec], env_config: EnvConfig, envs_per_robot: int,
              seed: int) -> List[List[LocomotionEnv]]:
    """Environment instances with independent generator streams, robot-major"""
    streams = np.random.SeedSequence(seed).spawn(len(robots) * envs_per_robot)
    envs = []
    for r, robot in enumerate(robots):
        envs.append([
            LocomotionEnv(robot, env_config, np.random.default_rng(streams[r * envs_per_robot + e]))
            for e in range(envs_per_robot)
        ])
    return envs


def _step_envs(envs: Sequence[LocomotionEnv], actions: np.ndarray, training_step: int,
               pool: Optional[ThreadPoolExecutor]):
    if pool is None:
        return [env.step(a, training_step) for env, a in zip(envs, actions)]
    return list(pool.map(lambda pair: pair[0].step(pair[1], training_step), zip(envs, actions)))


def collect_rollouts(params: PolicyParams,
                     robots: Sequence[RobotSpec],
                     env_config: EnvConfig,
                     train_config: TrainConfig,
                     envs: Optional[List[List[LocomotionEnv]]] = None,
                     global_step: int = 0,
                     pool: Optional[ThreadPoolExecutor] = None) -> RolloutBuffer:
    """
    Run every robot's environments for steps_per_env control steps.

    Args:
        params: Policy params (read-only during collection)
        robots: Training robots
        env_config: Environment settings
        train_config: Rollout sizes, discount and seed
        envs: Persistent environments from make_envs (fresh ones when None)
        global_step: Fleet step count at the start, drives the curriculum
        pool: Optional thread pool stepping environments in parallel

    Returns:
        RolloutBuffer with one segment per robot
    """
    if not robots:
        raise ValueError("collect_rollouts needs at least one robot")
    T, E = train_config.steps_per_env, train_config.envs_per_robot
    envs = envs or make_envs(robots, env_config, E, train_config.seed)
    gamma = train_config.gamma
    segments = []

    for robot_index, (robot, robot_envs) in enumerate(zip(robots, envs)):
        for env in robot_envs:
            if env.bundle is None:
                env.reset()
        batches, actions, logprobs = [], [], []
        rewards, raw, values, dones, tracking = (np.zeros((T, E)) for _ in range(5))
        ep_returns: List[float] = []
        ep_lengths: List[int] = []
        abs_action = 0.0

        for t in range(T):
            batch = stack_bundles([env.bundle for env in robot_envs])
            dist = policy_forward(batch, robot, params)
            noise = np.stack([env.rng.standard_normal(robot.num_joints) for env in robot_envs])
            action = dist.mean.values + dist.std.values * noise
            logp = tg.gaussian_logprob(dist.mean, dist.std, tg.constant(action)).values
            values[t] = policy_value(batch, robot, params).values

            training_step = global_step + t * E * len(robots) + robot_index * E
            results = _step_envs(robot_envs, action, training_step, pool)
            for e, (_, breakdown, done, info) in enumerate(results):
                raw[t, e] = breakdown.total
                rewards[t, e] = breakdown.total
                tracking[t, e] = breakdown.tracking
                dones[t, e] = float(done)
                if done:
                    ep_returns.append(float(info.episode_return))
                    ep_lengths.append(int(info.episode_length))
                    if info.time_out and not info.terminated:
                        rewards[t, e] += gamma * policy_value(info.final_bundle, robot, params).values[0]
            batches.append(batch)
            actions.append(action)
            logprobs.append(logp)
            abs_action += float(np.abs(action).mean())

        last_values = policy_value(stack_bundles([env.bundle for env in robot_envs]), robot, params).values
        segments.append(RobotSegment(
            robot=robot,
            observations=concat_batches(batches),
            actions=np.concatenate(actions),
            logprobs=np.concatenate(logprobs),
            rewards=rewards,
            values=values,
            dones=dones,
            last_values=last_values,
            tracking=tracking,
            raw_rewards=raw,
            r_max=resolve_coefficients(robot, env_config.single_reward_set).tracking_max,
            episode_returns=ep_returns,
            episode_lengths=ep_lengths,
            mean_abs_action=abs_action / T,
        ))
    return RolloutBuffer(segments=segments, global_step=global_step)


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------

class AdamOptimizer:
    """Adaptive-moment optimizer over named parameter arrays"""

    def __init__(self, betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.betas = betas
        self.eps = eps
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, arrays: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
             lr: float) -> Dict[str, np.ndarray]:
        self.t += 1
        b1, b2 = self.betas
        out: Dict[str, np.ndarray] = OrderedDict()
        for name, value in arrays.items():
            g = grads.get(name)
            if g is None:
                out[name] = value
                continue
            m = self.m.get(name)
            if m is None or m.shape != value.shape:
                m, v = np.zeros_like(value), np.zeros_like(value)
            else:
                v = self.v[name]
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            self.m[name], self.v[name] = m, v
            m_hat = m / (1.0 - b1 ** self.t)
            v_hat = v / (1.0 - b2 ** self.t)
            out[name] = value - lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return out


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for _, g in sorted(grads.items())))


@dataclass
class UpdateStats:
    policy_loss: float = 0.0
    value_loss: float = 0.0
    entropy: float = 0.0
    approx_kl: float = 0.0
    clip_fraction: float = 0.0
    grad_norm: float = 0.0
    clipped_grad_norm: float = 0.0
    learning_rate: float = 0.0
    minibatches: int = 0
    filtered_fraction: float = 0.0
    normalized_loss: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _total(terms: List[tg.Tensor]) -> tg.Tensor:
    out = terms[0]
    for term in terms[1:]:
        out = tg.add(out, term)
    return out


def _minibatch_loss(params: PolicyParams, buffer: RolloutBuffer, indices: List[np.ndarray],
                    config: TrainConfig) -> Tuple[tg.Tensor, Dict[str, float]]:
    advantages = [seg.advantages[idx] for seg, idx in zip(buffer.segments, indices)]
    if config.normalize_advantages:
        flat = np.concatenate(advantages)
        mu, sd = flat.mean(), flat.std()
        advantages = [(a - mu) / (sd + 1e-8) for a in advantages]
    total = sum(len(idx) for idx in indices)

    policy_terms, value_terms, entropy_terms = [], [], []
    kept = kl_sum = clipped = 0.0
    normalized: List[np.ndarray] = []
    for seg, idx, adv in zip(buffer.segments, indices, advantages):
        batch = seg.observations.select(idx)
        dist = policy_forward(batch, seg.robot, params)
        logp = tg.gaussian_logprob(dist.mean, dist.std, tg.constant(seg.actions[idx]))
        ratio = tg.exp(tg.sub(logp, tg.constant(seg.logprobs[idx])))
        r = ratio.values
        keep = np.ones(len(idx), dtype=bool)
        if config.ratio_cap is not None:
            keep = ratio_filter(adv, r, config.ratio_cap)
            bounds = BoundConfig(r_max=seg.r_max, gamma=config.gamma, clip=config.clip,
                                 ratio_cap=config.ratio_cap)
            a_min, a_max = advantage_bounds(bounds.r_max, bounds.gamma)
            # Bound terms use unnormalized advantages, filtered by their own sign
            raw_adv = np.clip(seg.advantages[idx], a_min, a_max)
            raw_keep = ratio_filter(raw_adv, r, config.ratio_cap)
            if raw_keep.any() and bounds.r_max > 0:
                normalized.append(normalize_loss(
                    ppo_sample_loss(raw_adv[raw_keep], r[raw_keep], config.clip), bounds))

        a = tg.constant(adv)
        surrogate = tg.neg(tg.minimum(tg.mul(ratio, a),
                                      tg.mul(tg.clip(ratio, 1.0 - config.clip, 1.0 + config.clip), a)))
        policy_terms.append(tg.sum(tg.mul(surrogate, tg.constant(keep.astype(np.float64)))))
        value = policy_value(batch, seg.robot, params)
        value_terms.append(tg.sum(tg.square(tg.sub(value, tg.constant(seg.returns[idx])))))
        entropy_terms.append(tg.sum(tg.log(dist.std)))

        kept += float(keep.sum())
        log_r = logp.values - seg.logprobs[idx]
        kl_sum += float(np.sum((r - 1.0) - log_r))
        clipped += float(np.sum(np.abs(r - 1.0) > config.clip))

    policy_loss = tg.scale(_total(policy_terms), 1.0 / max(kept, 1.0))
    value_loss = tg.scale(_total(value_terms), 0.5 / total)
    entropy = tg.scale(_total(entropy_terms), 1.0 / total)
    loss = tg.sub(tg.add(policy_loss, tg.scale(value_loss, config.value_coef)),
                  tg.scale(entropy, config.entropy_coef))
    num_joints = sum(seg.robot.num_joints * len(idx) for seg, idx in zip(buffer.segments, indices)) / total
    info = {
        'policy_loss': policy_loss.item(),
        'value_loss': value_loss.item(),
        'entropy': entropy.item() + ENTROPY_CONSTANT * num_joints,
        'approx_kl': kl_sum / total,
        'clip_fraction': clipped / total,
        'filtered_fraction': 1.0 - kept / total,
        'normalized_loss': float(np.concatenate(normalized).mean()) if normalized else None,
    }
    return loss, info


def ppo_update(params: PolicyParams,
               buffer: RolloutBuffer,
               config: TrainConfig,
               progress: float,
               optimizer: Optional[AdamOptimizer] = None,
               rng: Optional[np.random.Generator] = None) -> Tuple[PolicyParams, UpdateStats]:
    """
    Clipped-surrogate PPO epochs over a rollout buffer.

    Each mini-batch holds samples_per_robot transitions from every robot;
    the loss sums robots on one tape weighted by sample count.

    Args:
        params: Current params (also the rollout policy)
        buffer: Rollouts with advantages computed
        config: PPO settings
        progress: Fraction of the step budget consumed, drives the LR
        optimizer: Persistent Adam state (fresh when None)
        rng: Generator for shuffling within robots

    Returns:
        (new params, UpdateStats averaged over mini-batches)
    """
    if not buffer.has_advantages:
        raise ValueError("Compute advantages before ppo_update")
    optimizer = optimizer or AdamOptimizer(config.adam_betas, config.adam_eps)
    rng = rng or np.random.default_rng(config.seed)
    lr = learning_rate_at(progress, config)
    per_robot = config.samples_per_robot
    num_minibatches = min(seg.size for seg in buffer.segments) // per_robot
    if num_minibatches == 0:
        raise TrainConfigError(f"Segments smaller than samples_per_robot={per_robot}")
    leftover = buffer.segments[0].size - num_minibatches * per_robot
    if leftover:
        logger.warning(f"Dropping {leftover} leftover samples per robot and epoch")

    sums: Dict[str, float] = {}
    normalized: List[float] = []
    for epoch in range(config.epochs):
        perms = [rng.permutation(seg.size) for seg in buffer.segments]
        for k in range(num_minibatches):
            indices = [p[k * per_robot:(k + 1) * per_robot] for p in perms]
            with tg.Tape() as tape:
                loss, info = _minibatch_loss(params, buffer, indices, config)
            if not np.isfinite(loss.item()):
                raise NonFiniteLossError(
                    f"Non-finite PPO loss at epoch {epoch}, mini-batch {k}",
                    {
                        'epoch': epoch,
                        'minibatch': k,
                        'global_step': buffer.global_step,
                        'loss_terms': info,
                        'params_finite': params.is_finite(),
                        'robots': [seg.robot.name for seg in buffer.segments],
                        'advantages_finite': all(np.all(np.isfinite(s.advantages)) for s in buffer.segments),
                    },
                )
            tape.backward(loss)
            grads = {name: tape.gradient(t) for name, t in params.tensors.items()}
            norm = global_norm(grads)
            if norm > config.max_grad_norm:
                factor = config.max_grad_norm / norm
                grads = {name: g * factor for name, g in grads.items()}
            clipped_norm = global_norm(grads)

            updated = optimizer.step(params.arrays(), grads, lr)
            for name in updated:
                if name.endswith('.tau_joint') or name.endswith('.tau_foot'):
                    updated[name] = np.maximum(updated[name], config.tau_min)
            params = params.with_arrays(updated)

            for key in ('policy_loss', 'value_loss', 'entropy', 'approx_kl', 'clip_fraction', 'filtered_fraction'):
                sums[key] = sums.get(key, 0.0) + info[key]
            sums['grad_norm'] = sums.get('grad_norm', 0.0) + norm
            sums['clipped_grad_norm'] = sums.get('clipped_grad_norm', 0.0) + clipped_norm
            if info['normalized_loss'] is not None:
                normalized.append(info['normalized_loss'])

    count = config.epochs * num_minibatches
    stats = UpdateStats(
        learning_rate=lr,
        minibatches=count,
        normalized_loss=float(np.mean(normalized)) if normalized else None,
        **{key: value / count for key, value in sums.items()},
    )
    return params, stats


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass
class RobotEvaluation:
    robot: str
    mean_return: float
    std_return: float
    mean_episode_length: float
    tracking_share: float
    mean_abs_action: float
    episodes: int
    zero_shot: bool = False


@dataclass
class EvaluationReport:
    robots: List[RobotEvaluation]

    @property
    def fleet_mean_return(self) -> float:
        return float(np.mean([r.mean_return for r in self.robots])) if self.robots else float('nan')

    @property
    def fleet_tracking_share(self) -> float:
        return float(np.mean([r.tracking_share for r in self.robots])) if self.robots else float('nan')

    def by_robot(self) -> Dict[str, RobotEvaluation]:
        return {r.robot: r for r in self.robots}

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(r) for r in self.robots])

    def to_dict(self) -> Dict[str, Any]:
        return {
            'robots': [asdict(r) for r in self.robots],
            'fleet_mean_return': self.fleet_mean_return,
            'fleet_tracking_share': self.fleet_tracking_share,
        }


def _transform_descriptions(batch: ObservationBatch, permutation: Optional[np.ndarray],
                            scales: Mapping[str, float]) -> ObservationBatch:
    if permutation is None and not scales:
        return batch
    desc = batch.joint_descriptions
    if permutation is not None:
        desc = desc[:, permutation]
    if scales:
        b, j, d = desc.shape
        flat = desc.reshape(b * j, d)
        for group, factor in scales.items():
            flat = perturb_descriptions(flat, group, factor, kind='joint')
        desc = flat.reshape(b, j, d)
    return replace(batch, joint_descriptions=desc)


def evaluate(params: PolicyParams,
             robots: Sequence[RobotSpec],
             env_config: EnvConfig,
             episodes: int = 2,
             seed: int = 0,
             zero_shot: Sequence[str] = (),
             shuffle_descriptions: bool = False,
             description_scales: Optional[Mapping[str, float]] = None,
             max_steps: Optional[int] = None,
             show_progress: bool = False) -> EvaluationReport:
    """
    Deterministic evaluation with the mean action.

    Episodes of one robot run in lockstep as a batch; each has its own
    generator stream so results do not depend on the batch composition.

    Args:
        params: Policy params
        robots: Robots to evaluate
        env_config: Environment settings (randomization, noise, dropout)
        episodes: Episodes per robot
        seed: Evaluation seed
        zero_shot: Names of robots excluded from training (flagged in the report)
        shuffle_descriptions: Reassign joint descriptions to random joints
        description_scales: Multiply description groups by factors, e.g. {'pd': 3.0}
        max_steps: Step cap per episode (episode_length when None)
        show_progress: Show a progress bar over robots

    Returns:
        EvaluationReport with per-robot returns, lengths, tracking share and |action|
    """
    scales = dict(description_scales or {})
    horizon = max_steps or env_config.episode_length
    robot_streams = np.random.SeedSequence(seed).spawn(len(robots))
    results = []

    for robot, stream in tqdm(list(zip(robots, robot_streams)), desc="Evaluating", disable=not show_progress):
        check_robot_supported(params, robot)
        children = stream.spawn(episodes + 1)
        desc_rng = np.random.default_rng(children[-1])
        permutation = desc_rng.permutation(robot.num_joints) if shuffle_descriptions else None
        tracking_max = resolve_coefficients(robot, env_config.single_reward_set).tracking_max

        states, bundles = [], []
        for k in range(episodes):
            state, bundle = reset(robot, env_config, np.random.default_rng(children[k]))
            states.append(state)
            bundles.append(bundle)
        returns = np.zeros(episodes)
        lengths = np.zeros(episodes, dtype=np.int64)
        tracking = np.zeros(episodes)
        abs_action = np.zeros(episodes)
        active = np.ones(episodes, dtype=bool)

        for _ in range(horizon):
            idx = np.flatnonzero(active)
            if idx.size == 0:
                break
            batch = _transform_descriptions(stack_bundles([bundles[k] for k in idx]), permutation, scales)
            actions = policy_forward(batch, robot, params).mean.values
            for row, k in enumerate(idx):
                states[k], bundles[k], breakdown, done = step(
                    states[k], actions[row], robot, env_config, EVAL_TRAINING_STEP)
                returns[k] += breakdown.total
                tracking[k] += breakdown.tracking
                abs_action[k] += float(np.abs(actions[row]).mean())
                lengths[k] += 1
                if done:
                    active[k] = False

        steps = np.maximum(lengths, 1)
        results.append(RobotEvaluation(
            robot=robot.name,
            mean_return=float(returns.mean()),
            std_return=float(returns.std()),
            mean_episode_length=float(lengths.mean()),
            tracking_share=float(np.mean(tracking / (steps * tracking_max))),
            mean_abs_action=float(np.mean(abs_action / steps)),
            episodes=episodes,
            zero_shot=robot.name in zero_shot,
        ))
        logger.info(f"  {robot.name}: return {returns.mean():.2f} ± {returns.std():.2f}, "
                    f"length {lengths.mean():.0f}, tracking {results[-1].tracking_share:.3f}")
    return EvaluationReport(robots=results)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: PolicyParams
    global_step: int
    iterations: int
    curve_path: Optional[str]
    checkpoint_path: Optional[str]
    evaluation: Optional[EvaluationReport]


def _tau(params: PolicyParams, name: str) -> float:
    return params[name].item() if name in params else float('nan')


class MultiRobotTrainer:
    """
    Drives collect -> GAE -> update iterations over a robot fleet, appending
    learning curves, writing checkpoints and tracking held-out robots.
    """

    def __init__(self,
                 params: PolicyParams,
                 robots: Sequence[RobotSpec],
                 env_config: EnvConfig,
                 train_config: TrainConfig,
                 out_dir: Optional[str] = None,
                 holdout: Sequence[RobotSpec] = (),
                 start_step: int = 0,
                 show_progress: bool = True,
                 schedule_start: int = 0):
        """
        Args:
            params: Initial policy params
            robots: Training robots
            env_config: Environment settings
            train_config: PPO settings
            out_dir: Directory for curves.csv and checkpoints (no files when None)
            holdout: Robots evaluated zero-shot during training, never trained on
            start_step: Global step to continue numbering from
            show_progress: Show tqdm progress bars
            schedule_start: Global step the learning-rate schedule anneals from
        """
        if not robots:
            raise TrainConfigError("Training needs at least one robot")
        names = [r.name for r in robots]
        overlap = set(names) & {r.name for r in holdout}
        if overlap:
            raise TrainConfigError(f"Held-out robots also in the training set: {sorted(overlap)}")
        for robot in robots:
            check_robot_supported(params, robot)

        self.params = params
        self.robots = list(robots)
        self.holdout = list(holdout)
        self.env_config = env_config
        self.config = train_config
        self.out_dir = out_dir
        self.show_progress = show_progress
        self.global_step = int(start_step)
        self.schedule_start = int(schedule_start)
        self.iterations = 0
        self.envs = make_envs(self.robots, env_config, train_config.envs_per_robot, train_config.seed)
        self.optimizer = AdamOptimizer(train_config.adam_betas, train_config.adam_eps)
        self.rng = np.random.default_rng([train_config.seed, 1])
        self.last_returns: Dict[str, Tuple[float, float]] = {}
        self.curve_path = os.path.join(out_dir, 'curves.csv') if out_dir else None
        if out_dir:
            os.makedirs(os.path.join(out_dir, 'checkpoints'), exist_ok=True)

    @property
    def progress(self) -> float:
        return (self.global_step - self.schedule_start) / self.config.total_steps

    def _append_curve(self, rows: List[Dict[str, Any]]) -> None:
        if not self.curve_path or not rows:
            return
        frame = pd.DataFrame(rows, columns=CURVE_COLUMNS)
        header = not os.path.exists(self.curve_path)
        frame.to_csv(self.curve_path, mode='a', header=header, index=False, encoding='utf-8')

    def _training_rows(self, buffer: RolloutBuffer, stats: UpdateStats) -> List[Dict[str, Any]]:
        rows = []
        for seg in buffer.segments:
            name = seg.robot.name
            if seg.episode_returns:
                self.last_returns[name] = (float(np.mean(seg.episode_returns)), float(np.mean(seg.episode_lengths)))
            mean_return, mean_length = self.last_returns.get(name, (float('nan'), float('nan')))
            rows.append({
                'global_step': self.global_step,
                'iteration': self.iterations,
                'robot': name,
                'zero_shot': False,
                'mean_return': mean_return,
                'mean_episode_length': mean_length,
                'mean_step_reward': float(seg.raw_rewards.mean()),
                'tracking_share': float(seg.tracking.mean() / seg.r_max) if seg.r_max > 0 else float('nan'),
                'mean_abs_action': seg.mean_abs_action,
                'policy_loss': stats.policy_loss,
                'value_loss': stats.value_loss,
                'entropy': stats.entropy,
                'approx_kl': stats.approx_kl,
                'clip_fraction': stats.clip_fraction,
                'grad_norm': stats.grad_norm,
                'filtered_fraction': stats.filtered_fraction,
                'normalized_loss': stats.normalized_loss,
                'lr': stats.learning_rate,
                'tau_joints': _tau(self.params, 'actor.tau_joint'),
                'tau_feet': _tau(self.params, 'actor.tau_foot'),
            })
        return rows

    def _evaluation_rows(self, report: EvaluationReport) -> List[Dict[str, Any]]:
        rows = []
        for r in report.robots:
            row = {col: None for col in CURVE_COLUMNS}
            row.update({
                'global_step': self.global_step,
                'iteration': self.iterations,
                'robot': r.robot,
                'zero_shot': r.zero_shot,
                'mean_return': r.mean_return,
                'mean_episode_length': r.mean_episode_length,
                'tracking_share': r.tracking_share,
                'mean_abs_action': r.mean_abs_action,
                'lr': learning_rate_at(self.progress, self.config),
                'tau_joints': _tau(self.params, 'actor.tau_joint'),
                'tau_feet': _tau(self.params, 'actor.tau_foot'),
            })
            rows.append(row)
        return rows

    def _dump_failure(self, error: NonFiniteLossError) -> None:
        if not self.out_dir:
            return
        path = os.path.join(self.out_dir, 'nonfinite_dump.json')
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(error.diagnostics, f, indent=2, ensure_ascii=False, default=str)
        logger.error(f"Diagnostic dump written to {path}")

    def checkpoint(self, name: str) -> Optional[str]:
        if not self.out_dir:
            return None
        path = os.path.join(self.out_dir, 'checkpoints', name)
        return save_checkpoint(self.params, path, rng=self.rng, extras={
            'global_step': self.global_step,
            'robots': [r.name for r in self.robots],
            'holdout': [r.name for r in self.holdout],
            'train_config': self.config.to_dict(),
        })

    def iteration(self, pool: Optional[ThreadPoolExecutor] = None) -> UpdateStats:
        """One collect -> GAE -> update cycle"""
        buffer = collect_rollouts(self.params, self.robots, self.env_config, self.config,
                                  envs=self.envs, global_step=self.global_step, pool=pool)
        buffer.compute_advantages(self.config.gamma, self.config.gae_lambda)
        try:
            self.params, stats = ppo_update(self.params, buffer, self.config, self.progress,
                                            optimizer=self.optimizer, rng=self.rng)
        except NonFiniteLossError as e:
            self._dump_failure(e)
            raise
        self.global_step += buffer.num_transitions
        self.iterations += 1
        self._append_curve(self._training_rows(buffer, stats))
        return stats

    def train(self, budget_steps: int, final_evaluation: bool = True) -> TrainResult:
        """
        Train until budget_steps more fleet transitions are collected.

        Args:
            budget_steps: Transitions to collect (rounded up to whole iterations)
            final_evaluation: Evaluate training and held-out robots at the end

        Returns:
            TrainResult with the final params and output paths
        """
        per_iteration = self.config.steps_per_iteration(len(self.robots))
        iterations = math.ceil(max(budget_steps, 0) / per_iteration)
        logger.info("=" * 70)
        logger.info(f"Training on {len(self.robots)} robots for {iterations} iterations "
                    f"({per_iteration:,} transitions each, starting at step {self.global_step:,})")
        logger.info("=" * 70)

        pool = ThreadPoolExecutor(self.config.num_workers) if self.config.num_workers > 1 else None
        try:
            bar = tqdm(range(iterations), desc="Training", disable=not self.show_progress)
            for _ in bar:
                stats = self.iteration(pool)
                bar.set_postfix(loss=f"{stats.policy_loss:.3f}", lr=f"{stats.learning_rate:.2e}")
                if self.holdout and self.iterations % self.config.eval_interval == 0:
                    report = evaluate(self.params, self.holdout, self.env_config, self.config.eval_episodes,
                                      seed=self.config.seed, zero_shot=[r.name for r in self.holdout])
                    self._append_curve(self._evaluation_rows(report))
                if self.iterations % self.config.checkpoint_interval == 0:
                    self.checkpoint(f'step_{self.global_step:010d}.npz')
        finally:
            if pool is not None:
                pool.shutdown()

        evaluation = None
        if final_evaluation:
            evaluation = evaluate(self.params, self.robots + self.holdout, self.env_config,
                                  self.config.eval_episodes, seed=self.config.seed,
                                  zero_shot=[r.name for r in self.holdout])
            self._append_curve(self._evaluation_rows(evaluation))
        checkpoint_path = self.checkpoint('final.npz')
        logger.info(f"✓ Finished at step {self.global_step:,} (params {params_digest(self.params)[:12]})")
        return TrainResult(
            params=self.params,
            global_step=self.global_step,
            iterations=self.iterations,
            curve_path=self.curve_path,
            checkpoint_path=checkpoint_path,
            evaluation=evaluation,
        )


def fine_tune(params: PolicyParams,
              robot: RobotSpec,
              env_config: EnvConfig,
              train_config: TrainConfig,
              budget_steps: int,
              start_step: int = 0,
              out_dir: Optional[str] = None,
              head_surgery: bool = False,
              rng: Optional[np.random.Generator] = None,
              show_progress: bool = False) -> TrainResult:
    """
    Continue training on a single target robot. The learning rate starts at a
    third of the original and anneals to zero over budget_steps.

    Args:
        params: Trained params
        robot: Target robot
        env_config: Environment settings
        train_config: PPO settings of the original run
        budget_steps: Fine-tuning transitions
        start_step: Global step the original run ended at
        out_dir: Output directory
        head_surgery: Let a multi-head policy grow the target's head when it overflows
        rng: Generator for new head weights
        show_progress: Show progress bars

    Returns:
        TrainResult
    """
    config = replace(train_config, lr_scale=train_config.lr_scale * FINE_TUNE_LR_FACTOR)
    if budget_steps <= 0:
        logger.info("Fine-tuning budget is zero; keeping the input params")
        path = None
        if out_dir:
            path = save_checkpoint(params, os.path.join(out_dir, 'checkpoints', 'final.npz'),
                                   extras={'global_step': start_step, 'robots': [robot.name]})
        return TrainResult(params=params, global_step=start_step, iterations=0, curve_path=None,
                           checkpoint_path=path, evaluation=None)
    arch = params.config.architecture
    if arch == 'padding':
        from baselines import register_task
        params = register_task(params, robot)
    elif arch == 'multihead':
        try:
            check_robot_supported(params, robot)
        except PolicyError:
            if not head_surgery:
                raise
            from baselines import expand_head, morphology_group
            head = morphology_group(robot)
            slots = params.registry.get('heads', {}).get(head)
            if slots is None:
                raise
            params = expand_head(params, head, max(slots['joint_slots'], robot.num_joints),
                                 rng or np.random.default_rng(config.seed),
                                 foot_slots=max(slots['foot_slots'], robot.num_feet))
    # The schedule restarts at start_step and anneals to zero over the fine-tuning budget
    config = replace(config, total_steps=int(budget_steps))
    logger.info(f"Fine-tuning on '{robot.name}' at LR x{config.lr_scale:.3f} "
                f"(start LR {learning_rate_at(0.0, config):.2e}, annealed over {budget_steps:,} steps)")
    trainer = MultiRobotTrainer(params, [robot], env_config, config, out_dir=out_dir,
                                start_step=start_step, show_progress=show_progress,
                                schedule_start=start_step)
    return trainer.train(budget_steps)
