"""
Main Execution Script
Command-line entry point: multi-robot training, evaluation, fine-tuning,
the diagnostics suite, bound reports and surrogate robot generation
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from datetime import datetime
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import yaml

# Add src to path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from diagnostics import format_table, run_diagnostics
from morphology import (
    MORPHOLOGY_CLASSES,
    RandomizationConfig,
    RobotSpec,
    RobotSpecError,
    dump_robot_spec,
    generate_surrogate_robot,
    load_robot_fleet,
)
from policy import CheckpointError, PolicyConfig, PolicyError, check_robot_supported, init_policy_params, load_checkpoint
from reward import RewardConfigError, resolve_coefficients
from surrogate_env import OBSERVATION_GROUPS, EnvConfig
from theory import BoundConfig, BoundError, build_bound_report
from trainer import MultiRobotTrainer, TrainConfig, TrainConfigError, evaluate, fine_tune

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2
EXIT_DIAGNOSTIC = 3

SUBCOMMANDS = ('train', 'eval', 'finetune', 'diagnose', 'bounds', 'gen-robot')
ECHO_ONLY_KEYS = ('subcommand', 'argv', 'robot_names')


class RunConfigError(ValueError):
    """Raised for malformed config files or flag values"""


VALIDATION_ERRORS = (RunConfigError, RobotSpecError, RewardConfigError, PolicyError, CheckpointError,
                     TrainConfigError, BoundError)


@dataclass
class RunConfig:
    """Resolved settings of one CLI invocation"""
    subcommand: str
    out_dir: str = 'runs/default'
    seed: int = 0
    robots: List[str] = field(default_factory=list)
    generate: List[str] = field(default_factory=list)
    holdout: List[str] = field(default_factory=list)
    checkpoint: Optional[str] = None
    steps: Optional[int] = None
    episodes: int = 2
    head_surgery: bool = False
    shuffle_descriptions: bool = False
    scale_descriptions: Dict[str, float] = field(default_factory=dict)
    bounds: Dict[str, float] = field(default_factory=dict)
    robot_class: str = 'quadruped'
    joint_range: Tuple[int, int] = (8, 16)
    show_progress: bool = True
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> Dict[str, Any]:
        out = {f.name: getattr(self, f.name) for f in fields(self) if f.name not in ('policy', 'env', 'train')}
        out['joint_range'] = list(self.joint_range)
        out['policy'] = self.policy.to_dict()
        out['env'] = asdict(self.env)
        out['train'] = self.train.to_dict()
        return out


# ---------------------------------------------------------------------------
# Config resolution
# ---------------------------------------------------------------------------

def parse_key_values(tokens: Optional[Sequence[str]], what: str) -> Dict[str, float]:
    """['pd=3.0', 'n=1000'] -> {'pd': 3.0, 'n': 1000.0}"""
    out: Dict[str, float] = {}
    for token in tokens or []:
        key, sep, value = token.partition('=')
        if not sep or not key:
            raise RunConfigError(f"{what}: expected key=value, got '{token}'")
        try:
            out[key] = float(value)
        except ValueError:
            raise RunConfigError(f"{what}: '{value}' is not a number")
    return out


def parse_generated(token: str) -> Tuple[str, int, Tuple[int, int]]:
    """'quadruped:3' or 'humanoid:7:10-18' -> (class, seed, joint range)"""
    parts = token.split(':')
    if len(parts) not in (2, 3) or parts[0] not in MORPHOLOGY_CLASSES:
        raise RunConfigError(f"Generated robot '{token}' must look like class:seed[:low-high], "
                             f"class one of {MORPHOLOGY_CLASSES}")
    try:
        seed = int(parts[1])
        joint_range = (8, 16)
        if len(parts) == 3:
            low, high = parts[2].split('-')
            joint_range = (int(low), int(high))
    except ValueError:
        raise RunConfigError(f"Generated robot '{token}' has a malformed seed or joint range")
    return parts[0], seed, joint_range


def _apply(obj, overrides: Mapping[str, Any], section: str):
    known = {f.name for f in fields(obj)}
    unknown = sorted(set(overrides) - known)
    if unknown:
        raise RunConfigError(f"Unknown {section} settings: {unknown}")
    try:
        return replace(obj, **overrides)
    except (TypeError, ValueError) as e:
        raise RunConfigError(f"Invalid {section} settings: {e}") from e


def _env_overrides(section: Mapping[str, Any]) -> Dict[str, Any]:
    out = dict(section)
    if isinstance(out.get('randomization'), Mapping):
        try:
            out['randomization'] = RandomizationConfig(**out['randomization'])
        except TypeError as e:
            raise RunConfigError(f"Invalid env.randomization settings: {e}") from e
    if 'group_dropout' in out:
        out['group_dropout'] = tuple((str(g), float(p)) for g, p in out['group_dropout'])
    return out


def load_config_file(path: Optional[str]) -> Dict[str, Any]:
    if not path:
        return {}
    if not os.path.exists(path):
        raise RunConfigError(f"Config file not found: {path}")
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = yaml.safe_load(f) or {}
    except yaml.YAMLError as e:
        raise RunConfigError(f"Config file {path} is not valid YAML: {e}") from e
    if not isinstance(data, dict):
        raise RunConfigError(f"Config file {path} must hold a mapping")
    return data


def resolve_run_config(args: argparse.Namespace) -> RunConfig:
    """
    Merge defaults, the config file and command-line flags (flags win).

    Args:
        args: Parsed command-line arguments

    Returns:
        RunConfig
    """
    data = load_config_file(getattr(args, 'config', None))
    for key in ECHO_ONLY_KEYS:
        data.pop(key, None)
    sections = {name: dict(data.pop(name, None) or {}) for name in ('policy', 'env', 'train')}
    full_scale = bool(data.pop('full_scale', False) or getattr(args, 'full_scale', False))

    run = _apply(RunConfig(subcommand=args.subcommand), data, 'run')
    flag_map = {
        'out_dir': 'out_dir', 'seed': 'seed', 'robots': 'robots', 'generate': 'generate',
        'holdout': 'holdout', 'checkpoint': 'checkpoint', 'steps': 'steps', 'episodes': 'episodes',
        'robot_class': 'robot_class',
    }
    updates: Dict[str, Any] = {}
    for flag, attr in flag_map.items():
        value = getattr(args, flag, None)
        if value is not None:
            updates[attr] = value
    if getattr(args, 'head_surgery', False):
        updates['head_surgery'] = True
    if getattr(args, 'shuffle_descriptions', False):
        updates['shuffle_descriptions'] = True
    if getattr(args, 'scale_descriptions', None):
        updates['scale_descriptions'] = parse_key_values(args.scale_descriptions, '--scale-descriptions')
    if getattr(args, 'bounds', None) is not None:
        updates['bounds'] = parse_key_values(args.bounds, '--bounds')
    if getattr(args, 'joints', None):
        updates['joint_range'] = tuple(int(v) for v in args.joints)
    if getattr(args, 'no_progress', False):
        updates['show_progress'] = False
    run = replace(run, **updates)
    run.joint_range = tuple(run.joint_range)

    policy = PolicyConfig.full_scale() if full_scale else PolicyConfig()
    policy = _apply(policy, {k: tuple(v) if isinstance(v, list) else v for k, v in sections['policy'].items()},
                    'policy')
    env = _apply(EnvConfig(), _env_overrides(sections['env']), 'env')

    robot_count = max(len(run.robots) + len(run.generate), 1)
    train = TrainConfig.full_scale(robot_count) if full_scale else TrainConfig()
    train = _apply(train, sections['train'], 'train')

    policy_flags: Dict[str, Any] = {}
    env_flags: Dict[str, Any] = {}
    if getattr(args, 'architecture', None):
        policy_flags['architecture'] = args.architecture
    if getattr(args, 'no_layernorm', False):
        policy_flags['layer_norm'] = False
    if getattr(args, 'shared_description_encoder', None):
        policy_flags['shared_description_encoder'] = args.shared_description_encoder
    if getattr(args, 'no_mass_dims', False):
        policy_flags['include_mass_dims'] = False
        env_flags['include_mass_dims'] = False
    if getattr(args, 'single_reward_set', False):
        env_flags['single_reward_set'] = True
    if getattr(args, 'drop_group', None):
        unknown = [g for g in args.drop_group if g not in OBSERVATION_GROUPS]
        if unknown:
            raise RunConfigError(f"Unknown observation groups {unknown}, expected {OBSERVATION_GROUPS}")
        env_flags['group_dropout'] = tuple((g, 1.0) for g in args.drop_group)
    train_flags: Dict[str, Any] = {'seed': run.seed}
    if getattr(args, 'workers', None):
        train_flags['num_workers'] = args.workers

    run.policy = _apply(policy, policy_flags, 'policy')
    run.env = _apply(env, env_flags, 'env')
    run.train = _apply(train, train_flags, 'train')
    return run


def write_run_config(run: RunConfig, argv: Sequence[str], robots: Sequence[RobotSpec] = ()) -> str:
    """Echo the resolved config; `--config <out>/run_config.json` reproduces the run"""
    os.makedirs(run.out_dir, exist_ok=True)
    path = os.path.join(run.out_dir, 'run_config.json')
    echo = run.to_dict()
    echo['argv'] = list(argv)
    echo['robot_names'] = [r.name for r in robots]
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(echo, f, indent=2, ensure_ascii=False, default=str)
    return path


def setup_logging(out_dir: str, subcommand: str) -> None:
    log_dir = os.path.join(out_dir, 'logs')
    os.makedirs(log_dir, exist_ok=True)
    logging.basicConfig(
        level=logging.INFO,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            logging.FileHandler(os.path.join(log_dir, f'{subcommand}_{datetime.now().strftime("%Y%m%d")}.log')),
            logging.StreamHandler()
        ],
        force=True,
    )


# ---------------------------------------------------------------------------
# Robots
# ---------------------------------------------------------------------------

def load_robots(run: RunConfig) -> List[RobotSpec]:
    """Spec files first, then generated robots, in the order given"""
    robots = load_robot_fleet(run.robots, single_reward_set=run.env.single_reward_set) if run.robots else []
    for token in run.generate:
        cls, seed, joint_range = parse_generated(token)
        robots.append(generate_surrogate_robot(seed, cls, joint_range))
    names = [r.name for r in robots]
    duplicates = sorted({n for n in names if names.count(n) > 1})
    if duplicates:
        raise RunConfigError(f"Robots listed twice: {duplicates}")
    return robots


def split_holdout(robots: List[RobotSpec], holdout: Sequence[str],
                  single_reward_set: bool = False) -> Tuple[List[RobotSpec], List[RobotSpec]]:
    """Move held-out robots (by name, or spec file path) out of the training set"""
    by_name = {r.name: r for r in robots}
    held: List[RobotSpec] = []
    for token in holdout:
        if token in by_name:
            held.append(by_name.pop(token))
        elif os.path.exists(token):
            held.extend(load_robot_fleet([token], single_reward_set=single_reward_set))
        else:
            raise RunConfigError(f"Held-out robot '{token}' is neither a listed robot nor a spec file")
    held_names = {r.name for r in held}
    return [r for r in robots if r.name not in held_names], held


def _require_robots(robots: Sequence[RobotSpec], subcommand: str) -> None:
    if not robots:
        raise RunConfigError(f"'{subcommand}' needs at least one robot (--robots or --generate)")


def _save_evaluation(report, out_dir: str, stem: str) -> None:
    report.to_frame().to_csv(os.path.join(out_dir, f'{stem}.csv'), index=False, encoding='utf-8')
    with open(os.path.join(out_dir, f'{stem}.json'), 'w', encoding='utf-8') as f:
        json.dump(report.to_dict(), f, indent=2, ensure_ascii=False, default=str)
    logger.info(f"Fleet mean return {report.fleet_mean_return:.2f}, "
                f"tracking share {report.fleet_tracking_share:.3f}")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_train(run: RunConfig, robots: List[RobotSpec]) -> int:
    """Multi-robot (or single-robot) training with optional held-out robots"""
    _require_robots(robots, 'train')
    train_robots, holdout = split_holdout(robots, run.holdout, run.env.single_reward_set)
    _require_robots(train_robots, 'train')
    for robot in train_robots + holdout:
        resolve_coefficients(robot, run.env.single_reward_set)

    params = init_policy_params(run.policy, np.random.default_rng(run.seed), train_robots)
    drivable = []
    for robot in holdout:
        try:
            check_robot_supported(params, robot)
            drivable.append(robot)
        except PolicyError as e:
            logger.warning(f"Held-out robot skipped: {e}")

    logger.info("=" * 70)
    logger.info(f"TRAIN: {run.policy.architecture} on {[r.name for r in train_robots]}")
    if drivable:
        logger.info(f"Zero-shot tracking: {[r.name for r in drivable]}")
    logger.info("=" * 70)

    trainer = MultiRobotTrainer(params, train_robots, run.env, run.train, out_dir=run.out_dir,
                                holdout=drivable, show_progress=run.show_progress)
    result = trainer.train(run.steps if run.steps is not None else run.train.total_steps)
    if result.evaluation is not None:
        _save_evaluation(result.evaluation, run.out_dir, 'evaluation')
    logger.info(f"✓ Curves: {result.curve_path}")
    logger.info(f"✓ Checkpoint: {result.checkpoint_path}")
    return EXIT_OK


def _load_params(run: RunConfig):
    if not run.checkpoint:
        raise RunConfigError(f"'{run.subcommand}' needs --checkpoint")
    return load_checkpoint(run.checkpoint)


def cmd_eval(run: RunConfig, robots: List[RobotSpec]) -> int:
    """Deterministic evaluation; unregistered robots fail for the baselines"""
    _require_robots(robots, 'eval')
    checkpoint = _load_params(run)
    trained = set(checkpoint.extras.get('robots', []))
    for robot in robots:
        check_robot_supported(checkpoint.params, robot)
    dropped = [g for g, p in run.env.group_dropout if p >= 1.0]
    logger.info("=" * 70)
    logger.info(f"EVAL: {len(robots)} robots x {run.episodes} episodes"
                + (f", dropped groups {dropped}" if dropped else ""))
    logger.info("=" * 70)
    report = evaluate(checkpoint.params, robots, run.env, episodes=run.episodes, seed=run.seed,
                      zero_shot=[r.name for r in robots if r.name not in trained],
                      shuffle_descriptions=run.shuffle_descriptions,
                      description_scales=run.scale_descriptions,
                      show_progress=run.show_progress)
    _save_evaluation(report, run.out_dir, 'evaluation')
    return EXIT_OK


def cmd_finetune(run: RunConfig, robots: List[RobotSpec]) -> int:
    """Fine-tune a checkpoint on one target robot"""
    _require_robots(robots, 'finetune')
    if len(robots) != 1:
        raise RunConfigError(f"'finetune' takes exactly one target robot, got {[r.name for r in robots]}")
    checkpoint = _load_params(run)
    start_step = int(checkpoint.extras.get('global_step', 0))
    result = fine_tune(checkpoint.params, robots[0], run.env, run.train,
                       budget_steps=run.steps if run.steps is not None else run.train.steps_per_iteration(1),
                       start_step=start_step, out_dir=run.out_dir, head_surgery=run.head_surgery,
                       rng=np.random.default_rng(run.seed), show_progress=run.show_progress)
    if result.evaluation is not None:
        _save_evaluation(result.evaluation, run.out_dir, 'evaluation')
    logger.info(f"✓ Fine-tuned to step {result.global_step:,}: {result.checkpoint_path}")
    return EXIT_OK


def _bound_config(run: RunConfig, robots: Sequence[RobotSpec]) -> BoundConfig:
    values = dict(run.bounds)
    key_map = {'n': 'n', 'M': 'm', 'm': 'm', 'delta': 'delta', 'gamma': 'gamma', 'clip': 'clip', 'eps': 'clip',
               'E': 'ratio_cap', 'ratio_cap': 'ratio_cap', 'r_max': 'r_max', 'R_max': 'r_max'}
    kwargs: Dict[str, Any] = {}
    for key, value in values.items():
        if key not in key_map:
            raise RunConfigError(f"Unknown bound setting '{key}', expected one of {sorted(key_map)}")
        kwargs[key_map[key]] = int(value) if key_map[key] in ('n', 'm') else value
    kwargs.setdefault('gamma', run.train.gamma)
    kwargs.setdefault('clip', run.train.clip)
    if 'r_max' not in kwargs and robots:
        kwargs['r_max'] = max(resolve_coefficients(r, run.env.single_reward_set).tracking_max for r in robots)
    return BoundConfig(**kwargs)


def cmd_diagnose(run: RunConfig, robots: List[RobotSpec]) -> int:
    """Invariant suite on a checkpoint (or fresh params); exit 3 on any failure"""
    if run.checkpoint:
        params = load_checkpoint(run.checkpoint).params
    else:
        params = init_policy_params(run.policy, np.random.default_rng(run.seed), robots)
    bound_config = _bound_config(run, robots)
    results = run_diagnostics(params, robots, bound_config, seed=run.seed)
    print(format_table(results))
    if run.bounds:
        report = build_bound_report(bound_config, np.random.default_rng(run.seed))
        print(report.format())
    return EXIT_OK if all(r.passed for r in results) else EXIT_DIAGNOSTIC


def cmd_bounds(run: RunConfig, robots: List[RobotSpec]) -> int:
    """Bound report as text and JSON"""
    bound_config = _bound_config(run, robots)
    report = build_bound_report(bound_config, np.random.default_rng(run.seed),
                                policy_config=run.policy if run.policy.architecture == 'urma' else None)
    print(report.format())
    path = os.path.join(run.out_dir, 'bound_report.json')
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(report.to_dict(), f, indent=2, ensure_ascii=False, default=str)
    logger.info(f"✓ Bound report saved to {path}")
    return EXIT_OK


def cmd_gen_robot(run: RunConfig, robots: List[RobotSpec]) -> int:
    """Write generated surrogate robots as spec files"""
    tokens = run.generate or [f'{run.robot_class}:{run.seed}:{run.joint_range[0]}-{run.joint_range[1]}']
    robot_dir = os.path.join(run.out_dir, 'robots')
    for token in tokens:
        cls, seed, joint_range = parse_generated(token)
        robot = generate_surrogate_robot(seed, cls, joint_range)
        dump_robot_spec(robot, os.path.join(robot_dir, f'{robot.name}.yaml'))
    logger.info(f"✓ {len(tokens)} robot spec(s) written to {robot_dir}")
    return EXIT_OK


COMMANDS = {
    'train': cmd_train,
    'eval': cmd_eval,
    'finetune': cmd_finetune,
    'diagnose': cmd_diagnose,
    'bounds': cmd_bounds,
    'gen-robot': cmd_gen_robot,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='YAML run configuration (flags override it)')
    common.add_argument('--out-dir', dest='out_dir', help='Output directory for logs, curves and checkpoints')
    common.add_argument('--seed', type=int)
    common.add_argument('--robots', nargs='+', help='Robot spec files or directories')
    common.add_argument('--generate', nargs='+', help='Generated robots as class:seed[:low-high]')
    common.add_argument('--architecture', choices=['urma', 'multihead', 'padding'])
    common.add_argument('--full-scale', dest='full_scale', action='store_true',
                        help='Full-size networks and rollout sizes')
    common.add_argument('--no-layernorm', dest='no_layernorm', action='store_true')
    common.add_argument('--shared-description-encoder', dest='shared_description_encoder',
                        choices=['full', 'partial'])
    common.add_argument('--single-reward-set', dest='single_reward_set', action='store_true')
    common.add_argument('--no-mass-dims', dest='no_mass_dims', action='store_true')
    common.add_argument('--drop-group', dest='drop_group', nargs='+', help='Observation groups zeroed every step')
    common.add_argument('--workers', type=int, help='Threads stepping environments')
    common.add_argument('--no-progress', dest='no_progress', action='store_true')

    parser = argparse.ArgumentParser(description='Morphology-agnostic locomotion policy training')
    sub = parser.add_subparsers(dest='subcommand', required=True)

    train = sub.add_parser('train', parents=[common], help='Train one policy on a robot fleet')
    train.add_argument('--steps', type=int, help='Transition budget (defaults to train.total_steps)')
    train.add_argument('--holdout', nargs='+', help='Robots kept out of training for zero-shot tracking')

    ev = sub.add_parser('eval', parents=[common], help='Evaluate a checkpoint')
    ev.add_argument('--checkpoint')
    ev.add_argument('--episodes', type=int)
    ev.add_argument('--shuffle-descriptions', dest='shuffle_descriptions', action='store_true')
    ev.add_argument('--scale-descriptions', dest='scale_descriptions', nargs='+', help='group=factor pairs')

    ft = sub.add_parser('finetune', parents=[common], help='Fine-tune a checkpoint on one robot')
    ft.add_argument('--checkpoint')
    ft.add_argument('--steps', type=int)
    ft.add_argument('--head-surgery', dest='head_surgery', action='store_true',
                    help='Grow a multi-head policy head to fit the target')

    diag = sub.add_parser('diagnose', parents=[common], help='Run the invariant suite')
    diag.add_argument('--checkpoint')
    diag.add_argument('--bounds', nargs='*', help='Bound settings, e.g. n=1000 M=16 delta=0.05')

    bounds = sub.add_parser('bounds', parents=[common], help='Print the bound report')
    bounds.add_argument('--bounds', nargs='*', help='Bound settings, e.g. n=1000 M=16 delta=0.05')

    gen = sub.add_parser('gen-robot', parents=[common], help='Write generated robot spec files')
    gen.add_argument('--class', dest='robot_class', choices=list(MORPHOLOGY_CLASSES))
    gen.add_argument('--joints', nargs=2, type=int, metavar=('LOW', 'HIGH'))
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Parse arguments, run one subcommand and map failures to exit codes"""
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    try:
        run = resolve_run_config(args)
    except VALIDATION_ERRORS as e:
        print(f"✗ Invalid configuration: {e}", file=sys.stderr)
        return EXIT_VALIDATION

    setup_logging(run.out_dir, run.subcommand)
    logger.info("=" * 70)
    logger.info(f"{run.subcommand.upper()} (seed {run.seed}, out {run.out_dir})")
    logger.info("=" * 70)

    try:
        robots = load_robots(run)
        write_run_config(run, argv, robots)
        status = COMMANDS[run.subcommand](run, robots)
    except VALIDATION_ERRORS as e:
        logger.error(f"✗ Validation failed: {e}")
        return EXIT_VALIDATION
    except Exception as e:
        logger.error(f"\n✗ {run.subcommand} failed with error: {str(e)}", exc_info=True)
        return EXIT_RUNTIME

    logger.info(f"{'✓' if status == EXIT_OK else '✗'} {run.subcommand} finished with exit code {status}")
    return status


if __name__ == '__main__':
    sys.exit(main())
