"""
Diagnostics Module
Invariant suite behind the `diagnose` subcommand: finiteness, gradient
checks, permutation laws, morphology agnosticism, output clipping and the
bound identities. Produces a pass/fail table.
"""

import logging
import math
import time
from dataclasses import dataclass, replace
from typing import Callable, List, Optional, Sequence

import numpy as np

import tensorgrad as tg
from morphology import MORPHOLOGY_CLASSES, RobotSpec, generate_surrogate_robot
from policy import PolicyError, PolicyParams, check_robot_supported, encode_set, policy_forward, policy_value
from surrogate_env import EnvConfig, ObservationBatch, reset, stack_bundles
from theory import (
    BoundConfig,
    advantage_bounds,
    gaussian_complexity_mc,
    hoeffding_term,
    normalize_loss,
    ppo_sample_loss,
    ratio_filter,
)

logger = logging.getLogger(__name__)

GRAD_TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""
    seconds: float = 0.0


def _run(name: str, check: Callable[[], str]) -> CheckResult:
    """Run one check; AssertionError and numeric failures mark it failed"""
    start = time.time()
    try:
        detail = check()
        passed = True
    except AssertionError as e:
        detail, passed = str(e), False
    except (ValueError, FloatingPointError, ArithmeticError) as e:
        detail, passed = f"{type(e).__name__}: {e}", False
    return CheckResult(name=name, passed=passed, detail=detail, seconds=time.time() - start)


def format_table(results: Sequence[CheckResult]) -> str:
    width = max([len(r.name) for r in results] + [10])
    lines = ["=" * 70, "DIAGNOSTICS", "=" * 70]
    for r in results:
        mark = "✓" if r.passed else "✗"
        lines.append(f"  {mark} {r.name:<{width}}  {r.seconds:6.2f}s  {r.detail}")
    passed = sum(r.passed for r in results)
    lines.append("=" * 70)
    lines.append(f"  {passed}/{len(results)} checks passed")
    lines.append("=" * 70)
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Individual checks
# ---------------------------------------------------------------------------

def check_params_finite(params: PolicyParams) -> str:
    bad = [n for n, t in params.tensors.items() if not np.all(np.isfinite(t.values))]
    assert not bad, f"non-finite values in {bad[:5]}"
    return f"{len(params.tensors)} tensors finite"


def _op_cases(rng: np.random.Generator):
    """(name, function, input arrays) per differentiable op"""
    x = rng.standard_normal((3, 4))
    y = rng.standard_normal((3, 4))
    w = rng.standard_normal((4, 5))
    b = rng.standard_normal(5)
    s = rng.standard_normal((2, 5, 4))
    pos = rng.uniform(0.5, 2.0, size=(3, 4))
    return [
        ('matmul', lambda a, c: tg.sum(tg.tanh(tg.matmul(a, c))), [x, w]),
        ('linear', lambda a, c, d: tg.sum(tg.tanh(tg.linear(a, c, d))), [x, w, b]),
        ('add/sub/mul', lambda a, c: tg.sum(tg.mul(tg.add(a, c), tg.sub(a, c))), [x, y]),
        ('tanh/exp', lambda a: tg.sum(tg.exp(tg.tanh(a))), [x]),
        ('log/softplus', lambda a: tg.sum(tg.log(tg.softplus(a))), [x]),
        ('square/scale', lambda a: tg.sum(tg.scale(tg.square(a), 0.7)), [x]),
        ('minimum', lambda a, c: tg.sum(tg.minimum(a, c)), [x, x + 0.5 + np.abs(y)]),
        ('concat/expand', lambda a, c: tg.sum(tg.tanh(tg.concat([tg.expand(a, 1, 2), tg.expand(c, 1, 2)], -1))),
         [x, y]),
        ('take/reshape', lambda a: tg.sum(tg.square(tg.reshape(tg.take(a, [2, 0], 0), (2, 2, 2)))), [x]),
        ('mean', lambda a: tg.sum(tg.square(tg.mean(a, axis=0))), [x]),
        ('layer_norm', lambda a, g, c: tg.sum(tg.tanh(tg.layer_norm(a, g, c))),
         [x, rng.standard_normal(4), rng.standard_normal(4)]),
        ('softmax_with_temperature', lambda a, t: tg.sum(tg.mul(tg.softmax_with_temperature(a, t, 0.015), tg.constant(y))),
         [x, np.array(0.8)]),
        ('reduce_sum_over_set', lambda a: tg.sum(tg.square(tg.reduce_sum_over_set(a, axis=1))), [s]),
        ('gaussian_logprob', lambda m, sd: tg.sum(tg.gaussian_logprob(m, sd, tg.constant(y))), [x, pos]),
    ]


def check_op_gradients(rng: np.random.Generator, trials: int = 3) -> str:
    worst, count = 0.0, 0
    for trial in range(trials):
        for name, fn, arrays in _op_cases(rng):
            inputs = [tg.parameter(a) for a in arrays]
            err = tg.grad_check(fn, inputs, h=1e-5, rng=rng)
            assert err < GRAD_TOLERANCE, f"{name}: relative error {err:.2e} (trial {trial})"
            worst, count = max(worst, err), count + 1
    return f"{count} op checks, worst {worst:.1e}"


def _bundle_batch(robot: RobotSpec, seed: int, size: int = 2) -> ObservationBatch:
    config = EnvConfig()
    bundles = [reset(robot, config, np.random.default_rng([seed, k]))[1] for k in range(size)]
    return stack_bundles(bundles)


def _params_fn(params: PolicyParams, names: List[str], fn: Callable[[PolicyParams], tg.Tensor]):
    def f(*tensors):
        swapped = dict(params.tensors)
        swapped.update(zip(names, tensors))
        return fn(replace(params, tensors=swapped))
    return f


def check_network_gradients(params: PolicyParams, robot: RobotSpec, role: str,
                            rng: np.random.Generator, coords_per_tensor: int = 2) -> str:
    batch = _bundle_batch(robot, int(rng.integers(1 << 30)))
    names = [n for n in params.names() if n.startswith(f'{role}.')]
    if role == 'actor':
        sample = policy_forward(batch, robot, params).mean.values + 0.3 * rng.standard_normal(
            (batch.batch_size, robot.num_joints))

        def objective(p: PolicyParams) -> tg.Tensor:
            dist = policy_forward(batch, robot, p)
            return tg.sum(tg.gaussian_logprob(dist.mean, dist.std, tg.constant(sample)))
    else:
        def objective(p: PolicyParams) -> tg.Tensor:
            return tg.sum(policy_value(batch, robot, p))

    inputs = [params[n] for n in names]
    err = tg.grad_check(_params_fn(params, names, objective), inputs, h=1e-5,
                        max_coords_per_input=coords_per_tensor, rng=rng)
    assert err < GRAD_TOLERANCE, f"{role} relative error {err:.2e} on '{robot.name}'"
    return f"{len(names)} tensors, worst {err:.1e}"


def _random_robots(rng: np.random.Generator, count: int) -> List[RobotSpec]:
    classes = list(MORPHOLOGY_CLASSES)
    robots = []
    for k in range(count):
        cls = classes[k % len(classes)]
        robots.append(generate_surrogate_robot(int(rng.integers(1 << 30)), cls, (4, 24)))
    return robots


def check_permutation_laws(params: PolicyParams, rng: np.random.Generator,
                           robots: int = 5, permutations: int = 4) -> str:
    """Pooled encodings bit-identical and decoder outputs equivariant under joint permutations"""
    for robot in _random_robots(rng, robots):
        batch = _bundle_batch(robot, int(rng.integers(1 << 30)))
        pooled, _ = encode_set(batch.joint_obs, batch.joint_descriptions, params, kind='joint')
        mean = policy_forward(batch, robot, params).mean.values
        for _ in range(permutations):
            p = rng.permutation(robot.num_joints)
            permuted = replace(batch, joint_obs=batch.joint_obs[:, p],
                               joint_descriptions=batch.joint_descriptions[:, p])
            pooled_p, _ = encode_set(permuted.joint_obs, permuted.joint_descriptions, params, kind='joint')
            assert np.array_equal(pooled.values, pooled_p.values), \
                f"pooled encoding changed under a joint permutation of '{robot.name}'"
            mean_p = policy_forward(permuted, robot, params).mean.values
            assert np.allclose(mean_p, mean[:, p], rtol=0.0, atol=1e-12), \
                f"decoder not equivariant on '{robot.name}'"
    return f"{robots} robots x {permutations} permutations"


def check_fleet_agnostic(params: PolicyParams, fleet: Sequence[RobotSpec], rng: np.random.Generator,
                         generated: int = 10) -> str:
    robots = list(fleet) + _random_robots(rng, generated)
    for robot in robots:
        batch = _bundle_batch(robot, int(rng.integers(1 << 30)), size=1)
        dist = policy_forward(batch, robot, params)
        value = policy_value(batch, robot, params)
        assert dist.mean.shape == (1, robot.num_joints), f"action arity wrong on '{robot.name}'"
        assert np.all(np.isfinite(dist.mean.values)) and np.all(np.isfinite(value.values)), \
            f"non-finite outputs on '{robot.name}'"
    return f"{len(robots)} robots evaluated"


def _supported(params: PolicyParams, robot: RobotSpec) -> bool:
    try:
        check_robot_supported(params, robot)
    except PolicyError:
        return False
    return True


def check_output_ranges(params: PolicyParams, fleet: Sequence[RobotSpec], rng: np.random.Generator) -> str:
    config = params.config
    robots = [r for r in fleet if _supported(params, r)]
    if not robots and config.architecture == 'urma':
        robots = _random_robots(rng, 3)
    if not robots:
        return "skipped: no registered robot given"
    for robot in robots:
        batch = _bundle_batch(robot, int(rng.integers(1 << 30)), size=4)
        # exaggerated inputs push the heads toward their clip limits
        loud = replace(batch, joint_obs=batch.joint_obs * 50.0, general_obs=batch.general_obs * 50.0)
        for b in (batch, loud):
            dist = policy_forward(b, robot, params)
            assert np.all(np.abs(dist.mean.values) <= config.mean_clip), f"mean outside ±{config.mean_clip}"
            assert np.all((dist.std.values >= config.std_min) & (dist.std.values <= config.std_max)), \
                f"std outside [{config.std_min}, {config.std_max}]"
    return f"mean in ±{config.mean_clip:g}, std in [{config.std_min:g}, {config.std_max:g}]"


def check_bounds(bound_config: BoundConfig, rng: np.random.Generator, samples: int = 100_000) -> str:
    a_min, a_max = advantage_bounds(bound_config.r_max, bound_config.gamma)
    assert a_min == -a_max, "advantage bounds are not antisymmetric"
    adv = rng.uniform(a_min, a_max, size=samples)
    ratios = rng.uniform(0.0, 1.0 + 3.0 * bound_config.ratio_cap, size=samples)
    keep = ratio_filter(adv, ratios, bound_config.ratio_cap)
    normalized = normalize_loss(ppo_sample_loss(adv[keep], ratios[keep], bound_config.clip), bound_config)
    assert normalized.min() >= 0.0 and normalized.max() <= 1.0, "normalized loss outside [0, 1]"

    closed = math.sqrt(8.0 * math.log(3.0 / bound_config.delta) / (bound_config.n * bound_config.m))
    term = hoeffding_term(bound_config.n, bound_config.m, bound_config.delta)
    assert abs(term - closed) <= 1e-12, f"Hoeffding term {term} != {closed}"

    z = rng.standard_normal(32)
    est = gaussian_complexity_mc(np.stack([z, -z]), trials=4000, rng=rng)
    expected = math.sqrt(2.0 / math.pi) * float(np.linalg.norm(z))
    assert abs(est.mean - expected) <= 3.0 * est.stderr, \
        f"±z complexity {est.mean:.4f} vs {expected:.4f} (stderr {est.stderr:.4f})"
    return f"{int(keep.sum())} filtered samples in [0, 1], Hoeffding {term:.4g}"


# ---------------------------------------------------------------------------
# Suite
# ---------------------------------------------------------------------------

def _grad_robot(seed: int) -> RobotSpec:
    return generate_surrogate_robot(seed, 'biped', (6, 6))


def run_diagnostics(params: PolicyParams,
                    fleet: Sequence[RobotSpec] = (),
                    bound_config: Optional[BoundConfig] = None,
                    seed: int = 0,
                    grad_trials: int = 3) -> List[CheckResult]:
    """
    Run the invariant suite.

    URMA-only checks (permutation laws, fleet agnosticism) are skipped
    for the baselines, whose arity is fixed per head or task.

    Args:
        params: Policy params to check (fresh or loaded from a checkpoint)
        fleet: Robot specs to include in the agnosticism and range checks
        bound_config: Settings for the bound identities
        seed: Seed of every random draw in the suite
        grad_trials: Repetitions of the op gradient checks

    Returns:
        List of CheckResult in execution order
    """
    rng = np.random.default_rng(seed)
    bound_config = bound_config or BoundConfig()
    results = [_run('params_finite', lambda: check_params_finite(params))]
    if not results[0].passed:
        # every later check would only repeat the NaN
        logger.error(f"✗ params_finite: {results[0].detail}")
        return results

    results.append(_run('op_gradients', lambda: check_op_gradients(rng, grad_trials)))
    if params.config.architecture == 'urma':
        robot = _grad_robot(seed)
        results.append(_run('actor_gradients', lambda: check_network_gradients(params, robot, 'actor', rng)))
        results.append(_run('critic_gradients', lambda: check_network_gradients(params, robot, 'critic', rng)))
        results.append(_run('permutation_laws', lambda: check_permutation_laws(params, rng)))
        results.append(_run('fleet_agnostic', lambda: check_fleet_agnostic(params, fleet, rng)))
    results.append(_run('output_ranges', lambda: check_output_ranges(params, fleet, rng)))
    results.append(_run('bound_identities', lambda: check_bounds(bound_config, rng)))

    for r in results:
        (logger.info if r.passed else logger.error)(f"{'✓' if r.passed else '✗'} {r.name}: {r.detail}")
    return results
