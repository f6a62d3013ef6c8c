"""
Theory Module
Computable pieces of the multi-task PPO risk bound: advantage bounds,
the ratio filter, the normalized clipped-surrogate loss, the Hoeffding
deviation term and Monte-Carlo Gaussian complexity estimates.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

MIN_TRIALS = 100


class BoundError(ValueError):
    """Raised when a bound precondition does not hold"""


@dataclass(frozen=True)
class BoundConfig:
    """
    Inputs of the bound report.

    r_max is the largest per-step reward (c_1 + c_2 at perfect tracking);
    ratio_cap is the upper ratio E kept for negative-advantage samples.
    """
    r_max: float = 3.0
    gamma: float = 0.99
    clip: float = 0.1
    ratio_cap: float = 1.0
    delta: float = 0.05
    n: int = 1000
    m: int = 16

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise BoundError(f"gamma must lie in (0, 1), got {self.gamma}")
        if not 0.0 < self.clip < 1.0:
            raise BoundError(f"clip range must lie in (0, 1), got {self.clip}")
        if self.ratio_cap <= self.clip:
            raise BoundError(f"ratio cap E={self.ratio_cap} must exceed the clip range {self.clip}")
        if not 0.0 < self.delta < 1.0:
            raise BoundError(f"delta must lie in (0, 1), got {self.delta}")
        if self.n < 1 or self.m < 1:
            raise BoundError(f"n and M must be >= 1, got n={self.n}, M={self.m}")
        if self.r_max < 0:
            raise BoundError(f"r_max must be nonnegative, got {self.r_max}")

    @classmethod
    def from_coefficients(cls, coefficients, **overrides) -> 'BoundConfig':
        """Bound config whose r_max is the tracking maximum of a reward coefficient set"""
        return cls(**{'r_max': coefficients.tracking_max, **overrides})


def advantage_bounds(r_max: float, gamma: float) -> Tuple[float, float]:
    """
    Range of advantages when per-step rewards lie in [0, r_max].

    Returns:
        (A_min, A_max) = (-r_max / (1 - gamma), r_max / (1 - gamma))
    """
    if not 0.0 <= gamma < 1.0:
        raise BoundError(f"gamma must lie in [0, 1), got {gamma}")
    if r_max < 0:
        raise BoundError(f"r_max must be nonnegative, got {r_max}")
    a_max = r_max / (1.0 - gamma)
    return -a_max, a_max


def ratio_filter(advantages: np.ndarray, ratios: np.ndarray, ratio_cap: float) -> np.ndarray:
    """
    Keep-mask of the ratio filter: drops exactly the samples with a
    negative advantage and a ratio above 1 + ratio_cap.
    """
    advantages = np.asarray(advantages, dtype=np.float64)
    ratios = np.asarray(ratios, dtype=np.float64)
    if advantages.shape != ratios.shape:
        raise BoundError(f"advantages {advantages.shape} and ratios {ratios.shape} differ in shape")
    return ~((advantages < 0.0) & (ratios > 1.0 + ratio_cap))


def ppo_sample_loss(advantages: np.ndarray, ratios: np.ndarray, clip: float) -> np.ndarray:
    """Per-sample clipped surrogate -min(r A, clip(r, 1 - eps, 1 + eps) A)"""
    advantages = np.asarray(advantages, dtype=np.float64)
    ratios = np.asarray(ratios, dtype=np.float64)
    return -np.minimum(ratios * advantages, np.clip(ratios, 1.0 - clip, 1.0 + clip) * advantages)


def loss_range(config: BoundConfig) -> Tuple[float, float]:
    """(l_min, l_max) = (-A_max (1 + eps), -A_min (1 + E))"""
    a_min, a_max = advantage_bounds(config.r_max, config.gamma)
    return -a_max * (1.0 + config.clip), -a_min * (1.0 + config.ratio_cap)


def normalize_loss(loss, config: BoundConfig) -> np.ndarray:
    """
    Map filtered per-sample losses into [0, 1].

    Args:
        loss: Scalar or array of clipped-surrogate losses of filtered samples
        config: Bound settings

    Returns:
        (loss - l_min) / (l_max - l_min)
    """
    l_min, l_max = loss_range(config)
    if l_max <= l_min:
        raise BoundError(f"Degenerate loss range [{l_min}, {l_max}] (r_max = {config.r_max})")
    loss = np.asarray(loss, dtype=np.float64)
    tol = 1e-12 * (l_max - l_min)
    if np.any(loss < l_min - tol) or np.any(loss > l_max + tol) or not np.all(np.isfinite(loss)):
        raise BoundError(
            f"Loss outside [{l_min:.6g}, {l_max:.6g}]: min {loss.min():.6g}, max {loss.max():.6g}; "
            f"were samples passed through the ratio filter?"
        )
    return np.clip((loss - l_min) / (l_max - l_min), 0.0, 1.0)


def hoeffding_term(n: float, m: float, delta: float) -> float:
    """Deviation term sqrt(8 ln(3 / delta) / (n M))"""
    if n < 1 or m < 1:
        raise BoundError(f"n and M must be >= 1, got n={n}, M={m}")
    if not 0.0 < delta < 1.0:
        raise BoundError(f"delta must lie in (0, 1), got {delta}")
    return math.sqrt(8.0 * math.log(3.0 / delta) / (n * m))


@dataclass(frozen=True)
class ComplexityEstimate:
    """Monte-Carlo Gaussian complexity (a lower-bound estimator: sup over finite candidates)"""
    mean: float
    stderr: float
    trials: int
    num_candidates: int
    num_points: int

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


def gaussian_complexity_mc(candidates: np.ndarray,
                           trials: int = 1000,
                           rng: Optional[np.random.Generator] = None) -> ComplexityEstimate:
    """
    Estimate E[sup_z sum_i gamma_i z(x_i)] over a finite candidate set.

    Args:
        candidates: (K, ...) outputs of K candidate functions on the sample
            inputs; trailing axes (samples, tasks, output dims) are flattened
        trials: Number of Gaussian draws (>= 100)
        rng: Generator for the Gaussian weights

    Returns:
        ComplexityEstimate with mean and standard error over trials
    """
    outputs = np.asarray(candidates, dtype=np.float64)
    if outputs.ndim == 0 or outputs.shape[0] == 0:
        raise BoundError("Empty function class")
    if trials < MIN_TRIALS:
        raise BoundError(f"Need at least {MIN_TRIALS} trials, got {trials}")
    outputs = outputs.reshape(outputs.shape[0], -1)
    rng = rng or np.random.default_rng(0)
    weights = rng.standard_normal((trials, outputs.shape[1]))
    sups = (weights @ outputs.T).max(axis=1)
    stderr = float(sups.std(ddof=1) / math.sqrt(trials))
    return ComplexityEstimate(
        mean=float(sups.mean()),
        stderr=stderr,
        trials=trials,
        num_candidates=outputs.shape[0],
        num_points=outputs.shape[1],
    )


def bounded_class_outputs(num_functions: int, num_points: int, rng: np.random.Generator,
                          input_dim: int = 4) -> np.ndarray:
    """Outputs in [-1, 1] of random tanh ridge functions on uniform inputs, shape (K, N)"""
    x = rng.uniform(-1.0, 1.0, size=(num_points, input_dim))
    w = rng.standard_normal((num_functions, input_dim))
    return np.tanh(w @ x.T)


def scaling_exponent(sizes: Sequence[float], values: Sequence[float]) -> float:
    """Slope of log(values) against log(sizes) by least squares"""
    sizes = np.asarray(sizes, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if sizes.shape != values.shape or sizes.size < 2:
        raise BoundError("Need at least two (size, value) pairs of equal length")
    if np.any(sizes <= 0) or np.any(values <= 0):
        raise BoundError("Sizes and values must be positive for a log-log fit")
    slope, _ = np.polyfit(np.log(sizes), np.log(values), 1)
    return float(slope)


def complexity_scaling(sample_counts: Sequence[int],
                       class_outputs: Callable[[int, np.random.Generator], np.ndarray],
                       trials: int,
                       rng: np.random.Generator) -> Tuple[Dict[int, ComplexityEstimate], float]:
    """
    Per-sample complexity G / (n M) for growing sample counts and its fitted exponent.

    Args:
        sample_counts: Values of n M to evaluate
        class_outputs: (n M, rng) -> candidate outputs (K, n M)
        trials: Monte-Carlo trials per count
        rng: Generator

    Returns:
        (estimates keyed by count, exponent of G / (n M) versus n M)
    """
    estimates = {}
    for count in sample_counts:
        estimates[int(count)] = gaussian_complexity_mc(class_outputs(int(count), rng), trials, rng)
    per_sample = [estimates[int(c)].mean / c for c in sample_counts]
    return estimates, scaling_exponent(sample_counts, per_sample)


def urma_encoder_outputs(policy_config, num_candidates: int, num_sets: int,
                         rng: np.random.Generator) -> np.ndarray:
    """
    Pooled joint-encoder latents of randomly initialized URMA encoders on
    sampled joint sets, shape (K, num_sets, latent_dim).
    """
    from morphology import generate_surrogate_robot, joint_descriptions
    from policy import encode_set, init_policy_params

    robot = generate_surrogate_robot(int(rng.integers(0, 2**31 - 1)), "quadruped", (8, 8))
    desc = np.broadcast_to(joint_descriptions(robot), (num_sets,) + joint_descriptions(robot).shape).copy()
    obs = rng.uniform(-1.0, 1.0, size=(num_sets, robot.num_joints, 3))
    outputs = []
    for _ in range(num_candidates):
        params = init_policy_params(policy_config, rng)
        pooled, _ = encode_set(obs, desc, params, kind='joint')
        outputs.append(pooled.values)
    return np.stack(outputs)


@dataclass
class BoundReport:
    """Computable terms of the bound"""
    config: BoundConfig
    a_min: float
    a_max: float
    l_min: float
    l_max: float
    normalized_loss_min: float
    normalized_loss_mean: float
    normalized_loss_max: float
    filtered_fraction: float
    hoeffding: float
    complexities: Dict[str, ComplexityEstimate] = field(default_factory=dict)
    scaling_exponent: Optional[float] = None

    def __post_init__(self):
        if self.a_min != -self.a_max:
            raise BoundError("Advantage bounds must be antisymmetric")
        if not self.l_min < self.l_max:
            raise BoundError(f"l_min={self.l_min} must be below l_max={self.l_max}")

    def to_dict(self) -> Dict:
        out = {k: v for k, v in asdict(self).items() if k not in ('config', 'complexities')}
        out['config'] = asdict(self.config)
        out['complexities'] = {k: v.to_dict() for k, v in self.complexities.items()}
        return out

    def format(self) -> str:
        lines = [
            "=" * 70,
            "BOUND REPORT",
            "=" * 70,
            f"  R_max={self.config.r_max:g}  gamma={self.config.gamma:g}  eps={self.config.clip:g}  "
            f"E={self.config.ratio_cap:g}  delta={self.config.delta:g}  n={self.config.n}  M={self.config.m}",
            f"  Advantage range:   [{self.a_min:.6g}, {self.a_max:.6g}]",
            f"  Loss range:        [{self.l_min:.6g}, {self.l_max:.6g}]",
            f"  Normalized loss:   min {self.normalized_loss_min:.4f}  mean {self.normalized_loss_mean:.4f}  "
            f"max {self.normalized_loss_max:.4f}  (filtered {self.filtered_fraction:.2%})",
            f"  Hoeffding term:    {self.hoeffding:.6g}",
        ]
        for name, est in self.complexities.items():
            lines.append(f"  G[{name}]: {est.mean:.6g} ± {est.stderr:.2g}  "
                         f"({est.num_candidates} candidates, {est.num_points} points, {est.trials} trials)")
        if self.scaling_exponent is not None:
            lines.append(f"  G/(nM) scaling exponent: {self.scaling_exponent:.3f} (bounded class, expect ≈ -0.5)")
        lines.append("=" * 70)
        return "\n".join(lines)


def build_bound_report(config: BoundConfig,
                       rng: Optional[np.random.Generator] = None,
                       samples: int = 10000,
                       trials: int = 500,
                       policy_config=None,
                       scaling_counts: Sequence[int] = (64, 128, 256, 512, 1024)) -> BoundReport:
    """
    Assemble the computable bound terms.

    Normalized losses are evaluated on random (A, r) pairs drawn from the
    admissible region and passed through the ratio filter.

    Args:
        config: Bound settings
        rng: Generator for sampling and Monte-Carlo draws
        samples: Random (A, r) pairs for the normalized-loss summary
        trials: Monte-Carlo trials per complexity estimate
        policy_config: When given, also estimate the URMA joint-encoder complexity
        scaling_counts: n M values for the scaling fit (empty to skip)

    Returns:
        BoundReport
    """
    rng = rng or np.random.default_rng(0)
    a_min, a_max = advantage_bounds(config.r_max, config.gamma)
    l_min, l_max = loss_range(config)

    advantages = rng.uniform(a_min, a_max, size=samples)
    ratios = rng.uniform(0.0, 1.0 + 2.0 * config.ratio_cap, size=samples)
    keep = ratio_filter(advantages, ratios, config.ratio_cap)
    losses = ppo_sample_loss(advantages[keep], ratios[keep], config.clip)
    normalized = normalize_loss(losses, config)

    complexities: Dict[str, ComplexityEstimate] = {}
    exponent = None
    if scaling_counts:
        estimates, exponent = complexity_scaling(
            scaling_counts, lambda count, g: bounded_class_outputs(32, count, g), trials, rng)
        for count, est in estimates.items():
            complexities[f'bounded_nM={count}'] = est
    if policy_config is not None:
        outputs = urma_encoder_outputs(policy_config, num_candidates=8, num_sets=config.m, rng=rng)
        complexities['urma_joint_encoder'] = gaussian_complexity_mc(outputs, trials, rng)

    report = BoundReport(
        config=config,
        a_min=a_min,
        a_max=a_max,
        l_min=l_min,
        l_max=l_max,
        normalized_loss_min=float(normalized.min()) if normalized.size else float('nan'),
        normalized_loss_mean=float(normalized.mean()) if normalized.size else float('nan'),
        normalized_loss_max=float(normalized.max()) if normalized.size else float('nan'),
        filtered_fraction=float(1.0 - keep.mean()),
        hoeffding=hoeffding_term(config.n, config.m, config.delta),
        complexities=complexities,
        scaling_exponent=exponent,
    )
    logger.info(f"Bound report: A in [{a_min:.4g}, {a_max:.4g}], Hoeffding {report.hoeffding:.4g}")
    return report
