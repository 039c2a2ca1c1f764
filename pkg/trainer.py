"""
Adapt-by-pruning training loop.

``adapt_by_pruning`` runs SGD on the mask logits (dual-temperature gradient
plus a sparsity penalty) and on the head parameters, stopping as soon as the
fraction of pruned entries exceeds the target sparsity.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from enum import StrEnum
from pathlib import Path
from typing import Any, Mapping, Optional

import numpy as np
from scipy.stats import norm

from mask_core import (
    DEFAULT_T_LARGE,
    DEFAULT_T_SMALL,
    EPS_CLAMP,
    BinaryMask,
    MaskLogits,
    MaskMode,
    PenaltyMode,
    SparsityPenaltySchedule,
    binarize,
    recovery_stats,
    sparsity,
    update_theta,
)
from model import (
    Batch,
    HeadParams,
    MaskedNetwork,
    NumericError,
    backward,
    evaluate,
    forward,
)
from numeric_core import ParameterError, make_rng, sigmoid

logger = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    """Raised when a training step produces a non-finite loss."""

    def __init__(self, step: int, layer: str, detail: str = ""):
        self.step = step
        self.layer = layer
        message = f"Non-finite loss at step {step} (first bad layer: {layer})"
        super().__init__(f"{message}: {detail}" if detail else message)


class AlphaMode(StrEnum):
    CONSTANT = "constant"
    THEOREM_RATE = "theorem_rate"


class InitSpread(StrEnum):
    VARIANCE = "variance"
    STD = "std"


@dataclass(frozen=True)
class TrainingConfig:
    """
    Hyper-parameters of one adapt-by-pruning run.

    ``target_sparsity`` of 0 disables the sparsity break. ``theta_init_spread``
    is read as a variance or a standard deviation depending on
    ``theta_init_spread_kind``.
    """

    target_sparsity: float = 0.5
    step_budget: int = 2000
    batch_size: int = 32
    alpha: float = 0.1
    alpha_mode: AlphaMode = AlphaMode.CONSTANT
    theorem_c: float = 1.0
    beta: float = 0.1
    gamma: SparsityPenaltySchedule = field(default_factory=SparsityPenaltySchedule)
    theta_init_mean: float = 0.01
    theta_init_spread: float = 0.001
    theta_init_spread_kind: InitSpread = InitSpread.VARIANCE
    t_large: float = DEFAULT_T_LARGE
    t_small: float = DEFAULT_T_SMALL
    allow_recovery: bool = True
    train_head: bool = True
    hard_forward: bool = False
    exact_sparsity_projection: bool = False
    seed: int = 0
    eval_every: int = 100

    def __post_init__(self):
        object.__setattr__(self, "alpha_mode", AlphaMode(self.alpha_mode))
        object.__setattr__(
            self, "theta_init_spread_kind", InitSpread(self.theta_init_spread_kind)
        )
        if not 0.0 <= self.target_sparsity < 1.0:
            raise ValueError(
                f"target_sparsity must be in [0, 1), got {self.target_sparsity}"
            )
        if self.step_budget < 1:
            raise ValueError(f"step_budget must be >= 1, got {self.step_budget}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.eval_every < 1:
            raise ValueError(f"eval_every must be >= 1, got {self.eval_every}")
        for name in ("alpha", "beta", "theorem_c"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.theta_init_spread < 0:
            raise ValueError(
                f"theta_init_spread must be non-negative, got {self.theta_init_spread}"
            )
        if not self.t_large >= self.t_small > 0:
            raise ValueError(
                f"Temperatures must satisfy t_large >= t_small > 0, got "
                f"{self.t_large} and {self.t_small}"
            )

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> "TrainingConfig":
        """
        Build a config from flat key/value pairs.

        The penalty schedule is given through ``gamma``, ``gamma_mode`` and
        ``gamma_ramp_steps``.
        """
        values = dict(values)
        schedule = SparsityPenaltySchedule(
            gamma=float(values.pop("gamma", 0.0)),
            mode=PenaltyMode(values.pop("gamma_mode", PenaltyMode.CONSTANT)),
            ramp_steps=int(values.pop("gamma_ramp_steps", 1000)),
        )
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ValueError(f"Unknown training config keys: {', '.join(unknown)}")
        return cls(gamma=schedule, **values)

    def to_mapping(self) -> dict[str, Any]:
        values = asdict(self)
        schedule = values.pop("gamma")
        values["gamma"] = schedule["gamma"]
        values["gamma_mode"] = str(schedule["mode"])
        values["gamma_ramp_steps"] = schedule["ramp_steps"]
        values["alpha_mode"] = str(self.alpha_mode)
        values["theta_init_spread_kind"] = str(self.theta_init_spread_kind)
        return values

    @property
    def theta_init_std(self) -> float:
        if self.theta_init_spread_kind == InitSpread.VARIANCE:
            return math.sqrt(self.theta_init_spread)
        return self.theta_init_spread

    @property
    def has_sparsity_target(self) -> bool:
        return self.target_sparsity > 0.0

    def alpha_at(self, step: int) -> float:
        if self.alpha_mode == AlphaMode.THEOREM_RATE:
            return self.theorem_c / math.sqrt(step)
        return self.alpha

    def beta_at(self, step: int) -> float:
        return self.beta


@dataclass(frozen=True)
class MetricRecord:
    """
    One logged step. ``train_loss`` is the soft-mask batch loss for
    adapt-by-pruning and the hard-mask batch loss for the baseline pruners,
    which also log ``alpha_i`` and ``gamma_i`` as zero.
    """

    step: int
    train_loss: float
    sparsity: float
    recovered_fraction: float
    gamma_i: float
    alpha_i: float
    eval_loss_hard: Optional[float] = None
    task_metric: Optional[float] = None


def _json_number(value: Optional[float]) -> Optional[float]:
    if value is None or not math.isfinite(value):
        return None
    return value


@dataclass
class RunMetrics:
    """Logged training records; steps are strictly increasing."""

    records: list[MetricRecord] = field(default_factory=list)

    def append(self, record: MetricRecord) -> None:
        if self.records and record.step <= self.records[-1].step:
            raise ValueError(
                f"Metric steps must increase: {record.step} after "
                f"{self.records[-1].step}"
            )
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def final(self) -> Optional[MetricRecord]:
        return self.records[-1] if self.records else None

    def to_jsonl(self) -> str:
        lines = []
        for record in self.records:
            row = {
                k: _json_number(v) if isinstance(v, float) else v
                for k, v in asdict(record).items()
            }
            lines.append(json.dumps(row, sort_keys=True))
        return "".join(line + "\n" for line in lines)

    def write_jsonl(self, path: Path) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def read_jsonl(cls, path: Path) -> "RunMetrics":
        metrics = cls()
        for line in Path(path).read_text().splitlines():
            if line.strip():
                metrics.append(MetricRecord(**json.loads(line)))
        return metrics


def init_theta(
    shape: tuple[int, ...],
    config: TrainingConfig,
    rng: np.random.Generator,
) -> MaskLogits:
    """Draw theta_0 elementwise from Normal(mean, std) with the configured spread."""
    theta = rng.normal(config.theta_init_mean, config.theta_init_std, size=shape)
    return MaskLogits(theta, t_large=config.t_large, t_small=config.t_small)


def expected_initial_sparsity(config: TrainingConfig) -> float:
    """P(theta_0 <= 0) under the configured initial distribution."""
    std = config.theta_init_std
    if std == 0.0:
        return 0.0 if config.theta_init_mean > 0 else 1.0
    return float(norm.cdf(-config.theta_init_mean / std))


def initialize_logits(
    net: MaskedNetwork,
    config: TrainingConfig,
    rng: np.random.Generator,
) -> None:
    net.set_logits(
        {
            name: init_theta(shape, config, rng)
            for name, shape in net.mask_shapes().items()
        }
    )


@dataclass(frozen=True, eq=False)
class PruningResult:
    mask: BinaryMask
    head_params: HeadParams
    metrics: RunMetrics
    steps_run: int
    stopped_early: bool
    achieved_sparsity: float
    theta_abs_max: float = 0.0


def _locate_non_finite(net: MaskedNetwork, batch: Batch) -> str:
    if not np.all(np.isfinite(batch.inputs)):
        return "inputs"
    for index, head in enumerate(net.head_layers):
        if not (np.all(np.isfinite(head.weights)) and np.all(np.isfinite(head.bias))):
            return f"head.{index}"
    return "output"


def _sgd_head(params: HeadParams, grads: HeadParams, beta: float) -> HeadParams:
    return [(w - beta * gw, b - beta * gb) for (w, b), (gw, gb) in zip(params, grads)]


def head_sgd_step(
    net: MaskedNetwork,
    batch: Batch,
    mask: BinaryMask,
    beta: float,
) -> float:
    """One SGD step on the head under a fixed binary mask; returns the batch loss."""
    result = forward(net, batch, MaskMode.HARD, mask=mask)
    grads = backward(net, result.cache, batch)
    net.set_head_params(_sgd_head(net.head_params(), grads.head, beta))
    return result.loss


def project_to_sparsity(
    logits: Mapping[str, MaskLogits],
    target_sparsity: float,
) -> dict[str, MaskLogits]:
    """
    Keep the ceil((1 - s) * d) largest logits across all tensors, prune the rest.

    This is an optional post-processing step, not part of the pruning loop.
    """
    names = list(logits)
    flat = np.concatenate([logits[name].theta.reshape(-1) for name in names])
    keep = math.ceil((1.0 - target_sparsity) * flat.size - 1e-9)
    order = np.argsort(-flat, kind="stable")
    kept = np.zeros(flat.size, dtype=bool)
    kept[order[:keep]] = True
    kept &= flat > 0.0
    projected = {}
    offset = 0
    for name in names:
        entry = logits[name]
        size = entry.theta.size
        keep_here = kept[offset : offset + size].reshape(entry.shape)
        theta = np.where(keep_here, entry.theta, np.minimum(entry.theta, -EPS_CLAMP))
        projected[name] = MaskLogits(
            theta, entry.t_large, entry.t_small, entry.ever_negative | ~keep_here
        )
        offset += size
    return projected


def adapt_by_pruning(
    net: MaskedNetwork,
    train_data: Batch,
    config: TrainingConfig,
    eval_data: Optional[Batch] = None,
) -> PruningResult:
    """
    Learn a binary mask over the frozen base and train the head alongside it.

    Each step samples a mini-batch uniformly with replacement, runs the soft
    forward pass, updates theta with the dual-temperature gradient minus the
    penalty gamma_i, and updates the head by plain SGD. The loop breaks as soon
    as sparsity(theta) exceeds the target; it may overshoot the target.

    Args:
        net: Network to adapt; its logits and head are updated in place, the
            frozen base is never written
        train_data: Training rows
        config: Training hyper-parameters
        eval_data: Optional rows for hard-mask evaluation at logged steps

    Returns:
        PruningResult with binarize(theta), final head parameters and metrics

    Raises:
        NonFiniteLossError: If a step produces a non-finite loss
    """
    rng = make_rng(config.seed)
    initialize_logits(net, config, rng)
    mode = MaskMode.HARD if config.hard_forward else MaskMode.SOFT
    rows = len(train_data)
    metrics = RunMetrics()
    stopped_early = False
    theta_abs_max = max(float(np.max(np.abs(e.theta))) for e in net.logits().values())

    logger.info(
        f"Starting adapt-by-pruning: {config.step_budget} steps, target sparsity "
        f"{config.target_sparsity}, initial sparsity {sparsity(net.logits()):.4f}"
    )

    step = 0
    for step in range(1, config.step_budget + 1):
        batch = train_data.subset(rng.integers(0, rows, size=config.batch_size))
        try:
            result = forward(net, batch, mode)
        except NumericError as e:
            raise NonFiniteLossError(step, _locate_non_finite(net, batch), str(e))
        if not math.isfinite(result.loss):
            raise NonFiniteLossError(step, _locate_non_finite(net, batch))
        grads = backward(net, result.cache, batch)

        alpha_i = config.alpha_at(step)
        gamma_i = config.gamma.gamma_at(step)
        logits = net.logits()
        net.set_logits(
            {
                name: update_theta(
                    logits[name],
                    grads.theta[name],
                    alpha_i,
                    gamma_i,
                    allow_recovery=config.allow_recovery,
                )
                for name in logits
            }
        )
        if config.train_head:
            net.set_head_params(
                _sgd_head(net.head_params(), grads.head, config.beta_at(step))
            )

        current_logits = net.logits()
        theta_abs_max = max(
            theta_abs_max,
            max(float(np.max(np.abs(e.theta))) for e in current_logits.values()),
        )
        current = sparsity(current_logits)
        reached = config.has_sparsity_target and current > config.target_sparsity
        if step % config.eval_every == 0 or reached or step == config.step_budget:
            record = MetricRecord(
                step=step,
                train_loss=result.loss,
                sparsity=current,
                recovered_fraction=recovery_stats(current_logits).recovered_fraction,
                gamma_i=gamma_i,
                alpha_i=alpha_i,
            )
            if eval_data is not None:
                evaluation = evaluate(net, eval_data)
                record = MetricRecord(
                    **{
                        **asdict(record),
                        "eval_loss_hard": evaluation.loss,
                        "task_metric": evaluation.task_metric,
                    }
                )
            metrics.append(record)
            logger.info(
                f"Step {step}: loss {result.loss:.5f}, sparsity {current:.4f}, "
                f"recovered {record.recovered_fraction:.4f}"
            )
        if reached:
            stopped_early = True
            logger.info(
                f"Sparsity {current:.4f} exceeded target {config.target_sparsity} "
                f"at step {step}"
            )
            break

    if config.exact_sparsity_projection and config.has_sparsity_target:
        net.set_logits(project_to_sparsity(net.logits(), config.target_sparsity))

    mask = binarize(net.logits())
    achieved = sparsity(mask)
    logger.info(
        f"Adapt-by-pruning finished after {step} steps, sparsity {achieved:.4f}"
    )
    return PruningResult(
        mask=mask,
        head_params=net.head_params(),
        metrics=metrics,
        steps_run=step,
        stopped_early=stopped_early,
        achieved_sparsity=achieved,
        theta_abs_max=theta_abs_max,
    )


@dataclass(frozen=True, eq=False)
class HeadTrainingResult:
    head_params: HeadParams
    losses: list[tuple[int, float]]


def continue_head_training(
    net: MaskedNetwork,
    mask: BinaryMask,
    train_data: Batch,
    steps: int,
    beta: float = 0.1,
    batch_size: int = 32,
    seed: int = 0,
    log_every: int = 100,
) -> HeadTrainingResult:
    """
    Retrain only the head under a fixed binary mask.

    Neither the mask nor the frozen base changes. The full-data hard loss is
    recorded at step 0 and every ``log_every`` steps.
    """
    rng = make_rng(seed)
    rows = len(train_data)
    losses = [(0, forward(net, train_data, MaskMode.HARD, mask=mask).loss)]
    for step in range(1, steps + 1):
        batch = train_data.subset(rng.integers(0, rows, size=batch_size))
        head_sgd_step(net, batch, mask, beta)
        if step % log_every == 0 or step == steps:
            losses.append(
                (step, forward(net, train_data, MaskMode.HARD, mask=mask).loss)
            )
    if steps:
        logger.info(f"Head retrained for {steps} steps, loss {losses[-1][1]:.5f}")
    return HeadTrainingResult(head_params=net.head_params(), losses=losses)


@dataclass(frozen=True)
class TheoremBound:
    bound: float
    C: float
    g_max_large: float
    g_max_small: float


def g_max(t: float, M: float) -> float:
    s = float(sigmoid(np.asarray(M), t))
    return s * (1.0 - s)


def theorem1_bound(
    t_l: float,
    t_s: float,
    M: float,
    G: float,
    c: float,
    T: int,
) -> TheoremBound:
    """
    Evaluate 1/(c sqrt(T)) + c G^2 (1 + C)(1 + log T) / T.

    C = t_l t_s (1/(t_l t_s) - 2 g_max(t_l) g_max(t_s) + t_l t_s / 16^2) with
    g_max(t) = sigmoid(t M)(1 - sigmoid(t M)).
    """
    for name, value in (("t_l", t_l), ("t_s", t_s), ("M", M), ("G", G), ("c", c)):
        if not value > 0:
            raise ParameterError(f"{name} must be positive, got {value}")
    if T < 1:
        raise ParameterError(f"T must be >= 1, got {T}")
    g_large = g_max(t_l, M)
    g_small = g_max(t_s, M)
    product = t_l * t_s
    C = product * (1.0 / product - 2.0 * g_large * g_small + product / 16.0**2)
    bound = 1.0 / (c * math.sqrt(T)) + c * G**2 * (1.0 + C) * (1.0 + math.log(T)) / T
    return TheoremBound(bound=bound, C=C, g_max_large=g_large, g_max_small=g_small)


def estimate_grad_bound_G(
    net: MaskedNetwork,
    data: Batch,
    sample_count: int,
    rng: np.random.Generator,
) -> float:
    """
    Running maximum of ||grad_v loss(z; v, p)|| over sampled examples z and
    mask values v ~ Uniform[0, 1]^d, with the current head p.

    This is a lower estimate of the true G.
    """
    if sample_count < 1:
        raise ParameterError(f"sample_count must be >= 1, got {sample_count}")
    shapes = net.mask_shapes()
    estimate = 0.0
    for _ in range(sample_count):
        example = data.subset(rng.integers(0, len(data), size=1))
        values = {
            name: rng.uniform(0.0, 1.0, size=shape) for name, shape in shapes.items()
        }
        result = forward(net, example, mask_values=values)
        grads = backward(net, result.cache, example)
        norm_sq = sum(float(np.sum(g**2)) for g in grads.mask.values())
        estimate = max(estimate, math.sqrt(norm_sq))
    return estimate


def relaxed_loss(net: MaskedNetwork, data: Batch) -> float:
    """L_t(theta) on the full dataset, with the forward temperature t_large."""
    return forward(net, data, MaskMode.SOFT).loss


def _exact_gradient_copy(net: MaskedNetwork) -> MaskedNetwork:
    work = net.copy()
    work.set_logits(
        {
            name: MaskLogits(entry.theta.copy(), entry.t_large, entry.t_large)
            for name, entry in work.logits().items()
        }
    )
    return work


def minimize_relaxed_loss(
    net: MaskedNetwork,
    data: Batch,
    steps: int,
    learning_rate: float,
    min_learning_rate: float = 1e-12,
) -> float:
    """
    Full-batch descent on theta with the exact gradient of L_t.

    Runs on a copy with t_small set to t_large so the gradient is exact. The
    step size backtracks: a step is kept only if it passes the Armijo test,
    after which the step doubles; a rejected step halves it. Stops after
    ``steps`` iterations or once the step falls below ``min_learning_rate``.

    Returns:
        The smallest L_t seen, never above the starting loss
    """
    if not learning_rate > 0:
        raise ParameterError(f"learning_rate must be positive, got {learning_rate}")
    work = _exact_gradient_copy(net)
    current = relaxed_loss(work, data)
    rate = learning_rate
    for _ in range(steps):
        result = forward(work, data, MaskMode.SOFT)
        grads = backward(work, result.cache, data)
        norm_sq = sum(float(np.sum(g**2)) for g in grads.theta.values())
        if norm_sq == 0.0:
            break
        logits = work.logits()
        while rate >= min_learning_rate:
            work.set_logits(
                {
                    name: update_theta(logits[name], grads.theta[name], rate, 0.0)
                    for name in logits
                }
            )
            candidate = relaxed_loss(work, data)
            if candidate <= current - 1e-4 * rate * norm_sq:
                current = candidate
                rate *= 2.0
                break
            rate /= 2.0
        else:
            work.set_logits(logits)
            break
    return current


@dataclass(frozen=True)
class ConvergenceResult:
    steps: int
    gap: float
    bound: TheoremBound
    G_hat: float
    M: float
    start_loss: float
    reference_loss: float
    final_loss: float


def _convergence_config(
    base: TrainingConfig, c: float, steps: int, seed: int
) -> TrainingConfig:
    return TrainingConfig.from_mapping(
        {
            **base.to_mapping(),
            "target_sparsity": 0.0,
            "step_budget": steps,
            "batch_size": 1,
            "alpha_mode": AlphaMode.THEOREM_RATE,
            "theorem_c": c,
            "gamma": 0.0,
            "train_head": False,
            "seed": seed,
            "eval_every": steps,
        }
    )


def convergence_gap(
    net: MaskedNetwork,
    data: Batch,
    c: float,
    steps: int,
    seed: int,
    reference_loss: Optional[float] = None,
    config: Optional[TrainingConfig] = None,
    g_samples: int = 200,
    reference_steps: int = 2000,
) -> ConvergenceResult:
    """
    Theta-only SGD with alpha_i = c / sqrt(i) and single-example steps, head
    fixed and no penalty; returns L_t(theta_T) - L_t(theta*) alongside the bound.

    Without an explicit ``reference_loss``, theta* is approximated by exact
    full-batch descent from the same theta_0 draw the SGD run starts from, and
    from the SGD end point; the lower of the two is used, so the gap is never
    negative.
    """
    run_config = _convergence_config(config or TrainingConfig(), c, steps, seed)
    start = net.copy()
    initialize_logits(start, run_config, make_rng(run_config.seed))
    start_loss = relaxed_loss(start, data)

    work = net.copy()
    result = adapt_by_pruning(work, data, run_config)
    final_loss = relaxed_loss(work, data)
    if reference_loss is None:
        reference_loss = min(
            minimize_relaxed_loss(start, data, reference_steps, 1.0),
            minimize_relaxed_loss(work, data, reference_steps, 1.0),
        )
    gap = final_loss - reference_loss
    G_hat = estimate_grad_bound_G(work, data, g_samples, make_rng(seed + 1))
    M = max(result.theta_abs_max, 1e-12)
    bound = theorem1_bound(run_config.t_large, run_config.t_small, M, G_hat, c, steps)
    logger.info(
        f"Convergence run T={steps}: start {start_loss:.6f}, reference "
        f"{reference_loss:.6f}, gap {gap:.6f}, bound {bound.bound:.6f}"
    )
    return ConvergenceResult(
        steps=steps,
        gap=gap,
        bound=bound,
        G_hat=G_hat,
        M=M,
        start_loss=start_loss,
        reference_loss=reference_loss,
        final_loss=final_loss,
    )
