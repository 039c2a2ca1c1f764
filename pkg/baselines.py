"""
Comparison pruners: random masks, gradual magnitude pruning (MP) and iterative
magnitude pruning with rewinding (IMP), plus the feature-extraction and
fine-tuning adaptation paradigms.

Every pruner keeps surviving base weights at their frozen values and ranks
magnitudes globally across all masked tensors. MP and IMP masks are monotone:
a pruned entry never returns.
"""

import logging
import math
from dataclasses import dataclass, fields
from enum import StrEnum
from typing import Any, Mapping, Optional, Union

import numpy as np

from mask_core import DEFAULT_TENSOR_NAME, BinaryMask, MaskMode, sparsity
from model import (
    BIAS_SUFFIX,
    WEIGHT_SUFFIX,
    BaseLayer,
    Batch,
    MaskedNetwork,
    backward,
    evaluate,
    forward,
)
from numeric_core import DimensionError, ParameterError, make_rng
from trainer import (
    MetricRecord,
    PruningResult,
    RunMetrics,
    head_sgd_step,
)

logger = logging.getLogger(__name__)

# Tolerance when turning a sparsity fraction into an entry count.
COUNT_TOLERANCE = 1e-9


class ContractError(ValueError):
    """Raised when a pruning call would violate mask monotonicity."""


class PrunerKind(StrEnum):
    RND = "rnd"
    MP = "mp"
    IMP = "imp"
    FEATURE_EXTRACTION = "feature_extraction"
    FINE_TUNING = "fine_tuning"


class ScheduleKind(StrEnum):
    CUBIC = "cubic"
    LINEAR = "linear"


@dataclass(frozen=True)
class PrunerConfig:
    """
    Settings shared by the baseline pruners.

    ``round_steps`` is the IMP head-training budget per round; when unset it is
    three passes over the training data.
    """

    kind: PrunerKind = PrunerKind.MP
    target_sparsity: float = 0.5
    total_steps: int = 2000
    batch_size: int = 32
    beta: float = 0.1
    prune_every: int = 200
    schedule: ScheduleKind = ScheduleKind.CUBIC
    per_round_fraction: float = 0.2
    round_steps: Optional[int] = None
    seed: int = 0
    eval_every: int = 100

    def __post_init__(self):
        object.__setattr__(self, "kind", PrunerKind(self.kind))
        object.__setattr__(self, "schedule", ScheduleKind(self.schedule))
        if not 0.0 <= self.target_sparsity < 1.0:
            raise ValueError(
                f"target_sparsity must be in [0, 1), got {self.target_sparsity}"
            )
        if not 0.0 < self.per_round_fraction < 1.0:
            raise ValueError(
                f"per_round_fraction must be in (0, 1), got {self.per_round_fraction}"
            )
        for name in ("total_steps", "batch_size", "prune_every", "eval_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.round_steps is not None and self.round_steps < 1:
            raise ValueError(f"round_steps must be >= 1, got {self.round_steps}")
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> "PrunerConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ValueError(f"Unknown pruner config keys: {', '.join(unknown)}")
        return cls(**values)

    def steps_per_round(self, rows: int) -> int:
        if self.round_steps is not None:
            return self.round_steps
        return 3 * math.ceil(rows / self.batch_size)


ShapesLike = Union[tuple[int, ...], Mapping[str, tuple[int, ...]]]


def random_mask(
    shapes: ShapesLike,
    s: float,
    rng: np.random.Generator,
) -> BinaryMask:
    """Each entry is 0 with probability ``s`` and 1 otherwise, independently."""
    if not 0.0 <= s <= 1.0:
        raise ParameterError(f"Sparsity must be in [0, 1], got {s}")
    if isinstance(shapes, tuple):
        shapes = {DEFAULT_TENSOR_NAME: shapes}
    return BinaryMask.from_arrays(
        {name: rng.random(size=shape) >= s for name, shape in shapes.items()}
    )


def zero_count_for(sparsity_level: float, total: int) -> int:
    return min(total, math.ceil(sparsity_level * total - COUNT_TOLERANCE))


def magnitude_prune_step(
    weights_effective: Mapping[str, np.ndarray],
    current_mask: BinaryMask,
    new_sparsity: float,
) -> BinaryMask:
    """
    Raise the mask's sparsity by zeroing the smallest-magnitude survivors.

    Ranking is global over all tensors in ``current_mask`` order; ties go to
    the earlier entry. Pruned entries stay pruned.

    Raises:
        ContractError: If ``new_sparsity`` is below the mask's current sparsity
    """
    current = sparsity(current_mask)
    if new_sparsity < current - COUNT_TOLERANCE:
        raise ContractError(
            f"Cannot lower sparsity from {current:.6f} to {new_sparsity:.6f}"
        )
    names = current_mask.names
    arrays = current_mask.arrays()
    for name in names:
        if weights_effective[name].shape != arrays[name].shape:
            raise DimensionError(
                f"Weights {weights_effective[name].shape} do not match mask "
                f"{arrays[name].shape} for tensor {name}"
            )
    alive = np.concatenate([arrays[name].reshape(-1) for name in names])
    magnitude = np.concatenate(
        [np.abs(weights_effective[name]).reshape(-1) for name in names]
    )
    to_prune = zero_count_for(new_sparsity, alive.size) - int(np.sum(~alive))
    if to_prune <= 0:
        return current_mask

    survivors = np.flatnonzero(alive)
    order = survivors[np.argsort(magnitude[survivors], kind="stable")]
    alive[order[:to_prune]] = False

    pruned = {}
    offset = 0
    for name in names:
        size = arrays[name].size
        pruned[name] = alive[offset : offset + size].reshape(arrays[name].shape)
        offset += size
    return BinaryMask.from_arrays(pruned)


def cubic_schedule(target: float, step: int, total: int) -> float:
    """s_i = s (1 - (1 - i/N)^3), reaching exactly s at i = N."""
    progress = min(1.0, step / total)
    return target * (1.0 - (1.0 - progress) ** 3)


def linear_schedule(target: float, step: int, total: int) -> float:
    return target * min(1.0, step / total)


def imp_rounds(target: float, per_round_fraction: float = 0.2) -> int:
    """Rounds of ``per_round_fraction`` pruning needed to reach ``target``."""
    if target <= 0.0:
        return 0
    rounds = math.log(1.0 - target) / math.log(1.0 - per_round_fraction)
    return max(1, math.ceil(rounds - COUNT_TOLERANCE))


def _record(
    metrics: RunMetrics,
    net: MaskedNetwork,
    mask: BinaryMask,
    step: int,
    train_loss: float,
    eval_data: Optional[Batch],
) -> None:
    eval_loss = None
    task_metric = None
    if eval_data is not None:
        evaluation = evaluate(net, eval_data, mask=mask)
        eval_loss, task_metric = evaluation.loss, evaluation.task_metric
    metrics.append(
        MetricRecord(
            step=step,
            train_loss=train_loss,
            sparsity=sparsity(mask),
            recovered_fraction=0.0,
            gamma_i=0.0,
            alpha_i=0.0,
            eval_loss_hard=eval_loss,
            task_metric=task_metric,
        )
    )


def _result(
    net: MaskedNetwork, mask: BinaryMask, metrics: RunMetrics, steps: int
) -> PruningResult:
    return PruningResult(
        mask=mask,
        head_params=net.head_params(),
        metrics=metrics,
        steps_run=steps,
        stopped_early=False,
        achieved_sparsity=sparsity(mask),
    )


def _train_head_under_mask(
    net: MaskedNetwork,
    mask: BinaryMask,
    train_data: Batch,
    config: PrunerConfig,
    steps: int,
    rng: np.random.Generator,
    metrics: RunMetrics,
    step_offset: int,
    eval_data: Optional[Batch],
) -> float:
    loss = float("nan")
    for step in range(1, steps + 1):
        batch = train_data.subset(
            rng.integers(0, len(train_data), size=config.batch_size)
        )
        loss = head_sgd_step(net, batch, mask, config.beta)
        if step % config.eval_every == 0 or step == steps:
            _record(metrics, net, mask, step_offset + step, loss, eval_data)
    return loss


def run_random(
    net: MaskedNetwork,
    train_data: Batch,
    config: PrunerConfig,
    eval_data: Optional[Batch] = None,
) -> PruningResult:
    """Draw a random mask at the target sparsity, then train the head under it."""
    rng = make_rng(config.seed)
    mask = random_mask(net.mask_shapes(), config.target_sparsity, rng)
    metrics = RunMetrics()
    _train_head_under_mask(
        net, mask, train_data, config, config.total_steps, rng, metrics, 0, eval_data
    )
    logger.info(f"Random mask trained, sparsity {sparsity(mask):.4f}")
    return _result(net, mask, metrics, config.total_steps)


def run_mp(
    net: MaskedNetwork,
    train_data: Batch,
    config: PrunerConfig,
    eval_data: Optional[Batch] = None,
) -> PruningResult:
    """
    Gradual magnitude pruning.

    The head trains for ``total_steps``; every ``prune_every`` steps, and once
    more at the last step, the mask is tightened to the schedule's sparsity by
    |w0|. With ``prune_every`` beyond the budget this is one-shot global
    magnitude pruning at the end.
    """
    rng = make_rng(config.seed)
    mask = BinaryMask.ones(net.mask_shapes())
    weights = net.frozen_tensors()
    schedule = (
        cubic_schedule if config.schedule == ScheduleKind.CUBIC else linear_schedule
    )
    metrics = RunMetrics()
    rows = len(train_data)

    for step in range(1, config.total_steps + 1):
        batch = train_data.subset(rng.integers(0, rows, size=config.batch_size))
        loss = head_sgd_step(net, batch, mask, config.beta)
        if step % config.prune_every == 0 or step == config.total_steps:
            level = schedule(config.target_sparsity, step, config.total_steps)
            mask = magnitude_prune_step(weights, mask, level)
            logger.info(f"MP step {step}: sparsity {sparsity(mask):.4f}")
        if step % config.eval_every == 0 or step == config.total_steps:
            _record(metrics, net, mask, step, loss, eval_data)

    return _result(net, mask, metrics, config.total_steps)


def run_imp(
    net: MaskedNetwork,
    train_data: Batch,
    config: PrunerConfig,
    eval_data: Optional[Batch] = None,
) -> PruningResult:
    """
    Iterative magnitude pruning with rewinding.

    Each round trains the head, prunes ``per_round_fraction`` of the remaining
    entries by magnitude of the effective weights w0 * m, and rewinds the head
    to its starting values. The last round is clipped to the target sparsity,
    and a final round of head training follows under the finished mask. The
    base is frozen, so rewinding only touches the head.
    """
    rng = make_rng(config.seed)
    initial_head = net.head_params()
    mask = BinaryMask.ones(net.mask_shapes())
    weights = net.frozen_tensors()
    round_steps = config.steps_per_round(len(train_data))
    rounds = imp_rounds(config.target_sparsity, config.per_round_fraction)
    metrics = RunMetrics()
    steps = 0

    for round_index in range(1, rounds + 1):
        _train_head_under_mask(
            net, mask, train_data, config, round_steps, rng, metrics, steps, eval_data
        )
        steps += round_steps
        level = min(
            config.target_sparsity,
            1.0 - (1.0 - config.per_round_fraction) ** round_index,
        )
        arrays = mask.arrays()
        effective = {name: weights[name] * arrays[name] for name in mask.names}
        mask = magnitude_prune_step(effective, mask, level)
        net.set_head_params(initial_head)
        logger.info(f"IMP round {round_index}/{rounds}: sparsity {sparsity(mask):.4f}")

    _train_head_under_mask(
        net, mask, train_data, config, round_steps, rng, metrics, steps, eval_data
    )
    steps += round_steps
    return _result(net, mask, metrics, steps)


def run_feature_extraction(
    net: MaskedNetwork,
    train_data: Batch,
    config: PrunerConfig,
    eval_data: Optional[Batch] = None,
) -> PruningResult:
    """Keep every base weight and train only the head."""
    mask = BinaryMask.ones(net.mask_shapes())
    metrics = RunMetrics()
    _train_head_under_mask(
        net,
        mask,
        train_data,
        config,
        config.total_steps,
        make_rng(config.seed),
        metrics,
        0,
        eval_data,
    )
    return _result(net, mask, metrics, config.total_steps)


def run_fine_tuning(
    net: MaskedNetwork,
    train_data: Batch,
    config: PrunerConfig,
    eval_data: Optional[Batch] = None,
) -> tuple[MaskedNetwork, PruningResult]:
    """
    Fine-tune base and head together on a copy of ``net``.

    The original network, frozen base included, is left untouched.

    Returns:
        Tuple of (fine-tuned copy, result with an all-ones mask)
    """
    tuned = net.copy()
    rng = make_rng(config.seed)
    mask = BinaryMask.ones(tuned.mask_shapes())
    metrics = RunMetrics()
    rows = len(train_data)

    for step in range(1, config.total_steps + 1):
        batch = train_data.subset(rng.integers(0, rows, size=config.batch_size))
        result = forward(tuned, batch, MaskMode.HARD, mask=mask)
        grads = backward(tuned, result.cache, batch)
        effective = grads.effective
        tuned.base_layers = [
            BaseLayer(
                name=layer.name,
                w0=layer.w0 - config.beta * effective[layer.name + WEIGHT_SUFFIX],
                bias0=layer.bias0 - config.beta * effective[layer.name + BIAS_SUFFIX],
                logits=layer.logits,
                activation=layer.activation,
                bias_logits=layer.bias_logits,
            )
            for layer in tuned.base_layers
        ]
        tuned.set_head_params(
            [
                (w - config.beta * gw, b - config.beta * gb)
                for (w, b), (gw, gb) in zip(tuned.head_params(), grads.head)
            ]
        )
        if step % config.eval_every == 0 or step == config.total_steps:
            _record(metrics, tuned, mask, step, result.loss, eval_data)

    logger.info(f"Fine-tuned base and head for {config.total_steps} steps")
    return tuned, _result(tuned, mask, metrics, config.total_steps)


def run_pruner(
    net: MaskedNetwork,
    train_data: Batch,
    config: PrunerConfig,
    eval_data: Optional[Batch] = None,
) -> PruningResult:
    """Dispatch on ``config.kind``; fine-tuning results describe the tuned copy."""
    if config.kind == PrunerKind.RND:
        return run_random(net, train_data, config, eval_data)
    if config.kind == PrunerKind.MP:
        return run_mp(net, train_data, config, eval_data)
    if config.kind == PrunerKind.IMP:
        return run_imp(net, train_data, config, eval_data)
    if config.kind == PrunerKind.FEATURE_EXTRACTION:
        return run_feature_extraction(net, train_data, config, eval_data)
    _, result = run_fine_tuning(net, train_data, config, eval_data)
    return result

