"""
Synthetic tasks and pre-trained base networks.

Each task comes with a base network pre-trained end-to-end on a related
source task: same input distribution, perturbed targets. The base is
informative for the target task without being optimal for it.
"""

import logging
from dataclasses import dataclass, fields
from enum import StrEnum
from pathlib import Path
from typing import Any, Mapping, Optional

import numpy as np

from baselines import PrunerConfig, PrunerKind, run_fine_tuning
from model import (
    BaseLayer,
    Batch,
    LossKind,
    MaskedNetwork,
    build_head,
    dense_init,
    full_logits,
)
from numeric_core import Activation, make_rng

logger = logging.getLogger(__name__)

VALIDATION_FRACTION = 0.1


class TaskKind(StrEnum):
    TEACHER_STUDENT_REGRESSION = "teacher_student_regression"
    GAUSSIAN_BLOBS_CLASSIFICATION = "gaussian_blobs_classification"
    CSV_DATASET = "csv_dataset"


@dataclass(frozen=True)
class TaskSpec:
    """
    What to generate.

    For ``csv_dataset`` the file's last column (or ``target_column``) is the
    target; ``classes`` > 0 reads it as a class label, 0 as a regression
    target, and ``n_eval`` rows are held out after shuffling.
    """

    kind: TaskKind = TaskKind.TEACHER_STUDENT_REGRESSION
    n_train: int = 512
    n_eval: int = 256
    input_dim: int = 8
    classes: int = 3
    hidden_dims: tuple[int, ...] = (64, 64)
    noise: float = 0.1
    separation: float = 3.0
    source_perturbation: float = 0.5
    pretrain_steps: int = 1500
    pretrain_beta: float = 0.05
    head_hidden: bool = True
    mask_bias: bool = False
    csv_path: Optional[str] = None
    target_column: int = -1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", TaskKind(self.kind))
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.n_train < 2 or self.n_eval < 1:
            raise ValueError(
                f"Degenerate task sizes: n_train={self.n_train} (need >= 2 to hold "
                f"out validation rows), n_eval={self.n_eval}"
            )
        if self.input_dim < 1 or not self.hidden_dims or min(self.hidden_dims) < 1:
            raise ValueError(
                f"Degenerate network sizes: input_dim={self.input_dim}, "
                f"hidden_dims={self.hidden_dims}"
            )
        if self.kind == TaskKind.GAUSSIAN_BLOBS_CLASSIFICATION and self.classes < 2:
            raise ValueError(f"Classification needs >= 2 classes, got {self.classes}")
        if self.kind == TaskKind.CSV_DATASET and not self.csv_path:
            raise ValueError("csv_dataset tasks need csv_path")

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> "TaskSpec":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ValueError(f"Unknown task keys: {', '.join(unknown)}")
        return cls(**values)

    @property
    def loss_kind(self) -> LossKind:
        if self.kind == TaskKind.GAUSSIAN_BLOBS_CLASSIFICATION or (
            self.kind == TaskKind.CSV_DATASET and self.classes > 0
        ):
            return LossKind.CROSS_ENTROPY
        return LossKind.SQUARED_ERROR


@dataclass(frozen=True, eq=False)
class GeneratedTask:
    spec: TaskSpec
    train: Batch
    validation: Batch
    eval: Batch
    base_net: MaskedNetwork

    @property
    def output_dim(self) -> int:
        return self.base_net.output_dim


def _teacher_targets(
    inputs: np.ndarray,
    layers: list[tuple[np.ndarray, np.ndarray]],
) -> np.ndarray:
    hidden = inputs
    for weights, bias in layers[:-1]:
        hidden = np.maximum(hidden @ weights + bias, 0.0)
    weights, bias = layers[-1]
    return hidden @ weights + bias


def _perturb(
    layers: list[tuple[np.ndarray, np.ndarray]],
    scale: float,
    rng: np.random.Generator,
) -> list[tuple[np.ndarray, np.ndarray]]:
    return [(w * (1.0 + scale * rng.normal(size=w.shape)), b) for w, b in layers]


def _teacher_student(spec: TaskSpec, rng: np.random.Generator) -> tuple:
    teacher = [
        dense_init(rng, spec.input_dim, 16),
        dense_init(rng, 16, 1),
    ]
    inputs = rng.normal(size=(spec.n_train + spec.n_eval, spec.input_dim))
    clean = _teacher_targets(inputs, teacher)
    scale = float(np.std(clean)) or 1.0
    targets = clean / scale + spec.noise * rng.normal(size=clean.shape)

    source_inputs = rng.normal(size=(spec.n_train, spec.input_dim))
    source_teacher = _perturb(teacher, spec.source_perturbation, rng)
    source_targets = _teacher_targets(source_inputs, source_teacher) / scale
    return inputs, targets, source_inputs, source_targets, 1


def _blobs(spec: TaskSpec, rng: np.random.Generator) -> tuple:
    means = spec.separation * rng.normal(size=(spec.classes, spec.input_dim))

    def sample(count: int, centres: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        labels = rng.integers(0, spec.classes, size=count)
        return centres[labels] + rng.normal(size=(count, spec.input_dim)), labels

    inputs, labels = sample(spec.n_train + spec.n_eval, means)
    shifted = means + spec.source_perturbation * spec.separation * rng.normal(
        size=means.shape
    )
    source_inputs, source_labels = sample(spec.n_train, shifted)
    return (
        inputs,
        labels.astype(np.float64),
        source_inputs,
        source_labels.astype(np.float64),
        spec.classes,
    )


def load_csv(path: Path, target_column: int = -1) -> tuple[np.ndarray, np.ndarray]:
    """Numeric CSV with a header row; returns (inputs, targets)."""
    try:
        table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except (OSError, ValueError) as e:
        raise ValueError(f"Cannot read numeric CSV {path}: {e}")
    if table.shape[1] < 2:
        raise ValueError(f"CSV {path} needs at least one input and one target column")
    targets = table[:, target_column]
    inputs = np.delete(table, target_column % table.shape[1], axis=1)
    return inputs, targets


def _csv(spec: TaskSpec, rng: np.random.Generator) -> tuple:
    inputs, targets = load_csv(Path(spec.csv_path), spec.target_column)
    if inputs.shape[0] != spec.n_train + spec.n_eval:
        raise ValueError(
            f"CSV has {inputs.shape[0]} rows, expected n_train + n_eval = "
            f"{spec.n_train + spec.n_eval}"
        )
    if inputs.shape[1] != spec.input_dim:
        raise ValueError(
            f"CSV has {inputs.shape[1]} input columns, expected {spec.input_dim}"
        )
    order = rng.permutation(inputs.shape[0])
    inputs, targets = inputs[order], targets[order]
    source_inputs = inputs[: spec.n_train]
    if spec.classes > 0:
        source_targets = targets[: spec.n_train].copy()
        flip = rng.random(spec.n_train) < spec.source_perturbation
        source_targets[flip] = rng.integers(0, spec.classes, size=int(flip.sum()))
        outputs = spec.classes
    else:
        spread = float(np.std(targets)) or 1.0
        source_targets = targets[: spec.n_train] + (
            spec.source_perturbation * spread * rng.normal(size=spec.n_train)
        )
        outputs = 1
    return inputs, targets, source_inputs, source_targets, outputs


def pretrain_base(
    spec: TaskSpec,
    source: Batch,
    output_dim: int,
    rng: np.random.Generator,
) -> list[BaseLayer]:
    """Train a fresh base plus temporary head on the source task; keep the base."""
    base_layers = []
    width = spec.input_dim
    for index, hidden in enumerate(spec.hidden_dims):
        weights, bias = dense_init(rng, width, hidden)
        base_layers.append(
            BaseLayer(
                name=f"layer{index}",
                w0=weights,
                bias0=bias,
                activation=Activation.RELU,
                bias_logits=full_logits(bias.shape) if spec.mask_bias else None,
            )
        )
        width = hidden
    source_net = MaskedNetwork(
        base_layers,
        build_head(rng, width, output_dim, hidden=spec.head_hidden),
        spec.loss_kind,
    )
    config = PrunerConfig(
        kind=PrunerKind.FINE_TUNING,
        total_steps=spec.pretrain_steps,
        beta=spec.pretrain_beta,
        seed=int(rng.integers(0, 2**31)),
        eval_every=spec.pretrain_steps,
    )
    tuned, result = run_fine_tuning(source_net, source, config)
    logger.info(
        f"Pre-trained base on source task, final batch loss "
        f"{result.metrics.final.train_loss:.5f}"
    )
    return tuned.base_layers


def generate_task(spec: TaskSpec) -> GeneratedTask:
    """
    Build train, validation and eval splits plus a pre-trained base network.

    The validation split is the last 10% of the training rows. The returned
    network carries a freshly initialised head for the target task.
    """
    rng = make_rng(spec.seed)
    if spec.kind == TaskKind.TEACHER_STUDENT_REGRESSION:
        generated = _teacher_student(spec, rng)
    elif spec.kind == TaskKind.GAUSSIAN_BLOBS_CLASSIFICATION:
        generated = _blobs(spec, rng)
    else:
        generated = _csv(spec, rng)
    inputs, targets, source_inputs, source_targets, output_dim = generated

    n_validation = max(1, int(round(VALIDATION_FRACTION * spec.n_train)))
    n_fit = spec.n_train - n_validation
    train = Batch(inputs[:n_fit], targets[:n_fit])
    validation = Batch(inputs[n_fit : spec.n_train], targets[n_fit : spec.n_train])
    eval_split = Batch(inputs[spec.n_train :], targets[spec.n_train :])

    base_layers = pretrain_base(
        spec, Batch(source_inputs, source_targets), output_dim, rng
    )
    base_net = MaskedNetwork(
        base_layers,
        build_head(rng, spec.hidden_dims[-1], output_dim, hidden=spec.head_hidden),
        spec.loss_kind,
    )
    logger.info(
        f"Generated {spec.kind} task: {len(train)} train, {len(validation)} "
        f"validation, {len(eval_split)} eval rows"
    )
    return GeneratedTask(spec, train, validation, eval_split, base_net)
