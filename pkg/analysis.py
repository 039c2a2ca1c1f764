"""
Topology analysis and sensitivity ablations over learned masks.
"""

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from enum import StrEnum
from pathlib import Path
from typing import Any, Mapping, Optional, Union

import numpy as np

from mask_core import BinaryMask
from model import (
    BIAS_SUFFIX,
    WEIGHT_SUFFIX,
    BaseLayer,
    Batch,
    HeadParams,
    MaskedNetwork,
    chance_metric,
    evaluate,
)
from numeric_core import ParameterError, make_rng
from trainer import RunMetrics, continue_head_training

logger = logging.getLogger(__name__)

DEFAULT_SIGMAS = (0.001, 0.01, 0.1)


class UnknownTensorError(KeyError):
    """Raised when a mask names a tensor the layout does not describe."""


class MismatchedGridError(ValueError):
    """Raised when paired runs do not cover the same sparsity levels."""


class ComponentTag(StrEnum):
    INPUT_LAYER = "input_layer"
    HIDDEN = "hidden"
    OUTPUT_ADJACENT = "output_adjacent"


@dataclass(frozen=True)
class TensorLayout:
    name: str
    layer_index: int
    component: ComponentTag


def network_layout(net: MaskedNetwork) -> dict[str, TensorLayout]:
    """
    Tag every mask tensor with its base layer index and component.

    The first base layer is the input layer, the last one feeds the head, and
    a single-layer base counts as the input layer.
    """
    last = len(net.base_layers) - 1
    positions = {layer.name: index for index, layer in enumerate(net.base_layers)}
    layout = {}
    for name, (layer, _) in net.masked_tensors().items():
        index = positions[layer.name]
        if index == 0:
            component = ComponentTag.INPUT_LAYER
        elif index == last:
            component = ComponentTag.OUTPUT_ADJACENT
        else:
            component = ComponentTag.HIDDEN
        layout[name] = TensorLayout(name, index, component)
    return layout


@dataclass(frozen=True)
class TensorSparsity:
    name: str
    layer_index: int
    component: ComponentTag
    size: int
    zeros: int

    @property
    def sparsity(self) -> float:
        return self.zeros / self.size if self.size else 0.0


@dataclass(frozen=True)
class SparsityProfile:
    tensors: list[TensorSparsity]

    @property
    def overall(self) -> float:
        total = sum(t.size for t in self.tensors)
        return sum(t.zeros for t in self.tensors) / total if total else 0.0

    def _grouped(self, key: str) -> dict:
        sizes: dict = {}
        zeros: dict = {}
        for tensor in self.tensors:
            group = getattr(tensor, key)
            sizes[group] = sizes.get(group, 0) + tensor.size
            zeros[group] = zeros.get(group, 0) + tensor.zeros
        return {g: zeros[g] / sizes[g] if sizes[g] else 0.0 for g in sizes}

    def by_layer(self) -> dict[int, float]:
        return self._grouped("layer_index")

    def by_component(self) -> dict[ComponentTag, float]:
        return self._grouped("component")

    def to_rows(self) -> list[dict[str, Any]]:
        return [
            {
                "name": t.name,
                "layer_index": t.layer_index,
                "component": str(t.component),
                "size": t.size,
                "sparsity": t.sparsity,
            }
            for t in self.tensors
        ]


def sparsity_profile(
    mask: BinaryMask,
    layout: Mapping[str, TensorLayout],
) -> SparsityProfile:
    """
    Per-tensor zero counts grouped by layer and component.

    Raises:
        UnknownTensorError: If the mask has a tensor the layout does not name
    """
    tensors = []
    for name, packed in mask.tensors.items():
        if name not in layout:
            raise UnknownTensorError(name)
        entry = layout[name]
        tensors.append(
            TensorSparsity(
                name=name,
                layer_index=entry.layer_index,
                component=ComponentTag(entry.component),
                size=packed.size,
                zeros=packed.size - packed.popcount(),
            )
        )
    return SparsityProfile(tensors)


@dataclass(frozen=True)
class ProfileDelta:
    """Group sparsity of ``a`` minus ``b``; groups on only one side are skipped."""

    by_layer: dict[int, float]
    by_component: dict[ComponentTag, float]
    overall: float


def compare_profiles(a: SparsityProfile, b: SparsityProfile) -> ProfileDelta:
    a_layers, b_layers = a.by_layer(), b.by_layer()
    a_components, b_components = a.by_component(), b.by_component()
    return ProfileDelta(
        by_layer={k: a_layers[k] - b_layers[k] for k in a_layers if k in b_layers},
        by_component={
            k: a_components[k] - b_components[k]
            for k in a_components
            if k in b_components
        },
        overall=a.overall - b.overall,
    )


def shuffle_mask(mask: BinaryMask, rng: np.random.Generator) -> BinaryMask:
    """
    Randomly redistribute each tensor's surviving entries over that tensor.

    Permutations are drawn in sorted name order so the result does not depend
    on the mask's tensor order.
    """
    arrays = mask.arrays()
    shuffled = {}
    for name in sorted(arrays):
        values = arrays[name]
        shuffled[name] = rng.permutation(values.reshape(-1)).reshape(values.shape)
    return BinaryMask.from_arrays({name: shuffled[name] for name in mask.names})


def reinit_weights(
    w0_set: Mapping[str, np.ndarray],
    sigma: float,
    rng: np.random.Generator,
) -> dict[str, np.ndarray]:
    """Multiply every weight by an independent draw from Normal(1, sigma)."""
    if sigma < 0:
        raise ParameterError(f"sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return {name: np.array(w, dtype=np.float64) for name, w in w0_set.items()}
    return {
        name: w * rng.normal(1.0, sigma, size=np.shape(w)) for name, w in w0_set.items()
    }


def reinit_network(
    net: MaskedNetwork,
    sigma: float,
    rng: np.random.Generator,
) -> MaskedNetwork:
    """Copy of ``net`` whose masked frozen tensors went through ``reinit_weights``."""
    perturbed = reinit_weights(net.frozen_tensors(), sigma, rng)
    copy = net.copy()
    copy.base_layers = [
        BaseLayer(
            name=layer.name,
            w0=perturbed[layer.name + WEIGHT_SUFFIX],
            bias0=perturbed.get(layer.name + BIAS_SUFFIX, layer.bias0),
            logits=layer.logits,
            activation=layer.activation,
            bias_logits=layer.bias_logits,
        )
        for layer in copy.base_layers
    ]
    return copy


@dataclass(frozen=True)
class SensitivityConfig:
    retrain_steps: int = 2000
    beta: float = 0.1
    batch_size: int = 32
    sigmas: tuple[float, ...] = DEFAULT_SIGMAS
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "sigmas", tuple(float(s) for s in self.sigmas))
        if self.retrain_steps < 0:
            raise ValueError(f"retrain_steps must be >= 0, got {self.retrain_steps}")
        if any(s < 0 for s in self.sigmas):
            raise ValueError(f"sigmas must be non-negative, got {self.sigmas}")

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> "SensitivityConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ValueError(f"Unknown sensitivity config keys: {', '.join(unknown)}")
        return cls(**values)


@dataclass(frozen=True)
class SensitivityReport:
    baseline_metric: float
    shuffled_metric: float
    reinit_metric_per_sigma: dict[float, float]
    chance_metric: float

    def to_rows(self) -> list[dict[str, Any]]:
        rows = [
            {"arm": "baseline", "metric": self.baseline_metric},
            {"arm": "shuffled", "metric": self.shuffled_metric},
        ]
        for sigma, metric in self.reinit_metric_per_sigma.items():
            rows.append({"arm": f"reinit_sigma_{sigma:g}", "metric": metric})
        rows.append({"arm": "chance", "metric": self.chance_metric})
        return rows


def _retrained_metric(
    net: MaskedNetwork,
    head: HeadParams,
    mask: BinaryMask,
    train_data: Batch,
    eval_data: Batch,
    config: SensitivityConfig,
) -> float:
    net.set_head_params(head)
    continue_head_training(
        net,
        mask,
        train_data,
        config.retrain_steps,
        beta=config.beta,
        batch_size=config.batch_size,
        seed=config.seed,
        log_every=max(1, config.retrain_steps),
    )
    return evaluate(net, eval_data, mask=mask).task_metric


def sensitivity_report(
    net: MaskedNetwork,
    mask: BinaryMask,
    train_data: Batch,
    eval_data: Batch,
    config: SensitivityConfig,
    head_init: Optional[HeadParams] = None,
) -> SensitivityReport:
    """
    Compare the learned mask against a shuffled mask and re-initialised weights.

    Every arm starts from the same head (``head_init``, or the network's
    current head) on its own copy of the network and retrains only the head
    for ``retrain_steps`` with the same seed, so the arms are compute-matched
    and an unperturbed arm reproduces the baseline exactly. ``net`` is not
    modified.
    """
    head = head_init if head_init is not None else net.head_params()
    rng = make_rng(config.seed)

    baseline = _retrained_metric(net.copy(), head, mask, train_data, eval_data, config)
    shuffled = _retrained_metric(
        net.copy(), head, shuffle_mask(mask, rng), train_data, eval_data, config
    )
    reinit = {}
    for sigma in config.sigmas:
        perturbed = reinit_network(net, sigma, rng)
        reinit[sigma] = _retrained_metric(
            perturbed, head, mask, train_data, eval_data, config
        )
    report = SensitivityReport(
        baseline_metric=baseline,
        shuffled_metric=shuffled,
        reinit_metric_per_sigma=reinit,
        chance_metric=chance_metric(eval_data, net.loss_kind),
    )
    logger.info(
        f"Sensitivity: baseline {baseline:.4f}, shuffled {shuffled:.4f}, "
        f"reinit {', '.join(f'{s:g}: {m:.4f}' for s, m in reinit.items())}"
    )
    return report


MetricSource = Union[RunMetrics, float]


def final_metric(source: MetricSource) -> float:
    """Last logged task metric of a run, or the value itself."""
    if isinstance(source, RunMetrics):
        for record in reversed(source.records):
            if record.task_metric is not None:
                return record.task_metric
        return math.nan
    return float(source)


@dataclass(frozen=True)
class RecoveryRow:
    sparsity: float
    with_recovery: float
    without_recovery: float

    @property
    def delta(self) -> float:
        return self.without_recovery - self.with_recovery


@dataclass(frozen=True)
class RecoveryTable:
    rows: list[RecoveryRow] = field(default_factory=list)

    def deltas(self) -> dict[float, float]:
        return {row.sparsity: row.delta for row in self.rows}

    def to_rows(self) -> list[dict[str, Any]]:
        return [{**asdict(row), "delta": row.delta} for row in self.rows]


def recovery_report(
    metrics_with: Mapping[float, MetricSource],
    metrics_without: Mapping[float, MetricSource],
) -> RecoveryTable:
    """
    Delta = metric(no recovery) - metric(with recovery) per sparsity level.

    Raises:
        MismatchedGridError: If the two sides cover different sparsity levels
    """
    if set(metrics_with) != set(metrics_without):
        raise MismatchedGridError(
            f"Sparsity grids differ: {sorted(metrics_with)} vs "
            f"{sorted(metrics_without)}"
        )
    return RecoveryTable(
        [
            RecoveryRow(
                sparsity=level,
                with_recovery=final_metric(metrics_with[level]),
                without_recovery=final_metric(metrics_without[level]),
            )
            for level in sorted(metrics_with)
        ]
    )


def write_csv(rows: list[dict[str, Any]], path: Path) -> None:
    path = Path(path)
    with path.open("w", newline="") as handle:
        if not rows:
            return
        writer = csv.DictWriter(handle, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def write_json(payload: Any, path: Path) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True, default=str))
