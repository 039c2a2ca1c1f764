"""
Task model f(x; w0 * m, p): a frozen dense base with per-tensor mask logits,
followed by a small trainable head that is never masked.
"""

import logging
import warnings
from dataclasses import dataclass, field, replace
from enum import StrEnum
from typing import Mapping, Optional

import numpy as np
from scipy.special import log_softmax, softmax
from scipy.stats import spearmanr

from mask_core import (
    BinaryMask,
    MaskLogits,
    MaskMode,
    MaskSide,
    hard_mask,
    soft_mask,
    theta_gradient,
)
from numeric_core import (
    Activation,
    DimensionError,
    LayerCache,
    StaleCacheError,
    layer_backward,
    layer_forward,
)

logger = logging.getLogger(__name__)

WEIGHT_SUFFIX = ".weight"
BIAS_SUFFIX = ".bias"


class EmptyDatasetError(ValueError):
    """Raised when evaluating on a dataset with no rows."""


class NumericError(ArithmeticError):
    """Raised when the network output cannot be turned into a loss."""


class LossKind(StrEnum):
    SQUARED_ERROR = "squared_error"
    CROSS_ENTROPY = "cross_entropy"


@dataclass(frozen=True, eq=False)
class Batch:
    """
    Rows of inputs with their targets.

    Regression targets have shape (n, outputs); classification targets are
    class indices of shape (n,).
    """

    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        inputs = np.ascontiguousarray(self.inputs, dtype=np.float64)
        targets = np.ascontiguousarray(self.targets, dtype=np.float64)
        if inputs.ndim != 2:
            raise DimensionError(f"Inputs must be a matrix, got shape {inputs.shape}")
        if targets.shape[:1] != inputs.shape[:1]:
            raise DimensionError(
                f"Row counts differ: inputs {inputs.shape}, targets {targets.shape}"
            )
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "targets", targets)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def subset(self, indices: np.ndarray) -> "Batch":
        return Batch(self.inputs[indices], self.targets[indices])


def _frozen_copy(values: np.ndarray) -> np.ndarray:
    frozen = np.array(values, dtype=np.float64, copy=True)
    frozen.flags.writeable = False
    return frozen


def _copy_logits(logits: Optional[MaskLogits]) -> Optional[MaskLogits]:
    if logits is None:
        return None
    return replace(
        logits, theta=logits.theta.copy(), ever_negative=logits.ever_negative.copy()
    )


def full_logits(shape: tuple[int, ...], value: float = 1.0) -> MaskLogits:
    """Logits that keep every entry; used until the trainer initialises theta."""
    return MaskLogits(np.full(shape, value, dtype=np.float64))


@dataclass(eq=False)
class BaseLayer:
    """A frozen pre-trained layer. ``w0`` and ``bias0`` are read-only arrays."""

    name: str
    w0: np.ndarray
    bias0: np.ndarray
    logits: Optional[MaskLogits] = None
    activation: Activation = Activation.RELU
    bias_logits: Optional[MaskLogits] = None

    def __post_init__(self):
        self.w0 = _frozen_copy(self.w0)
        self.bias0 = _frozen_copy(self.bias0)
        self.activation = Activation(self.activation)
        if self.logits is None:
            self.logits = full_logits(self.w0.shape)
        if self.logits.shape != self.w0.shape:
            raise DimensionError(
                f"Layer {self.name}: logits {self.logits.shape} do not match "
                f"weights {self.w0.shape}"
            )
        if self.bias_logits is not None and self.bias_logits.shape != self.bias0.shape:
            raise DimensionError(
                f"Layer {self.name}: bias logits {self.bias_logits.shape} do not "
                f"match bias {self.bias0.shape}"
            )


@dataclass(eq=False)
class HeadLayer:
    weights: np.ndarray
    bias: np.ndarray
    activation: Activation = Activation.RELU

    def __post_init__(self):
        self.weights = np.array(self.weights, dtype=np.float64, copy=True)
        self.bias = np.array(self.bias, dtype=np.float64, copy=True)
        self.activation = Activation(self.activation)


HeadParams = list[tuple[np.ndarray, np.ndarray]]


@dataclass(eq=False)
class MaskedNetwork:
    """
    Frozen base layers with mask logits plus a trainable head.

    ``version`` is bumped after every parameter update so a cache from an
    earlier forward pass is rejected by ``backward``.
    """

    base_layers: list[BaseLayer]
    head_layers: list[HeadLayer]
    loss_kind: LossKind = LossKind.SQUARED_ERROR
    version: int = 0

    def __post_init__(self):
        self.loss_kind = LossKind(self.loss_kind)

    @property
    def input_dim(self) -> int:
        return self.base_layers[0].w0.shape[0]

    @property
    def output_dim(self) -> int:
        return self.head_layers[-1].weights.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.base_layers[-1].w0.shape[1]

    def masked_tensors(self) -> dict[str, tuple[BaseLayer, str]]:
        """Mask tensor name -> (layer, "weight" | "bias"), in layer order."""
        named: dict[str, tuple[BaseLayer, str]] = {}
        for layer in self.base_layers:
            named[layer.name + WEIGHT_SUFFIX] = (layer, "weight")
            if layer.bias_logits is not None:
                named[layer.name + BIAS_SUFFIX] = (layer, "bias")
        return named

    def mask_shapes(self) -> dict[str, tuple[int, ...]]:
        return {name: tensor.shape for name, tensor in self.frozen_tensors().items()}

    def frozen_tensors(self) -> dict[str, np.ndarray]:
        """The frozen tensors under each mask, keyed by mask tensor name."""
        return {
            name: layer.w0 if part == "weight" else layer.bias0
            for name, (layer, part) in self.masked_tensors().items()
        }

    def logits(self) -> dict[str, MaskLogits]:
        return {
            name: layer.logits if part == "weight" else layer.bias_logits
            for name, (layer, part) in self.masked_tensors().items()
        }

    def set_logits(self, logits: Mapping[str, MaskLogits]) -> None:
        for name, (layer, part) in self.masked_tensors().items():
            if part == "weight":
                layer.logits = logits[name]
            else:
                layer.bias_logits = logits[name]
        self.version += 1

    def head_params(self) -> HeadParams:
        return [(h.weights.copy(), h.bias.copy()) for h in self.head_layers]

    def set_head_params(self, params: HeadParams) -> None:
        if len(params) != len(self.head_layers):
            raise DimensionError(
                f"Expected {len(self.head_layers)} head layers, got {len(params)}"
            )
        for head, (weights, bias) in zip(self.head_layers, params):
            if weights.shape != head.weights.shape or bias.shape != head.bias.shape:
                raise DimensionError(
                    f"Head parameter shapes {weights.shape}/{bias.shape} do not "
                    f"match {head.weights.shape}/{head.bias.shape}"
                )
            head.weights = np.array(weights, dtype=np.float64, copy=True)
            head.bias = np.array(bias, dtype=np.float64, copy=True)
        self.version += 1

    def copy(self) -> "MaskedNetwork":
        """Independent copy; frozen tensors stay read-only in the copy."""
        return MaskedNetwork(
            base_layers=[
                BaseLayer(
                    name=layer.name,
                    w0=layer.w0,
                    bias0=layer.bias0,
                    logits=_copy_logits(layer.logits),
                    activation=layer.activation,
                    bias_logits=_copy_logits(layer.bias_logits),
                )
                for layer in self.base_layers
            ],
            head_layers=[
                HeadLayer(head.weights, head.bias, head.activation)
                for head in self.head_layers
            ],
            loss_kind=self.loss_kind,
            version=self.version,
        )


@dataclass(frozen=True, eq=False)
class NetworkCache:
    version: int
    mask_mode: MaskMode
    masks: dict[str, np.ndarray]
    base_caches: list[LayerCache]
    head_caches: list[LayerCache]
    grad_predictions: np.ndarray


@dataclass(frozen=True, eq=False)
class ForwardResult:
    predictions: np.ndarray
    loss: float
    cache: NetworkCache


@dataclass(frozen=True, eq=False)
class Gradients:
    """
    Gradients of the mean batch loss.

    ``theta`` holds the dual-temperature gradients of the mask logits,
    ``mask`` the gradients with respect to the mask values themselves,
    ``effective`` the gradients with respect to the masked tensors w0 * m, and
    ``head`` the exact (weights, bias) gradients of each head layer.
    """

    theta: dict[str, np.ndarray]
    mask: dict[str, np.ndarray]
    effective: dict[str, np.ndarray]
    head: HeadParams = field(default_factory=list)


def _mask_values(
    net: MaskedNetwork,
    mask_mode: MaskMode,
    mask: Optional[BinaryMask],
    mask_values: Optional[Mapping[str, np.ndarray]],
) -> dict[str, np.ndarray]:
    if mask_values is not None:
        return {
            name: np.asarray(mask_values[name], np.float64) for name in net.logits()
        }
    if mask is not None:
        return {name: mask.array(name).astype(np.float64) for name in net.logits()}
    if mask_mode == MaskMode.HARD:
        return {name: hard_mask(entry) for name, entry in net.logits().items()}
    return {
        name: soft_mask(entry, MaskSide.FORWARD_T_LARGE)
        for name, entry in net.logits().items()
    }


def loss_and_grad(
    predictions: np.ndarray,
    targets: np.ndarray,
    loss_kind: LossKind,
) -> tuple[float, np.ndarray]:
    """
    Mean over the batch of G(y_hat, y), and its gradient w.r.t. the predictions.

    Squared error sums over output units; cross entropy reads the predictions
    as unnormalised class scores and the targets as class indices.
    """
    n = predictions.shape[0]
    if not np.all(np.isfinite(predictions)):
        raise NumericError("Network produced non-finite predictions")
    if loss_kind == LossKind.SQUARED_ERROR:
        residual = predictions - targets.reshape(predictions.shape)
        loss = float(np.sum(residual**2) / n)
        return loss, 2.0 * residual / n
    labels = targets.reshape(-1).astype(np.int64)
    classes = predictions.shape[1]
    if labels.shape[0] != n or np.any(labels < 0) or np.any(labels >= classes):
        raise DimensionError(
            f"Class labels must be indices in [0, {classes}) for {n} rows"
        )
    log_probs = log_softmax(predictions, axis=1)
    rows = np.arange(n)
    loss = float(-np.mean(log_probs[rows, labels]))
    if not np.isfinite(loss):
        raise NumericError("Cross-entropy loss is not finite")
    grad = softmax(predictions, axis=1)
    grad[rows, labels] -= 1.0
    return loss, grad / n


def forward(
    net: MaskedNetwork,
    batch: Batch,
    mask_mode: MaskMode = MaskMode.SOFT,
    mask: Optional[BinaryMask] = None,
    mask_values: Optional[Mapping[str, np.ndarray]] = None,
) -> ForwardResult:
    """
    Run the network on a batch and compute the mean loss.

    Args:
        net: Network to evaluate
        batch: Inputs and targets
        mask_mode: SOFT uses sigmoid(t_large * theta), HARD uses 1[theta > 0]
        mask: Optional fixed binary mask used instead of the logits
        mask_values: Optional explicit mask values in [0, 1] per tensor,
            used instead of both the logits and ``mask``

    Returns:
        ForwardResult with predictions, loss and the cache for ``backward``
    """
    if batch.inputs.shape[1] != net.input_dim:
        raise DimensionError(
            f"Batch width {batch.inputs.shape[1]} does not match network input "
            f"width {net.input_dim}"
        )
    mask_mode = MaskMode(mask_mode)
    masks = _mask_values(net, mask_mode, mask, mask_values)

    activations = batch.inputs
    base_caches = []
    for layer in net.base_layers:
        weights = layer.w0 * masks[layer.name + WEIGHT_SUFFIX]
        bias = layer.bias0
        if layer.bias_logits is not None:
            bias = layer.bias0 * masks[layer.name + BIAS_SUFFIX]
        activations, cache = layer_forward(activations, weights, bias, layer.activation)
        base_caches.append(cache)

    head_caches = []
    for head in net.head_layers:
        activations, cache = layer_forward(
            activations, head.weights, head.bias, head.activation
        )
        head_caches.append(cache)

    loss, grad_predictions = loss_and_grad(activations, batch.targets, net.loss_kind)
    return ForwardResult(
        predictions=activations,
        loss=loss,
        cache=NetworkCache(
            version=net.version,
            mask_mode=mask_mode,
            masks=masks,
            base_caches=base_caches,
            head_caches=head_caches,
            grad_predictions=grad_predictions,
        ),
    )


def backward(
    net: MaskedNetwork,
    cache: NetworkCache,
    batch: Optional[Batch] = None,
) -> Gradients:
    """
    Backpropagate the cached loss.

    The mask-logit gradient routes dL/d(w0 * m) * w0 through
    ``theta_gradient``, so it uses the t_small derivative while the forward
    pass used t_large. Head gradients are exact.

    Raises:
        StaleCacheError: If the network changed since the forward pass or the
            batch does not match the cache
    """
    if cache.version != net.version:
        raise StaleCacheError(
            f"Cache from network version {cache.version} used with version "
            f"{net.version}"
        )
    if batch is not None and len(batch) != cache.grad_predictions.shape[0]:
        raise StaleCacheError(
            f"Batch of {len(batch)} rows does not match cached forward pass of "
            f"{cache.grad_predictions.shape[0]} rows"
        )

    upstream = cache.grad_predictions
    head_grads: HeadParams = []
    for layer_cache in reversed(cache.head_caches):
        upstream, grad_weights, grad_bias = layer_backward(layer_cache, upstream)
        head_grads.append((grad_weights, grad_bias))
    head_grads.reverse()

    logits = net.logits()
    theta_grads: dict[str, np.ndarray] = {}
    mask_grads: dict[str, np.ndarray] = {}
    effective_grads: dict[str, np.ndarray] = {}
    layers = zip(reversed(net.base_layers), reversed(cache.base_caches))
    for layer, layer_cache in layers:
        upstream, grad_weights, grad_bias = layer_backward(layer_cache, upstream)
        parts = [(layer.name + WEIGHT_SUFFIX, layer.w0, grad_weights)]
        if layer.bias_logits is not None:
            parts.append((layer.name + BIAS_SUFFIX, layer.bias0, grad_bias))
        else:
            effective_grads[layer.name + BIAS_SUFFIX] = grad_bias
        for name, frozen, grad_effective in parts:
            grad_mask = grad_effective * frozen
            effective_grads[name] = grad_effective
            mask_grads[name] = grad_mask
            theta_grads[name] = theta_gradient(grad_mask, logits[name])

    return Gradients(
        theta=theta_grads,
        mask=mask_grads,
        effective=effective_grads,
        head=head_grads,
    )


@dataclass(frozen=True)
class Evaluation:
    loss: float
    task_metric: float
    metric_name: str
    metric_defined: bool = True


def spearman_rho(predictions: np.ndarray, targets: np.ndarray) -> Optional[float]:
    """Average-rank Spearman correlation, or None when either side is constant."""
    predictions = np.asarray(predictions, dtype=np.float64).reshape(-1)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    if np.ptp(predictions) == 0.0 or np.ptp(targets) == 0.0:
        return None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rho = spearmanr(predictions, targets).statistic
    return float(rho) if np.isfinite(rho) else None


def evaluate(
    net: MaskedNetwork,
    dataset: Batch,
    mask: Optional[BinaryMask] = None,
) -> Evaluation:
    """
    Hard-mask evaluation.

    Classification reports accuracy; regression reports Spearman's rho on the
    first output. A constant predictor leaves rho undefined, which is flagged
    through ``metric_defined`` with ``task_metric`` set to NaN.

    Raises:
        EmptyDatasetError: If the dataset has no rows
    """
    if len(dataset) == 0:
        raise EmptyDatasetError("Cannot evaluate on an empty dataset")
    result = forward(net, dataset, MaskMode.HARD, mask=mask)
    if net.loss_kind == LossKind.CROSS_ENTROPY:
        predicted = np.argmax(result.predictions, axis=1)
        labels = dataset.targets.reshape(-1).astype(np.int64)
        accuracy = float(np.mean(predicted == labels))
        return Evaluation(result.loss, accuracy, "accuracy")

    targets = dataset.targets.reshape(len(dataset), -1)
    rho = spearman_rho(result.predictions[:, 0], targets[:, 0])
    if rho is None:
        logger.warning("Spearman correlation undefined for a constant predictor")
        return Evaluation(result.loss, float("nan"), "spearman", metric_defined=False)
    return Evaluation(result.loss, rho, "spearman")


def chance_metric(dataset: Batch, loss_kind: LossKind) -> float:
    """Metric of an uninformed predictor: majority-class rate, or zero rho."""
    if LossKind(loss_kind) == LossKind.CROSS_ENTROPY:
        _, counts = np.unique(dataset.targets.astype(np.int64), return_counts=True)
        return float(counts.max() / counts.sum())
    return 0.0


def dense_init(
    rng: np.random.Generator,
    fan_in: int,
    fan_out: int,
) -> tuple[np.ndarray, np.ndarray]:
    """He-normal weights and zero bias."""
    weights = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
    return weights, np.zeros(fan_out)


def build_head(
    rng: np.random.Generator,
    input_dim: int,
    output_dim: int,
    hidden: bool = True,
) -> list[HeadLayer]:
    """A ReLU hidden layer as wide as its input, then a linear output layer."""
    layers = []
    width = input_dim
    if hidden:
        weights, bias = dense_init(rng, input_dim, input_dim)
        layers.append(HeadLayer(weights, bias, Activation.RELU))
    weights, bias = dense_init(rng, width, output_dim)
    layers.append(HeadLayer(weights, bias, Activation.IDENTITY))
    return layers
