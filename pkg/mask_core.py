"""
Mask logits, their dual-temperature sigmoid relaxation, and binary masks.

A mask over a frozen weight tensor w0 is parameterised by real logits theta.
The forward pass uses the sharp relaxation sigmoid(t_large * theta); the
gradient with respect to theta uses the flatter sigmoid(t_small * theta) so it
does not vanish. The final mask keeps entry i iff theta_i > 0.
"""

from dataclasses import dataclass, field, replace
from enum import StrEnum
from typing import Mapping, Optional, Union

import numpy as np

from numeric_core import DimensionError, ParameterError, sigmoid, sigmoid_grad

DEFAULT_T_LARGE = 100.0
DEFAULT_T_SMALL = 1.0
# No-recovery clamp; only the sign matters.
EPS_CLAMP = 1e-6
DEFAULT_TENSOR_NAME = "mask"


class MaskSide(StrEnum):
    FORWARD_T_LARGE = "forward_t_large"
    BACKWARD_T_SMALL = "backward_t_small"


class MaskMode(StrEnum):
    SOFT = "soft"
    HARD = "hard"


class PenaltyMode(StrEnum):
    CONSTANT = "constant"
    LINEAR_RAMP = "linear_ramp"


@dataclass(frozen=True, eq=False)
class MaskLogits:
    """
    Real-valued surrogate for a binary mask.

    ``ever_negative`` marks entries that have been pruned (theta <= 0) at any
    observed step, including the initial one. It only ever gains entries.
    """

    theta: np.ndarray
    t_large: float = DEFAULT_T_LARGE
    t_small: float = DEFAULT_T_SMALL
    ever_negative: Optional[np.ndarray] = None

    def __post_init__(self):
        theta = np.ascontiguousarray(self.theta, dtype=np.float64)
        if not self.t_large >= self.t_small > 0:
            raise ParameterError(
                f"Temperatures must satisfy t_large >= t_small > 0, got "
                f"t_large={self.t_large}, t_small={self.t_small}"
            )
        if not np.all(np.isfinite(theta)):
            raise ParameterError("Mask logits contain non-finite values")
        ever_negative = self.ever_negative
        if ever_negative is None:
            ever_negative = theta <= 0.0
        elif ever_negative.shape != theta.shape:
            raise DimensionError(
                f"ever_negative shape {ever_negative.shape} does not match "
                f"theta shape {theta.shape}"
            )
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "ever_negative", np.asarray(ever_negative, bool))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.theta.shape


@dataclass(frozen=True)
class SparsityPenaltySchedule:
    """gamma_i for the sparsity term; a ramp grows linearly to ``gamma``."""

    gamma: float = 0.0
    mode: PenaltyMode = PenaltyMode.CONSTANT
    ramp_steps: int = 1000

    def __post_init__(self):
        if self.gamma < 0:
            raise ParameterError(f"gamma must be non-negative, got {self.gamma}")
        if self.ramp_steps < 1:
            raise ParameterError(f"ramp_steps must be >= 1, got {self.ramp_steps}")
        object.__setattr__(self, "mode", PenaltyMode(self.mode))

    def gamma_at(self, step: int) -> float:
        if self.mode == PenaltyMode.LINEAR_RAMP:
            return self.gamma * min(1.0, step / self.ramp_steps)
        return self.gamma


@dataclass(frozen=True)
class PackedTensor:
    shape: tuple[int, ...]
    bits: bytes

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    def to_array(self) -> np.ndarray:
        flat = np.unpackbits(
            np.frombuffer(self.bits, dtype=np.uint8),
            count=self.size,
            bitorder="little",
        )
        return flat.astype(bool).reshape(self.shape)

    def popcount(self) -> int:
        return int(np.count_nonzero(self.to_array()))


def pack_bits(values: np.ndarray) -> PackedTensor:
    values = np.asarray(values)
    packed = np.packbits(values.reshape(-1).astype(np.uint8), bitorder="little")
    shape = tuple(int(d) for d in values.shape)
    return PackedTensor(shape=shape, bits=packed.tobytes())


@dataclass(frozen=True)
class BinaryMask:
    """Named, bit-packed {0,1} tensors. Entry k sits in bit k % 8 of byte k // 8."""

    tensors: dict[str, PackedTensor] = field(default_factory=dict)

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> "BinaryMask":
        return cls({name: pack_bits(np.asarray(a) != 0) for name, a in arrays.items()})

    @classmethod
    def ones(cls, shapes: Mapping[str, tuple[int, ...]]) -> "BinaryMask":
        return cls.from_arrays({n: np.ones(s, dtype=bool) for n, s in shapes.items()})

    @property
    def names(self) -> list[str]:
        return list(self.tensors)

    def array(self, name: str) -> np.ndarray:
        return self.tensors[name].to_array()

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: packed.to_array() for name, packed in self.tensors.items()}

    def shape(self, name: str) -> tuple[int, ...]:
        return self.tensors[name].shape

    @property
    def total_bits(self) -> int:
        return sum(p.size for p in self.tensors.values())

    @property
    def zero_count(self) -> int:
        return sum(p.size - p.popcount() for p in self.tensors.values())

    def tensor_sparsity(self, name: str) -> float:
        packed = self.tensors[name]
        if packed.size == 0:
            return 0.0
        return (packed.size - packed.popcount()) / packed.size


LogitsLike = Union[MaskLogits, Mapping[str, MaskLogits]]


def _as_named(logits: LogitsLike) -> Mapping[str, MaskLogits]:
    if isinstance(logits, MaskLogits):
        return {DEFAULT_TENSOR_NAME: logits}
    return logits


def soft_mask(
    logits: MaskLogits,
    which: MaskSide = MaskSide.FORWARD_T_LARGE,
) -> np.ndarray:
    """
    Relaxed mask for the forward pass, or the mask derivative for the backward.

    FORWARD_T_LARGE returns sigmoid(t_large * theta). BACKWARD_T_SMALL returns
    t_small * s * (1 - s) with s = sigmoid(t_small * theta), the factor that
    multiplies the incoming gradient in ``theta_gradient``.
    """
    if MaskSide(which) == MaskSide.FORWARD_T_LARGE:
        return sigmoid(logits.theta, logits.t_large)
    return sigmoid_grad(logits.theta, logits.t_small)


def hard_mask(logits: MaskLogits) -> np.ndarray:
    return (logits.theta > 0.0).astype(np.float64)


def masked_weights(
    w0: np.ndarray,
    logits: MaskLogits,
    mode: MaskMode = MaskMode.SOFT,
) -> np.ndarray:
    """w0 * sigmoid(t_large * theta) in soft mode, w0 * 1[theta > 0] in hard mode."""
    if w0.shape != logits.shape:
        raise DimensionError(
            f"Weight shape {w0.shape} does not match mask shape {logits.shape}"
        )
    if MaskMode(mode) == MaskMode.HARD:
        return w0 * hard_mask(logits)
    return w0 * soft_mask(logits, MaskSide.FORWARD_T_LARGE)


def theta_gradient(
    loss_grad_wrt_soft_mask: np.ndarray,
    logits: MaskLogits,
) -> np.ndarray:
    """Dual-temperature gradient: dL/dm at t_large times dm/dtheta at t_small."""
    if loss_grad_wrt_soft_mask.shape != logits.shape:
        raise DimensionError(
            f"Gradient shape {loss_grad_wrt_soft_mask.shape} does not match "
            f"mask shape {logits.shape}"
        )
    return loss_grad_wrt_soft_mask * soft_mask(logits, MaskSide.BACKWARD_T_SMALL)


def update_theta(
    logits: MaskLogits,
    grad: np.ndarray,
    alpha_i: float,
    gamma_i: float,
    allow_recovery: bool = True,
) -> MaskLogits:
    """
    One regularised SGD step: theta - alpha_i * grad - gamma_i.

    With ``allow_recovery`` off, every entry that has ever been pruned is held
    at or below -EPS_CLAMP so it never turns back on.

    Returns:
        New MaskLogits; the input is left untouched
    """
    if not alpha_i > 0:
        raise ParameterError(f"alpha_i must be positive, got {alpha_i}")
    if gamma_i < 0:
        raise ParameterError(f"gamma_i must be non-negative, got {gamma_i}")
    if grad.shape != logits.shape:
        raise DimensionError(
            f"Gradient shape {grad.shape} does not match mask shape {logits.shape}"
        )
    theta = logits.theta - alpha_i * grad - gamma_i
    ever_negative = logits.ever_negative | (theta <= 0.0)
    if not allow_recovery:
        theta = np.where(ever_negative, np.minimum(theta, -EPS_CLAMP), theta)
    return replace(logits, theta=theta, ever_negative=ever_negative)


def binarize(logits: LogitsLike) -> BinaryMask:
    """Bit i is 1 iff theta_i > 0; theta_i == 0 is pruned."""
    return BinaryMask.from_arrays(
        {name: entry.theta > 0.0 for name, entry in _as_named(logits).items()}
    )


def sparsity(source: Union[LogitsLike, BinaryMask]) -> float:
    """Fraction of pruned entries: theta <= 0 for logits, zero bits for a mask."""
    if isinstance(source, BinaryMask):
        total = source.total_bits
        return source.zero_count / total if total else 0.0
    named = _as_named(source)
    total = sum(entry.theta.size for entry in named.values())
    if total == 0:
        return 0.0
    pruned = sum(int(np.count_nonzero(e.theta <= 0.0)) for e in named.values())
    return pruned / total


@dataclass(frozen=True)
class RecoveryStats:
    recovered_count: int
    recovered_fraction: float


def recovery_stats(logits: LogitsLike) -> RecoveryStats:
    """
    Count surviving entries that were pruned at some earlier step.

    The fraction is taken over currently surviving (theta > 0) entries.
    """
    recovered = 0
    surviving = 0
    for entry in _as_named(logits).values():
        alive = entry.theta > 0.0
        surviving += int(np.count_nonzero(alive))
        recovered += int(np.count_nonzero(alive & entry.ever_negative))
    fraction = recovered / surviving if surviving else 0.0
    return RecoveryStats(recovered_count=recovered, recovered_fraction=fraction)
