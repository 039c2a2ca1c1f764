"""
On-disk formats for masks and checkpoints.

Both formats share one little-endian framing:

    magic (4 bytes) | version u16 | tensor count u32
    per tensor: name length u16 | UTF-8 name | rank u8 | dims u64 x rank | payload
    CRC-32 u32 of every preceding byte

A mask file ("ABPM") stores each tensor as packed bits, eight entries per byte,
entry k in bit k % 8 of byte k // 8, the last byte zero-padded. A checkpoint
file ("ABPC") stores float64 payloads.
"""

import logging
import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from mask_core import BinaryMask, PackedTensor
from model import (
    BaseLayer,
    HeadLayer,
    LossKind,
    MaskedNetwork,
    full_logits,
)
from numeric_core import Activation

logger = logging.getLogger(__name__)

MASK_MAGIC = b"ABPM"
CHECKPOINT_MAGIC = b"ABPC"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<4sHI")
_NAME_LENGTH = struct.Struct("<H")
_RANK = struct.Struct("<B")
_DIM = struct.Struct("<Q")
_CRC = struct.Struct("<I")

_ACTIVATION_CODES = {Activation.IDENTITY: 0.0, Activation.RELU: 1.0}
_LOSS_CODES = {LossKind.SQUARED_ERROR: 0.0, LossKind.CROSS_ENTROPY: 1.0}


class MaskFileError(ValueError):
    """Base class for malformed mask or checkpoint files."""


class BadMagicError(MaskFileError):
    pass


class UnsupportedVersionError(MaskFileError):
    pass


class TruncatedFileError(MaskFileError):
    pass


class ChecksumMismatchError(MaskFileError):
    pass


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, count: int) -> bytes:
        end = self.offset + count
        if end > len(self.data):
            raise TruncatedFileError(
                f"Need {count} bytes at offset {self.offset}, file has "
                f"{len(self.data)}"
            )
        chunk = self.data[self.offset : end]
        self.offset = end
        return chunk

    def unpack(self, layout: struct.Struct) -> tuple:
        return layout.unpack(self.take(layout.size))


def _encode(
    magic: bytes,
    tensors: Mapping[str, tuple[tuple[int, ...], bytes]],
) -> bytes:
    parts = [_HEADER.pack(magic, FORMAT_VERSION, len(tensors))]
    for name, (shape, payload) in tensors.items():
        encoded = name.encode("utf-8")
        parts.append(_NAME_LENGTH.pack(len(encoded)))
        parts.append(encoded)
        parts.append(_RANK.pack(len(shape)))
        parts.extend(_DIM.pack(dim) for dim in shape)
        parts.append(payload)
    body = b"".join(parts)
    return body + _CRC.pack(zlib.crc32(body))


def _decode(
    data: bytes,
    magic: bytes,
    payload_size: Callable[[int], int],
) -> dict[str, tuple[tuple[int, ...], bytes]]:
    """
    Parse a framed file.

    Magic and version are checked first, then the checksum, and only then are
    the length fields trusted. A corrupted byte anywhere past the version is
    therefore a checksum error; truncation is reported when the file cannot
    hold a header and trailer, or when checksummed records claim more bytes
    than the body holds.
    """
    if len(data) < _HEADER.size:
        raise TruncatedFileError(
            f"File has {len(data)} bytes, the header alone needs {_HEADER.size}"
        )
    found_magic, version, count = _HEADER.unpack_from(data)
    if found_magic != magic:
        raise BadMagicError(f"Expected magic {magic!r}, found {found_magic!r}")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"Unsupported format version {version}, expected {FORMAT_VERSION}"
        )
    if len(data) < _HEADER.size + _CRC.size:
        raise TruncatedFileError(f"File has {len(data)} bytes, no room for a checksum")

    body = data[: -_CRC.size]
    (stored_crc,) = _CRC.unpack(data[-_CRC.size :])
    actual_crc = zlib.crc32(body)
    if stored_crc != actual_crc:
        raise ChecksumMismatchError(
            f"Checksum mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}"
        )

    reader = _Reader(body)
    reader.take(_HEADER.size)
    tensors: dict[str, tuple[tuple[int, ...], bytes]] = {}
    for _ in range(count):
        (name_length,) = reader.unpack(_NAME_LENGTH)
        try:
            name = reader.take(name_length).decode("utf-8")
        except UnicodeDecodeError as e:
            raise MaskFileError(f"Tensor name is not valid UTF-8: {e}")
        (rank,) = reader.unpack(_RANK)
        shape = tuple(reader.unpack(_DIM)[0] for _ in range(rank))
        size = math.prod(shape)
        tensors[name] = (shape, reader.take(payload_size(size)))

    if reader.offset != len(body):
        raise MaskFileError(f"{len(body) - reader.offset} unexpected trailing bytes")
    return tensors


def encode_mask(mask: BinaryMask) -> bytes:
    return _encode(
        MASK_MAGIC,
        {name: (packed.shape, packed.bits) for name, packed in mask.tensors.items()},
    )


def decode_mask(data: bytes) -> BinaryMask:
    """
    Raises:
        BadMagicError, UnsupportedVersionError, TruncatedFileError,
        ChecksumMismatchError: On a malformed file
    """
    tensors = _decode(data, MASK_MAGIC, lambda size: (size + 7) // 8)
    return BinaryMask(
        {name: PackedTensor(shape, bits) for name, (shape, bits) in tensors.items()}
    )


def save_mask(mask: BinaryMask, path: Path) -> int:
    """Write the mask file and return its size in bytes."""
    data = encode_mask(mask)
    Path(path).write_bytes(data)
    logger.info(f"Saved mask with {mask.total_bits} entries to {path}")
    return len(data)


def load_mask(path: Path) -> BinaryMask:
    return decode_mask(Path(path).read_bytes())


def mask_file_size(shapes: Mapping[str, tuple[int, ...]]) -> int:
    """Exact size of the mask file for tensors of the given names and shapes."""
    size = _HEADER.size + _CRC.size
    for name, shape in shapes.items():
        size += _NAME_LENGTH.size + len(name.encode("utf-8")) + _RANK.size
        size += _DIM.size * len(shape) + (math.prod(shape) + 7) // 8
    return size


def encode_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    return _encode(
        CHECKPOINT_MAGIC,
        {
            name: (
                tuple(int(d) for d in np.shape(values)),
                np.asarray(values, dtype="<f8").tobytes(),
            )
            for name, values in tensors.items()
        },
    )


def decode_tensors(data: bytes) -> dict[str, np.ndarray]:
    tensors = _decode(data, CHECKPOINT_MAGIC, lambda size: 8 * size)
    return {
        name: np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
        for name, (shape, payload) in tensors.items()
    }


def network_to_tensors(net: MaskedNetwork) -> dict[str, np.ndarray]:
    """
    Flatten the frozen base, head and architecture into named float64 tensors.

    Mask logits are not part of a checkpoint; masks travel as mask files.
    """
    tensors: dict[str, np.ndarray] = {
        "meta/loss_kind": np.array([_LOSS_CODES[net.loss_kind]]),
        "meta/base_activations": np.array(
            [_ACTIVATION_CODES[layer.activation] for layer in net.base_layers]
        ),
        "meta/base_masked_bias": np.array(
            [float(layer.bias_logits is not None) for layer in net.base_layers]
        ),
        "meta/head_activations": np.array(
            [_ACTIVATION_CODES[head.activation] for head in net.head_layers]
        ),
    }
    for layer in net.base_layers:
        tensors[f"base/{layer.name}/w0"] = layer.w0
        tensors[f"base/{layer.name}/bias0"] = layer.bias0
    for index, head in enumerate(net.head_layers):
        tensors[f"head/{index}/weights"] = head.weights
        tensors[f"head/{index}/bias"] = head.bias
    return tensors


def _decode_code(code: float, table: Mapping) -> object:
    for value, stored in table.items():
        if stored == code:
            return value
    raise MaskFileError(f"Unknown architecture code {code}")


def network_from_tensors(tensors: Mapping[str, np.ndarray]) -> MaskedNetwork:
    try:
        loss_kind = _decode_code(float(tensors["meta/loss_kind"][0]), _LOSS_CODES)
        base_activations = tensors["meta/base_activations"]
        masked_bias = tensors["meta/base_masked_bias"]
        head_activations = tensors["meta/head_activations"]
    except KeyError as e:
        raise MaskFileError(f"Checkpoint is missing architecture tensor {e}")

    base_names = [
        name.split("/")[1]
        for name in tensors
        if name.startswith("base/") and name.endswith("/w0")
    ]
    if len(base_names) != len(base_activations):
        raise MaskFileError(
            f"Checkpoint lists {len(base_activations)} base layers but stores "
            f"{len(base_names)}"
        )
    base_layers = []
    for layer_name, code, bias_flag in zip(base_names, base_activations, masked_bias):
        bias0 = tensors[f"base/{layer_name}/bias0"]
        base_layers.append(
            BaseLayer(
                name=layer_name,
                w0=tensors[f"base/{layer_name}/w0"],
                bias0=bias0,
                activation=_decode_code(float(code), _ACTIVATION_CODES),
                bias_logits=full_logits(bias0.shape) if bias_flag else None,
            )
        )
    head_layers = [
        HeadLayer(
            tensors[f"head/{index}/weights"],
            tensors[f"head/{index}/bias"],
            _decode_code(float(code), _ACTIVATION_CODES),
        )
        for index, code in enumerate(head_activations)
    ]
    return MaskedNetwork(base_layers, head_layers, loss_kind)


def save_checkpoint(net: MaskedNetwork, path: Path) -> int:
    data = encode_tensors(network_to_tensors(net))
    Path(path).write_bytes(data)
    logger.info(f"Saved checkpoint with {len(net.base_layers)} base layers to {path}")
    return len(data)


def load_checkpoint(path: Path) -> MaskedNetwork:
    return network_from_tensors(decode_tensors(Path(path).read_bytes()))


@dataclass(frozen=True)
class ArtifactSizes:
    weight_bytes: int
    mask_bytes: int

    @property
    def ratio(self) -> float:
        return self.weight_bytes / self.mask_bytes


def artifact_size_report(net: MaskedNetwork) -> ArtifactSizes:
    """
    Bytes needed to ship the maskable tensors as float64 weights versus as a
    bit-packed mask, both in their file formats.
    """
    frozen = net.frozen_tensors()
    return ArtifactSizes(
        weight_bytes=len(encode_tensors(frozen)),
        mask_bytes=mask_file_size({name: t.shape for name, t in frozen.items()}),
    )
