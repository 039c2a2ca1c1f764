import struct
import zlib

import numpy as np
import pytest

from mask_core import BinaryMask
from model import LossKind, forward
from serialization import (
    CHECKPOINT_MAGIC,
    BadMagicError,
    ChecksumMismatchError,
    MaskFileError,
    TruncatedFileError,
    UnsupportedVersionError,
    artifact_size_report,
    decode_mask,
    decode_tensors,
    encode_mask,
    encode_tensors,
    load_checkpoint,
    load_mask,
    mask_file_size,
    network_from_tensors,
    network_to_tensors,
    save_checkpoint,
    save_mask,
)


@pytest.fixture
def sample_mask(rng) -> BinaryMask:
    return BinaryMask.from_arrays(
        {
            "layer0.weight": rng.random((7, 5)) < 0.5,
            "layer0.bias": rng.random(5) < 0.5,
            "layer1.weight": rng.random((5, 3)) < 0.5,
        }
    )


def test_mask_round_trip_is_bit_exact(sample_mask, tmp_path):
    """Test that a saved mask loads back unchanged."""
    path = tmp_path / "mask.abpm"

    size = save_mask(sample_mask, path)
    loaded = load_mask(path)

    assert loaded == sample_mask
    assert loaded.names == sample_mask.names
    assert size == path.stat().st_size


def test_mask_file_size_for_one_million_entries(tmp_path):
    """Test the format arithmetic for a single 10**6-entry tensor."""
    mask = BinaryMask.from_arrays({"w": np.ones(10**6, dtype=bool)})

    assert mask_file_size({"w": (10**6,)}) == 125026
    assert save_mask(mask, tmp_path / "big.abpm") == 125026


def test_mask_file_size_matches_encoding(sample_mask):
    """Test that the size formula agrees with the encoder."""
    shapes = {name: sample_mask.shape(name) for name in sample_mask.names}
    assert mask_file_size(shapes) == len(encode_mask(sample_mask))


def test_encode_mask_layout():
    """Test the header, record and trailing checksum bytes."""
    data = encode_mask(BinaryMask.from_arrays({"m": np.array([1, 0, 1], bool)}))

    assert data[:4] == b"ABPM"
    assert struct.unpack("<HI", data[4:10]) == (1, 1)
    assert struct.unpack("<H", data[10:12]) == (1,)
    assert data[12:13] == b"m"
    assert data[13] == 1
    assert struct.unpack("<Q", data[14:22]) == (3,)
    assert data[22] == 0b101
    assert len(data) == 27


def test_decode_rejects_bad_magic(sample_mask):
    """Test that a wrong magic is reported before anything else."""
    data = b"XXXX" + encode_mask(sample_mask)[4:]
    with pytest.raises(BadMagicError):
        decode_mask(data)


def test_decode_rejects_unsupported_version(sample_mask):
    """Test that an unknown version is rejected ahead of the checksum."""
    data = bytearray(encode_mask(sample_mask))
    data[4:6] = struct.pack("<H", 2)
    with pytest.raises(UnsupportedVersionError):
        decode_mask(bytes(data))


def _resign(body):
    return bytes(body) + struct.pack("<I", zlib.crc32(bytes(body)))


@pytest.mark.parametrize("length", [0, 9, 12])
def test_decode_rejects_file_shorter_than_framing(sample_mask, length):
    """Test that a file without room for header and checksum is truncated."""
    data = encode_mask(sample_mask)
    with pytest.raises(TruncatedFileError):
        decode_mask(data[:length])


def test_decode_rejects_records_past_checksummed_body(sample_mask):
    """Test that a valid checksum over too few records reports truncation."""
    body = bytearray(encode_mask(sample_mask)[:-4])
    body[6:10] = struct.pack("<I", 4)

    with pytest.raises(TruncatedFileError):
        decode_mask(_resign(body))


def test_decode_rejects_cut_off_payload(sample_mask):
    """Test that a file cut inside its records fails the checksum."""
    data = encode_mask(sample_mask)
    with pytest.raises(ChecksumMismatchError):
        decode_mask(data[:20])


def test_decode_rejects_flipped_payload_bit(sample_mask):
    """Test that corruption inside a payload fails the checksum."""
    data = bytearray(encode_mask(sample_mask))
    data[42] ^= 0x01
    with pytest.raises(ChecksumMismatchError):
        decode_mask(bytes(data))


def test_decode_classifies_every_single_bit_flip(sample_mask):
    """Test the error class raised for a flip of each bit of the file."""
    data = encode_mask(sample_mask)
    for bit in range(8 * len(data)):
        corrupted = bytearray(data)
        corrupted[bit // 8] ^= 1 << (bit % 8)
        if bit < 32:
            expected = BadMagicError
        elif bit < 48:
            expected = UnsupportedVersionError
        else:
            expected = ChecksumMismatchError
        with pytest.raises(expected):
            decode_mask(bytes(corrupted))


def test_decode_rejects_trailing_bytes(sample_mask):
    """Test that extra bytes after the checksum are rejected."""
    with pytest.raises(ChecksumMismatchError):
        decode_mask(encode_mask(sample_mask) + b"\x00")


def test_decode_rejects_checksummed_trailing_bytes(sample_mask):
    """Test that bytes between the last record and the checksum are rejected."""
    body = encode_mask(sample_mask)[:-4] + b"\x00"
    with pytest.raises(MaskFileError) as exc_info:
        decode_mask(_resign(body))

    assert "trailing" in str(exc_info.value)


def test_mask_file_errors_are_value_errors():
    """Test that every format error can be caught as ValueError."""
    for error in (
        BadMagicError,
        UnsupportedVersionError,
        TruncatedFileError,
        ChecksumMismatchError,
    ):
        assert issubclass(error, MaskFileError)
        assert issubclass(error, ValueError)


def test_tensor_round_trip_is_bit_exact(rng):
    """Test float64 checkpoint payloads survive unchanged."""
    tensors = {
        "a": rng.normal(size=(3, 4)),
        "b": np.array([np.pi, -0.0, 1e-300]),
        "scalar": np.array(2.5),
    }

    loaded = decode_tensors(encode_tensors(tensors))

    for name, values in tensors.items():
        assert loaded[name].tobytes() == values.tobytes()
        assert loaded[name].shape == values.shape


def test_checkpoint_rejects_mask_file(sample_mask):
    """Test that the two formats are told apart by their magic."""
    with pytest.raises(BadMagicError) as exc_info:
        decode_tensors(encode_mask(sample_mask))

    assert repr(CHECKPOINT_MAGIC) in str(exc_info.value)


def test_checkpoint_round_trip(make_network, make_batch, tmp_path):
    """Test that a saved network reproduces the same predictions."""
    net = make_network(outputs=3, loss_kind=LossKind.CROSS_ENTROPY, mask_bias=True)
    path = tmp_path / "base.abpc"

    save_checkpoint(net, path)
    loaded = load_checkpoint(path)

    assert loaded.loss_kind == LossKind.CROSS_ENTROPY
    assert loaded.mask_shapes() == net.mask_shapes()
    for original, restored in zip(net.base_layers, loaded.base_layers):
        assert restored.name == original.name
        assert restored.activation == original.activation
        assert restored.w0.tobytes() == original.w0.tobytes()
    batch = make_batch(rows=5, classes=3)
    mask = BinaryMask.ones(net.mask_shapes())
    np.testing.assert_array_equal(
        forward(loaded, batch, mask=mask).predictions,
        forward(net, batch, mask=mask).predictions,
    )


def test_network_from_tensors_missing_metadata(make_network):
    """Test that a checkpoint without architecture tensors is rejected."""
    tensors = network_to_tensors(make_network())
    del tensors["meta/loss_kind"]

    with pytest.raises(MaskFileError):
        network_from_tensors(tensors)


def test_artifact_size_report(make_network):
    """Test that masks are far smaller than float64 weights."""
    sizes = artifact_size_report(make_network(widths=(30, 40, 20)))

    shapes = {"layer0.weight": (30, 40), "layer1.weight": (40, 20)}
    assert sizes.mask_bytes == mask_file_size(shapes)
    assert sizes.weight_bytes > sizes.mask_bytes
    assert sizes.ratio > 30
