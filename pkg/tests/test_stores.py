# Copyright (c) qlonn Development Team.
# Distributed under the terms of the Modified BSD License.

from __future__ import annotations

import struct

import numpy as np
import pytest
from qlonn.stores import MAGIC_FLOAT32, MAGIC_FLOAT64, WeightStore, decode_weights, encode_weights
from qlonn.utils import BadMagic, TruncatedFile
from traitlets import TraitError


def test_blob_layout():
    data = encode_weights({"w": np.array([[1.0, 2.0]])})

    assert data[:5] == MAGIC_FLOAT64
    assert struct.unpack("<Q", data[5:13]) == (1,)
    assert data[13:14] == b"w"
    assert struct.unpack("<3Q", data[14:38]) == (2, 1, 2)
    assert struct.unpack("<2d", data[38:]) == (1.0, 2.0)


def test_decoding_then_encoding_is_byte_exact(qlonn_rng):
    tensors = {
        "layer0.weight": qlonn_rng.normal(size=(3, 4)),
        "layer0.bias": qlonn_rng.normal(size=3),
        "kernel": qlonn_rng.normal(size=(2, 2, 3, 1)),
        "scalar": np.array(2.5),
    }
    data = encode_weights(tensors)

    decoded, precision = decode_weights(data)

    assert precision == "float64"
    assert list(decoded) == list(tensors)
    assert encode_weights(decoded) == data
    for name, tensor in tensors.items():
        np.testing.assert_array_equal(decoded[name], tensor)


def test_float32_blobs_are_smaller_and_decode_to_double(qlonn_rng):
    tensors = {"w": qlonn_rng.normal(size=(10, 10))}

    single = encode_weights(tensors, "float32")
    decoded, precision = decode_weights(single)

    assert single[:5] == MAGIC_FLOAT32
    assert len(single) < len(encode_weights(tensors))
    assert precision == "float32"
    assert decoded["w"].dtype == np.float64
    np.testing.assert_allclose(decoded["w"], tensors["w"], rtol=1e-6)


def test_empty_blob():
    assert decode_weights(MAGIC_FLOAT64) == ({}, "float64")


def test_bad_magic():
    with pytest.raises(BadMagic):
        decode_weights(b"ONNX1" + bytes(8))


def test_truncated_blob():
    data = encode_weights({"w": np.ones((2, 2))})

    for size in (7, 20, len(data) - 1):
        with pytest.raises(TruncatedFile):
            decode_weights(data[:size])


def test_weight_store(tmp_path):
    store = WeightStore(precision="float32")
    store.write(tmp_path / "weights.bin", {"w": np.full((2,), 0.5)})

    np.testing.assert_array_equal(store.read(tmp_path / "weights.bin")["w"], [0.5, 0.5])
    assert (tmp_path / "weights.bin").read_bytes()[:5] == MAGIC_FLOAT32

    with pytest.raises(OSError):
        store.read(tmp_path / "missing.bin")
    with pytest.raises(TraitError):
        WeightStore(precision="float16")
