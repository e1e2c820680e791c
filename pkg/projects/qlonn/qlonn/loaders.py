# Copyright (c) qlonn Development Team.
# Distributed under the terms of the Modified BSD License.

from __future__ import annotations

import gzip
import hashlib
import json
from dataclasses import dataclass
from functools import lru_cache
from logging import Logger, getLogger
from pathlib import Path
from typing import Any, Sequence

import jsonschema
import numpy as np

from .network import (
    Activation,
    Conv2D,
    Flatten,
    FullyConnected,
    LayerSpec,
    MaxPool,
    NetworkSpec,
    batch_inputs,
)
from .stores import WeightStore, encode_weights
from .utils import (
    DATA_FOLDER_PATH,
    NETWORK_SCHEMA_PATH,
    BadMagic,
    CountMismatch,
    NetworkFileError,
    ShapeMismatch,
    TruncatedFile,
    canonical_json,
)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

SYNTHETIC_IMAGES = DATA_FOLDER_PATH / "synthetic-images-idx3-ubyte"
SYNTHETIC_LABELS = DATA_FOLDER_PATH / "synthetic-labels-idx1-ubyte"

_GZIP_MAGIC = b"\x1f\x8b"


@dataclass(frozen=True, eq=False)
class Dataset:
    """Labeled samples; `images` is (count, ...) with values in [0, 1]."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        if len(self.images) != len(self.labels):
            raise CountMismatch(f"{len(self.images)} images for {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def class_count(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0

    def subset(self, selection: int | slice | Sequence[int]) -> Dataset:
        """The first `selection` samples, or the ones a slice or index list selects."""
        if isinstance(selection, int):
            selection = slice(0, selection)
        return Dataset(self.images[selection], self.labels[selection])

    def as_inputs(self, input_shape: tuple[int, ...]) -> np.ndarray:
        """Every sample laid out as one input batch of a network."""
        sample_size = int(np.prod(self.images.shape[1:]))
        if sample_size != int(np.prod(input_shape)):
            raise ShapeMismatch(
                f"Samples of shape {self.images.shape[1:]} cannot feed input {input_shape}"
            )
        return batch_inputs(input_shape, self.images)


def _read_bytes(path: Path) -> bytes:
    try:
        data = path.read_bytes()
    except OSError as e:
        raise OSError(f"Cannot read {path}: {e}") from e
    if data[:2] == _GZIP_MAGIC:
        try:
            data = gzip.decompress(data)
        except (OSError, EOFError) as e:
            raise TruncatedFile(f"{path} is a damaged gzip stream: {e}") from e
    return data


def parse_idx(data: bytes, magic: int, source: str = "<idx>") -> np.ndarray:
    """
    Parses an unsigned-byte IDX container.

        Parameters:
            data (bytes): File content.
            magic (int): Expected magic number; its low byte is the number of dimensions.
            source (str): Name used in error messages.

        Returns:
            values (ndarray): uint8 array of the declared shape.

        Raises:
            BadMagic: if the magic number differs.
            TruncatedFile: if the header or the values are incomplete.
    """
    if len(data) < 4:
        raise TruncatedFile(f"{source} is too short for an IDX header")
    found = int.from_bytes(data[:4], "big")
    if found != magic:
        raise BadMagic(f"{source} has magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    offset = 4 + 4 * ndim
    if len(data) < offset:
        raise TruncatedFile(f"{source} ends inside its IDX header")
    shape = tuple(int(d) for d in np.frombuffer(data, dtype=">u4", count=ndim, offset=4))
    count = int(np.prod(shape, dtype=np.int64))
    if len(data) < offset + count:
        raise TruncatedFile(
            f"{source} holds {len(data) - offset} values, its header declares {count}"
        )
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=offset).reshape(shape)


def load_mnist_idx(
    images_path: str | Path, labels_path: str | Path, log: Logger | None = None
) -> Dataset:
    """
    Loads MNIST-style IDX images and labels, plain or gzip-compressed.

    Pixels are scaled from [0, 255] to [0, 1].
    """
    log = log or getLogger(__name__)
    images_path, labels_path = Path(images_path), Path(labels_path)
    images = parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, str(images_path))
    labels = parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, str(labels_path))
    if len(images) != len(labels):
        raise CountMismatch(
            f"{images_path} holds {len(images)} images but {labels_path} {len(labels)} labels"
        )
    log.info("Loaded %s samples of shape %s from %s", len(images), images.shape[1:], images_path)
    return Dataset(images.astype(np.float64) / 255.0, labels.astype(np.int64))


def write_idx(path: str | Path, values: np.ndarray) -> None:
    """Writes an unsigned-byte IDX file, gzip-compressed when the name ends with .gz."""
    path = Path(path)
    values = np.asarray(values)
    header = (0x0800 | values.ndim).to_bytes(4, "big") + b"".join(
        int(d).to_bytes(4, "big") for d in values.shape
    )
    data = header + np.ascontiguousarray(values, dtype=np.uint8).tobytes()
    if path.suffix == ".gz":
        data = gzip.compress(data, mtime=0)
    try:
        path.write_bytes(data)
    except OSError as e:
        raise OSError(f"Cannot write {path}: {e}") from e


def load_synthetic() -> Dataset:
    """The vendored two-class 4x4 dataset (bright left columns: 0, bright right columns: 1)."""
    return load_mnist_idx(SYNTHETIC_IMAGES, SYNTHETIC_LABELS)


@lru_cache(maxsize=1)
def _network_schema() -> dict[str, Any]:
    return json.loads(NETWORK_SCHEMA_PATH.read_text(encoding="utf-8"))


def network_document(net: NetworkSpec) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    """Returns the NetworkFile document of a network and the tensors it refers to."""
    layers: list[dict[str, Any]] = []
    tensors: dict[str, np.ndarray] = {}
    for index, layer in enumerate(net.layers):
        entry: dict[str, Any] = {"kind": layer.kind}
        if isinstance(layer, (FullyConnected, Conv2D)):
            weights = layer.weights if isinstance(layer, FullyConnected) else layer.kernel
            entry["dims"] = list(weights.shape)
            if isinstance(layer, Conv2D):
                entry["stride"] = list(layer.strides)
            entry["activation"] = layer.activation.value
            entry["weight_ref"] = f"layer{index}.weight"
            tensors[entry["weight_ref"]] = weights
            if layer.bias is not None:
                entry["bias_ref"] = f"layer{index}.bias"
                tensors[entry["bias_ref"]] = layer.bias
        elif isinstance(layer, MaxPool):
            entry["dims"] = list(layer.window)
            entry["stride"] = list(layer.strides)
        layers.append(entry)
    document = {
        "input_shape": list(net.input_shape),
        "class_count": net.class_count,
        "layers": layers,
    }
    return document, tensors


def _tensor(tensors: dict[str, np.ndarray], ref: str, shape: Sequence[int]) -> np.ndarray:
    if ref not in tensors:
        raise NetworkFileError(f"Weight {ref!r} is missing from the weight blob")
    tensor = tensors[ref]
    if tuple(tensor.shape) != tuple(shape):
        raise NetworkFileError(
            f"Weight {ref!r} has shape {tuple(tensor.shape)}, the network declares {tuple(shape)}"
        )
    return tensor


def network_from_document(document: dict[str, Any], tensors: dict[str, np.ndarray]) -> NetworkSpec:
    """Builds a network from a NetworkFile document and its weight tensors."""
    try:
        jsonschema.validate(document, _network_schema())
    except jsonschema.ValidationError as e:
        raise NetworkFileError(f"Invalid network file: {e.message}") from e

    layers: list[LayerSpec] = []
    for entry in document["layers"]:
        kind = entry["kind"]
        if kind in ("fc", "conv"):
            dims = entry["dims"]
            weights = _tensor(tensors, entry["weight_ref"], dims)
            bias = None
            if "bias_ref" in entry:
                bias = _tensor(tensors, entry["bias_ref"], (dims[0] if kind == "fc" else dims[2],))
            activation = Activation(entry["activation"])
            if kind == "fc":
                layers.append(FullyConnected(weights, activation, bias))
            else:
                layers.append(Conv2D(weights, tuple(entry["stride"]), activation, bias))
        elif kind == "maxpool":
            layers.append(MaxPool(tuple(entry["dims"]), tuple(entry["stride"])))
        else:
            layers.append(Flatten())
    try:
        return NetworkSpec(tuple(layers), tuple(document["input_shape"]), document["class_count"])
    except ShapeMismatch as e:
        raise NetworkFileError(f"Inconsistent network file: {e}") from e


def load_network(
    network_path: str | Path, weights_path: str | Path, store: WeightStore | None = None
) -> NetworkSpec:
    network_path = Path(network_path)
    try:
        document = json.loads(network_path.read_text(encoding="utf-8"))
    except OSError as e:
        raise OSError(f"Cannot read {network_path}: {e}") from e
    except json.JSONDecodeError as e:
        raise NetworkFileError(f"{network_path} is not valid JSON: {e}") from e
    store = store or WeightStore()
    return network_from_document(document, store.read(weights_path))


def save_network(
    net: NetworkSpec,
    network_path: str | Path,
    weights_path: str | Path,
    store: WeightStore | None = None,
) -> None:
    document, tensors = network_document(net)
    network_path = Path(network_path)
    try:
        network_path.write_text(json.dumps(document, indent=2) + "\n", encoding="utf-8")
    except OSError as e:
        raise OSError(f"Cannot write {network_path}: {e}") from e
    (store or WeightStore()).write(weights_path, tensors)


def network_hash(net: NetworkSpec) -> str:
    """First 16 hex digits of the SHA-256 of the network document and its float64 weights."""
    document, tensors = network_document(net)
    digest = hashlib.sha256(canonical_json(document).encode("utf-8"))
    digest.update(encode_weights(tensors))
    return digest.hexdigest()[:16]


CHECKPOINT_NETWORK = "network.json"
CHECKPOINT_WEIGHTS = "weights.bin"
CHECKPOINT_METADATA = "checkpoint.json"


def save_checkpoint(
    directory: str | Path,
    net: NetworkSpec,
    metadata: dict[str, Any],
    store: WeightStore | None = None,
) -> Path:
    """Writes the network file, its weight blob and a metadata record (epoch, seed, lr)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_network(net, directory / CHECKPOINT_NETWORK, directory / CHECKPOINT_WEIGHTS, store)
    (directory / CHECKPOINT_METADATA).write_text(
        json.dumps(metadata, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return directory


def load_checkpoint(
    directory: str | Path, store: WeightStore | None = None
) -> tuple[NetworkSpec, dict[str, Any]]:
    directory = Path(directory)
    net = load_network(directory / CHECKPOINT_NETWORK, directory / CHECKPOINT_WEIGHTS, store)
    metadata = json.loads((directory / CHECKPOINT_METADATA).read_text(encoding="utf-8"))
    return net, metadata
