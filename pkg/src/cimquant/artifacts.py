"""Model manifests and datasets on disk.

A model manifest is JSON::

    {"input_shape": [1, 8, 8],
     "layers": [{"type": "conv2d", "name": "conv1", "kernel_size": 3, ...}, ...],
     "params": {"conv1.weight": "conv1.weight.cimt", ...}}

Tensor paths are relative to the manifest. A dataset is a pair of tensor
files (inputs, float-encoded integer labels).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import FormatError
from .nn import LAYER_TYPES, Dataset, ModelGraph
from .tensorio import read_tensor, write_tensor

_TYPE_NAMES = {cls: name for name, cls in LAYER_TYPES.items()}


def save_model(model: ModelGraph, path) -> Path:
    """Write ``path`` (a ``.json`` manifest) and one ``.cimt`` per parameter beside it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    layers = []
    for layer in model.layers:
        d = dataclasses.asdict(layer)
        d["type"] = _TYPE_NAMES[type(layer)]
        layers.append(d)
    files = {}
    for name, value in model.params.items():
        fname = f"{name}.cimt"
        write_tensor(path.parent / fname, value)
        files[name] = fname
    doc = {"input_shape": list(model.input_shape), "layers": layers, "params": files}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def load_model(path) -> ModelGraph:
    """Read a model manifest and its tensors.

    Raises:
        FormatError: the manifest is not valid JSON (with the byte offset) or
            a tensor file is malformed.
        ValueError: the manifest is valid JSON but does not describe a model.
    """
    path = Path(path)
    raw = path.read_bytes()
    try:
        text = raw.decode("utf-8")
        doc = json.loads(text)
    except UnicodeDecodeError as exc:
        raise FormatError("model manifest is not UTF-8", exc.start, str(path)) from exc
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode())
        raise FormatError(f"malformed model manifest: {exc.msg}", offset, str(path)) from exc
    try:
        layers = []
        for d in doc["layers"]:
            d = dict(d)
            cls = LAYER_TYPES[d.pop("type")]
            layers.append(cls(**d))
        files = doc["params"]
        shape = tuple(doc["input_shape"])
    except (KeyError, TypeError) as exc:
        raise ValueError(f"{path}: not a model manifest ({exc!r})") from exc
    params = {name: read_tensor(path.parent / fname).astype(np.float64) for name, fname in files.items()}
    return ModelGraph(layers, params, shape)


def save_dataset(data: Dataset, inputs_path, labels_path) -> None:
    write_tensor(inputs_path, data.inputs)
    write_tensor(labels_path, data.labels.astype(np.float32))


def load_dataset(inputs_path, labels_path, num_classes: int) -> Dataset:
    labels = read_tensor(labels_path)
    if np.any(labels != np.round(labels)):
        raise ValueError(f"{labels_path}: labels must be integers")
    return Dataset(read_tensor(inputs_path).astype(np.float64), labels.astype(np.int64), num_classes)


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
