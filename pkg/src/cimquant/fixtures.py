"""Desk-scale fixtures: Gaussian-blob images, a small trained CNN and a rigged net."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .artifacts import save_dataset, save_model
from .nn import Conv2D, Dataset, Dense, ModelGraph, ReLU

NUM_CLASSES = 4
IMAGE_SIZE = 8
_CENTERS = np.array([[2.0, 2.0], [2.0, 5.0], [5.0, 2.0], [5.0, 5.0]])


def make_blobs(n: int, seed: int = 0, noise: float = 0.25, jitter: float = 0.7) -> Dataset:
    """Single-channel 8x8 images, each a Gaussian bump near its class's center."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % NUM_CLASSES
    rng.shuffle(labels)
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE]
    centers = _CENTERS[labels] + rng.normal(0.0, jitter, size=(n, 2))
    width = rng.uniform(1.0, 1.8, size=n)
    d2 = (yy[None] - centers[:, 0, None, None]) ** 2 + (xx[None] - centers[:, 1, None, None]) ** 2
    images = np.exp(-d2 / (2 * width[:, None, None] ** 2)) + rng.normal(0.0, noise, size=(n, IMAGE_SIZE, IMAGE_SIZE))
    return Dataset(images[:, None].astype(np.float32).astype(np.float64), labels, NUM_CLASSES)


def toy_cnn(seed: int = 0, conv1_out: int = 3, conv2_out: int = 4) -> ModelGraph:
    """Two 3x3 convs and a dense head; 63 strips with the default widths."""
    rng = np.random.default_rng(seed)
    layers = [
        Conv2D("conv1", 3, 1, conv1_out, stride=1, pad=1),
        ReLU("relu1"),
        Conv2D("conv2", 3, conv1_out, conv2_out, stride=2, pad=1),
        ReLU("relu2"),
        Dense("fc", conv2_out * 4 * 4, NUM_CLASSES),
    ]
    params = {
        "conv1.weight": rng.normal(0, np.sqrt(2 / 9), size=(3, 3, 1, conv1_out)),
        "conv2.weight": rng.normal(0, np.sqrt(2 / (9 * conv1_out)), size=(3, 3, conv1_out, conv2_out)),
        "fc.weight": rng.normal(0, np.sqrt(1 / (conv2_out * 16)), size=(conv2_out * 16, NUM_CLASSES)),
        "fc.bias": np.zeros(NUM_CLASSES),
    }
    return ModelGraph(layers, params, (1, IMAGE_SIZE, IMAGE_SIZE))


def train_sgd(model: ModelGraph, data: Dataset, epochs: int = 20, lr: float = 0.05, batch: int = 32,
              momentum: float = 0.9, seed: int = 0) -> ModelGraph:
    """Plain minibatch SGD with momentum; returns a new model."""
    rng = np.random.default_rng(seed)
    params = {k: v.copy() for k, v in model.params.items()}
    vel = {k: np.zeros_like(v) for k, v in params.items()}
    for _ in range(epochs):
        order = rng.permutation(data.n)
        for i in range(0, data.n, batch):
            _, grads = model.loss_and_grad(data.subset(order[i : i + batch]), params)
            for k in params:
                vel[k] = momentum * vel[k] - lr * grads[k]
                params[k] += vel[k]
    return model.with_params(params)


def rigged_cnn(seed: int = 0) -> tuple[ModelGraph, tuple[int, int, int, int]]:
    """Untrained 2-conv net whose only route to the logits is one conv2 strip.

    conv2 is zero except ``kernel[1, 1, :, 0]`` and the dense head reads only
    channel 0, so that strip dominates every sensitivity score (about 20x the
    runner-up with the default seed). Rescaling a single strip would not do:
    with ReLU layers the score is invariant to per-layer weight scaling.

    Returns the model and the key of the dominant strip.
    """
    model = toy_cnn(seed)
    params = {k: v.copy() for k, v in model.params.items()}
    params["conv1.weight"] = np.abs(params["conv1.weight"])
    keep = np.abs(params["conv2.weight"][1, 1, :, 0])
    params["conv2.weight"][:] = 0.0
    params["conv2.weight"][1, 1, :, 0] = keep
    params["fc.weight"].reshape(model.layers[2].out_channels, -1, NUM_CLASSES)[1:] = 0.0  # channel-major
    return model.with_params(params), (2, 1, 1, 0)


def float32_roundtrip(model: ModelGraph) -> ModelGraph:
    """Model as it reads back from 32-bit storage."""
    return model.with_params({k: v.astype(np.float32).astype(np.float64) for k, v in model.params.items()})


def write_fixtures(out_dir, seed: int = 0, n_train: int = 512, n_eval: int = 256, epochs: int = 20) -> Path:
    """Write the trained toy CNN, both data splits and a pipeline config.

    Returns the path of the generated ``config.json``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train = make_blobs(n_train, seed)
    evals = make_blobs(n_eval, seed + 1)
    model = train_sgd(toy_cnn(seed), train, epochs=epochs, seed=seed)
    save_model(float32_roundtrip(model), out / "model" / "model.json")
    save_dataset(train, out / "train_inputs.cimt", out / "train_labels.cimt")
    save_dataset(evals, out / "eval_inputs.cimt", out / "eval_labels.cimt")
    config = {
        "model": "model/model.json",
        "num_classes": NUM_CLASSES,
        "calibration": {"inputs": "train_inputs.cimt", "labels": "train_labels.cimt", "samples": 256, "seed": seed},
        "eval": {"inputs": "eval_inputs.cimt", "labels": "eval_labels.cimt"},
        "hutchinson": {"m": 16, "seed": seed},
        "threshold": {"T0": 1.0, "eta": 1.0, "max_iter": 50, "fd_step": 1, "per_layer_alignment": True},
        "hardware": {},
        "simulate": {"cr_points": [0.0, 0.1, 0.5, 0.7, 1.0]},
        "out": "run",
    }
    path = out / "config.json"
    path.write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")
    return path
