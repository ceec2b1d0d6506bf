"""Minimal deterministic network engine.

Supports a closed set of layers (``Conv2D``, ``ReLU``, ``Dense``) ending in a
softmax cross-entropy loss. Gradients are computed by explicit per-layer
backward rules; Hessian-vector products by central differences of gradients.

Array conventions: images are ``(batch, channels, height, width)``; conv
kernels are ``(K, K, D, N)`` so that ``kernel[m, n, :, o]`` is the 1x1xD strip
feeding output channel ``o`` from kernel position ``(m, n)``. Dense weights
are ``(in_features, out_features)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import DimensionError, NumericError


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _pad(x: np.ndarray, pad: int, value=0) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=value)


def _window(xp: np.ndarray, m: int, n: int, ho: int, wo: int, stride: int) -> np.ndarray:
    """Input pixels seen by kernel position (m, n) at every output location."""
    return xp[:, :, m : m + stride * (ho - 1) + 1 : stride, n : n + stride * (wo - 1) + 1 : stride]


def conv2d_forward(x, kernel, stride: int = 1, pad: int = 0) -> np.ndarray:
    """2-D cross-correlation by direct summation over kernel positions.

    Each kernel position contributes ``kernel[m, n]`` (a D x N matrix) applied
    to the shifted input window, which is exactly the strip-weight view of a
    convolution.

    Args:
        x: ``(B, D, H, W)`` or ``(D, H, W)`` input.
        kernel: ``(K, K, D, N)`` weights.
        stride: step between output positions, >= 1.
        pad: zero padding on each spatial border, >= 0.

    Returns:
        ``(B, N, Ho, Wo)`` (or ``(N, Ho, Wo)`` for unbatched input).
    """
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4:
        raise DimensionError(f"input must be 3-D or 4-D, got shape {x.shape}")
    if kernel.ndim != 4 or kernel.shape[0] != kernel.shape[1]:
        raise DimensionError(f"kernel must be K x K x D x N, got shape {kernel.shape}")
    if stride < 1 or pad < 0:
        raise ValueError(f"need stride >= 1 and pad >= 0, got stride={stride} pad={pad}")
    k, _, d, nout = kernel.shape
    if x.shape[1] != d:
        raise DimensionError(f"input depth (axis 1) is {x.shape[1]} but kernel depth (axis 2) is {d}")
    ho = _conv_out(x.shape[2], k, stride, pad)
    wo = _conv_out(x.shape[3], k, stride, pad)
    if ho < 1 or wo < 1:
        raise DimensionError(f"kernel {k} exceeds padded input spatial axes {x.shape[2:]}")
    xp = _pad(x, pad)
    out = np.zeros((x.shape[0], ho, wo, nout))
    for m in range(k):
        for n in range(k):
            out += np.tensordot(_window(xp, m, n, ho, wo, stride), kernel[m, n], axes=([1], [0]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    return out[0] if single else out


@dataclass
class Conv2D:
    name: str
    kernel_size: int
    in_channels: int
    out_channels: int
    stride: int = 1
    pad: int = 0

    @property
    def weight(self) -> str:
        return f"{self.name}.weight"

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        k = self.kernel_size
        return {self.weight: (k, k, self.in_channels, self.out_channels)}

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        if len(in_shape) != 3 or in_shape[0] != self.in_channels:
            raise DimensionError(f"{self.name}: expects (D={self.in_channels}, H, W) input, got {in_shape}")
        ho = _conv_out(in_shape[1], self.kernel_size, self.stride, self.pad)
        wo = _conv_out(in_shape[2], self.kernel_size, self.stride, self.pad)
        if ho < 1 or wo < 1:
            raise DimensionError(f"{self.name}: empty output for input {in_shape}")
        return (self.out_channels, ho, wo)

    def forward(self, x, params):
        # Patch-matrix form of the same sum; one copy of the input windows per call.
        k, s, p = self.kernel_size, self.stride, self.pad
        b = x.shape[0]
        xp = _pad(x, p)
        ho = _conv_out(x.shape[2], k, s, p)
        wo = _conv_out(x.shape[3], k, s, p)
        win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        # (B, D, Ho, Wo, K, K) -> (B, Ho*Wo, K*K*D) ordered like kernel.reshape(K*K*D, N)
        cols = win.transpose(0, 2, 3, 4, 5, 1).reshape(b, ho * wo, k * k * x.shape[1])
        w = params[self.weight].reshape(-1, self.out_channels)
        out = (cols @ w).reshape(b, ho, wo, self.out_channels).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(out), (x.shape, cols)

    def backward(self, dout, cache, params, per_sample):
        shape, cols = cache
        k, s, p = self.kernel_size, self.stride, self.pad
        b, d = shape[0], shape[1]
        ho, wo = dout.shape[2], dout.shape[3]
        w = params[self.weight]
        dflat = dout.transpose(0, 2, 3, 1).reshape(b, ho * wo, self.out_channels)
        if per_sample:
            dw = (cols.transpose(0, 2, 1) @ dflat).reshape((b,) + w.shape)
        else:
            dw = np.tensordot(cols, dflat, axes=([0, 1], [0, 1])).reshape(w.shape)
        dcols = (dflat @ w.reshape(-1, self.out_channels).T).reshape(b, ho, wo, k, k, d)
        dxp = np.zeros((b, d, shape[2] + 2 * p, shape[3] + 2 * p))
        for m in range(k):
            for n in range(k):
                dxp[:, :, m : m + s * (ho - 1) + 1 : s, n : n + s * (wo - 1) + 1 : s] += (
                    dcols[:, :, :, m, n, :].transpose(0, 3, 1, 2))
        if p:
            dxp = dxp[:, :, p:-p, p:-p]
        return dxp, {self.weight: dw}


@dataclass
class ReLU:
    name: str

    def param_shapes(self):
        return {}

    def output_shape(self, in_shape):
        return in_shape

    def forward(self, x, params):
        mask = x > 0
        return np.where(mask, x, 0.0), mask

    def backward(self, dout, cache, params, per_sample):
        return np.where(cache, dout, 0.0), {}


@dataclass
class Dense:
    """Fully connected layer; flattens any trailing input axes."""

    name: str
    in_features: int
    out_features: int
    bias: bool = True

    @property
    def weight(self) -> str:
        return f"{self.name}.weight"

    @property
    def bias_name(self) -> str:
        return f"{self.name}.bias"

    def param_shapes(self):
        shapes = {self.weight: (self.in_features, self.out_features)}
        if self.bias:
            shapes[self.bias_name] = (self.out_features,)
        return shapes

    def output_shape(self, in_shape):
        if int(np.prod(in_shape)) != self.in_features:
            raise DimensionError(f"{self.name}: expects {self.in_features} input features, got shape {in_shape}")
        return (self.out_features,)

    def forward(self, x, params):
        flat = x.reshape(x.shape[0], -1)
        out = flat @ params[self.weight]
        if self.bias:
            out = out + params[self.bias_name]
        return out, (x.shape, flat)

    def backward(self, dout, cache, params, per_sample):
        shape, flat = cache
        if per_sample:
            grads = {self.weight: np.einsum("bi,bo->bio", flat, dout)}
            if self.bias:
                grads[self.bias_name] = dout.copy()
        else:
            grads = {self.weight: flat.T @ dout}
            if self.bias:
                grads[self.bias_name] = dout.sum(axis=0)
        dx = (dout @ params[self.weight].T).reshape(shape)
        return dx, grads


LAYER_TYPES = {"conv2d": Conv2D, "relu": ReLU, "dense": Dense}


@dataclass
class Dataset:
    """Labelled samples. ``inputs`` has the sample index on axis 0."""

    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels).astype(np.int64)
        if self.inputs.shape[0] < 1 or self.inputs.shape[0] != self.labels.shape[0]:
            raise DimensionError(
                f"need n >= 1 inputs with matching labels, got {self.inputs.shape[0]} inputs "
                f"and {self.labels.shape[0]} labels"
            )
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes)

    def calibration_subset(self, size: int = 256, seed: int = 0) -> "Dataset":
        """Fixed seeded subsample of ``min(size, n)`` samples, kept in dataset order."""
        if size >= self.n:
            return self
        idx = np.sort(np.random.default_rng(seed).choice(self.n, size=size, replace=False))
        return self.subset(idx)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


@dataclass
class ModelGraph:
    """Ordered layer list plus named float64 parameters."""

    layers: list
    params: dict[str, np.ndarray]
    input_shape: tuple[int, ...]
    num_classes: int = field(init=False)

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in self.params.items()}
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise ValueError(f"layer names must be unique, got {names}")
        shape = self.input_shape
        expected: dict[str, tuple[int, ...]] = {}
        for layer in self.layers:
            shape = layer.output_shape(shape)
            expected.update(layer.param_shapes())
        if len(shape) != 1:
            raise DimensionError(f"final layer must produce logits, got shape {shape}")
        self.num_classes = shape[0]
        if set(expected) != set(self.params):
            raise ValueError(f"parameter names {sorted(self.params)} do not match layers {sorted(expected)}")
        for k, s in expected.items():
            if self.params[k].shape != s:
                raise DimensionError(f"parameter {k} has shape {self.params[k].shape}, expected {s}")

    @property
    def param_names(self) -> list[str]:
        return list(self.params)

    @property
    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def conv_layers(self) -> list[tuple[int, Conv2D]]:
        return [(i, layer) for i, layer in enumerate(self.layers) if isinstance(layer, Conv2D)]

    def with_params(self, params: Mapping[str, np.ndarray]) -> "ModelGraph":
        return ModelGraph(list(self.layers), dict(params), self.input_shape)

    def copy(self) -> "ModelGraph":
        return self.with_params({k: v.copy() for k, v in self.params.items()})

    def _forward(self, x, params):
        caches = []
        h = np.asarray(x, dtype=np.float64)
        for layer in self.layers:
            h, cache = layer.forward(h, params)
            if not np.all(np.isfinite(h)):
                raise NumericError("non-finite activation", layer.name)
            caches.append(cache)
        return h, caches

    def forward(self, x, params=None) -> np.ndarray:
        """Logits for a batch of inputs."""
        return self._forward(x, self.params if params is None else params)[0]

    def predict(self, x, params=None) -> np.ndarray:
        return self.forward(x, params).argmax(axis=1)

    def _backprop(self, batch: Dataset, params, per_sample: bool):
        params = self.params if params is None else params
        logits, caches = self._forward(batch.inputs, params)
        logp = _log_softmax(logits)
        losses = -logp[np.arange(batch.n), batch.labels]
        if not np.all(np.isfinite(losses)):
            raise NumericError("non-finite loss", "loss")
        dlogits = np.exp(logp)
        dlogits[np.arange(batch.n), batch.labels] -= 1.0
        if not per_sample:
            dlogits /= batch.n
        grads: dict[str, np.ndarray] = {}
        d = dlogits
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            d, g = layer.backward(d, cache, params, per_sample)
            grads.update(g)
        return losses, {k: grads[k] for k in params}

    def loss_and_grad(self, batch: Dataset, params=None) -> tuple[float, dict[str, np.ndarray]]:
        losses, grads = self._backprop(batch, params, per_sample=False)
        return float(losses.mean()), grads

    def per_sample_grads(self, batch: Dataset, params=None) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        """Per-sample losses and loss gradients, each gradient with a leading sample axis."""
        return self._backprop(batch, params, per_sample=True)


def loss_and_grad(model, batch) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy over ``batch`` and its gradient for every parameter."""
    return model.loss_and_grad(batch)


def default_hvp_eps(params: Mapping[str, np.ndarray]) -> float:
    """About ``1e-4 * (1 + max|w|)``, snapped to a power of two so ``w +- eps`` rounds less."""
    wmax = max((float(np.max(np.abs(p))) for p in params.values()), default=0.0)
    return math.ldexp(1.0, round(math.log2(1e-4 * (1.0 + wmax))))


def hvp(model, batch, v: Mapping[str, np.ndarray], eps: float | None = None) -> dict[str, np.ndarray]:
    """Hessian-vector product by central difference of gradients.

    ``v`` may omit parameters; missing entries are treated as zero. The model's
    own parameters are never modified.

    The step is ``eps`` along ``v`` rescaled to roughly unit length, so the
    truncation error does not grow with ``|v|``. Works with any ``model`` exposing ``params`` and
    ``loss_and_grad(batch, params=None)``.
    """
    params = model.params
    if eps is None:
        eps = default_hvp_eps(params)
    if not eps > 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    for k, vk in v.items():
        if k not in params:
            raise KeyError(f"unknown parameter {k!r}")
        if np.shape(vk) != params[k].shape:
            raise DimensionError(f"v[{k!r}] has shape {np.shape(vk)}, expected {params[k].shape}")
    norm = math.sqrt(sum(float(np.sum(np.square(vk))) for vk in v.values()))
    if norm == 0.0:
        return {k: np.zeros_like(p) for k, p in params.items()}
    # Step along v scaled to about unit length; a power of two keeps the scaling exact.
    h = math.ldexp(eps, -round(math.log2(norm)))
    plus = {k: (p + h * v[k]) if k in v else p for k, p in params.items()}
    minus = {k: (p - h * v[k]) if k in v else p for k, p in params.items()}
    _, gp = model.loss_and_grad(batch, plus)
    _, gm = model.loss_and_grad(batch, minus)
    return {k: (gp[k] - gm[k]) / (2.0 * h) for k in params}
