"""Builders shared by the crossbar tests and the acceptance suite."""

import numpy as np

from cimquant.crossbar import HardwareConfig, place
from cimquant.nn import Conv2D, Dense, ModelGraph
from cimquant.quantizer import HIGH, BitwidthMap, compress
from cimquant.sensitivity import SensitivityRecord, StripWeight, decompose_strips


def one_conv_model(rng, K, D, N, H, stride=1, pad=0):
    layer = Conv2D("c", K, D, N, stride=stride, pad=pad)
    ho = (H + 2 * pad - K) // stride + 1
    params = {"c.weight": rng.normal(size=(K, K, D, N)) * rng.uniform(0.05, 2.0),
              "d.weight": np.zeros((N * ho * ho, 2)), "d.bias": np.zeros(2)}
    return ModelGraph([layer, Dense("d", N * ho * ho, 2)], params, (D, H, H))


def random_compressed(rng, model, p_low=None):
    """Compress with random scores; ``p_low`` in [0, 1] fixes the LOW fraction."""
    strips = decompose_strips(model)
    scores = rng.permutation(len(strips)).astype(float)
    recs = [SensitivityRecord(*s.key, s.p_strip, 0.0, 0.0, sc) for s, sc in zip(strips, scores)]
    frac = rng.uniform() if p_low is None else p_low
    r = int(round(frac * len(strips)))
    T = -1.0 if r == 0 else float(np.sort(scores)[r - 1])
    model_c, bmap = compress(model, recs, T)
    return model_c, bmap


def placed(model_c, bmap, hw=None):
    hw = hw or HardwareConfig()
    return place(bmap, decompose_strips(model_c), hw)


def synthetic_strips(n, depth, layer_id=0, cluster=HIGH):
    """``n`` unit strips of length ``depth`` in one layer, plus a map assigning them to ``cluster``."""
    strips = [StripWeight(layer_id, "w", i % 3, (i // 3) % 3, i // 9, np.ones(depth)) for i in range(n)]
    return strips, BitwidthMap(0.0, {s.key: cluster for s in strips})


def integer_conv_oracle(act_codes, kernel_int, stride, pad):
    """Direct dot product of each receptive field with each kernel, exact in int64."""
    B, D, H, W = act_codes.shape
    K, _, _, N = kernel_int.shape
    xp = np.pad(np.asarray(act_codes, dtype=np.int64), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (H + 2 * pad - K) // stride + 1
    wo = (W + 2 * pad - K) // stride + 1
    flat_k = np.asarray(kernel_int, dtype=np.int64).transpose(2, 0, 1, 3).reshape(-1, N)
    out = np.zeros((B, N, ho, wo), dtype=np.int64)
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, :, i * stride : i * stride + K, j * stride : j * stride + K].reshape(B, -1)
            for o in range(N):
                out[:, o, i, j] = [int(np.dot(p, flat_k[:, o])) for p in patch]
    return out
