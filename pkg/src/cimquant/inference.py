"""Quantized inference through either a software reference or the crossbar model.

Both paths quantize each conv layer's input to 8-bit per-sample codes and
compute the conv in the integer domain, then rescale by ``s_q * s_a``. Dense
and ReLU layers run in float64.
"""

from __future__ import annotations

import numpy as np

from .crossbar import TilePlacement, mixed_mvm_int, quantize_activation
from .nn import Conv2D, ModelGraph, conv2d_forward
from .quantizer import BitwidthMap


def integer_kernel(model_c: ModelGraph, bmap: BitwidthMap, layer_id: int) -> np.ndarray:
    """Kernel of a compressed model in units of ``s_q`` (LOW codes already shifted by ``k``)."""
    layer = model_c.layers[layer_id]
    return np.rint(model_c.params[layer.weight] / bmap.layer_scales[layer_id].s_q).astype(np.int64)


def quantized_forward(model_c: ModelGraph, bmap: BitwidthMap, x, placement: TilePlacement | None = None):
    """Logits of the compressed model with 8-bit activations at every conv input.

    With ``placement`` the conv layers run on :func:`mixed_mvm_int`; without
    it they use :func:`conv2d_forward` on integer codes.
    """
    h = np.asarray(x, dtype=np.float64)
    for lid, layer in enumerate(model_c.layers):
        if isinstance(layer, Conv2D):
            codes, s_a = quantize_activation(h)
            if placement is None:
                z = conv2d_forward(codes.astype(np.float64), integer_kernel(model_c, bmap, lid).astype(np.float64),
                                   layer.stride, layer.pad)
            else:
                z = mixed_mvm_int(placement, codes, bmap, layer, lid).astype(np.float64)
            h = bmap.layer_scales[lid].s_q * s_a[:, None, None, None] * z
        else:
            h, _ = layer.forward(h, model_c.params)
    return h


def accuracy(logits: np.ndarray, labels) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))


def conv_workload(model: ModelGraph, n_samples: int) -> dict[int, int]:
    """Input vectors per conv layer: one per output pixel per sample."""
    shape = model.input_shape
    out = {}
    for lid, layer in enumerate(model.layers):
        nxt = layer.output_shape(shape)
        if isinstance(layer, Conv2D):
            out[lid] = n_samples * nxt[1] * nxt[2]
        shape = nxt
    return out
