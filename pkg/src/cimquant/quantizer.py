"""Symmetric 8/4-bit quantization and threshold-based strip clustering."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .sensitivity import SensitivityRecord, StripKey, decompose_strips

HIGH = "HIGH"
LOW = "LOW"
HIGH_BITS = 8
LOW_BITS = 4
SUPPORTED_BITS = (4, 8)


@dataclass(frozen=True)
class QuantSpec:
    bits: int
    scale: float

    def __post_init__(self):
        if self.bits not in SUPPORTED_BITS:
            raise ValueError(f"unsupported bit-width {self.bits}; expected one of {SUPPORTED_BITS}")
        if not self.scale > 0:
            raise ValueError(f"scale must be > 0, got {self.scale}")

    @property
    def q_max(self) -> int:
        return 2 ** (self.bits - 1) - 1


def fit_scale(values, bits: int) -> QuantSpec:
    """Scale mapping ``max|values|`` onto the largest code.

    Returns scale 1.0 when the input is all zero, or so close to zero that
    the scale would underflow; every code is then 0.
    """
    if bits not in SUPPORTED_BITS:
        raise ValueError(f"unsupported bit-width {bits}; expected one of {SUPPORTED_BITS}")
    amax = float(np.max(np.abs(values))) if np.size(values) else 0.0
    q_max = 2 ** (bits - 1) - 1
    scale = amax / q_max
    return QuantSpec(bits, scale if scale > 0 else 1.0)


def quantize(x, spec: QuantSpec):
    """Round-half-to-even codes clamped to ``[-q_max, q_max]``."""
    codes = np.clip(np.rint(np.asarray(x, dtype=np.float64) / spec.scale), -spec.q_max, spec.q_max).astype(np.int64)
    return int(codes) if codes.ndim == 0 else codes


def dequantize(code, spec: QuantSpec):
    out = np.asarray(code, dtype=np.float64) * spec.scale
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class LayerScales:
    """Per-layer scales with the low-bit step tied to the high-bit one: ``s_p = s_q * 2**k``."""

    s_q: float
    k: int

    @property
    def s_p(self) -> float:
        return math.ldexp(self.s_q, self.k)

    def spec(self, cluster: str) -> QuantSpec:
        return QuantSpec(HIGH_BITS, self.s_q) if cluster == HIGH else QuantSpec(LOW_BITS, self.s_p)


@dataclass(frozen=True)
class BitwidthMap:
    """Cluster of every strip plus (after ``compress``) per-layer scales.

    ``threshold`` is a single float, or a ``{layer_id: float}`` mapping when
    thresholds were aligned per layer.
    """

    threshold: float | Mapping[int, float]
    assignments: Mapping[StripKey, str]
    layer_scales: Mapping[int, LayerScales] = field(default_factory=dict)

    @property
    def R(self) -> int:
        return len(self.assignments)

    @property
    def q(self) -> int:
        return sum(1 for c in self.assignments.values() if c == HIGH)

    @property
    def p_low(self) -> int:
        return self.R - self.q

    def cluster(self, key: StripKey) -> str:
        return self.assignments[key]

    def to_json(self) -> str:
        if isinstance(self.threshold, Mapping):
            thr = {str(k): v for k, v in sorted(self.threshold.items())}
        else:
            thr = self.threshold
        doc = {
            "threshold": thr,
            "q": self.q,
            "p_low": self.p_low,
            "R": self.R,
            "layers": {
                str(lid): {"s_q": s.s_q, "s_p": s.s_p, "k": s.k} for lid, s in sorted(self.layer_scales.items())
            },
            "strips": [
                {"layer_id": k[0], "m": k[1], "n": k[2], "out_channel": k[3], "cluster": c}
                for k, c in sorted(self.assignments.items())
            ],
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "BitwidthMap":
        doc = json.loads(text)
        thr = doc["threshold"]
        if isinstance(thr, dict):
            thr = {int(k): float(v) for k, v in thr.items()}
        assignments = {(s["layer_id"], s["m"], s["n"], s["out_channel"]): s["cluster"] for s in doc["strips"]}
        scales = {int(k): LayerScales(v["s_q"], v["k"]) for k, v in doc["layers"].items()}
        return cls(thr, assignments, scales)


def _layer_threshold(T, layer_id: int) -> float:
    if isinstance(T, Mapping):
        return T[layer_id]
    return T


def assign_clusters(records: Iterable[SensitivityRecord], T) -> BitwidthMap:
    """HIGH iff ``score > T``; a score equal to ``T`` goes LOW.

    ``T`` may be a float or a per-layer ``{layer_id: threshold}`` mapping.
    """
    records = list(records)
    if not records:
        raise ValueError("no sensitivity records")
    assignments = {
        r.key: HIGH if r.score > _layer_threshold(T, r.layer_id) else LOW
        for r in sorted(records, key=SensitivityRecord.sort_key)
    }
    return BitwidthMap(dict(T) if isinstance(T, Mapping) else float(T), assignments)


def layer_scales(high_values, low_values) -> LayerScales:
    """Fit ``s_q`` on the HIGH cluster, then the smallest ``k >= 0`` whose ``s_q * 2**k``
    covers the LOW cluster's range at 4 bits (no clipping)."""
    high = np.concatenate(high_values) if len(high_values) else np.zeros(0)
    low = np.concatenate(low_values) if len(low_values) else np.zeros(0)
    low_free = fit_scale(low, LOW_BITS).scale
    if high.size == 0 or not np.any(high):
        # No HIGH step to tie to; use the LOW fit directly.
        return LayerScales(low_free if np.any(low) else 1.0, 0)
    s_q = fit_scale(high, HIGH_BITS).scale
    k = 0
    if np.any(low):
        while math.ldexp(s_q, k) < low_free:
            k += 1
    return LayerScales(s_q, k)


def compress(model, records: Iterable[SensitivityRecord], T):
    """Quantize every strip to its cluster's grid.

    Returns:
        ``(model_c, bitwidth_map)``; ``model_c`` has the same structure with
        conv kernels replaced by dequantized values. Non-conv parameters are
        left in full precision.
    """
    bmap = assign_clusters(records, T)
    strips = decompose_strips(model)
    missing = [s.key for s in strips if s.key not in bmap.assignments]
    if missing:
        raise ValueError(f"records do not cover strips {missing[:5]}")
    by_layer: dict[int, dict[str, list]] = {}
    for s in strips:
        by_layer.setdefault(s.layer_id, {HIGH: [], LOW: []})[bmap.cluster(s.key)].append(s)
    scales = {
        lid: layer_scales([s.values for s in groups[HIGH]], [s.values for s in groups[LOW]])
        for lid, groups in by_layer.items()
    }
    params = {k: v.copy() for k, v in model.params.items()}
    for s in strips:
        spec = scales[s.layer_id].spec(bmap.cluster(s.key))
        params[s.param][s.m, s.n, :, s.out_channel] = dequantize(quantize(s.values, spec), spec)
    return model.with_params(params), BitwidthMap(bmap.threshold, bmap.assignments, scales)


def compression_ratio(bmap: BitwidthMap) -> float:
    """Fraction of strips at low precision."""
    if bmap.R < 1:
        raise ValueError("empty bitwidth map")
    return bmap.p_low / bmap.R


def threshold_for_ratio(records: Sequence[SensitivityRecord], ratio: float) -> float:
    """Threshold putting ``round(ratio * R)`` lowest-scoring strips LOW (ties may add more)."""
    scores = np.sort([r.score for r in records])
    r = int(round(ratio * len(scores)))
    if r <= 0:
        return float(np.nextafter(scores[0], -np.inf))
    return float(scores[min(r, len(scores)) - 1])
