"""Bit-sliced ReRAM crossbar mapping, mixed-precision MVM and cost accounting.

The functional model is ideal: column outputs are exact integer dot products
of 1-bit input slices with signed weight codes. Low-precision partial sums
are shifted by ``k`` bits into the high-precision domain before the final
accumulation, which is exact because the low-bit scale is ``s_q * 2**k``.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Mapping, Sequence

import numpy as np

from .errors import AccumulationOverflowError
from .nn import Conv2D, _conv_out, _pad, _window
from .quantizer import HIGH, HIGH_BITS, LOW_BITS, BitwidthMap, fit_scale, quantize

ACC_MAX = 2**31 - 1


@dataclass(frozen=True)
class HardwareConfig:
    array_rows: int = 128
    array_cols: int = 128
    cell_bits: int = 2
    adc_levels_high: int = 256
    adc_levels_low: int = 16
    cols_per_adc_high: int = 4
    cols_per_adc_low: int = 2
    input_bits: int = 8
    e_adc_unit: float = 2e-15
    e_accum_unit: float = 5e-15
    e_other_unit: float = 1e-12
    t_read: float = 10e-9

    def __post_init__(self):
        for b in (LOW_BITS, HIGH_BITS):
            if b % self.cell_bits:
                raise ValueError(f"{b}-bit weights do not split into {self.cell_bits}-bit cells")
            if self.array_cols < self.cells_per_weight(b):
                raise ValueError("array too narrow for one weight")
        for levels in (self.adc_levels_high, self.adc_levels_low):
            if levels < 2 or levels & (levels - 1):
                raise ValueError(f"ADC levels must be a power of two, got {levels}")
        if self.input_bits != 8:
            raise ValueError("activations are sliced from 8-bit codes; input_bits must be 8")
        if self.array_rows < 1:
            raise ValueError("array_rows must be >= 1")

    def cells_per_weight(self, bits: int) -> int:
        return bits // self.cell_bits

    def capacity(self, bits: int) -> int:
        """Strips per tile at this weight precision."""
        return self.array_cols // self.cells_per_weight(bits)

    def adc_bits(self, bits: int) -> int:
        levels = self.adc_levels_high if bits == HIGH_BITS else self.adc_levels_low
        return int(math.log2(levels))

    def cols_per_adc(self, bits: int) -> int:
        return self.cols_per_adc_high if bits == HIGH_BITS else self.cols_per_adc_low

    def with_overrides(self, overrides: Mapping[str, str | float | int]) -> "HardwareConfig":
        """Copy with fields replaced; string values are parsed to the field's type."""
        types = {f.name: f.type for f in fields(self)}
        values = asdict(self)
        for key, raw in overrides.items():
            if key not in types:
                raise KeyError(f"unknown hardware field {key!r}")
            cast = int if types[key] in (int, "int") else float
            values[key] = cast(raw)
        return HardwareConfig(**values)


@dataclass
class Tile:
    tile_id: int
    bits: int
    layer_id: int
    row_start: int
    rows_used: int
    strips: list  # strip keys, one column group each
    codes: np.ndarray | None  # (rows_used, len(strips)) signed int64

    def cells_used(self, hw: HardwareConfig) -> int:
        return self.rows_used * len(self.strips) * hw.cells_per_weight(self.bits)

    def cells_total(self, hw: HardwareConfig) -> int:
        return hw.array_rows * hw.array_cols

    def cols_used(self, hw: HardwareConfig) -> int:
        return len(self.strips) * hw.cells_per_weight(self.bits)


@dataclass
class TilePlacement:
    tiles: list[Tile]
    hw: HardwareConfig

    def select(self, bits: int | None = None, layer_id: int | None = None) -> list[Tile]:
        return [t for t in self.tiles
                if (bits is None or t.bits == bits) and (layer_id is None or t.layer_id == layer_id)]

    @property
    def layer_ids(self) -> list[int]:
        return sorted({t.layer_id for t in self.tiles})

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["tile_id", "bits", "layer_id", "row_start", "rows_used", "strips", "cells_used"])
        for t in self.tiles:
            strips = ";".join(f"{m}:{n}:{o}" for (_, m, n, o) in t.strips)
            w.writerow([t.tile_id, t.bits, t.layer_id, t.row_start, t.rows_used, strips, t.cells_used(self.hw)])
        return buf.getvalue()


def place(bmap: BitwidthMap, strips: Sequence, hw: HardwareConfig) -> TilePlacement:
    """Pack strips onto tiles, first-fit in the given order within each layer.

    HIGH strips go to 8-bit tiles, LOW strips to 4-bit tiles. Strips longer
    than ``array_rows`` are split over vertically stacked tiles that share the
    same column assignment. Weight codes are filled in when ``bmap`` carries
    layer scales.
    """
    tiles: list[Tile] = []
    layers: dict[int, list] = {}
    for s in strips:
        layers.setdefault(s.layer_id, []).append(s)
    for lid in sorted(layers):
        group = layers[lid]
        depth = group[0].p_strip
        scales = bmap.layer_scales.get(lid)
        for cluster, bits in ((HIGH, HIGH_BITS), ("LOW", LOW_BITS)):
            members = [s for s in group if bmap.cluster(s.key) == cluster]
            cap = hw.capacity(bits)
            for c0 in range(0, len(members), cap):
                chunk = members[c0 : c0 + cap]
                if scales is not None:
                    spec = scales.spec(cluster)
                    codes = np.stack([quantize(s.values, spec) for s in chunk], axis=1)
                else:
                    codes = None
                for r0 in range(0, depth, hw.array_rows):
                    rows = min(hw.array_rows, depth - r0)
                    tiles.append(Tile(len(tiles), bits, lid, r0, rows, [s.key for s in chunk],
                                      None if codes is None else codes[r0 : r0 + rows]))
    return TilePlacement(tiles, hw)


def utilization(p: TilePlacement, bits: int, layer_id: int | None = None) -> float:
    """Percent of cells used over the activated tiles of one precision (100 if none)."""
    tiles = p.select(bits, layer_id)
    if not tiles:
        return 100.0
    used = sum(t.cells_used(p.hw) for t in tiles)
    total = sum(t.cells_total(p.hw) for t in tiles)
    return 100.0 * used / total


def ideal_mvm(tile: Tile, input_slice, columns=None) -> np.ndarray:
    """Exact column-group outputs for one 1-bit input slice.

    Args:
        tile: programmed tile.
        input_slice: ``(..., rows_used)`` integers applied to the word lines.
        columns: optional indices of the column groups to read.

    Returns:
        ``(..., n_groups)`` int64 dot products.
    """
    x = np.asarray(input_slice, dtype=np.int64)
    if x.shape[-1] != tile.rows_used:
        raise ValueError(f"input has {x.shape[-1]} rows, tile uses {tile.rows_used}")
    codes = tile.codes if columns is None else tile.codes[:, columns]
    return x @ codes


def _check_acc(z: np.ndarray, what: str, layer_id=None, tile_id=None) -> None:
    if z.size and int(np.max(np.abs(z))) > ACC_MAX:
        raise AccumulationOverflowError(f"{what} exceeds the 32-bit accumulator", layer_id, tile_id)


def expand(z_low, k: int) -> np.ndarray:
    """Shift low-precision partial sums left by ``k`` bits, refusing to overflow."""
    if k < 0:
        raise ValueError(f"k must be >= 0, got {k}")
    z = np.asarray(z_low, dtype=np.int64)
    if z.size and int(np.max(np.abs(z))) > (ACC_MAX >> k):
        raise AccumulationOverflowError(f"expand by 2**{k} exceeds the 32-bit accumulator")
    return z << k


def quantize_activation(activation) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample symmetric 8-bit codes and scales for a ``(B, ...)`` batch."""
    a = np.asarray(activation, dtype=np.float64)
    scales = np.array([fit_scale(a[b], 8).scale for b in range(a.shape[0])])
    codes = np.stack([quantize(a[b], fit_scale(a[b], 8)) for b in range(a.shape[0])])
    return codes, scales


def mixed_mvm_int(placement: TilePlacement, act_codes: np.ndarray, bmap: BitwidthMap, layer: Conv2D,
                  layer_id: int) -> np.ndarray:
    """Integer conv output ``Z_q + expand(Z_p, k)`` for 8-bit activation codes.

    Activation codes are offset to unsigned (``code + 2**(input_bits-1)``) and
    applied bit-serially; the offset is removed with one all-ones read per
    column group. Tiles are reduced in ascending ``tile_id`` order.
    """
    hw = placement.hw
    codes = np.asarray(act_codes, dtype=np.int64)
    B, D, H, W = codes.shape
    if D != layer.in_channels:
        raise ValueError(f"activation depth {D} != layer depth {layer.in_channels}")
    ho = _conv_out(H, layer.kernel_size, layer.stride, layer.pad)
    wo = _conv_out(W, layer.kernel_size, layer.stride, layer.pad)
    offset = 1 << (hw.input_bits - 1)
    unsigned = _pad(codes + offset, layer.pad, value=offset)
    z = {HIGH_BITS: np.zeros((B, ho, wo, layer.out_channels), dtype=np.int64),
         LOW_BITS: np.zeros((B, ho, wo, layer.out_channels), dtype=np.int64)}
    tiles = sorted(placement.select(layer_id=layer_id), key=lambda t: t.tile_id)
    if not tiles:
        raise ValueError(f"placement has no tiles for layer {layer_id}")
    for tile in tiles:
        if tile.codes is None:
            raise ValueError("placement was built without weight codes")
        rows = slice(tile.row_start, tile.row_start + tile.rows_used)
        ones = np.ones(tile.rows_used, dtype=np.int64)
        by_pos: dict[tuple[int, int], list[int]] = {}
        for col, (_, m, n, _) in enumerate(tile.strips):
            by_pos.setdefault((m, n), []).append(col)
        for (m, n), cols in sorted(by_pos.items()):
            win = _window(unsigned[:, rows], m, n, ho, wo, layer.stride)
            x = np.moveaxis(win, 1, -1)  # (B, ho, wo, rows)
            acc = np.zeros((B, ho, wo, len(cols)), dtype=np.int64)
            for bit in range(hw.input_bits):
                acc += ideal_mvm(tile, (x >> bit) & 1, cols) << bit
            acc -= offset * ideal_mvm(tile, ones, cols)
            out_ch = [tile.strips[c][3] for c in cols]
            z[tile.bits][..., out_ch] += acc  # out channels are distinct within one kernel position
            _check_acc(z[tile.bits], "partial sum", layer_id, tile.tile_id)
    k = bmap.layer_scales[layer_id].k
    total = z[HIGH_BITS] + expand(z[LOW_BITS], k)
    _check_acc(total, "final sum", layer_id)
    return np.moveaxis(total, -1, 1)


def mixed_mvm(placement: TilePlacement, activation, bmap: BitwidthMap, hw: HardwareConfig, layer: Conv2D,
              layer_id: int) -> np.ndarray:
    """Conv layer output computed on the crossbar model.

    The activation is quantized per sample to 8 bits; the result is
    ``s_q * s_a * Z_int`` with shape ``(B, N, Ho, Wo)``.
    """
    if placement.hw != hw:
        raise ValueError("placement was built for a different hardware config")
    codes, s_a = quantize_activation(activation)
    z = mixed_mvm_int(placement, codes, bmap, layer, layer_id)
    return bmap.layer_scales[layer_id].s_q * s_a[:, None, None, None] * z


@dataclass
class LayerCost:
    energy_adc: float = 0.0
    energy_accum: float = 0.0
    energy_other: float = 0.0
    latency: float = 0.0
    utilization_high: float = 100.0
    utilization_low: float = 100.0
    tiles_high: int = 0
    tiles_low: int = 0
    conversions: int = 0

    @property
    def energy_total(self) -> float:
        return self.energy_adc + self.energy_accum + self.energy_other

    def as_dict(self) -> dict:
        d = asdict(self)
        d["energy_total"] = self.energy_total
        return d


@dataclass
class CostReport:
    layers: dict[int, LayerCost] = field(default_factory=dict)
    total: LayerCost = field(default_factory=LayerCost)

    @property
    def adc_share(self) -> float:
        return self.total.energy_adc / self.total.energy_total

    def to_json(self) -> str:
        doc = {"layers": {str(k): v.as_dict() for k, v in sorted(self.layers.items())},
               "total": self.total.as_dict()}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        cols = ["scope"] + list(self.total.as_dict())
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        rows = [(str(k), v) for k, v in sorted(self.layers.items())] + [("total", self.total)]
        for scope, cost in rows:
            d = cost.as_dict()
            w.writerow([scope] + [repr(d[c]) if isinstance(d[c], float) else d[c] for c in cols[1:]])
        return buf.getvalue()


def simulate_cost(placement: TilePlacement, workload, hw: HardwareConfig | None = None) -> CostReport:
    """Closed-form energy, latency and utilization.

    Args:
        placement: tiles to charge.
        workload: input vectors per layer, either one int for every layer or
            a ``{layer_id: n}`` mapping.
        hw: defaults to ``placement.hw``.
    """
    hw = hw or placement.hw
    report = CostReport()
    for lid in placement.layer_ids:
        n_vec = workload[lid] if isinstance(workload, Mapping) else workload
        if n_vec < 1:
            raise ValueError("need at least one input vector")
        cost = LayerCost()
        busiest = 0
        for t in placement.select(layer_id=lid):
            cols = t.cols_used(hw)
            cpa = hw.cols_per_adc(t.bits)
            cycles = n_vec * hw.input_bits
            conversions = cycles * math.ceil(cols / cpa)
            cost.conversions += conversions
            cost.energy_adc += conversions * hw.e_adc_unit * 2 ** hw.adc_bits(t.bits)
            cost.energy_accum += cycles * len(t.strips) * hw.e_accum_unit
            cost.energy_other += n_vec * hw.e_other_unit
            busiest = max(busiest, cycles * min(cpa, cols))
            if t.bits == HIGH_BITS:
                cost.tiles_high += 1
            else:
                cost.tiles_low += 1
        cost.latency = busiest * hw.t_read
        cost.utilization_high = utilization(placement, HIGH_BITS, lid)
        cost.utilization_low = utilization(placement, LOW_BITS, lid)
        report.layers[lid] = cost
    tot = report.total
    for c in report.layers.values():
        tot.energy_adc += c.energy_adc
        tot.energy_accum += c.energy_accum
        tot.energy_other += c.energy_other
        tot.latency += c.latency
        tot.tiles_high += c.tiles_high
        tot.tiles_low += c.tiles_low
        tot.conversions += c.conversions
    tot.utilization_high = utilization(placement, HIGH_BITS)
    tot.utilization_low = utilization(placement, LOW_BITS)
    return report
