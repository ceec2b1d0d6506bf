"""Strip-weight decomposition and Hessian-trace sensitivity scores.

A ``K x K x D x N`` conv kernel is viewed as ``K*K*N`` strips, each the
length-``D`` vector ``kernel[m, n, :, o]``. A strip's score is

    score = trace(H_block) / (2 * D) * ||w_strip||^2

where ``H_block`` is the loss Hessian restricted to the strip's coordinates and
the trace is estimated with Rademacher probes supported on that block only.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import NumericError
from .nn import hvp

StripKey = tuple[int, int, int, int]  # (layer_id, m, n, out_channel)


@dataclass(frozen=True)
class StripWeight:
    layer_id: int
    param: str
    m: int
    n: int
    out_channel: int
    values: np.ndarray

    @property
    def key(self) -> StripKey:
        return (self.layer_id, self.m, self.n, self.out_channel)

    @property
    def p_strip(self) -> int:
        return int(self.values.shape[0])

    def sort_key(self):
        return (self.layer_id, self.out_channel, self.m, self.n)


@dataclass(frozen=True)
class HutchinsonConfig:
    m: int = 16
    seed: int = 0
    eps: float | None = None

    def __post_init__(self):
        if self.m < 1:
            raise ValueError(f"need at least one probe, got m={self.m}")


@dataclass(frozen=True)
class SensitivityRecord:
    layer_id: int
    m: int
    n: int
    out_channel: int
    p_strip: int
    trace: float
    sq_norm: float
    score: float

    @property
    def key(self) -> StripKey:
        return (self.layer_id, self.m, self.n, self.out_channel)

    def sort_key(self):
        return (self.layer_id, self.out_channel, self.m, self.n)


def strip_score(trace: float, p_strip: int, sq_norm: float) -> float:
    return trace / (2 * p_strip) * sq_norm


def decompose_strips(model) -> list[StripWeight]:
    """All strips of every conv layer, ordered by (layer, out_channel, m, n).

    Non-conv layers are skipped.
    """
    strips = []
    for layer_id, layer in model.conv_layers():
        w = model.params[layer.weight]
        k = layer.kernel_size
        for o in range(layer.out_channels):
            for m in range(k):
                for n in range(k):
                    strips.append(StripWeight(layer_id, layer.weight, m, n, o, w[m, n, :, o].copy()))
    if not strips:
        raise ValueError("model has no conv layers")
    return strips


def reassemble(model, strips: Iterable[StripWeight]) -> dict[str, np.ndarray]:
    """Rebuild conv kernels from strips; other parameters are copied unchanged."""
    params = {k: v.copy() for k, v in model.params.items()}
    for s in strips:
        params[s.param][s.m, s.n, :, s.out_channel] = s.values
    return params


def strip_group(model, strip: StripWeight) -> dict[str, np.ndarray]:
    """Flat parameter indices covered by ``strip``."""
    shape = model.params[strip.param].shape
    d = np.arange(shape[2])
    return {strip.param: np.ravel_multi_index((np.full_like(d, strip.m), np.full_like(d, strip.n), d,
                                               np.full_like(d, strip.out_channel)), shape)}


def group_trace(model, batch, group: Mapping[str, np.ndarray], cfg: HutchinsonConfig, stream=()) -> float:
    """Hutchinson estimate of the trace of the Hessian block on ``group``.

    Each probe is Rademacher on the group's coordinates and zero elsewhere.
    The probe generator is seeded from ``(cfg.seed, *stream)``.

    Args:
        model: object with ``params`` and ``loss_and_grad(batch, params=None)``.
        batch: data passed through to the loss.
        group: parameter name -> flat indices into that parameter.
        cfg: probe count, seed and HVP step.
        stream: extra integers mixed into the seed (e.g. a strip identity).
    """
    group = {k: np.asarray(idx, dtype=np.int64).ravel() for k, idx in group.items()}
    if sum(idx.size for idx in group.values()) == 0:
        raise ValueError("group must contain at least one coordinate")
    rng = np.random.default_rng([int(cfg.seed), *(int(s) for s in stream)])
    total = 0.0
    for _ in range(cfg.m):
        v = {}
        signs = {}
        for name, idx in group.items():
            vk = np.zeros(model.params[name].size)
            signs[name] = rng.choice((-1.0, 1.0), size=idx.size)
            vk[idx] = signs[name]
            v[name] = vk.reshape(model.params[name].shape)
        hv = hvp(model, batch, v, cfg.eps)
        total += sum(float(signs[name] @ hv[name].ravel()[idx]) for name, idx in group.items())
    return total / cfg.m


def score_strips(model, batch, strips: Sequence[StripWeight], cfg: HutchinsonConfig) -> list[SensitivityRecord]:
    """One sensitivity record per strip, in the order given.

    Probe streams depend on the strip's identity, so a strip's score does not
    depend on where it sits in ``strips``.
    """
    records = []
    for s in strips:
        try:
            tr = group_trace(model, batch, strip_group(model, s), cfg, stream=s.key)
        except NumericError as exc:
            raise NumericError(f"while scoring strip {s.key}: {exc}", exc.layer) from exc
        sq = float(s.values @ s.values)
        records.append(SensitivityRecord(*s.key, s.p_strip, tr, sq, strip_score(tr, s.p_strip, sq)))
    return records


def rank_strips(records: Iterable[SensitivityRecord]) -> list[SensitivityRecord]:
    """Descending score; ties broken by (layer_id, out_channel, m, n) ascending."""
    return sorted(records, key=lambda r: (-r.score, r.sort_key()))


CSV_COLUMNS = ["layer_id", "m", "n", "out_channel", "p_strip", "trace", "sq_norm", "score"]


def write_sensitivity_csv(path, records: Iterable[SensitivityRecord]) -> None:
    """Ranked report, floats written with round-trip precision."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in rank_strips(records):
            w.writerow([r.layer_id, r.m, r.n, r.out_channel, r.p_strip, repr(r.trace), repr(r.sq_norm), repr(r.score)])


def read_sensitivity_csv(path) -> list[SensitivityRecord]:
    with open(Path(path), newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        SensitivityRecord(int(r["layer_id"]), int(r["m"]), int(r["n"]), int(r["out_channel"]), int(r["p_strip"]),
                          float(r["trace"]), float(r["sq_norm"]), float(r["score"]))
        for r in rows
    ]
