"""Threshold search by Fisher-information drift, and crossbar capacity alignment.

The threshold is searched in rank space over the ``U`` distinct scores:
position ``r`` in ``[0, U]`` sends the strips with the ``r`` lowest distinct
scores to the low-precision cluster (``r = 0`` keeps every strip HIGH), and
the quantile ``u = r / U`` is the optimizer's continuous variable (``u = 1``
puts every strip LOW). Tied scores therefore never form flat stretches. The loss ``L = ||F(theta_c) - F(theta)||^2`` uses the
diagonal empirical Fisher.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .quantizer import compress
from .sensitivity import SensitivityRecord


@dataclass(frozen=True)
class FisherDiag:
    values: np.ndarray
    n_samples: int


def fisher_diag(model, data) -> FisherDiag:
    """Mean over samples of the squared per-sample log-likelihood gradient.

    Parameters are flattened in ``model.params`` order.
    """
    _, grads = model.per_sample_grads(data)
    flat = np.concatenate([g.reshape(data.n, -1) for g in grads.values()], axis=1)
    return FisherDiag(np.mean(flat**2, axis=0), data.n)


def fim_distance(F, F0) -> float:
    """Squared Frobenius norm of the difference of two diagonal Fishers."""
    a = F.values if isinstance(F, FisherDiag) else np.asarray(F, dtype=np.float64)
    b = F0.values if isinstance(F0, FisherDiag) else np.asarray(F0, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"Fisher length mismatch: {a.shape} vs {b.shape}")
    d = a - b
    return float(d @ d)


@dataclass(frozen=True)
class ThresholdOptConfig:
    """Descent settings.

    ``T0`` is a quantile in [0, 1]; ``eta`` is in quantile units per unit of
    normalized gradient. The finite-difference half-width starts at
    ``fd_start * R`` ranks and halves (rounding up) whenever an update fails
    to move the rank or revisits an earlier iterate, down to ``fd_step``
    ranks. ``eps_tol=None`` means
    ``1e-3 * ||F(T0) - F0||``.
    """

    T0: float = 1.0
    eta: float = 1.0
    eps_tol: float | None = None
    max_iter: int = 50
    fd_step: int = 1
    fd_start: float = 1.0

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError("eta must be > 0")
        if self.eps_tol is not None and self.eps_tol < 0:
            raise ValueError("eps_tol must be >= 0")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.fd_step < 1:
            raise ValueError("fd_step must be >= 1")
        if not 0.0 <= self.fd_start <= 1.0:
            raise ValueError("fd_start is a quantile width in [0, 1]")
        if not 0.0 <= self.T0 <= 1.0:
            raise ValueError("T0 is a quantile in [0, 1]")


@dataclass(frozen=True)
class IterationRecord:
    iter: int
    T_rank: int
    T_score: float
    q: int
    p_low: int
    L: float
    g: float
    best_L: float


@dataclass
class ThresholdResult:
    T: float
    T_rank: int
    L: float
    q: int
    p_low: int
    converged: bool
    log: list[IterationRecord] = field(default_factory=list)
    evaluations: int = 0


class _RankSpace:
    """Maps positions over the distinct sorted scores to thresholds; caches L."""

    def __init__(self, model, records, data):
        self.model = model
        self.records = list(records)
        self.data = data
        self.sorted = np.unique([r.score for r in self.records])
        self.R = len(self.sorted)  # positions run 0..R
        self.F0 = fisher_diag(model, data)
        self._cache: dict[float, tuple[float, int, int]] = {}

    def threshold(self, r: int) -> float:
        if r <= 0:
            return float(np.nextafter(self.sorted[0], -np.inf))
        return float(self.sorted[min(r, self.R) - 1])

    def evaluate(self, r: int) -> tuple[float, int, int]:
        """``(L, q, p_low)`` at rank ``r``; tied ranks share one evaluation."""
        t = self.threshold(r)
        if t not in self._cache:
            model_c, bmap = compress(self.model, self.records, t)
            L = fim_distance(fisher_diag(model_c, self.data), self.F0)
            self._cache[t] = (L, bmap.q, bmap.p_low)
        return self._cache[t]

    @property
    def evaluations(self) -> int:
        return len(self._cache)


def optimize_threshold(model, records: Sequence[SensitivityRecord], data, cfg: ThresholdOptConfig | None = None
                       ) -> ThresholdResult:
    """Gradient descent on the threshold quantile, minimizing Fisher drift.

    Each iteration compresses at the current threshold, measures ``L``,
    estimates ``dL/du`` by a central difference (one-sided at the ends of the
    rank range), and steps ``u <- u - eta * g / L(T0)``. The difference
    window shrinks from coarse to ``fd_step`` ranks each time an update lands
    on an already visited rank. Stops when ``sqrt(L) <= eps_tol``, when that
    happens at the finest window, or after ``max_iter`` iterations. The
    returned threshold is the lowest-``L`` one evaluated, finite-difference
    probes included.
    """
    cfg = cfg or ThresholdOptConfig()
    if not records:
        raise ValueError("no sensitivity records")
    space = _RankSpace(model, records, data)
    R = space.R
    h = max(cfg.fd_step, int(round(cfg.fd_start * R)))

    def to_rank(u: float) -> int:
        return int(min(R, max(0, math.floor(u * R + 0.5))))

    L0 = space.evaluate(to_rank(cfg.T0))[0]
    eps_tol = 1e-3 * math.sqrt(L0) if cfg.eps_tol is None else cfg.eps_tol
    norm = L0 if L0 > 0 else 1.0

    best_r = to_rank(cfg.T0)
    best_L = L0

    def observe(r: int) -> float:
        nonlocal best_r, best_L
        L = space.evaluate(r)[0]
        if L < best_L or (L == best_L and r < best_r):
            best_r, best_L = r, L
        return L

    u = cfg.T0
    log = []
    visited = set()
    converged = False
    for it in range(1, cfg.max_iter + 1):
        r = to_rank(u)
        visited.add(r)
        L = observe(r)
        _, q, p_low = space.evaluate(r)
        if math.sqrt(L) <= eps_tol:
            log.append(IterationRecord(it, r, space.threshold(r), q, p_low, L, 0.0, best_L))
            converged = True
            break
        hi, lo = min(R, r + h), max(0, r - h)
        g_rank = (observe(hi) - observe(lo)) / (hi - lo) if hi > lo else 0.0
        g = g_rank * R / norm
        log.append(IterationRecord(it, r, space.threshold(r), q, p_low, L, g, best_L))
        u = min(1.0, max(0.0, u - cfg.eta * g))
        if to_rank(u) in visited:
            if h <= cfg.fd_step:
                break
            h = max(cfg.fd_step, (h + 1) // 2)
    L, q, p_low = space.evaluate(best_r)
    return ThresholdResult(space.threshold(best_r), best_r, L, q, p_low, converged, log, space.evaluations)


def sweep_thresholds(model, records, data) -> list[tuple[int, float, float]]:
    """Exhaustive ``(r, threshold, L)`` with ``r`` lowest-scoring strips LOW, for every ``r`` in ``[0, R]``.

    Tied scores make some neighbouring ``r`` share one partition.
    """
    scores = np.sort([rec.score for rec in records])
    F0 = fisher_diag(model, data)
    cache: dict[float, float] = {}
    out = []
    for r in range(len(scores) + 1):
        t = float(np.nextafter(scores[0], -np.inf)) if r == 0 else float(scores[r - 1])
        if t not in cache:
            cache[t] = fim_distance(fisher_diag(compress(model, records, t)[0], data), F0)
        out.append((r, t, cache[t]))
    return out


LOG_COLUMNS = ["iter", "T_rank", "T_score", "q", "p_low", "L", "g"]


def write_iteration_log(path, log: Sequence[IterationRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for rec in log:
            w.writerow([rec.iter, rec.T_rank, repr(rec.T_score), rec.q, rec.p_low, repr(rec.L), repr(rec.g)])


@dataclass(frozen=True)
class CapacityConfig:
    """Strips one high-precision tile can host."""

    C: int

    def __post_init__(self):
        if self.C < 1:
            raise ValueError("capacity must be >= 1")

    @classmethod
    def from_hardware(cls, hw) -> "CapacityConfig":
        return cls(hw.capacity(8))


def _align_scores(scores: np.ndarray, T: float, C: int) -> float:
    q = int(np.sum(scores > T))
    if q % C == 0:
        return T
    for s in np.unique(scores[scores > T]):
        if int(np.sum(scores > s)) % C == 0:
            return float(s)
    raise AssertionError("unreachable: the maximum score leaves q = 0")


def align_to_capacity(records: Sequence[SensitivityRecord], T, cap: CapacityConfig, per_layer: bool = True):
    """Raise the threshold just enough that the HIGH count is a multiple of ``C``.

    Only demotes strips. With ``per_layer`` (default) the rule is applied to
    each layer's strips separately and a ``{layer_id: threshold}`` mapping is
    returned; otherwise a single float.
    """
    if not per_layer:
        if isinstance(T, Mapping):
            raise ValueError("global alignment needs a single threshold")
        return _align_scores(np.array([r.score for r in records]), float(T), cap.C)
    by_layer: dict[int, list[float]] = {}
    for r in records:
        by_layer.setdefault(r.layer_id, []).append(r.score)
    out = {}
    for lid, scores in sorted(by_layer.items()):
        t = T[lid] if isinstance(T, Mapping) else float(T)
        out[lid] = _align_scores(np.array(scores), t, cap.C)
    return out
