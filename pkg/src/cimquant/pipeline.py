"""Staged pipeline: score -> optimize -> compress -> place -> simulate -> report.

Every stage reads its inputs from files and writes its outputs to files under
the output directory, so any stage can be re-run in isolation. A
``manifest.json`` records the SHA-256 of every input and output per stage
plus its wall-clock time; ``pipeline`` skips a stage whose recorded inputs
and outputs are unchanged. Everything except the manifest's timing fields is
a pure function of the configuration and input files.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np

from . import __version__
from .artifacts import file_sha256, load_dataset, load_model, save_model
from .crossbar import HardwareConfig, TilePlacement, place, simulate_cost
from .errors import FormatError
from .inference import accuracy, conv_workload, quantized_forward
from .quantizer import BitwidthMap, assign_clusters, compress, compression_ratio, threshold_for_ratio
from .sensitivity import (
    HutchinsonConfig,
    decompose_strips,
    rank_strips,
    read_sensitivity_csv,
    score_strips,
    write_sensitivity_csv,
)
from .threshold import (
    CapacityConfig,
    ThresholdOptConfig,
    align_to_capacity,
    optimize_threshold,
    write_iteration_log,
)

STAGES = ["score", "optimize", "compress", "place", "simulate", "report"]
# Config sections each stage depends on; file inputs are hashed separately.
STAGE_CONFIG_KEYS = {
    "score": ["num_classes", "calibration", "hutchinson"],
    "optimize": ["num_classes", "calibration", "threshold", "hardware"],
    "compress": ["simulate"],
    "place": ["hardware", "simulate"],
    "simulate": ["num_classes", "calibration", "eval", "hardware", "simulate"],
    "report": ["simulate"],
}
OPT_RUN = "opt"


class ConfigError(Exception):
    """Configuration missing, malformed, or referring to unreadable files."""


class StageError(Exception):
    """A stage failed; names the stage and, when known, the file and byte offset."""

    def __init__(self, stage: str, message: str, path=None, offset: int | None = None):
        parts = [f"stage {stage!r}: {message}"]
        if path is not None:
            parts.append(f"file {path}")
        if offset is not None:
            parts.append(f"byte offset {offset}")
        super().__init__("; ".join(parts))
        self.stage = stage
        self.path = path
        self.offset = offset


class StageNumericError(StageError):
    """Non-finite values or accumulator overflow inside a stage."""


@dataclass
class PipelineConfig:
    base_dir: Path
    model: Path
    num_classes: int
    calib_inputs: Path
    calib_labels: Path
    calib_samples: int = 256
    calib_seed: int = 0
    eval_inputs: Path | None = None
    eval_labels: Path | None = None
    hutchinson: HutchinsonConfig = field(default_factory=HutchinsonConfig)
    threshold: ThresholdOptConfig = field(default_factory=ThresholdOptConfig)
    per_layer_alignment: bool = True
    hardware: HardwareConfig = field(default_factory=HardwareConfig)
    cr_points: list[float] = field(default_factory=list)
    out: Path = Path("run")
    raw: dict = field(default_factory=dict)

    @property
    def digest(self) -> str:
        """Hash of the effective configuration (after CLI overrides), output location excluded."""
        return _digest({k: v for k, v in self.raw.items() if k != "out"})

    def stage_digest(self, stage: str) -> str:
        """Hash of only the configuration sections ``stage`` reads."""
        return _digest({k: self.raw.get(k) for k in STAGE_CONFIG_KEYS[stage]})

    def rel(self, path: Path) -> str:
        """Path label stable across machines: relative to the config or output dir."""
        path = Path(path).resolve()
        for root, tag in ((self.out.resolve(), ""), (self.base_dir.resolve(), "config:")):
            try:
                return tag + path.relative_to(root).as_posix()
            except ValueError:
                pass
        return path.as_posix()


def load_config(path, out=None, seed: int | None = None, hw_overrides: Mapping[str, str] | None = None
                ) -> PipelineConfig:
    """Parse and validate a JSON pipeline config; every referenced file must load."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    base = path.parent
    if out is not None:
        raw["out"] = str(out)
    if seed is not None:
        raw.setdefault("hutchinson", {})["seed"] = seed
        raw.setdefault("calibration", {})["seed"] = seed
    if hw_overrides:
        raw.setdefault("hardware", {}).update(hw_overrides)
    try:
        cal = raw["calibration"]
        ev = raw.get("eval", {})
        thr = dict(raw.get("threshold", {}))
        per_layer = bool(thr.pop("per_layer_alignment", True))
        out_dir = Path(raw.get("out", "run"))
        cfg = PipelineConfig(
            base_dir=base,
            model=base / raw["model"],
            num_classes=int(raw["num_classes"]),
            calib_inputs=base / cal["inputs"],
            calib_labels=base / cal["labels"],
            calib_samples=int(cal.get("samples", 256)),
            calib_seed=int(cal.get("seed", 0)),
            eval_inputs=base / ev["inputs"] if "inputs" in ev else None,
            eval_labels=base / ev["labels"] if "labels" in ev else None,
            hutchinson=HutchinsonConfig(**raw.get("hutchinson", {})),
            threshold=ThresholdOptConfig(**thr),
            per_layer_alignment=per_layer,
            hardware=HardwareConfig().with_overrides(raw.get("hardware", {})),
            cr_points=[float(c) for c in raw.get("simulate", {}).get("cr_points", [])],
            out=out_dir if out_dir.is_absolute() else base / out_dir,
            raw=raw,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: invalid configuration: {exc!r}") from exc
    for c in cfg.cr_points:
        if not 0.0 <= c <= 1.0:
            raise ConfigError(f"{path}: compression ratio {c} outside [0, 1]")
    # Referenced files must exist and parse before any stage runs.
    try:
        load_model(cfg.model)
        load_dataset(cfg.calib_inputs, cfg.calib_labels, cfg.num_classes)
        if cfg.eval_inputs is not None:
            load_dataset(cfg.eval_inputs, cfg.eval_labels, cfg.num_classes)
    except FormatError as exc:
        raise ConfigError(str(exc)) from exc
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"cannot load inputs referenced by {path}: {exc}") from exc
    return cfg


def _digest(doc) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def _json(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _run_name(cr: float) -> str:
    return f"cr_{cr:.3f}"


class Pipeline:
    """Runs stages against one configuration and output directory."""

    def __init__(self, cfg: PipelineConfig, log: Callable[[str], None] = print):
        self.cfg = cfg
        self.out = cfg.out
        self.log = log
        self._model = None
        self._calib = None
        self._eval = None

    # inputs ---------------------------------------------------------------

    @property
    def model(self):
        if self._model is None:
            self._model = load_model(self.cfg.model)
        return self._model

    @property
    def calib(self):
        if self._calib is None:
            data = load_dataset(self.cfg.calib_inputs, self.cfg.calib_labels, self.cfg.num_classes)
            self._calib = data.calibration_subset(self.cfg.calib_samples, self.cfg.calib_seed)
        return self._calib

    @property
    def eval_data(self):
        if self._eval is None:
            if self.cfg.eval_inputs is None:
                self._eval = self.calib
            else:
                self._eval = load_dataset(self.cfg.eval_inputs, self.cfg.eval_labels, self.cfg.num_classes)
        return self._eval

    def path(self, *parts) -> Path:
        return self.out.joinpath(*parts)

    def _require(self, stage: str, path: Path, producer: str) -> Path:
        if not path.exists():
            raise StageError(stage, f"missing artifact produced by stage {producer!r}", path)
        return path

    def runs(self) -> list[tuple[str, float | None]]:
        return [(OPT_RUN, None)] + [(_run_name(c), c) for c in self.cfg.cr_points]

    def _records(self, stage):
        p = self._require(stage, self.path("sensitivity.csv"), "score")
        try:
            return read_sensitivity_csv(p)
        except (KeyError, ValueError) as exc:
            raise StageError(stage, f"malformed sensitivity report: {exc}", p) from exc

    # stages ---------------------------------------------------------------

    def stage_inputs(self, stage: str) -> list[Path]:
        c = self.cfg
        data = [c.model, c.calib_inputs, c.calib_labels]
        if stage == "score":
            return data
        if stage == "optimize":
            return data + [self.path("sensitivity.csv")]
        if stage == "compress":
            return [c.model, self.path("sensitivity.csv"), self.path("threshold.json")]
        if stage == "place":
            return [self.path("sensitivity.csv")] + [self.path("compress", r, "bitwidth_map.json") for r, _ in self.runs()]
        if stage == "simulate":
            ev = [c.eval_inputs, c.eval_labels] if c.eval_inputs is not None else data[1:]
            return [c.model, self.path("sensitivity.csv")] + ev + [
                self.path("place", r, "placement.csv") for r, _ in self.runs()]
        if stage == "report":
            return [self.path("simulate", r, n) for r, _ in self.runs() for n in ("metrics.json", "cost_report.json")]
        raise ValueError(f"unknown stage {stage!r}")

    def score(self) -> list[Path]:
        model = self.model
        records = score_strips(model, self.calib, decompose_strips(model), self.cfg.hutchinson)
        out = self.path("sensitivity.csv")
        out.parent.mkdir(parents=True, exist_ok=True)
        write_sensitivity_csv(out, records)
        scores = [r.score for r in records]
        self.log(f"score: R={len(records)} strips, score range [{min(scores):.6g}, {max(scores):.6g}]")
        return [out]

    def optimize(self) -> list[Path]:
        records = self._records("optimize")
        res = optimize_threshold(self.model, records, self.calib, self.cfg.threshold)
        cap = CapacityConfig.from_hardware(self.cfg.hardware)
        aligned = align_to_capacity(records, res.T, cap, per_layer=self.cfg.per_layer_alignment)
        bmap = assign_clusters(records, aligned)
        doc = {
            "T_star": res.T,
            "T_rank": res.T_rank,
            "L": res.L,
            "converged": res.converged,
            "iterations": len(res.log),
            "evaluations": res.evaluations,
            "q_before_alignment": res.q,
            "capacity": cap.C,
            "per_layer_alignment": self.cfg.per_layer_alignment,
            "aligned_threshold": ({str(k): v for k, v in aligned.items()} if isinstance(aligned, dict) else aligned),
            "q": bmap.q,
            "p_low": bmap.p_low,
            "R": bmap.R,
            "compression_ratio": compression_ratio(bmap),
        }
        thr = _write(self.path("threshold.json"), _json(doc))
        log = self.path("iteration_log.csv")
        write_iteration_log(log, res.log)
        self.log(f"optimize: T*={res.T:.6g} (rank {res.T_rank}), L={res.L:.6g}, aligned q={bmap.q}, "
                 f"p_low={bmap.p_low}, CR={compression_ratio(bmap):.4f}")
        return [thr, log]

    def _threshold_for(self, stage, records, cr):
        if cr is not None:
            return threshold_for_ratio(records, cr)
        p = self._require(stage, self.path("threshold.json"), "optimize")
        t = json.loads(p.read_text())["aligned_threshold"]
        return {int(k): v for k, v in t.items()} if isinstance(t, dict) else t

    def compress(self) -> list[Path]:
        records = self._records("compress")
        outputs = []
        for run, cr in self.runs():
            model_c, bmap = compress(self.model, records, self._threshold_for("compress", records, cr))
            outputs.append(_write(self.path("compress", run, "bitwidth_map.json"), bmap.to_json()))
            manifest = save_model(model_c, self.path("compress", run, "model", "model.json"))
            outputs.append(manifest)
            outputs.extend(sorted(manifest.parent.glob("*.cimt")))
            self.log(f"compress[{run}]: q={bmap.q}, p_low={bmap.p_low}, CR={compression_ratio(bmap):.4f}")
        return outputs

    def _placement(self, stage, run, records) -> tuple[TilePlacement, BitwidthMap, Any]:
        bpath = self._require(stage, self.path("compress", run, "bitwidth_map.json"), "compress")
        bmap = BitwidthMap.from_json(bpath.read_text())
        mpath = self._require(stage, self.path("compress", run, "model", "model.json"), "compress")
        try:
            model_c = load_model(mpath)
        except FormatError as exc:
            raise StageError(stage, str(exc), exc.path, exc.offset) from exc
        strips = {s.key: s for s in decompose_strips(model_c)}
        ordered = [strips[r.key] for r in rank_strips(records)]
        return place(bmap, ordered, self.cfg.hardware), bmap, model_c

    def place(self) -> list[Path]:
        records = self._records("place")
        outputs = []
        for run, _ in self.runs():
            placement, _, _ = self._placement("place", run, records)
            outputs.append(_write(self.path("place", run, "placement.csv"), placement.to_csv()))
            self.log(f"place[{run}]: {len(placement.select(8))} 8-bit tiles, {len(placement.select(4))} 4-bit tiles")
        return outputs

    def simulate(self) -> list[Path]:
        records = self._records("simulate")
        data = self.eval_data
        outputs = []
        for run, _ in self.runs():
            placement, bmap, model_c = self._placement("simulate", run, records)
            dump = self._require("simulate", self.path("place", run, "placement.csv"), "place")
            if dump.read_text() != placement.to_csv():
                raise StageError("simulate", "placement dump does not match the bitwidth map; re-run 'place'", dump)
            logits_xbar = quantized_forward(model_c, bmap, data.inputs, placement)
            logits_sw = quantized_forward(model_c, bmap, data.inputs)
            cost = simulate_cost(placement, conv_workload(model_c, data.n), self.cfg.hardware)
            metrics = {
                "run": run,
                "compression_ratio": compression_ratio(bmap),
                "q": bmap.q,
                "p_low": bmap.p_low,
                "accuracy": accuracy(logits_xbar, data.labels),
                "accuracy_software": accuracy(logits_sw, data.labels),
                "max_logit_diff": float(np.max(np.abs(logits_xbar - logits_sw))),
                "n_eval": data.n,
            }
            outputs.append(_write(self.path("simulate", run, "metrics.json"), _json(metrics)))
            outputs.append(_write(self.path("simulate", run, "cost_report.json"), cost.to_json()))
            outputs.append(_write(self.path("simulate", run, "cost_report.csv"), cost.to_csv()))
            self.log(f"simulate[{run}]: CR={metrics['compression_ratio']:.4f} acc={metrics['accuracy']:.4f} "
                     f"energy={cost.total.energy_total:.6g} J latency={cost.total.latency:.6g} s "
                     f"util8={cost.total.utilization_high:.2f}%")
        return outputs

    def report(self) -> list[Path]:
        rows = build_report_rows(self.path("simulate"))
        if not rows:
            raise StageError("report", "no simulate artifacts found", self.path("simulate"))
        csv_path, json_path = write_report(rows, self.out)
        self.log(f"report: {len(rows)} rows")
        return [csv_path, json_path]

    # orchestration --------------------------------------------------------

    def _manifest_path(self) -> Path:
        return self.path("manifest.json")

    def _load_manifest(self) -> dict:
        p = self._manifest_path()
        if p.exists():
            return json.loads(p.read_text())
        return {"stages": {}}

    def _hashes(self, paths) -> dict[str, str | None]:
        return {self.cfg.rel(p): (file_sha256(p) if Path(p).exists() else None) for p in paths}

    def run_stage(self, stage: str, skip_unchanged: bool = False) -> bool:
        """Run one stage, recording hashes. Returns False if it was skipped."""
        manifest = self._load_manifest()
        inputs = {"config": self.cfg.stage_digest(stage), **self._hashes(self.stage_inputs(stage))}
        prev = manifest["stages"].get(stage)
        if skip_unchanged and prev is not None and prev["inputs"] == inputs:
            current = {k: (file_sha256(self.out / k) if (self.out / k).exists() else None) for k in prev["outputs"]}
            if current == prev["outputs"]:
                self.log(f"{stage}: up to date")
                return False
        start = time.perf_counter()
        try:
            outputs = getattr(self, stage)()
        except FormatError as exc:
            raise StageError(stage, str(exc), exc.path, exc.offset) from exc
        except ArithmeticError as exc:
            raise StageNumericError(stage, str(exc)) from exc
        elapsed = time.perf_counter() - start
        manifest = self._load_manifest()
        manifest["config_sha256"] = self.cfg.digest
        manifest["tool_version"] = __version__
        manifest["stages"][stage] = {"inputs": inputs, "outputs": self._hashes(outputs), "wall_clock_s": elapsed}
        # Downstream records are stale once an upstream stage re-runs.
        for later in STAGES[STAGES.index(stage) + 1 :]:
            entry = manifest["stages"].get(later)
            if entry is not None and entry["inputs"] != {"config": self.cfg.stage_digest(later),
                                                          **self._hashes(self.stage_inputs(later))}:
                manifest["stages"].pop(later)
        _write(self._manifest_path(), _json(manifest))
        return True

    def run_all(self, until: str | None = None) -> list[str]:
        """Run stages in order (through ``until``), skipping up-to-date ones."""
        stop = STAGES.index(until) if until else len(STAGES) - 1
        executed = []
        for stage in STAGES[: stop + 1]:
            if self.run_stage(stage, skip_unchanged=True):
                executed.append(stage)
        return executed


REPORT_COLUMNS = [
    "run", "compression_ratio", "accuracy", "energy_total", "energy_adc", "energy_accum", "energy_other",
    "latency", "utilization_high", "utilization_low", "tiles_high", "tiles_low",
]


def build_report_rows(simulate_dir) -> list[dict]:
    """One row per simulate run, recomputed from its stored artifacts, sorted by CR."""
    rows = []
    for metrics_path in sorted(Path(simulate_dir).glob("*/metrics.json")):
        metrics = json.loads(metrics_path.read_text())
        total = json.loads((metrics_path.parent / "cost_report.json").read_text())["total"]
        row = {"run": metrics["run"], "compression_ratio": metrics["compression_ratio"],
               "accuracy": metrics["accuracy"]}
        row.update({k: total[k] for k in REPORT_COLUMNS[3:]})
        rows.append(row)
    return sorted(rows, key=lambda r: (r["compression_ratio"], r["run"]))


def write_report(rows, out_dir) -> tuple[Path, Path]:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in rows:
        w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in REPORT_COLUMNS])
    out_dir = Path(out_dir)
    return _write(out_dir / "report.csv", buf.getvalue()), _write(out_dir / "report.json", _json(rows))
