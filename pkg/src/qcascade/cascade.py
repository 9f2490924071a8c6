"""End-to-end construction and execution of the two-stage cascade.

build_cascade wires the whole toolflow: wordlength selection, scaling-factor
search, confidence tuning, and architecture sizing for both units. run_cascade
executes the runtime dataflow (every sample through the low-precision unit,
confidence test, forwarded samples recomputed from scratch on the
high-precision unit). A small discrete-event simulation cross-checks the
throughput combining formula.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import ceu, dse, engine, quantizer
from .model import EvalSet, ModelGraph, ValidationError

DEFAULT_TOLERANCE_GRID = (0.0, 0.005, 0.01, 0.02, 0.03, 0.05)


class BuildStageError(Exception):
    """Failure inside one named stage of the toolflow."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class CascadeSystem:
    graph: ModelGraph
    lpu: engine.QuantizedModel
    hpu: engine.QuantizedModel
    ceu_config: ceu.CeuConfig
    lpu_arch: dse.ArchConfig
    hpu_arch: dse.ArchConfig
    lpu_perf: dse.PerfEstimate
    hpu_perf: dse.PerfEstimate
    cascade_tp: float
    speedup: float
    baseline: dse.BaselineDescriptor
    tuning: ceu.TuningReport
    sweep: list[quantizer.SweepPoint]
    reference_error: float
    tolerance: float
    metric: str
    seed: int
    device: dse.DeviceModel
    mode: str = "time_shared"
    paper_faithful: bool = False

    def __post_init__(self) -> None:
        if self.lpu.scheme.wordlength > self.hpu.scheme.wordlength:
            raise ValidationError("low-precision wordlength exceeds high-precision")
        if not self.degenerate and not self.lpu.derived:
            raise ValidationError("low-precision weights must derive from the "
                                  "high-precision integers")

    @property
    def degenerate(self) -> bool:
        return self.lpu.scheme.wordlength == self.hpu.scheme.wordlength

    def weight_storage_bits(self) -> int:
        """Persistent weight storage of the whole cascade; the low-precision
        view is derived at run time so only the high-precision copy counts."""
        lpu_bits = 0 if self.lpu is self.hpu else self.lpu.weight_storage_bits()
        return self.hpu.weight_storage_bits() + lpu_bits

    def to_dict(self) -> dict:
        return {
            "lpu_wordlength": self.lpu.scheme.wordlength,
            "hpu_wordlength": self.hpu.scheme.wordlength,
            "lpu_scheme": json.loads(self.lpu.scheme.to_json()),
            "hpu_scheme": json.loads(self.hpu.scheme.to_json()),
            "ceu": {"M": self.ceu_config.M, "N": self.ceu_config.N, "th": self.ceu_config.th},
            "lpu_arch": self.lpu_arch.to_dict(),
            "hpu_arch": self.hpu_arch.to_dict(),
            "lpu_perf": self.lpu_perf.to_dict(),
            "hpu_perf": self.hpu_perf.to_dict(),
            "cascade_throughput": self.cascade_tp,
            "baseline": {
                "wordlength": self.baseline.wordlength,
                "throughput": self.baseline.throughput,
                "error": self.baseline.error,
            },
            "speedup": self.speedup,
            "forwarded_fraction": self.tuning.forwarded_fraction,
            "tuning": json.loads(self.tuning.to_json()),
            "sweep": [
                {"wordlength": p.wordlength, "error": p.error} for p in self.sweep
            ],
            "reference_error": self.reference_error,
            "tolerance": self.tolerance,
            "metric": self.metric,
            "seed": self.seed,
            "mode": self.mode,
            "paper_faithful": self.paper_faithful,
            "weight_storage_bits": self.weight_storage_bits(),
            "device": json.loads(self.device.to_json()),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


@dataclass
class RunStats:
    total: int
    forwarded: int
    lpu_only: int
    lpu_top1_error: float | None = None
    lpu_top5_error: float | None = None
    hpu_top1_error: float | None = None
    hpu_top5_error: float | None = None
    cascade_error: float | None = None
    wall_seconds: float = 0.0

    def __post_init__(self) -> None:
        assert self.forwarded + self.lpu_only == self.total

    @property
    def forwarded_fraction(self) -> float:
        return self.forwarded / self.total if self.total else 0.0

    def to_dict(self, include_timing: bool = False) -> dict:
        d = {
            "total": self.total,
            "forwarded": self.forwarded,
            "lpu_only": self.lpu_only,
            "forwarded_fraction": self.forwarded_fraction,
            "lpu_top1_error": self.lpu_top1_error,
            "lpu_top5_error": self.lpu_top5_error,
            "hpu_top1_error": self.hpu_top1_error,
            "hpu_top5_error": self.hpu_top5_error,
            "cascade_error": self.cascade_error,
        }
        if include_timing:
            d["wall_seconds"] = self.wall_seconds
        return d


def _stage(name: str):
    def wrap(fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except Exception as e:  # noqa: BLE001 - rewrapped with stage identity
            raise BuildStageError(name, e) from e

    return wrap


def build_cascade(
    model: ModelGraph,
    eval_set: EvalSet,
    device: dse.DeviceModel | None = None,
    tolerance: float = 0.01,
    metric: str = "top1",
    seed: int = 0,
    paper_faithful: bool = False,
    wordlengths: tuple[int, ...] = quantizer.DEFAULT_WORDLENGTHS,
    mode: str = "time_shared",
    sweep: list[quantizer.SweepPoint] | None = None,
) -> CascadeSystem:
    """Run the full toolflow and assemble the cascade. Deterministic for fixed
    inputs and seed. A precomputed wordlength sweep can be passed to skip the
    profiling and search stages."""
    if device is None:
        device = dse.default_device()
    if sweep is None:
        stats = _stage("profile")(
            quantizer.profile_layer_ranges, model, eval_set, metric=metric
        )
        sweep = _stage("scaling-factor-search")(
            quantizer.sweep_wordlengths, model, eval_set, metric, wordlengths, stats
        )
    selection = _stage("wordlength-selection")(
        quantizer.select_wordlengths,
        model,
        eval_set,
        tolerance,
        metric=metric,
        device=device,
        wordlengths=wordlengths,
        sweep=sweep,
        seed=seed,
        paper_faithful=paper_faithful,
    )
    hpu = _stage("quantize-hpu")(engine.QuantizedModel.from_master, model, selection.hpu)
    if selection.lpu.wordlength < selection.hpu.wordlength:
        lpu = _stage("derive-lpu")(engine.QuantizedModel.derive, hpu, selection.lpu)
    else:
        lpu = hpu

    lpu_probs = _stage("lpu-predictions")(engine.forward_batch, lpu, eval_set.samples)
    hpu_probs = _stage("hpu-predictions")(engine.forward_batch, hpu, eval_set.samples)
    k = engine.metric_k(metric)
    hpu_topk = engine.topk_indices(hpu_probs, k)
    lpu_preds = [ceu.SortedProbVector.from_probs(p) for p in lpu_probs]
    ceu_config, tuning = _stage("ceu-tuning")(
        ceu.tune_ceu,
        lpu_preds,
        hpu_topk,
        eval_set.labels,
        tolerance,
        metric=metric,
        split=not paper_faithful,
        seed=seed,
    )

    lpu_arch, lpu_perf = _stage("dse-lpu")(dse.optimize_unit, model, lpu.scheme, device)
    hpu_arch, hpu_perf = _stage("dse-hpu")(dse.optimize_unit, model, hpu.scheme, device)
    cascade_tp = _stage("cascade-throughput")(
        dse.cascade_throughput,
        lpu_perf.throughput,
        hpu_perf.throughput,
        tuning.forwarded_fraction,
        mode,
    )
    speedup, baseline = _stage("baseline")(
        dse.baseline_speedup,
        model,
        eval_set,
        device,
        tolerance,
        cascade_tp,
        metric,
        sweep,
    )
    return CascadeSystem(
        graph=model,
        lpu=lpu,
        hpu=hpu,
        ceu_config=ceu_config,
        lpu_arch=lpu_arch,
        hpu_arch=hpu_arch,
        lpu_perf=lpu_perf,
        hpu_perf=hpu_perf,
        cascade_tp=cascade_tp,
        speedup=speedup,
        baseline=baseline,
        tuning=tuning,
        sweep=sweep,
        reference_error=selection.reference_error,
        tolerance=tolerance,
        metric=metric,
        seed=seed,
        device=device,
        mode=mode,
        paper_faithful=paper_faithful,
    )


def run_cascade(
    sys: CascadeSystem, samples: np.ndarray, labels: np.ndarray | None = None
) -> tuple[np.ndarray, RunStats]:
    """Execute the runtime dataflow over `samples`.

    Every sample runs on the low-precision unit; unconfident ones are
    recomputed from scratch on the high-precision unit, whose prediction then
    stands. Returns top-1 predictions and exact stats.
    """
    t0 = time.perf_counter()
    samples = np.asarray(samples, dtype=np.float32)
    if samples.ndim == 3:
        samples = samples[None, ...]
    if tuple(samples.shape[1:]) != tuple(sys.graph.input_shape):
        raise ValidationError(
            f"sample shape {samples.shape[1:]} != input shape {sys.graph.input_shape}"
        )
    lpu_probs = engine.forward_batch(sys.lpu, samples)
    lpu_preds = [ceu.SortedProbVector.from_probs(p) for p in lpu_probs]
    confident = np.array(
        [ceu.is_confident(p, sys.ceu_config) for p in lpu_preds], dtype=bool
    )
    predictions = np.array([p.top1 for p in lpu_preds], dtype=np.int64)
    fwd_idx = np.flatnonzero(~confident)
    hpu_probs = None
    if len(fwd_idx):
        hpu_probs = engine.forward_batch(sys.hpu, samples[fwd_idx])
        predictions[fwd_idx] = engine.topk_indices(hpu_probs, 1)[:, 0]
    stats = RunStats(
        total=len(samples),
        forwarded=int(len(fwd_idx)),
        lpu_only=int(len(samples) - len(fwd_idx)),
    )
    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64)
        k5 = min(5, lpu_probs.shape[1])
        stats.lpu_top1_error = engine.error_rate(lpu_probs, labels, "top1")
        stats.lpu_top5_error = float(
            1.0 - (engine.topk_indices(lpu_probs, k5) == labels[:, None]).any(1).mean()
        )
        hpu_all = engine.forward_batch(sys.hpu, samples)
        stats.hpu_top1_error = engine.error_rate(hpu_all, labels, "top1")
        stats.hpu_top5_error = float(
            1.0 - (engine.topk_indices(hpu_all, k5) == labels[:, None]).any(1).mean()
        )
        stats.cascade_error = float((predictions != labels).mean())
    stats.wall_seconds = time.perf_counter() - t0
    return predictions, stats


def simulate_timeline(
    sys_or_rates: CascadeSystem | tuple[float, float],
    num_samples: int,
    forwarded_fraction: float,
    mode: str | None = None,
) -> float:
    """Discrete-event simulation of the two units at their estimated
    per-sample latencies; validates the closed-form combining formula.

    Forwarded samples are spread evenly through the stream. In time-shared
    mode one device alternates between the units; in partitioned mode the
    units run concurrently and the slower stream dominates.
    """
    if isinstance(sys_or_rates, CascadeSystem):
        t_l, t_h = sys_or_rates.lpu_perf.throughput, sys_or_rates.hpu_perf.throughput
        mode = mode or sys_or_rates.mode
    else:
        t_l, t_h = sys_or_rates
        mode = mode or "time_shared"
    if num_samples < 1 or not 0.0 <= forwarded_fraction <= 1.0:
        raise ValidationError("bad simulation parameters")
    lat_l, lat_h = 1.0 / t_l, 1.0 / t_h
    r = forwarded_fraction
    forwarded = [
        int((i + 1) * r) - int(i * r) > 0 for i in range(num_samples)
    ]
    if mode == "time_shared":
        clock = 0.0
        for fwd in forwarded:
            clock += lat_l
            if fwd:
                clock += lat_h
        return num_samples / clock
    lpu_free = 0.0
    hpu_free = 0.0
    done = 0.0
    for fwd in forwarded:
        lpu_free += lat_l
        if fwd:
            hpu_free = max(hpu_free, lpu_free) + lat_h
            done = hpu_free
        else:
            done = max(done, lpu_free)
    return num_samples / done


@dataclass
class Report:
    """Serialisable summary: system, run stats, and the tolerance sweep."""

    system: dict
    stats: dict | None = None
    tolerance_sweep: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(
            {
                "system": self.system,
                "stats": self.stats,
                "tolerance_sweep": self.tolerance_sweep,
            },
            sort_keys=True,
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "Report":
        d = json.loads(text)
        return cls(d["system"], d["stats"], d["tolerance_sweep"])

    def plot_csv(self) -> str:
        lines = ["tolerance,speedup,forwarded_fraction"]
        for row in self.tolerance_sweep:
            lines.append(
                f"{row['tolerance']:.6g},{row['speedup']:.6g},{row['forwarded_fraction']:.6g}"
            )
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        s = self.system
        out = [
            "two-stage cascade",
            f"  wordlengths        LPU {s['lpu_wordlength']}  HPU {s['hpu_wordlength']}"
            f"  baseline {s['baseline']['wordlength']}",
            f"  confidence test    M={s['ceu']['M']} N={s['ceu']['N']} th={s['ceu']['th']:.6f}",
            f"  forwarded fraction {s['forwarded_fraction']:.4f}",
            f"  reference error    {s['reference_error']:.4f}  ({s['metric']})",
            f"  tolerance          {s['tolerance']:.4f}",
            f"  throughput         LPU {s['lpu_perf']['throughput']:.4g}/s"
            f"  HPU {s['hpu_perf']['throughput']:.4g}/s"
            f"  cascade {s['cascade_throughput']:.4g}/s",
            f"  baseline           {s['baseline']['throughput']:.4g}/s"
            f"  speedup {s['speedup']:.3f}x",
        ]
        if self.stats:
            out.append(
                f"  measured           forwarded {self.stats['forwarded']}/{self.stats['total']}"
                f"  cascade error {self.stats['cascade_error']}"
            )
        if self.tolerance_sweep:
            out.append("  tolerance  speedup  forwarded")
            for row in self.tolerance_sweep:
                out.append(
                    f"  {row['tolerance']:9.4f}  {row['speedup']:7.3f}"
                    f"  {row['forwarded_fraction']:9.4f}"
                )
        return "\n".join(out) + "\n"


def tolerance_sweep(
    sys: CascadeSystem,
    eval_set: EvalSet,
    tolerances: tuple[float, ...] = DEFAULT_TOLERANCE_GRID,
) -> list[dict]:
    """Re-tune the confidence unit of a built system across tolerances and
    recompute throughput and per-tolerance baseline speedup. The unit pair is
    held fixed, so larger tolerances never forward more."""
    lpu_probs = engine.forward_batch(sys.lpu, eval_set.samples)
    hpu_probs = engine.forward_batch(sys.hpu, eval_set.samples)
    k = engine.metric_k(sys.metric)
    lpu_preds = [ceu.SortedProbVector.from_probs(p) for p in lpu_probs]
    hpu_topk = engine.topk_indices(hpu_probs, k)
    rows = []
    for tol in tolerances:
        cfg, tuning = ceu.tune_ceu(
            lpu_preds,
            hpu_topk,
            eval_set.labels,
            tol,
            metric=sys.metric,
            split=not sys.paper_faithful,
            seed=sys.seed,
        )
        tp = dse.cascade_throughput(
            sys.lpu_perf.throughput,
            sys.hpu_perf.throughput,
            tuning.forwarded_fraction,
            sys.mode,
        )
        try:
            speedup, baseline = dse.baseline_speedup(
                sys.graph, eval_set, sys.device, tol, tp, sys.metric, sys.sweep
            )
            baseline_wl = baseline.wordlength
        except dse.NoFeasibleConfigError:
            speedup, baseline_wl = float("nan"), None
        rows.append(
            {
                "tolerance": tol,
                "forwarded_fraction": tuning.forwarded_fraction,
                "cascade_throughput": tp,
                "speedup": speedup,
                "baseline_wordlength": baseline_wl,
                "ceu": {"M": cfg.M, "N": cfg.N, "th": cfg.th},
                "cascade_error": tuning.cascade_error,
            }
        )
    return rows


def report(
    sys: CascadeSystem,
    stats: RunStats | None = None,
    sweep_rows: list[dict] | None = None,
) -> Report:
    return Report(
        system=sys.to_dict(),
        stats=stats.to_dict() if stats else None,
        tolerance_sweep=sweep_rows or [],
    )
