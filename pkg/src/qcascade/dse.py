"""Roofline-based design-space exploration for the matrix-multiply unit.

A device is a budget of MACC-capable resource units whose per-unit MACC yield
grows as the wordlength shrinks, plus a clock, DRAM bandwidth, and on-chip
memory. A candidate architecture is a power-of-two tiling of the matrix
dimensions, fully unrolled spatially: one processing element per output
element of a tile, tile_k parallel multiply-accumulates per element. The
estimator is the classic roofline: attainable ops = min(compute peak,
bandwidth x operational intensity).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .engine import MMConfig, conv_out_hw
from .model import Conv, FullyConnected, ModelGraph, ValidationError, infer_shapes
from .quantizer import QuantScheme

MAX_TILE = 1024
DEFAULT_BATCH = 16


class NoFeasibleConfigError(Exception):
    """No architecture fits the device constraints."""


@dataclass
class DeviceModel:
    """Target device resources.

    macc_per_unit maps wordlength -> MACCs realisable per resource unit;
    entries may be fractional (units pairing up for wide arithmetic) but must
    be positive and non-increasing in wordlength. Wordlengths between listed
    keys use the next larger key's entry.
    """

    compute_budget: int
    macc_per_unit: dict[int, float]
    clock_mhz: float
    dram_bandwidth: float  # bytes/s
    on_chip_mem: int  # bytes
    name: str = "device"

    def __post_init__(self) -> None:
        if self.compute_budget < 1 or self.clock_mhz <= 0:
            raise ValidationError("compute budget and clock must be positive")
        if self.dram_bandwidth < 0 or self.on_chip_mem < 1:
            raise ValidationError("bad memory parameters")
        keys = sorted(self.macc_per_unit)
        vals = [self.macc_per_unit[k] for k in keys]
        if not keys or any(v <= 0 for v in vals):
            raise ValidationError("macc_per_unit entries must be positive")
        if any(a < b for a, b in zip(vals, vals[1:])):
            raise ValidationError("macc_per_unit must be non-increasing in wordlength")

    def macc_for(self, wordlength: int) -> float:
        for key in sorted(self.macc_per_unit):
            if wordlength <= key:
                return self.macc_per_unit[key]
        raise ValidationError(
            f"no macc_per_unit entry covers wordlength {wordlength}"
        )

    def max_maccs(self, wordlength: int) -> float:
        return self.compute_budget * self.macc_for(wordlength)

    def to_json(self) -> str:
        return json.dumps(
            {
                "name": self.name,
                "compute_budget": self.compute_budget,
                "macc_per_unit": {str(k): v for k, v in sorted(self.macc_per_unit.items())},
                "clock_mhz": self.clock_mhz,
                "dram_bandwidth_bytes_per_s": self.dram_bandwidth,
                "on_chip_mem_bytes": self.on_chip_mem,
            },
            sort_keys=True,
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "DeviceModel":
        d = json.loads(text)
        return cls(
            compute_budget=int(d["compute_budget"]),
            macc_per_unit={int(k): float(v) for k, v in d["macc_per_unit"].items()},
            clock_mhz=float(d["clock_mhz"]),
            dram_bandwidth=float(d["dram_bandwidth_bytes_per_s"]),
            on_chip_mem=int(d["on_chip_mem_bytes"]),
            name=d.get("name", "device"),
        )


def default_device() -> DeviceModel:
    """Generic mid-range FPGA-class device; MACC yield doubles from 8- to
    4-bit arithmetic and halves at 16-bit (unit pairing)."""
    return DeviceModel(
        compute_budget=512,
        macc_per_unit={4: 2.0, 8: 1.0, 16: 0.5},
        clock_mhz=200.0,
        dram_bandwidth=12.8e9,
        on_chip_mem=2 * 1024 * 1024,
        name="generic-512",
    )


@dataclass(frozen=True)
class ArchConfig:
    num_pe: int
    macc_per_pe: int
    mm_tiles: MMConfig
    wordlength: int

    @property
    def total_maccs(self) -> int:
        return self.num_pe * self.macc_per_pe

    def working_set_bytes(self) -> float:
        t = self.mm_tiles
        elems = t.tile_m * t.tile_k + t.tile_k * t.tile_n + t.tile_m * t.tile_n
        return elems * self.wordlength / 8

    def validate(self, dev: DeviceModel) -> None:
        if self.total_maccs > dev.max_maccs(self.wordlength):
            raise ValidationError(
                f"{self.total_maccs} MACCs exceed device capacity "
                f"{dev.max_maccs(self.wordlength)} at {self.wordlength} bits"
            )
        if self.working_set_bytes() > dev.on_chip_mem:
            raise ValidationError("tile working set exceeds on-chip memory")

    def to_dict(self) -> dict:
        return {
            "num_pe": self.num_pe,
            "macc_per_pe": self.macc_per_pe,
            "tile_m": self.mm_tiles.tile_m,
            "tile_n": self.mm_tiles.tile_n,
            "tile_k": self.mm_tiles.tile_k,
            "wordlength": self.wordlength,
        }


@dataclass
class LayerWork:
    name: str
    m: int  # output rows (channels/features)
    k: int  # reduction length
    n: int  # output columns across the batch
    maccs: int  # per inference
    traffic_bytes: float  # per inference


@dataclass
class WorkloadSummary:
    layers: list[LayerWork]
    batch: int
    total_maccs: int
    total_traffic_bytes: float

    @property
    def total_ops(self) -> int:
        return 2 * self.total_maccs

    @property
    def operational_intensity(self) -> float:
        if self.total_traffic_bytes == 0:
            return math.inf
        return self.total_ops / self.total_traffic_bytes


def _mm_dims(layer, in_shape: tuple[int, ...], batch: int) -> tuple[int, int, int]:
    """(M, K, N) of the lowered matrix multiply across a whole batch."""
    if isinstance(layer, Conv):
        _, h, w = in_shape
        oh, ow = conv_out_hw(layer, h, w)
        return layer.out_ch, layer.in_ch * layer.kernel_h * layer.kernel_w, batch * oh * ow
    return layer.out_features, layer.in_features, batch


def summarize_workload(
    model: ModelGraph,
    scheme: QuantScheme,
    tiles: MMConfig,
    batch: int = DEFAULT_BATCH,
) -> WorkloadSummary:
    """MACC counts and off-chip traffic of the conv/FC layers for one tiling.

    Weights are re-fetched once per output-tile column pass, activations once
    per output-tile row pass, outputs written once; all byte counts scale with
    the scheme wordlength. Counts are normalised per inference.
    """
    bytes_per_val = scheme.wordlength / 8
    shapes = infer_shapes(model)
    layers = []
    total_maccs = 0
    total_traffic = 0.0
    for i, layer in enumerate(model.layers):
        if not isinstance(layer, (Conv, FullyConnected)):
            continue
        in_shape = model.input_shape if i == 0 else shapes[i - 1]
        m, k, n = _mm_dims(layer, in_shape, batch)
        maccs_batch = m * k * n
        n_m = math.ceil(m / tiles.tile_m)
        n_n = math.ceil(n / tiles.tile_n)
        weight_bytes = n_n * m * k * bytes_per_val
        act_bytes = n_m * k * n * bytes_per_val
        out_bytes = m * n * bytes_per_val
        traffic_batch = weight_bytes + act_bytes + out_bytes
        layers.append(
            LayerWork(
                layer.name,
                m,
                k,
                n,
                maccs_batch // batch,
                traffic_batch / batch,
            )
        )
        total_maccs += maccs_batch // batch
        total_traffic += traffic_batch / batch
    return WorkloadSummary(layers, batch, total_maccs, total_traffic)


@dataclass
class PerfEstimate:
    throughput: float  # inferences/s
    attainable_ops: float  # ops/s
    operational_intensity: float  # ops/byte
    bound: str  # "compute" | "memory"
    peak_ops: float

    def __post_init__(self) -> None:
        assert self.attainable_ops <= self.peak_ops * (1 + 1e-12), "above compute roof"

    def to_dict(self) -> dict:
        return {
            "throughput": self.throughput,
            "attainable_ops": self.attainable_ops,
            "operational_intensity": self.operational_intensity,
            "bound": self.bound,
            "peak_ops": self.peak_ops,
        }


def roofline_perf(cfg: ArchConfig, wl: WorkloadSummary, dev: DeviceModel) -> PerfEstimate:
    """Attainable ops = min(2 * PE * MACC * clock, bandwidth * intensity);
    throughput divides by the ops of one inference."""
    cfg.validate(dev)
    peak = 2.0 * cfg.num_pe * cfg.macc_per_pe * dev.clock_mhz * 1e6
    oi = wl.operational_intensity
    memory_roof = dev.dram_bandwidth * oi if math.isfinite(oi) else math.inf
    attainable = min(peak, memory_roof)
    bound = "compute" if peak <= memory_roof else "memory"
    throughput = attainable / wl.total_ops if wl.total_ops else math.inf
    return PerfEstimate(throughput, attainable, oi, bound, peak)


def _pow2_caps(model: ModelGraph, batch: int) -> tuple[int, int, int]:
    """Largest useful tile per dimension: next power of two covering the
    biggest lowered matrix, capped at MAX_TILE. Larger tiles only add idle
    units."""
    shapes = infer_shapes(model)
    m = k = n = 1
    for i, layer in enumerate(model.layers):
        if not isinstance(layer, (Conv, FullyConnected)):
            continue
        in_shape = model.input_shape if i == 0 else shapes[i - 1]
        lm, lk, ln = _mm_dims(layer, in_shape, batch)
        m, k, n = max(m, lm), max(k, lk), max(n, ln)

    def cap(v: int) -> int:
        return min(MAX_TILE, 1 << math.ceil(math.log2(v)))

    return cap(m), cap(k), cap(n)


def optimize_unit(
    model: ModelGraph,
    scheme: QuantScheme,
    dev: DeviceModel,
    batch: int = DEFAULT_BATCH,
) -> tuple[ArchConfig, PerfEstimate]:
    """Exhaustively enumerate power-of-two tilings within the resource and
    memory constraints; return the highest-throughput configuration (ties:
    fewer MACCs, then smaller tiles)."""
    cap_m, cap_k, cap_n = _pow2_caps(model, batch)
    macc_cap = dev.max_maccs(scheme.wordlength)
    best: tuple | None = None
    tm = 1
    while tm <= cap_m:
        tn = 1
        while tn <= cap_n:
            tk = 1
            while tk <= cap_k:
                volume = tm * tn * tk
                if volume <= macc_cap:
                    tiles = MMConfig(tm, tn, tk)
                    cfg = ArchConfig(tm * tn, tk, tiles, scheme.wordlength)
                    if cfg.working_set_bytes() <= dev.on_chip_mem:
                        wl = summarize_workload(model, scheme, tiles, batch)
                        perf = roofline_perf(cfg, wl, dev)
                        key = (-perf.throughput, volume, tm, tn, tk)
                        if best is None or key < best[0]:
                            best = (key, cfg, perf)
                tk *= 2
            tn *= 2
        tm *= 2
    if best is None:
        raise NoFeasibleConfigError(
            f"no tiling fits: budget {macc_cap} MACCs, "
            f"{dev.on_chip_mem} bytes on-chip at {scheme.wordlength} bits"
        )
    return best[1], best[2]


def cascade_throughput(
    t_lpu: float, t_hpu: float, forwarded_fraction: float, mode: str = "time_shared"
) -> float:
    """Combined throughput when the low-precision unit sees every sample and
    the high-precision unit re-processes the forwarded fraction.

    time_shared: both units occupy the whole device in turn,
    1 / (1/T_L + r/T_H). partitioned: units run concurrently on a static
    split, min(T_L, T_H/r).
    """
    r = forwarded_fraction
    if not 0.0 <= r <= 1.0:
        raise ValidationError(f"forwarded fraction {r} outside [0, 1]")
    if t_lpu <= 0 or t_hpu <= 0:
        raise ValidationError("throughputs must be positive")
    if mode == "time_shared":
        return 1.0 / (1.0 / t_lpu + r / t_hpu)
    if mode == "partitioned":
        return t_lpu if r == 0 else min(t_lpu, t_hpu / r)
    raise ValidationError(f"unknown mode {mode!r}")


@dataclass
class BaselineDescriptor:
    wordlength: int
    throughput: float
    error: float


def baseline_speedup(
    model: ModelGraph,
    eval_set,
    dev: DeviceModel,
    tolerance: float,
    cascade_tp: float,
    metric: str = "top1",
    sweep=None,
    batch: int = DEFAULT_BATCH,
) -> tuple[float, BaselineDescriptor]:
    """Speedup of the cascade over the best single-stage design meeting the
    same tolerance (the smallest qualifying wordlength)."""
    from . import engine, quantizer

    if sweep is None:
        sweep = quantizer.sweep_wordlengths(model, eval_set, metric)
    ref_err = engine.error_rate(
        engine.forward_float(model, eval_set.samples), eval_set.labels, metric
    )
    point = None
    for pt in sorted(sweep, key=lambda p: p.wordlength):
        if pt.error - ref_err <= tolerance:
            point = pt
            break
    if point is None:
        raise NoFeasibleConfigError(
            f"no baseline wordlength meets tolerance {tolerance}"
        )
    _, perf = optimize_unit(model, point.scheme, dev, batch)
    baseline = BaselineDescriptor(point.wordlength, perf.throughput, point.error)
    return cascade_tp / perf.throughput, baseline
