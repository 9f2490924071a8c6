"""Dynamic fixed-point quantisation.

Uniform wordlength per scheme, one power-of-two scaling factor (frac_bits) per
layer and tensor kind. Rounding is round-half-to-even everywhere; saturation is
silent and counted. Includes range profiling, the scaling-factor search, the
LPU/HPU wordlength selection, and HPU->LPU weight derivation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .model import EvalSet, ModelGraph, ValidationError, has_weights

DEFAULT_WORDLENGTHS = tuple(range(2, 17))
MAX_FRAC_BITS = 48  # |frac_bits| cap; guards degenerate maxima, not a tuning knob


class InfeasibleToleranceError(Exception):
    """No scanned wordlength degrades accuracy within the tolerance."""


@dataclass(frozen=True)
class FixedPointFormat:
    """Signed fixed point: real value = integer * 2**(-frac_bits)."""

    wordlength: int
    frac_bits: int

    def __post_init__(self) -> None:
        if not 2 <= self.wordlength <= 16:
            raise ValidationError(f"wordlength {self.wordlength} outside [2, 16]")
        if abs(self.frac_bits) > MAX_FRAC_BITS:
            raise ValidationError(f"frac_bits {self.frac_bits} out of range")

    @property
    def qmin(self) -> int:
        return -(1 << (self.wordlength - 1))

    @property
    def qmax(self) -> int:
        return (1 << (self.wordlength - 1)) - 1

    @property
    def scale(self) -> float:
        return 2.0 ** (-self.frac_bits)

    @property
    def max_value(self) -> float:
        return self.qmax * self.scale

    @property
    def min_value(self) -> float:
        return self.qmin * self.scale


@dataclass
class QuantizedTensor:
    values: np.ndarray  # int64, any shape
    fmt: FixedPointFormat
    saturated: int = 0  # elements clamped during quantisation

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.int64)
        if self.values.size and (
            int(self.values.min()) < self.fmt.qmin or int(self.values.max()) > self.fmt.qmax
        ):
            raise ValidationError(
                f"values outside [{self.fmt.qmin}, {self.fmt.qmax}] for "
                f"{self.fmt.wordlength}-bit storage"
            )

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.values.shape)


@dataclass(frozen=True)
class LayerFormats:
    """Formats of one layer: its weights (None if weightless) and the
    activation tensor it consumes."""

    weight: FixedPointFormat | None
    activation: FixedPointFormat


@dataclass
class QuantScheme:
    """Uniform wordlength with per-layer scaling factors."""

    wordlength: int
    layers: dict[str, LayerFormats]

    def __post_init__(self) -> None:
        for name, fmts in self.layers.items():
            fs = [fmts.activation] + ([fmts.weight] if fmts.weight else [])
            for f in fs:
                if f.wordlength != self.wordlength:
                    raise ValidationError(
                        f"{name}: format wordlength {f.wordlength} != scheme {self.wordlength}"
                    )

    def to_json(self) -> str:
        doc = {
            "wordlength": self.wordlength,
            "layers": {
                name: {
                    "weight_frac_bits": fmts.weight.frac_bits if fmts.weight else None,
                    "activation_frac_bits": fmts.activation.frac_bits,
                }
                for name, fmts in self.layers.items()
            },
        }
        return json.dumps(doc, sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "QuantScheme":
        doc = json.loads(text)
        wl = int(doc["wordlength"])
        layers = {}
        for name, d in doc["layers"].items():
            wfb = d["weight_frac_bits"]
            layers[name] = LayerFormats(
                weight=None if wfb is None else FixedPointFormat(wl, int(wfb)),
                activation=FixedPointFormat(wl, int(d["activation_frac_bits"])),
            )
        return cls(wl, layers)


@dataclass
class LayerStats:
    """Profiled ranges and per-layer quantisation impact.

    activation_max_abs is keyed by layer name and records the max |x| of the
    tensor *consumed* by that layer over the evaluation set (the raw input for
    the first layer). accuracy_impact[name] is the evaluation accuracy with
    only that layer quantised at probe_wordlength.
    """

    weight_max_abs: dict[str, float]
    activation_max_abs: dict[str, float]
    accuracy_impact: dict[str, float]
    probe_wordlength: int


def quantize_tensor(t: np.ndarray, fmt: FixedPointFormat) -> QuantizedTensor:
    """x -> clamp(round_half_even(x * 2**frac_bits), qmin, qmax)."""
    x = np.asarray(t, dtype=np.float64)
    scaled = np.round(x * (2.0**fmt.frac_bits))
    saturated = int(np.count_nonzero((scaled < fmt.qmin) | (scaled > fmt.qmax)))
    q = np.clip(scaled, fmt.qmin, fmt.qmax).astype(np.int64)
    return QuantizedTensor(q, fmt, saturated)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    return q.values.astype(np.float64) * q.fmt.scale


def rescale_int(values: np.ndarray, shift: int) -> np.ndarray:
    """Multiply int64 values by 2**shift exactly, rounding half to even for
    shift < 0. Raises on left shifts that would not fit in 64 bits."""
    v = np.asarray(values, dtype=np.int64)
    if shift == 0:
        return v.copy()
    if shift > 0:
        if v.size and int(np.abs(v).max()) >> max(0, 62 - shift):
            raise OverflowError("left shift exceeds 64-bit accumulator")
        return v << shift
    s = -shift
    if s >= 63:
        # everything rounds to 0 except values at/beyond +-2**62; formats cap
        # frac_bits well before this
        return np.zeros_like(v)
    floor = v >> s
    rem = v & ((np.int64(1) << s) - 1)
    half = np.int64(1) << (s - 1)
    round_up = (rem > half) | ((rem == half) & (floor & 1 == 1))
    return floor + round_up.astype(np.int64)


def requantize(values: np.ndarray, from_frac: int, fmt: FixedPointFormat) -> QuantizedTensor:
    """Shift accumulator-domain integers to `fmt`, round half even, saturate."""
    shifted = rescale_int(values, fmt.frac_bits - from_frac)
    saturated = int(np.count_nonzero((shifted < fmt.qmin) | (shifted > fmt.qmax)))
    return QuantizedTensor(np.clip(shifted, fmt.qmin, fmt.qmax), fmt, saturated)


def derive_lpu_weights(hpu: QuantizedTensor, lpu_fmt: FixedPointFormat) -> QuantizedTensor:
    """Derive low-precision integers from the high-precision ones by arithmetic
    shift with round-half-even and saturation; the full-precision master is
    never consulted, so only the high-precision copy needs storing."""
    if lpu_fmt.wordlength > hpu.fmt.wordlength:
        raise ValidationError(
            f"target wordlength {lpu_fmt.wordlength} exceeds source {hpu.fmt.wordlength}"
        )
    return requantize(hpu.values, hpu.fmt.frac_bits, lpu_fmt)


def fit_frac_bits(max_abs: float, wordlength: int) -> int:
    """Largest frac_bits such that max_abs fits without saturation.

    All-zero tensors (max_abs == 0) default to wordlength - 1.
    """
    if max_abs <= 0.0 or not math.isfinite(max_abs):
        return wordlength - 1
    qmax = (1 << (wordlength - 1)) - 1
    f = math.floor(math.log2(qmax / max_abs))
    while max_abs * (2.0**f) > qmax:
        f -= 1
    while max_abs * (2.0 ** (f + 1)) <= qmax:
        f += 1
    return int(np.clip(f, -MAX_FRAC_BITS, MAX_FRAC_BITS))


def initial_scheme(model: ModelGraph, stats: LayerStats, wordlength: int) -> QuantScheme:
    """Range-only seed: per-layer frac_bits fit to the profiled maxima."""
    layers = {}
    for layer in model.layers:
        wfmt = None
        if has_weights(layer):
            w, b = model.weights[layer.name]
            wmax = max(stats.weight_max_abs[layer.name], float(np.abs(b).max(initial=0.0)))
            wfmt = FixedPointFormat(wordlength, fit_frac_bits(wmax, wordlength))
        afmt = FixedPointFormat(
            wordlength, fit_frac_bits(stats.activation_max_abs[layer.name], wordlength)
        )
        layers[layer.name] = LayerFormats(weight=wfmt, activation=afmt)
    return QuantScheme(wordlength, layers)


def profile_layer_ranges(
    model: ModelGraph,
    eval_set: EvalSet,
    probe_wordlength: int = 4,
    metric: str = "top1",
) -> LayerStats:
    """Gather per-layer weight/activation maxima and quantisation impact.

    Weight maxima are exact; activation maxima come from full-precision
    forward passes over the evaluation set. The impact record quantises one
    layer at a time at probe_wordlength (weights and input activation) while
    the rest stay full precision.
    """
    from . import engine

    if len(eval_set) == 0:
        raise ValidationError("empty evaluation set")
    weight_max = {
        layer.name: float(np.abs(model.weights[layer.name][0]).max())
        for layer in model.layers
        if has_weights(layer)
    }
    layer_inputs = engine.float_layer_inputs(model, eval_set.samples)
    act_max = {
        layer.name: float(np.abs(layer_inputs[i]).max())
        for i, layer in enumerate(model.layers)
    }
    stats = LayerStats(weight_max, act_max, {}, probe_wordlength)
    for layer in model.layers:
        probs = engine.forward_float(
            model, eval_set.samples, fake_quant_layer=layer.name, stats=stats
        )
        err = engine.error_rate(probs, eval_set.labels, metric)
        stats.accuracy_impact[layer.name] = 1.0 - err
    return stats


def _scheme_error(
    model: ModelGraph, eval_set: EvalSet, scheme: QuantScheme, metric: str
) -> float:
    from . import engine

    qmodel = engine.QuantizedModel.from_master(model, scheme)
    return engine.evaluate_accuracy(qmodel, eval_set, metric)


def _bump(scheme: QuantScheme, name: str, kind: str, delta: int) -> QuantScheme | None:
    fmts = scheme.layers[name]
    try:
        if kind == "weight":
            if fmts.weight is None:
                return None
            new = replace(fmts, weight=FixedPointFormat(
                scheme.wordlength, fmts.weight.frac_bits + delta))
        else:
            new = replace(fmts, activation=FixedPointFormat(
                scheme.wordlength, fmts.activation.frac_bits + delta))
    except ValidationError:
        return None
    layers = dict(scheme.layers)
    layers[name] = new
    return QuantScheme(scheme.wordlength, layers)


def search_scaling_factors(
    model: ModelGraph,
    eval_set: EvalSet,
    wordlength: int,
    metric: str = "top1",
    stats: LayerStats | None = None,
    refinement_sweeps: int = 2,
) -> QuantScheme:
    """Find per-layer scaling factors maximising evaluation accuracy at a
    fixed wordlength.

    Seeds each format from the profiled maxima, then hill-climbs: in layer
    order, each format tries frac_bits +1 then -1, keeping any change that
    does not increase the evaluation error; two full sweeps. Deterministic
    for fixed inputs, and the returned scheme is never worse than the seed.
    """
    if stats is None:
        stats = profile_layer_ranges(model, eval_set, metric=metric)
    scheme = initial_scheme(model, stats, wordlength)
    best_err = _scheme_error(model, eval_set, scheme, metric)
    for _ in range(refinement_sweeps):
        for layer in model.layers:
            for kind in ("weight", "activation"):
                for delta in (+1, -1):
                    cand = _bump(scheme, layer.name, kind, delta)
                    if cand is None:
                        break
                    err = _scheme_error(model, eval_set, cand, metric)
                    if err <= best_err:
                        scheme, best_err = cand, err
                        break
    return scheme


@dataclass
class SweepPoint:
    wordlength: int
    scheme: QuantScheme
    error: float


@dataclass
class WordlengthSelection:
    lpu: QuantScheme
    hpu: QuantScheme
    reference_error: float
    sweep: list[SweepPoint]
    lpu_candidates: list[dict] = field(default_factory=list)


def sweep_wordlengths(
    model: ModelGraph,
    eval_set: EvalSet,
    metric: str = "top1",
    wordlengths: tuple[int, ...] = DEFAULT_WORDLENGTHS,
    stats: LayerStats | None = None,
) -> list[SweepPoint]:
    """Scaling-factor search and error measurement at every scanned wordlength."""
    if stats is None:
        stats = profile_layer_ranges(model, eval_set, metric=metric)
    points = []
    for wl in wordlengths:
        scheme = search_scaling_factors(model, eval_set, wl, metric, stats)
        points.append(SweepPoint(wl, scheme, _scheme_error(model, eval_set, scheme, metric)))
    return points


def select_wordlengths(
    model: ModelGraph,
    eval_set: EvalSet,
    tolerance: float,
    metric: str = "top1",
    device=None,
    wordlengths: tuple[int, ...] = DEFAULT_WORDLENGTHS,
    sweep: list[SweepPoint] | None = None,
    seed: int = 0,
    paper_faithful: bool = False,
) -> WordlengthSelection:
    """Pick the high-precision unit (smallest wordlength whose degradation vs
    full precision is within `tolerance`) and the low-precision unit (the
    smaller-wordlength candidate maximising estimated cascade throughput,
    ties to the smaller wordlength).

    If the high-precision choice is already the smallest scanned wordlength,
    the cascade degenerates and both units share that wordlength.
    """
    from . import ceu, dse, engine

    if tolerance < 0:
        raise ValidationError("tolerance must be >= 0")
    if device is None:
        device = dse.default_device()
    if sweep is None:
        sweep = sweep_wordlengths(model, eval_set, metric, wordlengths)
    ref_probs = engine.forward_float(model, eval_set.samples)
    ref_err = engine.error_rate(ref_probs, eval_set.labels, metric)

    hpu_point = None
    for pt in sorted(sweep, key=lambda p: p.wordlength):
        if pt.error - ref_err <= tolerance:
            hpu_point = pt
            break
    if hpu_point is None:
        raise InfeasibleToleranceError(
            f"no scanned wordlength within tolerance {tolerance}; "
            "the model may need full precision"
        )

    hpu_model = engine.QuantizedModel.from_master(model, hpu_point.scheme)
    hpu_probs = engine.forward_batch(hpu_model, eval_set.samples)
    k = engine.metric_k(metric)
    hpu_topk = engine.topk_indices(hpu_probs, k)
    _, hpu_perf = dse.optimize_unit(model, hpu_point.scheme, device)

    candidates = [pt for pt in sweep if pt.wordlength < hpu_point.wordlength]
    if not candidates:
        return WordlengthSelection(hpu_point.scheme, hpu_point.scheme, ref_err, sweep)

    rows = []
    for pt in sorted(candidates, key=lambda p: p.wordlength):
        lpu_model = engine.QuantizedModel.derive(hpu_model, pt.scheme)
        lpu_probs = engine.forward_batch(lpu_model, eval_set.samples)
        lpu_preds = [ceu.SortedProbVector.from_probs(p) for p in lpu_probs]
        _, tuning = ceu.tune_ceu(
            lpu_preds,
            hpu_topk,
            eval_set.labels,
            tolerance,
            metric=metric,
            split=not paper_faithful,
            seed=seed,
        )
        _, lpu_perf = dse.optimize_unit(model, pt.scheme, device)
        tp = dse.cascade_throughput(
            lpu_perf.throughput, hpu_perf.throughput, tuning.forwarded_fraction
        )
        rows.append(
            {
                "wordlength": pt.wordlength,
                "forwarded_fraction": tuning.forwarded_fraction,
                "cascade_throughput": tp,
            }
        )
    best = max(rows, key=lambda r: (r["cascade_throughput"], -r["wordlength"]))
    lpu_point = next(pt for pt in sweep if pt.wordlength == best["wordlength"])
    return WordlengthSelection(lpu_point.scheme, hpu_point.scheme, ref_err, sweep, rows)
