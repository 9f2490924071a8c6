"""Functional fixed-point inference.

Conv and FC layers lower to integer matrix multiplication (im2col for conv,
batched columns for FC) in wide accumulators; each layer output is requantised
once to the next layer's activation format. All quantised-domain arithmetic is
exact int64, so results are bit-reproducible across runs, platforms, batch
sizes, and tilings. Softmax runs in real arithmetic on dequantised logits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import (
    Conv,
    EvalSet,
    FullyConnected,
    MaxPool,
    ModelGraph,
    ReLU,
    Softmax,
    ValidationError,
    has_weights,
    infer_shapes,
)
from .quantizer import (
    FixedPointFormat,
    QuantScheme,
    QuantizedTensor,
    derive_lpu_weights,
    quantize_tensor,
    rescale_int,
    requantize,
)


class AccumulatorWidthError(ValidationError):
    pass


@dataclass(frozen=True)
class AccumulatorSpec:
    """Accumulator wordlength; must cover a full dot product without overflow."""

    bits: int = 64

    def check(self, wordlength: int, reduction: int) -> None:
        need = 2 * wordlength + max(0, math.ceil(math.log2(max(1, reduction))))
        if self.bits < need:
            raise AccumulatorWidthError(
                f"{self.bits}-bit accumulator too narrow: need {need} bits "
                f"for wordlength {wordlength}, reduction {reduction}"
            )
        if self.bits > 64:
            raise AccumulatorWidthError("accumulators wider than 64 bits unsupported")


DEFAULT_ACC = AccumulatorSpec(64)


@dataclass(frozen=True)
class MMConfig:
    tile_m: int
    tile_n: int
    tile_k: int

    def __post_init__(self) -> None:
        if min(self.tile_m, self.tile_n, self.tile_k) < 1:
            raise ValidationError("tile sizes must be >= 1")


def mm(a: np.ndarray, b: np.ndarray, acc: AccumulatorSpec = DEFAULT_ACC) -> np.ndarray:
    """Exact integer matrix product in the accumulator width."""
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValidationError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    return a @ b


def tiled_mm(
    a: np.ndarray,
    b: np.ndarray,
    cfg: MMConfig,
    acc: AccumulatorSpec = DEFAULT_ACC,
) -> tuple[np.ndarray, int]:
    """Blocked integer matmul; bit-exact equal to mm() for every tiling.

    Also returns the padded work count (tile invocations x tile volume), the
    quantity the performance model charges for edge tiles.
    """
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    if a.shape[1] != b.shape[0]:
        raise ValidationError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), dtype=np.int64)
    invocations = 0
    for i0 in range(0, m, cfg.tile_m):
        for j0 in range(0, n, cfg.tile_n):
            for k0 in range(0, k, cfg.tile_k):
                out[i0 : i0 + cfg.tile_m, j0 : j0 + cfg.tile_n] += mm(
                    a[i0 : i0 + cfg.tile_m, k0 : k0 + cfg.tile_k],
                    b[k0 : k0 + cfg.tile_k, j0 : j0 + cfg.tile_n],
                    acc,
                )
                invocations += 1
    work = invocations * cfg.tile_m * cfg.tile_n * cfg.tile_k
    return out, work


def conv_out_hw(conv: Conv, h: int, w: int) -> tuple[int, int]:
    oh = (h + 2 * conv.pad - conv.kernel_h) // conv.stride + 1
    ow = (w + 2 * conv.pad - conv.kernel_w) // conv.stride + 1
    return oh, ow


def _patch_index(conv: Conv, c: int, h: int, w: int) -> tuple[np.ndarray, int, int]:
    """Flat gather indices into the zero-padded input, one column per output
    pixel, rows in (C, Kh, Kw) order."""
    oh, ow = conv_out_hw(conv, h, w)
    hp, wp = h + 2 * conv.pad, w + 2 * conv.pad
    ci, khi, kwi = np.meshgrid(
        np.arange(c), np.arange(conv.kernel_h), np.arange(conv.kernel_w), indexing="ij"
    )
    rows = (ci * hp * wp + khi * wp + kwi).reshape(-1, 1)
    oy, ox = np.meshgrid(np.arange(oh), np.arange(ow), indexing="ij")
    cols = (oy * conv.stride * wp + ox * conv.stride).reshape(1, -1)
    return rows + cols, oh, ow


def im2col(x: np.ndarray, conv: Conv) -> np.ndarray:
    """Lower one (C, H, W) integer activation to a (C*Kh*Kw, outH*outW) matrix;
    out-of-bounds entries are integer zero."""
    x = np.asarray(x, dtype=np.int64)
    if x.ndim != 3 or x.shape[0] != conv.in_ch:
        raise ValidationError(f"im2col: expected ({conv.in_ch}, H, W), got {x.shape}")
    c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (conv.pad, conv.pad), (conv.pad, conv.pad)))
    idx, _, _ = _patch_index(conv, c, h, w)
    return xp.reshape(-1)[idx]


def im2col_batch(x: np.ndarray, conv: Conv) -> np.ndarray:
    """Batched lowering: (N, C, H, W) -> (C*Kh*Kw, N*outH*outW); column blocks
    are the per-sample im2col matrices in sample order."""
    x = np.asarray(x, dtype=np.int64)
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (conv.pad, conv.pad), (conv.pad, conv.pad)))
    idx, oh, ow = _patch_index(conv, c, h, w)
    cols = xp.reshape(n, -1)[:, idx]  # (N, CKhKw, oh*ow)
    return np.moveaxis(cols, 0, 1).reshape(idx.shape[0], n * oh * ow)


@dataclass
class QuantizedModel:
    """A graph bound to a quantisation scheme with integer weights.

    `derived` marks weight tensors obtained at run time from another unit's
    higher-precision integers (weight sharing); such a model contributes no
    weight storage of its own.
    """

    graph: ModelGraph
    scheme: QuantScheme
    qweights: dict[str, tuple[QuantizedTensor, QuantizedTensor]]
    derived: bool = False
    acc: AccumulatorSpec = DEFAULT_ACC

    def __post_init__(self) -> None:
        shapes = infer_shapes(self.graph)
        for i, layer in enumerate(self.graph.layers):
            if not has_weights(layer):
                continue
            if layer.name not in self.qweights:
                raise ValidationError(f"{layer.name}: missing quantised weights")
            w, _ = self.qweights[layer.name]
            if w.fmt.wordlength != self.scheme.wordlength:
                raise ValidationError(f"{layer.name}: weight format off-scheme")
            reduction = (
                layer.in_ch * layer.kernel_h * layer.kernel_w
                if isinstance(layer, Conv)
                else layer.in_features
            )
            self.acc.check(self.scheme.wordlength, reduction)
        self._out_shapes = shapes

    @classmethod
    def from_master(cls, graph: ModelGraph, scheme: QuantScheme) -> "QuantizedModel":
        """Quantise the float32 master weights; biases use the layer's weight
        format."""
        qweights = {}
        for layer in graph.layers:
            if not has_weights(layer):
                continue
            wfmt = scheme.layers[layer.name].weight
            w, b = graph.weights[layer.name]
            qweights[layer.name] = (quantize_tensor(w, wfmt), quantize_tensor(b, wfmt))
        return cls(graph, scheme, qweights)

    @classmethod
    def derive(cls, source: "QuantizedModel", scheme: QuantScheme) -> "QuantizedModel":
        """Build a lower-precision view whose integers come from `source`'s
        quantised weights, never from the float master."""
        qweights = {
            name: (
                derive_lpu_weights(w, scheme.layers[name].weight),
                derive_lpu_weights(b, scheme.layers[name].weight),
            )
            for name, (w, b) in source.qweights.items()
        }
        return cls(source.graph, scheme, qweights, derived=True)

    def weight_storage_bits(self) -> int:
        """Bits this unit must persist for weights and biases; derived units
        read another unit's copy and store nothing."""
        if self.derived:
            return 0
        return sum(
            (w.values.size + b.values.size) * self.scheme.wordlength
            for w, b in self.qweights.values()
        )

    def activation_format(self, index: int) -> FixedPointFormat:
        return self.scheme.layers[self.graph.layers[index].name].activation

    def requant_target(self, index: int) -> FixedPointFormat | None:
        """Format of the tensor flowing out of layer `index` (the next layer's
        input format); None past the end of the chain."""
        if index + 1 < len(self.graph.layers):
            return self.activation_format(index + 1)
        return None


def _matmul_layer(
    qmodel: QuantizedModel, layer, acts: np.ndarray, batch: int
) -> tuple[np.ndarray, int]:
    """Integer conv/FC in accumulators. Returns accumulator-domain values of
    shape (batch, ...) and the accumulator frac_bits."""
    w, b = qmodel.qweights[layer.name]
    in_fmt = qmodel.activation_format(qmodel.graph.layer_index(layer.name))
    acc_frac = w.fmt.frac_bits + in_fmt.frac_bits
    bias = rescale_int(b.values, acc_frac - b.fmt.frac_bits)
    if isinstance(layer, Conv):
        n, _, h, wd = acts.shape
        cols = im2col_batch(acts, layer)
        wmat = w.values.reshape(layer.out_ch, -1)
        out = mm(wmat, cols, qmodel.acc) + bias[:, None]
        oh, ow = conv_out_hw(layer, h, wd)
        out = out.reshape(layer.out_ch, n, oh, ow)
        return np.moveaxis(out, 1, 0), acc_frac
    flat = acts.reshape(batch, -1)
    out = mm(w.values, flat.T, qmodel.acc) + bias[:, None]
    return out.T, acc_frac


def run_layer(
    qmodel: QuantizedModel, index: int, activation: QuantizedTensor
) -> QuantizedTensor | np.ndarray:
    """Execute one layer on a single sample's activation.

    The input must be in the layer's activation format; the output is
    requantised to the next layer's format. A final Softmax returns real
    probabilities instead of a QuantizedTensor.
    """
    layer = qmodel.graph.layers[index]
    in_fmt = qmodel.activation_format(index)
    if activation.fmt != in_fmt:
        raise ValidationError(
            f"{layer.name}: input format {activation.fmt} != expected {in_fmt}"
        )
    batched = activation.values[None, ...]
    out, frac = _run_layer_values(qmodel, index, batched)
    if isinstance(layer, Softmax):
        return out[0]
    # a final layer without a successor keeps its own input format
    target = qmodel.requant_target(index) or in_fmt
    return requantize(out[0], frac, target)


def _run_layer_values(
    qmodel: QuantizedModel, index: int, acts: np.ndarray
) -> tuple[np.ndarray, int]:
    """Layer body on a (N, ...) integer activation block; returns values plus
    their frac_bits (or probabilities for softmax)."""
    layer = qmodel.graph.layers[index]
    in_frac = qmodel.activation_format(index).frac_bits
    n = acts.shape[0]
    if isinstance(layer, (Conv, FullyConnected)):
        return _matmul_layer(qmodel, layer, acts, n)
    if isinstance(layer, ReLU):
        return np.maximum(acts, 0), in_frac
    if isinstance(layer, MaxPool):
        _, c, h, w = acts.shape
        oh = (h - layer.size) // layer.stride + 1
        ow = (w - layer.size) // layer.stride + 1
        windows = np.empty((layer.size * layer.size, n, c, oh, ow), dtype=np.int64)
        p = 0
        for dy in range(layer.size):
            for dx in range(layer.size):
                windows[p] = acts[
                    :,
                    :,
                    dy : dy + (oh - 1) * layer.stride + 1 : layer.stride,
                    dx : dx + (ow - 1) * layer.stride + 1 : layer.stride,
                ]
                p += 1
        return windows.max(axis=0), in_frac
    if isinstance(layer, Softmax):
        logits = acts.reshape(n, -1).astype(np.float64) * (2.0**-in_frac)
        return _softmax(logits), 0
    raise ValidationError(f"unsupported layer {layer!r}")


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def forward_batch(qmodel: QuantizedModel, samples: np.ndarray) -> np.ndarray:
    """Quantise inputs with the first layer's activation format, run the whole
    chain, and return (N, num_classes) softmax probabilities."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim == 3:
        samples = samples[None, ...]
    acts = quantize_tensor(samples, qmodel.activation_format(0)).values
    frac = qmodel.activation_format(0).frac_bits
    n = acts.shape[0]
    for i, layer in enumerate(qmodel.graph.layers):
        if isinstance(layer, Softmax):
            return _run_layer_values(qmodel, i, acts)[0]
        out, out_frac = _run_layer_values(qmodel, i, acts)
        target = qmodel.requant_target(i)
        if target is None:
            logits = out.reshape(n, -1).astype(np.float64) * (2.0**-out_frac)
            return _softmax(logits)
        q = requantize(out, out_frac, target)
        acts, frac = q.values, target.frac_bits
    raise AssertionError("unreachable")


def predict(qmodel: QuantizedModel, sample: np.ndarray) -> np.ndarray:
    """Class probabilities for one (C, H, W) sample, in class-index order."""
    sample = np.asarray(sample, dtype=np.float64)
    if tuple(sample.shape) != tuple(qmodel.graph.input_shape):
        raise ValidationError(
            f"sample shape {sample.shape} != input shape {qmodel.graph.input_shape}"
        )
    return forward_batch(qmodel, sample[None, ...])[0]


def metric_k(metric: str) -> int:
    if metric == "top1":
        return 1
    if metric == "top5":
        return 5
    raise ValidationError(f"unknown metric {metric!r} (expected top1 or top5)")


def topk_indices(probs: np.ndarray, k: int) -> np.ndarray:
    """Top-k class indices per row, best first; probability ties resolve to the
    lower class index."""
    order = np.argsort(-probs, axis=1, kind="stable")
    return order[:, :k]


def error_rate(probs: np.ndarray, labels: np.ndarray, metric: str = "top1") -> float:
    k = metric_k(metric)
    topk = topk_indices(probs, k)
    hit = (topk == np.asarray(labels)[:, None]).any(axis=1)
    return float(1.0 - hit.mean())


def evaluate_accuracy(
    qmodel: QuantizedModel, eval_set: EvalSet, metric: str = "top1"
) -> float:
    """Classification error of the quantised model over an evaluation set."""
    if len(eval_set) == 0:
        raise ValidationError("empty evaluation set")
    probs = forward_batch(qmodel, eval_set.samples)
    return error_rate(probs, eval_set.labels, metric)


def _fake_quant(x: np.ndarray, fmt: FixedPointFormat) -> np.ndarray:
    q = quantize_tensor(x, fmt)
    return q.values.astype(np.float64) * fmt.scale


def forward_float(
    model: ModelGraph,
    samples: np.ndarray,
    fake_quant_layer: str | None = None,
    stats=None,
    probe_wordlength: int | None = None,
) -> np.ndarray:
    """Full-precision reference forward pass returning softmax probabilities.

    With `fake_quant_layer`, that single layer's weights, bias, and input are
    passed through quantise/dequantise at the probe wordlength (formats fit to
    the profiled maxima in `stats`) while everything else stays in float: the
    per-layer accuracy-impact probe.
    """
    from .quantizer import fit_frac_bits

    x = np.asarray(samples, dtype=np.float64)
    n = x.shape[0]

    def layer_params(layer):
        w, b = model.weights[layer.name]
        w, b = w.astype(np.float64), b.astype(np.float64)
        if fake_quant_layer == layer.name:
            wl = probe_wordlength or stats.probe_wordlength
            wmax = max(stats.weight_max_abs[layer.name], float(np.abs(b).max(initial=0.0)))
            wfmt = FixedPointFormat(wl, fit_frac_bits(wmax, wl))
            w, b = _fake_quant(w, wfmt), _fake_quant(b, wfmt)
        return w, b

    for layer in model.layers:
        if fake_quant_layer == layer.name:
            wl = probe_wordlength or stats.probe_wordlength
            afmt = FixedPointFormat(
                wl, fit_frac_bits(stats.activation_max_abs[layer.name], wl)
            )
            x = _fake_quant(x, afmt)
        if isinstance(layer, Conv):
            w, b = layer_params(layer)
            _, h, wd = x.shape[1:]
            cols = _float_im2col(x, layer)
            out = w.reshape(layer.out_ch, -1) @ cols + b[:, None]
            oh, ow = conv_out_hw(layer, h, wd)
            x = np.moveaxis(out.reshape(layer.out_ch, n, oh, ow), 1, 0)
        elif isinstance(layer, FullyConnected):
            w, b = layer_params(layer)
            x = x.reshape(n, -1) @ w.T + b
        elif isinstance(layer, ReLU):
            x = np.maximum(x, 0.0)
        elif isinstance(layer, MaxPool):
            x = _float_maxpool(x, layer)
        elif isinstance(layer, Softmax):
            return _softmax(x.reshape(n, -1))
    return _softmax(x.reshape(n, -1))


def _float_im2col(x: np.ndarray, conv: Conv) -> np.ndarray:
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (conv.pad, conv.pad), (conv.pad, conv.pad)))
    idx, oh, ow = _patch_index(conv, c, h, w)
    cols = xp.reshape(n, -1)[:, idx]
    return np.moveaxis(cols, 0, 1).reshape(idx.shape[0], n * oh * ow)


def _float_maxpool(x: np.ndarray, layer: MaxPool) -> np.ndarray:
    n, c, h, w = x.shape
    oh = (h - layer.size) // layer.stride + 1
    ow = (w - layer.size) // layer.stride + 1
    windows = np.empty((layer.size * layer.size, n, c, oh, ow))
    p = 0
    for dy in range(layer.size):
        for dx in range(layer.size):
            windows[p] = x[
                :,
                :,
                dy : dy + (oh - 1) * layer.stride + 1 : layer.stride,
                dx : dx + (ow - 1) * layer.stride + 1 : layer.stride,
            ]
            p += 1
    return windows.max(axis=0)


def float_layer_inputs(model: ModelGraph, samples: np.ndarray) -> list[np.ndarray]:
    """Per-layer input tensors of the full-precision forward pass (the raw
    samples for layer 0); used for range profiling."""
    x = np.asarray(samples, dtype=np.float64)
    n = x.shape[0]
    inputs = []
    for layer in model.layers:
        inputs.append(x)
        if isinstance(layer, Conv):
            w, b = model.weights[layer.name]
            _, h, wd = x.shape[1:]
            cols = _float_im2col(x, layer)
            out = w.astype(np.float64).reshape(layer.out_ch, -1) @ cols + b.astype(
                np.float64
            )[:, None]
            oh, ow = conv_out_hw(layer, h, wd)
            x = np.moveaxis(out.reshape(layer.out_ch, n, oh, ow), 1, 0)
        elif isinstance(layer, FullyConnected):
            w, b = model.weights[layer.name]
            x = x.reshape(n, -1) @ w.astype(np.float64).T + b.astype(np.float64)
        elif isinstance(layer, ReLU):
            x = np.maximum(x, 0.0)
        elif isinstance(layer, MaxPool):
            x = _float_maxpool(x, layer)
        elif isinstance(layer, Softmax):
            x = _softmax(x.reshape(n, -1))
    return inputs
