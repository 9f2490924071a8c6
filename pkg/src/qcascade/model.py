"""Sequential CNN description, evaluation sets, and the on-disk container formats.

The model container ("CCNN") and eval-set container ("CCEV") are little-endian
binary files; this module is the canonical reader for both. Graphs are chains
of conv / fully-connected / ReLU / max-pool / softmax layers with float32
master weights.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Union

import numpy as np

MODEL_MAGIC = b"CCNN"
EVAL_MAGIC = b"CCEV"
FORMAT_VERSION = 1


class ContainerError(Exception):
    """Base class for container parse/write failures."""


class BadMagicError(ContainerError):
    pass


class TruncatedBlobError(ContainerError):
    pass


class UnknownLayerKindError(ContainerError):
    pass


class ShapeMismatchError(ContainerError):
    pass


class ValidationError(Exception):
    """A graph or eval set violates a structural invariant."""


class LabelRangeError(ValidationError):
    pass


class ShapeInferenceError(ValidationError):
    pass


@dataclass(frozen=True)
class Conv:
    name: str
    in_ch: int
    out_ch: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    pad: int = 0


@dataclass(frozen=True)
class FullyConnected:
    name: str
    in_features: int
    out_features: int


@dataclass(frozen=True)
class ReLU:
    name: str


@dataclass(frozen=True)
class MaxPool:
    name: str
    size: int
    stride: int


@dataclass(frozen=True)
class Softmax:
    name: str


LayerSpec = Union[Conv, FullyConnected, ReLU, MaxPool, Softmax]

_LAYER_KINDS = {
    Conv: "conv",
    FullyConnected: "fc",
    ReLU: "relu",
    MaxPool: "maxpool",
    Softmax: "softmax",
}


def has_weights(layer: LayerSpec) -> bool:
    return isinstance(layer, (Conv, FullyConnected))


@dataclass
class ModelGraph:
    """A validated sequential CNN with float32 master weights.

    weights maps layer name -> (weight, bias) arrays; conv weights are
    (O, I, Kh, Kw), FC weights (O, I), biases (O,). Immutable by convention
    after load.
    """

    layers: list[LayerSpec]
    weights: dict[str, tuple[np.ndarray, np.ndarray]]
    input_shape: tuple[int, int, int]

    def __post_init__(self) -> None:
        self.input_shape = tuple(int(d) for d in self.input_shape)
        self.validate()

    def validate(self) -> None:
        if not self.layers:
            raise ValidationError("empty model: graph has no layers")
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            dup = sorted({n for n in names if names.count(n) > 1})
            raise ValidationError(f"duplicate layer names: {dup}")
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Softmax) and i != len(self.layers) - 1:
                raise ValidationError("softmax must be the final layer")
        if sum(isinstance(l, Softmax) for l in self.layers) > 1:
            raise ValidationError("softmax appears more than once")
        if len(self.input_shape) != 3 or any(d < 1 for d in self.input_shape):
            raise ValidationError(f"bad input shape {self.input_shape}")
        for layer in self.layers:
            if has_weights(layer):
                if layer.name not in self.weights:
                    raise ValidationError(f"layer {layer.name!r} has no weight tensors")
                w, b = self.weights[layer.name]
                expect_w = (
                    (layer.out_ch, layer.in_ch, layer.kernel_h, layer.kernel_w)
                    if isinstance(layer, Conv)
                    else (layer.out_features, layer.in_features)
                )
                expect_b = (expect_w[0],)
                if tuple(w.shape) != expect_w:
                    raise ShapeMismatchError(
                        f"{layer.name}: weight shape {tuple(w.shape)} != {expect_w}"
                    )
                if tuple(b.shape) != expect_b:
                    raise ShapeMismatchError(
                        f"{layer.name}: bias shape {tuple(b.shape)} != {expect_b}"
                    )
                if not (np.isfinite(w).all() and np.isfinite(b).all()):
                    raise ValidationError(f"{layer.name}: non-finite weight values")
            elif layer.name in self.weights:
                raise ValidationError(f"layer {layer.name!r} cannot carry weights")
        # shape inference must succeed end to end
        infer_shapes(self)

    @property
    def num_classes(self) -> int:
        shapes = infer_shapes(self)
        last = shapes[-1]
        if len(last) != 1:
            raise ValidationError("final layer does not produce a class vector")
        return int(last[0])

    def layer_index(self, name: str) -> int:
        for i, layer in enumerate(self.layers):
            if layer.name == name:
                return i
        raise KeyError(name)


@dataclass
class EvalSet:
    """Labelled samples matching a model's input shape."""

    samples: np.ndarray  # (N, C, H, W) float32
    labels: np.ndarray  # (N,) int64
    num_classes: int

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.samples.ndim != 4:
            raise ValidationError("samples must be (N, C, H, W)")
        if len(self.samples) != len(self.labels):
            raise ValidationError("sample/label count mismatch")
        if len(self.samples) == 0:
            raise ValidationError("empty evaluation set")
        if not np.isfinite(self.samples).all():
            raise ValidationError("non-finite sample values")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise LabelRangeError("label out of range")

    def __len__(self) -> int:
        return len(self.samples)

    def subset(self, idx: np.ndarray) -> "EvalSet":
        return EvalSet(self.samples[idx], self.labels[idx], self.num_classes)


def infer_shapes(
    graph: ModelGraph, input_shape: tuple[int, ...] | None = None
) -> list[tuple[int, ...]]:
    """Output shape of each layer when fed `input_shape` (default: the graph's).

    Conv output H = floor((H + 2*pad - Kh) / stride) + 1, analogous for W.
    """
    shape: tuple[int, ...] = tuple(input_shape or graph.input_shape)
    out: list[tuple[int, ...]] = []
    for layer in graph.layers:
        if isinstance(layer, Conv):
            if len(shape) != 3:
                raise ShapeInferenceError(f"{layer.name}: conv needs (C,H,W), got {shape}")
            c, h, w = shape
            if c != layer.in_ch:
                raise ShapeMismatchError(
                    f"{layer.name}: expects {layer.in_ch} input channels, got {c}"
                )
            oh = (h + 2 * layer.pad - layer.kernel_h) // layer.stride + 1
            ow = (w + 2 * layer.pad - layer.kernel_w) // layer.stride + 1
            if oh < 1 or ow < 1:
                raise ShapeInferenceError(
                    f"{layer.name}: non-positive output size ({oh}, {ow})"
                )
            shape = (layer.out_ch, oh, ow)
        elif isinstance(layer, MaxPool):
            if len(shape) != 3:
                raise ShapeInferenceError(f"{layer.name}: pool needs (C,H,W), got {shape}")
            c, h, w = shape
            oh = (h - layer.size) // layer.stride + 1
            ow = (w - layer.size) // layer.stride + 1
            if oh < 1 or ow < 1:
                raise ShapeInferenceError(
                    f"{layer.name}: non-positive output size ({oh}, {ow})"
                )
            shape = (c, oh, ow)
        elif isinstance(layer, FullyConnected):
            flat = int(np.prod(shape))
            if flat != layer.in_features:
                raise ShapeMismatchError(
                    f"{layer.name}: expects {layer.in_features} features, got {flat}"
                )
            shape = (layer.out_features,)
        elif isinstance(layer, (ReLU, Softmax)):
            pass
        else:  # pragma: no cover - union is closed
            raise UnknownLayerKindError(f"unknown layer type {type(layer)!r}")
        out.append(shape)
    return out


def _layer_to_manifest(layer: LayerSpec) -> dict:
    d = {"kind": _LAYER_KINDS[type(layer)], "name": layer.name}
    if isinstance(layer, Conv):
        d.update(
            in_ch=layer.in_ch,
            out_ch=layer.out_ch,
            kernel_h=layer.kernel_h,
            kernel_w=layer.kernel_w,
            stride=layer.stride,
            pad=layer.pad,
        )
    elif isinstance(layer, FullyConnected):
        d.update(in_features=layer.in_features, out_features=layer.out_features)
    elif isinstance(layer, MaxPool):
        d.update(size=layer.size, stride=layer.stride)
    return d


def _layer_from_manifest(d: dict) -> LayerSpec:
    kind = d.get("kind")
    name = d.get("name", "")
    if kind == "conv":
        return Conv(
            name,
            int(d["in_ch"]),
            int(d["out_ch"]),
            int(d["kernel_h"]),
            int(d["kernel_w"]),
            int(d["stride"]),
            int(d["pad"]),
        )
    if kind == "fc":
        return FullyConnected(name, int(d["in_features"]), int(d["out_features"]))
    if kind == "relu":
        return ReLU(name)
    if kind == "maxpool":
        return MaxPool(name, int(d["size"]), int(d["stride"]))
    if kind == "softmax":
        return Softmax(name)
    raise UnknownLayerKindError(f"unknown layer kind {kind!r}")


def save_model(graph: ModelGraph, path: str) -> None:
    """Write `graph` to the CCNN container; load_model round-trips bit-exactly."""
    graph.validate()
    blobs: list[dict] = []
    payload = bytearray()
    for layer in graph.layers:
        if not has_weights(layer):
            continue
        for param in ("weight", "bias"):
            arr = graph.weights[layer.name][0 if param == "weight" else 1]
            arr32 = np.ascontiguousarray(arr, dtype="<f4")
            blobs.append(
                {
                    "layer": layer.name,
                    "param": param,
                    "shape": [int(s) for s in arr32.shape],
                    "offset": len(payload),
                    "count": int(arr32.size),
                }
            )
            payload += arr32.tobytes()
    manifest = {
        "input_shape": [int(d) for d in graph.input_shape],
        "layers": [_layer_to_manifest(l) for l in graph.layers],
        "blobs": blobs,
    }
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MODEL_MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(mbytes)))
        f.write(mbytes)
        f.write(bytes(payload))


def load_model(path: str) -> ModelGraph:
    """Read and validate a CCNN container."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 16 or data[:4] != MODEL_MAGIC:
        raise BadMagicError(f"{path}: bad magic (expected {MODEL_MAGIC!r})")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise ContainerError(f"{path}: unsupported format version {version}")
    (mlen,) = struct.unpack_from("<Q", data, 8)
    mstart = 16
    if mstart + mlen > len(data):
        raise TruncatedBlobError(f"{path}: manifest truncated")
    try:
        manifest = json.loads(data[mstart : mstart + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ContainerError(f"{path}: manifest is not valid JSON: {e}") from e
    layers = [_layer_from_manifest(d) for d in manifest["layers"]]
    blob_start = mstart + mlen
    tensors: dict[str, dict[str, np.ndarray]] = {}
    for blob in manifest["blobs"]:
        shape = tuple(int(s) for s in blob["shape"])
        count = int(blob["count"])
        if count != int(np.prod(shape)):
            raise ShapeMismatchError(
                f"{path}: blob {blob['layer']}/{blob['param']} count {count} != shape {shape}"
            )
        lo = blob_start + int(blob["offset"])
        hi = lo + 4 * count
        if hi > len(data):
            raise TruncatedBlobError(
                f"{path}: blob {blob['layer']}/{blob['param']} truncated"
            )
        arr = np.frombuffer(data[lo:hi], dtype="<f4").reshape(shape).copy()
        tensors.setdefault(blob["layer"], {})[blob["param"]] = arr
    weights = {}
    for name, parts in tensors.items():
        if "weight" not in parts or "bias" not in parts:
            raise TruncatedBlobError(f"{path}: layer {name!r} missing weight or bias blob")
        weights[name] = (parts["weight"], parts["bias"])
    return ModelGraph(layers, weights, tuple(manifest["input_shape"]))


def save_eval_set(eval_set: EvalSet, path: str) -> None:
    """Write `eval_set` to the CCEV container (same layout the exporter emits)."""
    n, c, h, w = eval_set.samples.shape
    with open(path, "wb") as f:
        f.write(EVAL_MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<II", n, eval_set.num_classes))
        f.write(struct.pack("<III", c, h, w))
        f.write(np.ascontiguousarray(eval_set.samples, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(eval_set.labels, dtype="<u4").tobytes())


def load_eval_set(path: str) -> EvalSet:
    """Read and validate a CCEV container."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 28 or data[:4] != EVAL_MAGIC:
        raise BadMagicError(f"{path}: bad magic (expected {EVAL_MAGIC!r})")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise ContainerError(f"{path}: unsupported format version {version}")
    n, num_classes = struct.unpack_from("<II", data, 8)
    c, h, w = struct.unpack_from("<III", data, 16)
    sample_bytes = 4 * n * c * h * w
    lo = 28
    if lo + sample_bytes + 4 * n > len(data):
        raise TruncatedBlobError(f"{path}: sample or label data truncated")
    samples = (
        np.frombuffer(data[lo : lo + sample_bytes], dtype="<f4")
        .reshape(n, c, h, w)
        .copy()
    )
    labels = np.frombuffer(
        data[lo + sample_bytes : lo + sample_bytes + 4 * n], dtype="<u4"
    ).astype(np.int64)
    return EvalSet(samples, labels, int(num_classes))
