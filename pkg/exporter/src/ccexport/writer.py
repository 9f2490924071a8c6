"""Binary writers for the CCNN model container and CCEV eval-set container.

Write-only by design: the consuming toolflow owns the canonical reader, this
side only has to emit byte-identical files. Layout (all little-endian):

CCNN: magic "CCNN", version u32, manifest length u64, manifest JSON
      (input_shape, layers, blob table with byte offsets), raw f32 blobs.
CCEV: magic "CCEV", version u32, num_samples u32, num_classes u32,
      sample shape 3 x u32, samples as f32, labels as u32.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

MODEL_MAGIC = b"CCNN"
EVAL_MAGIC = b"CCEV"
FORMAT_VERSION = 1


class ExportError(Exception):
    pass


@dataclass
class LayerRecord:
    """One manifest entry plus optional weight/bias arrays (float32)."""

    manifest: dict
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None


@dataclass
class GraphDescription:
    input_shape: tuple[int, int, int]
    layers: list[LayerRecord] = field(default_factory=list)


def write_model(desc: GraphDescription, path: str) -> None:
    blobs = []
    payload = bytearray()
    for rec in desc.layers:
        if rec.weight is None:
            continue
        if rec.bias is None:
            raise ExportError(f"{rec.manifest['name']}: weight without bias")
        for param, arr in (("weight", rec.weight), ("bias", rec.bias)):
            arr32 = np.ascontiguousarray(arr, dtype="<f4")
            blobs.append(
                {
                    "layer": rec.manifest["name"],
                    "param": param,
                    "shape": [int(s) for s in arr32.shape],
                    "offset": len(payload),
                    "count": int(arr32.size),
                }
            )
            payload += arr32.tobytes()
    manifest = {
        "input_shape": [int(d) for d in desc.input_shape],
        "layers": [rec.manifest for rec in desc.layers],
        "blobs": blobs,
    }
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MODEL_MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(mbytes)))
        f.write(mbytes)
        f.write(bytes(payload))


def write_eval(samples: np.ndarray, labels: np.ndarray, num_classes: int, path: str) -> None:
    samples = np.ascontiguousarray(samples, dtype="<f4")
    labels = np.ascontiguousarray(labels, dtype="<u4")
    if samples.ndim != 4:
        raise ExportError("samples must be (N, C, H, W)")
    if len(samples) != len(labels):
        raise ExportError("sample/label count mismatch")
    if len(samples) == 0:
        raise ExportError("refusing to write an empty eval set")
    if labels.max(initial=0) >= num_classes:
        raise ExportError("label out of range")
    n, c, h, w = samples.shape
    with open(path, "wb") as f:
        f.write(EVAL_MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<II", n, num_classes))
        f.write(struct.pack("<III", c, h, w))
        f.write(samples.tobytes())
        f.write(labels.tobytes())
