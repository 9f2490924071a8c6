"""Mapping from a trained torch CNN to the container's graph description.

Only strictly sequential models built from Conv2d, Linear, ReLU, MaxPool2d,
Flatten, and Softmax are supported; anything else (residual blocks, custom
modules, multi-input graphs) aborts with a clear message. Weights are exported
bit-exact as float32.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .writer import ExportError, GraphDescription, LayerRecord

SUPPORTED = (nn.Conv2d, nn.Linear, nn.ReLU, nn.MaxPool2d, nn.Flatten, nn.Softmax)


@dataclass
class ExportSpec:
    """What to export and where.

    `layer_names` optionally renames layers by position in the flattened
    module list; unnamed layers get kind-numbered defaults (conv1, relu2, ...).
    """

    model: nn.Module
    input_shape: tuple[int, int, int]
    eval_samples: np.ndarray | None = None
    eval_labels: np.ndarray | None = None
    num_classes: int | None = None
    count: int = 200
    layer_names: dict[int, str] = field(default_factory=dict)
    append_softmax: bool = True


def _flatten_modules(model: nn.Module) -> list[nn.Module]:
    if isinstance(model, nn.Sequential):
        out = []
        for child in model:
            out.extend(_flatten_modules(child))
        return out
    if isinstance(model, SUPPORTED):
        return [model]
    raise ExportError(
        f"unsupported topology: {type(model).__name__} is not a sequential "
        "chain of Conv2d/Linear/ReLU/MaxPool2d/Flatten/Softmax"
    )


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def describe_model(spec: ExportSpec) -> GraphDescription:
    """Walk the module chain, check shapes, and build the manifest records."""
    modules = _flatten_modules(spec.model)
    desc = GraphDescription(tuple(int(d) for d in spec.input_shape))
    counts: dict[str, int] = {}
    shape: tuple[int, ...] = desc.input_shape
    saw_softmax = False

    def name_for(i: int, kind: str) -> str:
        if i in spec.layer_names:
            return spec.layer_names[i]
        counts[kind] = counts.get(kind, 0) + 1
        return f"{kind}{counts[kind]}"

    for i, mod in enumerate(modules):
        if saw_softmax:
            raise ExportError("softmax must be the final layer")
        if isinstance(mod, nn.Conv2d):
            if mod.groups != 1 or _pair(mod.dilation) != (1, 1):
                raise ExportError(f"layer {i}: grouped/dilated conv unsupported")
            kh, kw = _pair(mod.kernel_size)
            sh, sw = _pair(mod.stride)
            ph, pw = _pair(mod.padding if not isinstance(mod.padding, str) else 0)
            if isinstance(mod.padding, str):
                raise ExportError(f"layer {i}: string padding modes unsupported")
            if sh != sw or ph != pw:
                raise ExportError(f"layer {i}: anisotropic stride/padding unsupported")
            if mod.bias is None:
                raise ExportError(f"layer {i}: conv without bias unsupported")
            if len(shape) != 3 or shape[0] != mod.in_channels:
                raise ExportError(f"layer {i}: expects {mod.in_channels} channels, got {shape}")
            name = name_for(i, "conv")
            c, h, w = shape
            oh = (h + 2 * ph - kh) // sh + 1
            ow = (w + 2 * pw - kw) // sw + 1
            if oh < 1 or ow < 1:
                raise ExportError(f"layer {i}: output collapses to {oh}x{ow}")
            desc.layers.append(
                LayerRecord(
                    {
                        "kind": "conv",
                        "name": name,
                        "in_ch": mod.in_channels,
                        "out_ch": mod.out_channels,
                        "kernel_h": kh,
                        "kernel_w": kw,
                        "stride": sh,
                        "pad": ph,
                    },
                    weight=mod.weight.detach().cpu().numpy(),
                    bias=mod.bias.detach().cpu().numpy(),
                )
            )
            shape = (mod.out_channels, oh, ow)
        elif isinstance(mod, nn.Linear):
            if mod.bias is None:
                raise ExportError(f"layer {i}: linear without bias unsupported")
            flat = int(np.prod(shape))
            if flat != mod.in_features:
                raise ExportError(
                    f"layer {i}: expects {mod.in_features} features, got {flat} from {shape}"
                )
            name = name_for(i, "fc")
            desc.layers.append(
                LayerRecord(
                    {
                        "kind": "fc",
                        "name": name,
                        "in_features": mod.in_features,
                        "out_features": mod.out_features,
                    },
                    weight=mod.weight.detach().cpu().numpy(),
                    bias=mod.bias.detach().cpu().numpy(),
                )
            )
            shape = (mod.out_features,)
        elif isinstance(mod, nn.ReLU):
            desc.layers.append(LayerRecord({"kind": "relu", "name": name_for(i, "relu")}))
        elif isinstance(mod, nn.MaxPool2d):
            kh, kw = _pair(mod.kernel_size)
            sh, sw = _pair(mod.stride if mod.stride is not None else mod.kernel_size)
            if kh != kw or sh != sw or _pair(mod.padding) != (0, 0):
                raise ExportError(f"layer {i}: only square unpadded pooling supported")
            if len(shape) != 3:
                raise ExportError(f"layer {i}: pooling needs (C,H,W), got {shape}")
            c, h, w = shape
            shape = (c, (h - kh) // sh + 1, (w - kw) // sw + 1)
            desc.layers.append(
                LayerRecord(
                    {"kind": "maxpool", "name": name_for(i, "pool"), "size": kh, "stride": sh}
                )
            )
        elif isinstance(mod, nn.Flatten):
            shape = (int(np.prod(shape)),)  # implicit in the container's FC layers
        elif isinstance(mod, nn.Softmax):
            desc.layers.append(LayerRecord({"kind": "softmax", "name": name_for(i, "softmax")}))
            saw_softmax = True
    if spec.append_softmax and not saw_softmax:
        desc.layers.append(LayerRecord({"kind": "softmax", "name": "softmax"}))
    if len(shape) != 1:
        raise ExportError(f"model must end in a class vector, got shape {shape}")
    return desc


def source_predictions(model: nn.Module, samples: np.ndarray) -> np.ndarray:
    """Source-ecosystem full-precision top-1 predictions."""
    model.eval()
    with torch.no_grad():
        logits = model(torch.from_numpy(np.asarray(samples, dtype=np.float32)))
    return logits.numpy().argmax(axis=1)
