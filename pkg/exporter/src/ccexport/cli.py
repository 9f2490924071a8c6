"""ccexport: convert a trained torch CNN plus an eval subset into the binary
containers, and regenerate the repo's bundled fixtures.

    ccexport export --model tiny.pt --eval digits --count 200 --out fixtures/

--model is a torch.save()d module; --eval currently supports the sklearn
digits set (pixels scaled to [0, 1], the last --count samples held out as the
evaluation subset, matching the fixture training split).
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np
import torch

from .torch_export import ExportSpec, describe_model, source_predictions
from .writer import ExportError, write_eval, write_model


SPLIT_SEED = 7  # shared with the fixture training script: eval stays held out


def digits_split_indices(count: int, total: int, seed: int = SPLIT_SEED) -> np.ndarray:
    """Indices of the held-out evaluation subset (a seeded shuffle's tail)."""
    rng = np.random.default_rng(seed)
    return np.sort(rng.permutation(total)[-count:])


def load_digits_eval(count: int) -> tuple[np.ndarray, np.ndarray, int]:
    from sklearn.datasets import load_digits

    d = load_digits()
    samples = (d.images / 16.0).astype(np.float32)[:, None, :, :]
    labels = d.target.astype(np.int64)
    if count < 1 or count > len(samples):
        raise ExportError(f"count {count} outside 1..{len(samples)}")
    idx = digits_split_indices(count, len(samples))
    return samples[idx], labels[idx], 10


def export_model(spec: ExportSpec, path: str) -> None:
    write_model(describe_model(spec), path)


def export_eval(spec: ExportSpec, path: str) -> None:
    if spec.eval_samples is None or spec.eval_labels is None or spec.num_classes is None:
        raise ExportError("spec has no evaluation subset")
    write_eval(spec.eval_samples, spec.eval_labels, spec.num_classes, path)


def cmd_export(args) -> int:
    if not os.path.exists(args.model):
        print(f"error: model not found: {args.model}", file=sys.stderr)
        return 2
    model = torch.load(args.model, weights_only=False)
    model.eval()
    if args.eval != "digits":
        print(f"error: unsupported eval dataset {args.eval!r}", file=sys.stderr)
        return 2
    samples, labels, num_classes = load_digits_eval(args.count)
    spec = ExportSpec(
        model=model,
        input_shape=tuple(samples.shape[1:]),
        eval_samples=samples,
        eval_labels=labels,
        num_classes=num_classes,
        count=args.count,
    )
    os.makedirs(args.out, exist_ok=True)
    model_path = os.path.join(args.out, "model.ccnn")
    eval_path = os.path.join(args.out, "eval.ccev")
    export_model(spec, model_path)
    export_eval(spec, eval_path)
    preds = source_predictions(model, samples)
    acc = float((preds == labels).mean())
    print(f"wrote {model_path} and {eval_path}")
    print(f"source top-1 accuracy on the exported subset: {acc:.4f}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="ccexport", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("export", help="write model.ccnn and eval.ccev")
    p.add_argument("--model", required=True, help="torch.save()d sequential CNN")
    p.add_argument("--eval", default="digits", help="eval dataset (digits)")
    p.add_argument("--count", type=int, default=200, help="evaluation subset size")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_export)
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ExportError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
