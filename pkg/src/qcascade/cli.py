"""Command-line front end.

Stages can run separately (quantize -> tune -> dse) or end to end (run); every
artifact is JSON except the binary model/eval containers and the CSV plot
data. Identical inputs and seed produce byte-identical artifacts.

Exit codes: 0 ok, 1 infeasible, 2 bad input.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import cascade, ceu, dse, engine, quantizer
from .model import ContainerError, ValidationError, load_eval_set, load_model

EXIT_OK = 0
EXIT_INFEASIBLE = 1
EXIT_BAD_INPUT = 2


def _add_common(p: argparse.ArgumentParser, need_device: bool = True) -> None:
    p.add_argument("--model", required=True, help="CCNN model container")
    p.add_argument("--eval", dest="eval_path", required=True, help="CCEV eval set")
    p.add_argument("--device", help="device model JSON (defaults to a generic device)")
    p.add_argument("--tolerance", type=float, default=0.01,
                   help="allowed error increase over the reference (0..1)")
    p.add_argument("--metric", choices=("top1", "top5"), default="top1")
    p.add_argument("--seed", type=int, default=0, help="seed for the eval-set split")
    p.add_argument("--out", required=True, help="output directory for artifacts")
    p.add_argument("--paper-faithful", action="store_true",
                   help="tune on the whole eval set without the split guard")


def _load_inputs(args):
    if not os.path.exists(args.model):
        raise FileNotFoundError(f"model not found: {args.model}")
    if not os.path.exists(args.eval_path):
        raise FileNotFoundError(f"eval set not found: {args.eval_path}")
    model = load_model(args.model)
    eval_set = load_eval_set(args.eval_path)
    if args.device:
        if not os.path.exists(args.device):
            raise FileNotFoundError(f"device model not found: {args.device}")
        with open(args.device) as f:
            device = dse.DeviceModel.from_json(f.read())
    else:
        device = dse.default_device()
    if not 0.0 <= args.tolerance <= 1.0:
        raise ValidationError(f"tolerance {args.tolerance} outside [0, 1]")
    return model, eval_set, device


def _write(path: str, text: str) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as f:
        f.write(text)


def _sweep_table(sweep: list[quantizer.SweepPoint]) -> str:
    lines = ["wordlength  error", "----------  -----"]
    for pt in sweep:
        lines.append(f"{pt.wordlength:10d}  {pt.error:.4f}")
    return "\n".join(lines) + "\n"


def cmd_quantize(args) -> int:
    model, eval_set, device = _load_inputs(args)
    selection = quantizer.select_wordlengths(
        model,
        eval_set,
        args.tolerance,
        metric=args.metric,
        device=device,
        seed=args.seed,
        paper_faithful=args.paper_faithful,
    )
    _write(os.path.join(args.out, "lpu_scheme.json"), selection.lpu.to_json())
    _write(os.path.join(args.out, "hpu_scheme.json"), selection.hpu.to_json())
    sweep_doc = {
        "metric": args.metric,
        "reference_error": selection.reference_error,
        "points": [
            {"wordlength": p.wordlength, "error": p.error} for p in selection.sweep
        ],
    }
    _write(
        os.path.join(args.out, "wordlength_sweep.json"),
        json.dumps(sweep_doc, sort_keys=True, indent=2),
    )
    _write(os.path.join(args.out, "wordlength_sweep.txt"), _sweep_table(selection.sweep))
    print(_sweep_table(selection.sweep), end="")
    print(f"LPU wordlength {selection.lpu.wordlength}, "
          f"HPU wordlength {selection.hpu.wordlength}")
    return EXIT_OK


def _load_schemes(args) -> tuple[quantizer.QuantScheme, quantizer.QuantScheme]:
    def read(name):
        path = os.path.join(args.schemes, name)
        if not os.path.exists(path):
            raise FileNotFoundError(f"scheme not found: {path}")
        with open(path) as f:
            return quantizer.QuantScheme.from_json(f.read())

    return read("lpu_scheme.json"), read("hpu_scheme.json")


def cmd_tune(args) -> int:
    model, eval_set, _ = _load_inputs(args)
    lpu_scheme, hpu_scheme = _load_schemes(args)
    hpu = engine.QuantizedModel.from_master(model, hpu_scheme)
    lpu = (
        engine.QuantizedModel.derive(hpu, lpu_scheme)
        if lpu_scheme.wordlength < hpu_scheme.wordlength
        else hpu
    )
    lpu_probs = engine.forward_batch(lpu, eval_set.samples)
    hpu_probs = engine.forward_batch(hpu, eval_set.samples)
    k = engine.metric_k(args.metric)
    config, tuning = ceu.tune_ceu(
        [ceu.SortedProbVector.from_probs(p) for p in lpu_probs],
        engine.topk_indices(hpu_probs, k),
        eval_set.labels,
        args.tolerance,
        metric=args.metric,
        split=not args.paper_faithful,
        seed=args.seed,
    )
    _write(os.path.join(args.out, "ceu.json"), config.to_json() + "\n")
    _write(os.path.join(args.out, "tuning_report.json"), tuning.to_json())
    print(f"M={config.M} N={config.N} th={config.th:.6f} "
          f"forwarded={tuning.forwarded_fraction:.4f} "
          f"cascade_error={tuning.cascade_error:.4f} (bound {tuning.error_bound:.4f})")
    return EXIT_OK


def cmd_dse(args) -> int:
    model, _, device = _load_inputs(args)
    lpu_scheme, hpu_scheme = _load_schemes(args)
    out = {}
    for tag, scheme in (("lpu", lpu_scheme), ("hpu", hpu_scheme)):
        arch, perf = dse.optimize_unit(model, scheme, device)
        out[tag] = {"arch": arch.to_dict(), "perf": perf.to_dict()}
        print(f"{tag}: wordlength {scheme.wordlength} "
              f"tiles ({arch.mm_tiles.tile_m},{arch.mm_tiles.tile_n},{arch.mm_tiles.tile_k}) "
              f"throughput {perf.throughput:.4g}/s ({perf.bound}-bound)")
    _write(
        os.path.join(args.out, "arch.json"),
        json.dumps(out, sort_keys=True, indent=2),
    )
    return EXIT_OK


def cmd_run(args) -> int:
    model, eval_set, device = _load_inputs(args)
    system = cascade.build_cascade(
        model,
        eval_set,
        device,
        tolerance=args.tolerance,
        metric=args.metric,
        seed=args.seed,
        paper_faithful=args.paper_faithful,
    )
    predictions, stats = cascade.run_cascade(system, eval_set.samples, eval_set.labels)
    sweep_rows = cascade.tolerance_sweep(system, eval_set)
    rep = cascade.report(system, stats, sweep_rows)
    _write(os.path.join(args.out, "lpu_scheme.json"), system.lpu.scheme.to_json())
    _write(os.path.join(args.out, "hpu_scheme.json"), system.hpu.scheme.to_json())
    _write(os.path.join(args.out, "ceu.json"), system.ceu_config.to_json() + "\n")
    _write(os.path.join(args.out, "report.json"), rep.to_json())
    _write(os.path.join(args.out, "report.txt"), rep.to_text())
    _write(os.path.join(args.out, "plot_data.csv"), rep.plot_csv())
    np.save(os.path.join(args.out, "predictions.npy"), predictions)
    print(rep.to_text(), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qcascade",
        description="build and evaluate two-stage quantised CNN cascades",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("quantize", help="wordlength sweep and scheme selection")
    _add_common(p)
    p.set_defaults(fn=cmd_quantize)

    p = sub.add_parser("tune", help="confidence-test tuning from scheme files")
    _add_common(p)
    p.add_argument("--schemes", required=True,
                   help="directory holding lpu_scheme.json and hpu_scheme.json")
    p.set_defaults(fn=cmd_tune)

    p = sub.add_parser("dse", help="architecture search for both schemes")
    _add_common(p)
    p.add_argument("--schemes", required=True,
                   help="directory holding lpu_scheme.json and hpu_scheme.json")
    p.set_defaults(fn=cmd_dse)

    p = sub.add_parser("run", help="end-to-end build, run, and report")
    _add_common(p)
    p.set_defaults(fn=cmd_run)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (quantizer.InfeasibleToleranceError, dse.NoFeasibleConfigError) as e:
        print(f"error [{args.command}]: infeasible: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (
        FileNotFoundError,
        ContainerError,
        ValidationError,
        json.JSONDecodeError,
        KeyError,
    ) as e:
        print(f"error [{args.command}]: {e}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except cascade.BuildStageError as e:
        infeasible = isinstance(
            e.cause, (quantizer.InfeasibleToleranceError, dse.NoFeasibleConfigError)
        )
        print(f"error [{args.command}]: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE if infeasible else EXIT_BAD_INPUT


if __name__ == "__main__":
    raise SystemExit(main())
