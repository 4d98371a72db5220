"""Command-line interface.

Subcommands: gen (synthetic dataset), train, eval, flops, gradcheck.
Figures (loss curve, SDR chart, error histogram, FLOP comparison) are
rendered next to the CSV outputs of each report path. Exit code is 0 on
success; failures print a single `error: ...` line to stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .tensor import ConfigError, HyattError


def _cmd_gen(args) -> int:
    from .synthetic import SyntheticSpec, generate_synthetic
    from .training import apply_seed_override

    with open(args.spec, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    valid = {"count", "image_size", "num_landmarks", "noise", "seed", "spacing_mm",
             "center_jitter", "axis_range", "inner_scale", "ridge_width"}
    unknown = set(doc) - valid
    if unknown:
        raise ConfigError(f"unknown synthetic spec keys: {sorted(unknown)}")
    if "axis_range" in doc:
        doc["axis_range"] = tuple(doc["axis_range"])
    spec = SyntheticSpec(**doc)
    spec.seed = apply_seed_override(spec.seed)
    manifest = generate_synthetic(spec, args.out)
    print(f"wrote {len(manifest)} samples and manifest.json to {args.out}")
    return 0


def _cmd_train(args) -> int:
    from .training import load_train_config, train

    cfg = load_train_config(args.config)
    result = train(cfg, args.out)
    print(f"initial loss {result.initial_loss:.6g}, final loss {result.final_loss:.6g} "
          f"after {result.history[-1][0]} epochs")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"metrics: {result.metrics_path}")
    return 0


def _cmd_eval(args) -> int:
    from .training import DEFAULT_SDR_THRESHOLDS, evaluate

    thresholds = DEFAULT_SDR_THRESHOLDS
    if args.thresholds:
        thresholds = tuple(float(v) for v in args.thresholds.split(","))
    report = evaluate(args.checkpoint, args.manifest, args.out, thresholds)
    print(report.summary_line())
    for z in sorted(report.sdr):
        print(f"sdr@{z:g}{report.unit} = {report.sdr[z]:.2f}%")
    return 0


def _cmd_flops(args) -> int:
    from .figures import save_flops_chart
    from .flops import analytic_flops, verify_flop_claim
    from .training import parse_model_config

    with open(args.config, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    cfg = parse_model_config(doc)
    report, counted, mismatches = verify_flop_claim(cfg)
    sys.stdout.write(report.to_csv())
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "flops.csv"), "w", encoding="utf-8") as fh:
            fh.write(report.to_csv())
        save_flops_chart(report, os.path.join(args.out, "flops_chart.png"))
    if mismatches:
        for stage, want, got in mismatches:
            print(f"error: stage {stage} instrumented MACs {got} != analytic {want}",
                  file=sys.stderr)
        return 1
    print("instrumented token-attention MACs match the analytic counts on all stages")
    return 0


def _cmd_gradcheck(args) -> int:
    from .checks import run_end_to_end_check, run_unit_checks

    results = run_unit_checks(extended=args.extended_precision)
    results.append(run_end_to_end_check())
    failed = 0
    for result in results:
        print(result.line())
        failed += 0 if result.passed else 1
    if failed:
        print(f"error: {failed} gradient checks failed", file=sys.stderr)
        return 1
    print(f"all {len(results)} gradient checks passed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hyattnet",
        description="Hybrid routing-attention landmark detector: synthetic data, "
                    "training, evaluation, FLOP accounting and gradient checks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic dataset")
    gen.add_argument("--spec", required=True, help="synthetic spec JSON")
    gen.add_argument("--out", required=True, help="output directory")
    gen.set_defaults(fn=_cmd_gen)

    tr = sub.add_parser("train", help="train from a config file")
    tr.add_argument("--config", required=True, help="training config JSON")
    tr.add_argument("--out", required=True, help="output directory")
    tr.set_defaults(fn=_cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--manifest", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--thresholds", default=None,
                    help="comma-separated SDR thresholds (default 2,2.5,3,4)")
    ev.set_defaults(fn=_cmd_eval)

    fl = sub.add_parser("flops", help="analytic vs instrumented attention MACs")
    fl.add_argument("--config", required=True, help="model config JSON")
    fl.add_argument("--out", default=None, help="optional report directory")
    fl.set_defaults(fn=_cmd_flops)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    gc.add_argument("--extended-precision", action="store_true",
                    help="run unit checks in float64 at the 1e-5 tolerance")
    gc.set_defaults(fn=_cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except HyattError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, json.JSONDecodeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
