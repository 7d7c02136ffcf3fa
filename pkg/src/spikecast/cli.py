"""Command-line front end.

Subcommands mirror the pipeline: calibrate, convert, run, sweep, report.
Outputs are files only and byte-identical across reruns of the same
inputs. Exit codes: 0 success, 1 usage error, 2 data or validation
error, 3 internal invariant violation. Errors print one line to stderr
as ``error: <category>: <message>``.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

from . import container, metrics
from .convert import ConversionConfig, apply_tre, convert, fold_batchnorm, quantize
from .errors import DataError, InvariantError, SpikecastError, UsageError

ENV_OUT = "SPIKECAST_OUT"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v != ""]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got '{text}'") from None


def _kappa_arg(text: str):
    values = [float(v) for v in text.split(",") if v != ""]
    return values[0] if len(values) == 1 else values


def _default_out(explicit, leaf: str):
    if explicit:
        return Path(explicit)
    base = os.environ.get(ENV_OUT, ".")
    return Path(base) / leaf


def build_parser() -> _Parser:
    parser = _Parser(prog="spikecast", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="measure per-layer activation maxima")
    p.add_argument("--model", required=True, help="CNN container path")
    p.add_argument("--data", required=True, help="calibration dataset container")
    p.add_argument("--epsilon", type=float, default=None,
                   help="override the stored batchnorm stability constant")
    p.add_argument("--histogram-bins", type=int, default=None)
    p.add_argument("--out", default=None, help="stats JSON path (default $SPIKECAST_OUT/stats.json)")

    p = sub.add_parser("convert", help="convert a CNN container into an SNN container")
    p.add_argument("--model", required=True)
    p.add_argument("--stats", required=True, help="stats JSON from 'calibrate'")
    p.add_argument("--mode", choices=["ecc", "wn", "tb"], default="ecc")
    p.add_argument("--kappa", type=_kappa_arg, default=None,
                   help="current amplification factor(s), ecc mode only (default 100)")
    p.add_argument("--kappa0", type=float, default=100.0, help="input encoder amplification")
    p.add_argument("--eta", type=float, default=None,
                   help="residual-flush strength in [0,1), ecc mode only (default 0.5)")
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--timesteps", type=int, default=256)
    p.add_argument("--bits", type=int, default=None, help="fixed-point bit width")
    p.add_argument("--out", default=None, help="SNN container path")

    p = sub.add_parser("run", help="classify a dataset and report accuracy and energy")
    p.add_argument("--snn", required=True, help="SNN container path")
    p.add_argument("--data", required=True, help="test dataset container")
    p.add_argument("--timesteps", type=int, default=None)
    p.add_argument("--record-per-step", action="store_true",
                   help="also emit the per-timestep synaptic-op series (records rasters)")
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    p.add_argument("--out", default=None, help="output directory")

    p = sub.add_parser("sweep", help="accuracy and energy versus timesteps (and bit width)")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--snn", help="fixed converted SNN container")
    group.add_argument("--stats", help="stats JSON; re-converts per T with the flags below")
    p.add_argument("--mode", choices=["ecc", "wn", "tb"], default="ecc")
    p.add_argument("--kappa", type=_kappa_arg, default=None)
    p.add_argument("--kappa0", type=float, default=100.0)
    p.add_argument("--eta", type=float, default=None)
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--timesteps-list", type=_int_list, required=True)
    p.add_argument("--bits-list", type=_int_list, default=None)
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    p.add_argument("--out", default=None, help="output directory")

    p = sub.add_parser("report", help="consolidate a run directory into one JSON summary")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--out", default=None, help="summary path (default <run-dir>/summary.json)")
    return parser


def _resolve_conversion_flags(args):
    """Validate mode-dependent flags; residual flush is an ecc-only technique."""
    if args.mode != "ecc":
        if args.eta is not None:
            raise UsageError(f"--eta applies to ecc mode only (mode is '{args.mode}')")
        if args.kappa is not None:
            raise UsageError(f"--kappa applies to ecc mode only (mode is '{args.mode}')")
    eta = 0.5 if args.eta is None else args.eta
    kappa = 100.0 if args.kappa is None else args.kappa
    return kappa, eta


def _load_stats(path):
    from .convert import CalibrationStats
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"stats file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"stats file {path} is not valid JSON: {exc}") from None
    if doc.get("kind") != "calibration":
        raise DataError(f"{path}: not a calibration stats file")
    return CalibrationStats(lambdas=tuple(doc["lambdas"]), sample_count=int(doc["sample_count"]))


def _write_stats(stats, path) -> None:
    doc = {"format_version": container.FORMAT_VERSION, "kind": "calibration",
           "lambdas": list(stats.lambdas), "sample_count": stats.sample_count}
    if stats.histograms is not None:
        doc["histograms"] = [list(h) for h in stats.histograms]
    metrics.write_json(doc, path)


def cmd_calibrate(args) -> int:
    model = container.load_model(args.model)
    calib = container.load_dataset(args.data)
    folded = fold_batchnorm(model, args.epsilon) if model.has_batchnorm() else model
    from .convert import calibrate
    stats = calibrate(folded, calib, histogram_bins=args.histogram_bins)
    out = _default_out(args.out, "stats.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_stats(stats, out)
    print(out)
    return 0


def _convert_from_flags(model, stats, args, timesteps: int, bits=None):
    kappa, eta = _resolve_conversion_flags(args)
    cfg = ConversionConfig(mode=args.mode, kappa=kappa, kappa0=args.kappa0, eta=eta,
                           epsilon=args.epsilon, timesteps=timesteps, quant_bits=bits)
    folded = fold_batchnorm(model, cfg.epsilon) if model.has_batchnorm() else model
    snn = convert(folded, stats, cfg)
    if cfg.mode == "ecc" and cfg.eta > 0:
        snn = apply_tre(snn, cfg.eta, cfg.timesteps)
    if bits is not None:
        snn = quantize(snn, bits)
    return snn


def cmd_convert(args) -> int:
    model = container.load_model(args.model)
    stats = _load_stats(args.stats)
    snn = _convert_from_flags(model, stats, args, args.timesteps, args.bits)
    out = _default_out(args.out, "snn")
    container.save_snn_model(snn, out)
    print(out)
    return 0


def cmd_run(args) -> int:
    snn = container.load_snn_model(args.snn)
    bundle = container.load_dataset(args.data)
    ev = metrics.evaluate(snn, bundle, args.timesteps, jobs=max(1, args.jobs))
    report = metrics.energy_report(snn, ev)
    out = _default_out(args.out, "run")
    out.mkdir(parents=True, exist_ok=True)
    metrics.write_json({
        "samples": ev["samples"], "timesteps": ev["timesteps"],
        "snn_acc": ev["accuracy"], "synops": report.snn_synops, "macs": report.cnn_macs,
        "residuals": ev["residuals"],
    }, out / "run.json")
    metrics.write_per_layer_csv(report, out / "per_layer.csv")
    if args.record_per_step:
        series = metrics.per_step_synops(snn, bundle, args.timesteps)
        with open(out / "per_step_synops.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "synops"])
            for t, value in enumerate(series, start=1):
                writer.writerow([t, int(value)])
    print(out / "run.json")
    return 0


def cmd_sweep(args) -> int:
    model = container.load_model(args.model)
    bundle = container.load_dataset(args.data)
    if not args.timesteps_list:
        raise UsageError("--timesteps-list must not be empty")
    jobs = max(1, args.jobs)
    if args.snn:
        snn = container.load_snn_model(args.snn)
        source = snn
        folded = fold_batchnorm(model, args.epsilon) if model.has_batchnorm() else model
    else:
        stats = _load_stats(args.stats)
        source = lambda T: _convert_from_flags(model, stats, args, T)  # noqa: E731
        folded = fold_batchnorm(model, args.epsilon) if model.has_batchnorm() else model
    rows = metrics.accuracy_sweep(folded, source, bundle, args.timesteps_list, jobs=jobs)
    out = _default_out(args.out, "sweep")
    out.mkdir(parents=True, exist_ok=True)
    metrics.write_sweep_csv(rows, out / "sweep.csv")
    metrics.write_json(rows, out / "sweep.json")
    if args.bits_list:
        if args.snn:
            raise UsageError("--bits-list needs --stats (quantization re-runs the conversion)")
        bit_rows = []
        for bits in args.bits_list:
            for T in args.timesteps_list:
                qsnn = _convert_from_flags(model, stats, args, T, bits=bits)
                row = metrics.accuracy_sweep(folded, qsnn, bundle, [T], jobs=jobs)[0]
                bit_rows.append({"bits": int(bits), **row})
        cols = ("bits",) + metrics.SWEEP_COLUMNS
        with open(out / "bits_sweep.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=cols)
            writer.writeheader()
            for row in bit_rows:
                writer.writerow({k: row[k] for k in cols})
        metrics.write_json(bit_rows, out / "bits_sweep.json")
    print(out / "sweep.csv")
    return 0


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    if not run_dir.is_dir():
        raise DataError(f"run directory not found: {run_dir}")
    summary = {"run_dir": str(run_dir), "files": {}}
    for name in sorted(os.listdir(run_dir)):
        path = run_dir / name
        if name.endswith(".json") and name != "summary.json":
            with open(path) as fh:
                summary["files"][name] = json.load(fh)
        elif name.endswith(".csv"):
            with open(path, newline="") as fh:
                summary["files"][name] = list(csv.DictReader(fh))
    if not summary["files"]:
        raise DataError(f"run directory {run_dir} holds no report files")
    out = Path(args.out) if args.out else run_dir / "summary.json"
    metrics.write_json(summary, out)
    print(out)
    return 0


_COMMANDS = {"calibrate": cmd_calibrate, "convert": cmd_convert, "run": cmd_run,
             "sweep": cmd_sweep, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: usage: {_one_line(exc)}", file=sys.stderr)
        return 1
    except (DataError,) as exc:
        print(f"error: data: {_one_line(exc)}", file=sys.stderr)
        return 2
    except InvariantError as exc:
        print(f"error: invariant: {_one_line(exc)}", file=sys.stderr)
        return 3
    except SpikecastError as exc:  # pragma: no cover - safety net
        print(f"error: internal: {_one_line(exc)}", file=sys.stderr)
        return 3


def _one_line(exc: Exception) -> str:
    return " ".join(str(exc).split())


if __name__ == "__main__":
    sys.exit(main())
