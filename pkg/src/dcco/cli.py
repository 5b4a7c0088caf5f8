"""Command line entry point: ``dcco <subcommand>``.

Exit codes: 0 success, 1 numeric failure, 2 configuration error, 3 I/O or
parse error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness, models, probe
from .config import apply_overrides, config_from_dict, load_raw
from .errors import DCCOError, InvalidConfig, NumericError, ParseError
from .presets import get_preset

EXIT_OK, EXIT_NUMERIC, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3


def _experiment_config(args, output_default: str | None = None):
    if args.config and args.preset:
        raise InvalidConfig("pass either --config or --preset, not both", "config")
    raw = load_raw(args.config) if args.config else (get_preset(args.preset) if args.preset else {})
    overrides = list(args.set or [])
    # Explicit flags win over the file and over --set.
    if getattr(args, "workers", None) is not None:
        overrides.append(f"workers={args.workers}")
    if getattr(args, "method", None) is not None:
        overrides.append(f"method={args.method}")
    if getattr(args, "rounds", None) is not None:
        overrides.append(f"rounds={args.rounds}")
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    raw = apply_overrides(raw, overrides)
    if getattr(args, "output_dir", None):
        raw["output_dir"] = args.output_dir
    elif "output_dir" not in raw and output_default:
        raw["output_dir"] = str(harness.default_output_root() / output_default)
    return config_from_dict(raw)


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML experiment file")
    p.add_argument("--preset", help="named preset, e.g. toy-noniid-2spc")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="dotted override, repeatable (e.g. --set partition.alpha=0.1)")


def cmd_pretrain(args) -> int:
    config = _experiment_config(args, output_default=args.preset or "default")
    result = harness.run_experiment(config, resume=args.resume)
    for name, report in result.reports.items():
        print(f"{name}: accuracy={report.accuracy:.4f}")
    print(f"artifacts: {result.output_dir}")
    if result.failed_at is not None:
        print(f"training stopped by a numeric failure at round {result.failed_at}", file=sys.stderr)
        return EXIT_NUMERIC
    if result.probe_errors:
        for name, msg in result.probe_errors.items():
            print(f"{name}: numeric failure: {msg}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_probe(args) -> int:
    config = _experiment_config(args)
    encoder, _ = models.load_params(args.model)
    splits = harness.build_splits(config)
    pc = probe.ProbeConfig(protocol=args.protocol, labeled_fraction=args.labeled_fraction,
                           steps=args.steps, lr=args.lr, seed=args.seed or 0)
    report = harness.run_probe(encoder, splits, pc)
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text)
    print(f"{pc.protocol}: accuracy={report.accuracy:.4f}")
    return EXIT_OK


def cmd_verify(args) -> int:
    report = harness.verify_equivalence(args.trials, args.seed, args.tolerance, echo=print)
    print(f"max deviation {report['max_deviation']:.3e} (tolerance {args.tolerance:.1e}): "
          f"{'PASS' if report['passed'] else 'FAIL'}")
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2))
    return EXIT_OK if report["passed"] else EXIT_NUMERIC


def cmd_export_plot(args) -> int:
    n = harness.export_plot_data(args.metrics, args.out)
    print(f"wrote {n} rows to {args.out}")
    return EXIT_OK


def cmd_partition(args) -> int:
    config = _experiment_config(args)
    print(json.dumps(harness.partition_summary(config), indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dcco", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="run federated or centralized pretraining")
    _add_config_args(p)
    p.add_argument("--method", choices=("dcco", "fedavg_cco", "fedavg_contrastive", "centralized_cco"))
    p.add_argument("--rounds", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--output-dir")
    p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("probe", help="evaluate a saved encoder")
    _add_config_args(p)
    p.add_argument("--model", required=True, help="encoder .params file")
    p.add_argument("--protocol", choices=probe.PROTOCOLS, default="linear")
    p.add_argument("--labeled-fraction", type=float, default=0.1)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--lr", type=float, default=5e-3)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="write the JSON report here")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("verify-equivalence", help="DCCO round vs centralized step on random problems")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-8)
    p.add_argument("--out")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("export-plot", help="metrics.jsonl to CSV")
    p.add_argument("metrics")
    p.add_argument("out")
    p.set_defaults(func=cmd_export_plot)

    p = sub.add_parser("partition-inspect", help="summarize the client partition of a config")
    _add_config_args(p)
    p.set_defaults(func=cmd_partition)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InvalidConfig as exc:
        where = f" [{exc.field}]" if getattr(exc, "field", None) else ""
        print(f"config error{where}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DCCOError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
