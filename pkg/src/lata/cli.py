"""Benchmark CLI: run experiments, generate data, sweep parameters.

Subcommands:

* ``run``     - seeded multi-trial experiment from a JSON config plus flag
                overrides; emits a deterministic JSON report, an
                aligned-column summary on stdout, a per-trial coverage/size
                CSV, and a wall-time sidecar.
* ``synth``   - generate a synthetic dataset and write its files + manifest.
* ``control`` - the double-dip negative control (probe fitted and
                conformalized on the same calibration split) next to the
                legal pipeline on identical trials.
* ``ablate``  - sweep one public parameter over a value list, one report row
                per value.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys

from .dataio import RunConfig, write_dataset
from .errors import ConfigError, DataError, NumericalError
from .harness import (ABLATION_PARAMS, parse_ablation_value, run_ablation,
                      run_control_experiment, run_experiment)
from .synthetic import SyntheticSpec, generate_synthetic

_OVERRIDE_FLAGS = [
    # (flag, config attr, type)
    ("--alpha", "alpha", float),
    ("--score", "score", str),
    ("--k-reg", "k_reg", int),
    ("--gamma-raps", "gamma_raps", float),
    ("--u-value", "u_value", float),
    ("--lambda", "lam", float),
    ("--eta", "eta", float),
    ("--gamma", "gamma", float),
    ("--t-iter", "t_iter", int),
    ("--k", "k", int),
    ("--beta", "beta", float),
    ("--pseudo-count", "pseudo_count", float),
    ("--kappa", "kappa", int),
    ("--gate-threshold", "gate_threshold", float),
    ("--tau", "tau", float),
    ("--window", "window", int),
    ("--shots", "shots", int),
    ("--trials", "trials", int),
    ("--seed", "base_seed", int),
    ("--workers", "workers", int),
    ("--provider", "provider", str),
    ("--vilu-bundle", "vilu_bundle", str),
    ("--out", "out", str),
]


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file (RunConfig fields)")
    parser.add_argument("--data", help="dataset manifest path")
    for flag, attr, typ in _OVERRIDE_FLAGS:
        parser.add_argument(flag, dest=attr, type=typ, default=None)
    parser.add_argument("--randomize", dest="randomize",
                        action=argparse.BooleanOptionalAction, default=None)


def _config_from_args(args) -> RunConfig:
    cfg = RunConfig.from_json_file(args.config) if args.config else RunConfig()
    overrides = {}
    for _, attr, _ in _OVERRIDE_FLAGS:
        val = getattr(args, attr, None)
        if val is not None:
            overrides[attr] = val
    if args.randomize is not None:
        overrides["randomize"] = args.randomize
    if args.data is not None:
        overrides["data"] = {"kind": "files", "manifest": args.data}
    cfg = dataclasses.replace(cfg, **overrides)
    cfg.validate()
    return cfg


def canonical_json(payload: dict) -> str:
    """Stable serialization used for all report files."""
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def _write_outputs(out_path: str, payload: dict, timing: dict | None,
                   frontier_rows: list[dict] | None) -> None:
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write(canonical_json(payload))
    stem, _ = os.path.splitext(out_path)
    if frontier_rows:
        with open(stem + ".csv", "w", encoding="utf-8", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(frontier_rows[0]))
            writer.writeheader()
            writer.writerows(frontier_rows)
    if timing is not None:
        with open(stem + ".timing.json", "w", encoding="utf-8") as fh:
            fh.write(canonical_json(timing))


def _format_table(headers: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h)
              for i, h in enumerate(headers)]
    def fmt(cells):
        return "  ".join(c.rjust(w) for c, w in zip(cells, widths))
    lines = [fmt(headers), fmt(["-" * w for w in widths])]
    lines.extend(fmt(r) for r in rows)
    return "\n".join(lines)


def _aggregate_row(label: str, agg: dict) -> list[str]:
    cells = [label]
    for name in ("coverage", "mean_size", "ccv", "aca"):
        cells.append(f"{agg[name]['mean']:.4f} ± {agg[name]['std']:.4f}")
    return cells


def _cmd_run(args) -> int:
    cfg = _config_from_args(args)
    if cfg.out is None:
        raise ConfigError("--out is required for run")
    result = run_experiment(cfg)
    _write_outputs(cfg.out, result.to_report_dict(), result.timing_dict(),
                   result.frontier_rows())
    timing = result.timing_dict()
    print(_format_table(["run", "coverage", "size", "ccv", "aca"],
                        [_aggregate_row(cfg.score, result.aggregate())]))
    print(f"trials={cfg.trials}  alpha={cfg.alpha}  "
          f"mean wall time/trial={timing['mean_wall_time_s']:.3f}s  "
          f"per image={timing['mean_time_per_image_s'] * 1e3:.3f}ms")
    print(f"report: {cfg.out}")
    return 0


def _cmd_control(args) -> int:
    cfg = _config_from_args(args)
    if cfg.out is None:
        raise ConfigError("--out is required for control")
    result = run_control_experiment(cfg)
    with open(cfg.out, "w", encoding="utf-8") as fh:
        fh.write(canonical_json(result.to_report_dict()))
    rows = [_aggregate_row("probe@cal+scp@same", result.illegal.aggregate()),
            _aggregate_row("refined pipeline", result.legal.aggregate())]
    print(_format_table(["arm", "coverage", "size", "ccv", "aca"], rows))
    target = 1.0 - cfg.alpha
    gap = target - result.illegal.aggregate()["coverage"]["mean"]
    print(f"target coverage={target:.3f}  double-dip shortfall={gap:+.4f}")
    print(f"report: {cfg.out}")
    return 0


def _cmd_ablate(args) -> int:
    cfg = _config_from_args(args)
    if cfg.out is None:
        raise ConfigError("--out is required for ablate")
    values = [parse_ablation_value(args.param, tok)
              for tok in args.values.split(",") if tok.strip()]
    if not values:
        raise ConfigError("--values must list at least one value")
    sweep = run_ablation(cfg, args.param, values)
    rows_json, rows_csv, rows_txt = [], [], []
    for value, result in sweep:
        agg = result.aggregate()
        rows_json.append({"value": value, "aggregate": agg})
        rows_csv.append({"value": value,
                         "coverage": agg["coverage"]["mean"],
                         "mean_size": agg["mean_size"]["mean"],
                         "ccv": agg["ccv"]["mean"],
                         "aca": agg["aca"]["mean"]})
        rows_txt.append(_aggregate_row(str(value), agg))
    payload = {"schema": "lata-ablation-v1", "param": args.param,
               "config": cfg.to_dict(), "rows": rows_json}
    _write_outputs(cfg.out, payload, None, rows_csv)
    print(_format_table([args.param, "coverage", "size", "ccv", "aca"], rows_txt))
    print(f"report: {cfg.out}")
    return 0


def _cmd_synth(args) -> int:
    weights = None
    if args.mixture:
        weights = tuple(float(t) for t in args.mixture.split(","))
    spec = SyntheticSpec(n_classes=args.classes, dim=args.dim,
                         separation=args.separation, noise=args.noise,
                         mixture_weights=weights, n_cal=args.n_cal,
                         n_test=args.n_test, seed=args.seed)
    ds = generate_synthetic(spec)
    import numpy as np

    embeddings = np.vstack([ds.cal_embeddings, ds.test_embeddings])
    labels = list(ds.cal_labels) + list(ds.test_labels)
    splits = ["cal"] * len(ds.cal_labels) + ["test"] * len(ds.test_labels)
    manifest = write_dataset(args.out_dir, embeddings, labels, splits,
                             ds.bank.prototypes, ds.bank.class_names)
    print(manifest)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lata", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a seeded multi-trial experiment")
    _add_config_flags(p_run)
    p_run.set_defaults(func=_cmd_run)

    p_control = sub.add_parser("control", help="double-dip negative control")
    _add_config_flags(p_control)
    p_control.set_defaults(func=_cmd_control)

    p_ablate = sub.add_parser("ablate", help="sweep one parameter")
    _add_config_flags(p_ablate)
    p_ablate.add_argument("--param", required=True, choices=sorted(ABLATION_PARAMS))
    p_ablate.add_argument("--values", required=True,
                          help="comma-separated list, e.g. 0.2,0.35,0.5")
    p_ablate.set_defaults(func=_cmd_ablate)

    p_synth = sub.add_parser("synth", help="generate a synthetic dataset")
    p_synth.add_argument("--out-dir", required=True)
    p_synth.add_argument("--classes", type=int, default=5)
    p_synth.add_argument("--dim", type=int, default=32)
    p_synth.add_argument("--separation", type=float, default=1.0)
    p_synth.add_argument("--noise", type=float, default=0.35)
    p_synth.add_argument("--mixture", help="comma-separated class weights")
    p_synth.add_argument("--n-cal", type=int, default=80)
    p_synth.add_argument("--n-test", type=int, default=920)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.set_defaults(func=_cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
