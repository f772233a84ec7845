"""Command-line entry point.

Subcommands: gen-data, train, eval, congestion, transfer, spectral, version.
Every subcommand accepts `--config FILE` (a strict JSON mapping of flag
names to values; unknown keys are rejected) with explicit flags winning
over config values. All randomness flows from the seed; output files embed
a hash of the effective configuration. Exit codes: 0 success, 1 usage
error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import __version__, case_io, experiments, grid_model, nn, opf, spectral
from .errors import BadConfig, GridflowError

INPUT_PATH_KEYS = {"case", "data", "model", "config"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(1)


def _int_list(text):
    return [int(v) for v in text.split(",") if v.strip() != ""]


def _float_pair(text):
    vals = [float(v) for v in text.split(",")]
    if len(vals) != 2:
        raise argparse.ArgumentTypeError("expected LO,HI")
    return tuple(vals)


def _add_common(p):
    p.add_argument("--config", help="JSON config file; flags override it")


def _build_parser():
    parser = _Parser(prog="gridflow", description=__doc__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data",
                       help="generate a labeled dc-OPF dataset")
    p.add_argument("--case", help="MATPOWER case file")
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output dataset CSV")
    p.add_argument("--load-range", type=_float_pair, default=(0.85, 1.15))
    p.add_argument("--cost-range", type=_float_pair, default=(0.9, 1.1))
    p.add_argument("--outage", type=_int_list, default=[],
                   help="comma-separated live-line indices to remove first")
    _add_common(p)

    p = sub.add_parser("train",
                       help="train a model on a dataset")
    p.add_argument("--case", help="MATPOWER case file")
    p.add_argument("--data", help="dataset CSV")
    p.add_argument("--model-kind", choices=("gnn", "fcnn"), default="gnn")
    p.add_argument("--widths", type=_int_list, default=[4, 5, 10, 10, 5, 5])
    p.add_argument("--fr", choices=("none", "dc", "ac"), default="none")
    p.add_argument("--gamma-fr", type=float, default=1e-2)
    p.add_argument("--gamma-v", type=float, default=0.0)
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--batch", type=int, default=128)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-model", help="checkpoint output path")
    p.add_argument("--report", help="report JSON output path")
    _add_common(p)

    p = sub.add_parser("eval",
                       help="evaluate a checkpoint on a dataset")
    p.add_argument("--case")
    p.add_argument("--data")
    p.add_argument("--model")
    p.add_argument("--report")
    _add_common(p)

    p = sub.add_parser("congestion",
                       help="train the binding-line classifier")
    p.add_argument("--case")
    p.add_argument("--data")
    p.add_argument("--widths", type=_int_list, default=[4, 5, 10, 10, 5, 5])
    p.add_argument("--top-k", type=int, default=10)
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--batch", type=int, default=128)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-model")
    p.add_argument("--report")
    _add_common(p)

    p = sub.add_parser("transfer",
                       help="adapt a trained model to a line-outage topology")
    p.add_argument("--case")
    p.add_argument("--model", help="checkpoint trained on the intact topology")
    p.add_argument("--outage", type=_int_list, help="lines to remove")
    p.add_argument("--samples", type=int, default=1000,
                   help="post-outage samples to generate for retraining")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--retrain-epochs", type=int, default=10)
    p.add_argument("--load-range", type=_float_pair, default=(0.85, 1.15))
    p.add_argument("--cost-range", type=_float_pair, default=(0.9, 1.1))
    p.add_argument("--out-model")
    p.add_argument("--report")
    _add_common(p)

    p = sub.add_parser("spectral",
                       help="per-outage subspace stability report")
    p.add_argument("--case")
    p.add_argument("--lines", default="all",
                   help="'all' or comma-separated live-line indices")
    p.add_argument("--s", type=int, default=0,
                   help="subspace dimension; 0 = energy rule")
    p.add_argument("--tap-model", action="store_true",
                   help="weight transformer susceptances by the turns ratio")
    p.add_argument("--report", help="CSV output path")
    _add_common(p)

    sub.add_parser("version", help="print version")
    return parser


def _apply_config(args, parser_defaults):
    """Merge the JSON config under explicit flags; reject unknown keys."""
    if not getattr(args, "config", None):
        return args
    try:
        with open(args.config) as fh:
            cfg = json.load(fh)
    except FileNotFoundError as exc:
        raise BadConfig(f"config file not found: {args.config}") from exc
    except json.JSONDecodeError as exc:
        raise BadConfig(f"config is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise BadConfig("config must be a JSON object")
    known = set(vars(args))
    for key, value in cfg.items():
        attr = key.replace("-", "_")
        if attr not in known or attr == "config":
            raise BadConfig(f"unknown config key {key!r}")
        if attr in INPUT_PATH_KEYS and not os.path.exists(str(value)):
            raise BadConfig(f"config path {key!r} does not exist: {value}")
        # flags win: only fill values the user left at the parser default
        if getattr(args, attr) == parser_defaults.get(attr):
            if isinstance(value, list) and attr in ("load_range", "cost_range"):
                value = tuple(value)
            setattr(args, attr, value)
    return args


def _config_hash(args):
    payload = {k: v for k, v in sorted(vars(args).items()) if k != "config"}
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _load_case_grid(path, outages=()):
    with open(path) as fh:
        case = case_io.parse_matpower_case(fh.read())
    grid = grid_model.build_linalg(case)
    if outages:
        grid = grid_model.apply_outage(grid, outages).post_grid
    return case, grid


def _require(args, *names):
    for name in names:
        if getattr(args, name) in (None, ""):
            raise BadConfig(f"missing required option --{name.replace('_', '-')}")


def _cmd_gen_data(args):
    _require(args, "case", "out")
    case, _ = _load_case_grid(args.case)
    spec = opf.SampleSpec(n_samples=args.samples,
                          load_scale_range=tuple(args.load_range),
                          cost_scale_range=tuple(args.cost_range),
                          seed=args.seed)
    ds = opf.generate_dataset(case, spec, outages=set(args.outage))
    ds.header["config_hash"] = _config_hash(args)
    case_io.write_dataset(args.out, ds)
    print(f"wrote {ds.n_samples} samples to {args.out} "
          f"({ds.header['rejections']} rejected draws)")
    return 0


def _train_config(args):
    loss = nn.LossConfig(gamma_fr=args.gamma_fr if args.fr != "none" else 0.0,
                         gamma_v=args.gamma_v, fr_mode=args.fr)
    return experiments.TrainConfig(
        model_kind=args.model_kind, widths=tuple(args.widths), loss=loss,
        lr=args.lr, batch_size=args.batch, max_epochs=args.epochs,
        seed=args.seed)


def _cmd_train(args):
    _require(args, "case", "data")
    ds = case_io.read_dataset(args.data)
    case, grid = _load_case_grid(args.case, ds.header.get("outaged_lines", ()))
    config = _train_config(args)
    model, report = experiments.train(ds, grid, config)
    chash = _config_hash(args)
    if args.out_model:
        manifest, arrays = model.checkpoint_payload(
            extra={"config_hash": chash, "n_train_samples": ds.n_samples,
                   "case_name": case.name})
        case_io.save_checkpoint(args.out_model, manifest, arrays)
    payload = {"command": "train", "config_hash": chash,
               "case": case.name, "report": report.to_dict()}
    if args.report:
        experiments.write_report_json(args.report, payload)
    print(json.dumps(payload["report"], indent=2, sort_keys=True))
    print(f"trained in {report.train_time_s:.1f}s ({report.epochs} epochs)")
    return 0


def _cmd_eval(args):
    _require(args, "case", "data", "model")
    ds = case_io.read_dataset(args.data)
    case, grid = _load_case_grid(args.case, ds.header.get("outaged_lines", ()))
    model = case_io.load_model(args.model, n_nodes=case.n_buses)
    report = experiments.evaluate(model, ds, grid)
    payload = {"command": "eval", "config_hash": _config_hash(args),
               "case": case.name, "report": report.to_dict()}
    if args.report:
        experiments.write_report_json(args.report, payload)
    print(json.dumps(payload["report"], indent=2, sort_keys=True))
    return 0


def _cmd_congestion(args):
    _require(args, "case", "data")
    ds = case_io.read_dataset(args.data)
    case, grid = _load_case_grid(args.case, ds.header.get("outaged_lines", ()))
    config = experiments.TrainConfig(widths=tuple(args.widths), lr=args.lr,
                                     batch_size=args.batch,
                                     max_epochs=args.epochs, seed=args.seed)
    model, report = experiments.congestion_classify(ds, grid, config,
                                                    top_k=args.top_k)
    chash = _config_hash(args)
    if args.out_model:
        manifest, arrays = model.checkpoint_payload(extra={"config_hash": chash})
        case_io.save_checkpoint(args.out_model, manifest, arrays)
    payload = {"command": "congestion", "config_hash": chash,
               "active_lines": list(report.active_lines),
               "recall": report.recall, "f1": report.f1,
               "per_line": {str(k): v for k, v in report.per_line.items()}}
    if args.report:
        experiments.write_report_json(args.report, payload)
    print(f"macro recall {report.recall:.3f}, macro f1 {report.f1:.3f} "
          f"over lines {list(report.active_lines)}")
    return 0


def _cmd_transfer(args):
    _require(args, "case", "model", "outage")
    case, grid = _load_case_grid(args.case)
    model = case_io.load_model(args.model, n_nodes=case.n_buses)
    manifest, _ = case_io.load_checkpoint(args.model)
    orig_n = manifest.get("extra", {}).get("n_train_samples")
    cap = args.samples if orig_n is None else min(args.samples,
                                                  max(1, orig_n // 2))
    contingency = grid_model.apply_outage(grid, set(args.outage))
    spec = opf.SampleSpec(n_samples=cap,
                          load_scale_range=tuple(args.load_range),
                          cost_scale_range=tuple(args.cost_range),
                          seed=args.seed)
    ds_new = opf.generate_dataset(case, spec, outages=set(args.outage))
    config = experiments.TrainConfig(
        widths=tuple(model.widths), seed=args.seed)
    retrained, report = experiments.topology_transfer(
        model, grid, contingency, ds_new, config,
        retrain_epochs=args.retrain_epochs,
        scenario=f"outage-{','.join(str(k) for k in sorted(set(args.outage)))}")
    chash = _config_hash(args)
    if args.out_model:
        manifest, arrays = retrained.checkpoint_payload(
            extra={"config_hash": chash, "outaged_lines": sorted(set(args.outage))})
        case_io.save_checkpoint(args.out_model, manifest, arrays)
    payload = {
        "command": "transfer", "config_hash": chash,
        "scenario": report.scenario,
        "outaged_lines": list(report.outaged_lines),
        "pre": report.pre.to_dict(), "post": report.post.to_dict(),
        "retrain_epochs": report.retrain_epochs,
        "subspace_distance_fro": report.subspace_distance_fro,
        "subspace_distance_2": report.subspace_distance_2,
        "dk_bounds": {str(k): v for k, v in report.dk_bounds.items()},
        "delta_h": report.delta_h, "subspace_dim": report.subspace_dim,
    }
    if args.report:
        experiments.write_report_json(args.report, payload)
    print(f"{report.scenario}: pre nmse_pi {report.pre.nmse_pi:.4f} -> "
          f"post {report.post.nmse_pi:.4f} in {report.retrain_epochs} epochs; "
          f"d_fro={report.subspace_distance_fro:.4f} dH={report.delta_h:.4f}")
    return 0


_SPECTRAL_COLUMNS = ("line", "from_bus", "to_bus", "x", "s", "delta",
                     "delta_prime", "delta_norm_fro", "delta_norm_2",
                     "distance_fro", "distance_2", "bound_fro_term1",
                     "bound_fro_term2", "bound_fro", "bound_2")


def _cmd_spectral(args):
    _require(args, "case")
    with open(args.case) as fh:
        case = case_io.parse_matpower_case(fh.read())
    grid = grid_model.build_linalg(case, tap_model=args.tap_model)
    lines = (range(grid.n_lines) if args.lines == "all"
             else _int_list(args.lines))
    s, rows = spectral.outage_scenario_report(grid, lines,
                                              s=args.s if args.s > 0 else None)
    header = f"{'line':>5} {'buses':>9} {'x':>8} {'dist_F':>9} {'dist_2':>9} " \
             f"{'bound_F':>10} {'bound_2':>10}"
    print(f"subspace dimension s = {s}")
    print(header)
    for r in rows:
        tag = f"{r['from_bus']}-{r['to_bus']}"
        if r.get("bridge"):
            print(f"{r['line']:>5} {tag:>9} {r['x']:>8.4f} {'bridge':>9}")
            continue
        print(f"{r['line']:>5} {tag:>9} {r['x']:>8.4f} {r['distance_fro']:>9.5f} "
              f"{r['distance_2']:>9.5f} {r['bound_fro']:>10.4f} {r['bound_2']:>10.4f}")
    if args.report:
        with open(args.report, "w") as fh:
            fh.write("# " + json.dumps({"config_hash": _config_hash(args),
                                        "s": s, "case": case.name}) + "\n")
            fh.write(",".join(_SPECTRAL_COLUMNS) + "\n")
            for r in rows:
                if r.get("bridge"):
                    fh.write(f"{r['line']},{r['from_bus']},{r['to_bus']},"
                             f"{r['x']!r},bridge\n")
                else:
                    fh.write(",".join(repr(r[c]) if isinstance(r[c], float)
                                      else str(r[c])
                                      for c in _SPECTRAL_COLUMNS) + "\n")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "congestion": _cmd_congestion,
    "transfer": _cmd_transfer,
    "spectral": _cmd_spectral,
}


def cli_dispatch(argv):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else 0
    if args.command is None:
        parser.print_help()
        return 1
    if args.command == "version":
        print(f"gridflow {__version__}")
        return 0
    defaults = {a.dest: a.default
                for a in parser._subparsers._group_actions[0]
                .choices[args.command]._actions}
    try:
        args = _apply_config(args, defaults)
        return _COMMANDS[args.command](args)
    except BadConfig as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except GridflowError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main():
    raise SystemExit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
