"""Command-line entry point: ``bonsai search | random | enumerate | report``.

Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 search did not
place every section within the epoch budget.
"""
import argparse
import csv
import json
import logging
import math
import os
import sys

import numpy as np

from .checkpoint import save_checkpoint
from .config import PRESETS, RunConfig, load_config, parse_override
from .data import load_cifar10, split_validation, synth_dataset
from .pruner import pruner_health_report, write_health_csv
from .scheduler import BudgetError, run_bonsai, run_random
from .space import (QUOTED_CELL_COUNT, QUOTED_CONNECTION_SETS, QUOTED_RESTRICTED_CELL_COUNT,
                    architecture_statistics, count_cell_configurations, count_connection_sets,
                    parse_genotype, serialize_genotype)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_NOT_CONVERGED = 0, 1, 2, 3

log = logging.getLogger("bonsai")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# --------------------------------------------------------------------------
# data and artifacts
# --------------------------------------------------------------------------

def load_data(cfg):
    """(train, val) for a run; the split depends only on the seed."""
    rng = np.random.default_rng([cfg.seed, 7])
    if cfg.dataset == "synthetic":
        full = synth_dataset(cfg.classes, cfg.per_class,
                             (cfg.image_channels, cfg.image_size, cfg.image_size), rng, cfg.synth_noise)
    elif cfg.dataset == "cifar10":
        directory = cfg.data_dir or os.environ.get("BONSAI_DATA_DIR")
        if not directory:
            raise UsageError("cifar10 needs data_dir in the config or BONSAI_DATA_DIR")
        full, _ = load_cifar10(directory)
    else:
        raise UsageError(f"unknown dataset {cfg.dataset!r}")
    return split_validation(full, cfg.val_fraction, rng)


def write_history(history, path):
    if not history:
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(history[0]))
        writer.writeheader()
        for row in history:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def read_history(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_run(directory, cfg, result):
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "config.json"), "w") as fh:
        fh.write(cfg.to_json())
    write_history(result.history, os.path.join(directory, "history.csv"))
    with open(os.path.join(directory, "final.genotype.json"), "w") as fh:
        fh.write(serialize_genotype(result.genotype))
    write_health_csv(pruner_health_report(result.model), os.path.join(directory, "pruner_health.csv"))
    save_checkpoint(result.model, os.path.join(directory, "checkpoint.bin"),
                    {"config": cfg.to_dict()})
    with open(os.path.join(directory, "summary.json"), "w") as fh:
        json.dump(result.summary, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _config_from_args(args, base=None):
    try:
        overrides = dict(parse_override(s) for s in args.set or [])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "out", None):
        overrides["output_dir"] = args.out
    if args.config and not os.path.exists(args.config):
        raise UsageError(f"config file {args.config} does not exist")
    try:
        if base is not None and not args.config:
            return RunConfig.from_dict({**base.to_dict(), **overrides})
        return load_config(args.config, args.preset, overrides)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"bad config: {exc}") from None


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_search(args):
    cfg = _config_from_args(args).updated(kind="bonsai", level=None)
    try:
        result = run_bonsai(cfg, load_data(cfg))
    except BudgetError as exc:
        print(f"infeasible budget: {exc} (minimum budget {exc.minimum} bytes)", file=sys.stderr)
        return EXIT_RUNTIME
    write_run(cfg.output_dir, cfg, result)
    if result.failed:
        print(f"search did not converge: only {len(result.model.cells)} of {cfg.cells} cells placed "
              f"in {cfg.epoch_budget} epochs; partial results in {cfg.output_dir}", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    print(f"search finished: val accuracy {result.summary['final_val_acc']:.4f}, "
          f"{result.summary['parameters']} parameters, results in {cfg.output_dir}")
    return EXIT_OK


def load_reference(directory):
    path = os.path.join(directory, "summary.json")
    if not os.path.exists(path):
        raise UsageError(f"reference run {directory} has no summary.json")
    with open(path) as fh:
        summary = json.load(fh)
    if "cell_ratios" not in summary or "sections" not in summary:
        raise UsageError(f"{path} lacks the compression profile (cell_ratios, sections)")
    base = None
    cfg_path = os.path.join(directory, "config.json")
    if os.path.exists(cfg_path):
        with open(cfg_path) as fh:
            base = RunConfig.from_dict(json.load(fh))
    return summary, base


def cmd_random(args):
    reference, base = load_reference(args.reference)
    cfg = _config_from_args(args, base)
    cfg = cfg.updated(kind=f"random-l{args.level}", level=args.level)
    if not args.out and base is not None and cfg.output_dir == base.output_dir:
        cfg = cfg.updated(output_dir=os.path.join(os.path.dirname(os.path.abspath(args.reference)),
                                                  f"random-l{args.level}-seed{cfg.seed}"))
    result = run_random(cfg, args.level, reference, load_data(cfg))
    write_run(cfg.output_dir, cfg, result)
    print(f"level-{args.level} baseline finished: val accuracy {result.summary['final_val_acc']:.4f}, "
          f"results in {cfg.output_dir}")
    return EXIT_NOT_CONVERGED if result.failed else EXIT_OK


def cmd_enumerate(args):
    first = count_cell_configurations(args.nodes, args.ops, 1)
    later = count_cell_configurations(args.nodes, args.ops, 2)
    print(f"cell configurations, {args.nodes} nodes x {args.ops} ops")
    print(f"  first cell (1 input slot):   {first} (~{first:.3e})")
    print(f"  later cells (2 input slots): {later} (~{later:.3e})  reference figure ~{QUOTED_CELL_COUNT:.0e}")
    print(f"  restricted-space figure for comparison: ~{QUOTED_RESTRICTED_CELL_COUNT:.0e}")
    if args.cells >= 2:
        sets = count_connection_sets(args.cells)
        print(f"inter-cell connection sets, {args.cells} cells: {sets}  reference figure {QUOTED_CONNECTION_SETS}")
    print("model: node k picks any op subset on each of its (inputs + k) sources, so a cell has "
          "2^(ops * sum_k(inputs + k)) configurations; cell n >= 2 may take any subset of cells "
          "0..n-2 besides the mandatory cell n-1, so a model has 2^((L-1)(L-2)/2) wiring patterns")
    return EXIT_OK


def _sem(values):
    if len(values) < 2:
        return ""
    return float(np.std(values, ddof=1) / math.sqrt(len(values)))


def _load_run(directory):
    with open(os.path.join(directory, "summary.json")) as fh:
        summary = json.load(fh)
    with open(os.path.join(directory, "final.genotype.json")) as fh:
        genotype = parse_genotype(fh.read())
    history = read_history(os.path.join(directory, "history.csv"))
    return summary, genotype, history


def cmd_report(args):
    runs = []
    for d in args.runs:
        try:
            runs.append((d, *_load_run(d)))
        except (OSError, ValueError, KeyError) as exc:
            print(f"warning: skipping {d}: {exc}", file=sys.stderr)
    if not runs:
        print("no readable run directories", file=sys.stderr)
        return EXIT_RUNTIME
    out = args.out
    os.makedirs(out, exist_ok=True)
    groups = {}
    for d, summary, genotype, history in runs:
        groups.setdefault(summary.get("kind", "bonsai"), []).append((d, summary, genotype, history))

    with open(os.path.join(out, "table1.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["group", "runs", "val_acc_mean", "val_acc_sem", "params_mean", "params_sem",
                    "bytes_mean", "bytes_sem", "not_converged"])
        for kind, items in sorted(groups.items()):
            acc = [s["final_val_acc"] for _, s, _, _ in items]
            par = [s["parameters"] for _, s, _, _ in items]
            byt = [s["final_accounted_bytes"] for _, s, _, _ in items]
            w.writerow([kind, len(items), float(np.mean(acc)), _sem(acc), float(np.mean(par)), _sem(par),
                        float(np.mean(byt)), _sem(byt),
                        sum(bool(s.get("failed_to_converge")) for _, s, _, _ in items)])

    with open(os.path.join(out, "op_frequency.csv"), "w", newline="") as fh, \
            open(os.path.join(out, "distance_histogram.csv"), "w", newline="") as fh2, \
            open(os.path.join(out, "resnet_edges.csv"), "w", newline="") as fh3:
        w, w2, w3 = csv.writer(fh), csv.writer(fh2), csv.writer(fh3)
        w.writerow(["run", "group", "cell_kind", "op", "count"])
        w2.writerow(["run", "group", "distance", "count"])
        w3.writerow(["run", "group", "resnet_edges", "mandatory_inputs", "surviving_ops"])
        for d, summary, genotype, _ in runs:
            stats = architecture_statistics(genotype)
            kind = summary.get("kind", "bonsai")
            for cell_kind, row in stats.op_frequency.items():
                for op, count in row.items():
                    w.writerow([d, kind, cell_kind, op, count])
            for dist, count in stats.distance_histogram.items():
                w2.writerow([d, kind, dist, count])
            w3.writerow([d, kind, stats.resnet_edges, stats.mandatory_inputs, stats.total_ops()])

    with open(os.path.join(out, "series.csv"), "w", newline="") as fh:
        w = None
        for d, summary, _, history in runs:
            for row in history:
                if w is None:
                    w = csv.DictWriter(fh, fieldnames=["run", "group"] + list(row), extrasaction="ignore")
                    w.writeheader()
                w.writerow({"run": d, "group": summary.get("kind", "bonsai"), **row})
    print(f"report for {len(runs)} runs written to {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def build_parser():
    parser = _Parser(prog="bonsai", description="Memory-budgeted one-shot architecture search")
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def run_options(p):
        p.add_argument("--config", help="JSON run config; keys override the preset")
        p.add_argument("--preset", choices=sorted(PRESETS), default="desk")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("search", help="grow and prune a model under the memory budget")
    run_options(p)
    p = sub.add_parser("random", help="train a random-architecture baseline")
    run_options(p)
    p.add_argument("--level", type=int, choices=(1, 2), required=True)
    p.add_argument("--reference", required=True, help="finished search run directory")
    p = sub.add_parser("enumerate", help="print search-space cardinalities")
    p.add_argument("--nodes", type=int, default=4)
    p.add_argument("--ops", type=int, default=7)
    p.add_argument("--cells", type=int, default=8)
    p = sub.add_parser("report", help="aggregate finished runs into CSV tables")
    p.add_argument("runs", nargs="+", help="run directories")
    p.add_argument("--out", default="report")
    return parser


COMMANDS = {"search": cmd_search, "random": cmd_random, "enumerate": cmd_enumerate, "report": cmd_report}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(message)s")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, KeyError, RuntimeError, FloatingPointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
