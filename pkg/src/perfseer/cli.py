"""Command-line entry point: ``perfseer <command> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Errors are printed to stderr as ``error[<code>]: <message>``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .errors import DivergedLoss, GraphError, PerfSeerError
from .featurize import PHASES, build_perfgraph, perfgraph_from_dict
from .graph_ir import from_dict, load_graph
from .numkernel import CHECKPOINT_VERSION
from .synthbench import ArchSpec, CostOracleSpec, gen_dataset, read_dataset, write_dataset
from .trainer import (
    FittedModel, TrainConfig, evaluate, split, target_phase, train, write_predictions, write_report,
)

log = logging.getLogger("perfseer")

PERFGRAPH_VERSION = 1
EXIT_USAGE, EXIT_DATA = 1, 2
UNITS = {"time": "s", "mem": "bytes", "util": "fraction"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _read_json(path, what: str) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{what} {path} does not exist")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise GraphError(f"{path}: invalid JSON ({exc})") from exc


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n")
    else:
        print(text)


# commands

def cmd_extract(args) -> int:
    if args.from_onnx:
        from .onnx_import import load_onnx

        g = load_onnx(args.from_onnx, args.batch)
    elif args.graph:
        g = load_graph(args.graph, batch_size=args.batch)
    else:
        raise UsageError("extract needs a graph file or --from-onnx")
    pg = build_perfgraph(g, args.phase)
    _emit(pg.to_json(), args.out)
    log.info("extracted %d nodes, %d edges (%s phase)", len(pg.V), len(pg.E), args.phase)
    return 0


def cmd_gen_dataset(args) -> int:
    raw = _read_json(args.spec, "spec file") if args.spec else {}
    try:
        oracle = CostOracleSpec(**raw.pop("oracle", {}))
    except TypeError as exc:
        raise UsageError(f"bad oracle settings: {exc}") from exc
    spec = ArchSpec.from_dict(raw)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    samples = gen_dataset(spec, args.n, oracle)
    write_dataset(samples, args.out, spec, oracle)
    log.info("wrote %d graphs to %s", len(samples), args.out)
    return 0


def _load_config(args) -> TrainConfig:
    raw = _read_json(args.config, "training config") if args.config else {}
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.max_epochs is not None:
        raw["max_epochs"] = args.max_epochs
    try:
        return TrainConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad training config: {exc}") from exc


def _check_dataset(path) -> Path:
    ds = Path(path)
    if not (ds / "labels.csv").is_file():
        raise FileNotFoundError(f"{ds} is not a dataset directory (no labels.csv)")
    return ds


def _write_run_report(report, rows, out: Path, figures: bool) -> None:
    write_report(report, out / "report.json")
    (out / "report.txt").write_text(report.table() + "\n")
    write_predictions(rows, out / "predictions.csv")
    if figures:
        from .plotting import plot_predictions

        plot_predictions(rows, out / "figures" / "predictions.png")


def cmd_train(args) -> int:
    config = _load_config(args)
    ds = _check_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    samples = read_dataset(ds)
    tr, va, te = split(samples, config.split_ratio, config.seed)
    membership = {"data": str(args.data), "seed": config.seed, "ratio": list(config.split_ratio),
                  **{name: [s.graph_id for s in part] for name, part in zip(("train", "val", "test"), (tr, va, te))}}
    (out / "split.json").write_text(json.dumps(membership, indent=1))
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=1, sort_keys=True))
    log.info("training on %d graphs (val %d, test %d), targets %s", len(tr), len(va), len(te),
             ",".join(config.targets))

    def progress(rec):
        log.info("epoch %d lr %.3g train %.5f val %.5f", rec["epoch"], rec["lr"], rec["train_loss"],
                 rec["val_loss"])

    try:
        fitted, history = train(config, tr, va, on_epoch=progress)
    except DivergedLoss as exc:
        if exc.last_good is not None:
            exc.last_good.save(out / "best.bin")
        raise
    fitted.save(out / "best.bin")
    history.write_csv(out / "history.csv")
    report, rows = evaluate(fitted, te)
    _write_run_report(report, rows, out, not args.no_figures)
    if not args.no_figures:
        from .plotting import plot_history

        plot_history(history.epochs, out / "figures" / "history.png", history.best_epoch)
    print(report.table())
    if args.json:
        print(json.dumps(report.to_dict(), indent=1, sort_keys=True))
    return 0


def cmd_predict(args) -> int:
    fitted = FittedModel.load(args.ckpt)
    metric = args.metric or fitted.targets[0]
    k = fitted.head_index(metric)
    phase = target_phase(metric)
    raw = _read_json(args.graph, "graph file")
    try:
        pg = perfgraph_from_dict(raw) if "u" in raw else build_perfgraph(from_dict(raw), phase)
    except (KeyError, TypeError) as exc:
        raise GraphError(f"{args.graph}: not a PerfGraph or graph file ({exc})") from exc
    if pg.phase != phase:
        raise GraphError(f"{args.graph} was extracted for the {pg.phase} phase but {metric} needs {phase}")
    value = float(fitted.predict_physical([fitted.prepare(pg)])[0, k])
    if args.json:
        print(json.dumps({"metric": metric, "value": value, "unit": UNITS[metric.split("_")[1]]}, sort_keys=True))
    else:
        print(f"{metric}\t{value!r}")
    return 0


def cmd_evaluate(args) -> int:
    ckpt = Path(args.ckpt)
    fitted = FittedModel.load(ckpt)
    membership = _read_json(ckpt.parent / "split.json", "split file")
    ds = _check_dataset(args.data or membership["data"])
    if args.split not in ("train", "val", "test"):
        raise UsageError(f"unknown split {args.split!r}")
    by_id = {s.graph_id: s for s in read_dataset(ds)}
    missing = [gid for gid in membership[args.split] if gid not in by_id]
    if missing:
        raise GraphError(f"{ds} is missing {len(missing)} graphs of the {args.split} split")
    # keep the split's order so the report matches the one written at training time
    samples = [by_id[gid] for gid in membership[args.split]]
    report, rows = evaluate(fitted, samples, args.targets)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_run_report(report, rows, out, not args.no_figures)
    print(report.table())
    if args.json:
        print(json.dumps(report.to_dict(), indent=1, sort_keys=True))
    return 0


# wiring

def _global_options(suppress: bool) -> argparse.ArgumentParser:
    """Options accepted before or after the command name.

    The copy attached to each command uses SUPPRESS defaults so it does not
    overwrite values given before the command.
    """
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    g = _Parser(add_help=False)
    g.add_argument("--seed", type=int, default=d(None), help="seed for every random choice (overrides config files)")
    g.add_argument("-v", "--verbose", action="count", default=d(0))
    g.add_argument("-q", "--quiet", action="store_true", default=d(False))
    g.add_argument("--log-file", default=d(None), help="also write a timestamped debug log here")
    return g


def build_parser() -> argparse.ArgumentParser:
    common = _global_options(suppress=True)
    p = _Parser(prog="perfseer", description="Predict runtime metrics of deep-learning graphs.",
                parents=[_global_options(suppress=False)])
    p.add_argument("--version", action="version",
                   version=f"perfseer {__version__} (checkpoint format {CHECKPOINT_VERSION}, "
                           f"perfgraph format {PERFGRAPH_VERSION})")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("extract", parents=[common], help="turn a graph into its feature representation")
    s.add_argument("graph", nargs="?", help="graph JSON file")
    s.add_argument("--from-onnx", metavar="MODEL", help="read an ONNX model instead")
    s.add_argument("--batch", type=int, help="override the batch size")
    s.add_argument("--phase", choices=PHASES, default="infer")
    s.add_argument("--out", help="output file (default: stdout)")
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("gen-dataset", parents=[common], help="generate an oracle-labelled synthetic dataset")
    s.add_argument("--spec", help="JSON architecture spec; an 'oracle' key sets cost-model constants")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_dataset)

    s = sub.add_parser("train", parents=[common], help="train a model and report test-split metrics")
    s.add_argument("--config", help="JSON training config")
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--out", required=True, help="run directory")
    s.add_argument("--max-epochs", type=int)
    s.add_argument("--no-figures", action="store_true")
    s.add_argument("--json", action="store_true", help="also print the report as JSON")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", parents=[common], help="predict one metric for one graph")
    s.add_argument("graph", help="PerfGraph JSON (from extract) or graph JSON")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--metric")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("evaluate", parents=[common], help="metrics of a checkpoint on one split")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--data", help="dataset directory (default: the one used for training)")
    s.add_argument("--targets", nargs="+")
    s.add_argument("--out", help="write report.json, report.txt and predictions.csv here")
    s.add_argument("--no-figures", action="store_true")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_evaluate)
    return p


def _setup_logging(args) -> list:
    level = logging.ERROR if args.quiet else (logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)]
    handlers = [logging.StreamHandler(sys.stderr)]
    handlers[0].setLevel(level)
    handlers[0].setFormatter(logging.Formatter("%(message)s"))
    if args.log_file:
        fh = logging.FileHandler(args.log_file)
        fh.setLevel(logging.DEBUG)
        fh.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        handlers.append(fh)
    log.setLevel(logging.DEBUG)
    for h in handlers:
        log.addHandler(h)
    return handlers


def _fail(code: int, message) -> int:
    print(f"error[{code}]: {message}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        return _fail(EXIT_USAGE, exc)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    handlers = _setup_logging(args)
    try:
        return args.func(args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, exc)
    except PerfSeerError as exc:
        return _fail(exc.exit_code, exc)
    except (FileNotFoundError, IsADirectoryError, KeyError, ValueError) as exc:
        return _fail(EXIT_DATA, exc)
    finally:
        for h in handlers:
            log.removeHandler(h)
            h.close()


if __name__ == "__main__":
    sys.exit(main())
