"""Command-line entry point: ``glgnn {train,denoise,features,baseline,sweep}``.

Each run writes into an output directory (``--out``, else ``$GLGNN_OUT``,
else ``./glgnn-out``):

    report.json        the run report (byte-stable for a fixed seed)
    timing.json        wall-clock seconds, kept apart so reports stay stable
    features.csv       per-feature selection weights
    fused_graph.tsv    fused top-k graph as an edge list
    nmat.json          per-epoch network-of-graphs matrices (--export-nmat)

Exit status: 0 success, 1 usage or configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import runner
from .data import DataError
from .graph_ops import EdgeList, write_edgelist
from .runner import ConfigError

# above this node count a run must be requested with --large
LARGE_N = 2000
DEFAULT_OUT = "glgnn-out"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags; usage errors here are 1
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _common(p):
    p.add_argument("--config", help="config JSON path or shipped name (wine, cancer, digits, ...)")
    p.add_argument("--dataset", help="built-in name, 'synthetic' or a manifest JSON")
    p.add_argument("--epochs", type=int)
    p.add_argument("--k", type=int, help="top-k neighbours per row")
    p.add_argument("--modules", type=int, help="number of sub-modules M")
    p.add_argument("--seed", type=int)
    p.add_argument("--seeds", type=int, help="Monte-Carlo repetitions")
    p.add_argument("--out", help="output directory")
    p.add_argument("--large", action="store_true",
                   help=f"allow datasets with more than {LARGE_N} nodes")


def build_parser():
    root = _Parser(prog="glgnn", description="Graph learning with a network of graphs.")
    sub = root.add_subparsers(dest="command", parser_class=_Parser, required=True)
    p = sub.add_parser("train", help="train GL-GNN and report test accuracy")
    _common(p)
    p.add_argument("--export-nmat", action="store_true", help="write per-epoch Nmat JSON")
    p = sub.add_parser("denoise", help="train on a graph with injected noise edges")
    _common(p)
    p.add_argument("--noise-edges", type=int)
    p = sub.add_parser("features", help="rank features and retrain without the top / bottom ones")
    _common(p)
    p.add_argument("--delete-fraction", type=float)
    p = sub.add_parser("baseline", help="train the kNN-GCN or logistic-regression reference")
    _common(p)
    p.add_argument("--which", choices=runner.BASELINES)
    p = sub.add_parser("sweep", help="one run per value of k, M or K")
    _common(p)
    p.add_argument("--param", required=True, choices=sorted(runner.SWEEPABLE))
    p.add_argument("--values", required=True, help="comma-separated integers, e.g. 1,2,3,4")
    return root


def _config(args):
    overrides = {
        "dataset": args.dataset, "epochs": args.epochs, "k": args.k, "modules": args.modules,
        "seed": args.seed, "seeds": args.seeds, "out": args.out,
        "noise_edges": getattr(args, "noise_edges", None),
        "delete_fraction": getattr(args, "delete_fraction", None),
        "baseline": getattr(args, "which", None),
    }
    if getattr(args, "export_nmat", False):
        overrides["export_nmat"] = True
    if args.config:
        return runner.load_config(args.config, **overrides)
    return runner.config_from_dict({}, **overrides)


def _check_size(cfg, large, err):
    ds, _ = runner.base_dataset(cfg)
    if isinstance(ds, tuple):
        ds = ds[0]
    if ds.N > LARGE_N or large:
        est = runner.graph_memory_bytes(ds.N, cfg.modules) / 2 ** 30
        print(f"{ds.name}: {ds.N} nodes, estimated peak memory {est:.2f} GiB", file=err)
    if ds.N > LARGE_N and not large:
        raise ConfigError(f"{ds.name} has {ds.N} nodes (> {LARGE_N}); rerun with --large")


def _out_dir(cfg):
    return Path(cfg.out or os.environ.get("GLGNN_OUT") or DEFAULT_OUT)


def _write_json(path, obj):
    path.write_text(json.dumps(obj, indent=2, allow_nan=False) + "\n", encoding="utf-8")


def _write_features(path, weights):
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["feature", "weight"])
        for row in weights:
            w.writerow([row["name"], repr(row["weight"])])


def _export(out, report, reports):
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    _write_json(out / "timing.json", {
        "wall_time": report.wall_time,
        "per_seed": [{"seed": r.seed, "wall_time": r.wall_time} for r in reports],
    })
    if report.feature_weights:
        _write_features(out / "features.csv", report.feature_weights)
    graph = report.extras.get("fused_graph")
    if graph is not None:
        write_edgelist(EdgeList.from_matrix(graph), out / "fused_graph.tsv",
                       header=f"fused top-k graph, seed {report.seed}")
    history = report.extras.get("nmat_history")
    if history is not None:
        _write_json(out / "nmat.json", {"seed": report.seed, "epochs": history})


def _values(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--values must be comma-separated integers, got {text!r}") from None


def run(args, out=None, err=None):
    out = out or sys.stdout
    err = err or sys.stderr
    cfg = _config(args)
    _check_size(cfg, args.large, err)
    dest = _out_dir(cfg)
    fns = {
        "train": runner.run_train,
        "denoise": runner.run_denoise,
        "features": runner.run_feature_report,
        "baseline": lambda c, seed: runner.run_baseline(c, seed=seed),
    }
    if args.command == "sweep":
        values = _values(args.values)
        results = runner.sweep(cfg, args.param, values)
        for v, rep in results:
            _export(dest / f"{args.param}={v}", rep, [rep])
            print(f"{args.param}={v}: test accuracy {rep.test_accuracy:.4f}", file=out)
        head = results[0][1]
        summary = replace(head, mode="sweep", sweep=[
            {"value": v, "test_accuracy": r.test_accuracy,
             "test_mean": (r.monte_carlo or {}).get("test_mean", r.test_accuracy)}
            for v, r in results])
        summary.config = {**cfg.to_dict(), "sweep_param": args.param}
        summary.extras = {}
        summary.wall_time = sum(r.wall_time for _, r in results)
        _export(dest, summary, [r for _, r in results])
        return 0
    head, reports = runner.monte_carlo(cfg, fns[args.command])
    _export(dest, head, reports)
    mc = head.monte_carlo
    if mc:
        print(f"{head.mode} {head.dataset}: test accuracy {mc['test_mean']:.4f} "
              f"± {mc['test_std']:.4f} over {len(reports)} seeds", file=out)
    else:
        print(f"{head.mode} {head.dataset}: test accuracy {head.test_accuracy:.4f}", file=out)
    if head.mode == "denoise":
        print(f"noise edges remaining {head.noise_remaining} / {head.noise_added}", file=out)
    print(f"wrote {dest}", file=out)
    return 0


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    try:
        return run(args)
    except (ConfigError, DataError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"glgnn: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # anything raised while training
        print(f"glgnn: run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
