"""Command line entry point: ``adacanon <subcommand> ...``.

Exit status is 0 iff every asserted check of the subcommand passed.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from .canon import Budget
from .groups import RngStream
from .harness import (GRAPH_TASKS, ExperimentConfig, TrainedModel, build_dataset, compare_search_strategies,
                      dataset_from_clouds, dataset_from_graphs, invariance_audit, kfold_evaluate,
                      load_config, parse_config, predict, search_ordering_checks, train_one_vs_rest)
from .nn import load_params, save_params
from .pointcloud import PointBackbone, PointCloudModel
from .spectral import AnlsfModel
from .training import NodeMlp

log = logging.getLogger("adacanon")


def _config(args) -> ExperimentConfig:
    overrides = {}
    for item in args.set or []:
        key, _, value = item.partition("=")
        overrides[key.strip()] = value
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if overrides:
        cfg = parse_config("\n".join(f"{k} = {v}" for k, v in overrides.items()), cfg)
    return cfg


def _dataset(cfg, path):
    if path is None:
        return build_dataset(cfg)
    if cfg.task in GRAPH_TASKS:
        return dataset_from_graphs(data_mod.read_graphs(path), cfg)
    return dataset_from_clouds(data_mod.read_clouds(path))


def _model_from_checkpoint(path) -> TrainedModel:
    nets, header = load_params(path)
    extra = header["extra"]
    cfg = ExperimentConfig(**extra["config"])
    n_classes = extra["n_classes"]
    heads = [nets[f"head{d}"] for d in range(n_classes)]
    if cfg.model == "anlsf":
        model = AnlsfModel(nets["phi"], heads, tuple(extra["dims"]), extra["channels"])
    elif cfg.model == "node-mlp":
        model = NodeMlp(nets["phi"], heads)
    else:
        bb = {k.split(".", 1)[1]: v for k, v in nets.items() if k.startswith("backbone.")}
        model = PointCloudModel(PointBackbone(cfg.model, bb, cfg.knn), heads)
    return TrainedModel(cfg, model, [], -1, 0)


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    if cfg.task == "grid":
        graphs = data_mod.make_grid_task(data_mod.GridTaskConfig(cfg.side, cfg.period, cfg.noise, cfg.samples,
                                                                 cfg.seed))
        digest = data_mod.write_graphs(out, graphs)
        notes = data_mod.GRID_NOTES
    elif cfg.task == "band-orientation":
        graphs = data_mod.make_band_orientation_graphs(cfg.n_nodes, cfg.samples, 2, cfg.separation, cfg.noise,
                                                       seed=cfg.seed)
        digest = data_mod.write_graphs(out, graphs)
        notes = {"signal_plane": "eigenvectors of the two smallest non-zero normalized-Laplacian eigenvalues"}
    else:
        clouds = data_mod.make_shape_dataset(n_points=cfg.n_points, per_class=cfg.per_class, seed=cfg.seed)
        digest = data_mod.write_clouds(out, clouds)
        notes = {"pose": "canonical; rotate test poses at evaluation time", "jitter": 0.01}
    manifest = out.with_name(out.stem + ".manifest.json")
    data_mod.write_manifest(manifest, f"adacanon.data:{cfg.task}", cfg.to_dict(), cfg.seed, digest, notes)
    print(f"wrote {out} ({digest[:12]}) and {manifest}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    data = _dataset(cfg, args.data)
    trained = train_one_vs_rest(cfg, data, np.arange(len(data)), cfg.seed)
    extra = {"config": cfg.to_dict(), "n_classes": data.n_classes, "history": trained.history}
    if cfg.model == "anlsf":
        extra.update(dims=list(trained.model.dims), channels=trained.model.channels)
    save_params(args.out, trained.model.nets(), cfg.seed, extra)
    print(f"trained {cfg.model} for {len(trained.history)} epochs; wrote {args.out}")
    return 0


def cmd_eval(args) -> int:
    if args.model:
        trained = _model_from_checkpoint(args.model)
        cfg = trained.cfg
        data = _dataset(cfg, args.data)
        preds, _, evals = predict(trained, data, np.arange(len(data)), RngStream(cfg.seed, 0).child("eval"))
        acc = float(np.mean(preds == data.labels))
        result = {"accuracy": acc, "n": len(data), "evaluations": int(np.sum(evals))}
        text = json.dumps(result, indent=2, sort_keys=True) + "\n"
        print(f"accuracy {acc:.4f} on {len(data)} samples")
    else:
        cfg = _config(args)
        data = _dataset(cfg, args.data)
        report = kfold_evaluate(cfg, data, threads=args.threads, fold_limit=args.fold_limit)
        acc = report.mean
        text = report.to_json()
        print(f"{cfg.model}{' (frozen)' if cfg.frozen else ''}: {100 * report.mean:.2f} +- {100 * report.std:.2f}"
              f" over {len(report.folds)} folds")
        if args.out:
            report.write(args.out)
    if args.out and args.model:
        Path(args.out).write_text(text)
    return _check("accuracy", acc, args.min_accuracy, args.max_accuracy)


def _check(name, value, lo=None, hi=None) -> int:
    ok = (lo is None or value >= lo) and (hi is None or value <= hi)
    if lo is not None or hi is not None:
        print(f"{'PASS' if ok else 'FAIL'} {name} = {value:.4f} (bounds {lo}, {hi})")
    return 0 if ok else 1


def cmd_compare_search(args) -> int:
    cfg = _config(args)
    data = _dataset(cfg, args.data)
    rows = compare_search_strategies(cfg, data=data, csv_path=args.csv)
    for r in rows:
        print(f"{r['strategy']:>12}  acc {r['accuracy']:.4f}  evals {r['evaluations']:>8}  {r['seconds']:.2f}s")
    if not args.assert_ordering:
        return 0
    checks = search_ordering_checks(rows)
    for k, v in checks.items():
        print(f"{'PASS' if v else 'FAIL'} {k}")
    return 0 if all(checks.values()) else 1


def cmd_audit(args) -> int:
    trained = _model_from_checkpoint(args.model)
    cfg = trained.cfg
    data = _dataset(cfg, args.data)
    budget = cfg.budget
    if args.candidates or args.refine_steps is not None:
        budget = Budget(args.candidates or budget.candidates,
                        budget.refine_steps if args.refine_steps is None else args.refine_steps,
                        budget.step_size, budget.refine_top_only)
    report = invariance_audit(trained, data, args.trials, args.mode, budget, seed=cfg.seed)
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"{args.mode}: agreement {report['agreement']:.3f}, exact {report['exact']}/{report['trials']}, "
          f"max dlogit {report['max_dlogit']:.3g}")
    if args.mode == "orbit-consistent":
        return 0 if report["passed"] else 1
    return _check("agreement", report["agreement"], args.min_agreement)


def cmd_report(args) -> int:
    rows = []
    for path in args.metrics:
        m = json.loads(Path(path).read_text())
        cfg = m["config"]
        name = cfg["model"] + (" (frozen)" if cfg["frozen"] else "")
        rows.append({"file": str(path), "task": cfg["task"], "model": name, "folds": len(m["folds"]),
                     "accuracy_mean": m["accuracy_mean"], "accuracy_std": m["accuracy_std"]})
    for r in rows:
        print(f"{r['task']:>16}  {r['model']:>18}  {100 * r['accuracy_mean']:6.2f} +- {100 * r['accuracy_std']:.2f}"
              f"  ({r['folds']} folds)")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    status = 0
    for r in rows:
        status |= _check(f"{r['model']} mean accuracy", r["accuracy_mean"], args.min_mean, None) \
            if args.min_mean is not None else 0
    return status


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adacanon", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        if data:
            sp.add_argument("--data", help="dataset JSONL (default: generate from the config)")

    sp = sub.add_parser("gen-data", help="write a synthetic dataset and its manifest")
    common(sp, data=False)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train on the whole dataset and save parameters")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="k-fold evaluation, or a saved model on a dataset")
    common(sp)
    sp.add_argument("--model", help="evaluate this checkpoint instead of running k-fold")
    sp.add_argument("--out", help="metrics JSON path")
    sp.add_argument("--threads", type=int, help="fold workers (default: $ACANON_THREADS or 1)")
    sp.add_argument("--fold-limit", type=int)
    sp.add_argument("--min-accuracy", type=float)
    sp.add_argument("--max-accuracy", type=float)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("compare-search", help="sampling vs sample-and-refine budgets")
    common(sp)
    sp.add_argument("--csv")
    sp.add_argument("--assert-ordering", action="store_true")
    sp.set_defaults(func=cmd_compare_search)

    sp = sub.add_parser("audit-invariance", help="prediction invariance under random group actions")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data")
    sp.add_argument("--mode", choices=("orbit-consistent", "resampled"), default="orbit-consistent")
    sp.add_argument("--trials", type=int, default=100)
    sp.add_argument("--candidates", type=int)
    sp.add_argument("--refine-steps", type=int)
    sp.add_argument("--min-agreement", type=float)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_audit)

    sp = sub.add_parser("report", help="summarize metrics JSON files")
    sp.add_argument("metrics", nargs="+")
    sp.add_argument("--csv")
    sp.add_argument("--min-mean", type=float)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

