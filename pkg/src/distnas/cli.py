"""Command-line entry point: ``distnas <subcommand> [options]``.

Every subcommand reads the TOML config (``--config``), applies ``--set
table.key=value`` overrides and then its own flags, and writes a
``*.manifest.json`` next to its outputs.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .bench import TabularBenchmark, build_oracle, oracle_rank, regret, sweep
from .config import ConfigError, RunManifest, config_hash, dump_config, load_config, oracle_config, search_config
from .data import gen_dataset, load_csv, test_path
from .diagnostics import arch_loss_fn, dominant_eigenvalue, hutchinson_trace, supernet_discretization_gap
from .ngvi import load_distribution
from .proxies import DATA_METRICS, METRICS, NetTemplate, select_architecture, write_scores_csv
from .search import SearchDiverged, run_balenas, run_darts_baseline
from .space import CellSpace, arch_id, format_arch, parse_arch, relax
from .supernet import Supernet


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(json.dumps({"error": "usage", "message": message}), file=sys.stderr)
        raise SystemExit(2)


def _manifest(command, cfg, seeds, artifacts, path):
    RunManifest(command, config_hash(cfg), seeds, artifacts).write(path)


def _sidecar(out):
    out = Path(out)
    return out.with_name(out.stem + ".manifest.json")


def _bench(path, cfg):
    return TabularBenchmark.from_csv(path, search_config(cfg).space)


def _search_cfg(cfg, seed):
    if seed is not None:
        cfg["search"]["seed"] = seed
    return search_config(cfg)


# -- subcommands --------------------------------------------------------------


def cmd_gen_data(args, cfg):
    d = cfg["data"]
    for k in ("kind", "n", "noise", "seed"):
        if getattr(args, k) is not None:
            d[k] = getattr(args, k)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    gen_dataset(d["kind"], d["n"], d["noise"], d["seed"], d.get("num_classes", 3), path=out)
    _manifest("gen-data", cfg, {"data": d["seed"]}, {"dataset": out, "test": test_path(out)}, _sidecar(out))
    print(out)


def cmd_oracle(args, cfg):
    if args.budget is not None:
        cfg["oracle"]["train_budget"] = args.budget
    ocfg = oracle_config(cfg)
    ds = load_csv(args.data)
    bench = build_oracle(search_config(cfg).space, ds, ocfg, workers=args.workers)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    bench.to_csv(out)
    _manifest("oracle", cfg, {"oracle": ocfg.seed}, {"bench": out}, _sidecar(out))
    best = max(bench.rows, key=lambda a: bench.rows[a][0])
    print(f"{len(bench)} archs; best {format_arch(best)} val_acc {bench.best_val:.4f}")


def cmd_search(args, cfg):
    scfg = _search_cfg(cfg, args.seed)
    ds = load_csv(args.data)
    out = Path(args.out)
    runner = run_balenas if args.method == "balenas" else run_darts_baseline
    try:
        _, arch, _ = runner(scfg, ds, out_dir=out, resume_from=args.resume, record_wall_time=not args.no_wall_time)
    except SearchDiverged as exc:
        out.mkdir(parents=True, exist_ok=True)
        exc.trace.write_jsonl(out / "trace.jsonl")
        raise
    row = {"method": args.method, "seed": scfg.seed, "arch_id": arch_id(scfg.space, arch), "op_indices": format_arch(arch),
           "val_acc": "", "regret": "", "rank": ""}
    if args.bench:
        bench = _bench(args.bench, cfg)
        row.update(val_acc=repr(bench.val_acc(arch)), regret=repr(regret(bench, arch)), rank=oracle_rank(bench, arch))
    with open(out / "result.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, list(row), lineterminator="\n")
        w.writeheader()
        w.writerow(row)
    arts = {"trace": out / "trace.jsonl", "dist": out / "dist.json", "weights": out / "weights.bin", "result": out / "result.csv"}
    if (out / "checkpoint").exists():
        arts["checkpoint"] = out / "checkpoint"
    _manifest(f"search --method {args.method}", cfg, {"search": scfg.seed, "init": scfg.init_seed}, arts, out / "manifest.json")
    print(f"{row['arch_id']}\t{row['op_indices']}\t{row['regret']}")


def _dist_paths(path):
    p = Path(path)
    if p.is_dir():
        return p / "dist.json", p / "weights"
    return p, p.with_name("weights")


def cmd_select(args, cfg):
    scfg = _search_cfg(cfg, args.seed)
    dist_file, weights = _dist_paths(args.dist)
    dist, *_ = load_distribution(dist_file)
    metric = args.metric or scfg.metric
    K = args.k or scfg.K
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}; choose from {METRICS}")
    ds = load_csv(args.data) if args.data else None
    if metric in DATA_METRICS and ds is None:
        raise ValueError(f"metric {metric!r} needs --data")
    if weights.with_suffix(".json").exists():
        m = json.loads(weights.with_suffix(".json").read_text())
        template = NetTemplate(CellSpace.from_dict(m["space"]), m["input_dim"], m["hidden_dim"], m["num_classes"])
    elif ds is not None:
        template = NetTemplate(scfg.space, ds.input_dim, scfg.hidden_dim, ds.num_classes)
    else:
        raise ValueError("no weights.json next to the distribution; pass --data to size the network")
    arch, scores = select_architecture(
        dist, K, metric, template, batch=None if ds is None else ds.val,
        rng=np.random.default_rng([scfg.seed, 2]), init_seed=scfg.select_init_seed, return_scores=True,
    )
    out = Path(args.out) if args.out else dist_file.parent / f"select_{metric}_k{K}.csv"
    write_scores_csv(out, template.space, scores)
    _manifest("select", cfg, {"select": scfg.seed, "init": scfg.select_init_seed}, {"dist": dist_file, "scores": out}, _sidecar(out))
    best = next(s for s in scores if s.arch == arch)
    print(f"{arch_id(template.space, arch)}\t{format_arch(arch)}\t{best.score!r}")


def _diag_point(net, mu, batch, dcfg, rng):
    fn = arch_loss_fn(net, batch)
    p = ad.ParamSet([("alpha", mu)])
    tr = hutchinson_trace(fn, p, dcfg["probes"], rng)
    eig = dominant_eigenvalue(fn, p, dcfg["iters"], 1e-4, rng)
    measured, taylor = supernet_discretization_gap(net, relax(mu), batch)
    return tr, eig, measured, taylor


def cmd_diag(args, cfg):
    scfg = _search_cfg(cfg, args.seed)
    dcfg = cfg["diag"]
    ds = load_csv(args.data)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    cols = ["method", "step", "val_loss", "skip_ratio", "trace_est", "dom_eig", "measured_gap", "taylor_gap"]
    rows = []
    if args.dist:
        dist_file, weights = _dist_paths(args.dist)
        dist, step, _, rec = load_distribution(dist_file)
        net = Supernet.load_weights(weights)
        vals = _diag_point(net, dist.mu, ds.val, dcfg, np.random.default_rng([scfg.seed, 3, step]))
        rows.append([rec.get("method", ""), step, "", "", *vals])
        inputs = {"dist": dist_file}
    else:
        # paired trajectories: same data order and init for both methods
        scfg.diag_every, scfg.diag_probes, scfg.diag_iters = dcfg["every"], dcfg["probes"], dcfg["iters"]
        for method, runner in (("balenas", run_balenas), ("darts", run_darts_baseline)):
            trace = runner(scfg, ds, record_wall_time=False)[2]
            for r in trace.records:
                if r["trace_estimate"] is not None:
                    rows.append([method, r["step"], r["val_loss"], r["skip_ratio"], r["trace_estimate"], r["dominant_eig"], "", ""])
        inputs = {}
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else ("" if v is None else v) for v in r])
    _manifest("diag", cfg, {"search": scfg.seed}, {**inputs, "diag": out}, _sidecar(out))
    print(out)


def cmd_sweep(args, cfg):
    ds = load_csv(args.data)
    bench = _bench(args.bench, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = sweep(cfg["search"], cfg["sweep"]["grid"], cfg["sweep"]["seeds"], ds, bench, path=out, workers=args.workers)
    _manifest("sweep", cfg, {"sweep": list(cfg["sweep"]["seeds"])}, {"bench": args.bench, "sweep": out}, _sidecar(out))
    for r in rows:
        if r["kind"] == "aggregate":
            cell = ", ".join(f"{k}={r[k]}" for k in cfg["sweep"]["grid"])
            print(f"{cell}: regret {r['regret']} +- {r['regret_std']} ({r['n_ok']} ok)")


def cmd_report(args, cfg):
    bench = _bench(args.bench, cfg)
    out = Path(args.out) if args.out else Path(args.trace).with_name("report.csv")
    with open(args.trace) as fh:
        recs = [json.loads(line) for line in fh if line.strip()]
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "arch_id", "op_indices", "val_acc", "regret", "rank"])
        for r in recs:
            arch = parse_arch(r["arch"])
            w.writerow([r["step"], arch_id(bench.space, arch), r["arch"], repr(bench.val_acc(arch)),
                        repr(regret(bench, arch)), oracle_rank(bench, arch)])
    _manifest("report", cfg, {}, {"bench": args.bench, "trace": args.trace, "report": out}, _sidecar(out))
    if recs:
        last = parse_arch(recs[-1]["arch"])
        print(f"{len(recs)} steps; final {format_arch(last)} regret {regret(bench, last):.4f}")


# -- parser -------------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--set", action="append", default=[], metavar="TABLE.KEY=VALUE", help="config override (repeatable)")
    common.add_argument("--dump-config", action="store_true", help="print the effective config and exit")

    p = _Parser(prog="distnas", description="Distribution-learning architecture search on a synthetic mini-benchmark.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    g = sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset CSV")
    g.add_argument("--out", required=True)
    g.add_argument("--kind", choices=("blobs", "moons"))
    g.add_argument("--n", type=int)
    g.add_argument("--noise", type=float)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    o = sub.add_parser("oracle", parents=[common], help="train every architecture standalone")
    o.add_argument("--data", required=True)
    o.add_argument("--out", required=True)
    o.add_argument("--budget", type=int)
    o.add_argument("--workers", type=int, help="defaults to $DISTNAS_WORKERS or 1")
    o.set_defaults(func=cmd_oracle)

    s = sub.add_parser("search", parents=[common], help="run one architecture search")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int)
    s.add_argument("--method", choices=("balenas", "darts"), default="balenas")
    s.add_argument("--resume", help="checkpoint directory to resume from")
    s.add_argument("--bench", help="oracle CSV; adds regret and rank to result.csv")
    s.add_argument("--no-wall-time", action="store_true", help="omit wall_ms from the trace (byte-stable output)")
    s.set_defaults(func=cmd_search)

    se = sub.add_parser("select", parents=[common], help="sample-and-score selection from a learned distribution")
    se.add_argument("--dist", required=True, help="search output directory or dist.json")
    se.add_argument("--metric", choices=METRICS)
    se.add_argument("--k", type=int)
    se.add_argument("--data", help="needed for snip and grasp")
    se.add_argument("--seed", type=int)
    se.add_argument("--out")
    se.set_defaults(func=cmd_select)

    d = sub.add_parser("diag", parents=[common], help="Hessian diagnostics at a checkpoint or along paired runs")
    d.add_argument("--data", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--dist", help="diagnose this checkpoint instead of running both methods")
    d.add_argument("--seed", type=int)
    d.set_defaults(func=cmd_diag)

    w = sub.add_parser("sweep", parents=[common], help="grid x seeds ablation")
    w.add_argument("--data", required=True)
    w.add_argument("--bench", required=True)
    w.add_argument("--out", required=True)
    w.add_argument("--workers", type=int)
    w.set_defaults(func=cmd_sweep)

    r = sub.add_parser("report", parents=[common], help="regret-vs-step CSV from a trace")
    r.add_argument("--bench", required=True)
    r.add_argument("--trace", required=True)
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def _fail(code, kind, exc):
    print(json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
    return code


def _dump(argv):
    """``--dump-config`` ignores the subcommand's required flags."""
    p = _Parser(prog="distnas", add_help=False)
    p.add_argument("--config")
    p.add_argument("--set", action="append", default=[])
    known, _ = p.parse_known_args(argv)
    try:
        sys.stdout.write(dump_config(load_config(known.config, known.set)))
    except ConfigError as exc:
        return _fail(3, "config", exc)
    return 0


def cli_main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    if "--dump-config" in argv:
        return _dump(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = load_config(args.config, args.set)
        search_config(cfg)  # validate early so bad [search] values exit 3
        args.func(args, cfg)
    except ConfigError as exc:
        return _fail(3, "config", exc)
    except Exception as exc:
        return _fail(1, "runtime", exc)
    return 0


def main():
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
