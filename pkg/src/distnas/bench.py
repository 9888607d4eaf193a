"""Brute-force tabular benchmark, search-quality metrics and configuration sweeps."""
from __future__ import annotations

import csv
import dataclasses
import itertools
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .data import Dataset, minibatches
from .space import CellSpace, arch_from_id, arch_id, enumerate_all, format_arch, parse_arch, validate_arch
from .supernet import Supernet

WORKERS_ENV = "DISTNAS_WORKERS"
BENCH_HEADER = ["arch_id", "op_indices", "val_acc", "test_acc", "seed"]


@dataclass
class OracleConfig:
    train_budget: int = 200
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 64
    hidden_dim: int = 16
    seed: int = 0
    n_inits: int = 3  # accuracies are averaged over this many init seeds


@dataclass
class TabularBenchmark:
    space: CellSpace
    rows: dict = field(default_factory=dict)

    def __post_init__(self):
        for arch, (va, te, _) in self.rows.items():
            if not (0.0 <= va <= 1.0 and 0.0 <= te <= 1.0):
                raise ValueError(f"accuracy out of range for {arch}")

    def __len__(self):
        return len(self.rows)

    def __contains__(self, arch):
        return tuple(arch) in self.rows

    def val_acc(self, arch):
        try:
            return self.rows[tuple(arch)][0]
        except KeyError:
            raise KeyError(f"architecture {format_arch(arch)} not in benchmark") from None

    @property
    def best_val(self):
        return max(r[0] for r in self.rows.values())

    def is_complete(self):
        return len(self.rows) == self.space.num_archs

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(BENCH_HEADER)
            for arch in sorted(self.rows, key=lambda a: arch_id(self.space, a)):
                va, te, seed = self.rows[arch]
                w.writerow([arch_id(self.space, arch), format_arch(arch), repr(float(va)), repr(float(te)), seed])

    @classmethod
    def from_csv(cls, path, space: CellSpace):
        rows = {}
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != BENCH_HEADER:
                raise ValueError(f"{path}: expected header {','.join(BENCH_HEADER)}")
            for r in reader:
                arch = validate_arch(space, parse_arch(r["op_indices"]))
                if arch_id(space, arch) != int(r["arch_id"]):
                    raise ValueError(f"{path}: arch_id {r['arch_id']} does not match {r['op_indices']}")
                rows[arch] = (float(r["val_acc"]), float(r["test_acc"]), int(r["seed"]))
        return cls(space, rows)


def train_standalone(space, arch, dataset: Dataset, cfg: OracleConfig):
    """Train one architecture from a fresh seeded init; returns ``(net, val_acc, test_acc)``."""
    net = Supernet(space, dataset.input_dim, cfg.hidden_dim, dataset.num_classes, seed=cfg.seed)
    rng = np.random.default_rng([cfg.seed, 17])
    steps = 0
    while steps < cfg.train_budget:
        for b in minibatches(dataset.train, cfg.batch_size, rng):
            if steps >= cfg.train_budget:
                break
            net.sgd_weight_step(arch, b, cfg.lr, cfg.momentum)
            steps += 1
    return net, net.accuracy(arch, dataset.val), net.accuracy(arch, dataset.test_split)


def _oracle_chunk(args):
    space, ids, dataset, cfg = args
    out = []
    for i in ids:
        arch = arch_from_id(space, i)
        accs = [train_standalone(space, arch, dataset, dataclasses.replace(cfg, seed=cfg.seed + k))[1:] for k in range(cfg.n_inits)]
        va, te = np.mean(accs, axis=0)
        out.append((i, float(va), float(te)))
    return out


def worker_count():
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def build_oracle(space: CellSpace, dataset: Dataset, cfg: OracleConfig = None, cap=None, workers=None) -> TabularBenchmark:
    """Train every architecture in ``space`` standalone and tabulate val/test accuracy."""
    cfg = cfg or OracleConfig()
    ids = [arch_id(space, a) for a in (enumerate_all(space) if cap is None else enumerate_all(space, cap))]
    workers = worker_count() if workers is None else workers
    if workers <= 1:
        results = _oracle_chunk((space, ids, dataset, cfg))
    else:
        chunks = [ids[i::workers] for i in range(workers)]
        with ProcessPoolExecutor(workers) as ex:
            results = [r for part in ex.map(_oracle_chunk, [(space, c, dataset, cfg) for c in chunks]) for r in part]
    results.sort()
    return TabularBenchmark(space, {arch_from_id(space, i): (va, te, cfg.seed) for i, va, te in results})


def regret(bench: TabularBenchmark, arch) -> float:
    return bench.best_val - bench.val_acc(arch)


def oracle_rank(bench: TabularBenchmark, arch) -> int:
    """1 + number of architectures with strictly higher validation accuracy."""
    v = bench.val_acc(arch)
    return 1 + sum(1 for r in bench.rows.values() if r[0] > v)


def spearman(bench: TabularBenchmark, scores) -> float:
    """Rank correlation (average ranks for ties) between scores and benchmark val accuracy."""
    common = sorted((tuple(a) for a in scores if tuple(a) in bench.rows), key=lambda a: arch_id(bench.space, a))
    if len(common) < 3:
        raise ValueError(f"need at least 3 architectures in common, got {len(common)}")
    x = [scores[a] for a in common]
    y = [bench.val_acc(a) for a in common]
    return float(stats.spearmanr(x, y).statistic)


# ---------------------------------------------------------------------------
# sweeps


def grid_cells(grid: dict):
    """Cartesian product of a ``{key: [values]}`` grid, in key order."""
    if not grid:
        raise ValueError("sweep grid is empty")
    keys = list(grid)
    return [dict(zip(keys, vals)) for vals in itertools.product(*(grid[k] for k in keys))]


def _sweep_job(args):
    from .search import SearchConfig, run_balenas

    base, cell, seed, dataset, bench = args
    try:
        cfg = SearchConfig.from_dict({**base, **cell, "seed": seed})
        _, arch, _ = run_balenas(cfg, dataset, record_wall_time=False)
        return {"arch_id": arch_id(bench.space, arch), "regret": regret(bench, arch), "status": "ok", "error": ""}
    except Exception as exc:  # a failed cell is recorded, the sweep goes on
        return {"arch_id": "", "regret": None, "status": "error", "error": f"{type(exc).__name__}: {exc}"}


def sweep(base_config: dict, grid: dict, seeds, dataset: Dataset, bench: TabularBenchmark, path=None, workers=None):
    """Run the search for every grid cell and seed; returns per-run and aggregate rows."""
    seeds = list(seeds)
    if not seeds:
        raise ValueError("sweep needs at least one seed")
    cells = grid_cells(grid)
    jobs = [(dict(base_config), cell, s, dataset, bench) for cell in cells for s in seeds]
    workers = worker_count() if workers is None else workers
    if workers <= 1:
        results = [_sweep_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_sweep_job, jobs))
    keys = list(grid)
    rows = []
    for (_, cell, s, _, _), res in zip(jobs, results):
        rows.append({"kind": "run", **{k: cell[k] for k in keys}, "seed": s, **res})
    for cell in cells:
        regs = [r["regret"] for r in rows if r["kind"] == "run" and r["status"] == "ok" and all(r[k] == cell[k] for k in keys)]
        rows.append({
            "kind": "aggregate", **cell, "seed": "",
            "arch_id": "",
            "regret": float(np.mean(regs)) if regs else None,
            "regret_std": float(np.std(regs)) if regs else None,
            "n_ok": len(regs),
            "status": "ok" if regs else "error", "error": "",
        })
    if path is not None:
        write_sweep_csv(path, rows, keys)
    return rows


def write_sweep_csv(path, rows, keys):
    cols = ["kind", *keys, "seed", "arch_id", "regret", "regret_std", "n_ok", "status", "error"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow(["" if r.get(c) is None else (repr(r[c]) if isinstance(r.get(c), float) else r[c]) for c in cols])


def config_fields(cls):
    return [f.name for f in dataclasses.fields(cls)]
