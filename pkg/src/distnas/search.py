"""Alternating architecture-distribution / supernet-weight search loop."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import Dataset, minibatches
from .diagnostics import arch_loss_fn, dominant_eigenvalue, hutchinson_trace
from .ngvi import ArchDistribution, VAdamState, load_distribution, sample, save_distribution, vadam_step
from .proxies import NetTemplate, select_architecture
from .space import SKIP, CellSpace, discretize_argmax, format_arch, op_ratio
from .supernet import Batch, Supernet


class SearchDiverged(RuntimeError):
    def __init__(self, msg, trace):
        super().__init__(msg)
        self.trace = trace


@dataclass
class SearchConfig:
    num_intermediate_nodes: int = 3
    ops: tuple = ("skip", "dense_relu", "zero")
    hidden_dim: int = 16
    epochs: int = 30
    batch_size: int = 64
    w_lr: float = 0.05
    w_momentum: float = 0.9
    beta: float = 0.05
    gamma: float = 0.9
    delta: float = 1.0
    M: int = 3
    s0: float = 0.0
    order: str = "first"
    xi: float = 0.05
    weight_sample: str = "sample"
    selection: str = "argmax_mu"
    metric: str = "synflow"
    K: int = 100
    seed: int = 0
    init_seed: int = None  # supernet init; None follows ``seed``
    select_init_seed: int = 0
    darts_eps: float = None
    diag_every: int = 0
    diag_probes: int = 4
    diag_iters: int = 10
    checkpoint_every: int = 0
    divergence_factor: float = 10.0
    divergence_patience: int = 100

    def __post_init__(self):
        self.ops = tuple(self.ops)
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.order not in ("first", "second"):
            raise ValueError("order must be 'first' or 'second'")
        if self.order == "second" and not self.xi > 0:
            raise ValueError("xi must be > 0 for second-order search")
        if self.selection not in ("argmax_mu", "proxy"):
            raise ValueError("selection must be 'argmax_mu' or 'proxy'")
        if self.weight_sample not in ("sample", "mean"):
            raise ValueError("weight_sample must be 'sample' or 'mean'")

    @property
    def space(self):
        return CellSpace(self.num_intermediate_nodes, self.ops)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["ops"] = list(self.ops)
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise KeyError(f"unknown search config keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class SearchTrace:
    records: list = field(default_factory=list)

    def append(self, rec):
        if self.records and rec["step"] <= self.records[-1]["step"]:
            raise ValueError("trace steps must increase strictly")
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    def column(self, key):
        return [r.get(key) for r in self.records]

    def write_jsonl(self, path, wall_time=True):
        with open(path, "w") as fh:
            for r in self.records:
                if not wall_time:
                    r = {k: v for k, v in r.items() if k != "wall_ms"}
                fh.write(json.dumps(r, sort_keys=True) + "\n")

    @classmethod
    def read_jsonl(cls, path):
        with open(path) as fh:
            return cls([json.loads(line) for line in fh if line.strip()])


# ---------------------------------------------------------------------------
# architecture gradients


def arch_grad_first_order(net: Supernet, alpha, val_batch: Batch) -> np.ndarray:
    """Gradient of the mean validation loss w.r.t. the architecture logits."""
    a = ad.param(alpha)
    with ad.frozen(net.weights):
        root = net.forward_mixed(a, val_batch)
        root.backward()
    g = a.grad
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite architecture gradient")
    return g


def unrolled_grad(w, alpha, train_grads, val_grads, xi):
    """One-step-unrolled architecture gradient with the finite-difference mixed term.

    ``train_grads(w, alpha)`` and ``val_grads(w, alpha)`` return
    ``(grad_w, grad_alpha)`` of the respective losses. The second-derivative
    product is approximated with a central difference of radius
    ``0.01 / |grad_w L_val(w')|``.
    """
    if not xi > 0:
        raise ValueError("xi must be > 0")
    gw, _ = train_grads(w, alpha)
    w1 = w - xi * gw
    dw, da = val_grads(w1, alpha)
    norm = float(np.linalg.norm(dw))
    if not np.isfinite(norm) or not np.all(np.isfinite(da)):
        raise FloatingPointError("non-finite intermediate in unrolled gradient")
    if norm == 0.0:
        return da
    eps = 0.01 / norm
    _, gp = train_grads(w + eps * dw, alpha)
    _, gm = train_grads(w - eps * dw, alpha)
    out = da - xi * (gp - gm) / (2 * eps)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite unrolled gradient")
    return out


def _net_grads(net: Supernet, batch):
    def grads(w, alpha):
        saved = net.weights.flatten()
        net.weights.assign(w)
        try:
            net.weights.zero_grad()
            a = ad.param(alpha)
            root = net.forward_mixed(a, batch)
            root.backward()
            return net.weights.flat_grad(), a.grad.copy()
        finally:
            net.weights.assign(saved)

    return grads


def arch_grad_second_order(net: Supernet, alpha, train_batch, val_batch, xi) -> np.ndarray:
    return unrolled_grad(net.weights.flatten(), np.asarray(alpha, dtype=np.float64),
                         _net_grads(net, train_batch), _net_grads(net, val_batch), xi)


# ---------------------------------------------------------------------------
# the loop


def mu_hash(mu):
    return hashlib.sha256(np.ascontiguousarray(mu, dtype="<f8").tobytes()).hexdigest()[:16]


def _step_rng(seed, step):
    return np.random.default_rng([seed, 1, step])


def _epoch_batches(cfg, dataset, epoch):
    tr = minibatches(dataset.train, cfg.batch_size, np.random.default_rng([cfg.seed, 0, epoch, 0]))
    va = minibatches(dataset.val, cfg.batch_size, np.random.default_rng([cfg.seed, 0, epoch, 1]))
    n = min(len(tr), len(va))
    return list(zip(tr[:n], va[:n]))


def darts_step(state: VAdamState, grad_fn, eps):
    """Deterministic adaptive step: no sampling, no prior pull, denominator damped by ``eps``."""
    d = state.dist
    g = np.asarray(grad_fn(d.mu.copy()), dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite gradient")
    s_new = (1 - state.beta) * d.s + state.beta * (g * g)
    denom = s_new + eps
    mu_new = d.mu - state.beta * g / denom
    if state.gamma:
        mu_new = mu_new + state.gamma * ((d.s + eps) / denom) * (d.mu - state.mu_prev)
    state.mu_prev = d.mu
    d.mu, d.s = mu_new, s_new
    state.step += 1
    return g


class _Run:
    """Shared state and bookkeeping for one search run."""

    def __init__(self, cfg: SearchConfig, dataset: Dataset, method, out_dir=None, record_wall_time=True):
        self.cfg = cfg
        self.dataset = dataset
        self.method = method
        self.space = cfg.space
        self.net = Supernet(self.space, dataset.input_dim, cfg.hidden_dim, dataset.num_classes, seed=cfg.seed if cfg.init_seed is None else cfg.init_seed)
        N = len(dataset.val)
        dist = ArchDistribution.prior((self.space.num_edges, self.space.num_ops), cfg.delta, N, cfg.s0)
        self.state = VAdamState(dist, beta=cfg.beta, gamma=cfg.gamma, M=cfg.M, sample=(method == "balenas"))
        self.darts_eps = cfg.delta / N if cfg.darts_eps is None else cfg.darts_eps
        self.trace = SearchTrace()
        self.out_dir = None if out_dir is None else Path(out_dir)
        self.record_wall_time = record_wall_time
        self.start_step = 0
        self._over = 0
        self._val0 = None

    # -- checkpoints ---------------------------------------------------------

    def save_checkpoint(self, step, ck=None):
        if self.out_dir is None:
            return
        ck = self.out_dir / "checkpoint" if ck is None else ck
        ck.mkdir(parents=True, exist_ok=True)
        save_distribution(ck / "dist.json", self.state.dist, step, self.state.mu_prev,
                          extra={"method": self.method, "val0": self._val0, "over": self._over})
        self.net.save_weights(ck / "weights")
        vel = {k: v.ravel().tolist() for k, v in self.net.velocity.items()}
        (ck / "velocity.json").write_text(json.dumps(vel, sort_keys=True))
        self.trace.write_jsonl(ck / "trace.jsonl", wall_time=self.record_wall_time)

    def load_checkpoint(self, ck_dir):
        ck = Path(ck_dir)
        dist, step, mu_prev, rec = load_distribution(ck / "dist.json")
        self.state.dist = dist
        self.state.mu_prev = mu_prev
        self.state.step = step
        self.start_step = step
        self._val0 = rec.get("val0")
        self._over = rec.get("over", 0)
        net = Supernet.load_weights(ck / "weights")
        self.net.weights.assign(net.weights.flatten())
        vel = json.loads((ck / "velocity.json").read_text())
        self.net.velocity = {k: np.array(v).reshape(self.net.weights[k].value.shape) for k, v in vel.items()}
        self.trace = SearchTrace.read_jsonl(ck / "trace.jsonl")

    # -- one step ------------------------------------------------------------

    def arch_grad_fn(self, tr, va):
        cfg = self.cfg
        if cfg.order == "first":
            return lambda a: arch_grad_first_order(self.net, a, va)
        return lambda a: arch_grad_second_order(self.net, a, tr, va, cfg.xi)

    def step(self, step, epoch, tr, va):
        cfg = self.cfg
        t0 = time.perf_counter()
        rng = _step_rng(cfg.seed, step)
        grad_fn = self.arch_grad_fn(tr, va)
        if self.method == "balenas":
            vadam_step(self.state, grad_fn, rng)
            if cfg.weight_sample == "sample":
                alpha_w = sample(self.state.dist, rng)
            else:
                alpha_w = self.state.dist.mu.copy()
        else:
            darts_step(self.state, grad_fn, self.darts_eps)
            alpha_w = self.state.dist.mu.copy()
        train_loss = self.net.sgd_weight_step(alpha_w, tr, cfg.w_lr, cfg.w_momentum)
        mu = self.state.dist.mu
        with ad.frozen(self.net.weights):
            val_loss = ad.forward(self.net.forward_mixed(mu, va))
        arch = discretize_argmax(mu)
        rec = {
            "step": step,
            "epoch": epoch,
            "train_loss": train_loss,
            "val_loss": val_loss,
            "mu_hash": mu_hash(mu),
            "arch": format_arch(arch),
            "sampled_arch": format_arch(discretize_argmax(alpha_w)),
            "skip_ratio": op_ratio(self.space, arch, SKIP) if SKIP in self.space.ops else None,
            "trace_estimate": None,
            "dominant_eig": None,
        }
        if cfg.diag_every and step % cfg.diag_every == 0:
            p = ad.ParamSet([("alpha", mu)])
            fn = arch_loss_fn(self.net, va)
            drng = np.random.default_rng([cfg.seed, 3, step])
            rec["trace_estimate"] = hutchinson_trace(fn, p, cfg.diag_probes, drng)
            rec["dominant_eig"] = dominant_eigenvalue(fn, p, cfg.diag_iters, 1e-4, drng)
        if self.record_wall_time:
            rec["wall_ms"] = round((time.perf_counter() - t0) * 1000.0, 3)
        self.trace.append(rec)
        self._check_divergence(val_loss)

    def _check_divergence(self, val_loss):
        if self._val0 is None:
            self._val0 = val_loss
        if not np.isfinite(val_loss) or val_loss > self.cfg.divergence_factor * self._val0:
            self._over += 1
        else:
            self._over = 0
        if self._over >= self.cfg.divergence_patience:
            raise SearchDiverged(
                f"validation loss above {self.cfg.divergence_factor}x its initial value for {self._over} steps",
                self.trace,
            )

    def run(self):
        cfg = self.cfg
        step = 0
        for epoch in range(cfg.epochs):
            for tr, va in _epoch_batches(cfg, self.dataset, epoch):
                step += 1
                if step <= self.start_step:
                    continue
                self.step(step, epoch, tr, va)
                if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                    self.save_checkpoint(step)
        # the output directory doubles as a final, resumable checkpoint
        self.save_checkpoint(self.state.step, self.out_dir)
        return self


def select_final(dist: ArchDistribution, cfg: SearchConfig, dataset: Dataset, selection=None, metric=None, K=None):
    """Apply the configured selection rule (argmax on the mean, or sample-and-score)."""
    selection = cfg.selection if selection is None else selection
    if selection == "argmax_mu":
        return discretize_argmax(dist.mu)
    template = NetTemplate(cfg.space, dataset.input_dim, cfg.hidden_dim, dataset.num_classes)
    return select_architecture(
        dist, cfg.K if K is None else K, cfg.metric if metric is None else metric, template,
        batch=dataset.val, rng=np.random.default_rng([cfg.seed, 2]), init_seed=cfg.select_init_seed,
    )


def run_balenas(cfg: SearchConfig, dataset: Dataset, out_dir=None, resume_from=None, record_wall_time=True):
    """Search with VAdam on the architecture distribution; returns ``(dist, arch, trace)``."""
    run = _Run(cfg, dataset, "balenas", out_dir, record_wall_time)
    if resume_from is not None:
        run.load_checkpoint(resume_from)
    run.run()
    dist = run.state.dist
    return dist, select_final(dist, cfg, dataset), run.trace


def run_darts_baseline(cfg: SearchConfig, dataset: Dataset, out_dir=None, resume_from=None, record_wall_time=True):
    """Deterministic point-estimate baseline; returns ``(logits, arch, trace)``."""
    run = _Run(cfg, dataset, "darts", out_dir, record_wall_time)
    if resume_from is not None:
        run.load_checkpoint(resume_from)
    run.run()
    mu = run.state.dist.mu
    return mu.copy(), discretize_argmax(mu), run.trace


def random_arch(space: CellSpace, rng):
    return tuple(int(k) for k in rng.integers(0, space.num_ops, size=space.num_edges))
