"""Training-free saliency scores and sample-and-score architecture selection."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .ngvi import ArchDistribution, sample
from .space import PARAMETRIC, ZERO, arch_id, discretize_argmax, validate_arch
from .supernet import Batch, Supernet

METRICS = ("snip", "grasp", "synflow")
DATA_METRICS = frozenset({"snip", "grasp"})


@dataclass(frozen=True)
class ProxyScore:
    arch: tuple
    metric: str
    score: float
    init_seed: int


class NetTemplate:
    """Recipe for building fresh-initialised networks for scoring."""

    def __init__(self, space, input_dim=2, hidden_dim=16, num_classes=3):
        self.space = space
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.num_classes = num_classes

    def build(self, init_seed) -> Supernet:
        return Supernet(self.space, self.input_dim, self.hidden_dim, self.num_classes, seed=init_seed)


def _net(template, init_seed):
    return template if isinstance(template, Supernet) else template.build(init_seed)


def _arch_loss(net, arch, batch):
    names = net.arch_param_names(arch)
    params = net.weights.subset(names)

    def loss_fn(p):
        return net.forward_discrete(arch, batch)

    return loss_fn, params


def snip_saliency(loss_fn, params: ad.ParamSet) -> float:
    """sum_i |dL/dtheta_i * theta_i| for any scalar loss over ``params``."""
    loss, g = ad.value_and_grad(loss_fn, params)
    if not math.isfinite(loss):
        raise ad.NonFiniteError(f"non-finite loss {loss}")
    return float(np.sum(np.abs(g * params.flatten())))


def grasp_saliency(loss_fn, params: ad.ParamSet) -> float:
    """sum_i -(H g)_i * theta_i with ``H g`` from finite differences."""
    loss, g = ad.value_and_grad(loss_fn, params)
    if not math.isfinite(loss):
        raise ad.NonFiniteError(f"non-finite loss {loss}")
    hg = ad.hvp(loss_fn, params, g)
    return float(-np.sum(hg * params.flatten()))


def snip_score(arch, net_template, batch: Batch, init_seed=0) -> float:
    net = _net(net_template, init_seed)
    return snip_saliency(*_arch_loss(net, validate_arch(net.space, arch), batch))


def grasp_score(arch, net_template, batch: Batch, init_seed=0) -> float:
    net = _net(net_template, init_seed)
    return grasp_saliency(*_arch_loss(net, validate_arch(net.space, arch), batch))


def _synflow_graph(net, arch, weights):
    """R = sum of outputs of the |theta|, activation-free network on an all-ones input."""
    space = net.space
    n = space.num_intermediate_nodes
    x = ad.constant(np.ones((1, net.input_dim)))
    nodes = [ad.matmul(x, weights["stem.W"])]
    for j in range(1, n + 1):
        acc = None
        for e, (i, jj) in enumerate(space.edges):
            if jj != j:
                continue
            kind = space.ops[arch[e]]
            if kind == ZERO:
                continue
            if kind in PARAMETRIC:
                out = ad.matmul(nodes[i], weights[f"e{e}.{kind}.W"])
            elif kind == "avg":
                out = ad.matmul(nodes[i], net._avg)
            else:
                out = nodes[i]
            acc = out if acc is None else ad.add(acc, out)
        nodes.append(acc if acc is not None else ad.constant(np.zeros((1, net.hidden_dim))))
    cell = nodes[1]
    for node in nodes[2:]:
        cell = ad.add(cell, node)
    cell = ad.mul(cell, 1.0 / n)
    return ad.total(ad.matmul(cell, weights["head.W"]))


def synflow_score(arch, net_template, init_seed=0) -> float:
    """Synaptic-flow score over the weight matrices an architecture uses.

    Biases are left out so that R is the plain product of absolute weights
    along every input-output path. If R overflows, every layer is rescaled by
    its max-abs entry and the log of the dropped factor is added back.
    """
    net = _net(net_template, init_seed)
    arch = validate_arch(net.space, arch)
    names = [nm for nm in net.arch_param_names(arch) if nm.endswith(".W")]
    raw = {nm: np.abs(net.weights[nm].value) for nm in names}

    def score(mats):
        ps = ad.ParamSet(mats.items())
        val, g = ad.value_and_grad(lambda p: _synflow_graph(net, arch, p), ps)
        return val, float(np.sum(g * ps.flatten()))

    with np.errstate(over="ignore", invalid="ignore"):
        r, s = score(raw)
    if math.isfinite(r) and math.isfinite(s):
        return s
    scales = {nm: float(np.max(m)) or 1.0 for nm, m in raw.items()}
    _, s = score({nm: m / scales[nm] for nm, m in raw.items()})
    # every path crosses stem and head; intermediate layers are approximated
    # by the deepest path, which dominates after overflow
    log_factor = sum(math.log(v) for v in scales.values())
    if s <= 0:
        return 0.0
    return math.exp(min(math.log(s) + log_factor, 709.0))


def score_arch(metric, arch, net_template, batch=None, init_seed=0) -> float:
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}; choose from {METRICS}")
    if metric in DATA_METRICS and batch is None:
        raise ValueError(f"metric {metric!r} needs a data batch")
    if metric == "snip":
        return snip_score(arch, net_template, batch, init_seed)
    if metric == "grasp":
        return grasp_score(arch, net_template, batch, init_seed)
    return synflow_score(arch, net_template, init_seed)


def sample_candidates(dist: ArchDistribution, K, rng) -> list:
    """Draw ``K`` logits from ``dist`` and return the distinct argmax architectures, sorted."""
    if K < 1:
        raise ValueError("K must be >= 1")
    return sorted({discretize_argmax(sample(dist, rng)) for _ in range(K)})


def select_architecture(dist, K, metric, net_template, batch=None, rng=None, init_seed=0, return_scores=False):
    """Score the distinct sampled architectures and return the best one.

    Ties go to the lexicographically smallest architecture. Weights come from
    one shared ``init_seed`` for all candidates.
    """
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}; choose from {METRICS}")
    if metric in DATA_METRICS and batch is None:
        raise ValueError(f"metric {metric!r} needs a data batch")
    rng = np.random.default_rng(rng)
    cands = sample_candidates(dist, K, rng)
    template = net_template.build(init_seed) if isinstance(net_template, NetTemplate) else net_template
    scores = [ProxyScore(a, metric, score_arch(metric, a, template, batch, init_seed), init_seed) for a in cands]
    best = scores[0]
    for sc in scores[1:]:
        if sc.score > best.score:
            best = sc
    if return_scores:
        return best.arch, scores
    return best.arch


def write_scores_csv(path, space, scores):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["arch_id", "metric", "score", "init_seed"])
        for sc in sorted(scores, key=lambda s: (arch_id(space, s.arch), s.metric)):
            w.writerow([arch_id(space, sc.arch), sc.metric, repr(float(sc.score)), sc.init_seed])


def synflow_chain(layers) -> float:
    """Synflow score of a plain sequence of dense layers (no biases, no activations)."""
    mats = [np.abs(np.atleast_2d(np.asarray(m, dtype=np.float64))) for m in layers]
    ps = ad.ParamSet((f"l{i}", m) for i, m in enumerate(mats))

    def loss_fn(p):
        h = ad.constant(np.ones((1, mats[0].shape[0])))
        for node in p.nodes:
            h = ad.matmul(h, node)
        return ad.total(h)

    _, g = ad.value_and_grad(loss_fn, ps)
    return float(np.sum(g * ps.flatten()))
